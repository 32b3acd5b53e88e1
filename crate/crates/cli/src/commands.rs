use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use kwc_core::diagnostics::{
    audit_apriori, audit_dissipation, lyapunov_audit, omega_limit, AuditReport, OmegaReport,
};
use kwc_core::energy::{phi, signed_weighted_tv};
use kwc_core::io::{write_pgm, SavedTrajectory, Snapshot};
use kwc_core::model::derived_constants;
use kwc_core::stepper::run;
use kwc_core::{Field, ModelSpec, Norm, RegularizedNorm, StepRecord, Trajectory};
use rayon::prelude::*;

use crate::config::RunConfig;

pub const TRACE_HEADER: &str =
    "step,time,dirichlet_v,gamma,g,weighted_tv,theta_dirichlet,total,coupling,lyapunov,v_inc,theta_inc,slack";

/// Worker pool capped by `KWC_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("KWC_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("KWC_THREADS must be a positive integer, got `{v}`"))?;
        b = b.num_threads(n.max(1));
    }
    Ok(b.build()?)
}

/// Streams one trace row per record.
struct TraceWriter {
    out: BufWriter<File>,
    c: f64,
    h: f64,
    u_dagger: Field,
    /// `sum_k h |u_k - u_dag|^2`
    acc: f64,
    error: Option<std::io::Error>,
}

impl TraceWriter {
    fn create(path: &Path, cfg: &RunConfig, h: f64) -> Result<Self> {
        let mut out = BufWriter::new(
            File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        );
        writeln!(out, "{TRACE_HEADER}")?;
        Ok(Self {
            out,
            c: cfg.spec.c,
            h,
            u_dagger: cfg.u_dagger(),
            acc: 0.0,
            error: None,
        })
    }

    fn row(&mut self, r: &StepRecord) {
        if self.error.is_some() {
            return;
        }
        let grid = *r.theta.grid();
        let inner = |a: &Field, b: &Field| grid.inner(a, b).expect("fields share the run grid");
        let coupling = match &r.u {
            Some(u) => {
                let d = u.axpy(-1.0, &self.u_dagger).expect("same grid");
                self.acc += self.h * inner(&d, &d);
                format!("{}", self.c * inner(u, &r.v.w))
            }
            None => String::new(),
        };
        let lyap = r.energy.total + self.c * inner(&self.u_dagger, &r.v.w) - self.c * self.c * self.acc;
        let e = &r.energy;
        let res = writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.index,
            r.time,
            e.dirichlet_v,
            e.potential_gamma,
            e.interaction_g,
            e.weighted_tv,
            e.theta_dirichlet,
            e.total,
            coupling,
            lyap,
            r.v_increment,
            r.theta_increment,
            r.slack
        );
        if let Err(err) = res {
            self.error = Some(err);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

fn write_snapshot(dir: &Path, r: &StepRecord, pgm: bool) -> Result<()> {
    let snap = Snapshot::of_state(r.index as u64, r.time, &r.v, &r.theta);
    let stem = format!("step_{:06}", r.index);
    snap.write(&dir.join(format!("{stem}.bin")))?;
    if pgm {
        for (name, field) in &snap.components {
            write_pgm(&dir.join(format!("{stem}_{name}.pgm")), field)?;
        }
    }
    Ok(())
}

/// Everything a finished (or failed) run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub audits: Vec<AuditReport>,
    pub omega: Option<OmegaReport>,
    /// Solver failure message; outputs up to the failure are kept.
    pub failure: Option<String>,
}

impl RunOutcome {
    pub fn audits_passed(&self) -> bool {
        self.audits.iter().all(AuditReport::passed)
            && self.omega.as_ref().map(|o| o.converged && o.lyapunov_monotone).unwrap_or(true)
    }

    /// 0 on success, 1 when an audit fails, 2 when the solver failed.
    pub fn exit_code(&self) -> u8 {
        if self.failure.is_some() {
            2
        } else if self.audits_passed() {
            0
        } else {
            1
        }
    }
}

/// Runs the audits requested in `cfg` on a trajectory.
pub fn run_audits(cfg: &RunConfig, traj: &Trajectory) -> Result<(Vec<AuditReport>, Option<OmegaReport>)> {
    let a = &cfg.audits;
    let f0 = traj.records[0].energy.total;
    let tol = a.slack_rel * (1.0 + f0.abs());
    let u_dag = cfg.u_dagger();
    let mut reports = Vec::new();
    if a.dissipation {
        reports.push(audit_dissipation(traj, &u_dag, tol)?);
    }
    if a.apriori {
        let first = &traj.records[0];
        let k = derived_constants(
            &traj.spec,
            first.theta.sup_norm(),
            traj.grid.domain_measure(),
        )?;
        let anchor = (first.v.clone(), first.theta.clone());
        reports.push(audit_apriori(traj, &anchor, &k, tol)?);
    }
    if a.lyapunov {
        let j0 = kwc_core::energy::lyapunov(traj, &u_dag)?[0];
        reports.push(lyapunov_audit(traj, &u_dag, a.slack_rel * (1.0 + j0.abs()))?);
    }
    let omega = if a.omega_limit {
        let u_inf = traj.spec.source.u_dagger();
        Some(omega_limit(traj, &u_inf, a.spread_tol, a.residual_tol)?)
    } else {
        None
    };
    Ok((reports, omega))
}

fn write_audits(out: &Path, reports: &[AuditReport], omega: Option<&OmegaReport>) -> Result<()> {
    let mut text = String::new();
    let mut csv = String::from("report,name,worst_slack,pass\n");
    for r in reports {
        write!(text, "{r}")?;
        for line in r.to_csv().lines().skip(1) {
            writeln!(csv, "{},{line}", r.title)?;
        }
    }
    if let Some(o) = omega {
        write!(text, "{o}")?;
        fs::write(out.join("omega.csv"), o.to_csv())?;
    }
    fs::write(out.join("audit.txt"), text)?;
    fs::write(out.join("audit.csv"), csv)?;
    Ok(())
}

fn saved(traj: &Trajectory) -> SavedTrajectory {
    SavedTrajectory {
        h: traj.h,
        grid: traj.grid,
        states: traj
            .records
            .iter()
            .map(|r| (r.v.clone(), r.theta.clone(), r.u.clone()))
            .collect(),
    }
}

/// Writes `trace.csv`, `snapshots/`, `trajectory.bin` and the audit reports
/// under `out`.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    run_with(cfg, cfg.h, cfg.steps, out, true)
}

fn run_with(cfg: &RunConfig, h: f64, steps: usize, out: &Path, extras: bool) -> Result<RunOutcome> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let snap_dir = out.join("snapshots");
    if extras {
        fs::create_dir_all(&snap_dir)?;
    }
    let mut trace = TraceWriter::create(&out.join("trace.csv"), cfg, h)?;
    let mut snap_error = None;
    let every = cfg.snapshot_every;
    let result = run(&cfg.spec, &cfg.initial, h, steps, &cfg.norm, &cfg.tol, |r| {
        trace.row(r);
        if extras && snap_error.is_none() && (r.index % every == 0 || r.index == steps) {
            snap_error = write_snapshot(&snap_dir, r, cfg.pgm).err();
        }
    });
    trace.finish()?;
    if let Some(e) = snap_error {
        return Err(e);
    }
    let (trajectory, failure) = match result {
        Ok(t) => (t, None),
        Err(e) => {
            let msg = e.to_string();
            let partial = *e.partial;
            // keep the last completed state on disk
            if extras && !partial.records.is_empty() {
                write_snapshot(&snap_dir, partial.last(), cfg.pgm)?;
            }
            (partial, Some(msg))
        }
    };
    if extras && !trajectory.records.is_empty() {
        saved(&trajectory).write(&out.join("trajectory.bin"))?;
    }
    let (audits, omega) = if failure.is_none() {
        run_audits(cfg, &trajectory)?
    } else {
        (Vec::new(), None)
    };
    if extras {
        write_audits(out, &audits, omega.as_ref())?;
    }
    Ok(RunOutcome {
        trajectory,
        audits,
        omega,
        failure,
    })
}

/// Re-audits a saved trajectory with the model from `cfg`.
pub fn cmd_audit(cfg: &RunConfig, trajectory: &Path, out: &Path) -> Result<RunOutcome> {
    let saved = SavedTrajectory::read(trajectory)
        .with_context(|| format!("cannot load trajectory {}", trajectory.display()))?;
    if saved.grid != cfg.grid {
        bail!("trajectory grid does not match the config grid");
    }
    let traj = Trajectory::from_fields(cfg.spec.clone(), cfg.norm, saved.h, saved.states)?;
    let (audits, omega) = run_audits(cfg, &traj)?;
    fs::create_dir_all(out)?;
    write_audits(out, &audits, omega.as_ref())?;
    Ok(RunOutcome {
        trajectory: traj,
        audits,
        omega,
        failure: None,
    })
}

/// Derived constants with their inputs and the `A_* <= 2 delta_* sqrt(R_*)` check.
pub fn cmd_constants(cfg: &RunConfig) -> Result<String> {
    let k = derived_constants(&cfg.spec, cfg.initial.theta0_sup(), cfg.grid.domain_measure())?;
    let holds = k.a_star_bound_holds(cfg.spec.delta_star);
    let regime = cfg.spec.nu < k.nu_star && cfg.sigma() < k.nu_star;
    Ok(format!(
        "{k}\ncheck A_star <= 2 delta_star sqrt(R_star): {}\nsmall-parameter regime (nu, sigma < nu_star): {}\n",
        if holds { "holds" } else { "VIOLATED" },
        if regime { "yes" } else { "no" }
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaRow {
    pub sigma: f64,
    pub phi_sigma: f64,
    pub phi_exact: f64,
    pub deviation: f64,
    pub bound: f64,
}

impl SigmaRow {
    pub fn within(&self) -> bool {
        self.deviation <= self.bound
    }
}

pub const SIGMA_HEADER: &str = "sigma,phi_sigma,phi_exact,deviation,bound,within";

/// Compares the regularized and exact orientation energies of the config's
/// initial fields for each `sigma` (norm family taken from the config).
pub fn cmd_sigma_sweep(cfg: &RunConfig, sigmas: &[f64]) -> Result<Vec<SigmaRow>> {
    let family = cfg
        .norm
        .smooth()
        .map(|n| n.family())
        .context("sigma-sweep needs a regularized norm family")?;
    let (spec, v, theta) = (&cfg.spec, &cfg.initial.v0, &cfg.initial.theta0);
    let grid = cfg.grid;
    let alpha_sup = v
        .w
        .values()
        .iter()
        .zip(v.eta.values())
        .map(|(w, e)| spec.alpha.value(*w, *e))
        .fold(0.0, f64::max);
    let tv = signed_weighted_tv(&Field::constant(grid, 1.0), theta, &Norm::Exact)?;
    let phi_exact = phi(spec, v, theta, spec.nu, &Norm::Exact)?;
    let pool = thread_pool()?;
    pool.install(|| {
        sigmas
            .par_iter()
            .map(|&sigma| {
                let reg = RegularizedNorm::new(family, sigma)?;
                let w = reg.witness();
                let phi_sigma = phi(spec, v, theta, spec.nu, &Norm::Smooth(reg))?;
                Ok(SigmaRow {
                    sigma,
                    phi_sigma,
                    phi_exact,
                    deviation: (phi_sigma - phi_exact).abs(),
                    bound: alpha_sup * (w.r0 * grid.domain_measure() + (1.0 - w.q0) * tv),
                })
            })
            .collect()
    })
}

pub fn sigma_csv(rows: &[SigmaRow]) -> String {
    let mut s = format!("{SIGMA_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.sigma,
            r.phi_sigma,
            r.phi_exact,
            r.deviation,
            r.bound,
            r.within()
        );
    }
    s
}

/// Whether the deviations strictly decrease down the table.
pub fn strictly_decreasing(rows: &[SigmaRow]) -> bool {
    rows.windows(2).all(|p| p[1].deviation < p[0].deviation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HRow {
    pub level: usize,
    pub h: f64,
    pub steps: usize,
    pub final_energy: f64,
    /// Relative change of the final energy against the previous level.
    pub rel_change: Option<f64>,
}

pub const H_HEADER: &str = "level,h,steps,final_time,final_energy,rel_change";

/// Runs the config at `h / 2^k` with `steps * 2^k` steps for `k < levels`,
/// each in its own directory `out/level_k`.
pub fn cmd_h_sweep(cfg: &RunConfig, levels: usize, out: &Path) -> Result<Vec<HRow>> {
    let pool = thread_pool()?;
    let finals: Vec<Result<(f64, usize, f64)>> = pool.install(|| {
        (0..levels)
            .into_par_iter()
            .map(|k| {
                let f = (1usize << k) as f64;
                let (h, steps) = (cfg.h / f, cfg.steps << k);
                let o = run_with(cfg, h, steps, &out.join(format!("level_{k}")), false)?;
                if let Some(msg) = o.failure {
                    bail!("level {k} (h = {h}) failed: {msg}");
                }
                Ok((h, steps, o.trajectory.last().energy.total))
            })
            .collect()
    });
    let mut rows: Vec<HRow> = Vec::new();
    for (level, r) in finals.into_iter().enumerate() {
        let (h, steps, final_energy) = r?;
        let rel_change = rows
            .last()
            .map(|p| (final_energy - p.final_energy).abs() / p.final_energy.abs().max(f64::MIN_POSITIVE));
        rows.push(HRow {
            level,
            h,
            steps,
            final_energy,
            rel_change,
        });
    }
    Ok(rows)
}

pub fn h_csv(rows: &[HRow]) -> String {
    let mut s = format!("{H_HEADER}\n");
    for r in rows {
        let change = r.rel_change.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{change}",
            r.level,
            r.h,
            r.steps,
            r.h * r.steps as f64,
            r.final_energy
        );
    }
    s
}

/// Validation report of the model (all assumption checks with margins).
pub fn cmd_validate(cfg: &RunConfig) -> String {
    let spec: &ModelSpec = &cfg.spec;
    format!("{}\n{}", cfg, spec.validate(64))
}
