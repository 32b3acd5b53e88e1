//! Read-only audits of computed trajectories: discrete energy dissipation,
//! the a-priori estimate, Lyapunov monotonicity and the long-time limit.

use std::fmt;

use thiserror::Error;

use crate::energy::{dirichlet_raw, lyapunov, minus_laplacian, EnergyError};
use crate::grid::{Field, FieldPair, GridError};
use crate::model::DerivedConstants;
use crate::regnorm::Norm;
use crate::stepper::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("record {0} carries no source sample")]
    MissingSource(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

/// One audited inequality family: the worst `lhs - rhs` over all instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub worst_slack: f64,
    /// Where the worst slack occurred, e.g. `step 12` or `s=3 t=40`.
    pub at: String,
    pub tolerance: f64,
}

impl Check {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            worst_slack: f64::NEG_INFINITY,
            at: String::new(),
            tolerance,
        }
    }

    fn record(&mut self, slack: f64, at: impl FnOnce() -> String) {
        // NaN counts as a violation
        if !(slack <= self.worst_slack) {
            self.worst_slack = slack;
            self.at = at();
        }
    }

    pub fn passed(&self) -> bool {
        self.worst_slack <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub title: String,
    pub checks: Vec<Check>,
    /// Why the audit did not run, if it was skipped.
    pub skipped: Option<String>,
}

impl AuditReport {
    fn new(title: &str) -> Self {
        Self {
            title: title.to_string(),
            checks: Vec::new(),
            skipped: None,
        }
    }

    /// A skipped audit passes vacuously.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// One row per check: `name,worst_slack,pass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,worst_slack,pass\n");
        for c in &self.checks {
            out.push_str(&format!("{},{:e},{}\n", c.name, c.worst_slack, c.passed()));
        }
        out
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "== {} ==", self.title)?;
        if let Some(why) = &self.skipped {
            return writeln!(f, "skipped: {why}");
        }
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {:<32} worst slack {:>12.4e} (tol {:.1e}) at {}",
                if c.passed() { "pass" } else { "FAIL" },
                c.name,
                c.worst_slack,
                c.tolerance,
                c.at
            )?;
        }
        Ok(())
    }
}

/// `1e-7 (1 + |F_0|)`, the default slack tolerance of a trajectory.
pub fn default_slack_tol(traj: &Trajectory) -> f64 {
    1e-7 * (1.0 + traj.records[0].energy.total.abs())
}

/// Per-step ingredients of the dissipation inequalities for a given `u_dag`.
struct StepTerms {
    /// `|v_i - v_{i-1}|^2`
    dv: Vec<f64>,
    /// `|sqrt(alpha0(v_i)) (theta_i - theta_{i-1})|^2`
    dth: Vec<f64>,
    /// `F_i`
    f: Vec<f64>,
    /// `c (u_dag, w_i)`
    cw: Vec<f64>,
    /// `|u_i - u_dag|^2` (index 0 unused)
    du: Vec<f64>,
}

fn step_terms(traj: &Trajectory, u_dagger: &Field) -> Result<StepTerms, DiagnosticsError> {
    let grid = traj.grid;
    if u_dagger.grid() != &grid {
        return Err(GridError::Mismatch.into());
    }
    let n = traj.records.len();
    let m = grid.cell_measure();
    let spec = &traj.spec;
    let mut t = StepTerms {
        dv: vec![0.0; n],
        dth: vec![0.0; n],
        f: Vec::with_capacity(n),
        cw: Vec::with_capacity(n),
        du: vec![0.0; n],
    };
    for (i, r) in traj.records.iter().enumerate() {
        t.f.push(r.energy.total);
        t.cw.push(spec.c * grid.inner(u_dagger, &r.v.w)?);
        if i == 0 {
            continue;
        }
        let prev = &traj.records[i - 1];
        t.dv[i] = r.v.dist_sq(&prev.v);
        let (w, e) = (r.v.w.values(), r.v.eta.values());
        t.dth[i] = r
            .theta
            .values()
            .iter()
            .zip(prev.theta.values())
            .enumerate()
            .map(|(c, (a, b))| spec.alpha0.value(w[c], e[c]) * (a - b) * (a - b))
            .sum::<f64>()
            * m;
        let u = r.u.as_ref().ok_or(DiagnosticsError::MissingSource(i))?;
        let d = u.axpy(-1.0, u_dagger)?;
        t.du[i] = grid.inner(&d, &d)?;
    }
    Ok(t)
}

/// Checks the one-step dissipation inequality at every step, its
/// step-weighted sum for every `m`, and the telescoped two-time form at
/// every pair of nodes `s = jh <= t = kh`.
pub fn audit_dissipation(
    traj: &Trajectory,
    u_dagger: &Field,
    slack_tol: f64,
) -> Result<AuditReport, DiagnosticsError> {
    let t = step_terms(traj, u_dagger)?;
    let (h, c2) = (traj.h, traj.spec.c * traj.spec.c);
    let n = t.f.len();
    let mut report = AuditReport::new("energy dissipation");

    let mut per_step = Check::new("AP_diss per step", slack_tol);
    for i in 1..n {
        let lhs = t.dv[i] / (2.0 * h) + t.dth[i] / h + t.f[i] + t.cw[i];
        let rhs = t.f[i - 1] + t.cw[i - 1] + c2 * h * t.du[i];
        per_step.record(lhs - rhs, || format!("step {i}"));
    }

    let mut weighted = Check::new("AP_diss2 weighted sum", slack_tol);
    let (mut lhs_acc, mut rhs_acc) = (0.0, 0.0);
    for m in 1..n {
        let i = m as f64;
        lhs_acc += 0.5 * i * t.dv[m] + i * t.dth[m];
        rhs_acc += h * (t.f[m - 1] + t.cw[m - 1]) + c2 * h * h * i * t.du[m];
        let lhs = lhs_acc + i * h * (t.f[m] + t.cw[m]);
        weighted.record(lhs - rhs_acc, || format!("m {m}"));
    }

    // prefix sums make every node pair O(1)
    let mut diss = vec![0.0; n];
    let mut src = vec![0.0; n];
    for i in 1..n {
        diss[i] = diss[i - 1] + t.dv[i] / (2.0 * h) + t.dth[i] / h;
        src[i] = src[i - 1] + c2 * h * t.du[i];
    }
    // the worst pair for each t pairs it with the smallest earlier left side
    let mut two_time = Check::new("two-time node pairs", slack_tol);
    let level: Vec<f64> = (0..n).map(|k| t.f[k] + t.cw[k] - src[k] + diss[k]).collect();
    let mut best = 0;
    for k in 0..n {
        if level[k] < level[best] {
            best = k;
        }
        two_time.record(level[k] - level[best], || format!("s={best} t={k}"));
    }
    report.checks = vec![per_step, weighted, two_time];
    Ok(report)
}

/// Checks the a-priori estimate for every `m` with anchor `(w0, omega0)`.
/// Skipped unless both `nu` and `sigma` lie below `nu_*`.
pub fn audit_apriori(
    traj: &Trajectory,
    anchor: &(FieldPair, Field),
    constants: &DerivedConstants,
    slack_tol: f64,
) -> Result<AuditReport, DiagnosticsError> {
    let mut report = AuditReport::new("a-priori estimate");
    let nu = traj.spec.nu;
    let sigma = match &traj.norm {
        Norm::Smooth(r) => r.sigma(),
        Norm::Exact => 0.0,
    };
    let ns = constants.nu_star;
    if !(nu < ns && sigma < ns) {
        report.skipped = Some(format!(
            "needs nu, sigma < nu_* = {ns:e} (nu = {nu:e}, sigma = {sigma:e})"
        ));
        return Ok(report);
    }
    let grid = traj.grid;
    let (w0, om0) = anchor;
    if w0.grid() != &grid || om0.grid() != &grid {
        return Err(GridError::Mismatch.into());
    }
    let (a, b, cs) = (constants.a_star, constants.b_star, constants.c_star);
    let (h, c2) = (traj.h, traj.spec.c * traj.spec.c);
    let h1_sq = |f: &Field| -> Result<f64, GridError> {
        Ok(grid.inner(f, f)? + dirichlet_raw(&grid, f.values()))
    };
    let anchor_h1 = 1.0 + h1_sq(&w0.w)? + h1_sq(&w0.eta)? + h1_sq(om0)?;
    let dist = |v: &FieldPair, th: &Field| -> Result<f64, GridError> {
        let d = th.axpy(-1.0, om0)?;
        Ok(0.5 * (v.dist_sq(w0) + a * grid.inner(&d, &d)?))
    };
    let first = &traj.records[0];
    let rhs0 = dist(&first.v, &first.theta)? + h / b * first.energy.total;

    let mut check = Check::new("a-priori bound", slack_tol);
    let (mut f_sum, mut u_sum) = (0.0, 0.0);
    for m in 1..traj.records.len() {
        let r = &traj.records[m];
        f_sum += traj.records[m - 1].energy.total;
        let u = r.u.as_ref().ok_or(DiagnosticsError::MissingSource(m))?;
        u_sum += grid.inner(u, u)?;
        let lhs = dist(&r.v, &r.theta)? + 0.5 * b * h * f_sum;
        let rhs = rhs0 + m as f64 * h * cs * anchor_h1 + 0.5 * c2 * h * u_sum;
        check.record(lhs - rhs, || format!("m {m}"));
    }
    report.checks.push(check);
    Ok(report)
}

/// Checks that the Lyapunov series is nonincreasing between every pair of
/// nodes (adjacent ones reported separately).
pub fn lyapunov_audit(
    traj: &Trajectory,
    u_dagger: &Field,
    slack_tol: f64,
) -> Result<AuditReport, DiagnosticsError> {
    let j = lyapunov(traj, u_dagger)?;
    let mut report = AuditReport::new("Lyapunov monotonicity");
    let mut adjacent = Check::new("adjacent steps", slack_tol);
    let mut pairs = Check::new("all node pairs", slack_tol);
    let mut best = 0;
    for k in 1..j.len() {
        adjacent.record(j[k] - j[k - 1], || format!("step {k}"));
        if j[k - 1] < j[best] {
            best = k - 1;
        }
        pairs.record(j[k] - j[best], || format!("s={best} t={k}"));
    }
    report.checks = vec![adjacent, pairs];
    Ok(report)
}

/// Evidence that the orbit reached a point of its long-time limit set.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaReport {
    /// `max theta - min theta` at the final record.
    pub theta_spread: f64,
    /// Projected stationarity residual of the final `v` (unit step).
    pub v_residual: f64,
    /// Box bounds on `v` and the sup bound on `theta` at every record.
    pub bounds_ok: bool,
    pub lyapunov_monotone: bool,
    pub lyapunov_worst_slack: f64,
    pub converged: bool,
}

impl fmt::Display for OmegaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "== long-time limit ==")?;
        writeln!(f, "theta spread         {:e}", self.theta_spread)?;
        writeln!(f, "v residual           {:e}", self.v_residual)?;
        writeln!(f, "bounds ok            {}", self.bounds_ok)?;
        writeln!(
            f,
            "lyapunov monotone    {} (worst slack {:e})",
            self.lyapunov_monotone, self.lyapunov_worst_slack
        )?;
        writeln!(f, "converged            {}", self.converged)
    }
}

impl OmegaReport {
    pub fn to_csv(&self) -> String {
        format!(
            "name,value,pass\ntheta_spread,{:e},\nv_residual,{:e},\nbounds,,{}\nlyapunov,{:e},{}\nconverged,,{}\n",
            self.theta_spread,
            self.v_residual,
            self.bounds_ok,
            self.lyapunov_worst_slack,
            self.lyapunov_monotone,
            self.converged
        )
    }
}

/// `|v - P(v - (-Lap v + grad g(v) + gamma'(w) + (c u_inf, 0)))|_inf` with the
/// unit-box projection `P`.
pub fn stationarity_residual(
    traj: &Trajectory,
    v: &FieldPair,
    u_infinity: &Field,
) -> Result<f64, DiagnosticsError> {
    let grid = traj.grid;
    if v.grid() != &grid || u_infinity.grid() != &grid {
        return Err(GridError::Mismatch.into());
    }
    let spec = &traj.spec;
    let (w, e) = (v.w.values(), v.eta.values());
    let lw = minus_laplacian(&grid, w);
    let le = minus_laplacian(&grid, e);
    let mut worst: f64 = 0.0;
    for c in 0..grid.len() {
        let g = spec.g.grad(w[c], e[c]);
        let gw = lw[c] + g[0] + spec.gamma.smooth_slope(w[c]) + spec.c * u_infinity.values()[c];
        let ge = le[c] + g[1];
        worst = worst
            .max((w[c] - (w[c] - gw).clamp(0.0, 1.0)).abs())
            .max((e[c] - (e[c] - ge).clamp(0.0, 1.0)).abs());
    }
    Ok(worst)
}

pub fn omega_limit(
    traj: &Trajectory,
    u_infinity: &Field,
    spread_tol: f64,
    residual_tol: f64,
) -> Result<OmegaReport, DiagnosticsError> {
    let last = traj.last();
    let theta_spread = last.theta.max() - last.theta.min();
    let v_residual = stationarity_residual(traj, &last.v, u_infinity)?;
    let bound = traj.records[0].theta.sup_norm() + 1e-9;
    let bounds_ok = traj
        .records
        .iter()
        .all(|r| r.v.in_unit_box() && r.theta.sup_norm() <= bound);
    let j0 = lyapunov(traj, u_infinity)?[0];
    let lya = lyapunov_audit(traj, u_infinity, 1e-7 * (1.0 + j0.abs()))?;
    let lyapunov_worst_slack = lya
        .checks
        .iter()
        .map(|c| c.worst_slack)
        .fold(f64::NEG_INFINITY, f64::max);
    let converged = theta_spread <= spread_tol && v_residual <= residual_tol && bounds_ok;
    Ok(OmegaReport {
        theta_spread,
        v_residual,
        bounds_ok,
        lyapunov_monotone: lya.passed(),
        lyapunov_worst_slack,
        converged,
    })
}
