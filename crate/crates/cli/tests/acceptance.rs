//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! exactly one `[PASS]`/`[FAIL]` line. Exits nonzero if any criterion fails.

use std::f64::consts::PI;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use kwc_cli::commands::strictly_decreasing;
use kwc_cli::{cmd_h_sweep, cmd_sigma_sweep, parse_config_str};
use kwc_core::diagnostics::{
    audit_apriori, audit_dissipation, default_slack_tol, lyapunov_audit, omega_limit,
};
use kwc_core::energy::{energy_gradient, lyapunov};
use kwc_core::model::{derived_constants, Source};
use kwc_core::stepper::{theta_step, v_step};
use kwc_core::*;
use kwc_oracle::{fd_gradient, oracle_theta_step, oracle_v_step};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

const STEPS: usize = 200;

fn norm(family: Family, sigma: f64) -> Norm {
    Norm::Smooth(RegularizedNorm::new(family, sigma).unwrap())
}

fn random_field(grid: Grid, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Field {
    let vals = (0..grid.len()).map(|_| rng.gen_range(lo..hi)).collect();
    Field::new(grid, vals).unwrap()
}

fn sup_diff(a: &Field, b: &Field) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn worst(rep: &AuditReport) -> f64 {
    rep.checks.iter().map(|c| c.worst_slack).fold(f64::NEG_INFINITY, f64::max)
}

/// One randomized run of the dissipation suite.
struct Case {
    label: String,
    traj: Trajectory,
    u_dagger: Field,
    tiny: bool,
}

impl Case {
    fn lyap_only(&self) -> bool {
        self.label.starts_with("lyapunov")
    }
}

fn case_grid(k: usize) -> Grid {
    if k.is_multiple_of(2) {
        Grid::unit(1, 32).unwrap()
    } else {
        Grid::unit(2, 16).unwrap()
    }
}

/// Ten randomized default-model configs, cycling `u_dagger` through zero,
/// `u_infinity` and a random field.
fn dissipation_cases() -> Vec<Case> {
    (0..10usize)
        .into_par_iter()
        .map(|k| {
            let grid = case_grid(k);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
            let mut spec = ModelSpec::default_on(grid);
            let u_inf = random_field(grid, &mut rng, -1.0, 1.0);
            spec.source = Source::constant(u_inf.clone()).with_u_infinity(u_inf.clone());
            let amp = rng.gen_range(0.5..PI);
            let init = InitialData::preset(grid, InitialPreset::Random { seed: rng.gen() }, amp);
            let n = norm(Family::ALL[k % 5], rng.gen_range(0.05..0.5));
            let (u_dagger, which) = match k % 3 {
                0 => (Field::zeros(grid), "0"),
                1 => (u_inf, "u_inf"),
                _ => (random_field(grid, &mut rng, -1.0, 1.0), "random"),
            };
            let h = 0.9 * spec.step_bound().unwrap();
            let traj = run(&spec, &init, h, STEPS, &n, &Tolerances::default(), |_| {}).unwrap();
            Case {
                label: format!("case {k} ({}D, {}, u_dag {which})", grid.dim(), Family::ALL[k % 5].name()),
                traj,
                u_dagger,
                tiny: false,
            }
        })
        .collect()
}

/// Variants with `nu = sigma = nu_* / 2`, where the a-priori estimate applies.
fn tiny_cases() -> Vec<Case> {
    (0..4usize)
        .into_par_iter()
        .map(|k| {
            let grid = case_grid(k);
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + k as u64);
            let mut spec = ModelSpec::default_on(grid);
            let u_inf = random_field(grid, &mut rng, -1.0, 1.0);
            spec.source = Source::constant(u_inf.clone()).with_u_infinity(u_inf.clone());
            let init = InitialData::preset(grid, InitialPreset::Random { seed: rng.gen() }, PI);
            let kc = derived_constants(&spec, init.theta0_sup(), grid.domain_measure()).unwrap();
            spec.nu = 0.5 * kc.nu_star;
            let n = norm(Family::Hyperbola, 0.5 * kc.nu_star);
            let h = 0.9 * spec.step_bound().unwrap();
            let traj = run(&spec, &init, h, STEPS, &n, &Tolerances::default(), |_| {}).unwrap();
            Case {
                label: format!("tiny case {k} ({}D)", grid.dim()),
                traj,
                u_dagger: u_inf,
                tiny: true,
            }
        })
        .collect()
}

/// Source equal to a random field on `[0, 1)` and to `u_infinity` afterwards.
fn lyapunov_cases() -> Vec<Case> {
    (0..10usize)
        .into_par_iter()
        .map(|k| {
            let grid = case_grid(k);
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + k as u64);
            let mut spec = ModelSpec::default_on(grid);
            let early = random_field(grid, &mut rng, -2.0, 2.0);
            let u_inf = random_field(grid, &mut rng, -1.0, 1.0);
            spec.source = Source::table(vec![(0.0, early), (1.0, u_inf.clone())], f64::INFINITY)
                .unwrap()
                .with_u_infinity(u_inf.clone());
            let init = InitialData::preset(grid, InitialPreset::Random { seed: rng.gen() }, 2.0);
            let n = norm(Family::ALL[k % 5], 0.1);
            let h = 0.9 * spec.step_bound().unwrap();
            let traj = run(&spec, &init, h, STEPS, &n, &Tolerances::default(), |_| {}).unwrap();
            Case {
                label: format!("lyapunov case {k} ({}D)", grid.dim()),
                traj,
                u_dagger: u_inf,
                tiny: false,
            }
        })
        .collect()
}

fn criterion1(cases: &[Case]) -> Outcome {
    let mut worst_rel = f64::NEG_INFINITY;
    for c in cases.iter().filter(|c| !c.tiny) {
        let tol = default_slack_tol(&c.traj);
        let rep = audit_dissipation(&c.traj, &c.u_dagger, tol).map_err(|e| e.to_string())?;
        let per = rep.check("AP_diss per step").unwrap();
        if !per.passed() {
            return Err(format!("{}: slack {:e} > {tol:e} at {}", c.label, per.worst_slack, per.at));
        }
        worst_rel = worst_rel.max(per.worst_slack / tol);
    }
    Ok(format!("worst slack / tol = {worst_rel:.3e} over 10 runs"))
}

fn criterion2(cases: &[Case]) -> Outcome {
    let (mut checked, mut skipped) = (0, 0);
    for c in cases.iter().filter(|c| !c.lyap_only()) {
        let tol = default_slack_tol(&c.traj);
        let rep = audit_dissipation(&c.traj, &c.u_dagger, tol).map_err(|e| e.to_string())?;
        let sum = rep.check("AP_diss2 weighted sum").unwrap();
        if !sum.passed() {
            return Err(format!("{}: AP_diss2 slack {:e} at {}", c.label, sum.worst_slack, sum.at));
        }
        let first = &c.traj.records[0];
        let kc = derived_constants(&c.traj.spec, first.theta.sup_norm(), c.traj.grid.domain_measure())
            .map_err(|e| e.to_string())?;
        let anchors = [
            (first.v.clone(), first.theta.clone()),
            (FieldPair::constant(c.traj.grid, 0.5, 0.5), Field::zeros(c.traj.grid)),
        ];
        for anchor in &anchors {
            let rep = audit_apriori(&c.traj, anchor, &kc, tol).map_err(|e| e.to_string())?;
            match &rep.skipped {
                Some(_) if !c.tiny => skipped += 1,
                Some(why) => return Err(format!("{}: a-priori unexpectedly skipped: {why}", c.label)),
                None if !rep.passed() => {
                    return Err(format!("{}: a-priori slack {:e}", c.label, worst(&rep)))
                }
                None => checked += 1,
            }
        }
    }
    if checked == 0 {
        return Err("a-priori bound never exercised".into());
    }
    Ok(format!("AP_diss2 on 14 runs; a-priori bound checked {checked}x, skipped {skipped}x outside nu_*"))
}

fn criterion3(cases: &[Case]) -> Outcome {
    let mut worst_rel = f64::NEG_INFINITY;
    for c in cases.iter().filter(|c| c.lyap_only()) {
        let j = lyapunov(&c.traj, &c.u_dagger).map_err(|e| e.to_string())?;
        let tol = 1e-7 * (1.0 + j[0].abs());
        let rep = lyapunov_audit(&c.traj, &c.u_dagger, tol).map_err(|e| e.to_string())?;
        if !rep.passed() {
            return Err(format!("{}: {rep}", c.label));
        }
        worst_rel = worst_rel.max(worst(&rep) / tol);
    }
    Ok(format!("J nonincreasing on 10 runs, worst slack / tol = {worst_rel:.3e}"))
}

fn criterion4(cases: &[Case]) -> Outcome {
    let mut records = 0;
    for c in cases {
        let bound = c.traj.records[0].theta.sup_norm() + 1e-9;
        for r in &c.traj.records {
            let in_box = [&r.v.w, &r.v.eta]
                .iter()
                .all(|f| f.values().iter().all(|x| (0.0..=1.0).contains(x)));
            if !in_box || r.theta.sup_norm() > bound {
                return Err(format!("{}: bounds violated at step {}", c.label, r.index));
            }
            records += 1;
        }
    }
    Ok(format!("{records} states within the unit box and the theta bound"))
}

fn criterion5() -> Outcome {
    let results: Vec<Result<(f64, f64), String>> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let grid = Grid::unit(1, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
            let spec = ModelSpec::default_on(grid);
            let n = norm(Family::Hyperbola, rng.gen_range(0.05..0.5));
            let init = InitialData::preset(grid, InitialPreset::Random { seed }, rng.gen_range(0.5..PI));
            let u = random_field(grid, &mut rng, -1.0, 1.0);
            let h = rng.gen_range(0.01..0.9) * spec.step_bound().unwrap();
            let tol = Tolerances::default();
            let e = |x: &dyn std::fmt::Display| format!("seed {seed}: {x}");
            let ot = oracle_theta_step(&init.v0, &init.theta0, h, &spec, &n).map_err(|x| e(&x))?;
            let st = theta_step(&init.v0, &init.theta0, h, &spec, &n, &tol).map_err(|x| e(&x))?;
            let ov = oracle_v_step(&init.v0, &init.theta0, &u, h, &spec, &n, seed).map_err(|x| e(&x))?;
            let sv = v_step(&init.v0, &init.theta0, &u, h, &spec, &n, &tol).map_err(|x| e(&x))?;
            let dt = sup_diff(&ot.minimizer, &st);
            let dv = sup_diff(&ov.minimizer.w, &sv.w).max(sup_diff(&ov.minimizer.eta, &sv.eta));
            if dt > 1e-8 || dv > 1e-6 {
                return Err(format!("seed {seed}: theta diff {dt:e}, v diff {dv:e}"));
            }
            Ok((dt, dv))
        })
        .collect();
    let (mut dt, mut dv) = (0.0f64, 0.0f64);
    for r in results {
        let (a, b) = r?;
        dt = dt.max(a);
        dv = dv.max(b);
    }
    Ok(format!("20 instances, max theta diff {dt:.2e}, max v diff {dv:.2e}"))
}

fn criterion6() -> Outcome {
    let mut worst_rel: f64 = 0.0;
    let mut count = 0;
    for family in [Family::Hyperbola, Family::PGrowth] {
        for nu in [0.0, 0.2] {
            for k in 0..5u64 {
                let grid = if k % 2 == 0 { Grid::unit(1, 8).unwrap() } else { Grid::unit(2, 4).unwrap() };
                let mut spec = ModelSpec::default_on(grid);
                spec.nu = nu;
                let n = norm(family, 0.2);
                let mut rng = ChaCha8Rng::seed_from_u64(5000 + 10 * k + (nu > 0.0) as u64);
                let w = random_field(grid, &mut rng, 0.1, 0.9);
                let eta = random_field(grid, &mut rng, 0.1, 0.9);
                let theta = random_field(grid, &mut rng, -2.0, 2.0);
                let v = FieldPair::new(w, eta).unwrap();
                let (gv, gt) = energy_gradient(&spec, &v, &theta, &n).map_err(|e| e.to_string())?;
                let m = grid.cell_measure();
                let len = grid.len();
                let mut point = v.w.values().to_vec();
                point.extend_from_slice(v.eta.values());
                point.extend_from_slice(theta.values());
                let f = |x: &[f64]| {
                    let v = FieldPair::new(
                        Field::new(grid, x[..len].to_vec()).unwrap(),
                        Field::new(grid, x[len..2 * len].to_vec()).unwrap(),
                    )
                    .unwrap();
                    let th = Field::new(grid, x[2 * len..].to_vec()).unwrap();
                    free_energy(&spec, &v, &th, &n).unwrap().total
                };
                let fd = fd_gradient(f, &point, 1e-6).map_err(|e| e.to_string())?;
                for (block, analytic) in [&gv.w, &gv.eta, &gt].into_iter().enumerate() {
                    let scale = analytic.sup_norm().max(1e-12);
                    for (i, a) in analytic.values().iter().enumerate() {
                        let rel = (a - fd[block * len + i] / m).abs() / scale;
                        worst_rel = worst_rel.max(rel);
                        if rel > 1e-6 {
                            return Err(format!(
                                "{} nu {nu} seed {k}: block {block} cell {i} relative error {rel:e}",
                                family.name()
                            ));
                        }
                    }
                }
                count += 1;
            }
        }
    }
    Ok(format!("{count} instances, worst relative error {worst_rel:.2e}"))
}

fn criterion7() -> Outcome {
    let mut cases = 0;
    for family in Family::ALL {
        for sigma in [0.5, 0.1, 0.02] {
            let rep = RegularizedNorm::new(family, sigma).unwrap().verify_axioms(10_000);
            for needed in ["chain_lower", "chain_upper", "convexity", "lower_bound", "gradient_bound"] {
                if !rep.checks.iter().any(|c| c.name == needed) {
                    return Err(format!("{} sigma {sigma}: `{needed}` not sampled", family.name()));
                }
            }
            if !rep.passed() {
                let bad: Vec<String> = rep.failures().map(|c| format!("{} {:e}", c.name, c.worst_violation)).collect();
                return Err(format!("{} sigma {sigma}: {}", family.name(), bad.join(", ")));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} family/sigma cases, 1e4 samples each, chain included"))
}

fn criterion8() -> Outcome {
    let cfg = parse_config_str("initial.preset = ramp\ninitial.amplitude = 1", Path::new("."))
        .map_err(|e| e.to_string())?;
    let rows = cmd_sigma_sweep(&cfg, &[0.5, 0.1, 0.02, 0.004]).map_err(|e| e.to_string())?;
    if let Some(r) = rows.iter().find(|r| !r.within()) {
        return Err(format!("sigma {}: deviation {:e} > bound {:e}", r.sigma, r.deviation, r.bound));
    }
    if !strictly_decreasing(&rows) {
        return Err("deviation not strictly decreasing".into());
    }
    let devs: Vec<String> = rows.iter().map(|r| format!("{:.2e}", r.deviation)).collect();
    Ok(format!("deviations {} all within bound", devs.join(" > ")))
}

fn criterion9() -> Outcome {
    let grid = Grid::unit(1, 32).unwrap();
    let spec = ModelSpec::default_on(grid);
    let init = InitialData::preset(grid, InitialPreset::Ramp, PI);
    let traj = run(&spec, &init, 0.1, 2000, &norm(Family::Hyperbola, 0.1), &Tolerances::default(), |_| {})
        .map_err(|e| e.to_string())?;
    let o = omega_limit(&traj, &Field::zeros(grid), 1e-3, 1e-5).map_err(|e| e.to_string())?;
    let line = format!(
        "theta spread {:.2e}, v residual {:.2e}, bounds {}",
        o.theta_spread, o.v_residual, o.bounds_ok
    );
    if o.converged {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = parse_config_str(
        "initial.preset = ramp\ninitial.amplitude = 3.141592653589793\ntime.h = 0.1\ntime.steps = 20\n",
        Path::new("."),
    )
    .map_err(|e| e.to_string())?;
    let rows = cmd_h_sweep(&cfg, 2, dir.path()).map_err(|e| e.to_string())?;
    let change = rows[1].rel_change.unwrap();
    let line = format!(
        "F(T=2): h=0.1 {:.6e}, h=0.05 {:.6e}, relative change {:.2}%",
        rows[0].final_energy,
        rows[1].final_energy,
        100.0 * change
    );
    if change < 0.05 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let mut cases = dissipation_cases();
    cases.extend(tiny_cases());
    cases.extend(lyapunov_cases());
    let runs_time = t0.elapsed().as_secs_f64();

    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let r = f();
        (r, t.elapsed().as_secs_f64())
    };
    let results: Vec<(&str, Outcome, f64)> = vec![
        {
            let (r, t) = timed(&|| criterion1(&cases));
            ("1 per-step dissipation", r, t + runs_time)
        },
        {
            let (r, t) = timed(&|| criterion2(&cases));
            ("2 weighted sum and a-priori bound", r, t)
        },
        {
            let (r, t) = timed(&|| criterion3(&cases));
            ("3 Lyapunov monotonicity", r, t)
        },
        {
            let (r, t) = timed(&|| criterion4(&cases));
            ("4 box and orientation bounds", r, t)
        },
        {
            let (r, t) = timed(&criterion5);
            ("5 oracle equivalence", r, t)
        },
        {
            let (r, t) = timed(&criterion6);
            ("6 gradient vs finite differences", r, t)
        },
        {
            let (r, t) = timed(&criterion7);
            ("7 regularized-norm axioms", r, t)
        },
        {
            let (r, t) = timed(&criterion8);
            ("8 sigma convergence", r, t)
        },
        {
            let (r, t) = timed(&criterion9);
            ("9 omega-limit structure", r, t)
        },
        {
            let (r, t) = timed(&criterion10);
            ("10 self-convergence in h", r, t)
        },
    ];
    let mut failed = 0;
    for (name, r, secs) in &results {
        match r {
            Ok(msg) => println!("[PASS] criterion {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] criterion {name}: {msg} ({secs:.1}s)")
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
