use std::fs;
use std::path::Path;
use std::process::Command;

use kwc_cli::commands::{sigma_csv, strictly_decreasing, TRACE_HEADER};
use kwc_cli::config::UDagger;
use kwc_cli::*;
use kwc_core::energy::free_energy;
use kwc_core::io::Snapshot;

fn cfg(text: &str) -> anyhow::Result<RunConfig> {
    parse_config_str(text, Path::new("."))
}

fn err(text: &str) -> String {
    format!("{:#}", cfg(text).unwrap_err())
}

fn kwc() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kwc"));
    c.env_remove("KWC_THREADS");
    c
}

fn trace_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("trace.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn empty_config_resolves_to_defaults() {
    let c = cfg("# nothing but a comment\n\n").unwrap();
    assert!(c.h_auto);
    assert!((c.h - 0.45).abs() < 1e-15);
    assert_eq!(c.grid.shape(), &[32]);
    assert_eq!(c.steps, 100);
    assert_eq!(c.audits.u_dagger, UDagger::Zero);
    assert!(c.audits.dissipation && !c.audits.omega_limit);
}

#[test]
fn keys_values_and_comments_parse() {
    let c = cfg(
        "grid.dim = 2   # square\n grid.shape = 6\n time.h = 0.2\n norm.family = \"tanh\"\n\
         norm.sigma = 0.05\n initial.preset = random\n initial.seed = 4\n model.nu = 0\n",
    )
    .unwrap();
    assert_eq!(c.grid.shape(), &[6, 6]);
    assert_eq!(c.h, 0.2);
    assert!(!c.h_auto);
    assert_eq!(c.sigma(), 0.05);
    assert_eq!(c.spec.nu, 0.0);
}

#[test]
fn sigma_out_of_range_is_rejected() {
    assert!(err("norm.sigma = 1.5").contains("line 1"), "{}", err("norm.sigma = 1.5"));
    assert!(cfg("norm.sigma = 0").is_err());
}

#[test]
fn unknown_key_reports_its_line() {
    let e = err("time.steps = 3\n\n# ok\nmodel.kappa = 2\n");
    assert!(e.contains("line 4") && e.contains("model.kappa"), "{e}");
}

#[test]
fn malformed_lines_and_values_report_their_line() {
    assert!(err("time.steps = 3\njust words\n").contains("line 2"));
    assert!(err("\ntime.steps = many\n").contains("line 2"));
    assert!(err("time.h = 0.1\ntime.h = 0.2\n").contains("duplicate"));
}

#[test]
fn assumption_violations_are_named() {
    let e = err("model.g = const -1");
    assert!(e.contains("A4: g >= 0"), "{e}");
    let e = err("model.beta = poly 2:0:0, -1:0:2");
    assert!(e.contains("A2: beta convex"), "{e}");
    let e = err("model.g = kwc_relaxed 1");
    assert!(e.contains("A4"), "{e}");
    assert!(cfg("model.g = kwc_relaxed 1\nmodel.relaxed = true").is_ok());
    assert!(cfg("model.preset = kwc_relaxed").is_ok());
}

#[test]
fn step_above_bound_is_rejected() {
    let e = err("time.h = 0.6");
    assert!(e.contains("h1_dagger"), "{e}");
    assert!(cfg("model.g_scale = 4\ntime.h = 0.2").is_err());
}

#[test]
fn unsettled_table_with_omega_audit_cites_a6() {
    let text = "source.kind = table\nsource.table = 0:1, 1:0.5\nsource.u_infinity = 0\naudit.omega_limit = true\n";
    let e = err(text);
    assert!(e.contains("A6"), "{e}");
    let settled = "source.kind = table\nsource.table = 0:1, 1:0\nsource.u_infinity = 0\naudit.omega_limit = true\n";
    assert!(cfg(settled).is_ok());
    let ends = "source.kind = table\nsource.table = 0:1\nsource.end = 2\nsource.u_infinity = 0\naudit.omega_limit = true\n";
    assert!(cfg(ends).is_ok());
}

#[test]
fn constants_report_defaults_and_scaled_g() {
    let text = cmd_constants(&cfg("").unwrap()).unwrap();
    assert!(text.contains("h1_dagger          = 0.5"), "{text}");
    assert!(text.contains("A_star             = 22"));
    assert!(text.contains("B_star             = 0.0909090909"));
    assert!(text.contains("A_star <= 2 delta_star sqrt(R_star): holds"));
    let scaled = cmd_constants(&cfg("model.g_scale = 4").unwrap()).unwrap();
    assert!(scaled.contains("h1_dagger          = 0.125"), "{scaled}");
}

#[test]
fn run_writes_trace_snapshots_and_audits() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg("time.steps = 25\ninitial.amplitude = 2\n").unwrap();
    let o = cmd_run(&c, dir.path()).unwrap();
    assert_eq!(o.exit_code(), 0);
    let head = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(head.lines().next(), Some(TRACE_HEADER));
    assert_eq!(trace_rows(dir.path()).len(), 26);
    for k in [0, 10, 20, 25] {
        assert!(dir.path().join(format!("snapshots/step_{k:06}.bin")).exists(), "{k}");
        assert!(dir.path().join(format!("snapshots/step_{k:06}_theta.pgm.txt")).exists());
    }
    assert!(!dir.path().join("snapshots/step_000005.bin").exists());
    for f in ["trajectory.bin", "audit.txt", "audit.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(dir.path().join("audit.csv")).unwrap();
    assert!(csv.starts_with("report,name,worst_slack,pass\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn zero_steps_give_one_trace_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_run(&cfg("time.steps = 0").unwrap(), dir.path()).unwrap();
    assert_eq!(o.exit_code(), 0);
    assert_eq!(trace_rows(dir.path()).len(), 1);
}

#[test]
fn trace_totals_match_recomputed_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg("grid.dim = 2\ngrid.shape = 8\ntime.steps = 20\ninitial.preset = two_grain\n").unwrap();
    cmd_run(&c, dir.path()).unwrap();
    let rows = trace_rows(dir.path());
    for k in [0usize, 10, 20] {
        let snap = Snapshot::read(&dir.path().join(format!("snapshots/step_{k:06}.bin"))).unwrap();
        let (v, th) = snap.state().unwrap();
        let f = free_energy(&c.spec, &v, &th, &c.norm).unwrap().total;
        let logged: f64 = rows[k][7].parse().unwrap();
        assert!((f - logged).abs() <= 1e-12 * f.abs().max(1e-300), "{f} vs {logged}");
    }
}

#[test]
fn identical_configs_give_identical_traces() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = cfg("initial.preset = random\ninitial.seed = 12\ntime.steps = 15\n").unwrap();
    cmd_run(&c, a.path()).unwrap();
    cmd_run(&c, b.path()).unwrap();
    assert_eq!(
        fs::read(a.path().join("trace.csv")).unwrap(),
        fs::read(b.path().join("trace.csv")).unwrap()
    );
}

#[test]
fn solver_failure_keeps_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg("time.steps = 5\ntolerance.v_max_iter = 1\ninitial.amplitude = 2\n").unwrap();
    let o = cmd_run(&c, dir.path()).unwrap();
    assert_eq!(o.exit_code(), 2);
    assert!(o.failure.is_some());
    assert_eq!(trace_rows(dir.path()).len(), 1);
    assert!(dir.path().join("trajectory.bin").exists());
}

#[test]
fn saved_trajectory_reaudits_identically() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg("time.steps = 12\naudit.lyapunov = true\n").unwrap();
    let first = cmd_run(&c, dir.path()).unwrap();
    let again = cmd_audit(&c, &dir.path().join("trajectory.bin"), &dir.path().join("re")).unwrap();
    assert_eq!(first.audits, again.audits);
    assert!(dir.path().join("re/audit.csv").exists());
}

#[test]
fn sigma_sweep_rows_respect_their_bound() {
    let c = cfg("initial.amplitude = 1").unwrap();
    let rows = cmd_sigma_sweep(&c, &[0.5, 0.1, 0.02, 0.004]).unwrap();
    assert!(rows.iter().all(|r| r.within()));
    assert!(strictly_decreasing(&rows));
    assert_eq!(sigma_csv(&rows).lines().count(), 5);

    let flat = cfg("initial.amplitude = 0").unwrap();
    let rows = cmd_sigma_sweep(&flat, &[0.5, 0.1]).unwrap();
    assert!(rows.iter().all(|r| r.deviation == 0.0));

    let pg = cfg("norm.family = p_growth\nnorm.sigma = 0.5").unwrap();
    let rows = cmd_sigma_sweep(&pg, &[0.5, 0.1, 0.02]).unwrap();
    assert!(rows.iter().all(|r| r.within()), "{}", sigma_csv(&rows));
}

#[test]
fn h_sweep_halves_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg("time.h = 0.2\ntime.steps = 5\n").unwrap();
    let rows = cmd_h_sweep(&c, 3, dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2].steps, 20);
    assert!((rows[2].h - 0.05).abs() < 1e-15);
    assert!(rows[0].rel_change.is_none() && rows[1].rel_change.is_some());
    assert!(dir.path().join("level_2/trace.csv").exists());
}

#[test]
fn binary_run_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.cfg");
    fs::write(&conf, "time.steps = 4\n").unwrap();
    let out = dir.path().join("out");
    let st = kwc().args(["run"]).arg(&conf).arg("--out").arg(&out).env("KWC_THREADS", "1").output().unwrap().status;
    assert!(st.success());
    assert!(out.join("trace.csv").exists());

    for verb in ["validate", "constants"] {
        assert!(kwc().arg(verb).arg(&conf).output().unwrap().status.success(), "{verb}");
    }
    let st = kwc()
        .args(["sigma-sweep"])
        .arg(&conf)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(out.join("sigma_sweep.csv").exists());
    let st = kwc().arg("audit").arg(&conf).arg(out.join("trajectory.bin")).arg("--out").arg(dir.path().join("a")).output().unwrap().status;
    assert!(st.success());

    fs::write(&conf, "norm.sigma = 1.5\n").unwrap();
    let o = kwc().arg("validate").arg(&conf).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));
}

#[test]
fn corrupted_snapshot_resume_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("first");
    cmd_run(&cfg("time.steps = 10").unwrap(), &out).unwrap();
    let snap = out.join("snapshots/step_000010.bin");
    let mut bytes = fs::read(&snap).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(dir.path().join("bad.bin"), bytes).unwrap();
    fs::copy(&snap, dir.path().join("good.bin")).unwrap();

    let conf = dir.path().join("resume.cfg");
    fs::write(&conf, "initial.snapshot = good.bin\ntime.steps = 3\n").unwrap();
    assert!(cfg_file_ok(&conf));
    fs::write(&conf, "initial.snapshot = bad.bin\ntime.steps = 3\n").unwrap();
    let o = kwc().arg("run").arg(&conf).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

fn cfg_file_ok(path: &Path) -> bool {
    parse_config(path).is_ok()
}

#[test]
fn bad_thread_count_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.cfg");
    fs::write(&conf, "time.steps = 1\n").unwrap();
    let o = kwc()
        .arg("h-sweep")
        .arg(&conf)
        .arg("--levels")
        .arg("1")
        .arg("--out")
        .arg(dir.path())
        .env("KWC_THREADS", "lots")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("KWC_THREADS"));
}
