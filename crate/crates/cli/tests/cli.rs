use std::path::Path;
use std::process::{Command, Output};

const SCALAR: &str = r#"
seed = 11
[system]
generator = "scalar-unstable"
[noise]
kind = "gaussian"
[algorithm]
episode_length = 400
[mc]
replicates = 6
[simulate]
steps = 150
feedback = [[0.5]]
"#;

fn lqstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lqstab"))
        .args(args)
        .env_remove("LQSTAB_WORKERS")
        .output()
        .expect("spawn lqstab")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(lqstab(&["--help"]).status.code(), Some(0));
    assert_eq!(lqstab(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(lqstab(&[]).status.code(), Some(1));
    assert_eq!(lqstab(&["bogus"]).status.code(), Some(1));
    assert_eq!(lqstab(&["riccati"]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        lqstab(&["riccati", "--config", "/nonexistent/x.toml"]).status.code(),
        Some(1)
    );
    let bad = write_config(dir.path(), "seed = 1\n[system]\ngenerator = \"nope\"\n");
    let o = lqstab(&["riccati", "--config", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    let unknown = write_config(dir.path(), &format!("{SCALAR}\n[extra]\nx = 1\n"));
    assert_eq!(lqstab(&["riccati", "--config", &unknown]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCALAR);
    let out = dir.path().join("missing-dir").join("out.txt");
    let o = lqstab(&["riccati", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn riccati_reports_scalar_solution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCALAR);
    let o = lqstab(&["riccati", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("# lqstab-riccati v1"));
    assert!(text.contains("converged=true"));
    // a = 1.3, b = q = r = 1: k solves k^2 - a^2 k - 1 = 0.
    let a2 = 1.3f64 * 1.3;
    let k_expected = (a2 + (a2 * a2 + 4.0).sqrt()) / 2.0;
    let k_line = text.lines().skip_while(|l| *l != "[K]").nth(1).unwrap();
    let k: f64 = k_line.parse().unwrap();
    assert!((k - k_expected).abs() < 1e-9 * k_expected);
}

#[test]
fn spectral_output_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seed = 1\n[system]\ngenerator = \"scalar-unstable\"\n[spectral]\nmatrix = [[2.0, 0.0], [0.0, 2.0]]\n",
    );
    let o = lqstab(&["spectral", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# lqstab-spectral v1"));
    assert!(header.contains("regular=false"));
    assert!(header.contains("unit_eigenvalue=false"));
    assert_eq!(lines.next(), Some("re,im,modulus,multiplicity"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.ends_with(",2")));
}

#[test]
fn simulate_then_identify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCALAR);
    let traj = dir.path().join("traj.csv");
    let traj = traj.to_str().unwrap();
    assert_eq!(
        lqstab(&["simulate", "--config", &cfg, "--out", traj]).status.code(),
        Some(0)
    );
    let from_file = lqstab(&["identify", "--config", &cfg, "--trajectory", traj]);
    let direct = lqstab(&["identify", "--config", &cfg]);
    assert_eq!(from_file.status.code(), Some(0));
    assert_eq!(stdout(&from_file), stdout(&direct));
    assert!(stdout(&direct).contains("transitions=150"));
}

#[test]
fn stabilize_writes_loadable_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCALAR);
    let set = dir.path().join("set.json");
    let o = lqstab(&["stabilize", "--config", &cfg, "--out", set.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let json = std::fs::read_to_string(&set).unwrap();
    let loaded = lqstab::stabilization::StabilizingSet::from_json(&json).unwrap();
    assert_eq!(loaded.seed, 11);
    assert!(String::from_utf8_lossy(&o.stderr).contains("certified="));
}

#[test]
fn montecarlo_report_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCALAR);
    let one = lqstab(&["montecarlo", "--config", &cfg, "--workers", "1"]);
    let three = lqstab(&["montecarlo", "--config", &cfg, "--workers", "3"]);
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(one.stdout, three.stdout);
    let text = stdout(&one);
    assert!(text.starts_with("# lqstab-report v1"));
    assert!(!text.contains("wall_ms"));
    let report = lqstab::harness::RunReport::from_csv(&text).unwrap();
    assert_eq!(report.rows.len(), 6);
}

#[test]
fn montecarlo_seed_override_changes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCALAR);
    let a = lqstab(&["montecarlo", "--config", &cfg, "--workers", "2"]);
    let b = lqstab(&["montecarlo", "--config", &cfg, "--workers", "2", "--seed", "12"]);
    assert_ne!(a.stdout, b.stdout);
    assert!(stdout(&b).contains("seed = 12"));
}

#[test]
fn montecarlo_timing_adds_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCALAR);
    let o = lqstab(&["montecarlo", "--config", &cfg, "--timing"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains(",wall_ms"));
}

#[test]
fn zero_workers_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCALAR);
    assert_eq!(
        lqstab(&["montecarlo", "--config", &cfg, "--workers", "0"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn psi_estimate_requires_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SCALAR.replace("\"gaussian\"", "\"none\""));
    assert_eq!(lqstab(&["psi-estimate", "--config", &cfg]).status.code(), Some(1));
}
