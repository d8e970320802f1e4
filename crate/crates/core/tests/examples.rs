use lqstab::harness::{self, evaluate_policy_cost, parse_config, RunReport};
use lqstab::identification::estimate_psi;
use lqstab::riccati::{solve_dare, CostMatrices, RiccatiOptions};
use lqstab::system::{scalar_system, NoiseModel};
use nalgebra::DMatrix;

const SMALL_BATCH: &str = "seed = 5\n[system]\ngenerator = \"coupled-2x2\"\n[noise]\nkind = \"gaussian\"\n\
                           [algorithm]\nepisode_length = 300\n[mc]\nreplicates = 5\n";

#[test]
fn psi_quantile_is_linear_in_delta_for_bounded_pdf_noise() {
    let d = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.0, 0.3]);
    let noise = NoiseModel::uniform_bounded(DMatrix::identity(2, 2)).unwrap();
    let slopes: Vec<f64> = [0.01, 0.05, 0.1]
        .iter()
        .map(|&delta| estimate_psi(&d, &noise, delta, 4, 20_000, 17).unwrap() / delta)
        .collect();
    let (lo, hi) = slopes
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    assert!(hi <= 3.0 * lo, "psi/delta spread {slopes:?}");
}

#[test]
fn psi_quantile_grows_with_delta() {
    let d = DMatrix::from_element(1, 1, 0.5);
    let noise = NoiseModel::gaussian(DMatrix::identity(1, 1)).unwrap();
    let d2 = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, -0.4]);
    let noise2 = NoiseModel::gaussian(DMatrix::identity(2, 2)).unwrap();
    let a = estimate_psi(&d2, &noise2, 0.01, 10, 1000, 3).unwrap();
    let b = estimate_psi(&d2, &noise2, 0.2, 10, 1000, 3).unwrap();
    assert!(a <= b);
    assert!(estimate_psi(&d, &noise, 0.05, 10, 200, 3).unwrap() > 0.0);
}

#[test]
fn noise_free_policy_cost_vanishes() {
    let theta = scalar_system(1.0, 1.0);
    let cost = CostMatrices::identity(1, 1);
    let sol = solve_dare(&theta, &cost, &RiccatiOptions::default()).unwrap();
    let c = evaluate_policy_cost(&theta, &sol.gain, &cost, None, 1000, 4, 1).unwrap();
    assert_eq!(c.mean, 0.0);
    assert_eq!(c.standard_error, 0.0);
}

#[test]
fn unstable_gain_overflows() {
    let theta = scalar_system(1.0, 1.0);
    let cost = CostMatrices::identity(1, 1);
    let noise = NoiseModel::gaussian(DMatrix::identity(1, 1)).unwrap();
    let bad = DMatrix::from_element(1, 1, 2.0);
    let err = evaluate_policy_cost(&theta, &bad, &cost, Some(&noise), 20_000, 2, 1).unwrap_err();
    assert_eq!(harness::FailureKind::classify(&err), harness::FailureKind::Overflow);
}

#[test]
fn report_round_trip_recovers_aggregate() {
    let cfg = parse_config(SMALL_BATCH).unwrap();
    let report = harness::run_montecarlo(&cfg).unwrap();
    assert_eq!(report.rows.len(), 5);
    let freq = report.rows.iter().filter(|r| r.success()).count() as f64 / 5.0;
    assert_eq!(report.aggregate.frequency, Some(freq));
    let parsed = RunReport::from_csv(&report.to_csv()).unwrap();
    assert_eq!(parsed.aggregate, report.aggregate);
    assert_eq!(parsed.rows, report.rows);
    assert_eq!(parsed.to_csv(), report.to_csv());
}

#[test]
fn same_seed_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(SMALL_BATCH).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    harness::run_montecarlo(&cfg).unwrap().write(&a).unwrap();
    harness::run_montecarlo(&cfg).unwrap().write(&b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn header_echo_reparses_to_the_same_config() {
    let cfg = parse_config(SMALL_BATCH).unwrap();
    let echoed: String = cfg
        .header()
        .lines()
        .map(|l| format!("{}\n", l.trim_start_matches("# ")))
        .collect();
    let again = parse_config(&echoed).unwrap();
    assert_eq!(again.to_toml(), cfg.to_toml());
}

#[test]
fn empty_batch_writes_header_only() {
    let cfg = parse_config("[system]\ngenerator = \"scalar-unstable\"\n[mc]\nreplicates = 0\n").unwrap();
    let report = harness::run_montecarlo(&cfg).unwrap();
    let csv = report.to_csv();
    assert!(csv.contains("frequency=undefined"));
    assert!(csv.lines().last().unwrap().starts_with("replicate,seed,success"));
}
