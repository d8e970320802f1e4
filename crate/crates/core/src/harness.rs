//! Experiment configuration, the Monte Carlo runner and report files.
//!
//! Configurations are TOML. Every table and key is optional except
//! `[system]`; unknown keys are rejected. After defaults are applied the
//! resolved configuration is echoed as `#`-prefixed TOML at the top of every
//! report, so a report alone is enough to rerun it.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Binomial, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};
use crate::identification::{PsiSpec, SampleSizeParams, DEFAULT_RANK_TOL, DEFAULT_UNIT_TOL};
use crate::linalg;
use crate::riccati::{CostMatrices, RiccatiOptions};
use crate::rng;
use crate::stabilization::{certify_with, matrix_from_rows, rows_of, run_stabilization, Sizing, StabilizationOptions};
use crate::system::{self, NoiseKind, NoiseModel, SimOptions, SystemParams};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "LQSTAB_WORKERS";

pub const REPORT_FORMAT: &str = "lqstab-report v1";

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_seed: Option<u64>,
    /// Spectral radius of the known stable closed loop (`random-stabilizable`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Rows>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// `a = 1.3, b = 1`.
    ScalarUnstable,
    /// `A = [[1.2, 0.5], [0, 0.8]]`, `B = [[1, 0], [0.5, 1]]`.
    #[serde(rename = "coupled-2x2")]
    Coupled2x2,
    /// `a = b = 1`.
    Golden,
    /// See [`system::random_stabilizable`].
    RandomStabilizable,
}

impl Generator {
    fn build(self, spec: &SystemSpec) -> Result<SystemParams> {
        match self {
            Generator::ScalarUnstable => Ok(system::scalar_system(1.3, 1.0)),
            Generator::Golden => Ok(system::scalar_system(1.0, 1.0)),
            Generator::Coupled2x2 => SystemParams::new(
                DMatrix::from_row_slice(2, 2, &[1.2, 0.5, 0.0, 0.8]),
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]),
            ),
            Generator::RandomStabilizable => {
                let p = spec
                    .p
                    .ok_or_else(|| key_err("system.p", "required by random-stabilizable"))?;
                let r = spec
                    .r
                    .ok_or_else(|| key_err("system.r", "required by random-stabilizable"))?;
                let (theta, _) =
                    system::random_stabilizable(p, r, spec.radius.unwrap_or(0.9), spec.generator_seed.unwrap_or(0))?;
                Ok(theta)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseChoice {
    #[default]
    Gaussian,
    SymmetricWeibull,
    UniformBounded,
    None,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub kind: NoiseChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizingSpec {
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default)]
    pub psi: PsiSpec,
    /// Defaults to 2 for Gaussian noise, the noise exponent for Weibull noise
    /// and `inf` for bounded noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl Default for SizingSpec {
    fn default() -> Self {
        SizingSpec {
            rho: 1.0,
            psi: PsiSpec::default(),
            alpha: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Replaces the sample-size formula when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_length: Option<usize>,
    #[serde(default = "default_eps_floor")]
    pub eps_floor: f64,
    #[serde(default = "default_max_redraws")]
    pub max_redraws: usize,
    #[serde(default = "default_max_episode_length")]
    pub max_episode_length: usize,
    #[serde(default = "default_cap")]
    pub magnitude_cap_log10: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub sizing: SizingSpec,
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        AlgorithmSpec {
            epsilon0: default_epsilon0(),
            delta: default_delta(),
            episode_length: None,
            eps_floor: default_eps_floor(),
            max_redraws: default_max_redraws(),
            max_episode_length: default_max_episode_length(),
            magnitude_cap_log10: default_cap(),
            x0: None,
            sizing: SizingSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

impl Default for McSpec {
    fn default() -> Self {
        McSpec {
            replicates: default_replicates(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiccatiSpec {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Perturbation samples for the stabilizing-radius estimate; 0 skips it.
    #[serde(default)]
    pub radius_samples: usize,
}

impl Default for RiccatiSpec {
    fn default() -> Self {
        RiccatiSpec {
            tol: default_tol(),
            max_iter: default_max_iter(),
            radius_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// `r x p`; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<Rows>,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        SimulateSpec {
            steps: default_steps(),
            feedback: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralSpec {
    /// Matrix to analyze; the closed loop `A + B L` under
    /// `simulate.feedback` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Rows>,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default = "default_unit_tol")]
    pub unit_tol: f64,
}

impl Default for SpectralSpec {
    fn default() -> Self {
        SpectralSpec {
            matrix: None,
            rank_tol: DEFAULT_RANK_TOL,
            unit_tol: DEFAULT_UNIT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiSection {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_psi_steps")]
    pub n_steps: usize,
    #[serde(default = "default_psi_mc")]
    pub n_mc: usize,
}

impl Default for PsiSection {
    fn default() -> Self {
        PsiSection {
            delta: default_delta(),
            n_steps: default_psi_steps(),
            n_mc: default_psi_mc(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
}

/// The configuration file as written, or after [`parse_config`] with every
/// default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub cost: CostSpec,
    #[serde(default)]
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub mc: McSpec,
    #[serde(default)]
    pub riccati: RiccatiSpec,
    #[serde(default)]
    pub simulate: SimulateSpec,
    #[serde(default)]
    pub spectral: SpectralSpec,
    #[serde(default)]
    pub psi: PsiSection,
    #[serde(default)]
    pub output: OutputSpec,
}

fn one() -> f64 {
    1.0
}
fn default_epsilon0() -> f64 {
    0.5
}
fn default_delta() -> f64 {
    0.05
}
fn default_eps_floor() -> f64 {
    1e-6
}
fn default_max_redraws() -> usize {
    16
}
fn default_max_episode_length() -> usize {
    1_000_000
}
fn default_cap() -> f64 {
    SimOptions::default().magnitude_cap_log10
}
fn default_replicates() -> usize {
    100
}
fn default_tol() -> f64 {
    RiccatiOptions::default().tol
}
fn default_max_iter() -> usize {
    RiccatiOptions::default().max_iter
}
fn default_steps() -> usize {
    1000
}
fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}
fn default_unit_tol() -> f64 {
    DEFAULT_UNIT_TOL
}
fn default_psi_steps() -> usize {
    100
}
fn default_psi_mc() -> usize {
    1000
}

fn kebab(kind: NoiseKind) -> &'static str {
    match kind {
        NoiseKind::Gaussian => "gaussian",
        NoiseKind::SymmetricWeibull => "symmetric-weibull",
        NoiseKind::UniformBounded => "uniform-bounded",
    }
}

fn key_err(key: &str, expectation: impl fmt::Display) -> Error {
    Error::Config(format!("{key}: {expectation}"))
}

/// Validated configuration with the typed objects it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Resolved file contents; every defaulted field is filled in.
    pub file: ConfigFile,
    pub theta: SystemParams,
    pub noise: Option<NoiseModel>,
    pub cost: CostMatrices,
    pub x0: DVector<f64>,
    pub feedback: DMatrix<f64>,
    pub sizing: Sizing,
    pub stabilization: StabilizationOptions,
    pub riccati: RiccatiOptions,
}

fn matrix_key(rows: &Rows, key: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(key_err(key, "must be a non-empty matrix"));
    }
    let m = matrix_from_rows(rows).map_err(|_| key_err(key, "rows must have equal length"))?;
    if !m.iter().all(|v| v.is_finite()) {
        return Err(key_err(key, "entries must be finite"));
    }
    Ok(m)
}

fn shape_key(m: &DMatrix<f64>, rows: usize, cols: usize, key: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(key_err(
            key,
            format!("expected {rows}x{cols}, found {}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

fn pd_key(m: DMatrix<f64>, key: &str) -> Result<DMatrix<f64>> {
    linalg::ensure_positive_definite(&m, key).map_err(|e| match e {
        Error::Config(msg) => key_err(key, msg.trim_start_matches(key).trim_start()),
        other => other,
    })?;
    Ok(m)
}

fn in_unit_interval(v: f64, key: &str) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(key_err(key, format!("must lie in (0, 1), got {v}")))
    }
}

fn positive(v: f64, key: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(key_err(key, format!("must be positive and finite, got {v}")))
    }
}

/// Parses and validates a TOML configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message().trim())))?;
    resolve(file)
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Applies defaults and checks every constraint.
pub fn resolve(mut file: ConfigFile) -> Result<ExperimentConfig> {
    // system
    let sys = &mut file.system;
    let theta = match (sys.generator, &sys.a, &sys.b) {
        (None, Some(a), Some(b)) => {
            let a = matrix_key(a, "system.a")?;
            let b = matrix_key(b, "system.b")?;
            if a.nrows() != a.ncols() {
                return Err(key_err(
                    "system.a",
                    format!("must be square, found {}x{}", a.nrows(), a.ncols()),
                ));
            }
            shape_key(&b, a.nrows(), b.ncols(), "system.b")?;
            SystemParams::new(a, b)?
        }
        (Some(g), a, b) => {
            // a resolved echo lists the generated matrices next to the generator
            let theta = g.build(sys)?;
            let same = |rows: &Option<Rows>, m: &DMatrix<f64>| rows.as_ref().is_none_or(|r| *r == rows_of(m));
            if !same(a, theta.a()) || !same(b, theta.b()) {
                return Err(key_err(
                    "system",
                    "a and b must match the generator output when both are given",
                ));
            }
            theta
        }
        (None, _, _) => return Err(key_err("system", "needs a generator or both a and b")),
    };
    let (p, r) = (theta.p(), theta.r());
    sys.a = Some(rows_of(theta.a()));
    sys.b = Some(rows_of(theta.b()));
    sys.p = Some(p);
    sys.r = Some(r);
    if sys.generator == Some(Generator::RandomStabilizable) {
        sys.radius.get_or_insert(0.9);
        sys.generator_seed.get_or_insert(0);
    }

    // noise
    let ns = &mut file.noise;
    let cov = match &ns.covariance {
        Some(c) => {
            let c = matrix_key(c, "noise.covariance")?;
            shape_key(&c, p, p, "noise.covariance")?;
            pd_key(c, "noise.covariance")?
        }
        None => DMatrix::identity(p, p),
    };
    let noise = match ns.kind {
        NoiseChoice::None => {
            ns.alpha = None;
            ns.covariance = None;
            None
        }
        kind => {
            let nk = match kind {
                NoiseChoice::Gaussian => NoiseKind::Gaussian,
                NoiseChoice::SymmetricWeibull => NoiseKind::SymmetricWeibull,
                _ => NoiseKind::UniformBounded,
            };
            if nk == NoiseKind::SymmetricWeibull {
                match ns.alpha {
                    Some(a) => positive(a, "noise.alpha")?,
                    None => return Err(key_err("noise.alpha", "required for symmetric-weibull noise")),
                }
            }
            let mut model = NoiseModel::new(nk, ns.alpha, cov.clone())?;
            if ns.alpha.is_some_and(|a| a != model.alpha()) {
                return Err(key_err(
                    "noise.alpha",
                    format!("{} noise has alpha = {}", kebab(nk), model.alpha()),
                ));
            }
            if ns.b1.is_some() || ns.b2.is_some() {
                let b1 = ns.b1.unwrap_or(model.b1());
                let b2 = ns.b2.unwrap_or(model.b2());
                positive(b1, "noise.b1")?;
                positive(b2, "noise.b2")?;
                model = model.with_tail_constants(b1, b2)?;
            }
            ns.alpha = Some(model.alpha());
            ns.covariance = Some(rows_of(&cov));
            ns.b1 = Some(model.b1());
            ns.b2 = Some(model.b2());
            Some(model)
        }
    };

    // cost
    let q = match &file.cost.q {
        Some(q) => {
            let q = matrix_key(q, "cost.q")?;
            shape_key(&q, p, p, "cost.q")?;
            pd_key(q, "cost.q")?
        }
        None => DMatrix::identity(p, p),
    };
    let rr = match &file.cost.r {
        Some(m) => {
            let m = matrix_key(m, "cost.r")?;
            shape_key(&m, r, r, "cost.r")?;
            pd_key(m, "cost.r")?
        }
        None => DMatrix::identity(r, r),
    };
    file.cost.q = Some(rows_of(&q));
    file.cost.r = Some(rows_of(&rr));
    let cost = CostMatrices::new(q, rr)?;

    // algorithm
    let alg = &mut file.algorithm;
    positive(alg.epsilon0, "algorithm.epsilon0")?;
    in_unit_interval(alg.delta, "algorithm.delta")?;
    if !(alg.eps_floor >= 0.0 && alg.eps_floor.is_finite()) {
        return Err(key_err(
            "algorithm.eps_floor",
            format!("must be nonnegative, got {}", alg.eps_floor),
        ));
    }
    if alg.episode_length == Some(0) {
        return Err(key_err("algorithm.episode_length", "must be positive"));
    }
    if alg.max_episode_length == 0 {
        return Err(key_err("algorithm.max_episode_length", "must be positive"));
    }
    positive(alg.magnitude_cap_log10, "algorithm.magnitude_cap_log10")?;
    let x0 = match &alg.x0 {
        Some(v) if v.len() != p => {
            return Err(key_err(
                "algorithm.x0",
                format!("expected {p} entries, found {}", v.len()),
            ));
        }
        Some(v) if !v.iter().all(|x| x.is_finite()) => return Err(key_err("algorithm.x0", "entries must be finite")),
        Some(v) => DVector::from_vec(v.clone()),
        None => DVector::zeros(p),
    };
    alg.x0 = Some(x0.iter().copied().collect());
    let alpha = alg.sizing.alpha.unwrap_or(match &noise {
        Some(n) => n.alpha(),
        None => 2.0,
    });
    alg.sizing.alpha = Some(alpha);
    let params = SampleSizeParams {
        rho: alg.sizing.rho,
        psi: alg.sizing.psi,
        alpha,
    };
    params.validate().map_err(|e| key_err("algorithm.sizing", e))?;
    match params.psi {
        PsiSpec::Linear { c } => positive(c, "algorithm.sizing.psi.c")?,
        PsiSpec::Constant { value } => positive(value, "algorithm.sizing.psi.value")?,
    }
    let sizing = match alg.episode_length {
        Some(n) => Sizing::Override(n),
        None => Sizing::Formula(params),
    };
    let sim = SimOptions {
        magnitude_cap_log10: alg.magnitude_cap_log10,
    };
    let stabilization = StabilizationOptions {
        eps_floor: alg.eps_floor,
        max_redraws: alg.max_redraws,
        max_episode_length: alg.max_episode_length,
        sim,
    };

    // riccati
    positive(file.riccati.tol, "riccati.tol")?;
    if file.riccati.max_iter == 0 {
        return Err(key_err("riccati.max_iter", "must be positive"));
    }
    let riccati = RiccatiOptions {
        tol: file.riccati.tol,
        max_iter: file.riccati.max_iter,
    };

    // simulate
    if file.simulate.steps == 0 {
        return Err(key_err("simulate.steps", "must be positive"));
    }
    let feedback = match &file.simulate.feedback {
        Some(f) => {
            let f = matrix_key(f, "simulate.feedback")?;
            shape_key(&f, r, p, "simulate.feedback")?;
            f
        }
        None => DMatrix::zeros(r, p),
    };
    file.simulate.feedback = Some(rows_of(&feedback));

    // spectral
    if let Some(m) = &file.spectral.matrix {
        let m = matrix_key(m, "spectral.matrix")?;
        if m.nrows() != m.ncols() {
            return Err(key_err("spectral.matrix", "must be square"));
        }
    }
    positive(file.spectral.rank_tol, "spectral.rank_tol")?;
    positive(file.spectral.unit_tol, "spectral.unit_tol")?;

    // psi
    in_unit_interval(file.psi.delta, "psi.delta")?;
    if file.psi.n_mc < 100 {
        return Err(key_err(
            "psi.n_mc",
            format!("must be at least 100, got {}", file.psi.n_mc),
        ));
    }
    if file.psi.n_steps < 2 {
        return Err(key_err(
            "psi.n_steps",
            format!("must be at least 2, got {}", file.psi.n_steps),
        ));
    }

    Ok(ExperimentConfig {
        file,
        theta,
        noise,
        cost,
        x0,
        feedback,
        sizing,
        stabilization,
        riccati,
    })
}

impl ExperimentConfig {
    pub fn seed(&self) -> u64 {
        self.file.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.file.seed = seed;
        self
    }

    pub fn replicates(&self) -> usize {
        self.file.mc.replicates
    }

    /// Resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.file).expect("resolved config serializes")
    }

    /// Resolved configuration as `# `-prefixed lines.
    pub fn header(&self) -> String {
        let mut out = String::new();
        for line in self.to_toml().lines() {
            if line.is_empty() {
                out.push_str("#\n");
            } else {
                let _ = writeln!(out, "# {line}");
            }
        }
        out
    }
}

/// Failure classes of a Monte Carlo replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FailureKind {
    CertFalse,
    EmptySet,
    SingularGram,
    Overflow,
    SolverNonconv,
    /// Anything else (a degenerate feedback draw, a failed stacked fit).
    Other,
}

impl FailureKind {
    pub const ALL: [FailureKind; 6] = [
        FailureKind::CertFalse,
        FailureKind::EmptySet,
        FailureKind::SingularGram,
        FailureKind::Overflow,
        FailureKind::SolverNonconv,
        FailureKind::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::CertFalse => "cert-false",
            FailureKind::EmptySet => "empty-set",
            FailureKind::SingularGram => "singular-gram",
            FailureKind::Overflow => "overflow",
            FailureKind::SolverNonconv => "solver-nonconv",
            FailureKind::Other => "other",
        }
    }

    pub fn classify(err: &Error) -> FailureKind {
        match err {
            Error::SingularGram { .. } => FailureKind::SingularGram,
            Error::Overflow { .. } => FailureKind::Overflow,
            Error::NonConvergence { .. } => FailureKind::SolverNonconv,
            _ => FailureKind::Other,
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FailureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FailureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown failure kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub seed: u64,
    pub failure: Option<FailureKind>,
    /// Spectral radius of the true system under the certified gain.
    pub spectral_radius: Option<f64>,
    pub epsilon_tilde: Option<f64>,
    pub episode_lengths: Vec<usize>,
    pub detail: String,
    /// Milliseconds; only recorded when timing is requested.
    pub wall_ms: Option<f64>,
}

impl ReplicateRow {
    pub fn success(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub replicates: usize,
    pub successes: usize,
    /// `None` when there are no replicates.
    pub frequency: Option<f64>,
    /// Two-sided 95% Clopper-Pearson interval.
    pub ci95: Option<(f64, f64)>,
    /// `1 - delta`.
    pub target: f64,
    /// `P(X <= successes)` for `X ~ Bin(replicates, target)`.
    pub p_lower: Option<f64>,
    pub failures: BTreeMap<FailureKind, usize>,
}

impl Aggregate {
    pub fn from_rows(rows: &[ReplicateRow], target: f64) -> Aggregate {
        let n = rows.len();
        let s = rows.iter().filter(|r| r.success()).count();
        let mut failures: BTreeMap<FailureKind, usize> = FailureKind::ALL.iter().map(|&k| (k, 0)).collect();
        for f in rows.iter().filter_map(|r| r.failure) {
            *failures.entry(f).or_default() += 1;
        }
        Aggregate {
            replicates: n,
            successes: s,
            frequency: (n > 0).then(|| s as f64 / n as f64),
            ci95: (n > 0).then(|| clopper_pearson(s, n, 0.05)),
            target,
            p_lower: (n > 0).then(|| binomial_lower_tail(s, n, target)),
            failures,
        }
    }

    /// One-sided exact binomial check: the observed count is compatible with
    /// a success probability of at least `target` at level `alpha`.
    pub fn meets_target(&self, alpha: f64) -> bool {
        self.p_lower.is_some_and(|p| p >= alpha)
    }
}

/// Clopper-Pearson interval at level `1 - alpha`.
pub fn clopper_pearson(successes: usize, n: usize, alpha: f64) -> (f64, f64) {
    assert!(n > 0 && successes <= n);
    let (s, n) = (successes as f64, n as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(s, n - s + 1.0).expect("valid beta").inverse_cdf(alpha / 2.0)
    };
    let hi = if successes as f64 == n {
        1.0
    } else {
        Beta::new(s + 1.0, n - s)
            .expect("valid beta")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// `P(X <= k)` for `X ~ Bin(n, p)`.
pub fn binomial_lower_tail(k: usize, n: usize, p: f64) -> f64 {
    Binomial::new(p, n as u64).expect("valid binomial").cdf(k as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    /// Resolved configuration echo (`#`-prefixed lines).
    pub header: String,
    pub rows: Vec<ReplicateRow>,
    pub aggregate: Aggregate,
}

/// Worker count from `LQSTAB_WORKERS`, else the available parallelism.
pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MonteCarloOptions {
    pub workers: Option<usize>,
    /// Record per-replicate wall time (makes reports non-reproducible).
    pub timing: bool,
}

pub fn run_montecarlo(config: &ExperimentConfig) -> Result<RunReport> {
    run_montecarlo_with(config, &MonteCarloOptions::default())
}

/// Runs the configured number of stabilization + certification replicates.
/// Replicate `i` uses seed `derive_seed(config.seed, i)`; rows come back in
/// replicate order whatever the worker count.
pub fn run_montecarlo_with(config: &ExperimentConfig, opts: &MonteCarloOptions) -> Result<RunReport> {
    let workers = opts.workers.unwrap_or_else(default_workers);
    let n = config.replicates();
    let rows = with_workers(workers, || {
        (0..n)
            .into_par_iter()
            .map(|i| run_replicate(config, i, opts.timing))
            .collect::<Vec<_>>()
    })?;
    let aggregate = Aggregate::from_rows(&rows, 1.0 - config.file.algorithm.delta);
    Ok(RunReport {
        header: config.header(),
        rows,
        aggregate,
    })
}

/// One replicate of the Monte Carlo batch.
pub fn run_replicate(config: &ExperimentConfig, index: usize, timing: bool) -> ReplicateRow {
    let seed = rng::derive_seed(config.seed(), index as u64);
    let start = Instant::now();
    let mut row = ReplicateRow {
        replicate: index,
        seed,
        failure: None,
        spectral_radius: None,
        epsilon_tilde: None,
        episode_lengths: Vec::new(),
        detail: String::new(),
        wall_ms: None,
    };
    let fail = |row: &mut ReplicateRow, err: &Error| {
        row.failure = Some(FailureKind::classify(err));
        row.detail = err.to_string();
    };
    match run_stabilization(
        &config.theta,
        config.noise.as_ref(),
        config.file.algorithm.epsilon0,
        config.file.algorithm.delta,
        &config.sizing,
        seed,
        &config.x0,
        &config.stabilization,
    ) {
        Ok(set) => {
            row.epsilon_tilde = Some(set.epsilon_tilde);
            row.episode_lengths = set.episode_lengths();
            match certify_with(&config.theta, &set.theta_hat, &config.cost, &config.riccati) {
                Ok(c) => {
                    row.spectral_radius = Some(c.spectral_radius);
                    if set.empty {
                        row.failure = Some(FailureKind::EmptySet);
                    } else if !c.certified {
                        row.failure = Some(FailureKind::CertFalse);
                    }
                }
                Err(e) => fail(&mut row, &e),
            }
        }
        Err(e) => fail(&mut row, &e),
    }
    if timing {
        row.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    row
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn sanitize(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

const COLUMNS: &str = "replicate,seed,success,failure,spectral_radius,epsilon_tilde,episode_lengths,detail";

impl RunReport {
    pub fn timed(&self) -> bool {
        self.rows.iter().any(|r| r.wall_ms.is_some())
    }

    /// CSV with a comment header: format line, resolved config, aggregate
    /// and failure counts, then the column line and one row per replicate.
    pub fn to_csv(&self) -> String {
        let a = &self.aggregate;
        let mut out = String::new();
        let _ = writeln!(out, "# {REPORT_FORMAT}");
        out.push_str(&self.header);
        let _ = writeln!(
            out,
            "# aggregate replicates={} successes={} frequency={} ci95_low={} ci95_high={} target={} p_lower={}",
            a.replicates,
            a.successes,
            a.frequency.map_or("undefined".into(), fmt_f64),
            a.ci95.map_or("undefined".into(), |c| fmt_f64(c.0)),
            a.ci95.map_or("undefined".into(), |c| fmt_f64(c.1)),
            fmt_f64(a.target),
            a.p_lower.map_or("undefined".into(), fmt_f64),
        );
        let failures: Vec<String> = a.failures.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "# failures {}", failures.join(" "));
        out.push_str(COLUMNS);
        if self.timed() {
            out.push_str(",wall_ms");
        }
        out.push('\n');
        for r in &self.rows {
            let lengths: Vec<String> = r.episode_lengths.iter().map(usize::to_string).collect();
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.replicate,
                r.seed,
                r.success(),
                r.failure.map(|f| f.as_str()).unwrap_or(""),
                fmt_opt(r.spectral_radius),
                fmt_opt(r.epsilon_tilde),
                lengths.join(";"),
                sanitize(&r.detail),
            );
            if self.timed() {
                let _ = write!(out, ",{}", fmt_opt(r.wall_ms));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses [`RunReport::to_csv`] output.
    pub fn from_csv(text: &str) -> Result<RunReport> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l == format!("# {REPORT_FORMAT}") => {}
            other => {
                return Err(Error::Parse(format!(
                    "expected '# {REPORT_FORMAT}', found {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut header = String::new();
        let mut agg: BTreeMap<String, String> = BTreeMap::new();
        let mut failures = BTreeMap::new();
        let mut columns = None;
        for line in lines.by_ref() {
            if let Some(rest) = line.strip_prefix("# aggregate ") {
                for tok in rest.split_whitespace() {
                    let (k, v) = tok
                        .split_once('=')
                        .ok_or_else(|| Error::Parse(format!("bad aggregate field '{tok}'")))?;
                    agg.insert(k.to_string(), v.to_string());
                }
            } else if let Some(rest) = line.strip_prefix("# failures ") {
                for tok in rest.split_whitespace() {
                    let (k, v) = tok
                        .split_once('=')
                        .ok_or_else(|| Error::Parse(format!("bad failure count '{tok}'")))?;
                    failures.insert(k.parse::<FailureKind>()?, parse_num::<usize>(v)?);
                }
            } else if line.starts_with('#') {
                header.push_str(line);
                header.push('\n');
            } else {
                columns = Some(line);
                break;
            }
        }
        let columns = columns.ok_or_else(|| Error::Parse("missing column line".into()))?;
        let timed = match columns.strip_prefix(COLUMNS) {
            Some("") => false,
            Some(",wall_ms") => true,
            _ => return Err(Error::Parse(format!("unexpected columns '{columns}'"))),
        };
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 + timed as usize {
                return Err(Error::Parse(format!("bad row '{line}'")));
            }
            let failure = if f[3].is_empty() { None } else { Some(f[3].parse()?) };
            if parse_num::<bool>(f[2])? != failure.is_none() {
                return Err(Error::Parse(format!("success flag disagrees with failure in '{line}'")));
            }
            rows.push(ReplicateRow {
                replicate: parse_num(f[0])?,
                seed: parse_num(f[1])?,
                failure,
                spectral_radius: parse_opt(f[4])?,
                epsilon_tilde: parse_opt(f[5])?,
                episode_lengths: if f[6].is_empty() {
                    Vec::new()
                } else {
                    f[6].split(';').map(parse_num).collect::<Result<_>>()?
                },
                detail: f[7].to_string(),
                wall_ms: if timed { parse_opt(f[8])? } else { None },
            });
        }
        let get = |k: &str| {
            agg.get(k)
                .ok_or_else(|| Error::Parse(format!("aggregate is missing '{k}'")))
        };
        let undefined_or = |k: &str| -> Result<Option<f64>> {
            let v = get(k)?;
            if v == "undefined" {
                Ok(None)
            } else {
                parse_num(v).map(Some)
            }
        };
        let ci95 = match (undefined_or("ci95_low")?, undefined_or("ci95_high")?) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            _ => None,
        };
        let aggregate = Aggregate {
            replicates: parse_num(get("replicates")?)?,
            successes: parse_num(get("successes")?)?,
            frequency: undefined_or("frequency")?,
            ci95,
            target: parse_num(get("target")?)?,
            p_lower: undefined_or("p_lower")?,
            failures,
        };
        Ok(RunReport {
            header,
            rows,
            aggregate,
        })
    }
}

fn parse_num<T: FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse(format!("bad value '{s}'")))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_num(s).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyCost {
    pub mean: f64,
    pub standard_error: f64,
}

/// Mean and standard error of the empirical average cost of `u = gain x`
/// over `n_reps` trajectories of length `horizon` from `x(0) = 0`.
pub fn evaluate_policy_cost(
    theta: &SystemParams,
    gain: &DMatrix<f64>,
    cost: &CostMatrices,
    noise: Option<&NoiseModel>,
    horizon: usize,
    n_reps: usize,
    seed: u64,
) -> Result<PolicyCost> {
    if n_reps < 2 {
        return Err(Error::Config(format!("n_reps must be at least 2, got {n_reps}")));
    }
    let x0 = DVector::zeros(theta.p());
    let opts = SimOptions::default();
    let costs: Vec<f64> = (0..n_reps as u64)
        .into_par_iter()
        .map(|i| {
            let traj = system::simulate(theta, gain, &x0, horizon, noise, rng::derive_seed(seed, i), &opts)?;
            system::average_cost(&traj, cost.q(), cost.r())
        })
        .collect::<Result<_>>()?;
    let n = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / n;
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(PolicyCost {
        mean,
        standard_error: (var / n).sqrt(),
    })
}
