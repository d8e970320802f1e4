//! LQ system parameters, sub-Weibull noise and closed-loop simulation.
//!
//! The state evolves as `x(t+1) = A x(t) + B u(t) + w(t+1)` with the linear
//! feedback `u(t) = L x(t)`. Noise vectors are i.i.d. across time.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rug::Float;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg;
use crate::precise::{self, exponent, required_precision, BASE_PRECISION};
use crate::rng::{self, Purpose};

/// The dynamics pair `theta = [A, B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl SystemParams {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        linalg::ensure_square(&a, "SystemParams::A")?;
        if a.nrows() == 0 {
            return Err(Error::Config("state dimension p must be positive".into()));
        }
        if b.ncols() == 0 {
            return Err(Error::Config("input dimension r must be positive".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(dim_err("SystemParams::B rows", a.nrows(), b.nrows()));
        }
        linalg::ensure_finite(&a, "SystemParams::A")?;
        linalg::ensure_finite(&b, "SystemParams::B")?;
        Ok(SystemParams { a, b })
    }

    /// Splits a `p x (p + r)` parameter matrix into `[A, B]`.
    pub fn from_theta(theta: &DMatrix<f64>) -> Result<Self> {
        let p = theta.nrows();
        if theta.ncols() <= p {
            return Err(dim_err(
                "SystemParams::from_theta",
                format!("p x q with q > p = {p}"),
                format!("{}x{}", p, theta.ncols()),
            ));
        }
        let r = theta.ncols() - p;
        Self::new(theta.columns(0, p).into_owned(), theta.columns(p, r).into_owned())
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// State dimension.
    pub fn p(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn r(&self) -> usize {
        self.b.ncols()
    }

    /// Parameter width `p + r`.
    pub fn q(&self) -> usize {
        self.p() + self.r()
    }

    /// `[A, B]` as a `p x q` matrix.
    pub fn theta(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.p(), self.q());
        t.columns_mut(0, self.p()).copy_from(&self.a);
        t.columns_mut(self.p(), self.r()).copy_from(&self.b);
        t
    }

    pub fn check_feedback(&self, feedback: &DMatrix<f64>) -> Result<()> {
        if feedback.shape() != (self.r(), self.p()) {
            return Err(dim_err(
                "feedback",
                format!("{}x{}", self.r(), self.p()),
                format!("{}x{}", feedback.nrows(), feedback.ncols()),
            ));
        }
        linalg::ensure_finite(feedback, "feedback")
    }

    /// `A + B L`.
    pub fn closed_loop(&self, feedback: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_feedback(feedback)?;
        Ok(&self.a + &self.b * feedback)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Gaussian,
    SymmetricWeibull,
    UniformBounded,
}

/// Sub-Weibull noise: `P(|w_i| > y) <= b1 exp(-y^alpha / b2)`.
///
/// Coordinates are drawn i.i.d. with zero mean and unit variance and then
/// multiplied by the lower Cholesky factor of the covariance `C`. The tail
/// constants default to a bound that is valid for every coordinate of the
/// transformed vector; callers may override them.
///
/// The uniform kind is the `alpha -> inf` limit. It stores `alpha = inf` and
/// reads `b2` as the support half-width, so the bound becomes
/// `b1 * 1{y < b2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    kind: NoiseKind,
    alpha: f64,
    b1: f64,
    b2: f64,
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

impl NoiseModel {
    pub fn gaussian(covariance: DMatrix<f64>) -> Result<Self> {
        Self::build(NoiseKind::Gaussian, 2.0, covariance)
    }

    pub fn symmetric_weibull(alpha: f64, covariance: DMatrix<f64>) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!(
                "Weibull tail exponent must be positive and finite, got {alpha}"
            )));
        }
        Self::build(NoiseKind::SymmetricWeibull, alpha, covariance)
    }

    pub fn uniform_bounded(covariance: DMatrix<f64>) -> Result<Self> {
        Self::build(NoiseKind::UniformBounded, f64::INFINITY, covariance)
    }

    /// Generic constructor; `alpha` is ignored for the gaussian and uniform kinds.
    pub fn new(kind: NoiseKind, alpha: Option<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        match kind {
            NoiseKind::Gaussian => Self::gaussian(covariance),
            NoiseKind::UniformBounded => Self::uniform_bounded(covariance),
            NoiseKind::SymmetricWeibull => Self::symmetric_weibull(
                alpha.ok_or_else(|| Error::Config("symmetric-weibull noise requires alpha".into()))?,
                covariance,
            ),
        }
    }

    fn build(kind: NoiseKind, alpha: f64, covariance: DMatrix<f64>) -> Result<Self> {
        linalg::ensure_positive_definite(&covariance, "noise covariance C")?;
        let covariance = linalg::symmetrize(&covariance);
        let factor = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("noise covariance C is not positive definite".into()))?
            .l();
        let (b1, b2) = default_tail_constants(kind, alpha, &factor);
        Ok(NoiseModel {
            kind,
            alpha,
            b1,
            b2,
            covariance,
            factor,
        })
    }

    /// Replaces the default tail constants.
    pub fn with_tail_constants(mut self, b1: f64, b2: f64) -> Result<Self> {
        if !(b1 > 0.0 && b2 > 0.0 && b1.is_finite() && b2.is_finite()) {
            return Err(Error::Config(format!(
                "tail constants must be positive and finite, got b1={b1}, b2={b2}"
            )));
        }
        self.b1 = b1;
        self.b2 = b2;
        Ok(self)
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn b1(&self) -> f64 {
        self.b1
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower-triangular `F` with `F F^T = C`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Right-hand side of the sub-Weibull tail inequality at `y`.
    pub fn tail_bound(&self, y: f64) -> f64 {
        if self.alpha.is_infinite() {
            if y < self.b2 {
                self.b1
            } else {
                0.0
            }
        } else {
            self.b1 * (-y.powf(self.alpha) / self.b2).exp()
        }
    }

    /// Largest coordinate magnitude, for bounded kinds.
    pub fn support_bound(&self) -> Option<f64> {
        (self.kind == NoiseKind::UniformBounded).then(|| row_abs_sum_max(&self.factor) * SQRT3)
    }

    /// One zero-mean, unit-variance coordinate before covariance shaping.
    pub fn standard_coordinate<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => StandardNormal.sample(rng),
            NoiseKind::UniformBounded => SQRT3 * rng.random_range(-1.0..=1.0),
            NoiseKind::SymmetricWeibull => {
                weibull_unit_variance_scale(self.alpha) * raw_weibull_coordinate(self.alpha, rng)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| self.standard_coordinate(rng)));
        &self.factor * z
    }
}

/// `sign * E^(1/alpha)` with `E ~ Exp(1)`: unit-scale symmetric Weibull,
/// `P(|z| > y) = exp(-y^alpha)`.
pub fn raw_weibull_coordinate<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let e: f64 = Exp1.sample(rng);
    let mag = e.powf(1.0 / alpha);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

/// Scale making the unit-scale Weibull coordinate unit-variance:
/// `E|z|^2 = Gamma(1 + 2/alpha)`.
pub fn weibull_unit_variance_scale(alpha: f64) -> f64 {
    statrs::function::gamma::gamma(1.0 + 2.0 / alpha).sqrt().recip()
}

fn row_abs_sum_max(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Tail constants valid for every coordinate of `F z`.
///
/// If `|sum_j F_ij z_j| > y` then some `|z_j| > y / S_i` with
/// `S_i = sum_j |F_ij|`, so a union bound over the `m_i` nonzero entries of
/// the row turns the per-coordinate bound `c1 exp(-y^a / c2)` into
/// `m_i c1 exp(-y^a / (c2 S_i^a))`.
fn default_tail_constants(kind: NoiseKind, alpha: f64, factor: &DMatrix<f64>) -> (f64, f64) {
    let nnz_max = factor
        .row_iter()
        .map(|r| r.iter().filter(|v| **v != 0.0).count())
        .max()
        .unwrap_or(1) as f64;
    let s = row_abs_sum_max(factor);
    match kind {
        // P(|Z| > y) <= 2 exp(-y^2 / 2)
        NoiseKind::Gaussian => (2.0 * nnz_max, 2.0 * s * s),
        NoiseKind::SymmetricWeibull => {
            let scale = weibull_unit_variance_scale(alpha);
            (nnz_max, (scale * s).powf(alpha))
        }
        NoiseKind::UniformBounded => (1.0, SQRT3 * s),
    }
}

/// `count` i.i.d. draws from `noise` on the noise stream of `seed`.
pub fn sample_noise(noise: &NoiseModel, seed: u64, count: usize) -> Vec<DVector<f64>> {
    let mut rng = rng::stream(seed, Purpose::Noise);
    (0..count).map(|_| noise.sample(&mut rng)).collect()
}

/// Simulation knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Abort once some `|x_i(t)|` exceeds `10^magnitude_cap_log10`.
    pub magnitude_cap_log10: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            magnitude_cap_log10: 4000.0,
        }
    }
}

impl SimOptions {
    fn cap_log2(&self) -> i64 {
        (self.magnitude_cap_log10 * std::f64::consts::LOG2_10).floor() as i64
    }

    fn cap_value(&self) -> Float {
        let ln = Float::with_val(64, self.magnitude_cap_log10) * Float::with_val(64, rug::float::Constant::Log2)
            / Float::with_val(64, std::f64::consts::LOG10_2);
        ln.exp()
    }
}

/// States `x(0..=n)` and inputs `u(0..n)` of one closed-loop run.
///
/// Entries are MPFR floats at the run's working precision. [`Trajectory::state`]
/// returns the nearest `f64` values, which saturate to infinity for explosive
/// runs; the identification routines read the exact entries instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<Vec<Float>>,
    inputs: Vec<Vec<Float>>,
    feedback: DMatrix<f64>,
    seed: u64,
    precision: u32,
}

impl Trajectory {
    /// Builds a trajectory from recorded `f64` data. `feedback` gives the
    /// input convention `u(T) = L x(T)` used by [`average_cost`].
    pub fn from_f64(
        states: &[DVector<f64>],
        inputs: &[DVector<f64>],
        feedback: DMatrix<f64>,
        seed: u64,
    ) -> Result<Self> {
        if states.len() != inputs.len() + 1 {
            return Err(dim_err(
                "Trajectory lengths",
                format!("{} states", inputs.len() + 1),
                states.len(),
            ));
        }
        let p = states[0].len();
        let r = feedback.nrows();
        if feedback.ncols() != p {
            return Err(dim_err("Trajectory feedback columns", p, feedback.ncols()));
        }
        if states.iter().any(|s| s.len() != p) || inputs.iter().any(|u| u.len() != r) {
            return Err(dim_err(
                "Trajectory vectors",
                format!("states of length {p}, inputs of length {r}"),
                "ragged data",
            ));
        }
        let prec = BASE_PRECISION;
        Ok(Trajectory {
            states: states
                .iter()
                .map(|s| precise::vec_from_f64(prec, s.as_slice()))
                .collect(),
            inputs: inputs
                .iter()
                .map(|u| precise::vec_from_f64(prec, u.as_slice()))
                .collect(),
            feedback,
            seed,
            precision: prec,
        })
    }

    pub(crate) fn from_parts(
        states: Vec<Vec<Float>>,
        inputs: Vec<Vec<Float>>,
        feedback: DMatrix<f64>,
        seed: u64,
        precision: u32,
    ) -> Self {
        debug_assert_eq!(states.len(), inputs.len() + 1);
        Trajectory {
            states,
            inputs,
            feedback,
            seed,
            precision,
        }
    }

    /// Number of transitions `n`.
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn p(&self) -> usize {
        self.states[0].len()
    }

    pub fn r(&self) -> usize {
        self.feedback.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    /// Feedback used for the final input convention.
    pub fn feedback(&self) -> &DMatrix<f64> {
        &self.feedback
    }

    pub fn state_exact(&self, t: usize) -> &[Float] {
        &self.states[t]
    }

    pub fn input_exact(&self, t: usize) -> &[Float] {
        &self.inputs[t]
    }

    pub fn state(&self, t: usize) -> DVector<f64> {
        DVector::from_vec(precise::vec_to_f64(&self.states[t]))
    }

    pub fn input(&self, t: usize) -> DVector<f64> {
        DVector::from_vec(precise::vec_to_f64(&self.inputs[t]))
    }

    /// Largest binary exponent over all states.
    pub fn max_state_exponent(&self) -> Option<i64> {
        self.states.iter().flatten().filter_map(exponent).max()
    }

    /// CSV with header `t,x_1..x_p,u_1..u_r`; the input columns of the last
    /// row are empty. Numbers carry 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# lqstab-trajectory v1 seed={} precision={}",
            self.seed, self.precision
        );
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.p()).map(|i| format!("x_{i}")));
        header.extend((1..=self.r()).map(|i| format!("u_{i}")));
        let _ = writeln!(out, "{}", header.join(","));
        for (t, x) in self.states.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(format_float));
            match self.inputs.get(t) {
                Some(u) => row.extend(u.iter().map(format_float)),
                None => row.extend(std::iter::repeat_n(String::new(), self.r())),
            }
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Parses the CSV produced by [`Trajectory::to_csv`]. The feedback is
    /// not part of the file and must be supplied.
    pub fn from_csv(text: &str, feedback: DMatrix<f64>) -> Result<Self> {
        let mut seed = 0u64;
        let mut prec = 256u32;
        let mut lines = text.lines().peekable();
        while let Some(l) = lines.peek() {
            if let Some(meta) = l.strip_prefix('#') {
                for tok in meta.split_whitespace() {
                    if let Some(s) = tok.strip_prefix("seed=") {
                        seed = s.parse().map_err(|_| Error::Parse(format!("bad seed {s}")))?;
                    }
                    if let Some(s) = tok.strip_prefix("precision=") {
                        prec = s.parse().map_err(|_| Error::Parse(format!("bad precision {s}")))?;
                    }
                }
                lines.next();
            } else {
                break;
            }
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing trajectory header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let p = cols.iter().filter(|c| c.starts_with("x_")).count();
        let r = cols.iter().filter(|c| c.starts_with("u_")).count();
        if p == 0 || cols.len() != 1 + p + r {
            return Err(Error::Parse(format!("bad trajectory header: {header}")));
        }
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 1 + p + r {
                return Err(Error::Parse(format!("row {ln}: expected {} fields", 1 + p + r)));
            }
            let x = fields[1..=p]
                .iter()
                .map(|s| parse_float(s, prec))
                .collect::<Result<Vec<_>>>()?;
            states.push(x);
            if fields[p + 1..].iter().all(|s| s.is_empty()) {
                continue;
            }
            let u = fields[p + 1..]
                .iter()
                .map(|s| parse_float(s, prec))
                .collect::<Result<Vec<_>>>()?;
            inputs.push(u);
        }
        if states.is_empty() || states.len() != inputs.len() + 1 {
            return Err(Error::Parse(
                "trajectory must have exactly one more state row than input rows".into(),
            ));
        }
        if feedback.shape() != (r, p) {
            return Err(dim_err(
                "Trajectory feedback",
                format!("{r}x{p}"),
                format!("{}x{}", feedback.nrows(), feedback.ncols()),
            ));
        }
        Ok(Trajectory::from_parts(states, inputs, feedback, seed, prec))
    }
}

pub(crate) fn format_float(x: &Float) -> String {
    if x.is_zero() {
        "0".to_string()
    } else {
        x.to_string_radix(10, Some(17))
    }
}

pub(crate) fn parse_float(s: &str, prec: u32) -> Result<Float> {
    Float::parse(s.trim())
        .map(|v| Float::with_val(prec, v))
        .map_err(|e| Error::Parse(format!("bad number '{s}': {e}")))
}

/// Incremental simulator shared by [`simulate`] and the stabilization run.
///
/// Each step runs at the precision that resolves the current state down to
/// `GUARD_BITS` below the noise floor, so quiet stretches stay cheap and
/// explosive ones stay exact relative to the noise.
pub(crate) struct Stepper<'a> {
    theta: &'a SystemParams,
    noise: Option<&'a NoiseModel>,
    rng: rand_chacha::ChaCha20Rng,
    floor: i64,
    cap_log2: i64,
    cap_log10: f64,
    cap: Float,
    max_exp: i64,
    max_prec: u32,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(
        theta: &'a SystemParams,
        noise: Option<&'a NoiseModel>,
        seed: u64,
        floor: i64,
        opts: &SimOptions,
    ) -> Result<Self> {
        if let Some(n) = noise {
            if n.dim() != theta.p() {
                return Err(dim_err("noise dimension", theta.p(), n.dim()));
            }
        }
        Ok(Stepper {
            theta,
            noise,
            rng: rng::stream(seed, Purpose::Noise),
            floor,
            cap_log2: opts.cap_log2(),
            cap_log10: opts.magnitude_cap_log10,
            cap: opts.cap_value(),
            max_exp: i64::MIN,
            max_prec: BASE_PRECISION,
        })
    }

    pub(crate) fn max_precision(&self) -> u32 {
        self.max_prec
    }

    fn track(&mut self, x: &[Float], step: usize) -> Result<()> {
        for v in x {
            if let Some(e) = exponent(v) {
                if e > self.cap_log2 && v.cmp_abs(&self.cap) == Some(std::cmp::Ordering::Greater) {
                    return Err(Error::Overflow {
                        step,
                        cap_log10: self.cap_log10,
                    });
                }
                self.max_exp = self.max_exp.max(e);
            }
        }
        Ok(())
    }

    /// Runs `n` steps under `feedback` starting from `x`, appending
    /// `x(1..=n)` to `states` and `u(0..n)` to `inputs`. `offset` is the
    /// global index of `x` for error reporting.
    pub(crate) fn run(
        &mut self,
        feedback: &DMatrix<f64>,
        mut x: Vec<Float>,
        n: usize,
        offset: usize,
        states: &mut Vec<Vec<Float>>,
        inputs: &mut Vec<Vec<Float>>,
    ) -> Result<Vec<Float>> {
        let closed = self.theta.closed_loop(feedback)?;
        let gain_bits = growth_bits(&closed).max(growth_bits(feedback));
        self.track(&x, offset)?;
        for t in 0..n {
            let top = x.iter().filter_map(exponent).max().unwrap_or(self.floor);
            let prec = required_precision(top + gain_bits, self.floor);
            self.max_prec = self.max_prec.max(prec);
            let u = precise::mat_vec(feedback, &x, prec);
            let mut next = precise::mat_vec(&closed, &x, prec);
            if let Some(noise) = self.noise {
                let w = noise.sample(&mut self.rng);
                for (xi, wi) in next.iter_mut().zip(w.iter()) {
                    *xi += *wi;
                }
            }
            self.track(&next, offset + t + 1)?;
            inputs.push(u);
            states.push(next.clone());
            x = next;
        }
        Ok(x)
    }
}

/// `ceil(log2(max(1, ||m||_inf)))`, a bound on the bits one product adds.
fn growth_bits(m: &DMatrix<f64>) -> i64 {
    let norm = row_abs_sum_max(m).max(1.0);
    norm.log2().ceil() as i64
}

/// Lowest binary exponent the run must resolve.
pub(crate) fn resolution_floor(noise: Option<&NoiseModel>, x0: &[Float]) -> i64 {
    match noise {
        Some(n) => {
            let (lo, _) = linalg::symmetric_eig_range(n.covariance());
            (0.5 * lo.log2()).floor() as i64
        }
        None => x0.iter().filter_map(exponent).min().unwrap_or(0),
    }
}

/// Simulates `n` steps of `x(t+1) = A x(t) + B L x(t) + w(t+1)`.
///
/// States carry enough bits that rounding stays `GUARD_BITS` below the noise
/// level however large they grow; identical `(inputs, seed)` always yield the
/// identical trajectory.
pub fn simulate(
    theta: &SystemParams,
    feedback: &DMatrix<f64>,
    x0: &DVector<f64>,
    n: usize,
    noise: Option<&NoiseModel>,
    seed: u64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    theta.check_feedback(feedback)?;
    if x0.len() != theta.p() {
        return Err(dim_err("x0", theta.p(), x0.len()));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Config("x0 has non-finite entries".into()));
    }
    if n == 0 {
        return Err(Error::Config("step count n must be at least 1".into()));
    }
    let start = precise::vec_from_f64(BASE_PRECISION, x0.as_slice());
    let floor = resolution_floor(noise, &start);
    let mut stepper = Stepper::new(theta, noise, seed, floor, opts)?;
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n);
    states.push(start.clone());
    stepper.run(feedback, start, n, 0, &mut states, &mut inputs)?;
    Ok(Trajectory::from_parts(
        states,
        inputs,
        feedback.clone(),
        seed,
        stepper.max_precision(),
    ))
}

/// `(1/T) sum_{t=1..T} x(t)'Qx(t) + u(t)'Ru(t)` with `u(T) = L x(T)`.
pub fn average_cost(traj: &Trajectory, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<f64> {
    let (p, m) = (traj.p(), traj.r());
    if q.shape() != (p, p) {
        return Err(dim_err(
            "average_cost Q",
            format!("{p}x{p}"),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    if r.shape() != (m, m) {
        return Err(dim_err(
            "average_cost R",
            format!("{m}x{m}"),
            format!("{}x{}", r.nrows(), r.ncols()),
        ));
    }
    let steps = traj.steps();
    if steps == 0 {
        return Ok(0.0);
    }
    let prec = traj.precision();
    let mut total = Float::new(prec);
    for t in 1..=steps {
        let x = traj.state_exact(t);
        total += quad_form(q, x, prec);
        let u = if t < steps {
            traj.input_exact(t).to_vec()
        } else {
            precise::mat_vec(traj.feedback(), x, prec)
        };
        total += quad_form(r, &u, prec);
    }
    total /= steps as f64;
    Ok(total.to_f64())
}

fn quad_form(m: &DMatrix<f64>, x: &[Float], prec: u32) -> Float {
    let mx = precise::mat_vec(m, x, prec);
    let mut acc = Float::new(prec);
    for (a, b) in x.iter().zip(mx.iter()) {
        acc += Float::with_val(prec, a * b);
    }
    acc
}

/// Scalar convenience for tests and examples.
pub fn scalar_system(a: f64, b: f64) -> SystemParams {
    SystemParams::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b))
        .expect("scalar system is always well-formed")
}

/// Random stabilizable pair with a known stabilizer.
///
/// Draws a Gaussian `D` rescaled to spectral radius `radius`, Gaussian `B`
/// (`p x r`) and `L` (`r x p`), and returns `([D - B L, B], L)`, so that
/// `A + B L = D` is stable whenever `radius < 1`.
pub fn random_stabilizable(p: usize, r: usize, radius: f64, seed: u64) -> Result<(SystemParams, DMatrix<f64>)> {
    if p == 0 || r == 0 {
        return Err(Error::Config(format!("dimensions must be positive, got p={p}, r={r}")));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!(
            "radius must be finite and nonnegative, got {radius}"
        )));
    }
    let mut g = rng::stream(seed, Purpose::Generator);
    let mut normal = |rows, cols| DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut g));
    let mut d = normal(p, p);
    let rho = linalg::spectral_radius(&d)?;
    if rho > 0.0 {
        d *= radius / rho;
    }
    let b = normal(p, r);
    let l = normal(r, p);
    let a = &d - &b * &l;
    Ok((SystemParams::new(a, b)?, l))
}
