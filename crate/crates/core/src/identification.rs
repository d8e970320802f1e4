//! Least-squares identification of closed-loop dynamics, spectral
//! diagnostics and the sample-size function.

use std::fmt::Write as _;

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;
use rug::{Assign, Float};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg;
use crate::precise::{self, required_precision, HpMatrix, BASE_PRECISION};
use crate::rng;
use crate::system::{self, NoiseModel, SimOptions, SystemParams, Trajectory};

/// Default relative rank threshold for geometric multiplicities.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;
/// Default band `||lambda| - 1| < tol` treated as a unit-circle eigenvalue.
pub const DEFAULT_UNIT_TOL: f64 = 1e-6;

/// Bits of headroom kept when declaring the Gram matrix singular: the
/// factor `R` is treated as singular once `cond(R) >= 2^(prec - 64)`.
const SINGULAR_MARGIN_BITS: u32 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresEstimate {
    pub d_hat: DMatrix<f64>,
    /// `V_n = sum x(t) x(t)'` over the regressors used.
    pub gram: HpMatrix,
    pub n: usize,
    pub gram_min_eig: f64,
    pub gram_max_eig: f64,
    pub precision: u32,
}

impl LeastSquaresEstimate {
    /// Gram matrix rounded to `f64` (saturating).
    pub fn gram_f64(&self) -> DMatrix<f64> {
        self.gram.to_f64()
    }
}

/// Row-by-row Givens QR of the stacked regression `[x(t)' | y(t)']`.
///
/// With a resolution floor the working precision grows with the data so
/// that rounding stays `GUARD_BITS` below `2^floor`; without one it is
/// fixed.
pub(crate) struct StreamingLs {
    p: usize,
    m: usize,
    prec: u32,
    floor: Option<i64>,
    max_exp: i64,
    r: HpMatrix,
    z: HpMatrix,
    n: usize,
}

impl StreamingLs {
    pub(crate) fn new(p: usize, m: usize, prec: u32) -> Self {
        StreamingLs {
            p,
            m,
            prec,
            floor: None,
            max_exp: i64::MIN,
            r: HpMatrix::zeros(p, p, prec),
            z: HpMatrix::zeros(p, m, prec),
            n: 0,
        }
    }

    pub(crate) fn adaptive(p: usize, m: usize, floor: i64) -> Self {
        StreamingLs {
            floor: Some(floor),
            ..Self::new(p, m, BASE_PRECISION)
        }
    }

    pub(crate) fn precision(&self) -> u32 {
        self.prec
    }

    fn grow_precision(&mut self, x: &[Float], y: &[Float]) {
        let Some(floor) = self.floor else {
            return;
        };
        let top = x.iter().chain(y).filter_map(precise::exponent).max();
        if let Some(e) = top {
            self.max_exp = self.max_exp.max(e);
        }
        if self.max_exp == i64::MIN {
            return;
        }
        // entries of R and Z are bounded by column norms: sqrt(n) * max|entry|
        let slack = (64 - ((self.n + 1) as u64).leading_zeros()) as i64 / 2 + 1;
        let needed = required_precision(self.max_exp + slack, floor);
        if needed > self.prec {
            self.prec = needed;
            self.r.raise_precision(needed);
            self.z.raise_precision(needed);
        }
    }

    pub(crate) fn push(&mut self, x: &[Float], y: &[Float]) {
        debug_assert_eq!(x.len(), self.p);
        debug_assert_eq!(y.len(), self.m);
        self.grow_precision(x, y);
        let prec = self.prec;
        let mut row: Vec<Float> = x.iter().chain(y.iter()).map(|v| Float::with_val(prec, v)).collect();
        let mut t1 = Float::new(prec);
        let mut t2 = Float::new(prec);
        for j in 0..self.p {
            if row[j].is_zero() {
                continue;
            }
            let a = self.r.get(j, j).clone();
            let rr = Float::with_val(prec, a.hypot_ref(&row[j]));
            let inv = Float::with_val(prec, 1.0 / &rr);
            let c = Float::with_val(prec, &a * &inv);
            let s = Float::with_val(prec, &row[j] * &inv);
            *self.r.get_mut(j, j) = rr;
            row[j] = Float::new(prec);
            for (k, rk) in row.iter_mut().enumerate().skip(j + 1) {
                let top = if k < self.p {
                    self.r.get_mut(j, k)
                } else {
                    self.z.get_mut(j, k - self.p)
                };
                // top' = c top + s row_k ; row_k' = c row_k - s top
                t1.assign(&c * &*top);
                t2.assign(&s * &*rk);
                t1 += &t2;
                t2.assign(&s * &*top);
                *rk *= &c;
                *rk -= &t2;
                std::mem::swap(top, &mut t1);
            }
        }
        self.n += 1;
    }

    /// Inverse of the triangular factor, or `None` if a pivot is zero.
    fn r_inverse(&self) -> Option<HpMatrix> {
        let (p, prec) = (self.p, self.prec);
        let mut inv = HpMatrix::zeros(p, p, prec);
        for i in (0..p).rev() {
            if self.r.get(i, i).is_zero() {
                return None;
            }
            let d = Float::with_val(prec, 1.0 / self.r.get(i, i));
            for j in i..p {
                // (R inv)_{ij} = (delta_ij - sum_{k>i} R_ik inv_kj) / R_ii
                let mut acc = Float::with_val(prec, if i == j { 1.0 } else { 0.0 });
                for k in i + 1..=j {
                    acc -= Float::with_val(prec, self.r.get(i, k) * inv.get(k, j));
                }
                acc *= &d;
                *inv.get_mut(i, j) = acc;
            }
        }
        Some(inv)
    }

    /// Returns `(R^-1, lambda_min(V), lambda_max(V))` or a singular-Gram error.
    fn conditioning(&self, episode: Option<usize>) -> Result<(HpMatrix, f64, f64)> {
        let prec = self.prec;
        let singular = |eig: f64| Error::SingularGram {
            eigenvalue: eig,
            episode,
        };
        let inv = self.r_inverse().ok_or_else(|| singular(0.0))?;
        let smax = self.r.sigma_max(prec);
        let smax_inv = inv.sigma_max(prec);
        let cond = Float::with_val(prec, &smax * &smax_inv);
        let mut limit = Float::with_val(prec, 1.0);
        limit <<= prec.saturating_sub(SINGULAR_MARGIN_BITS);
        let lambda_min = Float::with_val(prec, 1.0 / Float::with_val(prec, smax_inv.square_ref()));
        let lambda_max = Float::with_val(prec, smax.square_ref());
        if cond >= limit {
            return Err(singular(lambda_min.to_f64()));
        }
        Ok((inv, lambda_min.to_f64(), lambda_max.to_f64()))
    }

    pub(crate) fn finish(&self, episode: Option<usize>) -> Result<LeastSquaresEstimate> {
        if self.n == 0 {
            return Err(Error::Config("least squares needs at least one transition".into()));
        }
        let (inv, lo, hi) = self.conditioning(episode)?;
        let prec = self.prec;
        // X = R^-1 Z solves the regression; D_hat = X'.
        let mut d_hat = DMatrix::zeros(self.m, self.p);
        for i in 0..self.p {
            for j in 0..self.m {
                let mut acc = Float::new(prec);
                for k in i..self.p {
                    acc += Float::with_val(prec, inv.get(i, k) * self.z.get(k, j));
                }
                d_hat[(j, i)] = acc.to_f64();
            }
        }
        Ok(LeastSquaresEstimate {
            d_hat,
            gram: self.r.gram(prec),
            n: self.n,
            gram_min_eig: lo,
            gram_max_eig: hi,
            precision: prec,
        })
    }

    /// `lambda_min(V) / tr(V)` in extended precision.
    fn normalized_min_eig(&self) -> f64 {
        let prec = self.prec;
        let Some(inv) = self.r_inverse() else {
            return 0.0;
        };
        let smax_inv = inv.sigma_max(prec);
        let mut trace = Float::new(prec);
        for i in 0..self.p {
            for j in i..self.p {
                trace += Float::with_val(prec, self.r.get(i, j).square_ref());
            }
        }
        let denom = Float::with_val(prec, smax_inv.square_ref()) * trace;
        Float::with_val(prec, 1.0 / denom).to_f64()
    }
}

/// Least-squares estimate of `D` from every transition of `traj`.
pub fn estimate_closed_loop(traj: &Trajectory) -> Result<LeastSquaresEstimate> {
    estimate_closed_loop_range(traj, 0, traj.steps())
}

/// Least-squares estimate of `D` from the transitions `x(t) -> x(t+1)`,
/// `start <= t < end`.
pub fn estimate_closed_loop_range(traj: &Trajectory, start: usize, end: usize) -> Result<LeastSquaresEstimate> {
    if start >= end || end > traj.steps() {
        return Err(Error::Config(format!(
            "transition range {start}..{end} is empty or exceeds the {} recorded steps",
            traj.steps()
        )));
    }
    let p = traj.p();
    let mut ls = StreamingLs::new(p, p, traj.precision());
    for t in start..end {
        ls.push(traj.state_exact(t), traj.state_exact(t + 1));
    }
    ls.finish(None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub eigenvalues: Vec<Complex<f64>>,
    pub outside_unit: Vec<Complex<f64>>,
    /// One entry per element of `outside_unit`.
    pub geometric_multiplicities: Vec<usize>,
    pub regular: bool,
    pub has_unit_eigenvalue: bool,
    pub rank_tol: f64,
    pub unit_tol: f64,
}

/// Spectral diagnostics with the default unit-circle band.
pub fn spectral_report(d: &DMatrix<f64>, rank_tol: f64) -> Result<SpectralReport> {
    spectral_report_with(d, rank_tol, DEFAULT_UNIT_TOL)
}

/// Eigenvalues, regularity and unit-circle membership of `d`.
///
/// The geometric multiplicity of an eigenvalue `lambda` outside the unit
/// circle is `p - rank(d - lambda I)`, where singular values at or below
/// `rank_tol * ||d||_2` count as zero. Scaling by `||d||_2` rather than
/// `||d - lambda I||_2` keeps the count right when `d` is close to a
/// multiple of the identity. The multiplicity is at least one.
pub fn spectral_report_with(d: &DMatrix<f64>, rank_tol: f64, unit_tol: f64) -> Result<SpectralReport> {
    linalg::ensure_finite(d, "spectral_report")?;
    let eigenvalues = linalg::eigenvalues(d)?;
    let p = d.nrows();
    let scale = linalg::spectral_norm(d);
    let dc: DMatrix<Complex<f64>> = d.map(|v| Complex::new(v, 0.0));
    let mut outside_unit = Vec::new();
    let mut geometric_multiplicities = Vec::new();
    for &lambda in &eigenvalues {
        if lambda.norm() > 1.0 {
            let shifted = &dc - DMatrix::from_diagonal_element(p, p, lambda);
            let sv = shifted.singular_values();
            let rank = sv.iter().filter(|&&s| s > rank_tol * scale).count();
            outside_unit.push(lambda);
            geometric_multiplicities.push((p - rank).max(1));
        }
    }
    let regular = geometric_multiplicities.iter().all(|&m| m == 1);
    let has_unit_eigenvalue = eigenvalues.iter().any(|z| (z.norm() - 1.0).abs() < unit_tol);
    Ok(SpectralReport {
        eigenvalues,
        outside_unit,
        geometric_multiplicities,
        regular,
        has_unit_eigenvalue,
        rank_tol,
        unit_tol,
    })
}

impl SpectralReport {
    /// Text form: a comment header, a column line, then one eigenvalue per
    /// line. The multiplicity column is empty for eigenvalues inside the
    /// closed unit disk.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# lqstab-spectral v1 rank_tol={:e} unit_tol={:e} regular={} unit_eigenvalue={}",
            self.rank_tol, self.unit_tol, self.regular, self.has_unit_eigenvalue
        );
        out.push_str("re,im,modulus,multiplicity\n");
        let mut outside = self.outside_unit.iter().zip(&self.geometric_multiplicities);
        for z in &self.eigenvalues {
            let mult = if z.norm() > 1.0 {
                outside.next().map(|(_, m)| m.to_string()).unwrap_or_default()
            } else {
                String::new()
            };
            let _ = writeln!(out, "{:.16e},{:.16e},{:.16e},{}", z.re, z.im, z.norm(), mult);
        }
        out
    }
}

/// `psi(delta)` in the sample-size inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PsiSpec {
    /// `c * delta`
    Linear {
        c: f64,
    },
    Constant {
        value: f64,
    },
}

impl Default for PsiSpec {
    fn default() -> Self {
        PsiSpec::Linear { c: 1.0 }
    }
}

impl PsiSpec {
    pub fn eval(&self, delta: f64) -> f64 {
        match *self {
            PsiSpec::Linear { c } => c * delta,
            PsiSpec::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSizeParams {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub psi: PsiSpec,
    /// Tail exponent; `inf` for bounded noise.
    pub alpha: f64,
}

fn default_rho() -> f64 {
    1.0
}

impl SampleSizeParams {
    pub fn new(alpha: f64) -> Self {
        SampleSizeParams {
            rho: 1.0,
            psi: PsiSpec::default(),
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!(
                "rho must be positive and finite, got {}",
                self.rho
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Right side `(rho / eps^2) ((-ln delta)^(1 + 4/alpha) - ln psi(delta))`.
    pub fn threshold(&self, epsilon: f64, delta: f64) -> Result<f64> {
        self.validate()?;
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
        }
        let psi = self.psi.eval(delta);
        if !(psi > 0.0) {
            return Err(Error::Config(format!("psi(delta) must be positive, got {psi}")));
        }
        let beta = self.beta();
        Ok(self.rho / (epsilon * epsilon) * ((-delta.ln()).powf(1.0 + beta) - psi.ln()))
    }

    fn beta(&self) -> f64 {
        4.0 / self.alpha
    }

    /// Left side `n / (ln n)^(4/alpha)`.
    pub fn lhs(&self, n: u64) -> f64 {
        let n = n as f64;
        n / n.ln().powf(self.beta())
    }

    pub fn satisfied(&self, n: u64, epsilon: f64, delta: f64) -> Result<bool> {
        Ok(self.lhs(n) >= self.threshold(epsilon, delta)?)
    }
}

/// Smallest `N >= 3` such that every `n >= N` satisfies the sample-size
/// inequality.
///
/// The left side decreases up to `n = e^(4/alpha)` and increases after, so
/// `N` is either 3 (the inequality holds at the minimum) or the first
/// passing integer on the increasing branch, found by doubling then
/// bisection.
pub fn sample_size(epsilon: f64, delta: f64, params: &SampleSizeParams) -> Result<u64> {
    let rhs = params.threshold(epsilon, delta)?;
    if rhs <= 0.0 {
        return Ok(3);
    }
    let turn = params.beta().exp().max(3.0);
    let lo_turn = (turn.floor() as u64).max(3);
    let hi_turn = turn.ceil() as u64;
    if params.lhs(lo_turn) >= rhs && params.lhs(hi_turn) >= rhs {
        return Ok(3);
    }
    // lhs(lo) < rhs on the increasing branch
    let mut lo = if params.lhs(hi_turn) < rhs { hi_turn } else { lo_turn };
    let mut hi = lo.max(4);
    while params.lhs(hi) < rhs {
        lo = hi;
        hi = hi
            .checked_mul(2)
            .filter(|&h| h < (1u64 << 53))
            .ok_or_else(|| Error::Config(format!("sample size exceeds 2^53 (threshold {rhs:e})")))?;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if params.lhs(mid) >= rhs {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Empirical `delta`-quantile of `lambda_min(V) / tr(V)` over `n_mc`
/// simulated trajectories of `x(t+1) = D x(t) + w(t+1)` from `x(0) = 0`,
/// with `V = sum_{t < n_steps} x(t) x(t)'`.
///
/// The trace normalization is a computable stand-in for the normalized
/// Gram matrix in the lower-bound assumption; treat the result as a
/// diagnostic default for [`PsiSpec`], not as the constant itself.
pub fn estimate_psi(
    d: &DMatrix<f64>,
    noise: &NoiseModel,
    delta: f64,
    n_steps: usize,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    if n_mc < 100 {
        return Err(Error::Config(format!("n_mc must be at least 100, got {n_mc}")));
    }
    if n_steps < 2 {
        return Err(Error::Config(format!("n_steps must be at least 2, got {n_steps}")));
    }
    let report = spectral_report(d, DEFAULT_RANK_TOL)?;
    if !report.regular {
        return Err(Error::Config("D must be regular".into()));
    }
    let p = d.nrows();
    if noise.dim() != p {
        return Err(dim_err("noise dimension", p, noise.dim()));
    }
    let theta = SystemParams::new(d.clone(), DMatrix::zeros(p, 1))?;
    let feedback = DMatrix::zeros(1, p);
    let x0 = DVector::zeros(p);
    let opts = SimOptions::default();
    let values: Vec<f64> = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| {
            let traj = system::simulate(
                &theta,
                &feedback,
                &x0,
                n_steps,
                Some(noise),
                rng::derive_seed(seed, i),
                &opts,
            )?;
            let mut ls = StreamingLs::new(p, 0, traj.precision());
            for t in 0..n_steps {
                ls.push(traj.state_exact(t), &[]);
            }
            Ok(ls.normalized_min_eig())
        })
        .collect::<Result<_>>()?;
    let mut sorted = values;
    sorted.sort_by(f64::total_cmp);
    let idx = ((delta * n_mc as f64).ceil() as usize).clamp(1, n_mc) - 1;
    let q = sorted[idx];
    if !(q > 0.0) {
        return Err(Error::Estimation(format!(
            "degenerate {delta}-quantile of the normalized Gram eigenvalue"
        )));
    }
    Ok(q)
}
