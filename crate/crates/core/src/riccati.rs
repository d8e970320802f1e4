//! Discrete Riccati equation by value iteration, optimal gains and the
//! stabilizing neighborhood of a design point.
//!
//! The solver iterates
//!
//! ```text
//! P_t = Q + A'P A - A'P B (B'P B + R)^-1 B'P A,    P_0 = 0,
//! ```
//!
//! which is the finite-horizon LQ cost-to-go recursion. For stabilizable
//! `[A, B]` the sequence is nondecreasing and converges to the unique
//! positive semidefinite fixed point `K`; for non-stabilizable pairs it
//! diverges, so running out of iterations is the stabilizability
//! diagnostic.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::linalg;
use crate::rng::{self, Purpose};
use crate::system::SystemParams;

/// Positive definite state and input weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrices {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl CostMatrices {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        linalg::ensure_positive_definite(&q, "Q")?;
        linalg::ensure_positive_definite(&r, "R")?;
        Ok(CostMatrices {
            q: linalg::symmetrize(&q),
            r: linalg::symmetrize(&r),
        })
    }

    pub fn identity(p: usize, r: usize) -> Self {
        CostMatrices {
            q: DMatrix::identity(p, p),
            r: DMatrix::identity(r, r),
        }
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    fn check(&self, theta: &SystemParams) -> Result<()> {
        if self.q.nrows() != theta.p() {
            return Err(dim_err("cost Q", theta.p(), self.q.nrows()));
        }
        if self.r.nrows() != theta.r() {
            return Err(dim_err("cost R", theta.r(), self.r.nrows()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiOptions {
    /// Stop once `||P_t - P_{t-1}||_2 <= tol * max(1, ||P_t||_2)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        RiccatiOptions {
            tol: 1e-12,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub k: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// `||K - Ric(K)||_2`.
    pub fixed_point_residual: f64,
    /// `||K - D'KD - (Q + L'RL)||_2` with `D = A + BL`.
    pub lyapunov_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One application of the Riccati map.
pub fn riccati_step(theta: &SystemParams, cost: &CostMatrices, p: &DMatrix<f64>) -> DMatrix<f64> {
    let (a, b) = (theta.a(), theta.b());
    let pa = p * a;
    let bpa = b.transpose() * &pa;
    let s = b.transpose() * p * b + cost.r();
    let x = solve_pd(&s, &bpa);
    let next = cost.q() + a.transpose() * &pa - bpa.transpose() * x;
    linalg::symmetrize(&next)
}

/// Solves `S X = rhs` for positive definite `S`.
fn solve_pd(s: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    match s.clone().cholesky() {
        Some(ch) => ch.solve(rhs),
        None => {
            // B'PB + R is PD whenever R is PD and P is PSD; only roundoff on a
            // diverging iterate can land here.
            debug_assert!(false, "B'PB + R lost positive definiteness");
            s.clone()
                .lu()
                .solve(rhs)
                .unwrap_or_else(|| DMatrix::from_element(rhs.nrows(), rhs.ncols(), f64::NAN))
        }
    }
}

/// Value iteration from `P_0 = 0`.
pub fn solve_dare(theta: &SystemParams, cost: &CostMatrices, opts: &RiccatiOptions) -> Result<RiccatiSolution> {
    solve_dare_from(theta, cost, &DMatrix::zeros(theta.p(), theta.p()), opts)
}

/// Value iteration from an arbitrary positive semidefinite `P_0`.
pub fn solve_dare_from(
    theta: &SystemParams,
    cost: &CostMatrices,
    p0: &DMatrix<f64>,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    cost.check(theta)?;
    if p0.shape() != (theta.p(), theta.p()) {
        return Err(dim_err("initial P", theta.p(), p0.nrows()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Config(format!(
            "Riccati tolerance must be positive, got {}",
            opts.tol
        )));
    }
    let mut p = linalg::symmetrize(p0);
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let next = riccati_step(theta, cost, &p);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonConvergence {
                iterations: it,
                residual,
            });
        }
        residual = linalg::symmetric_norm(&(&next - &p));
        let scale = linalg::symmetric_norm(&next).max(1.0);
        p = next;
        if residual <= opts.tol * scale {
            return Ok(finish(theta, cost, p, it));
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

fn finish(theta: &SystemParams, cost: &CostMatrices, k: DMatrix<f64>, iterations: usize) -> RiccatiSolution {
    let gain = gain_unchecked(theta, &k, cost.r());
    let fixed_point_residual = linalg::symmetric_norm(&(&k - riccati_step(theta, cost, &k)));
    let lyapunov_residual = lyapunov_residual(&k, &gain, theta, cost);
    RiccatiSolution {
        k,
        gain,
        fixed_point_residual,
        lyapunov_residual,
        iterations,
        converged: true,
    }
}

fn gain_unchecked(theta: &SystemParams, k: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let b = theta.b();
    let s = b.transpose() * k * b + r;
    -solve_pd(&s, &(b.transpose() * k * theta.a()))
}

/// `L = -(B'KB + R)^-1 B'KA`.
pub fn gain_from_k(theta: &SystemParams, k: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k.shape() != (theta.p(), theta.p()) {
        return Err(dim_err(
            "K",
            format!("{0}x{0}", theta.p()),
            format!("{}x{}", k.nrows(), k.ncols()),
        ));
    }
    if r.shape() != (theta.r(), theta.r()) {
        return Err(dim_err(
            "R",
            format!("{0}x{0}", theta.r()),
            format!("{}x{}", r.nrows(), r.ncols()),
        ));
    }
    Ok(gain_unchecked(theta, k, r))
}

/// `[I_p; L]`, so that `theta * extended_gain(L) = A + B L`.
pub fn extended_gain(l: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, p) = l.shape();
    let mut out = DMatrix::zeros(p + r, p);
    out.rows_mut(0, p).fill_with_identity();
    out.rows_mut(p, r).copy_from(l);
    out
}

/// `rho(A + B L) < 1 - margin`.
pub fn is_stabilizer(theta: &SystemParams, l: &DMatrix<f64>, margin: f64) -> Result<bool> {
    let d = theta.closed_loop(l)?;
    Ok(linalg::spectral_radius(&d)? < 1.0 - margin)
}

/// `||K - D'KD - (Q + L'RL)||_2` with `D = A + BL`.
pub fn lyapunov_residual(k: &DMatrix<f64>, l: &DMatrix<f64>, theta: &SystemParams, cost: &CostMatrices) -> f64 {
    let d = theta.a() + theta.b() * l;
    let rhs = cost.q() + l.transpose() * cost.r() * l;
    let lhs = k - d.transpose() * k * &d;
    linalg::symmetric_norm(&(lhs - rhs))
}

/// `tr(K C)`, the optimal long-run average cost.
pub fn optimal_average_cost(k: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<f64> {
    if k.shape() != c.shape() || k.nrows() != k.ncols() {
        return Err(dim_err(
            "optimal_average_cost",
            format!("{}x{}", k.nrows(), k.nrows()),
            format!("{}x{}", c.nrows(), c.ncols()),
        ));
    }
    Ok((k * c).trace())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusOptions {
    pub riccati: RiccatiOptions,
    /// Bisection stops when the bracket is narrower than `rel_tol * lower`.
    pub rel_tol: f64,
    /// Bracketing gives up (returning the last passing radius) after this
    /// many doublings.
    pub max_doublings: usize,
}

impl Default for RadiusOptions {
    fn default() -> Self {
        RadiusOptions {
            riccati: RiccatiOptions {
                tol: 1e-11,
                max_iter: 20_000,
            },
            rel_tol: 1e-3,
            max_doublings: 40,
        }
    }
}

/// Sampled radius of the stabilizing neighborhood around `theta`.
///
/// For a candidate `eps`, `n_samples` design points `theta' = theta + eps U`
/// are drawn with `U` a Gaussian direction rescaled to unit spectral norm.
/// The candidate passes when the Riccati gain of every `theta'` stabilizes
/// `theta` itself. Bisection returns the lower end of the final bracket, the
/// largest tested radius with no failures. Failures that no sample hits go
/// unseen, so the value is an estimate rather than a certified bound.
pub fn estimate_stabilizing_radius(
    theta: &SystemParams,
    cost: &CostMatrices,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    estimate_stabilizing_radius_with(theta, cost, n_samples, seed, &RadiusOptions::default())
}

pub fn estimate_stabilizing_radius_with(
    theta: &SystemParams,
    cost: &CostMatrices,
    n_samples: usize,
    seed: u64,
    opts: &RadiusOptions,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    solve_dare(theta, cost, &opts.riccati)?;
    let (p, q) = (theta.p(), theta.q());
    let directions: Vec<DMatrix<f64>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(rng::derive_seed(seed, i), Purpose::Perturbation);
            let g: DMatrix<f64> = DMatrix::from_fn(p, q, |_, _| StandardNormal.sample(&mut rng));
            let g = &g / g.norm();
            let s = linalg::spectral_norm(&g);
            g / s
        })
        .collect();
    let base = theta.theta();
    let passes = |eps: f64| -> bool {
        directions.par_iter().all(|u| {
            let design = match SystemParams::from_theta(&(&base + u * eps)) {
                Ok(d) => d,
                Err(_) => return false,
            };
            match solve_dare(&design, cost, &opts.riccati) {
                Ok(sol) => is_stabilizer(theta, &sol.gain, 0.0).unwrap_or(false),
                Err(_) => false,
            }
        })
    };

    let scale = linalg::spectral_norm(&base).max(1.0);
    let mut lo;
    let mut hi;
    let start = 1e-2 * scale;
    if passes(start) {
        lo = start;
        hi = f64::NAN;
        for _ in 0..opts.max_doublings {
            let cand = lo * 2.0;
            if passes(cand) {
                lo = cand;
            } else {
                hi = cand;
                break;
            }
        }
        if hi.is_nan() {
            return Ok(lo);
        }
    } else {
        hi = start;
        lo = f64::NAN;
        for _ in 0..60 {
            let cand = hi * 0.5;
            if passes(cand) {
                lo = cand;
                break;
            }
            hi = cand;
        }
        if lo.is_nan() {
            return Err(Error::Estimation(format!(
                "no stabilizing neighborhood found down to radius {hi:e}"
            )));
        }
    }
    while hi - lo > opts.rel_tol * lo {
        let mid = 0.5 * (lo + hi);
        if passes(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::scalar_system;
    use approx::assert_relative_eq;

    fn unit_cost() -> CostMatrices {
        CostMatrices::identity(1, 1)
    }

    #[test]
    fn zero_dynamics_give_q() {
        let theta = SystemParams::new(DMatrix::zeros(2, 2), DMatrix::from_row_slice(2, 1, &[1.0, 2.0])).unwrap();
        let cost = CostMatrices::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let sol = solve_dare(&theta, &cost, &RiccatiOptions::default()).unwrap();
        assert_eq!(sol.k, *cost.q());
        assert_eq!(sol.gain, DMatrix::zeros(1, 2));
    }

    #[test]
    fn uncontrolled_stable_scalar_is_a_geometric_series() {
        let sol = solve_dare(&scalar_system(0.5, 0.0), &unit_cost(), &RiccatiOptions::default()).unwrap();
        assert_relative_eq!(sol.k[(0, 0)], 4.0 / 3.0, epsilon = 1e-11);
    }

    #[test]
    fn golden_ratio_case() {
        // k^2 = k + 1
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let sol = solve_dare(&scalar_system(1.0, 1.0), &unit_cost(), &RiccatiOptions::default()).unwrap();
        assert_relative_eq!(sol.k[(0, 0)], phi, epsilon = 1e-11);
        assert_relative_eq!(sol.gain[(0, 0)], -phi / (phi + 1.0), epsilon = 1e-11);
        assert_relative_eq!(1.0 + sol.gain[(0, 0)], 1.0 / (phi + 1.0), epsilon = 1e-11);
        assert!(sol.fixed_point_residual <= 1e-10);
    }

    #[test]
    fn unstabilizable_pair_does_not_converge() {
        let err = solve_dare(&scalar_system(2.0, 0.0), &unit_cost(), &RiccatiOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn gain_edge_cases() {
        let theta = SystemParams::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1)).unwrap();
        let l = gain_from_k(&theta, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(l, DMatrix::zeros(1, 2));
        let theta = scalar_system(3.0, 1.0);
        let l = gain_from_k(&theta, &DMatrix::zeros(1, 1), &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(l, DMatrix::zeros(1, 1));
        assert!(gain_from_k(&theta, &DMatrix::zeros(2, 2), &DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn extended_gain_layout() {
        let e = extended_gain(&DMatrix::zeros(2, 3));
        assert_eq!(e.rows(0, 3).into_owned(), DMatrix::identity(3, 3));
        assert_eq!(e.rows(3, 2).into_owned(), DMatrix::zeros(2, 3));
        let e = extended_gain(&DMatrix::from_element(1, 1, -0.618));
        assert_eq!(e.as_slice(), &[1.0, -0.618]);
    }

    #[test]
    fn stabilizer_checks() {
        let l = DMatrix::from_element(1, 1, -1.5);
        assert!(is_stabilizer(&scalar_system(2.0, 1.0), &l, 0.0).unwrap());
        assert!(!is_stabilizer(&scalar_system(2.0, 0.0), &l, 0.0).unwrap());
        assert!(!is_stabilizer(&scalar_system(2.0, 1.0), &l, 0.7).unwrap());
    }

    #[test]
    fn lyapunov_residual_cases() {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let theta = scalar_system(1.0, 1.0);
        let k = DMatrix::from_element(1, 1, phi);
        let l = DMatrix::from_element(1, 1, -phi / (phi + 1.0));
        assert!(lyapunov_residual(&k, &l, &theta, &unit_cost()) <= 1e-10);

        let theta0 = SystemParams::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        let cost = CostMatrices::identity(2, 2);
        assert_eq!(lyapunov_residual(cost.q(), &DMatrix::zeros(2, 2), &theta0, &cost), 0.0);

        let sol = solve_dare(&theta, &unit_cost(), &RiccatiOptions::default()).unwrap();
        let shifted = &sol.k + DMatrix::identity(1, 1);
        assert!(lyapunov_residual(&shifted, &sol.gain, &theta, &unit_cost()) > 0.1);
    }

    #[test]
    fn trace_cost() {
        assert_eq!(
            optimal_average_cost(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap(),
            2.0
        );
        let k = DMatrix::from_element(1, 1, 4.0 / 3.0);
        assert_eq!(optimal_average_cost(&k, &DMatrix::identity(1, 1)).unwrap(), 4.0 / 3.0);
        assert!(optimal_average_cost(&k, &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn radius_rejects_zero_samples() {
        assert!(matches!(
            estimate_stabilizing_radius(&scalar_system(1.0, 1.0), &unit_cost(), 0, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deeply_stable_design_has_positive_radius() {
        let r = estimate_stabilizing_radius(&scalar_system(0.0, 1.0), &unit_cost(), 64, 3).unwrap();
        assert!(r > 0.1, "radius {r}");
    }

    #[test]
    fn radius_propagates_solver_failure() {
        assert!(matches!(
            estimate_stabilizing_radius(&scalar_system(2.0, 0.0), &unit_cost(), 8, 1),
            Err(Error::NonConvergence { .. })
        ));
    }
}
