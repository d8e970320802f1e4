//! Stabilization by random linear feedbacks.
//!
//! A bundle of `k = 1 + ceil(r/p)` Gaussian feedbacks is applied one episode
//! at a time. Each episode yields a least-squares estimate of its closed-loop
//! matrix `theta [I; L_i]`, and the set of parameters consistent with all of
//! them to within `eps_tilde` is returned together with its stacked
//! least-squares point `theta_hat`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::identification::{self, SampleSizeParams, StreamingLs, DEFAULT_RANK_TOL};
use crate::linalg;
use crate::precise::{self, BASE_PRECISION};
use crate::riccati::{self, extended_gain, CostMatrices, RiccatiOptions};
use crate::rng::{self, Purpose};
use crate::system::{resolution_floor, NoiseModel, SimOptions, Stepper, SystemParams};

/// Steps simulated before their transitions are folded into the regression.
const CHUNK: usize = 256;

/// `1 + ceil(r / p)`.
pub fn feedback_count(p: usize, r: usize) -> usize {
    1 + r.div_ceil(p)
}

/// `[[I .. I], [L_1 .. L_k]]`, of size `q x kp`.
pub fn stacked_matrix(feedbacks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = feedbacks
        .first()
        .ok_or_else(|| Error::Config("at least one feedback is required".into()))?;
    let (r, p) = first.shape();
    let k = feedbacks.len();
    let mut m = DMatrix::zeros(p + r, k * p);
    for (i, l) in feedbacks.iter().enumerate() {
        if l.shape() != (r, p) {
            return Err(dim_err(
                "feedback",
                format!("{r}x{p}"),
                format!("{}x{}", l.nrows(), l.ncols()),
            ));
        }
        m.view_mut((0, i * p), (p, p)).fill_with_identity();
        m.view_mut((p, i * p), (r, p)).copy_from(l);
    }
    Ok(m)
}

/// `(eps0 / 2k) sigma_q(M)`; zero when `M` has numerical rank below `q`.
pub fn compute_epsilon_tilde(m: &DMatrix<f64>, epsilon0: f64, k: usize) -> f64 {
    if m.is_empty() || m.nrows() > m.ncols() {
        return 0.0;
    }
    let sv = m.singular_values();
    let (smin, smax) = (sv.min(), sv.max());
    if smax == 0.0 || smin <= DEFAULT_RANK_TOL * smax {
        return 0.0;
    }
    epsilon0 / (2.0 * k as f64) * smin
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeedbackBundle {
    pub k: usize,
    pub feedbacks: Vec<DMatrix<f64>>,
    pub m: DMatrix<f64>,
    pub epsilon_tilde: f64,
    pub epsilon0: f64,
    pub redraws: usize,
}

/// Draws `k` feedbacks with i.i.d. standard normal entries, redrawing the
/// whole bundle from a fresh sub-seed while `eps_tilde <= eps_floor`.
pub fn draw_feedbacks(
    p: usize,
    r: usize,
    seed: u64,
    eps_floor: f64,
    epsilon0: f64,
    max_redraws: usize,
) -> Result<RandomFeedbackBundle> {
    if p == 0 || r == 0 {
        return Err(Error::Config(format!("dimensions must be positive, got p={p}, r={r}")));
    }
    if !(epsilon0 > 0.0 && epsilon0.is_finite()) {
        return Err(Error::Config(format!("epsilon0 must be positive, got {epsilon0}")));
    }
    if !(eps_floor >= 0.0) {
        return Err(Error::Config(format!("eps_floor must be nonnegative, got {eps_floor}")));
    }
    let k = feedback_count(p, r);
    let mut last = 0.0;
    for attempt in 0..=max_redraws {
        let mut g = rng::stream(rng::derive_seed(seed, attempt as u64), Purpose::Feedback);
        // column-major fill: each column of L_i is one N(0, I_r) draw
        let feedbacks: Vec<DMatrix<f64>> = (0..k)
            .map(|_| DMatrix::from_fn(r, p, |_, _| StandardNormal.sample(&mut g)))
            .collect();
        let m = stacked_matrix(&feedbacks)?;
        let eps = compute_epsilon_tilde(&m, epsilon0, k);
        if eps > eps_floor {
            return Ok(RandomFeedbackBundle {
                k,
                feedbacks,
                m,
                epsilon_tilde: eps,
                epsilon0,
                redraws: attempt,
            });
        }
        last = eps;
    }
    Err(Error::DegenerateDraw {
        redraws: max_redraws,
        epsilon_tilde: last,
    })
}

/// Episode length rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sizing {
    /// `sample_size(eps_tilde, delta / k)`.
    Formula(SampleSizeParams),
    Override(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilizationOptions {
    pub eps_floor: f64,
    pub max_redraws: usize,
    /// Refuse runs whose episodes would exceed this many steps.
    pub max_episode_length: usize,
    pub sim: SimOptions,
}

impl Default for StabilizationOptions {
    fn default() -> Self {
        StabilizationOptions {
            eps_floor: 1e-6,
            max_redraws: 16,
            max_episode_length: 1_000_000,
            sim: SimOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilizingSet {
    pub bundle: RandomFeedbackBundle,
    pub estimates: Vec<DMatrix<f64>>,
    pub gram_min_eigs: Vec<f64>,
    pub epsilon_tilde: f64,
    pub delta: f64,
    pub theta_hat: SystemParams,
    /// `tau_0 = 0, tau_1, .., tau_k`.
    pub episode_boundaries: Vec<usize>,
    /// `theta_hat` lies outside some confidence ball.
    pub empty: bool,
    pub sizing: Sizing,
    pub seed: u64,
    pub precision: u32,
}

impl StabilizingSet {
    pub fn episode_lengths(&self) -> Vec<usize> {
        self.episode_boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

fn episode_length(sizing: &Sizing, eps_tilde: f64, delta: f64, k: usize) -> Result<usize> {
    match sizing {
        Sizing::Override(0) => Err(Error::Config("episode length override must be positive".into())),
        Sizing::Override(n) => Ok(*n),
        Sizing::Formula(params) => {
            let n = identification::sample_size(eps_tilde, delta / k as f64, params)?;
            usize::try_from(n).map_err(|_| Error::Config(format!("episode length {n} does not fit in memory")))
        }
    }
}

/// Runs the episodes and returns the stabilizing set.
pub fn run_stabilization(
    true_theta: &SystemParams,
    noise: Option<&NoiseModel>,
    epsilon0: f64,
    delta: f64,
    sizing: &Sizing,
    seed: u64,
    x0: &DVector<f64>,
    opts: &StabilizationOptions,
) -> Result<StabilizingSet> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    let (p, r) = (true_theta.p(), true_theta.r());
    if x0.len() != p {
        return Err(dim_err("x0", p, x0.len()));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Config("x0 has non-finite entries".into()));
    }
    let bundle = draw_feedbacks(p, r, seed, opts.eps_floor, epsilon0, opts.max_redraws)?;
    let k = bundle.k;
    let m = episode_length(sizing, bundle.epsilon_tilde, delta, k)?;
    if m > opts.max_episode_length {
        return Err(Error::Config(format!(
            "episode length {m} exceeds max_episode_length {}",
            opts.max_episode_length
        )));
    }

    let (fits, prec) = run_episodes(true_theta, noise, &bundle.feedbacks, m, seed, x0, &opts.sim)?;

    let mut estimates = Vec::with_capacity(k);
    let mut gram_min_eigs = Vec::with_capacity(k);
    for (i, ls) in fits.iter().enumerate() {
        let est = ls.finish(Some(i + 1))?;
        estimates.push(est.d_hat);
        gram_min_eigs.push(est.gram_min_eig);
    }
    let theta_hat = SystemParams::from_theta(&stacked_fit(&bundle.m, &estimates, p)?)?;
    let eps = bundle.epsilon_tilde;
    let empty = !contains(&theta_hat.theta(), &bundle.feedbacks, &estimates, eps);
    Ok(StabilizingSet {
        estimates,
        gram_min_eigs,
        epsilon_tilde: eps,
        delta,
        theta_hat,
        episode_boundaries: (0..=k).map(|i| i * m).collect(),
        empty,
        sizing: *sizing,
        seed,
        precision: prec,
        bundle,
    })
}

/// Simulates the episodes back to back, feeding each segment's transitions
/// to its own regression. Returns the fits and the largest precision used.
fn run_episodes(
    theta: &SystemParams,
    noise: Option<&NoiseModel>,
    feedbacks: &[DMatrix<f64>],
    m: usize,
    seed: u64,
    x0: &DVector<f64>,
    sim: &SimOptions,
) -> Result<(Vec<StreamingLs>, u32)> {
    let p = theta.p();
    let mut x = precise::vec_from_f64(BASE_PRECISION, x0.as_slice());
    let floor = resolution_floor(noise, &x);
    let mut stepper = Stepper::new(theta, noise, seed, floor, sim)?;
    let mut fits = Vec::with_capacity(feedbacks.len());
    let mut states = Vec::with_capacity(CHUNK + 1);
    let mut inputs = Vec::with_capacity(CHUNK);
    let mut prec = BASE_PRECISION;
    for (i, l) in feedbacks.iter().enumerate() {
        let mut ls = StreamingLs::adaptive(p, p, floor);
        let mut done = 0;
        while done < m {
            let len = CHUNK.min(m - done);
            states.clear();
            inputs.clear();
            states.push(x.clone());
            x = stepper.run(l, x, len, i * m + done, &mut states, &mut inputs)?;
            for w in states.windows(2) {
                ls.push(&w[0], &w[1]);
            }
            done += len;
        }
        prec = prec.max(ls.precision());
        fits.push(ls);
    }
    Ok((fits, prec.max(stepper.max_precision())))
}

/// `argmin_theta sum_i ||theta [I; L_i] - D_i||_F^2`, i.e. the least-squares
/// solution of `theta M = [D_1 .. D_k]`.
pub fn stacked_fit(m: &DMatrix<f64>, estimates: &[DMatrix<f64>], p: usize) -> Result<DMatrix<f64>> {
    let kp = m.ncols();
    if estimates.len() * p != kp {
        return Err(dim_err("estimates", kp / p.max(1), estimates.len()));
    }
    let mut rhs = DMatrix::zeros(p, kp);
    for (i, d) in estimates.iter().enumerate() {
        rhs.view_mut((0, i * p), (p, p)).copy_from(d);
    }
    // M' theta' = rhs'
    let svd = m.transpose().svd(true, true);
    let sol = svd
        .solve(&rhs.transpose(), 0.0)
        .map_err(|e| Error::Estimation(format!("stacked fit failed: {e}")))?;
    Ok(sol.transpose())
}

fn contains(theta: &DMatrix<f64>, feedbacks: &[DMatrix<f64>], estimates: &[DMatrix<f64>], eps: f64) -> bool {
    feedbacks
        .iter()
        .zip(estimates)
        .all(|(l, d)| linalg::spectral_norm(&(theta * extended_gain(l) - d)) <= eps)
}

/// `||theta [I; L_i] - D_i||_2 <= eps_tilde` for every episode.
pub fn membership(theta: &SystemParams, set: &StabilizingSet) -> Result<bool> {
    if theta.p() != set.theta_hat.p() || theta.r() != set.theta_hat.r() {
        return Err(dim_err(
            "membership",
            format!("p={}, r={}", set.theta_hat.p(), set.theta_hat.r()),
            format!("p={}, r={}", theta.p(), theta.r()),
        ));
    }
    Ok(contains(
        &theta.theta(),
        &set.bundle.feedbacks,
        &set.estimates,
        set.epsilon_tilde,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certification {
    pub certified: bool,
    /// Spectral radius of `A_0 + B_0 L(design)`.
    pub spectral_radius: f64,
}

/// Applies the Riccati gain of `design_theta` to `true_theta`.
pub fn certify(true_theta: &SystemParams, design_theta: &SystemParams, cost: &CostMatrices) -> Result<Certification> {
    certify_with(true_theta, design_theta, cost, &RiccatiOptions::default())
}

pub fn certify_with(
    true_theta: &SystemParams,
    design_theta: &SystemParams,
    cost: &CostMatrices,
    opts: &RiccatiOptions,
) -> Result<Certification> {
    let sol = riccati::solve_dare(design_theta, cost, opts)?;
    let closed = true_theta.closed_loop(&sol.gain)?;
    let rho = linalg::spectral_radius(&closed)?;
    Ok(Certification {
        certified: rho < 1.0,
        spectral_radius: rho,
    })
}

/// Versioned on-disk form of a [`StabilizingSet`]; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizingSetRecord {
    pub format: String,
    pub version: u32,
    pub p: usize,
    pub r: usize,
    pub k: usize,
    pub seed: u64,
    pub redraws: usize,
    pub epsilon0: f64,
    pub epsilon_tilde: f64,
    pub delta: f64,
    pub sizing: Sizing,
    pub episode_boundaries: Vec<usize>,
    pub feedbacks: Vec<Vec<Vec<f64>>>,
    pub estimates: Vec<Vec<Vec<f64>>>,
    pub gram_min_eigs: Vec<f64>,
    pub theta_hat: Vec<Vec<f64>>,
    pub empty: bool,
    pub precision: u32,
}

pub const SET_FORMAT: &str = "lqstab-stabilizing-set";
pub const SET_VERSION: u32 = 1;

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Parse("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_row_iterator(n, c, rows.iter().flatten().copied()))
}

impl StabilizingSet {
    pub fn to_record(&self) -> StabilizingSetRecord {
        StabilizingSetRecord {
            format: SET_FORMAT.into(),
            version: SET_VERSION,
            p: self.theta_hat.p(),
            r: self.theta_hat.r(),
            k: self.bundle.k,
            seed: self.seed,
            redraws: self.bundle.redraws,
            epsilon0: self.bundle.epsilon0,
            epsilon_tilde: self.epsilon_tilde,
            delta: self.delta,
            sizing: self.sizing,
            episode_boundaries: self.episode_boundaries.clone(),
            feedbacks: self.bundle.feedbacks.iter().map(rows_of).collect(),
            estimates: self.estimates.iter().map(rows_of).collect(),
            gram_min_eigs: self.gram_min_eigs.clone(),
            theta_hat: rows_of(&self.theta_hat.theta()),
            empty: self.empty,
            precision: self.precision,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: StabilizingSetRecord =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("stabilizing set: {e}")))?;
        if rec.format != SET_FORMAT || rec.version != SET_VERSION {
            return Err(Error::Parse(format!(
                "unsupported stabilizing-set format {} v{}",
                rec.format, rec.version
            )));
        }
        let feedbacks = rec
            .feedbacks
            .iter()
            .map(|m| matrix_from_rows(m))
            .collect::<Result<Vec<_>>>()?;
        let m = stacked_matrix(&feedbacks)?;
        Ok(StabilizingSet {
            bundle: RandomFeedbackBundle {
                k: rec.k,
                feedbacks,
                m,
                epsilon_tilde: rec.epsilon_tilde,
                epsilon0: rec.epsilon0,
                redraws: rec.redraws,
            },
            estimates: rec
                .estimates
                .iter()
                .map(|m| matrix_from_rows(m))
                .collect::<Result<_>>()?,
            gram_min_eigs: rec.gram_min_eigs,
            epsilon_tilde: rec.epsilon_tilde,
            delta: rec.delta,
            theta_hat: SystemParams::from_theta(&matrix_from_rows(&rec.theta_hat)?)?,
            episode_boundaries: rec.episode_boundaries,
            empty: rec.empty,
            sizing: rec.sizing,
            seed: rec.seed,
            precision: rec.precision,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::scalar_system;
    use approx::assert_relative_eq;

    #[test]
    fn feedback_counts() {
        assert_eq!(feedback_count(2, 3), 3);
        assert_eq!(feedback_count(3, 1), 2);
        assert_eq!(feedback_count(1, 1), 2);
    }

    #[test]
    fn epsilon_tilde_hand_case() {
        let fb = vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, -1.0)];
        let m = stacked_matrix(&fb).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]));
        assert_relative_eq!(compute_epsilon_tilde(&m, 1.0, 2), 2f64.sqrt() / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn repeated_block_is_rank_deficient() {
        let fb = vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)];
        let m = stacked_matrix(&fb).unwrap();
        assert_eq!(compute_epsilon_tilde(&m, 1.0, 2), 0.0);
    }

    #[test]
    fn draws_have_full_rank() {
        for seed in 0..20 {
            let b = draw_feedbacks(2, 3, seed, 0.0, 1.0, 4).unwrap();
            assert_eq!(b.k, 3);
            assert_eq!(b.m.shape(), (5, 6));
            assert!(b.epsilon_tilde > 0.0);
            assert_eq!(b.feedbacks[0].shape(), (3, 2));
        }
    }

    #[test]
    fn impossible_floor_exhausts_redraws() {
        let err = draw_feedbacks(1, 1, 0, 1e9, 1.0, 3).unwrap_err();
        assert!(matches!(err, Error::DegenerateDraw { redraws: 3, .. }));
    }

    #[test]
    fn noise_free_run_recovers_theta() {
        let theta = SystemParams::new(
            DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.0, 0.9]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
        )
        .unwrap();
        let x0 = nalgebra::dvector![1.0, -1.0];
        let set = run_stabilization(
            &theta,
            None,
            0.5,
            0.05,
            &Sizing::Override(3),
            11,
            &x0,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(set.bundle.k, 2);
        assert_eq!(set.episode_boundaries, vec![0, 3, 6]);
        assert!((set.theta_hat.theta() - theta.theta()).amax() < 1e-8);
        assert!(!set.empty);
        assert!(membership(&theta, &set).unwrap());
        assert!(
            certify(&theta, &set.theta_hat, &CostMatrices::identity(2, 1))
                .unwrap()
                .certified
        );
    }

    #[test]
    fn membership_rejects_far_point() {
        let theta = scalar_system(1.3, 1.0);
        let x0 = nalgebra::dvector![1.0];
        let set = run_stabilization(
            &theta,
            None,
            0.5,
            0.05,
            &Sizing::Override(2),
            5,
            &x0,
            &Default::default(),
        )
        .unwrap();
        // shift only A: every segment residual moves by the shift
        let shift = 2.0 * set.epsilon_tilde;
        let far = scalar_system(1.3 + shift, 1.0);
        assert!(!membership(&far, &set).unwrap());
    }

    #[test]
    fn certify_examples() {
        let cost = CostMatrices::identity(1, 1);
        let t = scalar_system(1.3, 1.0);
        assert!(certify(&t, &t, &cost).unwrap().certified);
        assert!(!certify(&scalar_system(2.0, 0.0), &t, &cost).unwrap().certified);

        // direct scalar arithmetic for the design gain
        let (a, b) = (1.25f64, 0.95f64);
        let c = 1.0 - a * a - b * b;
        let k = (-c + (c * c + 4.0 * b * b).sqrt()) / (2.0 * b * b);
        let l = -a * b * k / (b * b * k + 1.0);
        let expect = (1.3 + 1.0 * l).abs();
        let cert = certify(&t, &scalar_system(a, b), &cost).unwrap();
        assert_relative_eq!(cert.spectral_radius, expect, epsilon = 1e-9);
        assert_eq!(cert.certified, expect < 1.0);
    }

    #[test]
    fn json_round_trip() {
        let theta = scalar_system(1.3, 1.0);
        let x0 = nalgebra::dvector![1.0];
        let set = run_stabilization(
            &theta,
            None,
            0.5,
            0.05,
            &Sizing::Override(2),
            5,
            &x0,
            &Default::default(),
        )
        .unwrap();
        let text = set.to_json();
        assert!(text.contains("\"format\": \"lqstab-stabilizing-set\""));
        let back = StabilizingSet::from_json(&text).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn formula_sizing_uses_split_delta() {
        let params = SampleSizeParams {
            rho: 1e-3,
            ..SampleSizeParams::new(2.0)
        };
        let theta = scalar_system(0.5, 1.0);
        let noise = NoiseModel::gaussian(DMatrix::identity(1, 1)).unwrap();
        let set = run_stabilization(
            &theta,
            Some(&noise),
            1.0,
            0.1,
            &Sizing::Formula(params),
            2,
            &nalgebra::dvector![0.0],
            &Default::default(),
        )
        .unwrap();
        let expect =
            identification::sample_size(set.epsilon_tilde, 0.1 / set.bundle.k as f64, &params).unwrap() as usize;
        assert!(set.episode_lengths().iter().all(|&n| n == expect));
    }
}
