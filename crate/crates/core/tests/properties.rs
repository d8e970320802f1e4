use lqstab::identification::{estimate_closed_loop, sample_size, spectral_report, SampleSizeParams, DEFAULT_RANK_TOL};
use lqstab::linalg::{spectral_norm, symmetric_eig_range};
use lqstab::riccati::{extended_gain, riccati_step, solve_dare, solve_dare_from, CostMatrices, RiccatiOptions};
use lqstab::rng::{derive_seed, stream, Purpose};
use lqstab::stabilization::{
    compute_epsilon_tilde, draw_feedbacks, membership, run_stabilization, Sizing, StabilizationOptions,
};
use lqstab::system::{random_stabilizable, simulate, NoiseModel, SimOptions, SystemParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, Purpose::Perturbation);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=4, 1usize..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extended_gain_gives_closed_loop((p, r) in dims(), seed in any::<u64>()) {
        let theta = SystemParams::new(gaussian(p, p, seed), gaussian(p, r, seed ^ 1)).unwrap();
        let l = gaussian(r, p, seed ^ 2);
        let lt = extended_gain(&l);
        prop_assert_eq!(lt.shape(), (p + r, p));
        let lhs = theta.theta() * &lt;
        let rhs = theta.closed_loop(&l).unwrap();
        prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + theta.theta().amax() * (1.0 + l.amax())));
    }

    #[test]
    fn value_iteration_is_monotone((p, r) in dims(), seed in any::<u64>()) {
        let (theta, _) = random_stabilizable(p, r, 0.9, seed).unwrap();
        let cost = CostMatrices::identity(p, r);
        let mut prev = DMatrix::zeros(p, p);
        for _ in 0..25 {
            let next = riccati_step(&theta, &cost, &prev);
            let (lo, _) = symmetric_eig_range(&(&next - &prev));
            prop_assert!(lo >= -1e-9 * (1.0 + spectral_norm(&next)));
            prev = next;
        }
    }

    #[test]
    fn warm_start_reaches_the_same_solution((p, r) in dims(), seed in any::<u64>(), scale in 0.0f64..50.0) {
        let (theta, _) = random_stabilizable(p, r, 0.9, seed).unwrap();
        let cost = CostMatrices::identity(p, r);
        let opts = RiccatiOptions::default();
        let cold = solve_dare(&theta, &cost, &opts).unwrap();
        let g = gaussian(p, p, seed ^ 7);
        let p0 = &g * g.transpose() * scale;
        let warm = solve_dare_from(&theta, &cost, &p0, &opts).unwrap();
        let tol = 1e-8 * (1.0 + spectral_norm(&cold.k));
        prop_assert!(spectral_norm(&(&warm.k - &cold.k)) <= tol);
    }

    #[test]
    fn sample_size_brackets_the_inequality(
        eps in 0.02f64..2.0,
        delta in 0.001f64..0.5,
        alpha in 1.0f64..8.0,
        rho in 0.1f64..5.0,
    ) {
        let params = SampleSizeParams { rho, ..SampleSizeParams::new(alpha) };
        let n = sample_size(eps, delta, &params).unwrap();
        prop_assert!(n >= 3);
        prop_assert!(params.satisfied(n, eps, delta).unwrap());
        if n > 3 {
            prop_assert!(!params.satisfied(n - 1, eps, delta).unwrap());
        }
        for m in [n + 1, n + 17, 2 * n, 10 * n] {
            prop_assert!(params.satisfied(m, eps, delta).unwrap());
        }
    }

    #[test]
    fn epsilon_tilde_is_the_infimum((p, r) in dims(), seed in any::<u64>()) {
        let bundle = draw_feedbacks(p, r, seed, 1e-6, 1.0, 16).unwrap();
        let sigma = compute_epsilon_tilde(&bundle.m, 1.0, bundle.k) * 2.0 * bundle.k as f64;
        prop_assert!(sigma > 0.0);
        for i in 0..50 {
            let theta = gaussian(p, p + r, derive_seed(seed, i));
            let ratio = spectral_norm(&(&theta * &bundle.m)) / spectral_norm(&theta);
            prop_assert!(ratio >= sigma * (1.0 - 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn least_squares_solves_the_normal_equations(p in 1usize..=3, seed in any::<u64>(), n in 20usize..200) {
        let d = gaussian(p, p, seed);
        let d = &d * (0.9 / spectral_norm(&d).max(1e-9));
        let theta = SystemParams::new(d, DMatrix::zeros(p, 1)).unwrap();
        let noise = NoiseModel::gaussian(DMatrix::identity(p, p)).unwrap();
        let traj = simulate(&theta, &DMatrix::zeros(1, p), &DVector::zeros(p), n, Some(&noise), seed, &SimOptions::default()).unwrap();
        let est = estimate_closed_loop(&traj).unwrap();
        let mut cross = DMatrix::zeros(p, p);
        let mut gram = DMatrix::zeros(p, p);
        for t in 0..n {
            let x = traj.state(t);
            cross += traj.state(t + 1) * x.transpose();
            gram += &x * x.transpose();
        }
        let residual = spectral_norm(&(cross - &est.d_hat * &gram));
        let scale = spectral_norm(&gram) * (1.0 + spectral_norm(&est.d_hat));
        prop_assert!(residual <= 1e-10 * scale);
        prop_assert!((spectral_norm(&(&gram - est.gram_f64()))) <= 1e-12 * spectral_norm(&gram));
    }

    #[test]
    fn spectral_report_is_similarity_invariant(p in 2usize..=4, seed in any::<u64>()) {
        let d = gaussian(p, p, seed) * 1.2;
        let eig = lqstab::linalg::eigenvalues(&d).unwrap();
        let near_unit = eig.iter().any(|z| (z.norm() - 1.0).abs() < 1e-3);
        let clustered = eig.iter().enumerate().any(|(i, a)| eig[i + 1..].iter().any(|b| (a - b).norm() < 1e-3));
        prop_assume!(!near_unit && !clustered);
        let g = gaussian(p, p, seed ^ 3);
        let s = DMatrix::identity(p, p) + &g * (0.3 / spectral_norm(&g));
        let moved = s.clone().try_inverse().unwrap() * &d * &s;
        let a = spectral_report(&d, DEFAULT_RANK_TOL).unwrap();
        let b = spectral_report(&moved, DEFAULT_RANK_TOL).unwrap();
        prop_assert_eq!(a.regular, b.regular);
        prop_assert_eq!(a.outside_unit.len(), b.outside_unit.len());
        prop_assert_eq!(a.has_unit_eigenvalue, b.has_unit_eigenvalue);
    }

    #[test]
    fn repeated_outside_eigenvalue_stays_irregular_under_similarity(lambda in 1.1f64..3.0, seed in any::<u64>()) {
        let d = DMatrix::identity(2, 2) * lambda;
        let g = gaussian(2, 2, seed);
        let s = DMatrix::identity(2, 2) + &g * (0.3 / spectral_norm(&g));
        let moved = s.clone().try_inverse().unwrap() * &d * &s;
        prop_assert!(!spectral_report(&moved, DEFAULT_RANK_TOL).unwrap().regular);
        let mut jordan = d.clone();
        jordan[(0, 1)] = 1.0;
        let moved = s.clone().try_inverse().unwrap() * &jordan * &s;
        prop_assert!(spectral_report(&moved, DEFAULT_RANK_TOL).unwrap().regular);
    }
}

fn exact_run(seed: u64) -> (SystemParams, lqstab::stabilization::StabilizingSet) {
    let (theta, _) = random_stabilizable(2, 1, 0.8, seed).unwrap();
    let set = run_stabilization(
        &theta,
        None,
        0.5,
        0.05,
        &Sizing::Override(3),
        seed,
        &DVector::from_vec(vec![1.0, -0.5]),
        &StabilizationOptions::default(),
    )
    .unwrap();
    (theta, set)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn runs_are_pure_functions_of_seed(seed in any::<u64>()) {
        let theta = lqstab::system::scalar_system(1.3, 1.0);
        let noise = NoiseModel::gaussian(DMatrix::identity(1, 1)).unwrap();
        let run = || {
            run_stabilization(&theta, Some(&noise), 0.5, 0.05, &Sizing::Override(100), seed, &DVector::zeros(1), &StabilizationOptions::default())
                .unwrap()
                .to_json()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn stabilizing_set_members_are_epsilon0_close(seed in any::<u64>()) {
        let (theta, set) = exact_run(seed);
        prop_assert!(membership(&theta, &set).unwrap());
        let (p, q) = (theta.p(), theta.q());
        let mut rng = stream(derive_seed(seed, 1), Purpose::Perturbation);
        let mut accepted = 0;
        for _ in 0..400 {
            let u: DMatrix<f64> = DMatrix::from_fn(p, q, |_, _| StandardNormal.sample(&mut rng));
            let radius = 0.75 * 10f64.powf(-3.0 * rand::Rng::random::<f64>(&mut rng));
            let delta = &u * (radius / spectral_norm(&u));
            let candidate = SystemParams::from_theta(&(theta.theta() + &delta)).unwrap();
            if membership(&candidate, &set).unwrap() {
                accepted += 1;
                prop_assert!(spectral_norm(&delta) <= 0.5 + 1e-9);
            }
        }
        prop_assert!(accepted > 0);
    }
}
