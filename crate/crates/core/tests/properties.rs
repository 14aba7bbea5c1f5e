use klgame::bench::{random_lq_game, random_spd, RefKind};
use klgame::klqg::{solve_game, KLWeights};
use klgame::linalg::{eigen_floor, max_asymmetry, min_eigenvalue, psd_project};
use klgame::reference::{gaussian_kl, GMMRef, GaussianRef, RefComponent};
use klgame::sim::MeanStd;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn equilibrium_covariances_are_spd_and_values_symmetric(
        seed in any::<u64>(),
        n in 1usize..5,
        np in 1usize..4,
        feedback in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<usize> = (0..np).map(|i| 1 + (i + n) % 2).collect();
        let kind = if feedback { RefKind::Feedback } else { RefKind::Open };
        let g = random_lq_game(&mut rng, n, &dims, 4, kind);
        let sol = solve_game(&g.stages, &g.costs, &g.refs, &g.lambda).unwrap();
        prop_assert!(sol.max_asymmetry < 1e-9);
        for (pol, val) in sol.policies.iter().zip(&sol.values) {
            for s in &pol.stages {
                prop_assert!(max_asymmetry(&s.cov) < 1e-12);
                prop_assert!(min_eigenvalue(&s.cov) > 0.0);
            }
            for z in &val.z_mat {
                prop_assert!(max_asymmetry(z) < 1e-12);
            }
        }
    }

    #[test]
    fn zero_lambda_policies_ignore_references(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_lq_game(&mut rng, n, &[1, 2], 3, RefKind::Open);
        let h = random_lq_game(&mut rng, n, &[1, 2], 3, RefKind::Feedback);
        let a = solve_game(&g.stages, &g.costs, &g.refs, &KLWeights::zeros(2)).unwrap();
        let b = solve_game(&g.stages, &g.costs, &h.refs, &KLWeights::zeros(2)).unwrap();
        for (p, q) in a.policies.iter().zip(&b.policies) {
            prop_assert!(p.max_deviation(q) == 0.0);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pc, qc) = (random_spd(&mut rng, k, 0.1), random_spd(&mut rng, k, 0.1));
        let pm = DVector::from_fn(k, |i, _| i as f64 * 0.3);
        let qm = DVector::from_fn(k, |i, _| -(i as f64) * 0.2);
        prop_assert!(gaussian_kl(&pm, &pc, &qm, &qc).unwrap() >= 0.0);
        prop_assert!(gaussian_kl(&pm, &pc, &pm, &pc).unwrap().abs() < 1e-10);
    }

    #[test]
    fn eigen_floor_respects_floor(m in matrix(3), floor in 1e-6f64..1.0) {
        let f = eigen_floor(&m, floor).unwrap();
        prop_assert!(max_asymmetry(&f) == 0.0);
        prop_assert!(min_eigenvalue(&f) >= floor * (1.0 - 1e-9) - 1e-12);
        let p = psd_project(&m).unwrap();
        prop_assert!(min_eigenvalue(&p) >= -1e-9);
        prop_assert!((psd_project(&p).unwrap() - &p).amax() < 1e-9);
    }

    #[test]
    fn responsibilities_form_a_distribution(
        w in prop::collection::vec(0.01f64..1.0, 1..5),
        u in -3.0f64..3.0,
    ) {
        let modes = (0..w.len())
            .map(|k| RefComponent::Open(
                GaussianRef::constant(DVector::from_element(1, k as f64 - 1.0), DMatrix::from_element(1, 1, 0.5 + 0.1 * k as f64), 2).unwrap(),
            ))
            .collect();
        let total: f64 = w.iter().sum();
        let g = GMMRef::constant(modes, w.iter().map(|x| x / total).collect()).unwrap();
        let r = g.responsibilities(&DVector::from_element(1, u), &DVector::zeros(0), 1);
        prop_assert!(r.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_std_bounds(v in prop::collection::vec(-100.0f64..100.0, 1..50)) {
        let s = MeanStd::of(&v);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.mean >= lo - 1e-9 && s.mean <= hi + 1e-9);
        prop_assert!(s.std >= 0.0 && s.std <= 0.5 * (hi - lo) + 1e-9);
    }
}
