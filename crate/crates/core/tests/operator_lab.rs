use acsac_core::operator_lab::{
    kl_best_of_n, random_distribution, random_lab, tv_checks, variance_bound, LabShape,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shape(num_states: usize, num_actions: usize, horizon: usize, n: usize, gamma: f64) -> LabShape {
    LabShape {
        num_states,
        num_actions,
        horizon,
        n,
        gamma,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backup_is_a_sup_norm_contraction(
        s in 2usize..6, a in 2usize..4, h in 1usize..4, n in 1usize..5,
        gamma in 0.5f64..0.99, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lab = random_lab(&mut rng, shape(s, a, h, n, gamma)).unwrap();
        let zero = lab.zeros();
        let q1 = zero.random_like(&mut rng, 10.0);
        let q2 = zero.random_like(&mut rng, 10.0);
        let d = q1.sup_distance(&q2);
        let b = lab.apply_bnh(&q1).unwrap().sup_distance(&lab.apply_bnh(&q2).unwrap());
        prop_assert!(b <= gamma * d + 1e-9, "{b} > {gamma} * {d}");
    }

    #[test]
    fn fixed_point_is_bounded_and_matches_its_extraction(
        s in 2usize..5, h in 1usize..4, n in 1usize..4, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = 0.9;
        let lab = random_lab(&mut rng, shape(s, 2, h, n, gamma)).unwrap();
        let fp = lab.fixed_point(1e-12).unwrap();
        prop_assert!(fp.q.sup_norm() <= lab.mdp.r_max() / (1.0 - gamma) + 1e-9);
        let value = lab.evaluate_extraction(&fp.q).unwrap();
        prop_assert!(value.q.sup_distance(&fp.q) <= 1e-8);
        prop_assert!(lab.difference_identity_error(&value) <= 1e-12);
    }

    #[test]
    fn prefix_tv_never_exceeds_chunk_tv(a in 2usize..4, h in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = a.pow(h as u32);
        let mu = random_distribution(&mut rng, len, 0.3);
        let nu = random_distribution(&mut rng, len, 0.3);
        let cmp = tv_checks(&mu, &nu, a, h).unwrap();
        prop_assert!(cmp.worst_excess() <= 1e-12);
    }

    #[test]
    fn best_of_n_kl_is_bounded(len in 2usize..12, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_distribution(&mut rng, len, 0.0);
        let values: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (kl, bound) = kl_best_of_n(&p, &values, n).unwrap();
        prop_assert!(kl >= -1e-12);
        prop_assert!(kl <= bound + 1e-9);
    }

    #[test]
    fn averaging_bound_lies_between_extremes(sigma2 in 0.0f64..10.0, rho in 0.0f64..1.0, h in 1usize..10) {
        let b = variance_bound(sigma2, rho, h).unwrap();
        prop_assert!(b <= sigma2 + 1e-12);
        prop_assert!(b >= sigma2 / h as f64 - 1e-12);
    }
}
