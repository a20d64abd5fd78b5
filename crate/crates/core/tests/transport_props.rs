mod common;

use common::*;
use deep_transfer::net::{NetSpec, NormNet};
use deep_transfer::optim::OptimizerState;
use deep_transfer::transport::{critic_ascent, w1_dual_estimate, w1_exact_1d, w1_exact_matching};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exact_w1_is_a_metric(n in 1usize..17, dim in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, n, dim, 0.0, 1.0);
        let b = uniform(&mut r, n, dim, 0.0, 1.0);
        let c = uniform(&mut r, n, dim, 0.0, 1.0);
        let w = |x: &ndarray::Array2<f64>, y: &ndarray::Array2<f64>| w1_exact_matching(x.view(), y.view()).unwrap().value;
        let (ab, ba, bc, ac) = (w(&a, &b), w(&b, &a), w(&b, &c), w(&a, &c));
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert_eq!(w(&a, &a), 0.0);
        // Reordering rows gives the same multiset, hence distance zero.
        let mut rev = a.clone();
        rev.invert_axis(ndarray::Axis(0));
        prop_assert_eq!(w(&a, &rev), 0.0);
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert!(ab > 0.0);
    }

    #[test]
    fn matching_equals_sorting_in_one_dimension(n in 1usize..65, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, n, 1, -3.0, 3.0);
        let b = uniform(&mut r, n, 1, -3.0, 3.0);
        let m = w1_exact_matching(a.view(), b.view()).unwrap().value;
        let s = w1_exact_1d(a.as_slice().unwrap(), b.as_slice().unwrap()).unwrap().value;
        prop_assert_eq!(m, s);
    }

    #[test]
    fn dual_never_exceeds_exact(n in 2usize..40, dim in 1usize..4, depth in 0usize..3, budget in 0.1f64..20.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let critic = random_net(&mut r, &NetSpec::new(dim, 8, depth, 1, budget));
        let a = uniform(&mut r, n, dim, 0.0, 1.0);
        let b = uniform(&mut r, n, dim, 0.0, 1.0);
        let dual = w1_dual_estimate(&critic, a.view(), b.view()).unwrap().value;
        let exact = w1_exact_matching(a.view(), b.view()).unwrap().value;
        prop_assert!(dual <= exact + 1e-6, "{} > {}", dual, exact);
    }
}

#[test]
fn brute_force_agreement_small_n() {
    let mut r = rng(17);
    for n in 1..=6 {
        for _ in 0..20 {
            let a = uniform(&mut r, n, 2, 0.0, 1.0);
            let b = uniform(&mut r, n, 2, 0.0, 1.0);
            let m = w1_exact_matching(a.view(), b.view()).unwrap().value;
            assert!((m - w1_brute(a.view(), b.view())).abs() <= 1e-12);
        }
    }
}

fn separated_clusters(seed: u64) -> (ndarray::Array2<f64>, ndarray::Array2<f64>) {
    let mut r = rng(seed);
    let a = uniform(&mut r, 64, 1, 0.0, 0.4);
    let b = uniform(&mut r, 64, 1, 0.6, 1.0);
    (a, b)
}

#[test]
fn ascent_is_monotone_on_separated_clusters() {
    let mut monotone = 0;
    for seed in 0..20 {
        let (a, b) = separated_clusters(seed);
        let mut r = rng(1000 + seed);
        let mut critic = random_net(&mut r, &NetSpec::new(1, 16, 1, 1, 4.0));
        let mut opt = OptimizerState::adam(1e-3);
        let trace = critic_ascent(&mut critic, &mut opt, a.view(), b.view(), 50).unwrap();
        if trace.objective.windows(2).all(|w| w[1] >= w[0] - 1e-12) {
            monotone += 1;
        }
        assert!(critic.weight_norm() <= 4.0 + 1e-12);
    }
    assert!(monotone >= 19, "monotone in {monotone}/20 seeds");
}

#[test]
fn ascent_improves_on_average() {
    let mut before = 0.0;
    let mut after = 0.0;
    for seed in 0..20 {
        let mut r = rng(seed);
        let a = uniform(&mut r, 32, 2, 0.0, 1.0);
        let b = uniform(&mut r, 32, 2, 0.0, 1.0) * 0.5;
        let mut critic = random_net(&mut r, &NetSpec::new(2, 16, 1, 1, 2.0));
        let mut opt = OptimizerState::adam(1e-2);
        let trace = critic_ascent(&mut critic, &mut opt, a.view(), b.view(), 5).unwrap();
        before += trace.objective[0];
        after += *trace.objective.last().unwrap();
    }
    assert!(after >= before, "{after} < {before}");
}

#[test]
fn trained_critic_attains_most_of_exact_w1() {
    let (a, b) = separated_clusters(99);
    let exact = w1_exact_1d(a.as_slice().unwrap(), b.as_slice().unwrap()).unwrap().value;
    let mut r = rng(5);
    let mut critic = NormNet::init(&NetSpec::new(1, 16, 1, 1, 4.0), &mut r).unwrap();
    let mut opt = OptimizerState::adam(1e-2);
    critic_ascent(&mut critic, &mut opt, a.view(), b.view(), 500).unwrap();
    let dual = w1_dual_estimate(&critic, a.view(), b.view()).unwrap().value;
    assert!(dual <= exact + 1e-6);
    assert!(dual >= 0.8 * exact, "dual {dual} exact {exact}");
}
