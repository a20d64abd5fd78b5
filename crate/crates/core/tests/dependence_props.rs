mod common;

use common::*;
use deep_transfer::dependence::{dcov_brute, dcov_fast, dcov_fast_with, dcov_grad};
use deep_transfer::par::Exec;
use ndarray::{array, Array2};
use proptest::prelude::*;

fn rotate(z: &Array2<f64>, angle: f64) -> Array2<f64> {
    let (s, c) = angle.sin_cos();
    let q = array![[c, -s], [s, c]];
    z.dot(&q)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_exactly(n in 4usize..40, dz in 1usize..4, dy in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let z = uniform(&mut r, n, dz, 0.0, 1.0);
        let y = uniform(&mut r, n, dy, 0.0, 1.0);
        prop_assert_eq!(dcov_fast(z.view(), y.view()).unwrap().value, dcov_fast(y.view(), z.view()).unwrap().value);
    }

    #[test]
    fn rigid_motion_invariance(n in 4usize..40, angle in 0.0f64..6.3, shift in -5.0f64..5.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let z = uniform(&mut r, n, 2, 0.0, 1.0);
        let y = uniform(&mut r, n, 2, 0.0, 1.0);
        let base = dcov_fast(z.view(), y.view()).unwrap().value;
        let moved = rotate(&z, angle) + shift;
        let v = dcov_fast(moved.view(), y.view()).unwrap().value;
        prop_assert!((v - base).abs() <= 1e-10, "{} vs {}", v, base);
        let moved_y = rotate(&y, -angle) - shift;
        let v = dcov_fast(z.view(), moved_y.view()).unwrap().value;
        prop_assert!((v - base).abs() <= 1e-10, "{} vs {}", v, base);
    }

    #[test]
    fn fast_equals_brute(n in 4usize..13, dz in 1usize..4, dy in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let z = uniform(&mut r, n, dz, -1.0, 1.0);
        let y = uniform(&mut r, n, dy, -1.0, 1.0);
        let b = dcov_brute(z.view(), y.view()).unwrap().value;
        let f = dcov_fast(z.view(), y.view()).unwrap().value;
        prop_assert!((b - f).abs() <= 1e-9 * b.abs().max(1e-4), "{} vs {}", b, f);
    }

    #[test]
    fn row_permutation_invariance(n in 4usize..30, seed in any::<u64>()) {
        let mut r = rng(seed);
        let z = uniform(&mut r, n, 2, 0.0, 1.0);
        let y = uniform(&mut r, n, 1, 0.0, 1.0);
        let rev = |m: &Array2<f64>| Array2::from_shape_fn(m.dim(), |(i, j)| m[[n - 1 - i, j]]);
        let a = dcov_fast(z.view(), y.view()).unwrap().value;
        let b = dcov_fast(rev(&z).view(), rev(&y).view()).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-3));
    }
}

#[test]
fn unbiased_under_independence() {
    let mut r = rng(2024);
    let vals: Vec<f64> = (0..2000)
        .map(|_| {
            let z = uniform(&mut r, 16, 1, 0.0, 1.0);
            let y = uniform(&mut r, 16, 1, 0.0, 1.0);
            dcov_fast(z.view(), y.view()).unwrap().value
        })
        .collect();
    let k = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / k;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    let se = sd / k.sqrt();
    assert!(mean.abs() <= 3.0 * se, "mean {mean:.3e}, se {se:.3e}");
}

#[test]
fn positive_under_full_dependence() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let z = uniform(&mut r, 64, 1, 0.0, 1.0);
        assert!(dcov_fast(z.view(), z.view()).unwrap().value > 0.0, "seed {seed}");
    }
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let mut r = rng(3);
    let z = uniform(&mut r, 300, 3, 0.0, 1.0);
    let y = uniform(&mut r, 300, 2, 0.0, 1.0);
    let a = dcov_fast_with(Exec::Sequential, z.view(), y.view()).unwrap().value;
    let b = dcov_fast_with(Exec::Parallel, z.view(), y.view()).unwrap().value;
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let z = uniform(&mut r, 6, 2, 0.0, 1.0);
        let y = uniform(&mut r, 6, 3, 0.0, 1.0);
        let (_, gz, gy) = dcov_grad(z.view(), y.view()).unwrap();
        let rep = fd_compare(
            "z",
            &z,
            gz.as_slice().unwrap(),
            |m, k, d| m.as_slice_mut().unwrap()[k] += d,
            |m| dcov_fast(m.view(), y.view()).unwrap().value,
            1e-6,
        );
        assert!(rep.max_rel <= 1e-5, "{}", rep.worst);
        let rep = fd_compare(
            "y",
            &y,
            gy.as_slice().unwrap(),
            |m, k, d| m.as_slice_mut().unwrap()[k] += d,
            |m| dcov_fast(z.view(), m.view()).unwrap().value,
            1e-6,
        );
        assert!(rep.max_rel <= 1e-5, "{}", rep.worst);
    }
}
