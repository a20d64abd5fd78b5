//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use deep_transfer::data::Dataset;
use deep_transfer::downstream::DownstreamModel;
use deep_transfer::net::{NetSpec, NormNet};
use deep_transfer::upstream::{UpstreamModel, UpstreamTrainConfig};
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n × d` matrix with entries uniform on `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, n: usize, d: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(lo..hi))
}

/// A feasible network whose biases are also random, so that no unit is
/// trivially inactive.
pub fn random_net(rng: &mut impl Rng, spec: &NetSpec) -> NormNet {
    let mut net = NormNet::init(spec, rng).unwrap();
    for layer in net.layers_mut() {
        if layer.trainable_bias {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    net.project_norm();
    net
}

pub fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Every permutation of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k - 1 {
            heap(k - 1, a, out);
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
        heap(k - 1, a, out);
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

/// Empirical W1 between equal-size samples by enumerating every coupling.
pub fn w1_brute(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    permutations(n)
        .iter()
        .map(|p| (0..n).map(|i| dist(a.row(i), b.row(p[i]))).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        / n as f64
}

/// Worst finite-difference disagreement over a set of parameters.
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl FdReport {
    pub fn merge(mut self, other: FdReport) -> FdReport {
        self.checked += other.checked;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
        self
    }
}

/// Relative error with a small absolute floor so that exact zeros compare
/// cleanly against round-off.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare `analytic[k]` with the central difference of `loss` along
/// parameter `k`, where `nudge(model, k, delta)` adds `delta` to it.
pub fn fd_compare<M: Clone>(
    label: &str,
    model: &M,
    analytic: &[f64],
    nudge: impl Fn(&mut M, usize, f64),
    loss: impl Fn(&M) -> f64,
    step: f64,
) -> FdReport {
    let mut rep = FdReport::default();
    for (k, &g) in analytic.iter().enumerate() {
        let mut plus = model.clone();
        nudge(&mut plus, k, step);
        let mut minus = model.clone();
        nudge(&mut minus, k, -step);
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
        let e = rel_err(g, fd);
        rep.checked += 1;
        if e > rep.max_rel {
            rep.max_rel = e;
            rep.worst = format!("{label}[{k}]: analytic {g:.6e}, fd {fd:.6e}");
        }
    }
    rep
}

/// Add `delta` to the `k`-th entry of the flattened network parameters.
pub fn nudge_net(net: &mut NormNet, k: usize, delta: f64) {
    let mut k = k;
    for s in net.param_slices_mut() {
        if k < s.len() {
            s[k] += delta;
            return;
        }
        k -= s.len();
    }
    panic!("parameter index out of range");
}

pub fn flatten(slices: Vec<&[f64]>) -> Vec<f64> {
    slices.into_iter().flatten().copied().collect()
}

/// Sixteen-row upstream problem with every risk term active.
pub struct UpstreamFixture {
    pub model: UpstreamModel,
    pub critic: NormNet,
    pub batch: Dataset,
    pub xi: Array2<f64>,
    pub cfg: UpstreamTrainConfig,
}

pub fn upstream_fixture(seed: u64) -> UpstreamFixture {
    let mut r = rng(seed);
    let (n, d, p, k) = (16, 4, 3, 2);
    let x = uniform(&mut r, n, d, 0.0, 1.0);
    let y = Array1::from_shape_simple_fn(n, || r.random_range(-1.0..1.0));
    let domain: Vec<usize> = (0..n).map(|i| i % p + 1).collect();
    let batch = Dataset::new(x, y, domain).unwrap();
    let h = random_net(&mut r, &NetSpec::new(d, 6, 2, k, 20.0));
    let f = Array2::from_shape_simple_fn((p, k), || {
        let v: f64 = r.random_range(0.2..1.0);
        if r.random::<bool>() {
            v
        } else {
            -v
        }
    });
    let critic = random_net(&mut r, &NetSpec::new(k, 5, 1, 1, 3.0));
    let xi = uniform(&mut r, n, k, 0.0, 1.0);
    let cfg = UpstreamTrainConfig {
        lambda: 0.7,
        tau: 0.9,
        mu: 0.05,
        rep_dim: k,
        ..UpstreamTrainConfig::default()
    };
    UpstreamFixture {
        model: UpstreamModel { h, f, head_radius: 10.0 },
        critic,
        batch,
        xi,
        cfg,
    }
}

/// Sixteen-row downstream problem; `binary` draws 0/1 labels.
pub fn downstream_fixture(seed: u64, binary: bool) -> (DownstreamModel, Dataset) {
    let mut r = rng(seed);
    let (n, d, k, d_star) = (16, 4, 2, 2);
    let x = uniform(&mut r, n, d, 0.0, 1.0);
    let y = if binary {
        Array1::from_shape_simple_fn(n, || f64::from(r.random::<bool>()))
    } else {
        Array1::from_shape_simple_fn(n, || r.random_range(-1.0..1.0))
    };
    let data = Dataset::new(x, y, vec![0; n]).unwrap();
    let h_ref = random_net(&mut r, &NetSpec::new(d, 5, 1, k, 20.0));
    let f_t = Array1::from_shape_simple_fn(k, || r.random_range(0.3..1.0));
    let a = uniform(&mut r, d_star, d, -1.0, 1.0);
    let q = random_net(&mut r, &NetSpec::new(d_star, 5, 1, 1, 20.0));
    let model = DownstreamModel {
        h_ref,
        f_t,
        a,
        q,
        q_enabled: true,
        head_enabled: true,
        radius: 10.0,
    };
    (model, data)
}
