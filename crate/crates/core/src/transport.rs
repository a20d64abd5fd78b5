//! Wasserstein-1 estimation: exact empirical oracles and the critic-based
//! dual estimate used during representation learning.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetGrads, NetSpec, NormNet};
use crate::optim::OptimizerState;

/// Largest sample size accepted by the assignment oracle.
pub const MATCHING_MAX_N: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMethod {
    Exact1d,
    ExactMatching,
    CriticDual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportEstimate {
    pub value: f64,
    pub method: TransportMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub width: usize,
    pub depth: usize,
    /// Lipschitz budget of the critic class; also the dual prefactor.
    pub norm_budget: f64,
    pub ascent_steps: usize,
    pub lr: f64,
    /// Draw fresh reference samples at every outer step.
    pub resample_reference: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            width: 32,
            depth: 2,
            norm_budget: 1.0,
            ascent_steps: 5,
            lr: 1e-2,
            resample_reference: true,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ascent_steps == 0 {
            return Err(Error::Config("critic ascent_steps must be at least 1".into()));
        }
        if !(self.norm_budget > 0.0) {
            return Err(Error::Config("critic norm_budget must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("critic lr must be positive".into()));
        }
        Ok(())
    }

    pub fn net_spec(&self, in_dim: usize) -> NetSpec {
        NetSpec::new(in_dim, self.width, self.depth, 1, self.norm_budget)
    }
}

/// Optimal 1-D coupling: mean absolute difference of order statistics.
pub fn w1_exact_1d(a: &[f64], b: &[f64]) -> Result<TransportEstimate> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("sample counts differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let total: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
    Ok(TransportEstimate {
        value: total / a.len() as f64,
        method: TransportMethod::Exact1d,
    })
}

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting path Hungarian method, O(n³)). Returns `assignment[row] = col`.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // 1-indexed potentials; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of_col[j] - 1] = j - 1;
    }
    assignment
}

fn euclid(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact empirical W1 with Euclidean ground cost via minimum-cost matching.
///
/// In one dimension the optimal matching is rewritten to its monotone
/// representative by swapping adjacent crossed pairs whose swap leaves the
/// cost unchanged, so the reported value is summed in sorted order.
pub fn w1_exact_matching(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<TransportEstimate> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("sample shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let n = a.nrows();
    if n == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if n > MATCHING_MAX_N {
        return Err(Error::TooLarge {
            got: n,
            limit: MATCHING_MAX_N,
        });
    }
    let cost = Array2::from_shape_fn((n, n), |(i, j)| euclid(a.row(i), b.row(j)));
    let assignment = min_cost_assignment(&cost);
    let total = if a.ncols() == 1 {
        monotone_cost(a.column(0).to_vec(), b.column(0).to_vec(), &assignment)
    } else {
        (0..n).map(|i| cost[[i, assignment[i]]]).sum()
    };
    Ok(TransportEstimate {
        value: total / n as f64,
        method: TransportMethod::ExactMatching,
    })
}

fn monotone_cost(a: Vec<f64>, b: Vec<f64>, assignment: &[usize]) -> f64 {
    let n = a.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let xs: Vec<f64> = order.iter().map(|&i| a[i]).collect();
    let mut ys: Vec<f64> = order.iter().map(|&i| b[assignment[i]]).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for k in 0..n.saturating_sub(1) {
            if ys[k] > ys[k + 1] {
                let before = (xs[k] - ys[k]).abs() + (xs[k + 1] - ys[k + 1]).abs();
                let after = (xs[k] - ys[k + 1]).abs() + (xs[k + 1] - ys[k]).abs();
                // An optimal matching only crosses where uncrossing is free.
                if (before - after).abs() <= 1e-12 * (1.0 + before.abs()) {
                    ys.swap(k, k + 1);
                    changed = true;
                }
            }
        }
    }
    xs.iter().zip(&ys).map(|(x, y)| (x - y).abs()).sum()
}

fn check_feasible(critic: &NormNet) -> Result<()> {
    let kappa = critic.weight_norm();
    let budget = critic.norm_budget();
    if kappa > budget + 1e-9 {
        return Err(Error::Infeasible { kappa, budget });
    }
    Ok(())
}

fn check_pair(critic: &NormNet, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if critic.out_dim() != 1 {
        return Err(Error::shape("critic must have a scalar output"));
    }
    if a.ncols() != critic.in_dim() || b.ncols() != critic.in_dim() {
        return Err(Error::shape(format!(
            "samples have {} / {} columns, critic expects {}",
            a.ncols(),
            b.ncols(),
            critic.in_dim()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    Ok(())
}

/// `(mean critic(A) - mean critic(B)) / K_crit`.
pub fn w1_dual_estimate(critic: &NormNet, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<TransportEstimate> {
    check_pair(critic, &a, &b)?;
    check_feasible(critic)?;
    let ga = critic.eval(a)?;
    let gb = critic.eval(b)?;
    let value = (ga.mean().unwrap() - gb.mean().unwrap()) / critic.norm_budget();
    Ok(TransportEstimate {
        value,
        method: TransportMethod::CriticDual,
    })
}

/// Dual objective with gradients with respect to the critic parameters and
/// the rows of `A`.
pub struct DualGrads {
    pub value: f64,
    pub params: NetGrads,
    pub wrt_a: Array2<f64>,
}

pub fn dual_objective_grads(critic: &NormNet, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<DualGrads> {
    check_pair(critic, &a, &b)?;
    let k = critic.norm_budget();
    let (na, nb) = (a.nrows(), b.nrows());
    let (ga, cache_a) = critic.forward(a)?;
    let (gb, cache_b) = critic.forward(b)?;
    let value = (ga.mean().unwrap() - gb.mean().unwrap()) / k;
    let cot_a = Array2::from_elem((na, 1), 1.0 / (na as f64 * k));
    let cot_b = Array2::from_elem((nb, 1), -1.0 / (nb as f64 * k));
    let (mut params, wrt_a) = critic.backward(&cache_a, cot_a.view())?;
    let (pb, _) = critic.backward(&cache_b, cot_b.view())?;
    params.add_assign(&pb);
    Ok(DualGrads { value, params, wrt_a })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentTrace {
    /// Objective before each step, then after the last one.
    pub objective: Vec<f64>,
}

/// Gradient ascent on the dual objective with a projection to the norm
/// budget after every step.
pub fn critic_ascent(
    critic: &mut NormNet,
    opt: &mut OptimizerState,
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    steps: usize,
) -> Result<AscentTrace> {
    let names = critic.param_names();
    let mut objective = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let mut g = dual_objective_grads(critic, a, b)?;
        objective.push(g.value);
        g.params.scale(-1.0);
        let grads = g.params.slices();
        opt.step(&mut critic.param_slices_mut(), &grads, &names)
            .map_err(|e| e.within("critic"))?;
        critic.project_norm();
    }
    let last = w1_dual_estimate(critic, a, b)?;
    objective.push(last.value);
    Ok(AscentTrace { objective })
}

/// `n × r` matrix of i.i.d. U[0, 1] entries.
pub fn sample_uniform_ref<R: Rng + ?Sized>(n: usize, r: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, r), || rng.random::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Layer;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_d_examples() {
        assert_eq!(w1_exact_1d(&[0.3, 0.1, 0.9], &[0.9, 0.3, 0.1]).unwrap().value, 0.0);
        assert_eq!(w1_exact_1d(&[0.0, 1.0], &[0.5, 1.5]).unwrap().value, 0.5);
        assert_eq!(w1_exact_1d(&[0.0], &[-2.5]).unwrap().value, 2.5);
        assert!(matches!(w1_exact_1d(&[0.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn matching_examples() {
        let a = array![[0.1, 0.2], [0.5, 0.9], [0.3, 0.3]];
        assert_eq!(w1_exact_matching(a.view(), a.view()).unwrap().value, 0.0);
        let big = Array2::<f64>::zeros((65, 1));
        assert!(matches!(
            w1_exact_matching(big.view(), big.view()),
            Err(Error::TooLarge { got: 65, limit: 64 })
        ));
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn assignment_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=6 {
            for _ in 0..20 {
                let cost = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..10.0));
                let asg = min_cost_assignment(&cost);
                let got: f64 = (0..n).map(|i| cost[[i, asg[i]]]).sum();
                let best = permutations(n)
                    .iter()
                    .map(|p| (0..n).map(|i| cost[[i, p[i]]]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!((got - best).abs() < 1e-12, "n={n}: {got} vs {best}");
            }
        }
    }

    fn scalar_critic(w: f64, budget: f64) -> NormNet {
        NormNet::from_layers(
            vec![Layer {
                weight: array![[w]],
                bias: Array1::zeros(1),
                trainable_bias: true,
            }],
            budget,
            None,
        )
        .unwrap()
    }

    #[test]
    fn dual_examples() {
        let a = array![[0.1], [0.4], [0.8]];
        let b = array![[0.3], [0.2], [0.9]];
        let zero = scalar_critic(0.0, 1.0);
        assert_eq!(w1_dual_estimate(&zero, a.view(), b.view()).unwrap().value, 0.0);
        let c = scalar_critic(0.7, 1.0);
        assert_eq!(w1_dual_estimate(&c, a.view(), a.view()).unwrap().value, 0.0);
        let bad = scalar_critic(2.0, 1.0);
        assert!(matches!(
            w1_dual_estimate(&bad, a.view(), b.view()),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn ascent_on_identical_samples_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = CriticConfig::default();
        let mut critic = NormNet::init(&cfg.net_spec(2), &mut rng).unwrap();
        let a = sample_uniform_ref(20, 2, &mut rng);
        let mut opt = OptimizerState::adam(cfg.lr);
        let trace = critic_ascent(&mut critic, &mut opt, a.view(), a.view(), 10).unwrap();
        assert!(trace.objective.iter().all(|&v| v == 0.0));
        assert!(critic.weight_norm() <= cfg.norm_budget + 1e-12);
    }

    #[test]
    fn uniform_reference_properties() {
        let a = sample_uniform_ref(50, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_uniform_ref(50, 3, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let big = sample_uniform_ref(10_000, 2, &mut ChaCha8Rng::seed_from_u64(2));
        for c in 0..2 {
            let m = big.column(c).mean().unwrap();
            assert!((m - 0.5).abs() < 0.02, "{m}");
        }
    }

    #[test]
    fn dual_gradient_wrt_samples_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let critic = NormNet::init(&NetSpec::new(2, 6, 2, 1, 3.0), &mut rng).unwrap();
        let a = sample_uniform_ref(5, 2, &mut rng);
        let b = sample_uniform_ref(5, 2, &mut rng);
        let g = dual_objective_grads(&critic, a.view(), b.view()).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            for c in 0..2 {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[[i, c]] += h;
                am[[i, c]] -= h;
                let fp = w1_dual_estimate(&critic, ap.view(), b.view()).unwrap().value;
                let fm = w1_dual_estimate(&critic, am.view(), b.view()).unwrap().value;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g.wrt_a[[i, c]]).abs() < 1e-7, "{fd} vs {}", g.wrt_a[[i, c]]);
            }
        }
    }
}
