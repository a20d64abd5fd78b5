//! Downstream fine-tuning on top of a frozen representation.
//!
//! The score of a row is `F_T·ĥ(x) + q(A x)`. Training minimizes
//!
//! ```text
//! mean loss + κ·dcov(ĥ(X), q(AX)) + χ·||F_T||₁ + ζ·||A||_F²
//! ```
//!
//! over `F_T` (proximal steps inside a ball), `A` (inside a Frobenius ball)
//! and the norm-constrained auxiliary network `q`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dependence::{dcov_fast, dcov_grad};
use crate::error::{Error, Result};
use crate::net::{NetGrads, NetSpec, NormNet};
use crate::optim::{clip_to_ball, OptimizerState};
use crate::par::{self, Exec};
use crate::synthetic::{logistic_loss, sigmoid};
use crate::upstream::shuffled_batches;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Squared,
    Logistic,
}

impl LossKind {
    pub fn value(self, score: f64, y: f64) -> f64 {
        match self {
            LossKind::Squared => (score - y) * (score - y),
            LossKind::Logistic => logistic_loss(score, y),
        }
    }

    pub fn derivative(self, score: f64, y: f64) -> f64 {
        match self {
            LossKind::Squared => 2.0 * (score - y),
            LossKind::Logistic => sigmoid(score) - y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamModel {
    /// Frozen transferred representation `d → r`.
    pub h_ref: NormNet,
    pub f_t: Array1<f64>,
    /// `d* × d`.
    pub a: Array2<f64>,
    /// Auxiliary network `d* → 1`.
    pub q: NormNet,
    pub q_enabled: bool,
    /// When false the transferred head stays at zero (no-transfer baseline).
    pub head_enabled: bool,
    pub radius: f64,
}

impl DownstreamModel {
    pub fn d_star(&self) -> usize {
        self.a.nrows()
    }

    pub fn a_norm(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn f_t_norm(&self) -> f64 {
        self.f_t.dot(&self.f_t).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    /// Independence penalty weight.
    pub kappa: f64,
    /// L1 weight on the transferred head; `None` means `1/sqrt(m)`.
    pub chi: Option<f64>,
    /// Frobenius penalty weight on `A`.
    pub zeta: f64,
    pub loss: LossKind,
    pub d_star: usize,
    pub d_star_candidates: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub head_lr: f64,
    pub a_lr: f64,
    pub q_lr: f64,
    pub q_width: usize,
    pub q_depth: usize,
    pub q_norm_budget: f64,
    pub radius: f64,
    pub q_enabled: bool,
    pub head_enabled: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            kappa: 10.0,
            chi: None,
            zeta: 0.01,
            loss: LossKind::Squared,
            d_star: 2,
            d_star_candidates: vec![1, 2, 4],
            epochs: 300,
            batch_size: 32,
            head_lr: 0.1,
            a_lr: 1e-2,
            q_lr: 1e-2,
            q_width: 32,
            q_depth: 1,
            q_norm_budget: 40.0,
            radius: 10.0,
            q_enabled: true,
            head_enabled: true,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa > 0.0 && self.batch_size < 8 {
            return Err(Error::Config("batch_size must be >= 8 when kappa > 0".into()));
        }
        if self.batch_size == 0 || self.d_star == 0 {
            return Err(Error::Config("batch_size and d_star must be positive".into()));
        }
        for (name, v) in [("kappa", self.kappa), ("zeta", self.zeta), ("chi", self.chi.unwrap_or(0.0))] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("radius must be positive".into()));
        }
        Ok(())
    }

    pub fn chi_for(&self, m: usize) -> f64 {
        self.chi.unwrap_or(1.0 / (m.max(1) as f64).sqrt())
    }

    fn q_spec(&self) -> NetSpec {
        NetSpec::new(self.d_star, self.q_width, self.q_depth, 1, self.q_norm_budget)
    }
}

fn check_x(model: &DownstreamModel, x: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != model.h_ref.in_dim() || x.ncols() != model.a.ncols() {
        return Err(Error::shape(format!(
            "input has {} columns, model expects {}",
            x.ncols(),
            model.h_ref.in_dim()
        )));
    }
    Ok(())
}

/// Auxiliary outputs `q(A x)` as an `m × 1` matrix.
fn aux_values(model: &DownstreamModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if model.q_enabled {
        model.q.eval(x.dot(&model.a.t()).view())
    } else {
        Ok(Array2::zeros((x.nrows(), 1)))
    }
}

/// Scores `F_T·ĥ(x) + q(A x)`; the auxiliary term is skipped when disabled.
pub fn predict(model: &DownstreamModel, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_x(model, &x)?;
    let h = model.h_ref.eval(x)?;
    let mut s = h.dot(&model.f_t);
    if model.q_enabled {
        s += &aux_values(model, x)?.column(0);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FineTuneBreakdown {
    pub fit: f64,
    pub dcov: f64,
    pub l1: f64,
    pub fro: f64,
    pub total: f64,
}

impl FineTuneBreakdown {
    fn assemble(fit: f64, dcov: f64, l1: f64, fro: f64, kappa: f64, chi: f64, zeta: f64) -> Self {
        FineTuneBreakdown {
            fit,
            dcov,
            l1,
            fro,
            total: fit + kappa * dcov + chi * l1 + zeta * fro,
        }
    }
}

/// Penalty weights resolved for a particular training-set size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalties {
    pub kappa: f64,
    pub chi: f64,
    pub zeta: f64,
}

impl Penalties {
    pub fn from_config(cfg: &FineTuneConfig, m: usize) -> Self {
        Penalties {
            kappa: cfg.kappa,
            chi: cfg.chi_for(m),
            zeta: cfg.zeta,
        }
    }
}

pub fn finetune_loss(model: &DownstreamModel, batch: &Dataset, loss: LossKind, pen: Penalties) -> Result<FineTuneBreakdown> {
    let x = batch.x.view();
    check_x(model, &x)?;
    if batch.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if pen.kappa > 0.0 && batch.len() < 4 {
        return Err(Error::InsufficientSamples {
            needed: 4,
            got: batch.len(),
        });
    }
    let h = model.h_ref.eval(x)?;
    let qv = aux_values(model, x)?;
    let scores = h.dot(&model.f_t) + &qv.column(0);
    let fit = scores.iter().zip(batch.y.iter()).map(|(&s, &y)| loss.value(s, y)).sum::<f64>() / batch.len() as f64;
    let dcov = if batch.len() >= 4 {
        dcov_fast(h.view(), qv.view())?.value
    } else {
        0.0
    };
    let l1 = model.f_t.iter().map(|v| v.abs()).sum();
    let fro = model.a.iter().map(|v| v * v).sum();
    Ok(FineTuneBreakdown::assemble(fit, dcov, l1, fro, pen.kappa, pen.chi, pen.zeta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneGrads {
    /// Gradient of the smooth part with respect to `F_T` (no L1 term).
    pub f_t_smooth: Array1<f64>,
    /// Includes the Frobenius penalty.
    pub a: Array2<f64>,
    pub q: NetGrads,
}

impl FineTuneGrads {
    pub fn f_t_total(&self, f_t: &Array1<f64>, chi: f64) -> Array1<f64> {
        &self.f_t_smooth + &f_t.mapv(|v| chi * v.signum() * (v != 0.0) as u8 as f64)
    }
}

pub fn finetune_gradients(
    model: &DownstreamModel,
    batch: &Dataset,
    loss: LossKind,
    pen: Penalties,
) -> Result<(FineTuneBreakdown, FineTuneGrads)> {
    let x = batch.x.view();
    check_x(model, &x)?;
    let m = batch.len();
    if m < 4 && pen.kappa > 0.0 {
        return Err(Error::InsufficientSamples { needed: 4, got: m });
    }
    if m == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let h = model.h_ref.eval(x)?;
    let u = x.dot(&model.a.t());
    let (qv, q_cache) = if model.q_enabled {
        let (v, c) = model.q.forward(u.view())?;
        (v, Some(c))
    } else {
        (Array2::zeros((m, 1)), None)
    };
    let scores = h.dot(&model.f_t) + &qv.column(0);
    let mf = m as f64;
    let mut fit = 0.0;
    let mut dscore = Array1::zeros(m);
    for i in 0..m {
        fit += loss.value(scores[i], batch.y[i]);
        dscore[i] = loss.derivative(scores[i], batch.y[i]) / mf;
    }
    fit /= mf;

    let f_t_smooth = if model.head_enabled {
        h.t().dot(&dscore)
    } else {
        Array1::zeros(model.f_t.len())
    };
    let mut dq = dscore.clone().insert_axis(Axis(1));
    let dcov = if m >= 4 {
        if pen.kappa > 0.0 && model.q_enabled {
            let (v, _, gq) = dcov_grad(h.view(), qv.view())?;
            dq.scaled_add(pen.kappa, &gq);
            v.value
        } else {
            dcov_fast(h.view(), qv.view())?.value
        }
    } else {
        0.0
    };
    let mut a_grad = &model.a * (2.0 * pen.zeta);
    let q_grads = match q_cache {
        Some(cache) => {
            let (g, du) = model.q.backward(&cache, dq.view())?;
            a_grad += &du.t().dot(&x);
            g
        }
        None => NetGrads::zeros_like(&model.q),
    };
    let l1 = model.f_t.iter().map(|v| v.abs()).sum();
    let fro = model.a.iter().map(|v| v * v).sum();
    Ok((
        FineTuneBreakdown::assemble(fit, dcov, l1, fro, pen.kappa, pen.chi, pen.zeta),
        FineTuneGrads {
            f_t_smooth,
            a: a_grad,
            q: q_grads,
        },
    ))
}

/// Random matrix with orthonormal rows, scaled to unit Frobenius norm.
fn init_reduction<R: Rng + ?Sized>(d_star: usize, d: usize, rng: &mut R) -> Array2<f64> {
    let mut a = Array2::<f64>::zeros((d_star, d));
    let mut k = 0;
    while k < d_star {
        let mut v: Array1<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        for j in 0..k {
            let proj = a.row(j).dot(&v);
            v.scaled_add(-proj, &a.row(j));
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            a.row_mut(k).assign(&(v / norm));
            k += 1;
        }
    }
    a / (d_star as f64).sqrt()
}

pub fn init_model<R: Rng + ?Sized>(h_hat: &NormNet, cfg: &FineTuneConfig, rng: &mut R) -> Result<DownstreamModel> {
    let d = h_hat.in_dim();
    if cfg.d_star > d {
        return Err(Error::Config(format!("d_star {} exceeds input dimension {d}", cfg.d_star)));
    }
    let mut a = init_reduction(cfg.d_star, d, rng);
    clip_to_ball(a.as_slice_mut().expect("standard layout"), cfg.radius);
    let q = NormNet::init(&cfg.q_spec(), rng)?;
    Ok(DownstreamModel {
        h_ref: h_hat.clone(),
        f_t: Array1::zeros(h_hat.out_dim()),
        a,
        q,
        q_enabled: cfg.q_enabled,
        head_enabled: cfg.head_enabled,
        radius: cfg.radius,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FineTuneHistory {
    pub epochs: Vec<FineTuneBreakdown>,
    pub steps: usize,
    pub max_f_t_norm: f64,
    pub max_a_norm: f64,
    pub max_q_kappa: f64,
}

/// Fit `(F_T, A, q)` with `ĥ` frozen.
pub fn finetune<R: Rng + ?Sized>(
    h_hat: &NormNet,
    data: &Dataset,
    cfg: &FineTuneConfig,
    rng: &mut R,
) -> Result<(DownstreamModel, FineTuneHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let kappa = h_hat.weight_norm();
    if kappa > h_hat.norm_budget() + 1e-9 {
        return Err(Error::Infeasible {
            kappa,
            budget: h_hat.norm_budget(),
        });
    }
    if data.dim() != h_hat.in_dim() {
        return Err(Error::shape("data dimension does not match the representation"));
    }
    let pen = Penalties::from_config(cfg, data.len());
    let mut model = init_model(h_hat, cfg, rng)?;
    let mut head_opt = OptimizerState::sgd(cfg.head_lr).with_l1(pen.chi);
    let mut a_opt = OptimizerState::adam(cfg.a_lr);
    let mut q_opt = OptimizerState::adam(cfg.q_lr);
    let q_names = model.q.param_names();
    let mut history = FineTuneHistory {
        max_q_kappa: model.q.weight_norm(),
        max_a_norm: model.a_norm(),
        ..Default::default()
    };
    let batch_size = cfg.batch_size.min(data.len());
    for epoch in 0..cfg.epochs {
        let mut sum = FineTuneBreakdown::default();
        let batches = shuffled_batches(data.len(), batch_size, rng);
        let nb = batches.len().max(1) as f64;
        for (b, rows) in batches.into_iter().enumerate() {
            let ctx = format!("epoch {epoch} batch {b}");
            let batch = data.select(&rows);
            let (br, g) = finetune_gradients(&model, &batch, cfg.loss, pen)?;
            if model.head_enabled {
                head_opt
                    .step(
                        &mut [model.f_t.as_slice_mut().unwrap()],
                        &[g.f_t_smooth.as_slice().unwrap()],
                        &["f_t".to_string()],
                    )
                    .map_err(|e| e.within(&ctx))?;
                clip_to_ball(model.f_t.as_slice_mut().unwrap(), model.radius);
            }
            if model.q_enabled {
                a_opt
                    .step(&mut [model.a.as_slice_mut().unwrap()], &[g.a.as_slice().unwrap()], &["a".to_string()])
                    .map_err(|e| e.within(&ctx))?;
                clip_to_ball(model.a.as_slice_mut().unwrap(), model.radius);
                q_opt
                    .step(&mut model.q.param_slices_mut(), &g.q.slices(), &q_names)
                    .map_err(|e| e.within(format!("{ctx}/q")))?;
                model.q.project_norm();
            }
            history.steps += 1;
            history.max_f_t_norm = history.max_f_t_norm.max(model.f_t_norm());
            history.max_a_norm = history.max_a_norm.max(model.a_norm());
            history.max_q_kappa = history.max_q_kappa.max(model.q.weight_norm());
            sum.fit += br.fit / nb;
            sum.dcov += br.dcov / nb;
            sum.l1 += br.l1 / nb;
            sum.fro += br.fro / nb;
            sum.total += br.total / nb;
        }
        history.epochs.push(sum);
    }
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean squared error, or mean log-loss for classification.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub log_loss: Option<f64>,
}

pub fn evaluate(model: &DownstreamModel, data: &Dataset, loss: LossKind) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let scores = predict(model, data.x.view())?;
    Ok(metrics_from_scores(&scores, &data.y, loss))
}

pub fn metrics_from_scores(scores: &Array1<f64>, y: &Array1<f64>, loss: LossKind) -> Metrics {
    let m = y.len() as f64;
    let mean_loss = scores.iter().zip(y.iter()).map(|(&s, &t)| loss.value(s, t)).sum::<f64>() / m;
    match loss {
        LossKind::Squared => Metrics {
            loss: mean_loss,
            accuracy: None,
            log_loss: None,
        },
        LossKind::Logistic => {
            let correct = scores
                .iter()
                .zip(y.iter())
                .filter(|(&s, &t)| (s >= 0.0) == (t >= 0.5))
                .count();
            Metrics {
                loss: mean_loss,
                accuracy: Some(correct as f64 / m),
                log_loss: Some(mean_loss),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMetric {
    pub d_star: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DstarSelection {
    pub best: usize,
    pub candidates: Vec<CandidateMetric>,
    pub model: DownstreamModel,
}

/// Fine-tune once per candidate `d*` and keep the best validation metric
/// (lowest loss, or highest accuracy for classification). Ties go to the
/// smaller `d*`. Candidates run concurrently, each from its own seed.
pub fn select_dstar(
    exec: Exec,
    h_hat: &NormNet,
    train: &Dataset,
    val: &Dataset,
    candidates: &[usize],
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<DstarSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("no d_star candidates".into()));
    }
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_unstable();
    order.dedup();
    let runs: Vec<Result<(DownstreamModel, Metrics)>> = par::map_slice(exec, &order, |&d_star| {
        let c = FineTuneConfig { d_star, ..cfg.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, d_star as u64));
        let (model, _) = finetune(h_hat, train, &c, &mut rng)?;
        let metrics = evaluate(&model, val, c.loss)?;
        Ok((model, metrics))
    });
    let mut best: Option<(usize, f64)> = None;
    let mut results = Vec::with_capacity(order.len());
    for (k, run) in runs.into_iter().enumerate() {
        let (model, metrics) = run?;
        let score = match (cfg.loss, metrics.accuracy) {
            (LossKind::Logistic, Some(acc)) => -acc,
            _ => metrics.loss,
        };
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((k, score));
        }
        results.push((model, CandidateMetric { d_star: order[k], metrics }));
    }
    let (k, _) = best.expect("nonempty");
    let model = results[k].0.clone();
    Ok(DstarSelection {
        best: order[k],
        candidates: results.into_iter().map(|(_, c)| c).collect(),
        model,
    })
}
