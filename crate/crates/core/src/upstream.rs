//! Upstream representation learning.
//!
//! The empirical risk of a representation `h` and per-domain heads `F` is
//!
//! ```text
//! mse + λ·dcov(h(X), onehot(S)) + τ·W1_dual(h(X), ξ) + μ·||F||₁
//! ```
//!
//! Training alternates critic ascent on the dual W1 objective with a
//! descent step on `(F, h)`. The heads take proximal gradient steps so
//! inactive entries become exactly zero.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dependence::{dcov_fast, dcov_grad};
use crate::error::{Error, Result};
use crate::net::{NetGrads, NetSpec, NormNet};
use crate::optim::{clip_to_ball, OptimizerState};
use crate::transport::{critic_ascent, dual_objective_grads, sample_uniform_ref, w1_dual_estimate, CriticConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamModel {
    /// Representation `d → r`.
    pub h: NormNet,
    /// `p × r` head matrix; row `s - 1` belongs to domain `s`.
    pub f: Array2<f64>,
    pub head_radius: f64,
}

impl UpstreamModel {
    pub fn num_domains(&self) -> usize {
        self.f.nrows()
    }

    pub fn rep_dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn head_norm(&self) -> f64 {
        self.f.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpstreamTrainConfig {
    /// Weight of the domain-independence penalty.
    pub lambda: f64,
    /// Weight of the distribution-matching penalty.
    pub tau: f64,
    /// L1 weight on the heads.
    pub mu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rep_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub norm_budget: f64,
    pub lr: f64,
    pub head_lr: f64,
    pub head_radius: f64,
    pub critic: CriticConfig,
    /// Stop once the relative change of the epoch risk stays below this
    /// value for `early_stop_patience` consecutive epochs.
    pub early_stop_tol: Option<f64>,
    pub early_stop_patience: usize,
    /// Keep the critic at its initialization (no ascent).
    pub freeze_critic: bool,
}

impl Default for UpstreamTrainConfig {
    fn default() -> Self {
        UpstreamTrainConfig {
            lambda: 10.0,
            tau: 1.0,
            mu: 0.001,
            epochs: 200,
            batch_size: 64,
            rep_dim: 3,
            width: 32,
            depth: 2,
            norm_budget: 40.0,
            lr: 1e-3,
            head_lr: 0.2,
            head_radius: 10.0,
            // A single hidden layer: with only the output layer rescaled on
            // projection, deeper critics spend most of their budget on
            // random hidden rows and barely move.
            critic: CriticConfig {
                depth: 1,
                norm_budget: 16.0,
                ascent_steps: 20,
                lr: 5e-2,
                ..CriticConfig::default()
            },
            early_stop_tol: None,
            early_stop_patience: 5,
            freeze_critic: false,
        }
    }
}

impl UpstreamTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 8 {
            return Err(Error::Config(format!("batch_size must be >= 8, got {}", self.batch_size)));
        }
        for (name, v) in [("lambda", self.lambda), ("tau", self.tau), ("mu", self.mu)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.rep_dim == 0 {
            return Err(Error::Config("rep_dim must be positive".into()));
        }
        if !(self.head_radius > 0.0) || !(self.lr > 0.0) || !(self.head_lr > 0.0) {
            return Err(Error::Config("learning rates and head_radius must be positive".into()));
        }
        self.critic.validate()
    }

    pub fn net_spec(&self, d: usize) -> NetSpec {
        NetSpec::new(d, self.width, self.depth, self.rep_dim, self.norm_budget)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub mse: f64,
    pub dcov_term: f64,
    pub w1_term: f64,
    pub l1_term: f64,
    pub total: f64,
}

impl RiskBreakdown {
    fn assemble(mse: f64, dcov_term: f64, w1_term: f64, l1_term: f64, cfg: &UpstreamTrainConfig) -> Self {
        RiskBreakdown {
            mse,
            dcov_term,
            w1_term,
            l1_term,
            total: mse + cfg.lambda * dcov_term + cfg.tau * w1_term + cfg.mu * l1_term,
        }
    }

    fn mean_of(items: &[RiskBreakdown]) -> RiskBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = RiskBreakdown::default();
        for b in items {
            out.mse += b.mse / n;
            out.dcov_term += b.dcov_term / n;
            out.w1_term += b.w1_term / n;
            out.l1_term += b.l1_term / n;
            out.total += b.total / n;
        }
        out
    }
}

fn check_batch(model: &UpstreamModel, batch: &Dataset, xi: &ArrayView2<f64>) -> Result<()> {
    if batch.len() < 4 {
        return Err(Error::InsufficientSamples {
            needed: 4,
            got: batch.len(),
        });
    }
    if xi.nrows() != batch.len() || xi.ncols() != model.rep_dim() {
        return Err(Error::shape(format!(
            "reference sample is {:?}, expected ({}, {})",
            xi.dim(),
            batch.len(),
            model.rep_dim()
        )));
    }
    let p = model.num_domains();
    if let Some(&s) = batch.domain.iter().find(|&&s| s == 0 || s > p) {
        return Err(Error::shape(format!("domain label {s} outside 1..={p}")));
    }
    Ok(())
}

fn mse_terms(f: &Array2<f64>, z: &Array2<f64>, batch: &Dataset) -> (f64, Array1<f64>) {
    let resid: Array1<f64> = (0..batch.len())
        .map(|i| batch.y[i] - f.row(batch.domain[i] - 1).dot(&z.row(i)))
        .collect();
    let mse = resid.iter().map(|r| r * r).sum::<f64>() / batch.len() as f64;
    (mse, resid)
}

/// Evaluate every term of the upstream empirical risk on one batch.
pub fn empirical_risk(
    model: &UpstreamModel,
    critic: &NormNet,
    batch: &Dataset,
    xi: ArrayView2<f64>,
    cfg: &UpstreamTrainConfig,
) -> Result<RiskBreakdown> {
    check_batch(model, batch, &xi)?;
    let z = model.h.eval(batch.x.view())?;
    let (mse, _) = mse_terms(&model.f, &z, batch);
    let dcov = dcov_fast(z.view(), batch.onehot_domains(model.num_domains()).view())?.value;
    let w1 = w1_dual_estimate(critic, z.view(), xi)?.value;
    let l1 = model.f.iter().map(|v| v.abs()).sum();
    Ok(RiskBreakdown::assemble(mse, dcov, w1, l1, cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamGrads {
    pub h: NetGrads,
    /// Gradient of the smooth part (everything except `μ||F||₁`).
    pub f_smooth: Array2<f64>,
}

impl UpstreamGrads {
    /// Smooth gradient plus `μ·sign(F)`, the gradient of the full risk
    /// wherever no head entry is exactly zero.
    pub fn f_total(&self, f: &Array2<f64>, mu: f64) -> Array2<f64> {
        &self.f_smooth + &f.mapv(|v| mu * v.signum() * (v != 0.0) as u8 as f64)
    }
}

/// Risk and exact gradients with the critic held fixed.
pub fn risk_gradients(
    model: &UpstreamModel,
    critic: &NormNet,
    batch: &Dataset,
    xi: ArrayView2<f64>,
    cfg: &UpstreamTrainConfig,
) -> Result<(RiskBreakdown, UpstreamGrads)> {
    check_batch(model, batch, &xi)?;
    let n = batch.len() as f64;
    let (z, cache) = model.h.forward(batch.x.view())?;
    let (mse, resid) = mse_terms(&model.f, &z, batch);

    let mut dz = Array2::<f64>::zeros(z.raw_dim());
    let mut df = Array2::<f64>::zeros(model.f.raw_dim());
    for i in 0..batch.len() {
        let s = batch.domain[i] - 1;
        let c = -2.0 * resid[i] / n;
        dz.row_mut(i).scaled_add(c, &model.f.row(s));
        df.row_mut(s).scaled_add(c, &z.row(i));
    }

    let onehot = batch.onehot_domains(model.num_domains());
    let dcov = if cfg.lambda > 0.0 {
        let (v, gz, _) = dcov_grad(z.view(), onehot.view())?;
        dz.scaled_add(cfg.lambda, &gz);
        v.value
    } else {
        dcov_fast(z.view(), onehot.view())?.value
    };

    let dual = dual_objective_grads(critic, z.view(), xi)?;
    if cfg.tau > 0.0 {
        dz.scaled_add(cfg.tau, &dual.wrt_a);
    }

    let (h_grads, _) = model.h.backward(&cache, dz.view())?;
    let l1 = model.f.iter().map(|v| v.abs()).sum();
    Ok((
        RiskBreakdown::assemble(mse, dcov, dual.value, l1, cfg),
        UpstreamGrads { h: h_grads, f_smooth: df },
    ))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpstreamHistory {
    /// Mean batch breakdown per epoch.
    pub epochs: Vec<RiskBreakdown>,
    pub steps: usize,
    /// Largest post-step values seen over the run.
    pub max_h_kappa: f64,
    pub max_critic_kappa: f64,
    pub max_head_norm: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct UpstreamFit {
    pub model: UpstreamModel,
    pub critic: NormNet,
    pub history: UpstreamHistory,
}

/// Batches of shuffled row indices; a trailing batch with fewer than 8 rows
/// is dropped.
pub(crate) fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size)
        .filter(|c| c.len() >= batch_size.min(8))
        .map(|c| c.to_vec())
        .collect()
}

/// Alternating critic ascent / risk descent over a fixed epoch budget.
pub fn train_upstream<R: Rng + ?Sized>(data: &Dataset, cfg: &UpstreamTrainConfig, rng: &mut R) -> Result<UpstreamFit> {
    let h = NormNet::init(&cfg.net_spec(data.dim()), rng)?;
    train_upstream_from(data, cfg, h, rng)
}

/// As [`train_upstream`], starting from a given representation.
pub fn train_upstream_from<R: Rng + ?Sized>(
    data: &Dataset,
    cfg: &UpstreamTrainConfig,
    h: NormNet,
    rng: &mut R,
) -> Result<UpstreamFit> {
    train_upstream_inner(data, cfg, h, true, rng)
}

/// Fit only the heads with the representation held fixed.
pub fn fit_heads<R: Rng + ?Sized>(data: &Dataset, cfg: &UpstreamTrainConfig, h: NormNet, rng: &mut R) -> Result<UpstreamFit> {
    train_upstream_inner(data, cfg, h, false, rng)
}

fn train_upstream_inner<R: Rng + ?Sized>(
    data: &Dataset,
    cfg: &UpstreamTrainConfig,
    mut h: NormNet,
    train_h: bool,
    rng: &mut R,
) -> Result<UpstreamFit> {
    cfg.validate()?;
    let p = data.num_domains();
    if p == 0 || data.domain.iter().any(|&s| s == 0) {
        return Err(Error::shape("upstream rows need domain labels 1..=p"));
    }
    if let Some((s, &c)) = data.domain_counts().iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(Error::Config(format!("domain {} has {c} rows; at least 2 are required", s + 1)));
    }
    if h.in_dim() != data.dim() || h.out_dim() != cfg.rep_dim {
        return Err(Error::shape("representation dimensions do not match data/config"));
    }
    let r = cfg.rep_dim;
    let mut model = UpstreamModel {
        h: {
            h.project_norm();
            h
        },
        f: Array2::zeros((p, r)),
        head_radius: cfg.head_radius,
    };
    let mut critic = NormNet::init(&cfg.critic.net_spec(r), rng)?;
    let mut h_opt = OptimizerState::adam(cfg.lr);
    let mut f_opt = OptimizerState::sgd(cfg.head_lr).with_l1(cfg.mu);
    let mut c_opt = OptimizerState::adam(cfg.critic.lr);
    let h_names = model.h.param_names();
    let f_names = vec!["heads".to_string()];
    let fixed_xi = sample_uniform_ref(cfg.batch_size, r, rng);

    let mut history = UpstreamHistory {
        max_h_kappa: model.h.weight_norm(),
        max_critic_kappa: critic.weight_norm(),
        ..Default::default()
    };
    let mut calm_epochs = 0usize;
    for epoch in 0..cfg.epochs {
        let mut batch_risks = Vec::new();
        for (b, rows) in shuffled_batches(data.len(), cfg.batch_size, rng).into_iter().enumerate() {
            let ctx = format!("epoch {epoch} batch {b}");
            let batch = data.select(&rows);
            let xi = if cfg.critic.resample_reference {
                sample_uniform_ref(rows.len(), r, rng)
            } else {
                fixed_xi.slice(ndarray::s![..rows.len(), ..]).to_owned()
            };
            if cfg.tau > 0.0 && !cfg.freeze_critic && train_h {
                let z = model.h.eval(batch.x.view())?;
                critic_ascent(&mut critic, &mut c_opt, z.view(), xi.view(), cfg.critic.ascent_steps)
                    .map_err(|e| e.within(&ctx))?;
                history.max_critic_kappa = history.max_critic_kappa.max(critic.weight_norm());
            }
            let (risk, grads) = risk_gradients(&model, &critic, &batch, xi.view(), cfg)?;
            if train_h {
                h_opt
                    .step(&mut model.h.param_slices_mut(), &grads.h.slices(), &h_names)
                    .map_err(|e| e.within(format!("{ctx}/h")))?;
                model.h.project_norm();
            }
            f_opt
                .step(
                    &mut [model.f.as_slice_mut().expect("standard layout")],
                    &[grads.f_smooth.as_slice().expect("standard layout")],
                    &f_names,
                )
                .map_err(|e| e.within(&ctx))?;
            clip_to_ball(model.f.as_slice_mut().expect("standard layout"), cfg.head_radius);
            history.steps += 1;
            history.max_h_kappa = history.max_h_kappa.max(model.h.weight_norm());
            history.max_head_norm = history.max_head_norm.max(model.head_norm());
            batch_risks.push(risk);
        }
        let epoch_risk = RiskBreakdown::mean_of(&batch_risks);
        if let (Some(tol), Some(prev)) = (cfg.early_stop_tol, history.epochs.last()) {
            let rel = (epoch_risk.total - prev.total).abs() / prev.total.abs().max(1e-12);
            calm_epochs = if rel < tol { calm_epochs + 1 } else { 0 };
        }
        history.epochs.push(epoch_risk);
        if calm_epochs >= cfg.early_stop_patience.max(1) {
            history.stopped_early = true;
            break;
        }
    }
    Ok(UpstreamFit { model, critic, history })
}

/// Full-data risk with a given critic and reference sample.
pub fn full_data_risk(
    model: &UpstreamModel,
    critic: &NormNet,
    data: &Dataset,
    xi: ArrayView2<f64>,
    cfg: &UpstreamTrainConfig,
) -> Result<RiskBreakdown> {
    empirical_risk(model, critic, data, xi, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSupport {
    pub precision: f64,
    pub recall: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub domains: Vec<DomainSupport>,
    pub exact: bool,
}

/// Compare active entries (`|v| > threshold`) row by row against true masks.
/// Empty predicted sets have precision 1; empty true sets have recall 1.
pub fn support_recovery(f_hat: ArrayView2<f64>, truth: &[Vec<bool>], threshold: f64) -> Result<SupportReport> {
    if !(threshold > 0.0) {
        return Err(Error::Config("support threshold must be positive".into()));
    }
    if f_hat.nrows() != truth.len() || truth.iter().any(|t| t.len() != f_hat.ncols()) {
        return Err(Error::shape(format!(
            "estimate is {:?}, masks are {} × {:?}",
            f_hat.dim(),
            truth.len(),
            truth.first().map(Vec::len)
        )));
    }
    let domains: Vec<DomainSupport> = f_hat
        .rows()
        .into_iter()
        .zip(truth)
        .map(|(row, mask)| {
            let pred: Vec<bool> = row.iter().map(|v| v.abs() > threshold).collect();
            let hits = pred.iter().zip(mask).filter(|(p, t)| **p && **t).count();
            let n_pred = pred.iter().filter(|&&p| p).count();
            let n_true = mask.iter().filter(|&&t| t).count();
            DomainSupport {
                precision: if n_pred == 0 { 1.0 } else { hits as f64 / n_pred as f64 },
                recall: if n_true == 0 { 1.0 } else { hits as f64 / n_true as f64 },
                exact: pred == *mask,
            }
        })
        .collect();
    let exact = domains.iter().all(|d| d.exact);
    Ok(SupportReport { domains, exact })
}

/// Match learned representation coordinates to true ones by maximal total
/// absolute correlation. Returns `perm` with learned coordinate `k`
/// corresponding to true coordinate `perm[k]`.
pub fn align_coordinates(learned: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<Vec<usize>> {
    if learned.dim() != truth.dim() {
        return Err(Error::shape("learned and true representations differ in shape"));
    }
    let r = learned.ncols();
    let center = |m: ArrayView2<f64>| {
        let mean = m.mean_axis(Axis(0)).unwrap();
        &m - &mean
    };
    let (lc, tc) = (center(learned), center(truth));
    let cost = Array2::from_shape_fn((r, r), |(k, j)| {
        let a = lc.column(k);
        let b = tc.column(j);
        let denom = (a.dot(&a) * b.dot(&b)).sqrt();
        if denom > 0.0 {
            -(a.dot(&b) / denom).abs()
        } else {
            0.0
        }
    });
    Ok(crate::transport::min_cost_assignment(&cost))
}

/// Reorder the columns of a head matrix so that column `perm[k]` receives
/// learned column `k`.
pub fn permute_columns(f: ArrayView2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(f.raw_dim());
    for (k, &j) in perm.iter().enumerate() {
        out.column_mut(j).assign(&f.column(k));
    }
    out
}

/// Network capacities suggested by the upstream excess-risk analysis, with
/// every proportionality constant set to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capacity {
    pub rep_width: usize,
    pub rep_depth: usize,
    pub rep_norm: f64,
    pub critic_width: usize,
    pub critic_depth: usize,
    pub critic_norm: f64,
}

pub fn suggest_capacity(n: usize, d: usize, r: usize, beta: f64) -> Result<Capacity> {
    if n == 0 || d == 0 || r == 0 || !(beta > 0.0) {
        return Err(Error::Config("capacity needs positive n, d, r and beta".into()));
    }
    let (nf, df, rf) = (n as f64, d as f64, r as f64);
    let (w1, w2, k1, k2) = if beta <= 2.0 {
        let den = 4.0 * (df + 1.0 + beta);
        (
            nf.powf((2.0 * df + beta) / den),
            nf.powf((2.0 * rf + beta) / den),
            nf.powf((df + 1.0) / (2.0 * (df + beta + 1.0))),
            nf.powf((rf + 1.0) / (2.0 * (df + 1.0 + beta))),
        )
    } else {
        let den = 2.0 * df + 3.0 * beta;
        (
            nf.powf((2.0 * df + beta) / (2.0 * den)),
            nf.powf((2.0 * rf + beta) / (2.0 * den)),
            nf.powf((df + 1.0) / den),
            nf.powf((rf + 1.0) / den),
        )
    };
    // Largest integer strictly below beta.
    let floor_strict = beta.ceil() - 1.0;
    let depth = 2 * ((rf + floor_strict).log2().ceil().max(0.0) as usize) + 2;
    Ok(Capacity {
        rep_width: w1.ceil() as usize,
        rep_depth: depth,
        rep_norm: k1,
        critic_width: w2.ceil() as usize,
        critic_depth: depth,
        critic_norm: k2,
    })
}
