//! End-to-end runs: data generation, upstream training, fine-tuning of the
//! full method and its baselines, evaluation against known truth, m-sweeps
//! and metric export.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::dependence::dcov_fast;
use crate::downstream::{
    evaluate, finetune, predict, select_dstar, DownstreamModel, FineTuneBreakdown, FineTuneConfig, FineTuneHistory, LossKind, Metrics,
};
use crate::error::{Error, Result};
use crate::net::NormNet;
use crate::par::{self, Exec};
use crate::seeds::{derive, derive_named};
use crate::synthetic::{oracle_excess_risk, ExcessRisk, Regime, Scenario, Task};
use crate::transport::{sample_uniform_ref, w1_exact_matching, MATCHING_MAX_N};
use crate::upstream::{
    align_coordinates, permute_columns, support_recovery, train_upstream_from, RiskBreakdown, SupportReport,
    UpstreamModel, UpstreamTrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full method.
    Ours,
    /// No independence penalty.
    Wi,
    /// Linear head on the transferred representation, no auxiliary network.
    Tir,
    /// Auxiliary network on the raw input only, no transfer.
    ErmD,
    /// Full downstream method on a representation trained without
    /// invariance penalties.
    ErmUd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Wi => "wi",
            Method::Tir => "tir",
            Method::ErmD => "erm_d",
            Method::ErmUd => "erm_ud",
        }
    }
}

pub fn loss_for(task: Task) -> LossKind {
    match task {
        Task::Regression => LossKind::Squared,
        Task::Classification => LossKind::Logistic,
    }
}

/// Train / validation / fresh test data for one downstream cell.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Split {
    pub fn generate(sc: &Scenario, m: usize, n_test: usize, val_fraction: f64, seed: u64) -> Result<Split> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = sc.gen_downstream(m, &mut rng)?;
        let (train, val) = data.split_head(1.0 - val_fraction);
        let test = sc.gen_downstream(n_test, &mut rng)?;
        Ok(Split { train, val, test })
    }

    /// Split supplied data 8:2-style and draw a fresh test set.
    pub fn from_data(sc: &Scenario, data: &Dataset, n_test: usize, val_fraction: f64, seed: u64) -> Result<Split> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train, val) = data.split_head(1.0 - val_fraction);
        let test = sc.gen_downstream(n_test, &mut rng)?;
        Ok(Split { train, val, test })
    }
}

/// Upstream fit plus the held-out diagnostics reported with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpstreamReport {
    pub epochs_run: usize,
    pub final_risk: Option<RiskBreakdown>,
    pub history: Vec<RiskBreakdown>,
    /// Coordinate `k` of the learned representation matches true coordinate
    /// `perm[k]`.
    pub perm: Vec<usize>,
    pub support: SupportReport,
    pub dcov_init: f64,
    pub dcov_trained: f64,
    pub w1_init: f64,
    pub w1_trained: f64,
    pub max_h_kappa: f64,
    pub max_critic_kappa: f64,
    pub max_head_norm: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct UpstreamOutcome {
    pub model: UpstreamModel,
    pub report: UpstreamReport,
}

fn held_out_invariance(h: &NormNet, diag: &Dataset, xi: &Array2<f64>) -> Result<(f64, f64)> {
    let z = h.eval(diag.x.view())?;
    let dcov = dcov_fast(z.view(), diag.onehot_domains(diag.num_domains()).view())?.value;
    let k = xi.nrows();
    let w1 = w1_exact_matching(z.slice(s![..k, ..]), xi.view())?.value;
    Ok((dcov, w1))
}

/// Generate upstream data for `seed`, then train as in [`run_upstream_on`].
pub fn run_upstream(
    sc: &Scenario,
    cfg: &UpstreamTrainConfig,
    n: usize,
    n_diag: usize,
    threshold: f64,
    seed: u64,
) -> Result<UpstreamOutcome> {
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_named(seed, "upstream-data"));
    let data = sc.gen_upstream(n, &mut data_rng).map_err(|e| e.at_stage("generate"))?;
    run_upstream_on(sc, cfg, &data, n_diag, threshold, seed)
}

/// Train on `data` and compute diagnostics on a separate generator draw.
pub fn run_upstream_on(
    sc: &Scenario,
    cfg: &UpstreamTrainConfig,
    data: &Dataset,
    n_diag: usize,
    threshold: f64,
    seed: u64,
) -> Result<UpstreamOutcome> {
    let started = Instant::now();
    let mut diag_rng = ChaCha8Rng::seed_from_u64(derive_named(seed, "upstream-diag"));
    let diag = sc.gen_upstream(n_diag, &mut diag_rng).map_err(|e| e.at_stage("generate"))?;
    let xi = sample_uniform_ref(n_diag.min(MATCHING_MAX_N), sc.r, &mut diag_rng);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_named(seed, "upstream-train"));
    let stage = |e: Error| e.at_stage("upstream");
    let h0 = NormNet::init(&cfg.net_spec(sc.d), &mut rng).map_err(stage)?;
    let (dcov_init, w1_init) = held_out_invariance(&h0, &diag, &xi).map_err(stage)?;
    let fit = train_upstream_from(data, cfg, h0, &mut rng).map_err(stage)?;
    let (dcov_trained, w1_trained) = held_out_invariance(&fit.model.h, &diag, &xi).map_err(stage)?;

    let z = fit.model.h.eval(diag.x.view()).map_err(stage)?;
    let perm = align_coordinates(z.view(), sc.h_star(diag.x.view()).view()).map_err(stage)?;
    let aligned = permute_columns(fit.model.f.view(), &perm);
    let support = support_recovery(aligned.view(), &sc.f_star_masks(), threshold).map_err(stage)?;
    let report = UpstreamReport {
        epochs_run: fit.history.epochs.len(),
        final_risk: fit.history.epochs.last().copied(),
        history: fit.history.epochs.clone(),
        perm,
        support,
        dcov_init,
        dcov_trained,
        w1_init,
        w1_trained,
        max_h_kappa: fit.history.max_h_kappa,
        max_critic_kappa: fit.history.max_critic_kappa,
        max_head_norm: fit.history.max_head_norm,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok(UpstreamOutcome {
        model: fit.model,
        report,
    })
}

/// Result of one fine-tuned method on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub d_star: usize,
    pub val: Metrics,
    pub test: Metrics,
    pub excess: ExcessRisk,
    /// Held-out `dcov(ĥ(X), q̂(AX))` on the test draw.
    pub dcov_hq: f64,
    /// Exact support match of the aligned transferred head, when a
    /// permutation is available.
    pub f_t_support_exact: Option<bool>,
    pub f_t: Vec<f64>,
    pub history: Vec<FineTuneBreakdown>,
    pub max_f_t_norm: f64,
    pub max_a_norm: f64,
    pub max_q_kappa: f64,
    pub wall_clock_s: f64,
}

/// Settings shared by every method in one cell.
#[derive(Debug, Clone)]
pub struct CellSettings<'a> {
    pub scenario: &'a Scenario,
    pub finetune: &'a FineTuneConfig,
    pub select: bool,
    pub n_mc: usize,
    pub threshold: f64,
    pub seed: u64,
}

pub fn method_config(method: Method, base: &FineTuneConfig, d: usize) -> FineTuneConfig {
    let mut cfg = base.clone();
    match method {
        Method::Ours | Method::ErmUd => {}
        Method::Wi => cfg.kappa = 0.0,
        Method::Tir => cfg.q_enabled = false,
        Method::ErmD => {
            cfg.head_enabled = false;
            cfg.kappa = 0.0;
            cfg.d_star = d;
            cfg.d_star_candidates = vec![d];
        }
    }
    cfg
}

/// Fine-tune one method on a split. The fine-tuning seed is the cell seed,
/// so every method starts from the same random state. Returns the fitted
/// model, its history and the resolved configuration.
pub fn fit_method(
    method: Method,
    h_hat: &NormNet,
    split: &Split,
    cell: &CellSettings<'_>,
) -> Result<(DownstreamModel, FineTuneHistory, FineTuneConfig)> {
    let sc = cell.scenario;
    let mut cfg = method_config(method, cell.finetune, sc.d);
    cfg.loss = loss_for(sc.task);
    let stage = |e: Error| e.at_stage("finetune");
    if cell.select && cfg.q_enabled && method != Method::ErmD {
        let sel = select_dstar(
            Exec::Sequential,
            h_hat,
            &split.train,
            &split.val,
            &cfg.d_star_candidates,
            &cfg,
            cell.seed,
        )
        .map_err(stage)?;
        cfg.d_star = sel.best;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cell.seed, cfg.d_star as u64));
    let (model, history) = finetune(h_hat, &split.train, &cfg, &mut rng).map_err(stage)?;
    Ok((model, history, cfg))
}

/// Fine-tune and evaluate one method.
pub fn run_method(
    method: Method,
    h_hat: &NormNet,
    perm: Option<&[usize]>,
    split: &Split,
    cell: &CellSettings<'_>,
) -> Result<MethodResult> {
    let started = Instant::now();
    let (model, history, cfg) = fit_method(method, h_hat, split, cell)?;
    let result = evaluate_model(method, &model, &history, perm, split, cell, cfg.loss)?;
    Ok(MethodResult {
        wall_clock_s: started.elapsed().as_secs_f64(),
        ..result
    })
}

/// Validation, test and oracle metrics of a fitted model.
pub fn evaluate_model(
    method: Method,
    model: &DownstreamModel,
    history: &FineTuneHistory,
    perm: Option<&[usize]>,
    split: &Split,
    cell: &CellSettings<'_>,
    loss: LossKind,
) -> Result<MethodResult> {
    let stage = |e: Error| e.at_stage("evaluate");
    let sc = cell.scenario;
    let val = if split.val.is_empty() {
        evaluate(model, &split.train, loss)
    } else {
        evaluate(model, &split.val, loss)
    }
    .map_err(stage)?;
    let test = evaluate(model, &split.test, loss).map_err(stage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_named(cell.seed, "excess"));
    let excess = oracle_excess_risk(|x| predict(model, x), sc, cell.n_mc, &mut rng).map_err(stage)?;
    let dcov_hq = if model.q_enabled && split.test.len() >= 4 {
        let h = model.h_ref.eval(split.test.x.view()).map_err(stage)?;
        let q = model.q.eval(split.test.x.dot(&model.a.t()).view()).map_err(stage)?;
        dcov_fast(h.view(), q.view()).map_err(stage)?.value
    } else {
        0.0
    };
    let f_t_support_exact = match perm {
        Some(p) if model.head_enabled => {
            let row = model.f_t.clone().insert_axis(ndarray::Axis(0));
            let aligned = permute_columns(row.view(), p);
            Some(
                support_recovery(aligned.view(), &[sc.f_t_star_mask()], cell.threshold)
                    .map_err(stage)?
                    .exact,
            )
        }
        _ => None,
    };
    Ok(MethodResult {
        method,
        d_star: model.d_star(),
        val,
        test,
        excess,
        dcov_hq,
        f_t_support_exact,
        f_t: model.f_t.to_vec(),
        history: history.epochs.clone(),
        max_f_t_norm: history.max_f_t_norm,
        max_a_norm: history.max_a_norm,
        max_q_kappa: history.max_q_kappa,
        wall_clock_s: 0.0,
    })
}

/// Seed of the downstream cell `(seed, regime, m)`.
pub fn cell_seed(seed: u64, regime: Regime, m: usize) -> u64 {
    derive(derive_named(seed, regime.as_str()), m as u64)
}

/// Fine-tune the full method and every enabled baseline on one split.
/// `h_ud` is the representation trained without invariance penalties and is
/// required when ERM-UD is enabled.
pub fn run_baselines(
    h_hat: &NormNet,
    perm: Option<&[usize]>,
    h_ud: Option<(&NormNet, Option<&[usize]>)>,
    split: &Split,
    toggles: &crate::config::BaselineToggles,
    cell: &CellSettings<'_>,
) -> Result<Vec<MethodResult>> {
    let mut out = vec![run_method(Method::Ours, h_hat, perm, split, cell)?];
    if toggles.wi {
        out.push(run_method(Method::Wi, h_hat, perm, split, cell)?);
    }
    if toggles.tir {
        out.push(run_method(Method::Tir, h_hat, perm, split, cell)?);
    }
    if toggles.erm_d {
        out.push(run_method(Method::ErmD, h_hat, None, split, cell)?);
    }
    if toggles.erm_ud {
        let (h, p) = h_ud.ok_or_else(|| Error::Config("ERM-UD needs a representation trained without penalties".into()))?;
        out.push(run_method(Method::ErmUd, h, p, split, cell)?);
    }
    Ok(out)
}

/// One CSV row per method and regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub regime: Regime,
    pub method: Method,
    pub n: usize,
    pub m: usize,
    pub d_star: usize,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_log_loss: Option<f64>,
    pub val_loss: f64,
    pub excess_risk: f64,
    pub excess_se: f64,
    pub dcov_hq: f64,
    pub f_t_support_exact: Option<bool>,
    pub upstream_support_exact: bool,
    pub upstream_dcov_init: f64,
    pub upstream_dcov_trained: f64,
    pub upstream_w1_init: f64,
    pub upstream_w1_trained: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeResults {
    pub regime: Regime,
    pub methods: Vec<MethodResult>,
}

/// Everything produced for one seed of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub upstream: UpstreamReport,
    pub upstream_ud: Option<UpstreamReport>,
    pub regimes: Vec<RegimeResults>,
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    pub fn rows(&self) -> Vec<MetricsRow> {
        let up = &self.upstream;
        let mut rows = Vec::new();
        for reg in &self.regimes {
            for r in &reg.methods {
                rows.push(MetricsRow {
                    run_id: self.run_id.clone(),
                    seed: self.seed,
                    regime: reg.regime,
                    method: r.method,
                    n: self.n,
                    m: self.m,
                    d_star: r.d_star,
                    test_loss: r.test.loss,
                    test_accuracy: r.test.accuracy,
                    test_log_loss: r.test.log_loss,
                    val_loss: r.val.loss,
                    excess_risk: r.excess.mean,
                    excess_se: r.excess.std_err,
                    dcov_hq: r.dcov_hq,
                    f_t_support_exact: r.f_t_support_exact,
                    upstream_support_exact: up.support.exact,
                    upstream_dcov_init: up.dcov_init,
                    upstream_dcov_trained: up.dcov_trained,
                    upstream_w1_init: up.w1_init,
                    upstream_w1_trained: up.w1_trained,
                    wall_clock_s: r.wall_clock_s,
                });
            }
        }
        rows
    }
}

/// Upstream config with the invariance penalties switched off.
pub fn erm_ud_config(cfg: &UpstreamTrainConfig) -> UpstreamTrainConfig {
    UpstreamTrainConfig {
        lambda: 0.0,
        tau: 0.0,
        ..cfg.clone()
    }
}

/// Run one seed of an experiment: upstream, then every regime with the
/// enabled baselines at downstream size `cfg.m`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<MetricsRecord> {
    let started = Instant::now();
    let base = cfg.scenario.clone();
    let sc0 = Scenario::new(&base).map_err(|e| e.at_stage("generate"))?;
    let up = run_upstream(&sc0, &cfg.upstream, cfg.n, cfg.n_diag, cfg.support_threshold, seed)?;
    let ud = if cfg.baselines.erm_ud {
        Some(run_upstream(
            &sc0,
            &erm_ud_config(&cfg.upstream),
            cfg.n,
            cfg.n_diag,
            cfg.support_threshold,
            seed,
        )?)
    } else {
        None
    };
    let mut regimes = Vec::new();
    for &regime in &cfg.regimes {
        let sc = Scenario::new(&crate::synthetic::ScenarioConfig { regime, ..base.clone() })
            .map_err(|e| e.at_stage("generate"))?;
        let cseed = cell_seed(seed, regime, cfg.m);
        let split = Split::generate(&sc, cfg.m, cfg.n_test, cfg.val_fraction, derive_named(cseed, "data"))
            .map_err(|e| e.at_stage("generate"))?;
        let cell = CellSettings {
            scenario: &sc,
            finetune: &cfg.finetune,
            select: cfg.select_dstar,
            n_mc: cfg.n_mc,
            threshold: cfg.support_threshold,
            seed: cseed,
        };
        let methods = run_baselines(
            &up.model.h,
            Some(&up.report.perm),
            ud.as_ref().map(|u| (&u.model.h, Some(u.report.perm.as_slice()))),
            &split,
            &cfg.baselines,
            &cell,
        )?;
        regimes.push(RegimeResults { regime, methods });
    }
    Ok(MetricsRecord {
        run_id: format!("s{seed}"),
        seed,
        n: cfg.n,
        m: cfg.m,
        upstream: up.report,
        upstream_ud: ud.map(|u| u.report),
        regimes,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub records: Vec<MetricsRecord>,
}

/// Files written by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutputs {
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub records: Vec<MetricsRecord>,
}

pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(std::io::BufWriter::new(file));
    for r in rows {
        w.serialize(r).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run every seed (concurrently when `exec` allows), then write
/// `metrics.csv` and `summary.json` to `cfg.out_dir`. On failure the
/// records that did complete are still written and the summary is marked
/// as failed.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Exec) -> Result<RunOutputs> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let results = par::map_slice(exec, &cfg.seeds, |&seed| run_seed(cfg, seed));
    let mut records = Vec::new();
    let mut failure = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) if failure.is_none() => failure = Some(e),
            Err(_) => {}
        }
    }
    let metrics_csv = cfg.out_dir.join("metrics.csv");
    let summary_json = cfg.out_dir.join("summary.json");
    let rows: Vec<MetricsRow> = records.iter().flat_map(|r| r.rows()).collect();
    write_rows_csv(&metrics_csv, &rows).map_err(|e| e.at_stage("write"))?;
    let summary = RunSummary {
        status: if failure.is_some() { "failed".into() } else { "ok".into() },
        failed_stage: failure.as_ref().and_then(|e| e.stage()).map(str::to_string),
        error: failure.as_ref().map(|e| e.to_string()),
        config: cfg.clone(),
        records: records.clone(),
    };
    write_json(&summary_json, &summary).map_err(|e| e.at_stage("write"))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(RunOutputs {
            metrics_csv,
            summary_json,
            records,
        }),
    }
}

/// Ordinary least-squares fit of `log y` on `log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub points: usize,
}

pub fn fit_loglog(x: &[f64], y: &[f64]) -> Result<LogLogFit> {
    if x.len() != y.len() {
        return Err(Error::shape("x and y lengths differ"));
    }
    if x.len() < 3 {
        return Err(Error::InsufficientSamples { needed: 3, got: x.len() });
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Config("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("log-log fit needs at least two distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Ok(LogLogFit {
        slope,
        intercept,
        slope_se: (ssr / (k - 2.0) / sxx).sqrt(),
        points: lx.len(),
    })
}

/// One `(seed, regime, m)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub seed: u64,
    pub regime: Regime,
    pub m: usize,
    pub d_star: usize,
    pub excess_risk: f64,
    pub excess_se: f64,
    pub test_loss: f64,
    pub f_t_support_exact: Option<bool>,
}

/// Mean over seeds of one `(regime, m)` point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub regime: Regime,
    pub m: usize,
    pub mean_excess: f64,
    pub se_excess: f64,
    pub mean_test_loss: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSlope {
    pub regime: Regime,
    pub fit: Option<LogLogFit>,
    /// Why the fit is missing, e.g. a non-positive mean risk.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub table: Vec<SweepPoint>,
    pub slopes: Vec<RegimeSlope>,
    pub upstream: Vec<UpstreamReport>,
}

impl SweepReport {
    pub fn slope(&self, regime: Regime) -> Option<LogLogFit> {
        self.slopes.iter().find(|s| s.regime == regime).and_then(|s| s.fit)
    }
}

fn check_sweep_design(m_values: &[usize], seeds: &[u64]) -> Result<()> {
    let mut ms = m_values.to_vec();
    ms.sort_unstable();
    ms.dedup();
    if ms.len() < 4 {
        return Err(Error::Config(format!("a sweep needs at least 4 distinct m values, got {}", ms.len())));
    }
    let span = (*ms.last().unwrap() as f64 / ms[0].max(1) as f64).log10();
    if span < 1.5 {
        return Err(Error::Config(format!("m values span {span:.2} decades; at least 1.5 are required")));
    }
    if seeds.len() < 5 {
        return Err(Error::Config(format!("a sweep needs at least 5 seeds, got {}", seeds.len())));
    }
    Ok(())
}

/// Aggregate cells into per-`(regime, m)` means and fit one log-log slope
/// per regime.
pub fn summarize_sweep(cells: &[SweepCell], regimes: &[Regime], m_values: &[usize]) -> (Vec<SweepPoint>, Vec<RegimeSlope>) {
    let mut table = Vec::new();
    let mut slopes = Vec::new();
    for &regime in regimes {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut bad = Vec::new();
        for &m in m_values {
            let vals: Vec<&SweepCell> = cells.iter().filter(|c| c.regime == regime && c.m == m).collect();
            if vals.is_empty() {
                continue;
            }
            let k = vals.len() as f64;
            let mean = vals.iter().map(|c| c.excess_risk).sum::<f64>() / k;
            let var = if vals.len() > 1 {
                vals.iter().map(|c| (c.excess_risk - mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            table.push(SweepPoint {
                regime,
                m,
                mean_excess: mean,
                se_excess: (var / k).sqrt(),
                mean_test_loss: vals.iter().map(|c| c.test_loss).sum::<f64>() / k,
                seeds: vals.len(),
            });
            if mean > 0.0 {
                xs.push(m as f64);
                ys.push(mean);
            } else {
                bad.push(m);
            }
        }
        let (fit, note) = match fit_loglog(&xs, &ys) {
            Ok(f) if bad.is_empty() => (Some(f), None),
            Ok(f) => (Some(f), Some(format!("non-positive mean excess risk at m = {bad:?} left out"))),
            Err(e) => (None, Some(e.to_string())),
        };
        slopes.push(RegimeSlope { regime, fit, note });
    }
    (table, slopes)
}

/// m-sweep of the full method across regimes. Each seed trains one
/// upstream representation shared by all of its cells; seeds run
/// concurrently when `exec` allows.
pub fn sweep_m(cfg: &ExperimentConfig, exec: Exec) -> Result<SweepReport> {
    cfg.validate()?;
    check_sweep_design(&cfg.m_values, &cfg.seeds)?;
    let sc0 = Scenario::new(&cfg.scenario).map_err(|e| e.at_stage("generate"))?;
    let per_seed = par::map_slice(exec, &cfg.seeds, |&seed| -> Result<(UpstreamReport, Vec<SweepCell>)> {
        let up = run_upstream(&sc0, &cfg.upstream, cfg.n, cfg.n_diag, cfg.support_threshold, seed)?;
        let cells = sweep_seed(cfg, seed, &up)?;
        Ok((up.report, cells))
    });
    collect_sweep(cfg, per_seed)
}

/// As [`sweep_m`] with the upstream fits supplied, one per entry of
/// `cfg.seeds` and in the same order.
pub fn sweep_m_with(cfg: &ExperimentConfig, exec: Exec, upstream: &[UpstreamOutcome]) -> Result<SweepReport> {
    cfg.validate()?;
    check_sweep_design(&cfg.m_values, &cfg.seeds)?;
    if upstream.len() != cfg.seeds.len() {
        return Err(Error::Config(format!(
            "{} upstream fits for {} seeds",
            upstream.len(),
            cfg.seeds.len()
        )));
    }
    let jobs: Vec<(u64, &UpstreamOutcome)> = cfg.seeds.iter().copied().zip(upstream).collect();
    let per_seed = par::map_slice(exec, &jobs, |&(seed, up)| -> Result<(UpstreamReport, Vec<SweepCell>)> {
        Ok((up.report.clone(), sweep_seed(cfg, seed, up)?))
    });
    collect_sweep(cfg, per_seed)
}

fn sweep_seed(cfg: &ExperimentConfig, seed: u64, up: &UpstreamOutcome) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &regime in &cfg.regimes {
        let sc = Scenario::new(&crate::synthetic::ScenarioConfig {
            regime,
            ..cfg.scenario.clone()
        })
        .map_err(|e| e.at_stage("generate"))?;
        for &m in &cfg.m_values {
            let cseed = cell_seed(seed, regime, m);
            let split = Split::generate(&sc, m, cfg.n_test, cfg.val_fraction, derive_named(cseed, "data"))
                .map_err(|e| e.at_stage("generate"))?;
            let cell = CellSettings {
                scenario: &sc,
                finetune: &cfg.finetune,
                select: cfg.select_dstar,
                n_mc: cfg.n_mc,
                threshold: cfg.support_threshold,
                seed: cseed,
            };
            let r = run_method(Method::Ours, &up.model.h, Some(&up.report.perm), &split, &cell)?;
            cells.push(SweepCell {
                seed,
                regime,
                m,
                d_star: r.d_star,
                excess_risk: r.excess.mean,
                excess_se: r.excess.std_err,
                test_loss: r.test.loss,
                f_t_support_exact: r.f_t_support_exact,
            });
        }
    }
    Ok(cells)
}

fn collect_sweep(cfg: &ExperimentConfig, per_seed: Vec<Result<(UpstreamReport, Vec<SweepCell>)>>) -> Result<SweepReport> {
    let mut cells = Vec::new();
    let mut upstream = Vec::new();
    for r in per_seed {
        let (u, c) = r?;
        upstream.push(u);
        cells.extend(c);
    }
    let (table, slopes) = summarize_sweep(&cells, &cfg.regimes, &cfg.m_values);
    Ok(SweepReport {
        cells,
        table,
        slopes,
        upstream,
    })
}

/// Write `sweep_cells.csv`, `sweep_table.csv` and `sweep_summary.json`.
pub fn write_sweep(dir: &Path, report: &SweepReport, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows_csv(&dir.join("sweep_cells.csv"), &report.cells)?;
    write_rows_csv(&dir.join("sweep_table.csv"), &report.table)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a ExperimentConfig,
        slopes: &'a [RegimeSlope],
        table: &'a [SweepPoint],
        upstream: &'a [UpstreamReport],
    }
    write_json(
        &dir.join("sweep_summary.json"),
        &Summary {
            config: cfg,
            slopes: &report.slopes,
            table: &report.table,
            upstream: &report.upstream,
        },
    )
}
