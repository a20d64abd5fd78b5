//! Ground-truth scenarios with known representation, heads, auxiliary
//! function and transfer regime.
//!
//! Inputs are `x ~ U[0,1]^d`. The true representation selects `r`
//! coordinates (optionally warped), so with identity warps `h*(x)` is exactly
//! uniform on `[0,1]^r`. The auxiliary map `A*` only reads coordinates the
//! selector ignores, which makes `q*(A* x)` independent of `h*(x)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{Layer, NormNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `q* = 0`: the representation carries everything.
    #[default]
    Complete,
    /// Both the transferred head and the auxiliary function are active.
    Partial,
    /// `F_T* = 0`: the representation is irrelevant downstream.
    None,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Complete, Regime::Partial, Regime::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Complete => "complete",
            Regime::Partial => "partial",
            Regime::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

/// Strictly increasing smooth bijection of `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warp {
    #[default]
    Identity,
    /// `u^gamma`, `gamma > 0`.
    Power { gamma: f64 },
    /// `(exp(rate u) - 1) / (exp(rate) - 1)`, `rate != 0`.
    Exp { rate: f64 },
}

impl Warp {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Warp::Identity => u,
            Warp::Power { gamma } => u.powf(gamma),
            Warp::Exp { rate } => (rate * u).exp_m1() / rate.exp_m1(),
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Warp::Power { gamma } if !(gamma > 0.0) => Err(Error::Config(format!("power warp needs gamma > 0, got {gamma}"))),
            Warp::Exp { rate } if rate == 0.0 || !rate.is_finite() => {
                Err(Error::Config(format!("exp warp needs a nonzero finite rate, got {rate}")))
            }
            _ => Ok(()),
        }
    }
}

/// `q*(u) = sin_amplitude * sin(2π u_0) + quad_coefficient * u_1²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxFunction {
    pub sin_amplitude: f64,
    pub quad_coefficient: f64,
}

impl Default for AuxFunction {
    fn default() -> Self {
        AuxFunction {
            sin_amplitude: 1.0,
            quad_coefficient: 0.5,
        }
    }
}

impl AuxFunction {
    pub fn eval(&self, u: &[f64]) -> f64 {
        let mut v = self.sin_amplitude * (std::f64::consts::TAU * u[0]).sin();
        if u.len() > 1 {
            v += self.quad_coefficient * u[1] * u[1];
        }
        v
    }
}

/// Scenario description as it appears in configuration files. Every constant
/// here is an artifact choice; nothing is implied by theory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub d: usize,
    pub r: usize,
    pub p: usize,
    pub d_star: usize,
    /// Input coordinates read by the true representation (length `r`).
    pub selection: Vec<usize>,
    /// Per-coordinate warps; empty means identity everywhere.
    pub warps: Vec<Warp>,
    /// True upstream heads, `p` rows of length `r`.
    pub f_star: Vec<Vec<f64>>,
    /// True downstream head before regime masking.
    pub f_t_star: Vec<f64>,
    /// `d_star × d`; must vanish on `selection` columns.
    pub a_star: Vec<Vec<f64>>,
    pub aux: AuxFunction,
    pub noise_scale: f64,
    pub regime: Regime,
    pub task: Task,
    /// Sampling probabilities of upstream domains; empty means uniform.
    pub domain_probs: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            d: 8,
            r: 3,
            p: 3,
            d_star: 2,
            selection: vec![0, 1, 2],
            warps: Vec::new(),
            f_star: vec![vec![1.0, -0.8, 0.0], vec![0.0, 1.0, 0.9], vec![0.8, 0.0, -1.0]],
            f_t_star: vec![1.0, 0.0, -0.8],
            a_star: vec![
                vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            ],
            aux: AuxFunction::default(),
            noise_scale: 0.1,
            regime: Regime::Complete,
            task: Task::Regression,
            domain_probs: Vec::new(),
        }
    }
}

/// Validated scenario with regime semantics applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub d: usize,
    pub r: usize,
    pub p: usize,
    pub d_star: usize,
    pub selection: Vec<usize>,
    pub warps: Vec<Warp>,
    /// `p × r`.
    pub f_star: Array2<f64>,
    /// Zero in the no-transfer regime.
    pub f_t_star: Array1<f64>,
    /// `d_star × d`.
    pub a_star: Array2<f64>,
    pub aux: AuxFunction,
    /// False in the complete-transfer regime (`q* ≡ 0`).
    pub aux_active: bool,
    pub noise_scale: f64,
    pub regime: Regime,
    pub task: Task,
    pub domain_probs: Vec<f64>,
}

fn to_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Array2<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what} must be {nrows} × {ncols}")));
    }
    Ok(Array2::from_shape_fn((nrows, ncols), |(i, j)| rows[i][j]))
}

impl Scenario {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let ScenarioConfig { d, r, p, d_star, .. } = *cfg;
        if d == 0 || r == 0 || p == 0 || d_star == 0 {
            return Err(Error::Config("scenario dimensions must be positive".into()));
        }
        if d_star > d || r > d {
            return Err(Error::Config("need r <= d and d_star <= d".into()));
        }
        if cfg.selection.len() != r || cfg.selection.iter().any(|&c| c >= d) {
            return Err(Error::Config(format!("selection must list {r} coordinates below {d}")));
        }
        let mut seen = cfg.selection.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != r {
            return Err(Error::Config("selection coordinates must be distinct".into()));
        }
        let warps = if cfg.warps.is_empty() {
            vec![Warp::Identity; r]
        } else if cfg.warps.len() == r {
            cfg.warps.clone()
        } else {
            return Err(Error::Config(format!("warps must be empty or have length {r}")));
        };
        for w in &warps {
            w.validate()?;
        }
        let f_star = to_matrix(&cfg.f_star, p, r, "f_star")?;
        if cfg.f_t_star.len() != r {
            return Err(Error::Config(format!("f_t_star must have length {r}")));
        }
        let a_star = to_matrix(&cfg.a_star, d_star, d, "a_star")?;
        for &c in &cfg.selection {
            if a_star.column(c).iter().any(|&v| v != 0.0) {
                return Err(Error::Config(format!(
                    "a_star reads coordinate {c}, which the representation selects"
                )));
            }
        }
        if !(0.0..=1.0).contains(&cfg.noise_scale) {
            return Err(Error::Config("noise_scale must lie in [0, 1]".into()));
        }
        let domain_probs = if cfg.domain_probs.is_empty() {
            vec![1.0 / p as f64; p]
        } else if cfg.domain_probs.len() == p && cfg.domain_probs.iter().all(|&q| q > 0.0) {
            let s: f64 = cfg.domain_probs.iter().sum();
            cfg.domain_probs.iter().map(|q| q / s).collect()
        } else {
            return Err(Error::Config(format!("domain_probs must be {p} positive weights")));
        };
        let f_t_star = match cfg.regime {
            Regime::None => Array1::zeros(r),
            _ => Array1::from(cfg.f_t_star.clone()),
        };
        Ok(Scenario {
            d,
            r,
            p,
            d_star,
            selection: cfg.selection.clone(),
            warps,
            f_star,
            f_t_star,
            a_star,
            aux: cfg.aux,
            aux_active: cfg.regime != Regime::Complete,
            noise_scale: cfg.noise_scale,
            regime: cfg.regime,
            task: cfg.task,
            domain_probs,
        })
    }

    pub fn default_with(regime: Regime, task: Task) -> Self {
        let cfg = ScenarioConfig {
            regime,
            task,
            ..ScenarioConfig::default()
        };
        Scenario::new(&cfg).expect("default scenario is valid")
    }

    /// Support masks of the upstream heads, row by row.
    pub fn f_star_masks(&self) -> Vec<Vec<bool>> {
        self.f_star
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|&v| v != 0.0).collect())
            .collect()
    }

    pub fn f_t_star_mask(&self) -> Vec<bool> {
        self.f_t_star.iter().map(|&v| v != 0.0).collect()
    }

    /// True representation `h*(x)`, row by row.
    pub fn h_star(&self, x: ArrayView2<f64>) -> Array2<f64> {
        Array2::from_shape_fn((x.nrows(), self.r), |(i, k)| {
            self.warps[k].apply(x[[i, self.selection[k]]])
        })
    }

    /// `q*(A* x)`, identically zero when the auxiliary function is inactive.
    pub fn q_star(&self, x: ArrayView2<f64>) -> Array1<f64> {
        if !self.aux_active {
            return Array1::zeros(x.nrows());
        }
        let u = x.dot(&self.a_star.t());
        u.rows().into_iter().map(|row| self.aux.eval(row.as_slice().unwrap())).collect()
    }

    /// Downstream score `F_T* h*(x) + q*(A* x)`.
    pub fn truth_score(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.h_star(x).dot(&self.f_t_star) + self.q_star(x)
    }

    /// The true representation as a single affine layer (identity warps only).
    pub fn selector_net(&self, norm_budget: f64) -> Result<NormNet> {
        if self.warps.iter().any(|w| *w != Warp::Identity) {
            return Err(Error::Config("selector_net needs identity warps".into()));
        }
        let mut weight = Array2::zeros((self.r, self.d));
        for (k, &c) in self.selection.iter().enumerate() {
            weight[[k, c]] = 1.0;
        }
        NormNet::from_layers(
            vec![Layer {
                weight,
                bias: Array1::zeros(self.r),
                trainable_bias: true,
            }],
            norm_budget,
            None,
        )
    }

    fn sample_x<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, self.d), || rng.random::<f64>())
    }

    fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.noise_scale == 0.0 {
            0.0
        } else {
            rng.random_range(-self.noise_scale..=self.noise_scale)
        }
    }

    fn sample_domain<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, &q) in self.domain_probs.iter().enumerate() {
            acc += q;
            if u < acc {
                return s + 1;
            }
        }
        self.p
    }

    /// Upstream rows `y = F*_s h*(x) + eps` with domain labels `1..=p`.
    pub fn gen_upstream<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        if n < self.p {
            return Err(Error::InsufficientSamples { needed: self.p, got: n });
        }
        let domain: Vec<usize> = (0..n).map(|_| self.sample_domain(rng)).collect();
        let x = self.sample_x(n, rng);
        let h = self.h_star(x.view());
        let y: Array1<f64> = (0..n)
            .map(|i| {
                let s = domain[i] - 1;
                self.f_star.row(s).dot(&h.row(i)) + self.noise(rng)
            })
            .collect();
        Dataset::new(x, y, domain)
    }

    /// Downstream rows with domain label 0.
    pub fn gen_downstream<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Dataset> {
        if m == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        let x = self.sample_x(m, rng);
        let score = self.truth_score(x.view());
        let y: Array1<f64> = match self.task {
            Task::Regression => score.iter().map(|&s| s + self.noise(rng)).collect(),
            Task::Classification => score
                .iter()
                .map(|&s| if rng.random::<f64>() < sigmoid(s) { 1.0 } else { 0.0 })
                .collect(),
        };
        Dataset::new(x, y, vec![0; m])
    }
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Logistic loss `-[y log σ(s) + (1-y) log(1-σ(s))]`, computed stably.
pub fn logistic_loss(score: f64, y: f64) -> f64 {
    // log(1 + e^s) - y s
    let softplus = if score > 0.0 {
        score + (-score).exp().ln_1p()
    } else {
        score.exp().ln_1p()
    };
    softplus - y * score
}

pub fn pointwise_loss(task: Task, score: f64, y: f64) -> f64 {
    match task {
        Task::Regression => (score - y) * (score - y),
        Task::Classification => logistic_loss(score, y),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcessRisk {
    pub mean: f64,
    pub std_err: f64,
    pub n_mc: usize,
}

/// Monte Carlo estimate of `E[l(predict(X), Y)] - E[l(truth(X), Y)]` from
/// paired fresh draws, with its standard error.
pub fn oracle_excess_risk<F, R>(predict: F, sc: &Scenario, n_mc: usize, rng: &mut R) -> Result<ExcessRisk>
where
    F: Fn(ArrayView2<f64>) -> Result<Array1<f64>>,
    R: Rng + ?Sized,
{
    if n_mc < 1000 {
        return Err(Error::InsufficientSamples {
            needed: 1000,
            got: n_mc,
        });
    }
    let data = sc.gen_downstream(n_mc, rng)?;
    let pred = predict(data.x.view())?;
    if pred.len() != n_mc {
        return Err(Error::shape("predictor returned the wrong number of scores"));
    }
    let truth = sc.truth_score(data.x.view());
    let diffs: Array1<f64> = (0..n_mc)
        .map(|i| pointwise_loss(sc.task, pred[i], data.y[i]) - pointwise_loss(sc.task, truth[i], data.y[i]))
        .collect();
    let mean = diffs.mean().unwrap();
    let var = diffs.var_axis(Axis(0), 1.0).into_scalar();
    Ok(ExcessRisk {
        mean,
        std_err: (var / n_mc as f64).sqrt(),
        n_mc,
    })
}
