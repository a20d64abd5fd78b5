//! Experiment configuration: one TOML document, unknown keys rejected.
//!
//! Values are resolved in the order defaults < file < command-line
//! overrides. Overrides use dotted paths (`upstream.epochs=50`) and are
//! applied to the parsed document before it is deserialized, so they obey
//! the same schema checks as the file itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::downstream::FineTuneConfig;
use crate::error::{Error, Result};
use crate::synthetic::{Regime, ScenarioConfig};
use crate::upstream::UpstreamTrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineToggles {
    /// Fine-tune without the independence penalty.
    pub wi: bool,
    /// Linear head on the transferred representation only.
    pub tir: bool,
    /// Downstream-only training of the auxiliary network, no transfer.
    pub erm_d: bool,
    /// Upstream representation trained without invariance penalties.
    pub erm_ud: bool,
}

impl Default for BaselineToggles {
    fn default() -> Self {
        BaselineToggles {
            wi: true,
            tir: true,
            erm_d: true,
            erm_ud: true,
        }
    }
}

impl BaselineToggles {
    pub fn none() -> Self {
        BaselineToggles {
            wi: false,
            tir: false,
            erm_d: false,
            erm_ud: false,
        }
    }

    pub fn any(&self) -> bool {
        self.wi || self.tir || self.erm_d || self.erm_ud
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub upstream: UpstreamTrainConfig,
    pub finetune: FineTuneConfig,
    pub baselines: BaselineToggles,
    /// Upstream sample size.
    pub n: usize,
    /// Downstream sample size for single runs.
    pub m: usize,
    /// Downstream sizes for sweeps.
    pub m_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    /// Fraction of the downstream sample used for validation.
    pub val_fraction: f64,
    /// Size of the fresh test draw.
    pub n_test: usize,
    /// Monte Carlo draws for excess-risk estimates.
    pub n_mc: usize,
    /// Held-out upstream rows for invariance diagnostics.
    pub n_diag: usize,
    /// Pick d* on the validation split instead of using `finetune.d_star`.
    pub select_dstar: bool,
    /// Threshold for support recovery reports.
    pub support_threshold: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: ScenarioConfig::default(),
            upstream: UpstreamTrainConfig::default(),
            finetune: FineTuneConfig::default(),
            baselines: BaselineToggles::default(),
            n: 4000,
            m: 200,
            m_values: vec![64, 128, 256, 512, 1024, 2048],
            seeds: vec![0],
            regimes: Regime::ALL.to_vec(),
            val_fraction: 0.2,
            n_test: 2000,
            n_mc: 4000,
            n_diag: 512,
            select_dstar: true,
            support_threshold: 0.05,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        crate::synthetic::Scenario::new(&self.scenario)?;
        self.upstream.validate()?;
        self.finetune.validate()?;
        if self.finetune.d_star > self.scenario.d {
            return Err(Error::Config(format!(
                "finetune.d_star {} exceeds scenario.d {}",
                self.finetune.d_star, self.scenario.d
            )));
        }
        if self.upstream.rep_dim != self.scenario.r {
            return Err(Error::Config(format!(
                "upstream.rep_dim {} must equal scenario.r {}",
                self.upstream.rep_dim, self.scenario.r
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.regimes.is_empty() {
            return Err(Error::Config("regimes must not be empty".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie strictly between 0 and 1".into()));
        }
        if self.n_mc < 1000 {
            return Err(Error::Config("n_mc must be at least 1000".into()));
        }
        if self.n_test == 0 || self.n_diag < 4 {
            return Err(Error::Config("n_test must be positive and n_diag at least 4".into()));
        }
        if !(self.support_threshold > 0.0) {
            return Err(Error::Config("support_threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path` (or start from defaults when `None`) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Apply `a.b.c=value` to a TOML table. The value is parsed as a TOML
/// literal when possible and taken as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{item}` has an empty key")));
    }
    let value = parse_value(raw.trim());
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{item}`: `{key}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
