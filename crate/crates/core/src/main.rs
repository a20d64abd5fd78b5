use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deep_transfer::config::{BaselineToggles, ExperimentConfig};
use deep_transfer::experiment::{
    self, cell_seed, evaluate_model, fit_method, loss_for, run_upstream, run_upstream_on, write_json, CellSettings,
    Method, Split,
};
use deep_transfer::io::{read_dataset, write_dataset, SavedModel};
use deep_transfer::par::Exec;
use deep_transfer::seeds::derive_named;
use deep_transfer::synthetic::{oracle_excess_risk, Scenario};
use deep_transfer::{downstream, Error, Result};

#[derive(Parser)]
#[command(name = "deep-transfer", version, about = "Invariant representation transfer on synthetic multi-domain data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file. Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed, replacing the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, replacing `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set upstream.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run seeds one after another even when built with `parallel`.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Upstream,
    Downstream,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset as CSV.
    Gen {
        #[arg(long, value_enum, default_value = "upstream")]
        kind: Kind,
        /// Row count; defaults to `n` (upstream) or `m` (downstream).
        #[arg(long)]
        rows: Option<usize>,
    },
    /// Train the upstream representation and heads.
    TrainUp {
        /// Upstream CSV; generated from the scenario when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a downstream model on top of a saved upstream model.
    Finetune {
        /// Saved upstream model.
        #[arg(long)]
        model: PathBuf,
        /// Downstream CSV; generated from the scenario when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ours")]
        method: MethodArg,
    },
    /// Evaluate a saved downstream model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Labelled CSV; a fresh generator draw of `n_test` rows when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the full method with every baseline on shared splits.
    Baselines,
    /// Run the configured experiment (baselines as toggled).
    Run,
    /// Sweep the downstream sample size and fit log-log slopes.
    Sweep,
    /// Print the resolved configuration.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ours,
    Wi,
    Tir,
    ErmD,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Ours => Method::Ours,
            MethodArg::Wi => Method::Wi,
            MethodArg::Tir => Method::Tir,
            MethodArg::ErmD => Method::ErmD,
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seeds=[{seed}]"));
    }
    if let Some(out) = &common.out {
        let mut table = toml::Table::new();
        table.insert("out_dir".into(), toml::Value::String(out.display().to_string()));
        overrides.push(table.to_string().trim().to_string());
    }
    ExperimentConfig::load(common.config.as_deref(), &overrides)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    Ok(cfg.out_dir.join(name))
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let exec = if cli.common.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let seed = cfg.seeds[0];
    let sc = Scenario::new(&cfg.scenario).map_err(|e| e.at_stage("generate"))?;
    match cli.cmd {
        Cmd::Config => print!("{}", cfg.to_toml_string()?),
        Cmd::Gen { kind, rows } => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_named(seed, "gen"));
            let gen = |e: Error| e.at_stage("generate");
            let (data, name) = match kind {
                Kind::Upstream => (sc.gen_upstream(rows.unwrap_or(cfg.n), &mut rng).map_err(gen)?, "upstream.csv"),
                Kind::Downstream => (
                    sc.gen_downstream(rows.unwrap_or(cfg.m), &mut rng).map_err(gen)?,
                    "downstream.csv",
                ),
            };
            let path = out_path(&cfg, name)?;
            write_dataset(&path, &data).map_err(|e| e.at_stage("write"))?;
            announce(&path);
        }
        Cmd::TrainUp { data } => {
            let outcome = match data {
                Some(p) => {
                    let d = read_dataset(&p).map_err(|e| e.at_stage("generate"))?;
                    run_upstream_on(&sc, &cfg.upstream, &d, cfg.n_diag, cfg.support_threshold, seed)?
                }
                None => run_upstream(&sc, &cfg.upstream, cfg.n, cfg.n_diag, cfg.support_threshold, seed)?,
            };
            let model_path = out_path(&cfg, "upstream_model.json")?;
            SavedModel::Upstream(outcome.model)
                .save(&model_path)
                .map_err(|e| e.at_stage("write"))?;
            let report_path = out_path(&cfg, "upstream_report.json")?;
            write_json(&report_path, &outcome.report).map_err(|e| e.at_stage("write"))?;
            let r = &outcome.report;
            println!(
                "support exact: {}  dcov {:.4} -> {:.4}  W1 {:.4} -> {:.4}",
                r.support.exact, r.dcov_init, r.dcov_trained, r.w1_init, r.w1_trained
            );
            announce(&model_path);
            announce(&report_path);
        }
        Cmd::Finetune { model, data, method } => {
            let up = SavedModel::load(&model)
                .and_then(SavedModel::into_upstream)
                .map_err(|e| e.at_stage("finetune"))?;
            let cseed = cell_seed(seed, sc.regime, cfg.m);
            let split = match data {
                Some(p) => {
                    let d = read_dataset(&p).map_err(|e| e.at_stage("generate"))?;
                    Split::from_data(&sc, &d, cfg.n_test, cfg.val_fraction, derive_named(cseed, "test"))
                }
                None => Split::generate(&sc, cfg.m, cfg.n_test, cfg.val_fraction, derive_named(cseed, "data")),
            }
            .map_err(|e| e.at_stage("generate"))?;
            let cell = CellSettings {
                scenario: &sc,
                finetune: &cfg.finetune,
                select: cfg.select_dstar,
                n_mc: cfg.n_mc,
                threshold: cfg.support_threshold,
                seed: cseed,
            };
            let method = Method::from(method);
            let (fitted, history, ft) = fit_method(method, &up.h, &split, &cell)?;
            let result = evaluate_model(method, &fitted, &history, None, &split, &cell, ft.loss)?;
            let model_path = out_path(&cfg, "downstream_model.json")?;
            SavedModel::Downstream(fitted)
                .save(&model_path)
                .map_err(|e| e.at_stage("write"))?;
            let report_path = out_path(&cfg, "finetune_report.json")?;
            write_json(&report_path, &result).map_err(|e| e.at_stage("write"))?;
            println!(
                "d* = {}  test loss {:.5}  excess risk {:.5} ± {:.5}",
                result.d_star, result.test.loss, result.excess.mean, result.excess.std_err
            );
            announce(&model_path);
            announce(&report_path);
        }
        Cmd::Eval { model, data } => {
            let m = SavedModel::load(&model)
                .and_then(SavedModel::into_downstream)
                .map_err(|e| e.at_stage("evaluate"))?;
            let data = match data {
                Some(p) => read_dataset(&p).map_err(|e| e.at_stage("generate"))?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_named(seed, "eval"));
                    sc.gen_downstream(cfg.n_test, &mut rng).map_err(|e| e.at_stage("generate"))?
                }
            };
            let loss = loss_for(sc.task);
            let ev = |e: Error| e.at_stage("evaluate");
            let metrics = downstream::evaluate(&m, &data, loss).map_err(ev)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_named(seed, "excess"));
            let excess = oracle_excess_risk(|x| downstream::predict(&m, x), &sc, cfg.n_mc, &mut rng).map_err(ev)?;
            let report = serde_json::json!({ "metrics": metrics, "excess_risk": excess });
            let path = out_path(&cfg, "eval.json")?;
            write_json(&path, &report).map_err(|e| e.at_stage("write"))?;
            println!("loss {:.5}  excess risk {:.5} ± {:.5}", metrics.loss, excess.mean, excess.std_err);
            announce(&path);
        }
        Cmd::Baselines | Cmd::Run => {
            let mut cfg = cfg;
            if matches!(cli.cmd, Cmd::Baselines) {
                cfg.baselines = BaselineToggles::default();
            }
            let out = experiment::run_experiment(&cfg, exec)?;
            for rec in &out.records {
                for row in rec.rows() {
                    println!(
                        "seed {:>3}  {:<8}  {:<7}  d*={}  test {:.5}  excess {:.5}",
                        row.seed,
                        row.regime.as_str(),
                        row.method.as_str(),
                        row.d_star,
                        row.test_loss,
                        row.excess_risk
                    );
                }
            }
            announce(&out.metrics_csv);
            announce(&out.summary_json);
        }
        Cmd::Sweep => {
            let report = experiment::sweep_m(&cfg, exec)?;
            experiment::write_sweep(&cfg.out_dir, &report, &cfg).map_err(|e| e.at_stage("write"))?;
            for s in &report.slopes {
                match s.fit {
                    Some(f) => println!("{:<8} slope {:+.3} ± {:.3}", s.regime.as_str(), f.slope, f.slope_se),
                    None => println!("{:<8} no fit: {}", s.regime.as_str(), s.note.as_deref().unwrap_or("")),
                }
            }
            announce(&cfg.out_dir.join("sweep_summary.json"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e.stage().unwrap_or("config");
            eprintln!("error [{stage}]: {e}");
            ExitCode::FAILURE
        }
    }
}
