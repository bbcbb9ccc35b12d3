//! Command-line front end. Every experiment is file-based: a TOML config
//! describes the run, and the subcommands write parameter files, CSV series,
//! and a manifest that reproduces the run bit-exactly.
//!
//! Exit codes: 0 on success, 2 for usage or configuration problems, 1 for
//! runtime failures; every failure prints a one-line diagnostic.

use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attack;
use crate::config::RunConfig;
use crate::data::{self, Batch, Dataset};
use crate::derive_seed;
use crate::diagnostics::{self, SmoothnessRow};
use crate::hessian;
use crate::network::NetworkSpec;
use crate::params_io;
use crate::trainer::{self, TrainResult};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sat",
    version,
    about = "Curriculum-smoothed adversarial training for small feed-forward classifiers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write the run artifacts.
    Train {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Report clean accuracy, adversarial accuracy, and their sum for a
    /// saved model.
    Eval {
        /// Run config (TOML); supplies the dataset and evaluation attack.
        #[arg(long)]
        config: PathBuf,
        /// Saved parameter file.
        #[arg(long)]
        params: PathBuf,
        /// Dataset split to evaluate: test or train.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write a filter-normalized loss-landscape slice around a saved model.
    Landscape {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Output CSV (default: <output_dir>/landscape.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-sample curvature estimates at adversarial points.
    ProbeHessian {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// How many test samples to probe.
        #[arg(long, default_value_t = 128)]
        n_samples: usize,
        /// Output CSV (default: <output_dir>/hessian_probe.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as IDX file pairs.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: the config's output_dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Which exit code a failure maps to.
enum Stage {
    Config,
    Runtime,
}

struct CmdError {
    stage: Stage,
    err: Error,
}

type CmdResult<T> = std::result::Result<T, CmdError>;

trait StageExt<T> {
    fn config_stage(self) -> CmdResult<T>;
    fn runtime_stage(self) -> CmdResult<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn config_stage(self) -> CmdResult<T> {
        self.map_err(|err| CmdError { stage: Stage::Config, err })
    }

    fn runtime_stage(self) -> CmdResult<T> {
        self.map_err(|err| CmdError { stage: Stage::Runtime, err })
    }
}

/// Runs the CLI against an argument list and returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.cmd {
        Command::Train { config } => cmd_train(&config),
        Command::Eval { config, params, split } => cmd_eval(&config, &params, &split),
        Command::Landscape { config, params, out } => cmd_landscape(&config, &params, out),
        Command::ProbeHessian { config, params, n_samples, out } => {
            cmd_probe(&config, &params, n_samples, out)
        }
        Command::GenData { config, out_dir } => cmd_gen_data(&config, out_dir),
    };
    match outcome {
        Ok(()) => 0,
        Err(CmdError { stage: Stage::Config, err }) => {
            eprintln!("config error: {err}");
            2
        }
        Err(CmdError { stage: Stage::Runtime, err }) => {
            eprintln!("error: {err}");
            1
        }
    }
}

/// Everything needed to replay a run: crate version plus the full config.
#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    config: &'a RunConfig,
}

fn create_output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("creating {}: {e}", dir.display()))))
}

fn cmd_train(config_path: &Path) -> CmdResult<()> {
    let cfg = RunConfig::from_path(config_path).config_stage()?;
    let tc = cfg.to_train_config().config_stage()?;
    let (train_set, test_set) = cfg.load_datasets().runtime_stage()?;
    create_output_dir(&cfg.output_dir).runtime_stage()?;

    let result = trainer::train(&tc, &train_set, &test_set).runtime_stage()?;
    write_train_artifacts(&cfg, &result, &test_set).runtime_stage()?;

    let last = result.history.rows.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final test clean {} adv {}; best epoch {} (test adv {})",
        cfg.epochs,
        last.test_clean_acc,
        last.test_adv_acc,
        result.best_epoch,
        result.history.rows[result.best_epoch].test_adv_acc
    );
    Ok(())
}

fn write_train_artifacts(cfg: &RunConfig, result: &TrainResult, test_set: &Dataset) -> Result<()> {
    let dir = &cfg.output_dir;
    let layers = &cfg.network.layer_sizes;

    let final_path = dir.join("params_final.satparam");
    params_io::save_params(&final_path, layers, &result.final_params)?;
    let best_path = dir.join("params_best.satparam");
    params_io::save_params(&best_path, layers, &result.best_params)?;

    let history_path = dir.join("history.csv");
    result.history.write_csv(File::create(&history_path)?)?;

    let manifest_path = dir.join("manifest.toml");
    let manifest = Manifest { version: env!("CARGO_PKG_VERSION"), config: cfg };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidConfig(format!("serializing manifest: {e}")))?;
    std::fs::write(&manifest_path, text)?;
    for p in [&final_path, &best_path, &history_path, &manifest_path] {
        println!("wrote {}", p.display());
    }

    let smooth_rows: Vec<SmoothnessRow> = result
        .history
        .rows
        .iter()
        .filter_map(|r| {
            r.smoothness.map(|s| SmoothnessRow {
                epoch: r.epoch,
                max_eig: s.max_eig,
                trace: s.trace,
                grad_norm: s.grad_norm,
            })
        })
        .collect();
    if !smooth_rows.is_empty() {
        let path = dir.join("smoothness.csv");
        diagnostics::write_smoothness_csv(File::create(&path)?, &smooth_rows)?;
        println!("wrote {}", path.display());
    }

    if let Some(l) = &cfg.landscape {
        let sample = test_set.seeded_subset(
            l.n_samples.min(test_set.len()),
            derive_seed(cfg.seed, "landscape/sample"),
        )?;
        let attack_cfg = l
            .attack
            .clone()
            .or_else(|| cfg.eval_attack.clone())
            .unwrap_or_else(|| cfg.attack.clone());
        let grid = diagnostics::landscape_slice(
            &result.final_params,
            &cfg.network_spec(),
            &sample,
            &attack_cfg,
            &l.grid,
            derive_seed(cfg.seed, "landscape"),
        )?;
        let path = dir.join("landscape.csv");
        diagnostics::write_landscape_csv(File::create(&path)?, &grid)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Loads a parameter file and checks it against the dataset dimension.
fn load_model(params_path: &Path, dataset: &Dataset) -> Result<(NetworkSpec, crate::network::ParamVector)> {
    let (layers, params) = params_io::load_params(params_path)?;
    let spec = NetworkSpec::new(layers, 0);
    if spec.input_dim() != dataset.dim {
        return Err(Error::ShapeMismatch(format!(
            "model expects inputs of dim {}, dataset has {}",
            spec.input_dim(),
            dataset.dim
        )));
    }
    Ok((spec, params))
}

fn pick_split<'a>(train: &'a Dataset, test: &'a Dataset, split: &str) -> Result<&'a Dataset> {
    match split {
        "test" => Ok(test),
        "train" => Ok(train),
        other => Err(Error::InvalidConfig(format!(
            "unknown split {other:?} (expected \"test\" or \"train\")"
        ))),
    }
}

fn cmd_eval(config_path: &Path, params_path: &Path, split: &str) -> CmdResult<()> {
    let cfg = RunConfig::from_path(config_path).config_stage()?;
    let (train_set, test_set) = cfg.load_datasets().runtime_stage()?;
    let ds = pick_split(&train_set, &test_set, split).config_stage()?;
    let (spec, params) = load_model(params_path, ds).runtime_stage()?;
    let attack_cfg = cfg.eval_attack.clone().unwrap_or_else(|| cfg.attack.clone());
    let report = trainer::evaluate(&params, &spec, ds, &attack_cfg, derive_seed(cfg.seed, "cli_eval"))
        .runtime_stage()?;
    println!(
        "clean_acc={} adv_acc={} sum={}",
        report.clean_acc, report.adv_acc, report.sum
    );
    Ok(())
}

fn cmd_landscape(config_path: &Path, params_path: &Path, out: Option<PathBuf>) -> CmdResult<()> {
    let cfg = RunConfig::from_path(config_path).config_stage()?;
    let (_, test_set) = cfg.load_datasets().runtime_stage()?;
    let (spec, params) = load_model(params_path, &test_set).runtime_stage()?;

    let section = cfg.landscape.clone().unwrap_or_default();
    let sample = test_set
        .seeded_subset(
            section.n_samples.min(test_set.len()),
            derive_seed(cfg.seed, "landscape/sample"),
        )
        .runtime_stage()?;
    let attack_cfg = section
        .attack
        .clone()
        .or_else(|| cfg.eval_attack.clone())
        .unwrap_or_else(|| cfg.attack.clone());
    let grid = diagnostics::landscape_slice(
        &params,
        &spec,
        &sample,
        &attack_cfg,
        &section.grid,
        derive_seed(cfg.seed, "landscape"),
    )
    .runtime_stage()?;

    let path = out.unwrap_or_else(|| cfg.output_dir.join("landscape.csv"));
    if let Some(parent) = path.parent() {
        create_output_dir(parent).runtime_stage()?;
    }
    (|| -> Result<()> {
        diagnostics::write_landscape_csv(File::create(&path)?, &grid)?;
        Ok(())
    })()
    .runtime_stage()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_probe(
    config_path: &Path,
    params_path: &Path,
    n_samples: usize,
    out: Option<PathBuf>,
) -> CmdResult<()> {
    let cfg = RunConfig::from_path(config_path).config_stage()?;
    if n_samples < 1 {
        return Err(Error::InvalidConfig("n_samples must be >= 1".into())).config_stage();
    }
    let (_, test_set) = cfg.load_datasets().runtime_stage()?;
    let (spec, params) = load_model(params_path, &test_set).runtime_stage()?;

    let probe = cfg.curriculum.probe.clone().unwrap_or_default();
    let attack_cfg = cfg.eval_attack.clone().unwrap_or_else(|| cfg.attack.clone());
    let subset = test_set
        .seeded_subset(n_samples.min(test_set.len()), derive_seed(cfg.seed, "probe/sample"))
        .runtime_stage()?;

    (|| -> Result<()> {
        let batch = Batch {
            inputs: subset.inputs.clone(),
            labels: subset.labels.clone(),
            indices: (0..subset.len()).collect(),
            dim: subset.dim,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "probe/attack"));
        let adv = attack::pgd(&params, &spec, &batch, &attack_cfg, &mut rng)?;

        let path = out.unwrap_or_else(|| cfg.output_dir.join("hessian_probe.csv"));
        if let Some(parent) = path.parent() {
            create_output_dir(parent)?;
        }
        let mut w = csv::Writer::from_writer(File::create(&path)?);
        w.write_record(["sample_id", "power_value", "lower", "upper", "rayleigh", "grad_norm"])?;
        let d = subset.dim;
        for i in 0..subset.len() {
            let x = &adv.x_adv[i * d..(i + 1) * d];
            let y = &adv.labels[i..=i];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("probe/power/{i}")));
            let top = hessian::top_eigenvalue(&params, &spec, x, y, &probe, &mut rng)?;
            let tay = hessian::taylor_estimates(&params, &spec, x, y, &probe)?;
            w.write_record([
                i.to_string(),
                top.power_value.to_string(),
                tay.lower.to_string(),
                tay.upper.to_string(),
                tay.rayleigh.to_string(),
                tay.grad_norm.to_string(),
            ])?;
        }
        w.flush()?;
        println!("wrote {}", path.display());
        Ok(())
    })()
    .runtime_stage()
}

fn cmd_gen_data(config_path: &Path, out_dir: Option<PathBuf>) -> CmdResult<()> {
    let cfg = RunConfig::from_path(config_path).config_stage()?;
    if cfg.data.synthetic.is_none() {
        return Err(Error::InvalidConfig(
            "gen-data needs a [data.synthetic] section".into(),
        ))
        .config_stage();
    }
    let (train_set, test_set) = cfg.load_datasets().runtime_stage()?;
    let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
    create_output_dir(&dir).runtime_stage()?;
    (|| -> Result<()> {
        for (name, ds) in [("train", &train_set), ("test", &test_set)] {
            let images = dir.join(format!("{name}-images.idx"));
            let labels = dir.join(format!("{name}-labels.idx"));
            data::write_idx(&images, &labels, ds)?;
            println!("wrote {} and {}", images.display(), labels.display());
        }
        Ok(())
    })()
    .runtime_stage()
}
