mod classify;
mod output;
mod posterior;
mod rbm;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::Value;

use distilkit::config::parse_config;
use distilkit::Error;

#[derive(Parser)]
#[command(
    name = "distilkit",
    version,
    about = "Distillation experiments: compression, posterior and RBM distillation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run description (TOML, or JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a bootstrap ensemble of classifiers on MNIST.
    TrainEnsemble,
    /// Train a NADE on binarised MNIST.
    TrainNade,
    /// Compress an ensemble into a single student network.
    Compress,
    /// Accuracy and mean log-probability on the MNIST test set.
    EvalClassifier,
    /// Distil a Bayesian mixture-model posterior into a mixture of Gaussians.
    DistillMog {
        #[arg(long, value_enum)]
        mode: Option<posterior::MogMode>,
        #[arg(long)]
        n_data: Option<usize>,
    },
    /// Distil a Bayesian logistic-regression posterior into compact models.
    DistillLogreg,
    /// Distil an RBM into a NADE.
    DistillRbm,
    /// Estimate an RBM's log partition function with a student proposal.
    EstimateLogz {
        /// Comma-separated estimator names, or `all`.
        #[arg(long)]
        method: Option<String>,
    },
}

/// Loads the config (or `{}`), applies `--seed`, and deserialises with
/// defaults filled in.
pub fn load<T: DeserializeOwned>(
    common: &Common,
    patch: impl FnOnce(&mut serde_json::Map<String, Value>),
) -> anyhow::Result<T> {
    let mut v: Value = match &common.config {
        Some(p) => load_value(p)?,
        None => Value::Object(Default::default()),
    };
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a table".into()))?;
    if let Some(s) = common.seed {
        obj.insert("seed".into(), s.into());
    }
    if !obj.contains_key("seed") {
        return Err(Error::Config("no seed: set `seed` in the config or pass --seed".into()).into());
    }
    patch(obj);
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()).into())
}

fn load_value(path: &Path) -> anyhow::Result<Value> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()).into());
    }
    Ok(parse_config(&std::fs::read_to_string(path)?)?)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Numerical(_) | Error::NonFinite(_) => 3,
                Error::MissingInput(_) => 4,
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 4,
                Error::Io(_) => 1,
                _ => 2,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound {
                4
            } else {
                1
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let c = &cli.common;
    match cli.cmd {
        Cmd::TrainEnsemble => classify::train_ensemble(c),
        Cmd::TrainNade => classify::train_nade(c),
        Cmd::Compress => classify::compress(c),
        Cmd::EvalClassifier => classify::eval_classifier(c),
        Cmd::DistillMog { mode, n_data } => posterior::distill_mog(c, mode, n_data),
        Cmd::DistillLogreg => posterior::distill_logreg(c),
        Cmd::DistillRbm => rbm::distill_rbm(c),
        Cmd::EstimateLogz { method } => rbm::estimate_logz(c, method),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
