//! RBM → NADE distillation and log-partition-function estimation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use distilkit::dataio::{binarize, data_dir, load_mnist, raster_columnwise, BinarizeMode, Split};
use distilkit::density::{DensityModel, TabulatedBinary};
use distilkit::gendistill::{distill_rbm as run_distill, exact_kl, GenDistillConfig, GenLoss, RbmDistillConfig};
use distilkit::nade::NadeModel;
use distilkit::optim::{TrainConfig, UpdateRule};
use distilkit::partition::{estimate_all, write_estimates_jsonl, BridgeConfig, LogZMethod, PartitionConfig};
use distilkit::rbm::{RbmModel, MAX_ENUM_BITS};
use distilkit::rng::{child_seed, stream};
use distilkit::Error;

use crate::output::{num, Run};
use crate::{load, Common};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RbmSource {
    /// Native binary model file.
    File { path: PathBuf },
    /// Whitespace-separated W (row-major), a, b.
    Text { path: PathBuf, n_vis: usize, n_hid: usize },
    Random {
        n_vis: usize,
        n_hid: usize,
        #[serde(default = "one")]
        w_scale: f64,
        #[serde(default = "half")]
        bias_scale: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}

impl RbmSource {
    fn load(&self, seed: u64) -> anyhow::Result<RbmModel> {
        Ok(match self {
            RbmSource::File { path } => RbmModel::load(path)?,
            RbmSource::Text { path, n_vis, n_hid } => {
                if !path.exists() {
                    return Err(Error::MissingInput(path.clone()).into());
                }
                RbmModel::import_text(&std::fs::read_to_string(path)?, *n_vis, *n_hid)?
            }
            RbmSource::Random {
                n_vis,
                n_hid,
                w_scale,
                bias_scale,
            } => RbmModel::random(*n_vis, *n_hid, *w_scale, *bias_scale, &mut stream(seed, 100)),
        })
    }
}

/// Training loss; the square-error constant defaults to the hill-climbed
/// maximum of log p̃.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LossSpec {
    Kl,
    SquareError {
        #[serde(default)]
        c: Option<f64>,
    },
    ScoreMatching,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistillRbmRun {
    rbm: RbmSource,
    #[serde(default = "default_hidden")]
    nade_hidden: usize,
    #[serde(default = "default_loss")]
    loss: LossSpec,
    #[serde(default = "default_train")]
    train: TrainConfig,
    #[serde(default)]
    rule: UpdateRule,
    #[serde(default = "default_chains")]
    n_chains: usize,
    #[serde(default = "default_burn_in")]
    burn_in: usize,
    #[serde(default = "default_restarts")]
    hill_restarts: usize,
    /// First stochastically binarised MNIST test images used for the
    /// log-probability trace (784-pixel RBMs only); 0 disables it.
    #[serde(default = "default_heldout")]
    heldout: usize,
    seed: u64,
}

fn default_hidden() -> usize {
    500
}
fn default_loss() -> LossSpec {
    LossSpec::Kl
}
fn default_train() -> TrainConfig {
    TrainConfig::new(30_000, 20)
}
fn default_chains() -> usize {
    2000
}
fn default_burn_in() -> usize {
    2000
}
fn default_restarts() -> usize {
    100
}
fn default_heldout() -> usize {
    500
}

pub fn distill_rbm(c: &Common) -> anyhow::Result<()> {
    let cfg: DistillRbmRun = load(c, |_| {})?;
    let mut run = Run::start(&c.out, "distill-rbm", &cfg, cfg.seed)?;
    let rbm = cfg.rbm.load(cfg.seed)?;
    if matches!(cfg.rbm, RbmSource::Random { .. } | RbmSource::Text { .. }) {
        rbm.save(&run.path("rbm.bin"))?;
    }
    let mut rng = stream(cfg.seed, 0);
    let (_, max_lp) = rbm.hill_climb_max(cfg.hill_restarts, &mut rng);
    let loss = match cfg.loss {
        LossSpec::Kl => GenLoss::Kl,
        LossSpec::ScoreMatching => GenLoss::ScoreMatching,
        LossSpec::SquareError { c } => {
            let g = GenLoss::SquareError { c: c.unwrap_or(max_lp) };
            g.validate(Some(max_lp))?;
            g
        }
    };
    if let GenLoss::SquareError { c } = loss {
        println!("square-error constant c = {c:.4} (log p~ lower bound {max_lp:.4})");
    }
    let mut nade = NadeModel::random(rbm.n_vis, cfg.nade_hidden, &mut rng)?;
    if rbm.n_vis == 784 {
        nade = nade.with_ordering(raster_columnwise(28, 28))?;
    }
    let heldout: Vec<Vec<f64>> = if cfg.heldout > 0 && rbm.n_vis == 784 {
        let test = load_mnist(&data_dir(), Split::Test)?;
        let test = binarize(
            &test.head(cfg.heldout.min(test.n)),
            BinarizeMode::Stochastic(child_seed(&mut rng)),
        );
        (0..test.n).map(|i| test.image(i).to_vec()).collect()
    } else {
        Vec::new()
    };
    let dc = RbmDistillConfig {
        distill: GenDistillConfig {
            loss,
            train: cfg.train.clone(),
            rule: cfg.rule,
        },
        n_chains: cfg.n_chains,
        burn_in: cfg.burn_in,
        seed: child_seed(&mut rng),
    };
    let probe = (!heldout.is_empty()).then_some(|m: &NadeModel| m.mean_log_prob(&heldout));
    let report = run_distill(&rbm, &mut nade, &dc, probe)?;
    nade.save(&run.path("nade.bin"))?;
    run.trace("distill_trace.csv", &report.trace)?;
    let mut summary = vec![vec!["iterations".to_string(), report.iterations_run.to_string()]];
    if rbm.n_vis <= MAX_ENUM_BITS {
        let kl = exact_kl(&rbm, &nade)?;
        println!("KL(teacher || student) = {kl:.6} nats");
        summary.push(vec!["exact_kl".into(), num(kl)]);
    }
    if !heldout.is_empty() {
        let lp = nade.mean_log_prob(&heldout)?;
        println!("held-out mean log prob {lp:.3}");
        summary.push(vec!["heldout_mean_log_prob".into(), num(lp)]);
    }
    run.csv("distill_summary.csv", &["quantity", "value"], &summary)?;
    run.finish()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum StudentSource {
    Nade {
        path: PathBuf,
    },
    /// The exactly normalised teacher (enumerable RBMs only).
    Exact,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogzRun {
    rbm: RbmSource,
    student: StudentSource,
    #[serde(default = "default_methods")]
    methods: Vec<String>,
    #[serde(default = "default_samples")]
    n_samples: usize,
    #[serde(default = "default_burn_in")]
    burn_in: usize,
    #[serde(default)]
    bridge: BridgeConfig,
    #[serde(default = "default_restarts")]
    hill_starts: usize,
    seed: u64,
}

fn default_methods() -> Vec<String> {
    vec!["all".into()]
}
fn default_samples() -> usize {
    10_000
}

fn parse_methods(names: &[String], n_vis: usize) -> anyhow::Result<Vec<LogZMethod>> {
    let mut out = Vec::new();
    for n in names.iter().flat_map(|s| s.split(',')).map(str::trim) {
        if n == "all" {
            out.extend(LogZMethod::ESTIMATORS);
            if n_vis <= MAX_ENUM_BITS {
                out.push(LogZMethod::Exact);
            }
        } else {
            out.push(LogZMethod::parse(n).ok_or_else(|| Error::Config(format!("unknown estimator '{n}'")))?);
        }
    }
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("no estimators requested".into()).into());
    }
    Ok(out)
}

pub fn estimate_logz(c: &Common, method: Option<String>) -> anyhow::Result<()> {
    let cfg: LogzRun = load(c, |o| {
        if let Some(m) = method {
            o.insert("methods".into(), vec![m].into());
        }
    })?;
    let mut run = Run::start(&c.out, "estimate-logz", &cfg, cfg.seed)?;
    let rbm = cfg.rbm.load(cfg.seed)?;
    let methods = parse_methods(&cfg.methods, rbm.n_vis)?;
    let pc = PartitionConfig {
        n_samples: cfg.n_samples,
        burn_in: cfg.burn_in,
        bridge: cfg.bridge,
        hill_starts: cfg.hill_starts,
        seed: cfg.seed,
    };
    let student: Box<dyn DensityModel> = match &cfg.student {
        StudentSource::Nade { path } => Box::new(NadeModel::load(path)?),
        StudentSource::Exact => Box::new(TabulatedBinary::from_unnormalized(&rbm)?),
    };
    let es = estimate_all(&rbm, student.as_ref(), &methods, &pc)?;
    for e in &es {
        let z = match e.ci3_z {
            Some([lo, hi]) => format!(
                "  Z-scale 3SE ({}, {})",
                lo.map_or("-inf".to_string(), |v| format!("{v:.4}")),
                hi.map_or("inf".to_string(), |v| format!("{v:.4}"))
            ),
            None => String::new(),
        };
        println!(
            "{:<11} {:>12.4} ± {:.4} (3SE: {:.4}, {:.4}){z}",
            e.method.name(),
            e.estimate,
            3.0 * e.se,
            e.ci3[0],
            e.ci3[1]
        );
    }
    let path = run.path("logz.jsonl");
    write_estimates_jsonl(&path, &run.header, &es)?;
    run.finish()
}
