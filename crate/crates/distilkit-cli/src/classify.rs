//! Ensemble training, NADE training, compression and evaluation on MNIST.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use distilkit::compress::{self as ck, ClassifierEval, EnsembleRecipe, EnsembleTeacher, TeacherCache};
use distilkit::config::{DistillSpec, GeneratorSpec};
use distilkit::dataio::{
    binarize, data_dir, load_mnist, raster_columnwise, stratified_subset, BinarizeMode, DataGenerator, Dataset, Split,
};
use distilkit::nade::NadeModel;
use distilkit::nn::Network;
use distilkit::optim::{TrainConfig, UpdateRule};
use distilkit::rng::{stream, Rng};
use distilkit::Error;

use crate::output::{num, Run};
use crate::{load, Common};

fn mnist(split: Split) -> anyhow::Result<Dataset> {
    Ok(load_mnist(&data_dir(), split)?)
}

fn maybe_subset(ds: Dataset, k: Option<usize>, seed: u64) -> anyhow::Result<Dataset> {
    Ok(match k {
        Some(k) => ds.subset(&stratified_subset(&ds, k, seed)?),
        None => ds,
    })
}

fn eval_row(name: &str, e: &ClassifierEval) -> Vec<String> {
    vec![
        name.to_string(),
        e.n.to_string(),
        num(e.accuracy),
        num(e.accuracy_2se),
        num(e.mean_log_prob),
        num(e.log_prob_2se),
    ]
}

const EVAL_COLUMNS: [&str; 6] = [
    "model",
    "n",
    "accuracy",
    "accuracy_2se",
    "mean_log_prob",
    "log_prob_2se",
];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleRun {
    #[serde(default = "default_members")]
    members: usize,
    #[serde(default = "default_teacher_arch")]
    arch: String,
    #[serde(default = "default_epochs")]
    epochs: f64,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default)]
    rule: UpdateRule,
    /// Size of a label-stratified training subset; all images when absent.
    #[serde(default)]
    subset: Option<usize>,
    seed: u64,
}

fn default_members() -> usize {
    30
}
fn default_teacher_arch() -> String {
    "784-relu-500-relu-300-logsoftmax-10".into()
}
fn default_epochs() -> f64 {
    20.0
}
fn default_batch() -> usize {
    20
}

pub fn train_ensemble(c: &Common) -> anyhow::Result<()> {
    let cfg: EnsembleRun = load(c, |_| {})?;
    distilkit::nn::Network::from_arch(&cfg.arch)?;
    let mut run = Run::start(&c.out, "train-ensemble", &cfg, cfg.seed)?;
    let train = maybe_subset(mnist(Split::Train)?, cfg.subset, cfg.seed)?;
    let test = mnist(Split::Test)?;
    let recipe = EnsembleRecipe {
        members: cfg.members,
        arch: cfg.arch.clone(),
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        rule: cfg.rule,
        seed: cfg.seed,
    };
    let teacher = ck::train_ensemble(&recipe, &train)?;
    let mut rows = Vec::new();
    for (k, m) in teacher.members().iter().enumerate() {
        let name = format!("member_{k:02}.net");
        m.save(&run.path(&name))?;
        rows.push(eval_row(&name, &ck::evaluate_classifier(m, &test)?));
    }
    let e = ck::evaluate_classifier(&teacher, &test)?;
    println!(
        "ensemble accuracy {:.2} ± {:.2}%, mean log prob {:.4}",
        e.accuracy, e.accuracy_2se, e.mean_log_prob
    );
    rows.push(eval_row("ensemble", &e));
    run.csv("ensemble_eval.csv", &EVAL_COLUMNS, &rows)?;
    run.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Binarize {
    Round,
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Ordering {
    Columnwise,
    Identity,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NadeRun {
    #[serde(default = "default_nade_hidden")]
    hidden: usize,
    #[serde(default = "default_nade_train")]
    train: TrainConfig,
    #[serde(default)]
    rule: UpdateRule,
    #[serde(default = "default_binarize")]
    binarize: Binarize,
    #[serde(default = "default_ordering")]
    ordering: Ordering,
    #[serde(default)]
    subset: Option<usize>,
    /// First test images used for the log-probability trace; 0 disables it.
    #[serde(default = "default_nade_heldout")]
    heldout: usize,
    seed: u64,
}

fn default_nade_hidden() -> usize {
    500
}
fn default_nade_train() -> TrainConfig {
    TrainConfig::new(30_000, 20)
}
fn default_binarize() -> Binarize {
    Binarize::Round
}
fn default_ordering() -> Ordering {
    Ordering::Columnwise
}
fn default_nade_heldout() -> usize {
    500
}

fn binarized(ds: &Dataset, how: Binarize, rng: &mut Rng) -> Dataset {
    match how {
        Binarize::Round => binarize(ds, BinarizeMode::Round),
        Binarize::Stochastic => binarize(ds, BinarizeMode::Stochastic(distilkit::rng::child_seed(rng))),
    }
}

pub fn train_nade(c: &Common) -> anyhow::Result<()> {
    let cfg: NadeRun = load(c, |_| {})?;
    let mut run = Run::start(&c.out, "train-nade", &cfg, cfg.seed)?;
    let mut rng = stream(cfg.seed, 0);
    let train = maybe_subset(mnist(Split::Train)?, cfg.subset, cfg.seed)?;
    let train = Arc::new(binarized(&train, cfg.binarize, &mut rng));
    let mut nade = NadeModel::random(train.d, cfg.hidden, &mut rng)?;
    if cfg.ordering == Ordering::Columnwise {
        nade = nade.with_ordering(raster_columnwise(train.rows, train.cols))?;
    }
    let heldout: Vec<Vec<f64>> = if cfg.heldout > 0 {
        let test = mnist(Split::Test)?;
        let test = binarized(&test.head(cfg.heldout.min(test.n)), cfg.binarize, &mut rng);
        (0..test.n).map(|i| test.image(i).to_vec()).collect()
    } else {
        Vec::new()
    };
    let mut gen = DataGenerator::resample_without(train, distilkit::rng::child_seed(&mut rng));
    let probe = (!heldout.is_empty()).then_some(|m: &NadeModel| m.mean_log_prob(&heldout));
    let report = nade.train_mle(&cfg.train, cfg.rule, |s| gen.next_minibatch(s), probe)?;
    nade.save(&run.path("nade.bin"))?;
    run.trace("nade_trace.csv", &report.trace)?;
    if !heldout.is_empty() {
        println!("held-out mean log prob {:.3}", nade.mean_log_prob(&heldout)?);
    }
    run.finish()
}

pub fn compress(c: &Common) -> anyhow::Result<()> {
    let spec: DistillSpec = load(c, |_| {})?;
    spec.validate()?;
    let mut run = Run::start(&c.out, "compress", &spec, spec.seed)?;
    let members = spec
        .teachers
        .iter()
        .map(|p| Network::load(p))
        .collect::<distilkit::Result<Vec<_>>>()?;
    let teacher = EnsembleTeacher::new(members)?;
    let mut rng = stream(spec.seed, 0);
    let mut student = Network::random(&spec.student, &mut rng)?;
    student.save(&run.path("student_init.net"))?;

    let gen_seed = distilkit::rng::child_seed(&mut rng);
    let mut cache = None;
    let mut gen = match &spec.generator {
        GeneratorSpec::Data { fraction } => {
            let train = mnist(Split::Train)?;
            let k = (fraction * train.n as f64).round() as usize;
            let train = if k < train.n {
                maybe_subset(train, Some(k.max(1)), spec.seed)?
            } else {
                train
            };
            let train = Arc::new(train);
            if spec.loss == ck::CompressionLoss::CrossEntropy && spec.train.iterations > 0 {
                cache = Some(TeacherCache::build(&teacher, &train)?);
            }
            DataGenerator::resample_without(train, gen_seed)
        }
        GeneratorSpec::Nade { model } => DataGenerator::nade(Arc::new(NadeModel::load(model)?), gen_seed),
        GeneratorSpec::GaussianNoise => DataGenerator::gaussian_noise(teacher.input_dim(), gen_seed),
    };
    let test = mnist(Split::Test)?;
    let heldout = (spec.heldout > 0).then(|| test.head(spec.heldout.min(test.n)));
    let cfg = ck::CompressConfig {
        loss: spec.loss,
        train: spec.train.clone(),
        rule: spec.rule,
    };
    let report = ck::compress(&teacher, &mut student, &mut gen, &cfg, cache.as_ref(), heldout.as_ref())?;
    student.save(&run.path("student.net"))?;
    run.trace("compress_trace.csv", &report.trace)?;
    let es = ck::evaluate_classifier(&student, &test)?;
    let et = ck::evaluate_classifier(&teacher, &test)?;
    println!(
        "student accuracy {:.2} ± {:.2}%, teacher {:.2} ± {:.2}%",
        es.accuracy, es.accuracy_2se, et.accuracy, et.accuracy_2se
    );
    run.csv(
        "compress_eval.csv",
        &EVAL_COLUMNS,
        &[eval_row("student", &es), eval_row("teacher", &et)],
    )?;
    run.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WhichSplit {
    Train,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRun {
    /// Network files; more than one is evaluated as an ensemble.
    models: Vec<PathBuf>,
    #[serde(default = "default_split")]
    split: WhichSplit,
    #[serde(default)]
    limit: Option<usize>,
    seed: u64,
}

fn default_split() -> WhichSplit {
    WhichSplit::Test
}

pub fn eval_classifier(c: &Common) -> anyhow::Result<()> {
    let cfg: EvalRun = load(c, |_| {})?;
    if cfg.models.is_empty() {
        return Err(Error::Config("`models` must list at least one network".into()).into());
    }
    let mut run = Run::start(&c.out, "eval-classifier", &cfg, cfg.seed)?;
    let ds = mnist(match cfg.split {
        WhichSplit::Train => Split::Train,
        WhichSplit::Test => Split::Test,
    })?;
    let ds = match cfg.limit {
        Some(k) => ds.head(k.min(ds.n)),
        None => ds,
    };
    let nets = cfg
        .models
        .iter()
        .map(|p| Network::load(p))
        .collect::<distilkit::Result<Vec<_>>>()?;
    let e = if nets.len() == 1 {
        ck::evaluate_classifier(&nets[0], &ds)?
    } else {
        ck::evaluate_classifier(&EnsembleTeacher::new(nets)?, &ds)?
    };
    println!(
        "accuracy {:.2} ± {:.2}% on {} images, mean log prob {:.4} ± {:.4}",
        e.accuracy, e.accuracy_2se, e.n, e.mean_log_prob, e.log_prob_2se
    );
    run.csv("eval.csv", &EVAL_COLUMNS, &[eval_row("model", &e)])?;
    run.finish()
}
