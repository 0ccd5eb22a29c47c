//! Model compression: ensemble teachers, CE and DSE losses, training and
//! classifier evaluation.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DataGenerator, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::mathx::{mean, std_err};
use crate::nn::{Network, Nonlinearity, RDirection};
use crate::optim::{sgd_train, try_batch_mean, TrainConfig, TrainReport, UpdateRule};
use crate::rng::{below, stream};

/// Largest output count accepted by the DSE loss.
pub const DSE_MAX_OUTPUTS: usize = 10;

/// Log class probabilities of a network with a softmax or log-softmax head.
pub fn log_probs(net: &Network, x: &[f64]) -> Result<Vec<f64>> {
    let y = net.output(x)?;
    match head(net) {
        Nonlinearity::LogSoftmax => Ok(y),
        Nonlinearity::Softmax => Ok(y.iter().map(|p| p.ln()).collect()),
        other => Err(Error::Unsupported(format!(
            "classifier head must be softmax or logsoftmax, not {}",
            other.name()
        ))),
    }
}

fn head(net: &Network) -> Nonlinearity {
    net.layers().last().unwrap().act
}

fn check_classifier(net: &Network) -> Result<()> {
    match head(net) {
        Nonlinearity::Softmax | Nonlinearity::LogSoftmax => Ok(()),
        other => Err(Error::Unsupported(format!(
            "classifier head must be softmax or logsoftmax, not {}",
            other.name()
        ))),
    }
}

/// Rows `∂log p_i/∂x` of a classifier, one backprop per class.
pub fn grad_log_probs(net: &Network, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_classifier(net)?;
    let tr = net.forward(x)?;
    let k = net.output_dim();
    let y = tr.output().to_vec();
    let log_p: Vec<f64> = match head(net) {
        Nonlinearity::LogSoftmax => y.clone(),
        _ => y.iter().map(|p| p.ln()).collect(),
    };
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        let mut g = net.backprop(&tr, &e)?.x;
        if head(net) == Nonlinearity::Softmax {
            g.iter_mut().for_each(|v| *v /= y[i]);
        }
        rows.push(g);
    }
    Ok((log_p, rows))
}

/// Average of the members' class probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTeacher {
    members: Vec<Network>,
}

impl EnsembleTeacher {
    pub fn new(members: Vec<Network>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("ensemble has no members".into()))?;
        for m in &members {
            check_classifier(m)?;
            check_dim("ensemble member outputs", first.output_dim(), m.output_dim())?;
            check_dim("ensemble member inputs", first.input_dim(), m.input_dim())?;
        }
        Ok(EnsembleTeacher { members })
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.members[0].output_dim()
    }

    /// t(x) = (1/N) Σ_n t⁽ⁿ⁾(x).
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut t = vec![0.0; self.n_classes()];
        for m in &self.members {
            for (a, lp) in t.iter_mut().zip(log_probs(m, x)?) {
                *a += lp.exp();
            }
        }
        let n = self.members.len() as f64;
        t.iter_mut().for_each(|v| *v /= n);
        Ok(t)
    }

    /// `t(x)` and the rows `∂log t_i/∂x`, combining the members by the quotient
    /// rule: ∂log t_i/∂x = Σ_n p_iⁿ ∂log p_iⁿ/∂x / Σ_n p_iⁿ.
    pub fn grad_log(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let k = self.n_classes();
        let d = self.input_dim();
        let mut num = vec![vec![0.0; d]; k];
        let mut den = vec![0.0; k];
        for m in &self.members {
            let (lp, rows) = grad_log_probs(m, x)?;
            for i in 0..k {
                let p = lp[i].exp();
                den[i] += p;
                for (a, g) in num[i].iter_mut().zip(&rows[i]) {
                    *a += p * g;
                }
            }
        }
        let n = self.members.len() as f64;
        for i in 0..k {
            if den[i] > 0.0 {
                num[i].iter_mut().for_each(|v| *v /= den[i]);
            }
        }
        Ok((den.iter().map(|v| v / n).collect(), num))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionLoss {
    CrossEntropy,
    DerivativeSquareError,
}

fn check_simplex(t: &[f64]) -> Result<()> {
    let s: f64 = t.iter().sum();
    if t.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("target is not a probability vector (sum {s})")));
    }
    Ok(())
}

fn require_log_softmax(net: &Network) -> Result<()> {
    if head(net) != Nonlinearity::LogSoftmax {
        return Err(Error::Unsupported("student must have a logsoftmax head".into()));
    }
    Ok(())
}

/// E_CE = −Σ t_i log f_i and its parameter gradient.
pub fn ce_compress_grad(student: &Network, x: &[f64], t: &[f64]) -> Result<(f64, Vec<f64>)> {
    require_log_softmax(student)?;
    check_dim("teacher output", student.output_dim(), t.len())?;
    check_simplex(t)?;
    let tr = student.forward(x)?;
    let y = tr.output();
    let e: f64 = t
        .iter()
        .zip(y)
        .filter(|(ti, _)| **ti != 0.0)
        .map(|(ti, yi)| -ti * yi)
        .sum();
    let neg: Vec<f64> = t.iter().map(|v| -v).collect();
    Ok((e, student.backprop(&tr, &neg)?.theta))
}

/// E_DSE = (1/2I) Σ_i ‖∂log f_i/∂x − ∂log t_i/∂x‖² and its parameter gradient,
/// assembled from `I` backprops and `I` Hessian-vector products.
pub fn dse_compress_grad(student: &Network, x: &[f64], teacher_grad_log: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    require_log_softmax(student)?;
    let k = student.output_dim();
    if k > DSE_MAX_OUTPUTS {
        return Err(Error::Unsupported(format!(
            "derivative square error is limited to {DSE_MAX_OUTPUTS} outputs, got {k}"
        )));
    }
    check_dim("teacher gradient rows", k, teacher_grad_log.len())?;
    let tr = student.forward(x)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; student.n_params()];
    let zeros = vec![0.0; k];
    for i in 0..k {
        check_dim("teacher gradient", x.len(), teacher_grad_log[i].len())?;
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        let g = student.backprop(&tr, &e)?;
        let v: Vec<f64> = g.x.iter().zip(&teacher_grad_log[i]).map(|(a, b)| a - b).collect();
        loss += 0.5 * v.iter().map(|a| a * a).sum::<f64>();
        let dir = RDirection::input_only(v);
        let rtr = student.r_forward(&tr, &dir)?;
        let h = student.r_backprop(&tr, &g, &rtr, &dir, &e, &zeros)?;
        for (a, b) in grad.iter_mut().zip(&h.theta) {
            *a += b;
        }
    }
    let kf = k as f64;
    grad.iter_mut().for_each(|v| *v /= kf);
    Ok((loss / kf, grad))
}

/// Teacher outputs precomputed for every row of a dataset, used when the
/// generator resamples that dataset.
#[derive(Clone, Debug)]
pub struct TeacherCache {
    pub probs: Vec<Vec<f64>>,
}

impl TeacherCache {
    pub fn build(teacher: &EnsembleTeacher, data: &Dataset) -> Result<Self> {
        let probs = (0..data.n)
            .into_par_iter()
            .map(|i| teacher.predict(data.image(i)))
            .collect::<Result<_>>()?;
        Ok(TeacherCache { probs })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressConfig {
    pub loss: CompressionLoss,
    pub train: TrainConfig,
    pub rule: UpdateRule,
}

/// Trains `student` on inputs from `gen` labelled by `teacher`. When `heldout`
/// is given its accuracy is recorded at each logging point.
pub fn compress(
    teacher: &EnsembleTeacher,
    student: &mut Network,
    gen: &mut DataGenerator,
    cfg: &CompressConfig,
    cache: Option<&TeacherCache>,
    heldout: Option<&Dataset>,
) -> Result<TrainReport> {
    require_log_softmax(student)?;
    check_dim("student input", teacher.input_dim(), student.input_dim())?;
    check_dim("student output", teacher.n_classes(), student.output_dim())?;
    check_dim("generator dimension", student.input_dim(), gen.dim())?;
    if cfg.loss == CompressionLoss::DerivativeSquareError && student.output_dim() > DSE_MAX_OUTPUTS {
        return Err(Error::Unsupported(
            "too many outputs for derivative square error".into(),
        ));
    }
    let mut work = student.clone();
    let mut probe_net = student.clone();
    let mut theta = student.params().to_vec();
    let report = sgd_train(
        &cfg.train,
        &mut theta,
        cfg.rule,
        |th, _| {
            work.set_params(th)?;
            let (xs, idx) = gen.next_indexed(cfg.train.batch_size)?;
            let items: Vec<(usize, &Vec<f64>)> = xs.iter().enumerate().collect();
            let net = &work;
            try_batch_mean(&items, |&(k, x)| match cfg.loss {
                CompressionLoss::CrossEntropy => {
                    let t = match (cache, &idx) {
                        (Some(c), Some(ix)) => c.probs[ix[k]].clone(),
                        _ => teacher.predict(x)?,
                    };
                    ce_compress_grad(net, x, &t)
                }
                CompressionLoss::DerivativeSquareError => {
                    let (_, rows) = teacher.grad_log(x)?;
                    dse_compress_grad(net, x, &rows)
                }
            })
        },
        heldout.map(|h| {
            move |th: &[f64]| {
                probe_net.set_params(th)?;
                Ok(evaluate_classifier(&probe_net, h)?.accuracy)
            }
        }),
    )?;
    student.set_params(&theta)?;
    Ok(report)
}

/// Anything that produces class log-probabilities.
pub trait Classifier: Sync {
    fn class_log_probs(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl Classifier for Network {
    fn class_log_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        log_probs(self, x)
    }
}

impl Classifier for EnsembleTeacher {
    fn class_log_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict(x)?.iter().map(|p| p.ln()).collect())
    }
}

/// Accuracy in percent and mean log-probability of the true label, each with
/// two standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEval {
    pub n: usize,
    pub accuracy: f64,
    pub accuracy_2se: f64,
    pub mean_log_prob: f64,
    pub log_prob_2se: f64,
}

fn per_example<C: Classifier + ?Sized>(model: &C, test: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("test set has no labels".into()))?;
    if test.n == 0 {
        return Err(Error::Config("test set is empty".into()));
    }
    let rows: Vec<(f64, f64)> = (0..test.n)
        .into_par_iter()
        .map(|i| {
            let lp = model.class_log_probs(test.image(i))?;
            let y = labels[i] as usize;
            if y >= lp.len() {
                return Err(Error::Domain(format!("label {y} outside {} classes", lp.len())));
            }
            let arg = lp
                .iter()
                .enumerate()
                .fold(0, |best, (k, v)| if *v > lp[best] { k } else { best });
            Ok((if arg == y { 100.0 } else { 0.0 }, lp[y]))
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().unzip())
}

fn two_se(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        2.0 * std_err(xs)
    }
}

pub fn evaluate_classifier<C: Classifier + ?Sized>(model: &C, test: &Dataset) -> Result<ClassifierEval> {
    let (acc, lp) = per_example(model, test)?;
    Ok(ClassifierEval {
        n: test.n,
        accuracy: mean(&acc),
        accuracy_2se: two_se(&acc),
        mean_log_prob: mean(&lp),
        log_prob_2se: two_se(&lp),
    })
}

/// Mean per-example difference `a − b` with two standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedEval {
    pub n: usize,
    pub accuracy_diff: f64,
    pub accuracy_diff_2se: f64,
    pub log_prob_diff: f64,
    pub log_prob_diff_2se: f64,
}

pub fn evaluate_paired<A, B>(a: &A, b: &B, test: &Dataset) -> Result<PairedEval>
where
    A: Classifier + ?Sized,
    B: Classifier + ?Sized,
{
    let (acc_a, lp_a) = per_example(a, test)?;
    let (acc_b, lp_b) = per_example(b, test)?;
    let da: Vec<f64> = acc_a.iter().zip(&acc_b).map(|(x, y)| x - y).collect();
    let dl: Vec<f64> = lp_a.iter().zip(&lp_b).map(|(x, y)| x - y).collect();
    Ok(PairedEval {
        n: test.n,
        accuracy_diff: mean(&da),
        accuracy_diff_2se: two_se(&da),
        log_prob_diff: mean(&dl),
        log_prob_diff_2se: two_se(&dl),
    })
}

pub fn one_hot(label: u8, k: usize) -> Vec<f64> {
    let mut t = vec![0.0; k];
    t[label as usize] = 1.0;
    t
}

/// Supervised CE training on labelled data with minibatches drawn without
/// replacement.
pub fn train_classifier(
    net: &mut Network,
    data: Arc<Dataset>,
    cfg: &TrainConfig,
    rule: UpdateRule,
    seed: u64,
) -> Result<TrainReport> {
    require_log_softmax(net)?;
    let labels = data
        .labels
        .clone()
        .ok_or_else(|| Error::Config("training set has no labels".into()))?;
    let k = net.output_dim();
    let mut gen = DataGenerator::resample_without(data, seed);
    let mut work = net.clone();
    let mut theta = net.params().to_vec();
    let report = sgd_train(
        cfg,
        &mut theta,
        rule,
        |th, _| {
            work.set_params(th)?;
            let (xs, idx) = gen.next_indexed(cfg.batch_size)?;
            let idx = idx.expect("dataset generator yields indices");
            let items: Vec<(&Vec<f64>, usize)> = xs.iter().zip(idx).collect();
            let w = &work;
            try_batch_mean(&items, |&(x, i)| ce_compress_grad(w, x, &one_hot(labels[i], k)))
        },
        None::<crate::optim::NoProbe>,
    )?;
    net.set_params(&theta)?;
    Ok(report)
}

/// Bootstrap-ensemble training recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecipe {
    pub members: usize,
    pub arch: String,
    pub epochs: f64,
    pub batch_size: usize,
    pub rule: UpdateRule,
    pub seed: u64,
}

impl EnsembleRecipe {
    /// 20 epochs, minibatch 20, ADADELTA.
    pub fn new(members: usize, arch: &str, seed: u64) -> Self {
        EnsembleRecipe {
            members,
            arch: arch.to_string(),
            epochs: 20.0,
            batch_size: 20,
            rule: UpdateRule::adadelta(),
            seed,
        }
    }
}

/// Trains each member on its own bootstrap resample of `data`.
pub fn train_ensemble(recipe: &EnsembleRecipe, data: &Dataset) -> Result<EnsembleTeacher> {
    if recipe.members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    let iterations = (recipe.epochs * data.n as f64 / recipe.batch_size as f64).round() as usize;
    let members = (0..recipe.members)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(recipe.seed, m as u64);
            let idx: Vec<usize> = (0..data.n).map(|_| below(&mut rng, data.n)).collect();
            let boot = Arc::new(data.subset(&idx));
            let mut net = Network::random(&recipe.arch, &mut rng)?;
            let cfg = TrainConfig::new(iterations, recipe.batch_size);
            let seed = crate::rng::child_seed(&mut rng);
            train_classifier(&mut net, boot, &cfg, recipe.rule, seed)?;
            Ok(net)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleTeacher::new(members)
}
