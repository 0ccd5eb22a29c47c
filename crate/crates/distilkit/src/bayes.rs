//! Distilling posterior samples into compact predictive distributions:
//! mixture-of-Gaussians density estimation and Bayesian binary
//! classification with a sigmoid-mixture compact model.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mathx::{log_sigmoid, logsumexp, sigmoid, LN_2PI};
use crate::mcmc::{run_chains, sweep, ChainHarnessConfig, ChainState, LogDensity, SampleBag};
use crate::mog::{em_batch, EmConfig, EmInit, EmResult, MoGParams, OnlineEm};
use crate::nn::{output_fn, LayerSpec, Network, Nonlinearity, OutputFn, RDirection};
use crate::optim::{sgd_train, try_batch_mean, NoProbe, Schedule, TrainConfig, TrainReport, UpdateRule};
use crate::rng::{below, normal, seeded, stream, Rng};

/// Observation model `p(x|w)` for Bayesian density estimation.
pub trait ObservationModel: Sync {
    fn sample_x(&self, w: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
    fn log_likelihood(&self, w: &[f64], x: &[f64]) -> f64;
}

/// 1-D mixture with known weights and variances and unknown means `w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MogMeansModel {
    pub weights: Vec<f64>,
    pub vars: Vec<f64>,
}

impl MogMeansModel {
    pub fn new(weights: Vec<f64>, vars: Vec<f64>) -> Result<Self> {
        check_dim("mixture variances", weights.len(), vars.len())?;
        MoGParams::univariate(&weights, &vec![0.0; weights.len()], &vars)?;
        if vars.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Domain("mixture variances must be positive".into()));
        }
        Ok(MogMeansModel { weights, vars })
    }

    /// Three equal-weight components with variances 2, 5 and 1.
    pub fn reference() -> Self {
        MogMeansModel {
            weights: vec![1.0 / 3.0; 3],
            vars: vec![2.0, 5.0, 1.0],
        }
    }

    /// Means of the reference data-generating mixture.
    pub const REFERENCE_MEANS: [f64; 3] = [-3.0, 0.0, 2.0];

    pub fn params(&self, means: &[f64]) -> Result<MoGParams> {
        MoGParams::univariate(&self.weights, means, &self.vars)
    }
}

impl ObservationModel for MogMeansModel {
    fn sample_x(&self, w: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        self.params(w)?.sample(rng)
    }

    fn log_likelihood(&self, w: &[f64], x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|i| {
                let d = x[0] - w[i];
                self.weights[i].ln() - 0.5 * (LN_2PI + self.vars[i].ln()) - 0.5 * d * d / self.vars[i]
            })
            .collect();
        logsumexp(&terms)
    }
}

/// log p(w) + Σ_n log p(x_n|w) with an isotropic Gaussian prior.
pub struct DensityPosterior<'a, M: ObservationModel> {
    pub model: &'a M,
    pub data: &'a [Vec<f64>],
    pub dim: usize,
    pub prior_var: f64,
}

impl<M: ObservationModel> LogDensity for DensityPosterior<'_, M> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, w: &[f64]) -> f64 {
        let prior = -0.5 * w.iter().map(|v| v * v).sum::<f64>() / self.prior_var;
        prior + self.data.iter().map(|x| self.model.log_likelihood(w, x)).sum::<f64>()
    }
}

/// log p_MC(x) = log (1/S) Σ_s p(x|w_s).
pub fn mc_log_density<M: ObservationModel>(model: &M, bag: &SampleBag, x: &[f64]) -> f64 {
    let lls: Vec<f64> = bag.samples().map(|w| model.log_likelihood(w, x)).collect();
    logsumexp(&lls) - (bag.len() as f64).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub thinning: usize,
    pub step_w: f64,
}

impl Default for ChainConfig {
    /// Burn-in 1000, no thinning.
    fn default() -> Self {
        ChainConfig {
            burn_in: 1000,
            thinning: 1,
            step_w: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityBatchConfig {
    pub chain: ChainConfig,
    /// Posterior samples S.
    pub n_posterior: usize,
    /// Draws M from p_MC.
    pub n_draws: usize,
    pub em: EmConfig,
}

pub struct DensityBatchResult {
    pub bag: SampleBag,
    pub draws: Vec<Vec<f64>>,
    pub fit: EmResult,
}

/// Runs a single chain from 0, draws `M` points from the resulting p_MC and
/// fits a mixture to them by batch EM.
pub fn density_distill_batch<M: ObservationModel>(
    target: &DensityPosterior<'_, M>,
    cfg: &DensityBatchConfig,
) -> Result<DensityBatchResult> {
    if cfg.n_posterior == 0 || cfg.n_draws == 0 {
        return Err(Error::Config("S and M must be positive".into()));
    }
    let mut hc = ChainHarnessConfig::new(1, cfg.chain.burn_in, cfg.chain.thinning, cfg.n_posterior, cfg.em.seed);
    hc.step_w = cfg.chain.step_w;
    let bag = run_chains(&hc, &vec![0.0; target.dim], target)?;
    let mut rng = stream(cfg.em.seed, 1);
    let draws = (0..cfg.n_draws)
        .map(|_| {
            let s = below(&mut rng, bag.len());
            target.model.sample_x(bag.sample(s), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = em_batch(&draws, &cfg.em, EmInit::KMeansPlusPlus)?;
    Ok(DensityBatchResult { bag, draws, fit })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityOnlineConfig {
    pub chain: ChainConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub schedule: Schedule,
    pub components: usize,
    pub seed: u64,
}

impl DensityOnlineConfig {
    /// Minibatch 100, 100 iterations, step size decaying linearly from 1 to 0.
    pub fn reference(components: usize, seed: u64) -> Self {
        DensityOnlineConfig {
            chain: ChainConfig::default(),
            batch_size: 100,
            iterations: 100,
            schedule: Schedule::linear(1.0, 100),
            components,
            seed,
        }
    }
}

pub struct DensityOnlineResult {
    pub params: MoGParams,
    pub events: Vec<String>,
}

/// Each iteration advances one chain `batch_size` steps, draws one `x` per
/// posterior sample, and applies an online EM step. The mixture is
/// initialised by batch EM on the first minibatch.
pub fn density_distill_online<M: ObservationModel>(
    target: &DensityPosterior<'_, M>,
    cfg: &DensityOnlineConfig,
) -> Result<DensityOnlineResult> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("minibatch size must be positive".into()));
    }
    cfg.schedule.validate()?;
    let mut st = ChainState::new(target, vec![0.0; target.dim], stream(cfg.seed, 0))?;
    for _ in 0..cfg.chain.burn_in {
        sweep(&mut st, target, cfg.chain.step_w)?;
    }
    let mut rng = stream(cfg.seed, 1);
    let mut next_batch = |st: &mut ChainState| -> Result<Vec<Vec<f64>>> {
        (0..cfg.batch_size)
            .map(|_| {
                for _ in 0..cfg.chain.thinning {
                    sweep(st, target, cfg.chain.step_w)?;
                }
                target.model.sample_x(&st.w, &mut rng)
            })
            .collect()
    };
    let mut online: Option<OnlineEm> = None;
    for t in 0..cfg.iterations {
        let batch = next_batch(&mut st)?;
        let em = match online.as_mut() {
            Some(o) => o,
            None => {
                let mut ec = EmConfig::new(cfg.components, cfg.seed.wrapping_add(2));
                ec.max_iters = 1000;
                online.insert(OnlineEm::from_first_batch(&batch, &ec)?)
            }
        };
        let alpha = cfg.schedule.rate(t).clamp(0.0, 1.0);
        em.step(&batch, alpha)?;
    }
    let o = online.ok_or_else(|| Error::Config("online distillation needs at least one iteration".into()))?;
    Ok(DensityOnlineResult {
        params: o.params,
        events: o.events,
    })
}

/// Uniform grid of `n` points on `[lo, hi]`.
pub fn grid_1d(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

// ---------------------------------------------------------------------------
// Binary classification

fn augment(x: &[f64], intercept: bool) -> Vec<f64> {
    let mut v = x.to_vec();
    if intercept {
        v.push(1.0);
    }
    v
}

/// Bayesian logistic regression posterior with prior N(0, prior_var·I).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegPosterior {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<u8>,
    pub input_dim: usize,
    pub prior_var: f64,
    /// Appends a constant 1 to every input.
    pub intercept: bool,
}

impl LogRegPosterior {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<u8>, input_dim: usize, prior_var: f64, intercept: bool) -> Result<Self> {
        check_dim("labels", xs.len(), ys.len())?;
        for x in &xs {
            check_dim("logistic regression input", input_dim, x.len())?;
        }
        if ys.iter().any(|&y| y > 1) {
            return Err(Error::Domain("labels must be 0 or 1".into()));
        }
        if !(prior_var > 0.0) {
            return Err(Error::Config("prior variance must be positive".into()));
        }
        Ok(LogRegPosterior {
            xs,
            ys,
            input_dim,
            prior_var,
            intercept,
        })
    }

    pub fn weight_dim(&self) -> usize {
        self.input_dim + self.intercept as usize
    }
}

impl LogDensity for LogRegPosterior {
    fn dim(&self) -> usize {
        self.weight_dim()
    }
    fn log_density(&self, w: &[f64]) -> f64 {
        let mut lp = -0.5 * w.iter().map(|v| v * v).sum::<f64>() / self.prior_var;
        for (x, &y) in self.xs.iter().zip(&self.ys) {
            let mut a: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            if self.intercept {
                a += w[self.input_dim];
            }
            lp += if y == 1 { log_sigmoid(a) } else { log_sigmoid(-a) };
        }
        lp
    }
}

/// Twelve points of each class in the plane; the classes overlap near the origin.
pub fn toy_logreg_dataset() -> (Vec<Vec<f64>>, Vec<u8>) {
    let pos = [
        (2.1, 1.4),
        (0.6, 2.3),
        (1.8, -0.4),
        (3.0, 2.2),
        (-0.5, 1.6),
        (1.2, 0.9),
        (2.6, -1.1),
        (0.3, 0.2),
        (1.5, 3.1),
        (-1.2, 0.8),
        (2.4, 0.6),
        (0.9, -0.9),
    ];
    let neg = [
        (-2.0, -1.3),
        (-0.7, -2.2),
        (-1.6, 0.5),
        (-2.9, -2.0),
        (0.4, -1.5),
        (-1.1, -0.8),
        (-2.5, 1.0),
        (-0.2, -0.3),
        (-1.4, -3.0),
        (1.1, -0.6),
        (-2.3, -0.5),
        (-0.8, 0.9),
    ];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(a, b) in &pos {
        xs.push(vec![a, b]);
        ys.push(1);
    }
    for &(a, b) in &neg {
        xs.push(vec![a, b]);
        ys.push(0);
    }
    (xs, ys)
}

/// Monte Carlo predictor t(x) = (1/S) Σ_s σ(w_sᵀx).
#[derive(Clone, Debug, PartialEq)]
pub struct McPredictor {
    weights: Vec<Vec<f64>>,
    intercept: bool,
}

/// t(x) with ∂log t/∂x and ∂log(1 − t)/∂x.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryTarget {
    pub t: f64,
    pub grad_log_t: Vec<f64>,
    pub grad_log_1mt: Vec<f64>,
}

impl McPredictor {
    pub fn new(bag: &SampleBag, intercept: bool) -> Result<Self> {
        if bag.is_empty() {
            return Err(Error::Config("posterior bag is empty".into()));
        }
        Ok(McPredictor {
            weights: bag.samples().map(|w| w.to_vec()).collect(),
            intercept,
        })
    }

    pub fn from_weights(weights: Vec<Vec<f64>>, intercept: bool) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("posterior bag is empty".into()));
        }
        Ok(McPredictor { weights, intercept })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let xa = augment(x, self.intercept);
        let s: f64 = self
            .weights
            .iter()
            .map(|w| sigmoid(w.iter().zip(&xa).map(|(a, b)| a * b).sum()))
            .sum();
        s / self.weights.len() as f64
    }

    pub fn target(&self, x: &[f64]) -> BinaryTarget {
        let d = x.len();
        let xa = augment(x, self.intercept);
        let mut t = 0.0;
        let mut dt = vec![0.0; d];
        for w in &self.weights {
            let s = sigmoid(w.iter().zip(&xa).map(|(a, b)| a * b).sum());
            t += s;
            let k = s * (1.0 - s);
            for (g, wi) in dt.iter_mut().zip(w) {
                *g += k * wi;
            }
        }
        let n = self.weights.len() as f64;
        t /= n;
        dt.iter_mut().for_each(|v| *v /= n);
        BinaryTarget {
            t,
            grad_log_t: dt.iter().map(|v| v / t).collect(),
            grad_log_1mt: dt.iter().map(|v| -v / (1.0 - t)).collect(),
        }
    }
}

/// Single-sample target t(x, w) = σ(wᵀx) used by online distillation.
pub fn single_sample_target(w: &[f64], x: &[f64], intercept: bool) -> BinaryTarget {
    let xa = augment(x, intercept);
    let t = sigmoid(w.iter().zip(&xa).map(|(a, b)| a * b).sum());
    let d = x.len();
    BinaryTarget {
        t,
        grad_log_t: w[..d].iter().map(|v| (1.0 - t) * v).collect(),
        grad_log_1mt: w[..d].iter().map(|v| -t * v).collect(),
    }
}

/// f(x|θ) = (1/S′) Σ σ(w_{s′}ᵀx), held as a network with a frozen output
/// layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactBinaryModel {
    pub input_dim: usize,
    pub intercept: bool,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLoss {
    CrossEntropy,
    DerivativeSquareError,
}

impl CompactBinaryModel {
    pub fn new(input_dim: usize, intercept: bool, weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("compact model needs at least one component".into()));
        }
        for w in &weights {
            check_dim("compact weight", input_dim + intercept as usize, w.len())?;
        }
        Ok(CompactBinaryModel {
            input_dim,
            intercept,
            weights,
        })
    }

    /// Components drawn i.i.d. from N(0, std²·I).
    pub fn from_prior(input_dim: usize, intercept: bool, n: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let d = input_dim + intercept as usize;
        let weights = (0..n).map(|_| (0..d).map(|_| std * normal(rng)).collect()).collect();
        CompactBinaryModel::new(input_dim, intercept, weights)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn weight_dim(&self) -> usize {
        self.input_dim + self.intercept as usize
    }

    /// Number of trainable parameters (the first-layer weights).
    pub fn n_trainable(&self) -> usize {
        self.n_components() * self.weight_dim()
    }

    pub fn network(&self) -> Network {
        let s = self.n_components();
        let d = self.weight_dim();
        let mut net = Network::new(vec![
            LayerSpec {
                n_in: d,
                n_out: s,
                act: Nonlinearity::Logistic,
            },
            LayerSpec {
                n_in: s,
                n_out: 1,
                act: Nonlinearity::Linear,
            },
        ])
        .expect("valid compact architecture");
        let p = net.params_mut();
        for (k, w) in self.weights.iter().enumerate() {
            p[k * d..(k + 1) * d].copy_from_slice(w);
        }
        let o = s * d + s;
        p[o..o + s].iter_mut().for_each(|v| *v = 1.0 / s as f64);
        net
    }

    pub fn set_trainable(&mut self, theta: &[f64]) {
        let d = self.weight_dim();
        for (k, w) in self.weights.iter_mut().enumerate() {
            w.copy_from_slice(&theta[k * d..(k + 1) * d]);
        }
    }

    pub fn trainable(&self) -> Vec<f64> {
        self.weights.concat()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let xa = augment(x, self.intercept);
        let s: f64 = self
            .weights
            .iter()
            .map(|w| sigmoid(w.iter().zip(&xa).map(|(a, b)| a * b).sum()))
            .sum();
        s / self.n_components() as f64
    }

    /// ∂log f/∂x and ∂log(1 − f)/∂x through the network view.
    pub fn grad_log(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let net = self.network();
        let xa = augment(x, self.intercept);
        let tr = net.forward(&xa)?;
        let f = tr.output()[0];
        let g1 = net.backprop(&tr, &output_fn(OutputFn::CrossEntropy, &[f], &[1.0], None)?.de_dy)?;
        let g0 = net.backprop(&tr, &output_fn(OutputFn::BinaryCrossEntropy, &[f], &[0.0], None)?.de_dy)?;
        let d = self.input_dim;
        Ok((f, g1.x[..d].to_vec(), g0.x[..d].to_vec()))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// −[t log f + (1 − t) log(1 − f)] and its gradient over the trainable weights.
pub fn binary_ce_grad(model: &CompactBinaryModel, net: &Network, x: &[f64], t: f64) -> Result<(f64, Vec<f64>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("target probability {t} outside [0,1]")));
    }
    let xa = augment(x, model.intercept);
    let tr = net.forward(&xa)?;
    let out = output_fn(OutputFn::BinaryCrossEntropy, tr.output(), &[t], None)?;
    let g = net.backprop(&tr, &out.de_dy)?;
    let n = model.n_trainable();
    Ok((-out.e, g.theta[..n].iter().map(|v| -v).collect()))
}

/// t·E₁ + (1 − t)·E₀ with E₁ = ½‖∂log f/∂x − ∂log t/∂x‖² and
/// E₀ = ½‖∂log(1 − f)/∂x − ∂log(1 − t)/∂x‖², and its gradient over the
/// trainable weights. Each branch costs one backprop and one R pass.
pub fn binary_dse_grad(
    model: &CompactBinaryModel,
    net: &Network,
    x: &[f64],
    target: &BinaryTarget,
) -> Result<(f64, Vec<f64>)> {
    let d = model.input_dim;
    check_dim("teacher gradient", d, target.grad_log_t.len())?;
    check_dim("teacher gradient", d, target.grad_log_1mt.len())?;
    let xa = augment(x, model.intercept);
    let tr = net.forward(&xa)?;
    let n = model.n_trainable();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    let branches = [
        (target.t, OutputFn::CrossEntropy, 1.0, &target.grad_log_t),
        (1.0 - target.t, OutputFn::BinaryCrossEntropy, 0.0, &target.grad_log_1mt),
    ];
    for (weight, kind, tv, teacher) in branches {
        if weight == 0.0 {
            continue;
        }
        let out = output_fn(kind, tr.output(), &[tv], None)?;
        let g = net.backprop(&tr, &out.de_dy)?;
        let mut v: Vec<f64> = g.x[..d].iter().zip(teacher.iter()).map(|(a, b)| a - b).collect();
        loss += weight * 0.5 * v.iter().map(|a| a * a).sum::<f64>();
        v.resize(xa.len(), 0.0);
        let dir = RDirection::input_only(v);
        let rtr = net.r_forward(&tr, &dir)?;
        let rout = output_fn(kind, tr.output(), &[tv], Some(rtr.output()))?;
        let h = net.r_backprop(&tr, &g, &rtr, &dir, &out.de_dy, &rout.r_de_dy)?;
        for (a, b) in grad.iter_mut().zip(&h.theta[..n]) {
            *a += weight * b;
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    Batch,
    Online,
}

/// How the compact weights are initialised.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompactInit {
    /// i.i.d. N(0, std²·I).
    Prior { std: f64 },
    /// Posterior samples: random bag members in batch mode, chain states
    /// `spacing` sweeps apart in online mode.
    Posterior { spacing: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryDistillConfig {
    pub loss: BinaryLoss,
    pub n_compact: usize,
    pub train: TrainConfig,
    pub rule: UpdateRule,
    /// Inputs are drawn from N(0, input_std²·I).
    pub input_std: f64,
    pub init: CompactInit,
    pub chain: ChainConfig,
    pub seed: u64,
}

impl BinaryDistillConfig {
    /// S′ = 10, 5000 iterations of minibatch 10, SGD with rate decaying
    /// linearly from 1 to 0, inputs from N(0, 100·I), initial weights from
    /// the posterior.
    pub fn reference(loss: BinaryLoss, seed: u64) -> Self {
        BinaryDistillConfig {
            loss,
            n_compact: 10,
            train: TrainConfig::new(5000, 10),
            rule: UpdateRule::sgd(Schedule::linear(1.0, 5000)),
            input_std: 10.0,
            init: CompactInit::Posterior { spacing: 10 },
            chain: ChainConfig::default(),
            seed,
        }
    }
}

fn draw_inputs(rng: &mut Rng, m: usize, d: usize, std: f64) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..d).map(|_| std * normal(rng)).collect()).collect()
}

fn loss_for(
    loss: BinaryLoss,
    model: &CompactBinaryModel,
    net: &Network,
    x: &[f64],
    target: &BinaryTarget,
) -> Result<(f64, Vec<f64>)> {
    match loss {
        BinaryLoss::CrossEntropy => binary_ce_grad(model, net, x, target.t),
        BinaryLoss::DerivativeSquareError => binary_dse_grad(model, net, x, target),
    }
}

/// Batch distillation against a Monte Carlo predictor.
pub fn binary_distill_batch(
    teacher: &McPredictor,
    input_dim: usize,
    cfg: &BinaryDistillConfig,
) -> Result<(CompactBinaryModel, TrainReport)> {
    let mut rng = stream(cfg.seed, 0);
    let mut model = match cfg.init {
        CompactInit::Prior { std } => {
            CompactBinaryModel::from_prior(input_dim, teacher.intercept, cfg.n_compact, std, &mut rng)?
        }
        CompactInit::Posterior { .. } => {
            let ws = (0..cfg.n_compact)
                .map(|_| teacher.weights[below(&mut rng, teacher.len())].clone())
                .collect();
            CompactBinaryModel::new(input_dim, teacher.intercept, ws)?
        }
    };
    let mut xrng = stream(cfg.seed, 1);
    let mut theta = model.trainable();
    let mut work = model.clone();
    let report = sgd_train(
        &cfg.train,
        &mut theta,
        cfg.rule,
        |th, _| {
            work.set_trainable(th);
            let net = work.network();
            let xs = draw_inputs(&mut xrng, cfg.train.batch_size, input_dim, cfg.input_std);
            let w = &work;
            try_batch_mean(&xs, |x| loss_for(cfg.loss, w, &net, x, &teacher.target(x)))
        },
        None::<NoProbe>,
    )?;
    model.set_trainable(&theta);
    Ok((model, report))
}

/// Online distillation: each minibatch pairs fresh inputs with consecutive
/// states of a single chain and uses the single-sample target σ(w_mᵀx_m).
pub fn binary_distill_online(
    posterior: &LogRegPosterior,
    cfg: &BinaryDistillConfig,
) -> Result<(CompactBinaryModel, TrainReport)> {
    let d = posterior.input_dim;
    let mut rng = stream(cfg.seed, 0);
    let mut xrng = stream(cfg.seed, 1);
    let mut st = ChainState::new(posterior, vec![0.0; posterior.weight_dim()], stream(cfg.seed, 2))?;
    for _ in 0..cfg.chain.burn_in {
        sweep(&mut st, posterior, cfg.chain.step_w)?;
    }
    let mut model = match cfg.init {
        CompactInit::Prior { std } => {
            CompactBinaryModel::from_prior(d, posterior.intercept, cfg.n_compact, std, &mut rng)?
        }
        CompactInit::Posterior { spacing } => {
            let mut ws = Vec::with_capacity(cfg.n_compact);
            for _ in 0..cfg.n_compact {
                for _ in 0..spacing.max(1) {
                    sweep(&mut st, posterior, cfg.chain.step_w)?;
                }
                ws.push(st.w.clone());
            }
            CompactBinaryModel::new(d, posterior.intercept, ws)?
        }
    };
    let mut theta = model.trainable();
    let mut work = model.clone();
    let report = sgd_train(
        &cfg.train,
        &mut theta,
        cfg.rule,
        |th, _| {
            work.set_trainable(th);
            let net = work.network();
            let mut pairs = Vec::with_capacity(cfg.train.batch_size);
            for _ in 0..cfg.train.batch_size {
                for _ in 0..cfg.chain.thinning {
                    sweep(&mut st, posterior, cfg.chain.step_w)?;
                }
                let x: Vec<f64> = (0..d).map(|_| cfg.input_std * normal(&mut xrng)).collect();
                pairs.push((x, st.w.clone()));
            }
            let w = &work;
            try_batch_mean(&pairs, |(x, ws)| {
                loss_for(cfg.loss, w, &net, x, &single_sample_target(ws, x, w.intercept))
            })
        },
        None::<NoProbe>,
    )?;
    model.set_trainable(&theta);
    Ok((model, report))
}

/// Draws the posterior bag for the logistic-regression toy: one chain from
/// 0 with the given burn-in and no thinning.
pub fn logreg_bag(posterior: &LogRegPosterior, chain: &ChainConfig, n: usize, seed: u64) -> Result<SampleBag> {
    let mut hc = ChainHarnessConfig::new(1, chain.burn_in, chain.thinning, n, seed);
    hc.step_w = chain.step_w;
    run_chains(&hc, &vec![0.0; posterior.weight_dim()], posterior)
}

/// `n × n` uniform grid on `[−lim, lim]²`, first coordinate varying slowest.
pub fn probe_grid(n: usize, lim: f64) -> Vec<[f64; 2]> {
    let g = grid_1d(-lim, lim, n);
    g.iter().flat_map(|&a| g.iter().map(move |&b| [a, b])).collect()
}

/// Mean and max of |f − t| over the grid.
pub fn grid_discrepancy(model: &CompactBinaryModel, teacher: &McPredictor, grid: &[[f64; 2]]) -> (f64, f64) {
    let diffs: Vec<f64> = grid
        .par_iter()
        .map(|p| (model.predict(p) - teacher.predict(p)).abs())
        .collect();
    let max = diffs.iter().cloned().fold(0.0, f64::max);
    (diffs.iter().sum::<f64>() / diffs.len().max(1) as f64, max)
}

/// Writes `x1,x2,t,f` rows after `# ` header lines.
pub fn write_grid_csv(
    path: &Path,
    header: &[String],
    grid: &[[f64; 2]],
    teacher: &McPredictor,
    model: &CompactBinaryModel,
) -> Result<()> {
    let rows: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|p| (teacher.predict(p), model.predict(p)))
        .collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for h in header {
        writeln!(f, "# {h}")?;
    }
    writeln!(f, "x1,x2,t,f")?;
    for (p, (t, m)) in grid.iter().zip(rows) {
        writeln!(f, "{},{},{:e},{:e}", p[0], p[1], t, m)?;
    }
    Ok(())
}

/// Observations from the reference mixture.
pub fn reference_observations(n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let model = MogMeansModel::reference();
    let p = model.params(&MogMeansModel::REFERENCE_MEANS)?;
    let mut rng = seeded(seed);
    (0..n).map(|_| p.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::fd_gradient;
    use crate::mathx::rel_err;

    fn toy_model() -> CompactBinaryModel {
        CompactBinaryModel::new(2, false, vec![vec![0.7, -0.4], vec![-1.2, 0.3], vec![0.2, 0.9]]).unwrap()
    }

    #[test]
    fn symmetric_bag_is_one_half() {
        let p = McPredictor::from_weights(vec![vec![1.3, -2.0], vec![-1.3, 2.0]], false).unwrap();
        for x in [[0.5, 3.0], [-7.0, 1.0]] {
            assert!((p.predict(&x) - 0.5).abs() < 1e-15);
        }
        let z = McPredictor::from_weights(vec![vec![0.0, 0.0]], false).unwrap();
        let t = z.target(&[4.0, 2.0]);
        assert_eq!(t.t, 0.5);
        assert!(t.grad_log_t.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mc_gradients_fd() {
        let p = McPredictor::from_weights(vec![vec![0.3, -0.5, 0.2], vec![1.1, 0.4, -0.7]], true).unwrap();
        let x = [0.8, -1.3];
        let t = p.target(&x);
        let fd1 = fd_gradient(|z| p.predict(z).ln(), &x, 1e-6);
        let fd0 = fd_gradient(|z| (1.0 - p.predict(z)).ln(), &x, 1e-6);
        assert!(rel_err(&t.grad_log_t, &fd1) < 1e-8);
        assert!(rel_err(&t.grad_log_1mt, &fd0) < 1e-8);
        let s = single_sample_target(&[0.3, -0.5, 0.2], &x, true);
        let one = McPredictor::from_weights(vec![vec![0.3, -0.5, 0.2]], true)
            .unwrap()
            .target(&x);
        assert!(rel_err(&s.grad_log_t, &one.grad_log_t) < 1e-12);
    }

    #[test]
    fn compact_network_matches_closed_form() {
        let m = toy_model();
        let x = [0.4, 1.7];
        let (f, g1, g0) = m.grad_log(&x).unwrap();
        assert!((f - m.predict(&x)).abs() < 1e-15);
        let as_mc = McPredictor::from_weights(m.weights.clone(), false).unwrap().target(&x);
        assert!(rel_err(&g1, &as_mc.grad_log_t) < 1e-12);
        assert!(rel_err(&g0, &as_mc.grad_log_1mt) < 1e-12);
    }

    #[test]
    fn ce_and_dse_gradients_fd() {
        let m = toy_model();
        let x = [0.4, 1.7];
        let teacher = McPredictor::from_weights(vec![vec![1.0, 0.5], vec![-0.3, 0.8]], false).unwrap();
        let tg = teacher.target(&x);
        let eval = |th: &[f64], dse: bool| {
            let mut w = m.clone();
            w.set_trainable(th);
            let net = w.network();
            if dse {
                binary_dse_grad(&w, &net, &x, &tg).unwrap()
            } else {
                binary_ce_grad(&w, &net, &x, tg.t).unwrap()
            }
        };
        for dse in [false, true] {
            let (_, g) = eval(&m.trainable(), dse);
            let fd = fd_gradient(|th| eval(th, dse).0, &m.trainable(), 1e-6);
            assert!(rel_err(&g, &fd) < 1e-7, "dse={dse}");
        }
    }

    #[test]
    fn perfect_match_has_zero_gradients() {
        let m = CompactBinaryModel::new(2, false, vec![vec![0.6, -1.1]]).unwrap();
        let net = m.network();
        let x = [1.5, 0.3];
        let tg = single_sample_target(&[0.6, -1.1], &x, false);
        let (_, g) = binary_ce_grad(&m, &net, &x, tg.t).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
        let (e, g) = binary_dse_grad(&m, &net, &x, &tg).unwrap();
        assert!(e < 1e-28);
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn empty_dataset_is_prior() {
        let post = LogRegPosterior::new(vec![], vec![], 2, 100.0, false).unwrap();
        assert_eq!(post.log_density(&[3.0, 4.0]), -0.5 * 25.0 / 100.0);
        let at_origin = LogRegPosterior::new(vec![vec![0.0, 0.0]], vec![1], 2, 100.0, false).unwrap();
        let d = at_origin.log_density(&[3.0, 4.0]) - post.log_density(&[3.0, 4.0]);
        assert!((d - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mog_likelihood_matches_params() {
        let m = MogMeansModel::reference();
        let p = m.params(&[-3.0, 0.0, 2.0]).unwrap();
        for x in [-4.0, 0.3, 5.0] {
            assert!((m.log_likelihood(&[-3.0, 0.0, 2.0], &[x]) - p.logpdf(&[x]).unwrap()).abs() < 1e-13);
        }
    }
}
