//! Stochastic optimisation: ADADELTA, learning-rate schedules and a minibatch
//! training loop with a fixed budget.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mathx::all_finite;

/// Per-parameter ADADELTA accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    pub rho: f64,
    pub eps: f64,
    pub eg2: Vec<f64>,
    pub edx2: Vec<f64>,
}

impl AdadeltaState {
    pub const RHO: f64 = 0.95;
    pub const EPS: f64 = 1e-6;

    pub fn new(n: usize) -> Self {
        Self::with_hyper(n, Self::RHO, Self::EPS)
    }

    pub fn with_hyper(n: usize, rho: f64, eps: f64) -> Self {
        AdadeltaState {
            rho,
            eps,
            eg2: vec![0.0; n],
            edx2: vec![0.0; n],
        }
    }

    /// Returns Δθ = −(RMS[Δθ]/RMS[g])·g and updates the accumulators.
    /// A non-finite gradient leaves the state untouched.
    pub fn step(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        check_dim("adadelta gradient", self.eg2.len(), grad.len())?;
        if !all_finite(grad) {
            return Err(Error::NonFinite("gradient passed to adadelta".into()));
        }
        let (rho, eps) = (self.rho, self.eps);
        let mut out = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let g = grad[i];
            self.eg2[i] = rho * self.eg2[i] + (1.0 - rho) * g * g;
            let dx = -((self.edx2[i] + eps).sqrt() / (self.eg2[i] + eps).sqrt()) * g;
            self.edx2[i] = rho * self.edx2[i] + (1.0 - rho) * dx * dx;
            out[i] = dx;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant {
        rate: f64,
    },
    /// Starts at `rate` and falls linearly to zero at iteration `total − 1`.
    LinearDecay {
        rate: f64,
        total: usize,
    },
    /// α_t = (t0 + t + 1)^(−β); requires ½ < β ≤ 1 and t0 ≥ 0.
    PowerDecay {
        t0: f64,
        beta: f64,
    },
}

impl Schedule {
    pub fn constant(rate: f64) -> Self {
        Schedule::Constant { rate }
    }

    pub fn linear(rate: f64, total: usize) -> Self {
        Schedule::LinearDecay { rate, total }
    }

    pub fn power(t0: f64, beta: f64) -> Result<Self> {
        let s = Schedule::PowerDecay { t0, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::PowerDecay { t0, beta } if !(beta > 0.5 && beta <= 1.0) || t0 < 0.0 => Err(Error::Config(
                format!("power decay needs 1/2 < beta <= 1 and t0 >= 0 (got beta={beta}, t0={t0})"),
            )),
            Schedule::LinearDecay { total: 0, .. } => Err(Error::Config("linear decay needs total > 0".into())),
            _ => Ok(()),
        }
    }

    pub fn rate(&self, t: usize) -> f64 {
        match *self {
            Schedule::Constant { rate } => rate,
            Schedule::LinearDecay { rate, total } => {
                if total <= 1 {
                    rate
                } else {
                    rate * (total.saturating_sub(1 + t)) as f64 / (total - 1) as f64
                }
            }
            Schedule::PowerDecay { t0, beta } => (t0 + t as f64 + 1.0).powf(-beta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd { schedule: Schedule },
    Adadelta { rho: f64, eps: f64 },
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule::adadelta()
    }
}

impl UpdateRule {
    pub fn adadelta() -> Self {
        UpdateRule::Adadelta {
            rho: AdadeltaState::RHO,
            eps: AdadeltaState::EPS,
        }
    }

    pub fn sgd(schedule: Schedule) -> Self {
        UpdateRule::Sgd { schedule }
    }
}

/// Optimiser state bound to one parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    rule: UpdateRule,
    ada: Option<AdadeltaState>,
    t: usize,
}

impl Optimizer {
    pub fn new(rule: UpdateRule, n_params: usize) -> Result<Self> {
        let ada = match rule {
            UpdateRule::Adadelta { rho, eps } => {
                if !(0.0..1.0).contains(&rho) || eps <= 0.0 {
                    return Err(Error::Config("adadelta needs 0 <= rho < 1, eps > 0".into()));
                }
                Some(AdadeltaState::with_hyper(n_params, rho, eps))
            }
            UpdateRule::Sgd { schedule } => {
                schedule.validate()?;
                None
            }
        };
        Ok(Optimizer { rule, ada, t: 0 })
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    /// Moves `theta` against `grad` (the gradient of a loss to minimise).
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim("optimizer gradient", theta.len(), grad.len())?;
        match (&self.rule, &mut self.ada) {
            (_, Some(st)) => {
                let dx = st.step(grad)?;
                for (p, d) in theta.iter_mut().zip(dx) {
                    *p += d;
                }
            }
            (UpdateRule::Sgd { schedule }, None) => {
                if !all_finite(grad) {
                    return Err(Error::NonFinite("sgd gradient".into()));
                }
                let a = schedule.rate(self.t);
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= a * g;
                }
            }
            _ => unreachable!(),
        }
        self.t += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Stop after this many probes without improvement of the metric.
    #[serde(default)]
    pub patience: Option<usize>,
}

fn default_log_every() -> usize {
    200
}

impl TrainConfig {
    pub fn new(iterations: usize, batch_size: usize) -> Self {
        TrainConfig {
            iterations,
            batch_size,
            log_every: default_log_every(),
            patience: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub samples_seen: usize,
    /// Mean minibatch loss since the previous row.
    pub loss: f64,
    /// Probe metric (higher is better); NaN when no probe is configured.
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub iterations_run: usize,
    pub stopped_early: bool,
}

/// Runs `cfg.iterations` minibatch steps.
///
/// `grad_fn(θ, t)` returns the minibatch loss and its gradient. `probe(θ)`, if
/// given, is called at each logging point. Two consecutive non-finite losses or
/// gradients abort the run; a single one skips the update.
pub fn sgd_train<G, P>(
    cfg: &TrainConfig,
    theta: &mut [f64],
    rule: UpdateRule,
    mut grad_fn: G,
    mut probe: Option<P>,
) -> Result<TrainReport>
where
    G: FnMut(&[f64], usize) -> Result<(f64, Vec<f64>)>,
    P: FnMut(&[f64]) -> Result<f64>,
{
    if cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::Config("batch_size and log_every must be positive".into()));
    }
    let mut opt = Optimizer::new(rule, theta.len())?;
    let mut report = TrainReport::default();
    let mut strikes = 0;
    let mut window = (0.0, 0usize);
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for t in 0..cfg.iterations {
        let (loss, grad) = grad_fn(theta, t)?;
        if !loss.is_finite() || !all_finite(&grad) {
            strikes += 1;
            if strikes >= 2 {
                return Err(Error::Numerical(format!(
                    "non-finite loss at iterations {} and {t}",
                    t - 1
                )));
            }
            continue;
        }
        strikes = 0;
        opt.step(theta, &grad)?;
        window.0 += loss;
        window.1 += 1;
        report.iterations_run = t + 1;
        let last = t + 1 == cfg.iterations;
        if (t + 1) % cfg.log_every == 0 || last {
            let metric = match probe.as_mut() {
                Some(p) => p(theta)?,
                None => f64::NAN,
            };
            report.trace.push(TraceRow {
                iteration: t + 1,
                samples_seen: (t + 1) * cfg.batch_size,
                loss: window.0 / window.1.max(1) as f64,
                metric,
            });
            window = (0.0, 0);
            if let Some(p) = cfg.patience {
                if metric > best {
                    best = metric;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= p {
                        report.stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Mean of per-item (loss, gradient) pairs. Items are evaluated in parallel
/// and summed in index order, so the result does not depend on threading.
pub fn batch_mean<T, F>(items: &[T], f: F) -> (f64, Vec<f64>)
where
    T: Sync,
    F: Fn(&T) -> (f64, Vec<f64>) + Sync,
{
    let parts: Vec<(f64, Vec<f64>)> = items.par_iter().map(&f).collect();
    sum_parts(parts)
}

/// Fallible [`batch_mean`]; the first error in index order is returned.
pub fn try_batch_mean<T, F>(items: &[T], f: F) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, Vec<f64>)> + Sync,
{
    let parts: Vec<(f64, Vec<f64>)> = items.par_iter().map(&f).collect::<Result<_>>()?;
    Ok(sum_parts(parts))
}

fn sum_parts(parts: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    let n = parts.len().max(1) as f64;
    let mut loss = 0.0;
    let mut g = vec![0.0; parts.first().map_or(0, |p| p.1.len())];
    for (l, gi) in parts {
        loss += l;
        for (a, b) in g.iter_mut().zip(gi) {
            *a += b;
        }
    }
    g.iter_mut().for_each(|v| *v /= n);
    (loss / n, g)
}

/// No-probe placeholder for [`sgd_train`].
pub type NoProbe = fn(&[f64]) -> Result<f64>;

pub fn write_trace_csv(path: &Path, header: &[String], rows: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for h in header {
        writeln!(f, "# {h}")?;
    }
    writeln!(f, "iteration,samples_seen,loss,metric")?;
    for r in rows {
        writeln!(f, "{},{},{:e},{:e}", r.iteration, r.samples_seen, r.loss, r.metric)?;
    }
    Ok(())
}
