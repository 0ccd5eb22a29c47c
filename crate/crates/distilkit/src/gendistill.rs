//! Distilling an unnormalised teacher p̃(x) = Z·p(x) into a tractable
//! student p(x|θ) with the KL, square-error and score-matching losses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{DensityModel, Unnormalized};
use crate::error::{check_dim, Error, Result};
use crate::mathx::logsumexp;
use crate::optim::{sgd_train, try_batch_mean, TrainConfig, TrainReport, UpdateRule};
use crate::rbm::{bits_into, RbmModel};
use crate::rng::{bernoulli, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenLoss {
    Kl,
    SquareError { c: f64 },
    ScoreMatching,
}

impl GenLoss {
    /// Rejects a square-error constant above the known lower bound on log Z.
    pub fn validate(&self, log_z_lower: Option<f64>) -> Result<()> {
        if let GenLoss::SquareError { c } = *self {
            if !c.is_finite() {
                return Err(Error::Config("square-error constant must be finite".into()));
            }
            if let Some(b) = log_z_lower {
                if c > b {
                    return Err(Error::Config(format!(
                        "square-error constant {c} exceeds the log Z lower bound {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// E_KL(x, θ) = −log p(x|θ) and its gradient.
pub fn kl_grad<S: DensityModel + ?Sized>(student: &S, x: &[f64]) -> (f64, Vec<f64>) {
    let (l, g, _) = student.grad_log_density(x);
    (-l, g.into_iter().map(|v| -v).collect())
}

/// E_SE(x, θ) = ½(log p(x|θ) − log p̃(x) + c)² and its gradient. Also
/// returns the residual inside the square.
pub fn se_grad<S: DensityModel + ?Sized>(student: &S, x: &[f64], log_pt: f64, c: f64) -> (f64, Vec<f64>, f64) {
    let (l, g, _) = student.grad_log_density(x);
    let r = l - log_pt + c;
    (0.5 * r * r, g.into_iter().map(|v| r * v).collect(), r)
}

/// E_SM(x, θ) = ½‖∂log p(x|θ)/∂x − ∂log p̃(x)/∂x‖² and its gradient
/// R_v{∂log p(x|θ)/∂θ} with v = (0, ∂log p(x|θ)/∂x − ∂log p̃(x)/∂x).
pub fn sm_grad<S: DensityModel + ?Sized>(student: &S, x: &[f64], teacher_grad_x: &[f64]) -> Result<(f64, Vec<f64>)> {
    if !student.is_continuous() {
        return Err(Error::Unsupported(
            "score matching needs a continuous-domain student; it cannot train binary models".into(),
        ));
    }
    check_dim("teacher score", student.dim(), teacher_grad_x.len())?;
    let (_, _, gx) = student.grad_log_density(x);
    let v: Vec<f64> = gx.iter().zip(teacher_grad_x).map(|(a, b)| a - b).collect();
    let e = 0.5 * v.iter().map(|a| a * a).sum::<f64>();
    let (ht, _) = student.hvp_log_density(x, &[], &v);
    Ok((e, ht))
}

/// Per-sample loss and gradient for any of the three losses.
pub fn gen_loss_grad<S, T>(loss: GenLoss, student: &S, teacher: &T, x: &[f64]) -> Result<(f64, Vec<f64>)>
where
    S: DensityModel + ?Sized,
    T: Unnormalized + ?Sized,
{
    match loss {
        GenLoss::Kl => Ok(kl_grad(student, x)),
        GenLoss::SquareError { c } => {
            let lp = teacher.log_unnorm(x);
            if !lp.is_finite() {
                return Err(Error::Numerical(format!("teacher log p̃ is {lp} on a sample")));
            }
            let (e, g, _) = se_grad(student, x, lp, c);
            Ok((e, g))
        }
        GenLoss::ScoreMatching => {
            let tg = teacher
                .grad_x_log_unnorm(x)
                .ok_or_else(|| Error::Unsupported("score matching needs a teacher with ∂log p̃/∂x".into()))?;
            sm_grad(student, x, &tg)
        }
    }
}

/// Exact losses over an enumerable binary domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactLosses {
    pub log_z: f64,
    /// KL(p ‖ p(·|θ)).
    pub e_kl: f64,
    /// ⟨½(log p(x|θ) − log p̃(x) + c)²⟩_p.
    pub e_se: f64,
    /// ⟨½(log p(x|θ) − log p(x))²⟩_p.
    pub e_se0: f64,
}

impl ExactLosses {
    /// E_SE⁰ + (log Z − c)·E_KL + ½(log Z − c)².
    pub fn decomposition(&self, c: f64) -> f64 {
        let k = self.log_z - c;
        self.e_se0 + k * self.e_kl + 0.5 * k * k
    }
}

/// Computes the exact losses by enumerating `{0,1}^I`, `I ≤ 20`.
pub fn exact_losses<T, S>(teacher: &T, student: &S, c: f64) -> Result<ExactLosses>
where
    T: Unnormalized + ?Sized,
    S: DensityModel + ?Sized,
{
    let n = teacher.dim();
    check_dim("student dimension", n, student.dim())?;
    if n > 20 {
        return Err(Error::Config(format!("enumeration needs I <= 20, got {n}")));
    }
    let rows: Vec<(f64, f64)> = (0..1usize << n)
        .into_par_iter()
        .map(|s| {
            let mut x = vec![0.0; n];
            bits_into(s, &mut x);
            (teacher.log_unnorm(&x), student.log_density(&x))
        })
        .collect();
    let lpt: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let log_z = logsumexp(&lpt);
    let (mut kl, mut se, mut se0) = (0.0, 0.0, 0.0);
    for (lt, lq) in rows {
        let lp = lt - log_z;
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        let d = lq - lp;
        let r = lq - lt + c;
        kl -= p * d;
        se += p * 0.5 * r * r;
        se0 += p * 0.5 * d * d;
    }
    Ok(ExactLosses {
        log_z,
        e_kl: kl,
        e_se: se,
        e_se0: se0,
    })
}

/// KL(p ‖ p(·|θ)) by enumeration.
pub fn exact_kl<T, S>(teacher: &T, student: &S) -> Result<f64>
where
    T: Unnormalized + ?Sized,
    S: DensityModel + ?Sized,
{
    Ok(exact_losses(teacher, student, 0.0)?.e_kl)
}

/// Parallel Gibbs chains for an RBM teacher. Every call advances all chains
/// by one step and returns the next `s` chains in round-robin order, so each
/// chain is thinned `n_chains / s` times between visits.
pub struct GibbsFarm<'a> {
    rbm: &'a RbmModel,
    states: Vec<Vec<f64>>,
    rngs: Vec<Rng>,
    cursor: usize,
    pub steps: u64,
}

impl<'a> GibbsFarm<'a> {
    /// Chains start from uniform random states and are burned in.
    pub fn new(rbm: &'a RbmModel, n_chains: usize, burn_in: usize, seed: u64) -> Result<Self> {
        if n_chains == 0 {
            return Err(Error::Config("Gibbs farm needs at least one chain".into()));
        }
        let mut rngs: Vec<Rng> = (0..n_chains).map(|c| stream(seed, c as u64)).collect();
        let states = rngs
            .iter_mut()
            .map(|r| (0..rbm.n_vis).map(|_| bernoulli(r, 0.5)).collect())
            .collect();
        let mut farm = GibbsFarm {
            rbm,
            states,
            rngs,
            cursor: 0,
            steps: 0,
        };
        for _ in 0..burn_in {
            farm.advance();
        }
        Ok(farm)
    }

    /// Chains initialised at the given states.
    pub fn from_states(rbm: &'a RbmModel, states: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Config("Gibbs farm needs at least one chain".into()));
        }
        for s in &states {
            check_dim("chain state", rbm.n_vis, s.len())?;
        }
        let rngs = (0..states.len()).map(|c| stream(seed, c as u64)).collect();
        Ok(GibbsFarm {
            rbm,
            states,
            rngs,
            cursor: 0,
            steps: 0,
        })
    }

    pub fn n_chains(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn advance(&mut self) {
        let rbm = self.rbm;
        self.states
            .par_iter_mut()
            .zip(self.rngs.par_iter_mut())
            .for_each(|(x, r)| *x = rbm.gibbs_step(x, r));
        self.steps += 1;
    }

    pub fn next_minibatch(&mut self, s: usize) -> Vec<Vec<f64>> {
        self.advance();
        let n = self.states.len();
        let out = (0..s).map(|k| self.states[(self.cursor + k) % n].clone()).collect();
        self.cursor = (self.cursor + s) % n;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDistillConfig {
    pub loss: GenLoss,
    pub train: TrainConfig,
    pub rule: UpdateRule,
}

/// Trains `student` on teacher samples from `next_batch`. `probe`, if given,
/// records a held-out metric (such as mean log-probability) at each logging
/// point. A non-finite teacher log p̃ on any sample aborts the run.
pub fn gen_distill<S, T, B, P>(
    teacher: &T,
    student: &mut S,
    cfg: &GenDistillConfig,
    mut next_batch: B,
    probe: Option<P>,
) -> Result<TrainReport>
where
    S: DensityModel + Clone + Send,
    T: Unnormalized + ?Sized,
    B: FnMut(usize) -> Result<Vec<Vec<f64>>>,
    P: FnMut(&S) -> Result<f64>,
{
    cfg.loss.validate(None)?;
    if cfg.loss == GenLoss::ScoreMatching && !student.is_continuous() {
        return Err(Error::Unsupported(
            "score matching needs a continuous-domain student; it cannot train binary models".into(),
        ));
    }
    let mut work = student.clone();
    let mut probe_model = student.clone();
    let mut theta = student.params().to_vec();
    let mut probe = probe;
    let report = sgd_train(
        &cfg.train,
        &mut theta,
        cfg.rule,
        |th, _| {
            work.params_mut().copy_from_slice(th);
            let batch = next_batch(cfg.train.batch_size)?;
            for x in &batch {
                check_dim("teacher sample", teacher.dim(), x.len())?;
                if cfg.loss == GenLoss::Kl && !teacher.log_unnorm(x).is_finite() {
                    return Err(Error::Numerical(
                        "teacher chain produced a state with non-finite log p̃".into(),
                    ));
                }
            }
            let w = &work;
            try_batch_mean(&batch, |x| gen_loss_grad(cfg.loss, w, teacher, x))
        },
        probe.as_mut().map(|p| {
            move |th: &[f64]| {
                probe_model.params_mut().copy_from_slice(th);
                p(&probe_model)
            }
        }),
    )?;
    student.params_mut().copy_from_slice(&theta);
    Ok(report)
}

/// RBM teacher distillation with minibatches drawn from a [`GibbsFarm`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbmDistillConfig {
    pub distill: GenDistillConfig,
    pub n_chains: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl RbmDistillConfig {
    /// Minibatch 20, 2000 chains burned in for 2000 steps, 30,000 iterations
    /// of ADADELTA.
    pub fn reference(loss: GenLoss, seed: u64) -> Self {
        RbmDistillConfig {
            distill: GenDistillConfig {
                loss,
                train: TrainConfig::new(30_000, 20),
                rule: UpdateRule::adadelta(),
            },
            n_chains: 2000,
            burn_in: 2000,
            seed,
        }
    }
}

pub fn distill_rbm<S, P>(
    rbm: &RbmModel,
    student: &mut S,
    cfg: &RbmDistillConfig,
    probe: Option<P>,
) -> Result<TrainReport>
where
    S: DensityModel + Clone + Send,
    P: FnMut(&S) -> Result<f64>,
{
    let mut farm = GibbsFarm::new(rbm, cfg.n_chains, cfg.burn_in, cfg.seed)?;
    gen_distill(rbm, student, &cfg.distill, |s| Ok(farm.next_minibatch(s)), probe)
}
