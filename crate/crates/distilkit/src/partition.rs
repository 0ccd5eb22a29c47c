//! Estimating log Z of an unnormalised teacher with a tractable student:
//! KL bounds, the trivial max bound, importance sampling and bridge sampling.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{DensityModel, Unnormalized};
use crate::error::{check_dim, Error, Result};
use crate::gendistill::GibbsFarm;
use crate::mathx::{log_sigmoid, logsumexp, mean, sigmoid, std_err};
use crate::rbm::RbmModel;
use crate::rng::{bernoulli, child_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogZMethod {
    KlUpper,
    KlLower,
    Trivial,
    Importance,
    Bridge,
    Exact,
}

impl LogZMethod {
    pub const ESTIMATORS: [LogZMethod; 5] = [
        LogZMethod::KlUpper,
        LogZMethod::KlLower,
        LogZMethod::Trivial,
        LogZMethod::Importance,
        LogZMethod::Bridge,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LogZMethod::KlUpper => "kl_upper",
            LogZMethod::KlLower => "kl_lower",
            LogZMethod::Trivial => "trivial",
            LogZMethod::Importance => "importance",
            LogZMethod::Bridge => "bridge",
            LogZMethod::Exact => "exact",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ESTIMATORS
            .iter()
            .chain(&[LogZMethod::Exact])
            .copied()
            .find(|m| m.name() == s)
    }
}

/// A log Z estimate in nats. `ci3` is the symmetric ±3 SE band on the log
/// scale; `ci3_z` maps the ±3 SE band on the Z scale to nats and has no lower
/// end when it would cross zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogZEstimate {
    pub method: LogZMethod,
    pub estimate: f64,
    pub se: f64,
    pub ci3: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ci3_z: Option<[Option<f64>; 2]>,
    pub n: usize,
    pub seed: u64,
    /// Fixed-point iterates of log Z, bridge only.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<f64>,
}

impl LogZEstimate {
    fn new(method: LogZMethod, estimate: f64, se: f64, n: usize, seed: u64) -> Self {
        LogZEstimate {
            method,
            estimate,
            se,
            ci3: [estimate - 3.0 * se, estimate + 3.0 * se],
            ci3_z: None,
            n,
            seed,
            trace: Vec::new(),
        }
    }

    fn with_z_band(mut self) -> Self {
        let lo = 1.0 - 3.0 * self.se;
        self.ci3_z = Some([
            (lo > 0.0).then(|| self.estimate + lo.ln()),
            Some(self.estimate + (1.0 + 3.0 * self.se).ln()),
        ]);
        self
    }

    /// Whether `v` lies within `k` standard errors.
    pub fn covers(&self, v: f64, k: f64) -> bool {
        (self.estimate - v).abs() <= k * self.se
    }
}

fn log_ratios<T, S>(teacher: &T, student: &S, xs: &[Vec<f64>]) -> Result<Vec<f64>>
where
    T: Unnormalized + ?Sized,
    S: DensityModel + ?Sized,
{
    if xs.is_empty() {
        return Err(Error::Config("estimator needs at least one sample".into()));
    }
    for x in xs {
        check_dim("sample", teacher.dim(), x.len())?;
    }
    Ok(xs
        .par_iter()
        .map(|x| teacher.log_unnorm(x) - student.log_density(x))
        .collect())
}

/// ⟨log p̃ − log q⟩ over teacher samples; an upper bound on log Z.
pub fn kl_upper_bound<T, S>(teacher: &T, student: &S, teacher_samples: &[Vec<f64>], seed: u64) -> Result<LogZEstimate>
where
    T: Unnormalized + ?Sized,
    S: DensityModel + ?Sized,
{
    let r = log_ratios(teacher, student, teacher_samples)?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite log ratio on a teacher sample".into()));
    }
    Ok(LogZEstimate::new(
        LogZMethod::KlUpper,
        mean(&r),
        std_err(&r),
        r.len(),
        seed,
    ))
}

/// ⟨log p̃ − log q⟩ over student samples; a lower bound on log Z.
pub fn kl_lower_bound<T, S>(teacher: &T, student: &S, student_samples: &[Vec<f64>], seed: u64) -> Result<LogZEstimate>
where
    T: Unnormalized + ?Sized,
    S: DensityModel + ?Sized,
{
    let r = log_ratios(teacher, student, student_samples)?;
    if r.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numerical("invalid log ratio on a student sample".into()));
    }
    Ok(LogZEstimate::new(
        LogZMethod::KlLower,
        mean(&r),
        std_err(&r),
        r.len(),
        seed,
    ))
}

/// Greedy single-bit hill climbing from each start; the best log p̃ found is
/// a lower bound on log Z whether or not it is the global maximum.
pub fn trivial_lower_bound<T>(teacher: &T, starts: &[Vec<f64>], seed: u64) -> Result<(LogZEstimate, Vec<f64>)>
where
    T: Unnormalized + ?Sized,
{
    if starts.is_empty() {
        return Err(Error::Config("hill climbing needs at least one start".into()));
    }
    let climbed: Vec<(Vec<f64>, f64)> = starts
        .par_iter()
        .map(|s| {
            let mut x = s.clone();
            let mut f = teacher.log_unnorm(&x);
            loop {
                let mut improved = false;
                for i in 0..x.len() {
                    x[i] = 1.0 - x[i];
                    let g = teacher.log_unnorm(&x);
                    if g > f {
                        f = g;
                        improved = true;
                    } else {
                        x[i] = 1.0 - x[i];
                    }
                }
                if !improved {
                    return (x, f);
                }
            }
        })
        .collect();
    let (x, f) = climbed
        .into_iter()
        .reduce(|a, b| if b.1 > a.1 { b } else { a })
        .unwrap();
    Ok((LogZEstimate::new(LogZMethod::Trivial, f, 0.0, starts.len(), seed), x))
}

/// log (1/S) Σ p̃(x_s)/q(x_s) over proposal samples, with the delta-method SE.
pub fn importance_log_z<T, S>(teacher: &T, student: &S, student_samples: &[Vec<f64>], seed: u64) -> Result<LogZEstimate>
where
    T: Unnormalized + ?Sized,
    S: DensityModel + ?Sized,
{
    let r = log_ratios(teacher, student, student_samples)?;
    let n = r.len() as f64;
    let lse = logsumexp(&r);
    if !lse.is_finite() {
        return Err(Error::Numerical("every importance ratio is zero or infinite".into()));
    }
    let est = lse - n.ln();
    let w: Vec<f64> = r.iter().map(|v| (v - est).exp()).collect();
    let se = std_err(&w) / mean(&w);
    Ok(LogZEstimate::new(LogZMethod::Importance, est, se, r.len(), seed).with_z_band())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub iterations: usize,
    pub log_z0: f64,
}

impl Default for BridgeConfig {
    /// Ten fixed-point iterations from Z = 1.
    fn default() -> Self {
        BridgeConfig {
            iterations: 10,
            log_z0: 0.0,
        }
    }
}

/// log Z from the optimal bridge p̄_b = q·p̃/(Z·q + p̃), iterating
/// Z ← Z · mean_q σ(r − log Z) / mean_p σ(log Z − r) with r = log p̃ − log q.
/// The same samples are reused in every iteration.
pub fn bridge_log_z<T, S>(
    teacher: &T,
    student: &S,
    student_samples: &[Vec<f64>],
    teacher_samples: &[Vec<f64>],
    cfg: &BridgeConfig,
    seed: u64,
) -> Result<LogZEstimate>
where
    T: Unnormalized + ?Sized,
    S: DensityModel + ?Sized,
{
    if cfg.iterations == 0 {
        return Err(Error::Config("bridge sampling needs at least one iteration".into()));
    }
    let rq = log_ratios(teacher, student, student_samples)?;
    let rp = log_ratios(teacher, student, teacher_samples)?;
    if rp.iter().chain(&rq).any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN log ratio in bridge sampling".into()));
    }
    let (nq, np) = (rq.len() as f64, rp.len() as f64);
    let log_a = |lz: f64| logsumexp(&rq.iter().map(|r| log_sigmoid(r - lz)).collect::<Vec<_>>()) - nq.ln();
    let log_b = |lz: f64| logsumexp(&rp.iter().map(|r| log_sigmoid(lz - r)).collect::<Vec<_>>()) - np.ln();
    let mut lz = cfg.log_z0;
    let mut trace = vec![lz];
    for _ in 0..cfg.iterations {
        lz = lz + log_a(lz) - log_b(lz);
        trace.push(lz);
        if !lz.is_finite() {
            return Err(Error::Numerical(format!(
                "bridge fixed point diverged; log Z iterates {trace:?}"
            )));
        }
    }
    let a: Vec<f64> = rq.iter().map(|r| sigmoid(r - lz)).collect();
    let b: Vec<f64> = rp.iter().map(|r| sigmoid(lz - r)).collect();
    let rel = |v: &[f64]| {
        let m = mean(v);
        if m > 0.0 {
            std_err(v) / m
        } else {
            f64::INFINITY
        }
    };
    let se = (rel(&a).powi(2) + rel(&b).powi(2)).sqrt();
    let mut e = LogZEstimate::new(LogZMethod::Bridge, lz, se, rq.len(), seed).with_z_band();
    e.trace = trace;
    Ok(e)
}

/// |ΔZ|/Z between the last two bridge iterates.
pub fn bridge_last_change(e: &LogZEstimate) -> Option<f64> {
    match e.trace.as_slice() {
        [.., a, b] => Some((b - a).exp_m1().abs()),
        _ => None,
    }
}

/// `n` exact student samples, one RNG stream per sample.
pub fn student_samples<S: DensityModel + ?Sized>(student: &S, n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n as u64)
        .into_par_iter()
        .map(|k| student.draw(&mut stream(seed, k)))
        .collect()
}

/// Final states of `inits.len()` Gibbs chains started at `inits` and run for
/// `burn_in` steps.
pub fn gibbs_from(rbm: &RbmModel, inits: Vec<Vec<f64>>, burn_in: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut farm = GibbsFarm::from_states(rbm, inits, seed)?;
    for _ in 0..burn_in {
        farm.advance();
    }
    Ok(farm.states().to_vec())
}

/// Final states of `n` Gibbs chains from uniform random states.
pub fn gibbs_random(rbm: &RbmModel, n: usize, burn_in: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let farm = GibbsFarm::new(rbm, n, burn_in, seed)?;
    Ok(farm.states().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    /// Samples per estimator, for both the student and the teacher.
    pub n_samples: usize,
    /// Gibbs steps for every teacher chain.
    pub burn_in: usize,
    pub bridge: BridgeConfig,
    /// Random starts for hill climbing.
    pub hill_starts: usize,
    pub seed: u64,
}

impl PartitionConfig {
    /// 10,000 samples, burn-in 2000, ten bridge iterations.
    pub fn reference(seed: u64) -> Self {
        PartitionConfig {
            n_samples: 10_000,
            burn_in: 2000,
            bridge: BridgeConfig::default(),
            hill_starts: 100,
            seed,
        }
    }
}

/// Runs every estimator on an RBM teacher. Upper-bound chains start from
/// random states; bridge chains start from student samples. Appends the
/// enumerated log Z when the RBM is small enough.
pub fn estimate_all<S: DensityModel + ?Sized>(
    rbm: &RbmModel,
    student: &S,
    methods: &[LogZMethod],
    cfg: &PartitionConfig,
) -> Result<Vec<LogZEstimate>> {
    if cfg.n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    check_dim("student dimension", rbm.n_vis, student.dim())?;
    let seed = cfg.seed;
    let needs = |m: LogZMethod| methods.contains(&m);
    let q_samples = if needs(LogZMethod::KlLower) || needs(LogZMethod::Importance) || needs(LogZMethod::Bridge) {
        student_samples(student, cfg.n_samples, child_seed(&mut stream(seed, 0)))
    } else {
        Vec::new()
    };
    let mut out = Vec::new();
    for &m in methods {
        let e = match m {
            LogZMethod::KlUpper => {
                let p = gibbs_random(rbm, cfg.n_samples, cfg.burn_in, seed.wrapping_add(1))?;
                kl_upper_bound(rbm, student, &p, seed)?
            }
            LogZMethod::KlLower => kl_lower_bound(rbm, student, &q_samples, seed)?,
            LogZMethod::Trivial => {
                let mut rng = stream(seed, 3);
                let starts: Vec<Vec<f64>> = (0..cfg.hill_starts.max(1))
                    .map(|_| (0..rbm.n_vis).map(|_| bernoulli(&mut rng, 0.5)).collect())
                    .collect();
                trivial_lower_bound(rbm, &starts, seed)?.0
            }
            LogZMethod::Importance => importance_log_z(rbm, student, &q_samples, seed)?,
            LogZMethod::Bridge => {
                let p = gibbs_from(rbm, q_samples.clone(), cfg.burn_in, seed.wrapping_add(2))?;
                bridge_log_z(rbm, student, &q_samples, &p, &cfg.bridge, seed)?
            }
            LogZMethod::Exact => LogZEstimate::new(LogZMethod::Exact, rbm.exact_log_z()?, 0.0, 0, seed),
        };
        out.push(e);
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_estimates_jsonl(path: &Path, header: &[String], estimates: &[LogZEstimate]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for h in header {
        writeln!(f, "# {h}")?;
    }
    for e in estimates {
        writeln!(f, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}
