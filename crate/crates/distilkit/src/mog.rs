//! Mixtures of Gaussians: density, sampling, and batch and online EM.
//!
//! EM works on the per-component sufficient statistics Φ₁ = Σ_n r_n,
//! Φ₂ = Σ_n r_n x_n and Φ₃ = Σ_n r_n x_n x_nᵀ, where r_n is the
//! responsibility. The online variant keeps a running average
//! Φ ← (1 − α)Φ + αΦ′ of per-datum statistics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mathx::{logsumexp, LN_2PI};
use crate::rng::{below, normal, seeded, uniform, Rng};

pub const COLLAPSE_FRACTION: f64 = 1e-8;
pub const JITTER_FRACTION: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoGParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Covariances, `d × d` row-major.
    pub covs: Vec<Vec<f64>>,
}

/// Per-component sufficient statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SuffStats {
    pub phi1: Vec<f64>,
    pub phi2: Vec<Vec<f64>>,
    pub phi3: Vec<Vec<f64>>,
}

impl SuffStats {
    fn zeros(c: usize, d: usize) -> Self {
        SuffStats {
            phi1: vec![0.0; c],
            phi2: vec![vec![0.0; d]; c],
            phi3: vec![vec![0.0; d * d]; c],
        }
    }

    fn add(&mut self, o: &SuffStats) {
        for i in 0..self.phi1.len() {
            self.phi1[i] += o.phi1[i];
            for (a, b) in self.phi2[i].iter_mut().zip(&o.phi2[i]) {
                *a += b;
            }
            for (a, b) in self.phi3[i].iter_mut().zip(&o.phi3[i]) {
                *a += b;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for i in 0..self.phi1.len() {
            self.phi1[i] *= s;
            self.phi2[i].iter_mut().for_each(|v| *v *= s);
            self.phi3[i].iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Φ ← (1 − α)Φ + αΦ′.
    pub fn interpolate(&mut self, new: &SuffStats, alpha: f64) {
        self.scale(1.0 - alpha);
        let mut n = new.clone();
        n.scale(alpha);
        self.add(&n);
    }
}

/// Lower Cholesky factor of a `d × d` matrix, or `None` if not positive definite.
pub fn cholesky(d: usize, a: &[f64]) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Component parameters in a form ready for repeated density evaluation.
pub struct Prepared {
    d: usize,
    log_w: Vec<f64>,
    means: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
    log_norm: Vec<f64>,
}

impl Prepared {
    /// log π_i + log N(x; m_i, S_i) for every component.
    pub fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        (0..self.means.len())
            .map(|i| {
                let l = &self.chol[i];
                let mut y = vec![0.0; d];
                let mut q = 0.0;
                for r in 0..d {
                    let mut s = x[r] - self.means[i][r];
                    for k in 0..r {
                        s -= l[r * d + k] * y[k];
                    }
                    y[r] = s / l[r * d + r];
                    q += y[r] * y[r];
                }
                self.log_w[i] + self.log_norm[i] - 0.5 * q
            })
            .collect()
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        logsumexp(&self.component_log_densities(x))
    }
}

impl MoGParams {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<f64>>) -> Result<Self> {
        let c = weights.len();
        if c == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        check_dim("mixture means", c, means.len())?;
        check_dim("mixture covariances", c, covs.len())?;
        let d = means[0].len();
        for i in 0..c {
            check_dim("mixture mean", d, means[i].len())?;
            check_dim("mixture covariance", d * d, covs[i].len())?;
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(
                "mixture weights must be non-negative and sum to 1".into(),
            ));
        }
        Ok(MoGParams { weights, means, covs })
    }

    /// One-dimensional mixture from weights, means and variances.
    pub fn univariate(weights: &[f64], means: &[f64], vars: &[f64]) -> Result<Self> {
        MoGParams::new(
            weights.to_vec(),
            means.iter().map(|&m| vec![m]).collect(),
            vars.iter().map(|&v| vec![v]).collect(),
        )
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let d = self.dim();
        let mut chol = Vec::with_capacity(self.n_components());
        let mut log_norm = Vec::with_capacity(self.n_components());
        for (i, s) in self.covs.iter().enumerate() {
            let l = cholesky(d, s).ok_or_else(|| Error::Domain(format!("covariance of component {i} is not SPD")))?;
            let logdet: f64 = (0..d).map(|k| 2.0 * l[k * d + k].ln()).sum();
            log_norm.push(-0.5 * (d as f64 * LN_2PI + logdet));
            chol.push(l);
        }
        Ok(Prepared {
            d,
            log_w: self.weights.iter().map(|w| w.ln()).collect(),
            means: self.means.clone(),
            chol,
            log_norm,
        })
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        check_dim("mixture input", self.dim(), x.len())?;
        Ok(self.prepare()?.logpdf(x))
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        let d = self.dim();
        let u = uniform(rng);
        let mut acc = 0.0;
        let mut i = self.n_components() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                i = k;
                break;
            }
        }
        let l = cholesky(d, &self.covs[i])
            .ok_or_else(|| Error::Domain(format!("covariance of component {i} is not SPD")))?;
        let z: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        Ok((0..d)
            .map(|r| self.means[i][r] + (0..=r).map(|k| l[r * d + k] * z[k]).sum::<f64>())
            .collect())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Sufficient statistics of `data` under `params`, and the total log-likelihood.
pub fn suff_stats(params: &MoGParams, data: &[Vec<f64>]) -> Result<(SuffStats, f64)> {
    let prep = params.prepare()?;
    let (c, d) = (params.n_components(), params.dim());
    let parts: Vec<(SuffStats, f64)> = data
        .par_chunks(512)
        .map(|chunk| {
            let mut s = SuffStats::zeros(c, d);
            let mut ll = 0.0;
            for x in chunk {
                let lc = prep.component_log_densities(x);
                let lse = logsumexp(&lc);
                ll += lse;
                for i in 0..c {
                    let r = (lc[i] - lse).exp();
                    s.phi1[i] += r;
                    for a in 0..d {
                        s.phi2[i][a] += r * x[a];
                        for b in 0..d {
                            s.phi3[i][a * d + b] += r * x[a] * x[b];
                        }
                    }
                }
            }
            (s, ll)
        })
        .collect();
    let mut total = SuffStats::zeros(c, d);
    let mut ll = 0.0;
    for (s, l) in parts {
        total.add(&s);
        ll += l;
    }
    Ok((total, ll))
}

/// Responsibilities of each component for one point; they sum to 1.
pub fn responsibilities(params: &MoGParams, x: &[f64]) -> Result<Vec<f64>> {
    let lc = params.prepare()?.component_log_densities(x);
    let lse = logsumexp(&lc);
    Ok(lc.iter().map(|v| (v - lse).exp()).collect())
}

fn data_covariance(data: &[Vec<f64>]) -> Vec<f64> {
    let d = data[0].len();
    let n = data.len() as f64;
    let mut m = vec![0.0; d];
    for x in data {
        for a in 0..d {
            m[a] += x[a] / n;
        }
    }
    let mut s = vec![0.0; d * d];
    for x in data {
        for a in 0..d {
            for b in 0..d {
                s[a * d + b] += (x[a] - m[a]) * (x[b] - m[b]) / n;
            }
        }
    }
    for a in 0..d {
        if !(s[a * d + a] > 0.0) {
            s[a * d + a] = 1.0;
        }
    }
    s
}

/// Makes `s` positive definite by adding growing multiples of
/// 1e−8·tr(S)/d·I until Cholesky succeeds.
fn ensure_spd(d: usize, s: &mut [f64], events: &mut Vec<String>, comp: usize) {
    for a in 0..d {
        for b in 0..a {
            let v = 0.5 * (s[a * d + b] + s[b * d + a]);
            s[a * d + b] = v;
            s[b * d + a] = v;
        }
    }
    if cholesky(d, s).is_some() {
        return;
    }
    let tr: f64 = (0..d).map(|a| s[a * d + a]).sum::<f64>().abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_FRACTION * tr / d as f64;
    for _ in 0..60 {
        for a in 0..d {
            s[a * d + a] += jitter;
        }
        if cholesky(d, s).is_some() {
            events.push(format!("component {comp}: covariance jitter {jitter:e}"));
            return;
        }
        jitter *= 10.0;
    }
}

/// M-step. Components whose Φ₁ falls below `collapse` are re-seeded at a
/// random data point with the data covariance.
fn m_step(stats: &SuffStats, collapse: f64, data: &[Vec<f64>], rng: &mut Rng, events: &mut Vec<String>) -> MoGParams {
    let c = stats.phi1.len();
    let d = stats.phi2[0].len();
    let mut weights = vec![0.0; c];
    let mut means = vec![vec![0.0; d]; c];
    let mut covs = vec![vec![0.0; d * d]; c];
    let total: f64 = stats.phi1.iter().sum();
    for i in 0..c {
        let p1 = stats.phi1[i];
        if !(p1 >= collapse) || p1 <= 0.0 {
            let k = below(rng, data.len());
            means[i] = data[k].clone();
            covs[i] = data_covariance(data);
            weights[i] = 1.0 / c as f64;
            events.push(format!(
                "component {i} collapsed (phi1 = {p1:e}); re-seeded at point {k}"
            ));
            continue;
        }
        weights[i] = p1 / total;
        for a in 0..d {
            means[i][a] = stats.phi2[i][a] / p1;
        }
        for a in 0..d {
            for b in 0..d {
                covs[i][a * d + b] = stats.phi3[i][a * d + b] / p1 - means[i][a] * means[i][b];
            }
        }
        ensure_spd(d, &mut covs[i], events, i);
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    MoGParams { weights, means, covs }
}

/// k-means++ seeding on at most 1000 points; equal weights, data covariance.
pub fn kmeans_pp_init(data: &[Vec<f64>], c: usize, rng: &mut Rng) -> MoGParams {
    let sub: Vec<&Vec<f64>> = if data.len() > 1000 {
        (0..1000).map(|_| &data[below(rng, data.len())]).collect()
    } else {
        data.iter().collect()
    };
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers: Vec<Vec<f64>> = vec![sub[below(rng, sub.len())].clone()];
    while centers.len() < c {
        let dd: Vec<f64> = sub
            .iter()
            .map(|x| centers.iter().map(|m| dist2(x, m)).fold(f64::INFINITY, f64::min))
            .collect();
        let tot: f64 = dd.iter().sum();
        let next = if tot > 0.0 {
            let u = uniform(rng) * tot;
            let mut acc = 0.0;
            let mut pick = sub.len() - 1;
            for (k, v) in dd.iter().enumerate() {
                acc += v;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            pick
        } else {
            below(rng, sub.len())
        };
        centers.push(sub[next].clone());
    }
    let cov = data_covariance(data);
    MoGParams {
        weights: vec![1.0 / c as f64; c],
        means: centers,
        covs: vec![cov; c],
    }
}

#[derive(Clone, Debug)]
pub enum EmInit {
    KMeansPlusPlus,
    Given(MoGParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub components: usize,
    pub max_iters: usize,
    /// Stop when the relative change of the mean log-likelihood is below this.
    pub tol: f64,
    pub seed: u64,
}

impl EmConfig {
    pub fn new(components: usize, seed: u64) -> Self {
        EmConfig {
            components,
            max_iters: 1000,
            tol: 1e-8,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmResult {
    pub params: MoGParams,
    /// Mean log-likelihood per datum after each evaluation; the first entry is
    /// the initialisation.
    pub loglik: Vec<f64>,
    pub iterations: usize,
    pub events: Vec<String>,
}

pub fn em_batch(data: &[Vec<f64>], cfg: &EmConfig, init: EmInit) -> Result<EmResult> {
    let n = data.len();
    if n < cfg.components || cfg.components == 0 {
        return Err(Error::Config(format!(
            "EM needs N >= C >= 1 (N = {n}, C = {})",
            cfg.components
        )));
    }
    let d = data[0].len();
    if data.iter().any(|x| x.len() != d || !crate::mathx::all_finite(x)) {
        return Err(Error::Domain("EM data must be finite with a common dimension".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut params = match init {
        EmInit::KMeansPlusPlus => kmeans_pp_init(data, cfg.components, &mut rng),
        EmInit::Given(p) => {
            check_dim("EM init components", cfg.components, p.n_components())?;
            p
        }
    };
    let collapse = COLLAPSE_FRACTION * n as f64;
    let mut events = Vec::new();
    let (mut stats, ll) = suff_stats(&params, data)?;
    let mut trace = vec![ll / n as f64];
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        params = m_step(&stats, collapse, data, &mut rng, &mut events);
        let (s, ll) = suff_stats(&params, data)?;
        stats = s;
        iterations += 1;
        let cur = ll / n as f64;
        let prev = *trace.last().unwrap();
        trace.push(cur);
        if !cur.is_finite() {
            return Err(Error::Numerical("EM log-likelihood became non-finite".into()));
        }
        if ((cur - prev) / prev.abs().max(1e-300)).abs() < cfg.tol {
            break;
        }
    }
    Ok(EmResult {
        params,
        loglik: trace,
        iterations,
        events,
    })
}

/// Online EM over a stream of minibatches.
#[derive(Clone, Debug)]
pub struct OnlineEm {
    pub params: MoGParams,
    stats: Option<SuffStats>,
    rng: Rng,
    pub steps: usize,
    pub events: Vec<String>,
}

impl OnlineEm {
    pub fn new(init: MoGParams, seed: u64) -> Self {
        OnlineEm {
            params: init,
            stats: None,
            rng: seeded(seed),
            steps: 0,
            events: Vec::new(),
        }
    }

    /// Initialises by a batch EM fit of the first minibatch.
    pub fn from_first_batch(batch: &[Vec<f64>], cfg: &EmConfig) -> Result<Self> {
        let fit = em_batch(batch, cfg, EmInit::KMeansPlusPlus)?;
        Ok(OnlineEm::new(fit.params, cfg.seed.wrapping_add(1)))
    }

    /// Per-datum statistics of `batch`, interpolated into the running average
    /// with weight `alpha`. The first call copies the statistics outright.
    pub fn step(&mut self, batch: &[Vec<f64>], alpha: f64) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("online EM minibatch is empty".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("online EM step size {alpha} outside [0,1]")));
        }
        let (mut s, _) = suff_stats(&self.params, batch)?;
        s.scale(1.0 / batch.len() as f64);
        match &mut self.stats {
            Some(run) => run.interpolate(&s, alpha),
            None => self.stats = Some(s),
        }
        let run = self.stats.as_ref().unwrap();
        self.params = m_step(run, COLLAPSE_FRACTION, batch, &mut self.rng, &mut self.events);
        self.steps += 1;
        Ok(())
    }

    pub fn running_stats(&self) -> Option<&SuffStats> {
        self.stats.as_ref()
    }
}

/// ∫|p − q| over a uniform 1-D grid by the rectangle rule.
pub fn grid_l1(p: &[f64], q: &[f64], dx: f64) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() * dx
}
