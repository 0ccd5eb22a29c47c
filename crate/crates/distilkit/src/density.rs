//! Traits shared by tractable students and unnormalised teachers, plus the
//! diagonal-Gaussian pair used for continuous-domain experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathx::{logsumexp, LN_2PI};
use crate::rbm::bits_into;
use crate::rng::{normal, uniform, Rng};

/// A normalised, differentiable density p(x|θ) with a flat parameter vector.
pub trait DensityModel: Sync {
    fn dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// log p(x|θ); no domain check.
    fn log_density(&self, x: &[f64]) -> f64;
    /// (log p, ∂log p/∂θ, ∂log p/∂x).
    fn grad_log_density(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>);
    /// Hessian of log p over (θ, x) applied to (v_θ, v_x); an empty `v_theta`
    /// means zero.
    fn hvp_log_density(&self, x: &[f64], v_theta: &[f64], v_x: &[f64]) -> (Vec<f64>, Vec<f64>);
    fn draw(&self, rng: &mut Rng) -> Vec<f64>;
    /// Whether x ranges over ℝ^d (score matching needs this).
    fn is_continuous(&self) -> bool;
}

/// An unnormalised density p̃(x) = Z·p(x).
pub trait Unnormalized: Sync {
    fn dim(&self) -> usize;
    fn log_unnorm(&self, x: &[f64]) -> f64;
    /// ∂log p̃/∂x, available for continuous teachers only.
    fn grad_x_log_unnorm(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

impl Unnormalized for crate::rbm::RbmModel {
    fn dim(&self) -> usize {
        self.n_vis
    }
    fn log_unnorm(&self, x: &[f64]) -> f64 {
        self.log_p_tilde(x)
    }
}

/// `log p̃ + κ`; every log Z estimate should move by exactly κ.
pub struct Shifted<'a, T: ?Sized> {
    pub inner: &'a T,
    pub kappa: f64,
}

impl<T: Unnormalized + ?Sized> Unnormalized for Shifted<'_, T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn log_unnorm(&self, x: &[f64]) -> f64 {
        self.inner.log_unnorm(x) + self.kappa
    }
    fn grad_x_log_unnorm(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.inner.grad_x_log_unnorm(x)
    }
}

/// Product of independent normals; θ = (μ₁..μ_d, s₁..s_d) with σ = eˢ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    d: usize,
    theta: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: &[f64], std: &[f64]) -> Self {
        assert_eq!(mean.len(), std.len());
        let mut theta = mean.to_vec();
        theta.extend(std.iter().map(|s| s.ln()));
        DiagGaussian { d: mean.len(), theta }
    }

    pub fn mean(&self) -> &[f64] {
        &self.theta[..self.d]
    }

    pub fn std(&self) -> Vec<f64> {
        self.theta[self.d..].iter().map(|s| s.exp()).collect()
    }
}

impl DensityModel for DiagGaussian {
    fn dim(&self) -> usize {
        self.d
    }
    fn params(&self) -> &[f64] {
        &self.theta
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        (0..self.d)
            .map(|k| {
                let s = self.theta[self.d + k];
                let r = (x[k] - self.theta[k]) * (-s).exp();
                -0.5 * r * r - s - 0.5 * LN_2PI
            })
            .sum()
    }
    fn grad_log_density(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let d = self.d;
        let mut gt = vec![0.0; 2 * d];
        let mut gx = vec![0.0; d];
        for k in 0..d {
            let q = (-2.0 * self.theta[d + k]).exp();
            let r = x[k] - self.theta[k];
            gt[k] = r * q;
            gt[d + k] = r * r * q - 1.0;
            gx[k] = -r * q;
        }
        (self.log_density(x), gt, gx)
    }
    fn hvp_log_density(&self, x: &[f64], v_theta: &[f64], v_x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let mut ht = vec![0.0; 2 * d];
        let mut hx = vec![0.0; d];
        for k in 0..d {
            let q = (-2.0 * self.theta[d + k]).exp();
            let r = x[k] - self.theta[k];
            let (vm, vs) = if v_theta.is_empty() {
                (0.0, 0.0)
            } else {
                (v_theta[k], v_theta[d + k])
            };
            let vx = v_x[k];
            ht[k] = -q * vm - 2.0 * r * q * vs + q * vx;
            ht[d + k] = -2.0 * r * q * vm - 2.0 * r * r * q * vs + 2.0 * r * q * vx;
            hx[k] = q * vm + 2.0 * r * q * vs - q * vx;
        }
        (ht, hx)
    }
    fn draw(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.d)
            .map(|k| self.theta[k] + self.theta[self.d + k].exp() * normal(rng))
            .collect()
    }
    fn is_continuous(&self) -> bool {
        true
    }
}

/// Unnormalised Gaussian teacher: log p̃ = log N(x; μ, diag σ²) + log Z.
#[derive(Clone, Debug)]
pub struct GaussianTeacher {
    pub inner: DiagGaussian,
    pub log_z: f64,
}

impl Unnormalized for GaussianTeacher {
    fn dim(&self) -> usize {
        self.inner.d
    }
    fn log_unnorm(&self, x: &[f64]) -> f64 {
        self.inner.log_density(x) + self.log_z
    }
    fn grad_x_log_unnorm(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.inner.grad_log_density(x).2)
    }
}

/// A distribution over `{0,1}^n`, `n ≤ 20`, stored as a table of
/// log-probabilities. It has no parameters and is used as an exact student.
#[derive(Clone, Debug)]
pub struct TabulatedBinary {
    n: usize,
    log_p: Vec<f64>,
}

impl TabulatedBinary {
    /// Normalises `teacher` by enumeration.
    pub fn from_unnormalized<T: Unnormalized + ?Sized>(teacher: &T) -> Result<Self> {
        let n = teacher.dim();
        if n > crate::rbm::MAX_ENUM_BITS {
            return Err(Error::Config(format!(
                "tabulation needs I <= {}, got {n}",
                crate::rbm::MAX_ENUM_BITS
            )));
        }
        let mut x = vec![0.0; n];
        let lpt: Vec<f64> = (0..1usize << n)
            .map(|s| {
                bits_into(s, &mut x);
                teacher.log_unnorm(&x)
            })
            .collect();
        let lz = logsumexp(&lpt);
        Ok(TabulatedBinary {
            n,
            log_p: lpt.iter().map(|l| l - lz).collect(),
        })
    }

    fn index(x: &[f64]) -> usize {
        x.iter().enumerate().map(|(i, &v)| ((v > 0.5) as usize) << i).sum()
    }
}

impl DensityModel for TabulatedBinary {
    fn dim(&self) -> usize {
        self.n
    }
    fn params(&self) -> &[f64] {
        &[]
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_p[Self::index(x)]
    }
    fn grad_log_density(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        (self.log_density(x), Vec::new(), vec![0.0; self.n])
    }
    fn hvp_log_density(&self, _: &[f64], _: &[f64], _: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (Vec::new(), vec![0.0; self.n])
    }
    fn draw(&self, rng: &mut Rng) -> Vec<f64> {
        let u = uniform(rng);
        let mut acc = 0.0;
        let mut pick = self.log_p.len() - 1;
        for (s, lp) in self.log_p.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                pick = s;
                break;
            }
        }
        let mut x = vec![0.0; self.n];
        bits_into(pick, &mut x);
        x
    }
    fn is_continuous(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{fd_directional, fd_gradient};
    use crate::mathx::rel_err;

    #[test]
    fn gaussian_derivatives_match_finite_differences() {
        let g = DiagGaussian::new(&[0.3, -1.0], &[0.7, 1.9]);
        let x = [1.1, 0.4];
        let (_, gt, gx) = g.grad_log_density(&x);
        let joint = |p: &[f64]| {
            let mut m = g.clone();
            m.params_mut().copy_from_slice(&p[..4]);
            m.log_density(&p[4..])
        };
        let p: Vec<f64> = g.params().iter().chain(&x).copied().collect();
        let fd = fd_gradient(joint, &p, 1e-6);
        let an: Vec<f64> = gt.iter().chain(&gx).copied().collect();
        assert!(rel_err(&fd, &an) < 1e-7);
        let v = [0.2, -0.5, 0.3, 0.1, 0.7, -0.4];
        let grad = |p: &[f64]| {
            let mut m = g.clone();
            m.params_mut().copy_from_slice(&p[..4]);
            let (_, a, b) = m.grad_log_density(&p[4..]);
            a.into_iter().chain(b).collect::<Vec<_>>()
        };
        let fd = fd_directional(grad, &p, &v, 1e-5);
        let (ht, hx) = g.hvp_log_density(&x, &v[..4], &v[4..]);
        let an: Vec<f64> = ht.into_iter().chain(hx).collect();
        assert!(rel_err(&fd, &an) < 1e-7);
    }
}
