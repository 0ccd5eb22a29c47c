//! Binary restricted Boltzmann machine with tractable unnormalised
//! log-probability, block Gibbs sampling and exact enumeration for small `I`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{check_dim, Error, Result};
use crate::mathx::{sigmoid, softplus, StreamingLse};
use crate::rng::{bernoulli, normal, Rng};

const FILE_MAGIC: &[u8; 8] = b"DKRBM\0\0\0";
pub const MAX_ENUM_BITS: usize = 20;

/// `W` is `I × J` row-major (visible-major), `a` the visible and `b` the
/// hidden biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbmModel {
    pub n_vis: usize,
    pub n_hid: usize,
    pub w: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

pub(crate) fn check_binary(x: &[f64]) -> Result<()> {
    match x.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Domain(format!("expected a binary vector, found {v}"))),
        None => Ok(()),
    }
}

impl RbmModel {
    pub fn new(n_vis: usize, n_hid: usize, w: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if n_vis == 0 || n_hid == 0 {
            return Err(Error::Config("RBM needs I, J >= 1".into()));
        }
        check_dim("RBM weights", n_vis * n_hid, w.len())?;
        check_dim("RBM visible biases", n_vis, a.len())?;
        check_dim("RBM hidden biases", n_hid, b.len())?;
        let m = RbmModel { n_vis, n_hid, w, a, b };
        if !m.w.iter().chain(&m.a).chain(&m.b).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("RBM parameters".into()));
        }
        Ok(m)
    }

    pub fn zeros(n_vis: usize, n_hid: usize) -> Self {
        RbmModel::new(
            n_vis,
            n_hid,
            vec![0.0; n_vis * n_hid],
            vec![0.0; n_vis],
            vec![0.0; n_hid],
        )
        .unwrap()
    }

    /// Gaussian parameters: weights with standard deviation `w_scale`, biases
    /// with `bias_scale`.
    pub fn random(n_vis: usize, n_hid: usize, w_scale: f64, bias_scale: f64, rng: &mut Rng) -> Self {
        let mut m = RbmModel::zeros(n_vis, n_hid);
        m.w.iter_mut().for_each(|v| *v = w_scale * normal(rng));
        m.a.iter_mut().for_each(|v| *v = bias_scale * normal(rng));
        m.b.iter_mut().for_each(|v| *v = bias_scale * normal(rng));
        m
    }

    /// z = Wᵀx + b.
    fn hidden_input(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w[i * self.n_hid..(i + 1) * self.n_hid];
            for (zj, wij) in z.iter_mut().zip(row) {
                *zj += xi * wij;
            }
        }
        z
    }

    /// log p̃(x) without the binary check.
    pub fn log_p_tilde(&self, x: &[f64]) -> f64 {
        let ax: f64 = self.a.iter().zip(x).map(|(a, x)| a * x).sum();
        ax + self.hidden_input(x).into_iter().map(softplus).sum::<f64>()
    }

    /// log p̃(x) = aᵀx + Σ_j softplus((Wᵀx + b)_j).
    pub fn unnorm_log_prob(&self, x: &[f64]) -> Result<f64> {
        check_dim("RBM visible vector", self.n_vis, x.len())?;
        check_binary(x)?;
        Ok(self.log_p_tilde(x))
    }

    /// ∂log p̃/∂x for the relaxation of log p̃ to real-valued x.
    pub fn grad_x_log_p_tilde(&self, x: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = self.hidden_input(x).into_iter().map(sigmoid).collect();
        (0..self.n_vis)
            .map(|i| {
                let row = &self.w[i * self.n_hid..(i + 1) * self.n_hid];
                self.a[i] + row.iter().zip(&s).map(|(w, s)| w * s).sum::<f64>()
            })
            .collect()
    }

    pub fn cond_h_given_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("RBM visible vector", self.n_vis, x.len())?;
        Ok(self.hidden_input(x).into_iter().map(sigmoid).collect())
    }

    pub fn cond_x_given_h(&self, h: &[f64]) -> Result<Vec<f64>> {
        check_dim("RBM hidden vector", self.n_hid, h.len())?;
        Ok(self.visible_probs(h))
    }

    fn visible_probs(&self, h: &[f64]) -> Vec<f64> {
        (0..self.n_vis)
            .map(|i| {
                let row = &self.w[i * self.n_hid..(i + 1) * self.n_hid];
                sigmoid(self.a[i] + row.iter().zip(h).map(|(w, h)| w * h).sum::<f64>())
            })
            .collect()
    }

    /// One block-Gibbs alternation x → h → x′.
    pub fn gibbs_step(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        let h: Vec<f64> = self
            .hidden_input(x)
            .into_iter()
            .map(|z| bernoulli(rng, sigmoid(z)))
            .collect();
        self.visible_probs(&h).into_iter().map(|p| bernoulli(rng, p)).collect()
    }

    /// Exact log Z by enumerating all 2^I visible states.
    pub fn exact_log_z(&self) -> Result<f64> {
        if self.n_vis > MAX_ENUM_BITS {
            return Err(Error::Unsupported(format!(
                "exact log Z enumerates 2^I states; I = {} exceeds {MAX_ENUM_BITS}",
                self.n_vis
            )));
        }
        let mut acc = StreamingLse::default();
        let mut x = vec![0.0; self.n_vis];
        for s in 0..(1usize << self.n_vis) {
            bits_into(s, &mut x);
            acc.push(self.log_p_tilde(&x));
        }
        Ok(acc.value())
    }

    /// Best log p̃ found by random restarts followed by greedy single-bit
    /// flips to a local optimum. Always a valid lower bound on log Z.
    pub fn hill_climb_max(&self, restarts: usize, rng: &mut Rng) -> (Vec<f64>, f64) {
        let mut best = (vec![0.0; self.n_vis], self.log_p_tilde(&vec![0.0; self.n_vis]));
        for _ in 0..restarts.max(1) {
            let mut x: Vec<f64> = (0..self.n_vis).map(|_| bernoulli(rng, 0.5)).collect();
            let mut f = self.log_p_tilde(&x);
            loop {
                let mut improved = false;
                for i in 0..self.n_vis {
                    x[i] = 1.0 - x[i];
                    let g = self.log_p_tilde(&x);
                    if g > f {
                        f = g;
                        improved = true;
                    } else {
                        x[i] = 1.0 - x[i];
                    }
                }
                if !improved {
                    break;
                }
            }
            if f > best.1 {
                best = (x, f);
            }
        }
        best
    }

    /// File layout: magic, version, `u64` I, `u64` J, then W row-major, a, b
    /// as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = binio::Writer::new(FILE_MAGIC);
        w.u64(self.n_vis as u64);
        w.u64(self.n_hid as u64);
        for &v in self.w.iter().chain(&self.a).chain(&self.b) {
            w.f64(v);
        }
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = binio::Reader::new(buf, FILE_MAGIC)?;
        let i = r.u64()? as usize;
        let j = r.u64()? as usize;
        let need = i
            .checked_mul(j)
            .and_then(|ij| ij.checked_add(i + j))
            .and_then(|n| n.checked_mul(8))
            .ok_or(Error::Parse {
                offset: 12,
                msg: "implausible RBM dimensions".into(),
            })?;
        if need != buf.len() - r.offset() {
            return Err(Error::Parse {
                offset: r.offset(),
                msg: format!("expected {need} payload bytes, found {}", buf.len() - r.offset()),
            });
        }
        let mut take = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| r.f64()).collect() };
        let w = take(i * j)?;
        let a = take(i)?;
        let b = take(j)?;
        RbmModel::new(i, j, w, a, b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        RbmModel::from_bytes(&binio::read_file(path)?)
    }

    /// Reads whitespace-separated numbers: W row-major (I×J), then a, then b.
    pub fn import_text(text: &str, n_vis: usize, n_hid: usize) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .enumerate()
            .map(|(k, t)| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    offset: k,
                    msg: format!("token {k} ('{t}') is not a number"),
                })
            })
            .collect::<Result<_>>()?;
        let need = n_vis * n_hid + n_vis + n_hid;
        if vals.len() != need {
            return Err(Error::Parse {
                offset: vals.len(),
                msg: format!(
                    "expected {need} numbers for a {n_vis}x{n_hid} RBM, found {}",
                    vals.len()
                ),
            });
        }
        let (w, rest) = vals.split_at(n_vis * n_hid);
        let (a, b) = rest.split_at(n_vis);
        RbmModel::new(n_vis, n_hid, w.to_vec(), a.to_vec(), b.to_vec())
    }
}

/// Writes the bits of `s` (LSB first) into `x` as 0.0/1.0.
pub fn bits_into(s: usize, x: &mut [f64]) {
    for (k, v) in x.iter_mut().enumerate() {
        *v = ((s >> k) & 1) as f64;
    }
}

/// Normalised probabilities of every visible state, indexed as in [`bits_into`].
pub fn enumerate_probs<F: Fn(&[f64]) -> f64>(n: usize, log_f: F) -> Vec<f64> {
    let mut x = vec![0.0; n];
    let lp: Vec<f64> = (0..1usize << n)
        .map(|s| {
            bits_into(s, &mut x);
            log_f(&x)
        })
        .collect();
    let lz = crate::mathx::logsumexp(&lp);
    lp.iter().map(|v| (v - lz).exp()).collect()
}
