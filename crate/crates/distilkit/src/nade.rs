//! Binary NADE with one hidden layer.
//!
//! Parameters, flat: `U` (I×J), `b` (I), `W` ((I−1)×J), `c` (J). Variables are
//! processed in the model ordering `ordering`; inputs and outputs of every
//! public method are in data ordering, so the permutation is applied only at
//! the boundary.
//!
//! Forward recursion: a₁ = c, a_i = a_{i−1} + w_{i−1}x_{i−1}, h_i = σ(a_i),
//! z_i = u_i·h_i + b_i, x̂_i = σ(z_i). The cumulative sum keeps every pass
//! at O(IJ).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::density::DensityModel;
use crate::error::{check_dim, Error, Result};
use crate::mathx::{clamp_open, sigmoid};
use crate::optim::{batch_mean, sgd_train, TrainConfig, TrainReport, UpdateRule};
use crate::rbm::check_binary;
use crate::rng::{bernoulli, uniform, Rng};

const MAGIC: &[u8; 8] = b"DKNADE\0\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NadeModel {
    n_in: usize,
    n_hid: usize,
    params: Vec<f64>,
    ordering: Vec<usize>,
}

/// Forward quantities in model ordering.
#[derive(Clone, Debug)]
pub struct NadeTrace {
    pub x: Vec<f64>,
    /// Hidden states, `I × J` row-major.
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub xhat: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Layout {
    i: usize,
    j: usize,
}

impl Layout {
    fn u(&self) -> usize {
        0
    }
    fn b(&self) -> usize {
        self.i * self.j
    }
    fn w(&self) -> usize {
        self.i * self.j + self.i
    }
    fn c(&self) -> usize {
        self.w() + (self.i - 1) * self.j
    }
    fn total(&self) -> usize {
        self.c() + self.j
    }
}

impl NadeModel {
    /// All parameters zero, identity ordering.
    pub fn zeros(n_in: usize, n_hid: usize) -> Result<Self> {
        if n_in == 0 || n_hid == 0 {
            return Err(Error::Config("NADE needs I, J >= 1".into()));
        }
        let l = Layout { i: n_in, j: n_hid };
        Ok(NadeModel {
            n_in,
            n_hid,
            params: vec![0.0; l.total()],
            ordering: (0..n_in).collect(),
        })
    }

    /// Weights uniform in ±√(6/(I+J)); `b` and `c` zero.
    pub fn random(n_in: usize, n_hid: usize, rng: &mut Rng) -> Result<Self> {
        let mut m = NadeModel::zeros(n_in, n_hid)?;
        let r = (6.0 / (n_in + n_hid) as f64).sqrt();
        let l = m.layout();
        for k in (l.u()..l.b()).chain(l.w()..l.c()) {
            m.params[k] = r * (2.0 * uniform(rng) - 1.0);
        }
        Ok(m)
    }

    pub fn with_ordering(mut self, ordering: Vec<usize>) -> Result<Self> {
        check_dim("NADE ordering", self.n_in, ordering.len())?;
        let mut seen = vec![false; self.n_in];
        for &o in &ordering {
            if o >= self.n_in || seen[o] {
                return Err(Error::Config("ordering is not a permutation".into()));
            }
            seen[o] = true;
        }
        self.ordering = ordering;
        Ok(self)
    }

    fn layout(&self) -> Layout {
        Layout {
            i: self.n_in,
            j: self.n_hid,
        }
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hid
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn to_model_order(&self, x: &[f64]) -> Vec<f64> {
        self.ordering.iter().map(|&k| x[k]).collect()
    }

    pub fn to_data_order(&self, xo: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_in];
        for (k, &o) in self.ordering.iter().enumerate() {
            x[o] = xo[k];
        }
        x
    }

    fn forward_ordered(&self, xo: &[f64]) -> (f64, NadeTrace) {
        let l = self.layout();
        let (ni, nj) = (l.i, l.j);
        let p = &self.params;
        let mut a = p[l.c()..l.c() + nj].to_vec();
        let mut h = vec![0.0; ni * nj];
        let mut z = vec![0.0; ni];
        let mut xhat = vec![0.0; ni];
        let mut ll = 0.0;
        for i in 0..ni {
            let hi = &mut h[i * nj..(i + 1) * nj];
            let u = &p[l.u() + i * nj..l.u() + (i + 1) * nj];
            let mut zi = p[l.b() + i];
            for k in 0..nj {
                hi[k] = sigmoid(a[k]);
                zi += u[k] * hi[k];
            }
            let q = clamp_open(sigmoid(zi));
            z[i] = zi;
            xhat[i] = q;
            let xi = xo[i];
            if xi != 0.0 {
                ll += xi * q.ln();
            }
            if xi != 1.0 {
                ll += (1.0 - xi) * (1.0 - q).ln();
            }
            if i + 1 < ni && xi != 0.0 {
                let w = &p[l.w() + i * nj..l.w() + (i + 1) * nj];
                for k in 0..nj {
                    a[k] += w[k] * xi;
                }
            }
        }
        (
            ll,
            NadeTrace {
                x: xo.to_vec(),
                h,
                z,
                xhat,
            },
        )
    }

    /// Exact log-probability of a binary vector, with its forward trace.
    pub fn log_prob(&self, x: &[f64]) -> Result<(f64, NadeTrace)> {
        check_dim("NADE input", self.n_in, x.len())?;
        check_binary(x)?;
        Ok(self.forward_ordered(&self.to_model_order(x)))
    }

    /// The same quantity evaluated on the relaxation x ∈ [0,1]^I.
    pub fn log_prob_relaxed(&self, x: &[f64]) -> f64 {
        self.forward_ordered(&self.to_model_order(x)).0
    }

    /// p(x_i = 1 | x_<i) for every i, in data ordering.
    pub fn conditionals(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, tr) = self.log_prob(x)?;
        Ok(self.to_data_order(&tr.xhat))
    }

    /// Ancestral sample; returns the sample and the conditionals along it.
    pub fn sample(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let l = self.layout();
        let (ni, nj) = (l.i, l.j);
        let p = &self.params;
        let mut a = p[l.c()..l.c() + nj].to_vec();
        let mut xo = vec![0.0; ni];
        let mut xh = vec![0.0; ni];
        for i in 0..ni {
            let u = &p[l.u() + i * nj..l.u() + (i + 1) * nj];
            let mut zi = p[l.b() + i];
            for k in 0..nj {
                zi += u[k] * sigmoid(a[k]);
            }
            let q = clamp_open(sigmoid(zi));
            xh[i] = q;
            xo[i] = bernoulli(rng, q);
            if i + 1 < ni && xo[i] != 0.0 {
                let w = &p[l.w() + i * nj..l.w() + (i + 1) * nj];
                for k in 0..nj {
                    a[k] += w[k];
                }
            }
        }
        (self.to_data_order(&xo), self.to_data_order(&xh))
    }

    fn backward(&self, tr: &NadeTrace) -> (Vec<f64>, Vec<f64>) {
        let l = self.layout();
        let (ni, nj) = (l.i, l.j);
        let p = &self.params;
        let mut g = vec![0.0; l.total()];
        let mut gx = vec![0.0; ni];
        let mut acc = vec![0.0; nj];
        for i in (0..ni).rev() {
            let d = tr.x[i] - tr.xhat[i];
            let h = &tr.h[i * nj..(i + 1) * nj];
            let u = &p[l.u() + i * nj..l.u() + (i + 1) * nj];
            g[l.b() + i] = d;
            let mut gxi = tr.z[i];
            if i + 1 < ni {
                let w = &p[l.w() + i * nj..l.w() + (i + 1) * nj];
                let gw = &mut g[l.w() + i * nj..l.w() + (i + 1) * nj];
                for k in 0..nj {
                    gw[k] = acc[k] * tr.x[i];
                    gxi += acc[k] * w[k];
                }
            }
            gx[i] = gxi;
            let gu = &mut g[l.u() + i * nj..l.u() + (i + 1) * nj];
            for k in 0..nj {
                gu[k] = d * h[k];
                acc[k] += d * u[k] * h[k] * (1.0 - h[k]);
            }
        }
        g[l.c()..l.c() + nj].copy_from_slice(&acc);
        (g, gx)
    }

    /// (L, ∂L/∂θ, ∂L/∂x) for a binary x.
    pub fn grad_log_prob(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (ll, tr) = self.log_prob(x)?;
        let (g, gx) = self.backward(&tr);
        Ok((ll, g, self.to_data_order(&gx)))
    }

    fn grad_relaxed(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let (ll, tr) = self.forward_ordered(&self.to_model_order(x));
        let (g, gx) = self.backward(&tr);
        (ll, g, self.to_data_order(&gx))
    }

    /// Hessian of L over (θ, x) applied to `(v_theta, v_x)`; `v_x` is in data
    /// ordering and an empty `v_theta` stands for zero.
    pub fn hvp_log_prob(&self, x: &[f64], v_theta: &[f64], v_x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("NADE input", self.n_in, x.len())?;
        check_dim("NADE v_x", self.n_in, v_x.len())?;
        if !v_theta.is_empty() {
            check_dim("NADE v_theta", self.n_params(), v_theta.len())?;
        }
        Ok(self.hvp_relaxed(x, v_theta, v_x))
    }

    fn hvp_relaxed(&self, x: &[f64], v_theta: &[f64], v_x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let l = self.layout();
        let (ni, nj) = (l.i, l.j);
        let p = &self.params;
        let xo = self.to_model_order(x);
        let rxo = self.to_model_order(v_x);
        let zero = vec![0.0; l.total()];
        let vt: &[f64] = if v_theta.is_empty() { &zero } else { v_theta };
        let (_, tr) = self.forward_ordered(&xo);

        // R-forward
        let mut ra = vt[l.c()..l.c() + nj].to_vec();
        let mut rh = vec![0.0; ni * nj];
        let mut rz = vec![0.0; ni];
        let mut rxh = vec![0.0; ni];
        for i in 0..ni {
            let h = &tr.h[i * nj..(i + 1) * nj];
            let u = &p[l.u() + i * nj..l.u() + (i + 1) * nj];
            let vu = &vt[l.u() + i * nj..l.u() + (i + 1) * nj];
            let rhi = &mut rh[i * nj..(i + 1) * nj];
            let mut r = vt[l.b() + i];
            for k in 0..nj {
                rhi[k] = h[k] * (1.0 - h[k]) * ra[k];
                r += vu[k] * h[k] + u[k] * rhi[k];
            }
            rz[i] = r;
            rxh[i] = tr.xhat[i] * (1.0 - tr.xhat[i]) * r;
            if i + 1 < ni {
                let w = &p[l.w() + i * nj..l.w() + (i + 1) * nj];
                let vw = &vt[l.w() + i * nj..l.w() + (i + 1) * nj];
                for k in 0..nj {
                    ra[k] += vw[k] * xo[i] + w[k] * rxo[i];
                }
            }
        }

        // R-backward
        let mut hg = vec![0.0; l.total()];
        let mut hx = vec![0.0; ni];
        let mut acc = vec![0.0; nj];
        let mut racc = vec![0.0; nj];
        for i in (0..ni).rev() {
            let d = xo[i] - tr.xhat[i];
            let rd = rxo[i] - rxh[i];
            let h = &tr.h[i * nj..(i + 1) * nj];
            let rhi = &rh[i * nj..(i + 1) * nj];
            let u = &p[l.u() + i * nj..l.u() + (i + 1) * nj];
            let vu = &vt[l.u() + i * nj..l.u() + (i + 1) * nj];
            hg[l.b() + i] = rd;
            let mut hxi = rz[i];
            if i + 1 < ni {
                let w = &p[l.w() + i * nj..l.w() + (i + 1) * nj];
                let vw = &vt[l.w() + i * nj..l.w() + (i + 1) * nj];
                let hw = &mut hg[l.w() + i * nj..l.w() + (i + 1) * nj];
                for k in 0..nj {
                    hw[k] = racc[k] * xo[i] + acc[k] * rxo[i];
                    hxi += racc[k] * w[k] + acc[k] * vw[k];
                }
            }
            hx[i] = hxi;
            let hu = &mut hg[l.u() + i * nj..l.u() + (i + 1) * nj];
            for k in 0..nj {
                let s = h[k] * (1.0 - h[k]);
                hu[k] = rd * h[k] + d * rhi[k];
                acc[k] += d * u[k] * s;
                racc[k] += rd * u[k] * s + d * vu[k] * s + d * u[k] * (1.0 - 2.0 * h[k]) * rhi[k];
            }
        }
        hg[l.c()..l.c() + nj].copy_from_slice(&racc);
        (hg, self.to_data_order(&hx))
    }

    /// Maximum-likelihood training on minibatches from `next_batch`.
    /// The reported loss is the mean negative log-likelihood.
    pub fn train_mle<B, P>(
        &mut self,
        cfg: &TrainConfig,
        rule: UpdateRule,
        mut next_batch: B,
        probe: Option<P>,
    ) -> Result<TrainReport>
    where
        B: FnMut(usize) -> Result<Vec<Vec<f64>>>,
        P: FnMut(&NadeModel) -> Result<f64>,
    {
        let mut work = self.clone();
        let mut probe_model = self.clone();
        let mut theta = self.params.clone();
        let mut probe = probe;
        let report = sgd_train(
            cfg,
            &mut theta,
            rule,
            |th, _| {
                work.params.copy_from_slice(th);
                let batch = next_batch(cfg.batch_size)?;
                for x in &batch {
                    check_binary(x)?;
                }
                let (nll, g) = batch_mean(&batch, |x| {
                    let (ll, g, _) = work.grad_relaxed(x);
                    (-ll, g)
                });
                Ok((nll, g.into_iter().map(|v| -v).collect()))
            },
            probe.as_mut().map(|p| {
                move |th: &[f64]| {
                    probe_model.params.copy_from_slice(th);
                    p(&probe_model)
                }
            }),
        )?;
        self.params = theta;
        Ok(report)
    }

    /// Mean log-probability over a set of binary vectors.
    pub fn mean_log_prob(&self, xs: &[Vec<f64>]) -> Result<f64> {
        let lp: Vec<f64> = xs
            .par_iter()
            .map(|x| self.log_prob(x).map(|v| v.0))
            .collect::<Result<_>>()?;
        Ok(lp.iter().sum::<f64>() / lp.len().max(1) as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u64(self.n_in as u64);
        w.u64(self.n_hid as u64);
        w.usizes(&self.ordering);
        w.f64s(&self.params);
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, MAGIC)?;
        let n_in = r.u64()? as usize;
        let n_hid = r.u64()? as usize;
        if n_in == 0 || n_hid == 0 || n_in.saturating_mul(n_hid) > buf.len() {
            return Err(Error::Parse {
                offset: 12,
                msg: "implausible NADE dimensions".into(),
            });
        }
        let ordering = r.usizes()?;
        let params = r.f64s()?;
        r.finish()?;
        let mut m = NadeModel::zeros(n_in, n_hid)?.with_ordering(ordering)?;
        check_dim("NADE params", m.params.len(), params.len())?;
        if !crate::mathx::all_finite(&params) {
            return Err(Error::NonFinite("NADE parameters".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        NadeModel::from_bytes(&binio::read_file(path)?)
    }
}

impl DensityModel for NadeModel {
    fn dim(&self) -> usize {
        self.n_in
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_prob_relaxed(x)
    }
    fn grad_log_density(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        self.grad_relaxed(x)
    }
    fn hvp_log_density(&self, x: &[f64], v_theta: &[f64], v_x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.hvp_relaxed(x, v_theta, v_x)
    }
    fn draw(&self, rng: &mut Rng) -> Vec<f64> {
        self.sample(rng).0
    }
    fn is_continuous(&self) -> bool {
        false
    }
}
