//! Feedforward networks with exact gradients and Hessian-vector products.
//!
//! Parameters of all layers live in one flat vector: for each layer the
//! `n_out × n_in` weight matrix (row-major) followed by the `n_out` biases.
//! [`Gradients`] and [`RDirection`] use the same layout, so optimizers can
//! treat a network as a plain parameter vector.
//!
//! The Hessian-vector product is computed with the R-operator applied to the
//! forward and backward passes: [`Network::r_forward`] then
//! [`Network::r_backprop`]. The cost of the pair is a small constant times one
//! gradient evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{check_dim, Error, Result};
use crate::mathx::{clamp_open, norm_cdf, norm_pdf, sigmoid};
use crate::rng::{uniform, Rng};

const MAGIC: &[u8; 8] = b"DKNET\0\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Linear,
    Relu,
    Logistic,
    Probit,
    Softmax,
    LogSoftmax,
}

impl Nonlinearity {
    pub const ALL: [Nonlinearity; 6] = [
        Nonlinearity::Linear,
        Nonlinearity::Relu,
        Nonlinearity::Logistic,
        Nonlinearity::Probit,
        Nonlinearity::Softmax,
        Nonlinearity::LogSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Linear => "linear",
            Nonlinearity::Relu => "relu",
            Nonlinearity::Logistic => "logistic",
            Nonlinearity::Probit => "probit",
            Nonlinearity::Softmax => "softmax",
            Nonlinearity::LogSoftmax => "logsoftmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|n| n.name() == s.to_ascii_lowercase())
            .or(match s {
                "sigmoid" => Some(Nonlinearity::Logistic),
                _ => None,
            })
    }

    /// Softmax-type layers couple all units; the rest act unit by unit.
    pub fn is_elementwise(self) -> bool {
        !matches!(self, Nonlinearity::Softmax | Nonlinearity::LogSoftmax)
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub n_in: usize,
    pub n_out: usize,
    pub act: Nonlinearity,
}

impl LayerSpec {
    pub fn n_params(&self) -> usize {
        self.n_out * self.n_in + self.n_out
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkRepr {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRepr", into = "NetworkRepr")]
pub struct Network {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl TryFrom<NetworkRepr> for Network {
    type Error = Error;
    fn try_from(r: NetworkRepr) -> Result<Self> {
        let mut net = Network::new(r.layers)?;
        check_dim("network params", net.n_params(), r.params.len())?;
        net.params = r.params;
        net.check_finite()?;
        Ok(net)
    }
}

impl From<Network> for NetworkRepr {
    fn from(n: Network) -> Self {
        NetworkRepr {
            layers: n.layers,
            params: n.params,
        }
    }
}

/// Values stored by the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `xs[0]` is the input, `xs[l+1]` the output of layer `l`.
    pub xs: Vec<Vec<f64>>,
    pub zs: Vec<Vec<f64>>,
    /// ∂φ/∂z for elementwise layers; empty for softmax-type layers, whose
    /// Jacobian is applied implicitly from the outputs.
    pub dphi: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.xs.last().unwrap()
    }
}

/// R{·} of every forward quantity.
#[derive(Clone, Debug)]
pub struct RTrace {
    pub rxs: Vec<Vec<f64>>,
    pub rzs: Vec<Vec<f64>>,
    pub rdphi: Vec<Vec<f64>>,
}

impl RTrace {
    pub fn output(&self) -> &[f64] {
        self.rxs.last().unwrap()
    }
}

/// Derivatives with respect to all parameters (flat layout) and the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
}

impl Gradients {
    pub fn zeros(n_params: usize, n_in: usize) -> Self {
        Gradients {
            theta: vec![0.0; n_params],
            x: vec![0.0; n_in],
        }
    }
}

/// Direction `v = (v_θ, v_x)` for a Hessian-vector product. An empty `theta`
/// block stands for the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct RDirection {
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
}

impl RDirection {
    pub fn new(theta: Vec<f64>, x: Vec<f64>) -> Self {
        RDirection { theta, x }
    }

    pub fn input_only(x: Vec<f64>) -> Self {
        RDirection { theta: Vec::new(), x }
    }
}

impl Network {
    /// Builds a network with all parameters zero.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            check_dim("layer chaining", w[0].n_out, w[1].n_in)?;
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut off = 0;
        for l in &layers {
            if l.n_in == 0 || l.n_out == 0 {
                return Err(Error::Config("layer dimensions must be positive".into()));
            }
            offsets.push(off);
            off += l.n_params();
        }
        offsets.push(off);
        Ok(Network {
            layers,
            offsets,
            params: vec![0.0; off],
        })
    }

    /// Parses `"784-relu-50-relu-30-logsoftmax-10"`: dimensions alternate
    /// with the nonlinearity of the layer producing the next dimension.
    pub fn from_arch(arch: &str) -> Result<Self> {
        let toks: Vec<&str> = arch.split('-').map(str::trim).collect();
        if toks.len() < 3 || toks.len().is_multiple_of(2) {
            return Err(Error::Config(format!("malformed architecture '{arch}'")));
        }
        let dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad dimension '{s}' in '{arch}'")))
        };
        let mut layers = Vec::new();
        let mut n_in = dim(toks[0])?;
        for pair in toks[1..].chunks(2) {
            let act = Nonlinearity::parse(pair[0])
                .ok_or_else(|| Error::Config(format!("unknown nonlinearity '{}'", pair[0])))?;
            let n_out = dim(pair[1])?;
            layers.push(LayerSpec { n_in, n_out, act });
            n_in = n_out;
        }
        Network::new(layers)
    }

    pub fn random(arch: &str, rng: &mut Rng) -> Result<Self> {
        let mut n = Network::from_arch(arch)?;
        n.init_uniform(rng);
        Ok(n)
    }

    pub fn arch(&self) -> String {
        let mut s = self.layers[0].n_in.to_string();
        for l in &self.layers {
            s.push('-');
            s.push_str(l.act.name());
            s.push('-');
            s.push_str(&l.n_out.to_string());
        }
        s
    }

    /// Weights uniform in ±√(6/(fan_in+fan_out)), biases zero.
    pub fn init_uniform(&mut self, rng: &mut Rng) {
        for l in 0..self.layers.len() {
            let spec = self.layers[l];
            let r = (6.0 / (spec.n_in + spec.n_out) as f64).sqrt();
            let (w, b) = self.layer_params_mut(l);
            for v in w.iter_mut() {
                *v = r * (2.0 * uniform(rng) - 1.0);
            }
            b.fill(0.0);
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim("network params", self.params.len(), p.len())?;
        self.params.copy_from_slice(p);
        Ok(())
    }

    /// Offset of the weight block of layer `l`; biases follow the weights.
    pub fn layer_offset(&self, l: usize) -> usize {
        self.offsets[l]
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        let o = self.offsets[l];
        &self.params[o..o + s.n_out * s.n_in]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        let o = self.offsets[l] + s.n_out * s.n_in;
        &self.params[o..o + s.n_out]
    }

    pub fn layer_params_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let s = self.layers[l];
        let o = self.offsets[l];
        let blk = &mut self.params[o..o + s.n_params()];
        blk.split_at_mut(s.n_out * s.n_in)
    }

    pub fn check_finite(&self) -> Result<()> {
        if crate::mathx::all_finite(&self.params) {
            Ok(())
        } else {
            Err(Error::NonFinite("network weights".into()))
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        check_dim("network input", self.input_dim(), x.len())?;
        let nl = self.layers.len();
        let mut xs = Vec::with_capacity(nl + 1);
        let mut zs = Vec::with_capacity(nl);
        let mut dphi = Vec::with_capacity(nl);
        xs.push(x.to_vec());
        for l in 0..nl {
            let spec = self.layers[l];
            let w = self.weights(l);
            let b = self.bias(l);
            let xin = &xs[l];
            let z: Vec<f64> = (0..spec.n_out)
                .map(|i| {
                    let row = &w[i * spec.n_in..(i + 1) * spec.n_in];
                    b[i] + row.iter().zip(xin).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            let (out, d) = activate(spec.act, &z);
            zs.push(z);
            dphi.push(d);
            xs.push(out);
        }
        Ok(ForwardTrace { xs, zs, dphi })
    }

    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.xs.pop().unwrap())
    }

    /// Backward pass: returns ∂E/∂θ and ∂E/∂x given ∂E/∂y.
    pub fn backprop(&self, tr: &ForwardTrace, de_dy: &[f64]) -> Result<Gradients> {
        check_dim("dE/dy", self.output_dim(), de_dy.len())?;
        let mut g = Gradients::zeros(self.n_params(), self.input_dim());
        let mut gx = de_dy.to_vec();
        for l in (0..self.layers.len()).rev() {
            let spec = self.layers[l];
            let dz = apply_jacobian_t(spec.act, &tr.xs[l + 1], &tr.dphi[l], &gx);
            let xin = &tr.xs[l];
            let o = self.offsets[l];
            let (gw, gb) = g.theta[o..o + spec.n_params()].split_at_mut(spec.n_out * spec.n_in);
            for i in 0..spec.n_out {
                let row = &mut gw[i * spec.n_in..(i + 1) * spec.n_in];
                for (r, xj) in row.iter_mut().zip(xin) {
                    *r = dz[i] * xj;
                }
                gb[i] = dz[i];
            }
            gx = self.wt_times(l, &dz);
        }
        g.x = gx;
        Ok(g)
    }

    /// Forward phase of R{backprop}.
    pub fn r_forward(&self, tr: &ForwardTrace, v: &RDirection) -> Result<RTrace> {
        check_dim("v_x", self.input_dim(), v.x.len())?;
        if !v.theta.is_empty() {
            check_dim("v_theta", self.n_params(), v.theta.len())?;
        }
        let nl = self.layers.len();
        let mut rxs = Vec::with_capacity(nl + 1);
        let mut rzs = Vec::with_capacity(nl);
        let mut rdphi = Vec::with_capacity(nl);
        rxs.push(v.x.clone());
        for l in 0..nl {
            let spec = self.layers[l];
            let w = self.weights(l);
            let xin = &tr.xs[l];
            let rxin = &rxs[l];
            let mut rz: Vec<f64> = (0..spec.n_out)
                .map(|i| {
                    let row = &w[i * spec.n_in..(i + 1) * spec.n_in];
                    row.iter().zip(rxin).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            if !v.theta.is_empty() {
                let o = self.offsets[l];
                let vw = &v.theta[o..o + spec.n_out * spec.n_in];
                let vb = &v.theta[o + spec.n_out * spec.n_in..o + spec.n_params()];
                for i in 0..spec.n_out {
                    let row = &vw[i * spec.n_in..(i + 1) * spec.n_in];
                    rz[i] += vb[i] + row.iter().zip(xin).map(|(a, c)| a * c).sum::<f64>();
                }
            }
            let x = &tr.xs[l + 1];
            let z = &tr.zs[l];
            let (rx, rd) = match spec.act {
                Nonlinearity::Softmax => {
                    let s: f64 = x.iter().zip(&rz).map(|(a, b)| a * b).sum();
                    (x.iter().zip(&rz).map(|(xi, r)| xi * (r - s)).collect(), Vec::new())
                }
                Nonlinearity::LogSoftmax => {
                    let s: f64 = x.iter().zip(&rz).map(|(a, b)| a.exp() * b).sum();
                    (rz.iter().map(|r| r - s).collect(), Vec::new())
                }
                act => {
                    let d = &tr.dphi[l];
                    let rx: Vec<f64> = d.iter().zip(&rz).map(|(a, b)| a * b).collect();
                    let rd = match act {
                        Nonlinearity::Logistic => x.iter().zip(&rx).map(|(xi, r)| r * (1.0 - 2.0 * xi)).collect(),
                        Nonlinearity::Probit => z.iter().zip(&rx).map(|(zi, r)| -zi * r).collect(),
                        _ => vec![0.0; spec.n_out],
                    };
                    (rx, rd)
                }
            };
            rzs.push(rz);
            rxs.push(rx);
            rdphi.push(rd);
        }
        Ok(RTrace { rxs, rzs, rdphi })
    }

    /// Backward phase of R{backprop}. Returns `H·v` split into the θ and x
    /// blocks, where `H` is the Hessian of `E` with respect to `(θ, x)`.
    /// `grads` must come from [`Network::backprop`] on the same trace.
    pub fn r_backprop(
        &self,
        tr: &ForwardTrace,
        grads: &Gradients,
        rtr: &RTrace,
        v: &RDirection,
        de_dy: &[f64],
        r_de_dy: &[f64],
    ) -> Result<Gradients> {
        check_dim("dE/dy", self.output_dim(), de_dy.len())?;
        check_dim("R{dE/dy}", self.output_dim(), r_de_dy.len())?;
        check_dim("grads", self.n_params(), grads.theta.len())?;
        let mut h = Gradients::zeros(self.n_params(), self.input_dim());
        let mut gx = de_dy.to_vec();
        let mut rgx = r_de_dy.to_vec();
        for l in (0..self.layers.len()).rev() {
            let spec = self.layers[l];
            let o = self.offsets[l];
            let nw = spec.n_out * spec.n_in;
            let dz = &grads.theta[o + nw..o + spec.n_params()];
            let x = &tr.xs[l + 1];
            let rx = &rtr.rxs[l + 1];
            let rdz: Vec<f64> = match spec.act {
                Nonlinearity::Softmax => {
                    let s: f64 = gx.iter().zip(x).map(|(a, b)| a * b).sum();
                    let rs: f64 = rgx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                        + gx.iter().zip(rx).map(|(a, b)| a * b).sum::<f64>();
                    (0..spec.n_out)
                        .map(|j| rx[j] * (gx[j] - s) + x[j] * (rgx[j] - rs))
                        .collect()
                }
                Nonlinearity::LogSoftmax => {
                    let s: f64 = gx.iter().sum();
                    let rs: f64 = rgx.iter().sum();
                    (0..spec.n_out)
                        .map(|j| {
                            let e = x[j].exp();
                            rgx[j] - e * rx[j] * s - e * rs
                        })
                        .collect()
                }
                _ => {
                    let d = &tr.dphi[l];
                    let rd = &rtr.rdphi[l];
                    (0..spec.n_out).map(|j| rgx[j] * d[j] + gx[j] * rd[j]).collect()
                }
            };
            let xin = &tr.xs[l];
            let rxin = &rtr.rxs[l];
            {
                let (hw, hb) = h.theta[o..o + spec.n_params()].split_at_mut(nw);
                for i in 0..spec.n_out {
                    let row = &mut hw[i * spec.n_in..(i + 1) * spec.n_in];
                    for j in 0..spec.n_in {
                        row[j] = rdz[i] * xin[j] + dz[i] * rxin[j];
                    }
                    hb[i] = rdz[i];
                }
            }
            let mut rg = self.wt_times(l, &rdz);
            if !v.theta.is_empty() {
                let vw = &v.theta[o..o + nw];
                for i in 0..spec.n_out {
                    let row = &vw[i * spec.n_in..(i + 1) * spec.n_in];
                    for j in 0..spec.n_in {
                        rg[j] += dz[i] * row[j];
                    }
                }
            }
            gx = self.wt_times(l, dz);
            rgx = rg;
        }
        h.x = rgx;
        Ok(h)
    }

    fn wt_times(&self, l: usize, d: &[f64]) -> Vec<f64> {
        let spec = self.layers[l];
        let w = self.weights(l);
        let mut out = vec![0.0; spec.n_in];
        for i in 0..spec.n_out {
            let di = d[i];
            if di == 0.0 {
                continue;
            }
            let row = &w[i * spec.n_in..(i + 1) * spec.n_in];
            for (o, wij) in out.iter_mut().zip(row) {
                *o += di * wij;
            }
        }
        out
    }

    /// Loss and gradient for one input.
    pub fn eval_grad(&self, x: &[f64], kind: OutputFn, t: &[f64]) -> Result<(f64, Gradients)> {
        let tr = self.forward(x)?;
        let out = output_fn(kind, tr.output(), t, None)?;
        let g = self.backprop(&tr, &out.de_dy)?;
        Ok((out.e, g))
    }

    /// Loss, gradient and Hessian-vector product for one input.
    pub fn eval_hvp(
        &self,
        x: &[f64],
        kind: OutputFn,
        t: &[f64],
        v: &RDirection,
    ) -> Result<(f64, Gradients, Gradients)> {
        let tr = self.forward(x)?;
        let rtr = self.r_forward(&tr, v)?;
        let out = output_fn(kind, tr.output(), t, Some(rtr.output()))?;
        let g = self.backprop(&tr, &out.de_dy)?;
        let h = self.r_backprop(&tr, &g, &rtr, v, &out.de_dy, &out.r_de_dy)?;
        Ok((out.e, g, h))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u64(self.layers.len() as u64);
        for l in &self.layers {
            w.u64(l.n_in as u64);
            w.u64(l.n_out as u64);
            w.u8(l.act.tag());
        }
        w.f64s(&self.params);
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, MAGIC)?;
        let nl = r.u64()? as usize;
        if nl > buf.len() {
            return Err(Error::Parse {
                offset: r.offset(),
                msg: "implausible layer count".into(),
            });
        }
        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let n_in = r.u64()? as usize;
            let n_out = r.u64()? as usize;
            let at = r.offset();
            let act = Nonlinearity::from_tag(r.u8()?).ok_or(Error::Parse {
                offset: at,
                msg: "unknown nonlinearity tag".into(),
            })?;
            layers.push(LayerSpec { n_in, n_out, act });
        }
        let params = r.f64s()?;
        r.finish()?;
        Network::try_from(NetworkRepr { layers, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Network::from_bytes(&binio::read_file(path)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&binio::read_file(path)?)?)
    }
}

/// Applies φ to a whole layer; returns outputs and the elementwise ∂φ/∂z
/// (empty for softmax-type layers).
fn activate(act: Nonlinearity, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match act {
        Nonlinearity::Linear => (z.to_vec(), vec![1.0; z.len()]),
        Nonlinearity::Relu => (
            z.iter().map(|&v| v.max(0.0)).collect(),
            z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
        ),
        Nonlinearity::Logistic => {
            let x: Vec<f64> = z.iter().map(|&v| clamp_open(sigmoid(v))).collect();
            let d = x.iter().map(|&v| v * (1.0 - v)).collect();
            (x, d)
        }
        Nonlinearity::Probit => (
            z.iter().map(|&v| clamp_open(norm_cdf(v))).collect(),
            z.iter().map(|&v| norm_pdf(v)).collect(),
        ),
        Nonlinearity::Softmax => {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            (e.iter().map(|v| v / s).collect(), Vec::new())
        }
        Nonlinearity::LogSoftmax => {
            let lse = crate::mathx::logsumexp(z);
            (z.iter().map(|&v| v - lse).collect(), Vec::new())
        }
    }
}

/// (∂x/∂z)ᵀ g for one layer.
fn apply_jacobian_t(act: Nonlinearity, x: &[f64], d: &[f64], g: &[f64]) -> Vec<f64> {
    match act {
        Nonlinearity::Softmax => {
            let s: f64 = g.iter().zip(x).map(|(a, b)| a * b).sum();
            x.iter().zip(g).map(|(xj, gj)| xj * (gj - s)).collect()
        }
        Nonlinearity::LogSoftmax => {
            let s: f64 = g.iter().sum();
            x.iter().zip(g).map(|(xj, gj)| gj - xj.exp() * s).collect()
        }
        _ => d.iter().zip(g).map(|(a, b)| a * b).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFn {
    /// E = ½‖y − t‖²
    SquareError,
    /// E = Σ t log y
    CrossEntropy,
    /// E = Σ t log y + (1 − t) log(1 − y)
    BinaryCrossEntropy,
    /// E = tᵀy
    DotProduct,
}

impl OutputFn {
    pub const ALL: [OutputFn; 4] = [
        OutputFn::SquareError,
        OutputFn::CrossEntropy,
        OutputFn::BinaryCrossEntropy,
        OutputFn::DotProduct,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputEval {
    pub e: f64,
    pub de_dy: Vec<f64>,
    /// R{∂E/∂y}; zero when no R{y} was supplied.
    pub r_de_dy: Vec<f64>,
}

/// Evaluates an output function, its gradient, and, given `ry = R{y}`, the
/// R-derivative of the gradient.
pub fn output_fn(kind: OutputFn, y: &[f64], t: &[f64], ry: Option<&[f64]>) -> Result<OutputEval> {
    check_dim("targets", y.len(), t.len())?;
    if let Some(r) = ry {
        check_dim("R{y}", y.len(), r.len())?;
    }
    let n = y.len();
    let r = |i: usize| ry.map_or(0.0, |r| r[i]);
    let mut e = 0.0;
    let mut de = vec![0.0; n];
    let mut rde = vec![0.0; n];
    match kind {
        OutputFn::SquareError => {
            for i in 0..n {
                let d = y[i] - t[i];
                e += 0.5 * d * d;
                de[i] = d;
                rde[i] = r(i);
            }
        }
        OutputFn::CrossEntropy => {
            for i in 0..n {
                if !(y[i] > 0.0 && y[i] <= 1.0) {
                    return Err(Error::Domain(format!("cross entropy needs y in (0,1], got {}", y[i])));
                }
                if t[i] != 0.0 {
                    e += t[i] * y[i].ln();
                }
                de[i] = t[i] / y[i];
                rde[i] = -t[i] / (y[i] * y[i]) * r(i);
            }
        }
        OutputFn::BinaryCrossEntropy => {
            for i in 0..n {
                if !(y[i] > 0.0 && y[i] < 1.0) {
                    return Err(Error::Domain(format!(
                        "binary cross entropy needs y in (0,1), got {}",
                        y[i]
                    )));
                }
                let (yi, ti) = (y[i], t[i]);
                if ti != 0.0 {
                    e += ti * yi.ln();
                }
                if ti != 1.0 {
                    e += (1.0 - ti) * (1.0 - yi).ln();
                }
                de[i] = ti / yi - (1.0 - ti) / (1.0 - yi);
                rde[i] = -(ti / (yi * yi) + (1.0 - ti) / ((1.0 - yi) * (1.0 - yi))) * r(i);
            }
        }
        OutputFn::DotProduct => {
            for i in 0..n {
                e += t[i] * y[i];
                de[i] = t[i];
            }
        }
    }
    Ok(OutputEval {
        e,
        de_dy: de,
        r_de_dy: rde,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn arch_round_trip() {
        let n = Network::from_arch("784-relu-50-relu-30-logsoftmax-10").unwrap();
        assert_eq!(n.arch(), "784-relu-50-relu-30-logsoftmax-10");
        assert_eq!(n.n_params(), 784 * 50 + 50 + 50 * 30 + 30 + 30 * 10 + 10);
        assert!(Network::from_arch("784-relu").is_err());
        assert!(Network::from_arch("4-tanh-2").is_err());
    }

    #[test]
    fn identity_linear_layer() {
        let mut n = Network::from_arch("2-linear-2").unwrap();
        n.params_mut()[..4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(n.output(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn logistic_at_zero_and_uniform_softmax() {
        let n = Network::from_arch("3-logistic-2").unwrap();
        assert_eq!(n.output(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, 0.5]);
        let s = Network::from_arch("2-softmax-3").unwrap();
        for p in s.output(&[0.4, -1.0]).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_input_dim_errors() {
        let n = Network::from_arch("3-relu-2").unwrap();
        assert!(matches!(n.forward(&[1.0]), Err(Error::Dim { .. })));
        let tr = n.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(n.backprop(&tr, &[1.0]).is_err());
    }

    #[test]
    fn logistic_output_is_clamped() {
        let mut n = Network::from_arch("1-logistic-1").unwrap();
        n.params_mut()[0] = 1.0;
        let y = n.output(&[100.0]).unwrap()[0];
        assert_eq!(y, 1.0 - 1e-12);
        let y = n.output(&[-800.0]).unwrap()[0];
        assert_eq!(y, 1e-12);
    }

    #[test]
    fn zero_dedy_gives_zero_gradients() {
        let n = Network::random("4-relu-3-logistic-2", &mut seeded(1)).unwrap();
        let tr = n.forward(&[0.1, 0.2, -0.3, 0.4]).unwrap();
        let g = n.backprop(&tr, &[0.0, 0.0]).unwrap();
        assert!(g.theta.iter().chain(&g.x).all(|&v| v == 0.0));
    }

    #[test]
    fn binary_ce_closed_form() {
        let o = output_fn(OutputFn::BinaryCrossEntropy, &[0.5], &[1.0], None).unwrap();
        assert!((o.e - 0.5f64.ln()).abs() < 1e-15);
        assert!((o.de_dy[0] - 2.0).abs() < 1e-15);
        assert!(output_fn(OutputFn::BinaryCrossEntropy, &[1.0], &[1.0], None).is_err());
        assert!(output_fn(OutputFn::CrossEntropy, &[0.0, 1.0], &[0.5, 0.5], None).is_err());
    }

    #[test]
    fn square_error_at_target_and_dot_has_no_r() {
        let o = output_fn(OutputFn::SquareError, &[0.2, 0.3], &[0.2, 0.3], Some(&[1.0, 1.0])).unwrap();
        assert_eq!(o.e, 0.0);
        assert_eq!(o.de_dy, vec![0.0, 0.0]);
        let d = output_fn(OutputFn::DotProduct, &[0.2, 0.3], &[1.0, -2.0], Some(&[5.0, 7.0])).unwrap();
        assert_eq!(d.r_de_dy, vec![0.0, 0.0]);
    }

    #[test]
    fn logistic_binary_ce_dz_is_t_minus_y() {
        let n = Network::random("3-logistic-1", &mut seeded(5)).unwrap();
        let x = [0.4, -0.2, 0.9];
        let tr = n.forward(&x).unwrap();
        let y = tr.output()[0];
        let o = output_fn(OutputFn::BinaryCrossEntropy, &[y], &[1.0], None).unwrap();
        let g = n.backprop(&tr, &o.de_dy).unwrap();
        let db = n.bias(0).len();
        assert_eq!(db, 1);
        let gb = g.theta[3];
        assert!((gb - (1.0 - y)).abs() < 1e-12);
    }

    #[test]
    fn linear_net_r_output_is_weight_column() {
        let mut rng = seeded(3);
        let n = Network::random("3-linear-4-linear-2", &mut rng).unwrap();
        let x = [0.5, 0.1, -0.3];
        let tr = n.forward(&x).unwrap();
        let rt = n.r_forward(&tr, &RDirection::input_only(vec![0.0, 1.0, 0.0])).unwrap();
        let w1 = n.weights(0);
        let w2 = n.weights(1);
        for i in 0..2 {
            let col: f64 = (0..4).map(|k| w2[i * 4 + k] * w1[k * 3 + 1]).sum();
            assert!((rt.output()[i] - col).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_direction_gives_zero_r_trace() {
        let n = Network::random("3-probit-4-softmax-2", &mut seeded(9)).unwrap();
        let tr = n.forward(&[0.3, 0.2, 0.1]).unwrap();
        let rt = n
            .r_forward(&tr, &RDirection::new(vec![0.0; n.n_params()], vec![0.0; 3]))
            .unwrap();
        assert!(rt
            .rxs
            .iter()
            .flatten()
            .chain(rt.rzs.iter().flatten())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_output_hessian_is_wtw() {
        let n = Network::random("3-linear-2", &mut seeded(11)).unwrap();
        let x = [0.2, -0.5, 0.7];
        let v = vec![0.3, 0.1, -0.4];
        let (_, _, h) = n
            .eval_hvp(
                &x,
                OutputFn::SquareError,
                &[0.0, 0.0],
                &RDirection::input_only(v.clone()),
            )
            .unwrap();
        let w = n.weights(0);
        for j in 0..3 {
            let mut e = 0.0;
            for k in 0..3 {
                let wtw: f64 = (0..2).map(|i| w[i * 3 + j] * w[i * 3 + k]).sum();
                e += wtw * v[k];
            }
            assert!((h.x[j] - e).abs() < 1e-14);
        }
    }

    #[test]
    fn dot_output_linear_layer_has_zero_hessian() {
        let n = Network::random("3-linear-2", &mut seeded(12)).unwrap();
        let v = RDirection::new(vec![0.5; n.n_params()], vec![0.1, 0.2, 0.3]);
        let (_, _, h) = n
            .eval_hvp(&[1.0, 2.0, 3.0], OutputFn::DotProduct, &[1.0, -1.0], &v)
            .unwrap();
        assert!(h.x.iter().all(|&v| v == 0.0));
        // Only the cross term ∂²E/∂W∂x survives; with E = tᵀ(Wx+b) that term is t ⊗ v_x.
        let w_block = &h.theta[..6];
        let expect = [0.1, 0.2, 0.3, -0.1, -0.2, -0.3];
        for (a, b) in w_block.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let n = Network::random("5-probit-4-relu-3-logsoftmax-2", &mut seeded(2)).unwrap();
        let back = Network::from_bytes(&n.to_bytes()).unwrap();
        assert_eq!(n, back);
        let json = serde_json::to_string(&n).unwrap();
        let back: Network = serde_json::from_str(&json).unwrap();
        assert_eq!(n.arch(), back.arch());
        let bytes = n.to_bytes();
        let err = Network::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
