//! Univariate slice sampling with linear stepping out, and a multi-chain
//! harness with burn-in and thinning.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{check_dim, Error, Result};
use crate::rng::{stream, uniform, uniform_open, Rng};

const BAG_MAGIC: &[u8; 8] = b"DKBAG\0\0\0";
pub const MAX_EXPANSIONS: usize = 1_000_000;

/// Unnormalised log-density over ℝ^d. May return −∞ outside the support.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, w: &[f64]) -> f64;
}

/// Adapts a closure into a [`LogDensity`].
pub struct FnDensity<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, w: &[f64]) -> f64 {
        (self.f)(w)
    }
}

#[derive(Clone, Debug)]
pub struct ChainState {
    pub w: Vec<f64>,
    pub logp: f64,
    pub rng: Rng,
    pub iterations: u64,
    pub evaluations: u64,
}

impl ChainState {
    pub fn new<T: LogDensity + ?Sized>(target: &T, init: Vec<f64>, rng: Rng) -> Result<Self> {
        check_dim("chain init", target.dim(), init.len())?;
        let logp = target.log_density(&init);
        if !logp.is_finite() {
            return Err(Error::Numerical(format!(
                "log-density at chain initialisation is {logp}"
            )));
        }
        Ok(ChainState {
            w: init,
            logp,
            rng,
            iterations: 0,
            evaluations: 1,
        })
    }
}

/// One slice-sampling update of coordinate `coord`.
pub fn slice_update<T: LogDensity + ?Sized>(st: &mut ChainState, target: &T, coord: usize, step_w: f64) -> Result<()> {
    if coord >= st.w.len() {
        return Err(Error::Dim {
            what: "slice coordinate",
            expected: st.w.len(),
            got: coord,
        });
    }
    if !(step_w > 0.0) {
        return Err(Error::Config("slice width must be positive".into()));
    }
    if !st.logp.is_finite() {
        return Err(Error::Numerical("chain is at a point of zero density".into()));
    }
    let x0 = st.w[coord];
    let y = st.logp + uniform_open(&mut st.rng).ln();
    let eval = |st: &mut ChainState, x: f64| {
        st.w[coord] = x;
        st.evaluations += 1;
        target.log_density(&st.w)
    };
    let mut lo = x0 - step_w * uniform(&mut st.rng);
    let mut hi = lo + step_w;
    let mut k = 0;
    while k < MAX_EXPANSIONS && eval(st, lo) > y {
        lo -= step_w;
        k += 1;
    }
    k = 0;
    while k < MAX_EXPANSIONS && eval(st, hi) > y {
        hi += step_w;
        k += 1;
    }
    loop {
        let x1 = lo + (hi - lo) * uniform(&mut st.rng);
        let lp = eval(st, x1);
        if lp > y {
            st.logp = lp;
            return Ok(());
        }
        if x1 < x0 {
            lo = x1;
        } else {
            hi = x1;
        }
        if hi - lo < 1e-300 || lo == hi {
            st.w[coord] = x0;
            return Err(Error::Numerical("slice shrank to a point".into()));
        }
    }
}

/// Updates every coordinate in turn; counts as one iteration.
pub fn sweep<T: LogDensity + ?Sized>(st: &mut ChainState, target: &T, step_w: f64) -> Result<()> {
    for c in 0..st.w.len() {
        slice_update(st, target, c, step_w)?;
    }
    st.iterations += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainHarnessConfig {
    pub n_chains: usize,
    pub burn_in: usize,
    pub thinning: usize,
    /// Samples kept per chain after burn-in.
    pub samples_per_chain: usize,
    pub seed: u64,
    #[serde(default = "default_width")]
    pub step_w: f64,
}

fn default_width() -> f64 {
    1.0
}

impl ChainHarnessConfig {
    pub fn new(n_chains: usize, burn_in: usize, thinning: usize, samples_per_chain: usize, seed: u64) -> Self {
        ChainHarnessConfig {
            n_chains,
            burn_in,
            thinning,
            samples_per_chain,
            seed,
            step_w: 1.0,
        }
    }
}

/// Samples with their provenance, sorted by (chain, iteration).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBag {
    pub dim: usize,
    pub chain: Vec<u32>,
    pub iter: Vec<u64>,
    pub data: Vec<f64>,
}

impl SampleBag {
    pub fn new(dim: usize) -> Self {
        SampleBag {
            dim,
            chain: Vec::new(),
            iter: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.chain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chain.is_empty()
    }

    pub fn push(&mut self, chain: u32, iter: u64, w: &[f64]) {
        self.chain.push(chain);
        self.iter.push(iter);
        self.data.extend_from_slice(w);
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn coord(&self, k: usize) -> Vec<f64> {
        self.samples().map(|s| s[k]).collect()
    }

    pub fn write_csv(&self, path: &Path, header: &[String]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for h in header {
            writeln!(f, "# {h}")?;
        }
        write!(f, "chain,iter")?;
        for k in 0..self.dim {
            write!(f, ",w{k}")?;
        }
        writeln!(f)?;
        for i in 0..self.len() {
            write!(f, "{},{}", self.chain[i], self.iter[i])?;
            for v in self.sample(i) {
                write!(f, ",{v:e}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(BAG_MAGIC);
        w.u64(self.dim as u64);
        w.u64(self.len() as u64);
        for i in 0..self.len() {
            w.u32(self.chain[i]);
            w.u64(self.iter[i]);
        }
        w.f64s(&self.data);
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, BAG_MAGIC)?;
        let dim = r.u64()? as usize;
        let n = r.u64()? as usize;
        if n.saturating_mul(12) > buf.len() {
            return Err(Error::Parse {
                offset: r.offset(),
                msg: "implausible sample count".into(),
            });
        }
        let mut bag = SampleBag::new(dim);
        for _ in 0..n {
            bag.chain.push(r.u32()?);
            bag.iter.push(r.u64()?);
        }
        bag.data = r.f64s()?;
        r.finish()?;
        check_dim("sample bag payload", n * dim, bag.data.len())?;
        Ok(bag)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        SampleBag::from_bytes(&binio::read_file(path)?)
    }
}

/// Runs `n_chains` independent slice-sampling chains from `init`. Chain `c`
/// uses RNG stream `c` of the master seed, so the output does not depend on
/// how chains are scheduled across threads.
pub fn run_chains<T: LogDensity + ?Sized>(cfg: &ChainHarnessConfig, init: &[f64], target: &T) -> Result<SampleBag> {
    if cfg.n_chains == 0 || cfg.thinning == 0 {
        return Err(Error::Config("n_chains and thinning must be >= 1".into()));
    }
    let per_chain: Vec<Result<SampleBag>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut st = ChainState::new(target, init.to_vec(), stream(cfg.seed, c as u64))?;
            for _ in 0..cfg.burn_in {
                sweep(&mut st, target, cfg.step_w)?;
            }
            let mut bag = SampleBag::new(init.len());
            for k in 0..cfg.samples_per_chain {
                for _ in 0..cfg.thinning {
                    sweep(&mut st, target, cfg.step_w)?;
                }
                bag.push(c as u32, (cfg.burn_in + (k + 1) * cfg.thinning) as u64, &st.w);
            }
            Ok(bag)
        })
        .collect();
    let mut out = SampleBag::new(init.len());
    for b in per_chain {
        let b = b?;
        out.chain.extend(b.chain);
        out.iter.extend(b.iter);
        out.data.extend(b.data);
    }
    Ok(out)
}
