//! Python bindings: networks, NADEs, RBMs, mixtures, RBM distillation and
//! log-partition estimation.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use distilkit::bayes::{
    density_distill_batch, reference_observations, ChainConfig, DensityBatchConfig, DensityPosterior, MogMeansModel,
};
use distilkit::compress::{log_probs, EnsembleTeacher};
use distilkit::density::{DensityModel, TabulatedBinary};
use distilkit::gendistill::{distill_rbm as run_distill, exact_kl, GenDistillConfig, GenLoss, RbmDistillConfig};
use distilkit::mog::{em_batch, EmConfig, EmInit, MoGParams};
use distilkit::nade::NadeModel;
use distilkit::nn::Network;
use distilkit::optim::{TrainConfig, UpdateRule};
use distilkit::partition::{estimate_all, gibbs_random, LogZMethod, PartitionConfig};
use distilkit::rbm::RbmModel;
use distilkit::rng::seeded;
use distilkit::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingInput(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => PyFileNotFoundError::new_err(io.to_string()),
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Numerical(_) | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for distilkit::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Feed-forward network described by an architecture string such as
/// `"784-relu-500-logsoftmax-10"`.
#[pyclass(name = "Network", module = "distilkit_py", from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (arch, seed = 0))]
    fn new(arch: &str, seed: u64) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: Network::random(arch, &mut seeded(seed)).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: Network::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.arch()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    #[setter]
    fn set_params(&mut self, p: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&p).py()
    }

    /// Output of the last layer.
    fn output(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.output(&x).py()
    }

    /// Class log-probabilities.
    fn log_probs(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        log_probs(&self.inner, &x).py()
    }

    fn __repr__(&self) -> String {
        format!("Network('{}')", self.inner.arch())
    }
}

/// Arithmetic mean of member class probabilities.
#[pyclass(name = "Ensemble", module = "distilkit_py")]
struct PyEnsemble {
    inner: EnsembleTeacher,
}

#[pymethods]
impl PyEnsemble {
    #[new]
    fn new(members: Vec<PyNetwork>) -> PyResult<Self> {
        Ok(PyEnsemble {
            inner: EnsembleTeacher::new(members.into_iter().map(|m| m.inner).collect()).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.members().len()
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict(&x).py()
    }
}

#[pyclass(name = "Nade", module = "distilkit_py", skip_from_py_object)]
#[derive(Clone)]
struct PyNade {
    inner: NadeModel,
}

#[pymethods]
impl PyNade {
    #[new]
    #[pyo3(signature = (n_in, n_hidden, seed = 0, ordering = None))]
    fn new(n_in: usize, n_hidden: usize, seed: u64, ordering: Option<Vec<usize>>) -> PyResult<Self> {
        let mut m = NadeModel::random(n_in, n_hidden, &mut seeded(seed)).py()?;
        if let Some(o) = ordering {
            m = m.with_ordering(o).py()?;
        }
        Ok(PyNade { inner: m })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNade {
            inner: NadeModel::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_hidden(&self) -> usize {
        self.inner.n_hidden()
    }

    #[getter]
    fn ordering(&self) -> Vec<usize> {
        self.inner.ordering().to_vec()
    }

    fn log_prob(&self, x: Vec<f64>) -> PyResult<f64> {
        Ok(self.inner.log_prob(&x).py()?.0)
    }

    fn mean_log_prob(&self, xs: Vec<Vec<f64>>) -> PyResult<f64> {
        self.inner.mean_log_prob(&xs).py()
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        (0..n).map(|_| self.inner.sample(&mut rng).0).collect()
    }
}

#[pyclass(name = "Rbm", module = "distilkit_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRbm {
    inner: RbmModel,
}

#[pymethods]
impl PyRbm {
    #[new]
    #[pyo3(signature = (n_vis, n_hid, seed = 0, w_scale = 1.0, bias_scale = 0.5))]
    fn new(n_vis: usize, n_hid: usize, seed: u64, w_scale: f64, bias_scale: f64) -> Self {
        PyRbm {
            inner: RbmModel::random(n_vis, n_hid, w_scale, bias_scale, &mut seeded(seed)),
        }
    }

    /// W (row-major, n_vis × n_hid), visible biases a, hidden biases b.
    #[staticmethod]
    fn from_weights(n_vis: usize, n_hid: usize, w: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Self> {
        Ok(PyRbm {
            inner: RbmModel::new(n_vis, n_hid, w, a, b).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRbm {
            inner: RbmModel::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn n_vis(&self) -> usize {
        self.inner.n_vis
    }

    #[getter]
    fn n_hid(&self) -> usize {
        self.inner.n_hid
    }

    /// log p̃(x), hidden units summed out.
    fn log_p_tilde(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.unnorm_log_prob(&x).py()
    }

    /// Enumerated log Z; small models only.
    fn exact_log_z(&self) -> PyResult<f64> {
        self.inner.exact_log_z().py()
    }

    #[pyo3(signature = (n, burn_in = 1000, seed = 0))]
    fn gibbs(&self, n: usize, burn_in: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        gibbs_random(&self.inner, n, burn_in, seed).py()
    }
}

#[pyclass(name = "Mixture", module = "distilkit_py", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Row-major d × d covariances.
    covs: Vec<Vec<f64>>,
}

impl PyMixture {
    fn from_params(p: MoGParams) -> Self {
        PyMixture {
            weights: p.weights,
            means: p.means,
            covs: p.covs,
        }
    }

    fn params(&self) -> PyResult<MoGParams> {
        MoGParams::new(self.weights.clone(), self.means.clone(), self.covs.clone()).py()
    }
}

#[pymethods]
impl PyMixture {
    #[new]
    fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<f64>>) -> PyResult<Self> {
        let m = PyMixture { weights, means, covs };
        m.params()?;
        Ok(m)
    }

    fn logpdf(&self, x: Vec<f64>) -> PyResult<f64> {
        self.params()?.logpdf(&x).py()
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let p = self.params()?;
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| p.sample(&mut rng))
            .collect::<distilkit::Result<_>>()
            .py()
    }

    fn __repr__(&self) -> String {
        format!("Mixture(weights={:?}, means={:?})", self.weights, self.means)
    }
}

/// Batch EM from k-means++ initialisation.
#[pyfunction]
#[pyo3(signature = (data, components, seed = 0, max_iters = 1000))]
fn fit_mixture(data: Vec<Vec<f64>>, components: usize, seed: u64, max_iters: usize) -> PyResult<PyMixture> {
    let mut cfg = EmConfig::new(components, seed);
    cfg.max_iters = max_iters;
    Ok(PyMixture::from_params(
        em_batch(&data, &cfg, EmInit::KMeansPlusPlus).py()?.params,
    ))
}

/// Posterior predictive of the three-component means model, distilled by
/// batch EM on draws from the Monte Carlo predictive.
#[pyfunction]
#[pyo3(signature = (n_data, seed = 0, n_posterior = 10_000, n_draws = 1000, components = 3, prior_var = 100.0))]
fn distill_mog_posterior(
    n_data: usize,
    seed: u64,
    n_posterior: usize,
    n_draws: usize,
    components: usize,
    prior_var: f64,
) -> PyResult<PyMixture> {
    let model = MogMeansModel::reference();
    let data = reference_observations(n_data, seed).py()?;
    let target = DensityPosterior {
        model: &model,
        data: &data,
        dim: model.weights.len(),
        prior_var,
    };
    let cfg = DensityBatchConfig {
        chain: ChainConfig::default(),
        n_posterior,
        n_draws,
        em: EmConfig::new(components, seed),
    };
    Ok(PyMixture::from_params(
        density_distill_batch(&target, &cfg).py()?.fit.params,
    ))
}

fn parse_loss(loss: &str, c: Option<f64>) -> PyResult<GenLoss> {
    match (loss, c) {
        ("kl", None) => Ok(GenLoss::Kl),
        ("square_error", Some(c)) => Ok(GenLoss::SquareError { c }),
        ("square_error", None) => Err(PyValueError::new_err("square_error needs c")),
        ("score_matching", None) => Ok(GenLoss::ScoreMatching),
        _ => Err(PyValueError::new_err(format!(
            "unknown loss '{loss}' (or c given for a loss without one)"
        ))),
    }
}

/// Trains `nade` in place on Gibbs samples from `rbm`. Returns the loss
/// trace as (iteration, mean loss) pairs.
#[pyfunction]
#[pyo3(signature = (rbm, nade, loss = "kl", c = None, iterations = 30_000, batch_size = 20, n_chains = 2000, burn_in = 2000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn distill_rbm(
    rbm: &PyRbm,
    nade: &mut PyNade,
    loss: &str,
    c: Option<f64>,
    iterations: usize,
    batch_size: usize,
    n_chains: usize,
    burn_in: usize,
    seed: u64,
) -> PyResult<Vec<(usize, f64)>> {
    let cfg = RbmDistillConfig {
        distill: GenDistillConfig {
            loss: parse_loss(loss, c)?,
            train: TrainConfig::new(iterations, batch_size),
            rule: UpdateRule::adadelta(),
        },
        n_chains,
        burn_in,
        seed,
    };
    type NoProbe = fn(&NadeModel) -> distilkit::Result<f64>;
    let report = run_distill(&rbm.inner, &mut nade.inner, &cfg, None::<NoProbe>).py()?;
    Ok(report.trace.iter().map(|r| (r.iteration, r.loss)).collect())
}

/// KL(rbm ‖ nade) by enumeration.
#[pyfunction]
fn exact_kl_divergence(rbm: &PyRbm, nade: &PyNade) -> PyResult<f64> {
    exact_kl(&rbm.inner, &nade.inner).py()
}

#[pyclass(name = "LogZ", module = "distilkit_py", get_all, frozen)]
struct PyLogZ {
    method: String,
    estimate: f64,
    se: f64,
    ci3: (f64, f64),
    n: usize,
}

#[pymethods]
impl PyLogZ {
    fn __repr__(&self) -> String {
        format!("LogZ({}: {:.4} ± {:.4})", self.method, self.estimate, self.se)
    }
}

/// Log-partition estimates for `rbm` with `student` as proposal; the exact
/// normalised teacher is used when `student` is None.
#[pyfunction]
#[pyo3(signature = (rbm, student = None, methods = None, n_samples = 10_000, burn_in = 2000, seed = 0))]
fn estimate_logz(
    rbm: &PyRbm,
    student: Option<&PyNade>,
    methods: Option<Vec<String>>,
    n_samples: usize,
    burn_in: usize,
    seed: u64,
) -> PyResult<Vec<PyLogZ>> {
    let methods = match methods {
        None => LogZMethod::ESTIMATORS.to_vec(),
        Some(ms) => ms
            .iter()
            .map(|m| LogZMethod::parse(m).ok_or_else(|| PyValueError::new_err(format!("unknown estimator '{m}'"))))
            .collect::<PyResult<_>>()?,
    };
    let mut cfg = PartitionConfig::reference(seed);
    cfg.n_samples = n_samples;
    cfg.burn_in = burn_in;
    let tab;
    let q: &dyn DensityModel = match student {
        Some(s) => &s.inner,
        None => {
            tab = TabulatedBinary::from_unnormalized(&rbm.inner).py()?;
            &tab
        }
    };
    let es = estimate_all(&rbm.inner, q, &methods, &cfg).py()?;
    Ok(es
        .into_iter()
        .map(|e| PyLogZ {
            method: e.method.name().to_string(),
            estimate: e.estimate,
            se: e.se,
            ci3: (e.ci3[0], e.ci3[1]),
            n: e.n,
        })
        .collect())
}

#[pymodule]
fn distilkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyNade>()?;
    m.add_class::<PyRbm>()?;
    m.add_class::<PyMixture>()?;
    m.add_class::<PyLogZ>()?;
    m.add_function(wrap_pyfunction!(fit_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(distill_mog_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(distill_rbm, m)?)?;
    m.add_function(wrap_pyfunction!(exact_kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_logz, m)?)?;
    Ok(())
}
