//! Posterior distillation toys: Bayesian mixture density and Bayesian
//! logistic regression.

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use distilkit::bayes::{
    binary_distill_batch, binary_distill_online, density_distill_batch, density_distill_online, grid_1d,
    grid_discrepancy, logreg_bag, mc_log_density, probe_grid, reference_observations, toy_logreg_dataset,
    write_grid_csv, BinaryDistillConfig, BinaryLoss, ChainConfig, DensityBatchConfig, DensityOnlineConfig,
    DensityPosterior, LogRegPosterior, McPredictor, MogMeansModel,
};
use distilkit::mcmc::{run_chains, ChainHarnessConfig, SampleBag};
use distilkit::mog::{grid_l1, EmConfig, MoGParams};
use distilkit::optim::Schedule;

use crate::output::{num, Run};
use crate::{load, Common};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MogMode {
    Batch,
    Online,
    Both,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    lo: f64,
    hi: f64,
    n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MogRun {
    #[serde(default = "default_mode")]
    mode: MogMode,
    /// Observations drawn from the reference mixture.
    #[serde(default = "default_n_data")]
    n_data: usize,
    #[serde(default = "default_prior_var")]
    prior_var: f64,
    #[serde(default)]
    chain: ChainConfig,
    /// Posterior samples S.
    #[serde(default = "default_n_posterior")]
    n_posterior: usize,
    /// Draws M from p_MC for batch EM.
    #[serde(default = "default_n_draws")]
    n_draws: usize,
    #[serde(default = "default_components")]
    components: usize,
    #[serde(default = "default_online_batch")]
    online_batch: usize,
    #[serde(default = "default_online_iterations")]
    online_iterations: usize,
    #[serde(default = "default_mog_grid")]
    grid: Grid,
    seed: u64,
}

fn default_mode() -> MogMode {
    MogMode::Both
}
fn default_n_data() -> usize {
    1000
}
fn default_prior_var() -> f64 {
    100.0
}
fn default_n_posterior() -> usize {
    10_000
}
fn default_n_draws() -> usize {
    1000
}
fn default_components() -> usize {
    3
}
fn default_online_batch() -> usize {
    100
}
fn default_online_iterations() -> usize {
    100
}
fn default_mog_grid() -> Grid {
    Grid {
        lo: -12.0,
        hi: 10.0,
        n: 2201,
    }
}

fn density_on(grid: &[f64], p: &MoGParams) -> anyhow::Result<Vec<f64>> {
    let pr = p.prepare()?;
    Ok(grid.iter().map(|&x| pr.logpdf(&[x]).exp()).collect())
}

pub fn distill_mog(c: &Common, mode: Option<MogMode>, n_data: Option<usize>) -> anyhow::Result<()> {
    let cfg: MogRun = load(c, |o| {
        if let Some(m) = mode {
            o.insert("mode".into(), serde_json::to_value(m).unwrap_or(Value::Null));
        }
        if let Some(n) = n_data {
            o.insert("n_data".into(), n.into());
        }
    })?;
    if cfg.grid.n < 2 || cfg.grid.hi <= cfg.grid.lo {
        return Err(distilkit::Error::Config("grid needs n >= 2 and hi > lo".into()).into());
    }
    let mut run = Run::start(&c.out, "distill-mog", &cfg, cfg.seed)?;
    let model = MogMeansModel::reference();
    let data = reference_observations(cfg.n_data, cfg.seed)?;
    let target = DensityPosterior {
        model: &model,
        data: &data,
        dim: model.weights.len(),
        prior_var: cfg.prior_var,
    };
    let grid = grid_1d(cfg.grid.lo, cfg.grid.hi, cfg.grid.n);
    let dx = grid[1] - grid[0];

    let mut batch = None;
    let bag: SampleBag = if cfg.mode != MogMode::Online {
        let bc = DensityBatchConfig {
            chain: cfg.chain.clone(),
            n_posterior: cfg.n_posterior,
            n_draws: cfg.n_draws,
            em: EmConfig::new(cfg.components, cfg.seed),
        };
        let r = density_distill_batch(&target, &bc)?;
        let bag = r.bag.clone();
        batch = Some(r);
        bag
    } else {
        let mut hc = ChainHarnessConfig::new(1, cfg.chain.burn_in, cfg.chain.thinning, cfg.n_posterior, cfg.seed);
        hc.step_w = cfg.chain.step_w;
        run_chains(&hc, &vec![0.0; target.dim], &target)?
    };
    let online = if cfg.mode != MogMode::Batch {
        let oc = DensityOnlineConfig {
            chain: cfg.chain.clone(),
            batch_size: cfg.online_batch,
            iterations: cfg.online_iterations,
            schedule: Schedule::linear(1.0, cfg.online_iterations),
            components: cfg.components,
            seed: cfg.seed,
        };
        Some(density_distill_online(&target, &oc)?)
    } else {
        None
    };

    let pmc: Vec<f64> = grid.iter().map(|&x| mc_log_density(&model, &bag, &[x]).exp()).collect();
    let mut cols = vec!["x", "p_mc"];
    let mut series = Vec::new();
    let mut report = Vec::new();
    if let Some(b) = &batch {
        run.json("mog_batch.json", "params", &b.fit.params)?;
        let d = density_on(&grid, &b.fit.params)?;
        let l1 = grid_l1(&d, &pmc, dx);
        println!("batch   L1 {l1:.4} ({} EM iterations)", b.fit.iterations);
        report.push(vec!["batch".to_string(), num(l1)]);
        cols.push("batch");
        series.push(d);
    }
    if let Some(o) = &online {
        run.json("mog_online.json", "params", &o.params)?;
        let d = density_on(&grid, &o.params)?;
        let l1 = grid_l1(&d, &pmc, dx);
        println!("online  L1 {l1:.4}");
        report.push(vec!["online".to_string(), num(l1)]);
        cols.push("online");
        series.push(d);
    }
    let rows: Vec<Vec<String>> = grid
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let mut r = vec![num(x), num(pmc[k])];
            r.extend(series.iter().map(|s| num(s[k])));
            r
        })
        .collect();
    run.csv("mog_grid.csv", &cols, &rows)?;
    run.csv("mog_report.csv", &["method", "grid_l1_vs_p_mc"], &report)?;
    run.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FitMode {
    Batch,
    Online,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogregRun {
    #[serde(default = "default_losses")]
    losses: Vec<BinaryLoss>,
    #[serde(default = "default_modes")]
    modes: Vec<FitMode>,
    #[serde(default = "default_n_posterior")]
    n_posterior: usize,
    #[serde(default = "default_prior_var")]
    prior_var: f64,
    /// Constant-1 input coordinate for a bias weight.
    #[serde(default)]
    intercept: bool,
    #[serde(default = "default_n_compact")]
    n_compact: usize,
    #[serde(default = "default_logreg_iterations")]
    iterations: usize,
    #[serde(default = "default_logreg_batch")]
    batch_size: usize,
    #[serde(default = "default_learning_rate")]
    learning_rate: f64,
    #[serde(default = "default_input_std")]
    input_std: f64,
    #[serde(default = "default_grid_n")]
    grid_n: usize,
    #[serde(default = "default_grid_lim")]
    grid_lim: f64,
    seed: u64,
}

fn default_losses() -> Vec<BinaryLoss> {
    vec![BinaryLoss::CrossEntropy, BinaryLoss::DerivativeSquareError]
}
fn default_modes() -> Vec<FitMode> {
    vec![FitMode::Batch, FitMode::Online]
}
fn default_n_compact() -> usize {
    10
}
fn default_logreg_iterations() -> usize {
    5000
}
fn default_logreg_batch() -> usize {
    10
}
fn default_learning_rate() -> f64 {
    1.0
}
fn default_input_std() -> f64 {
    10.0
}
fn default_grid_n() -> usize {
    81
}
fn default_grid_lim() -> f64 {
    10.0
}

fn loss_tag(l: BinaryLoss) -> &'static str {
    match l {
        BinaryLoss::CrossEntropy => "ce",
        BinaryLoss::DerivativeSquareError => "dse",
    }
}

pub fn distill_logreg(c: &Common) -> anyhow::Result<()> {
    let cfg: LogregRun = load(c, |_| {})?;
    let mut run = Run::start(&c.out, "distill-logreg", &cfg, cfg.seed)?;
    let (xs, ys) = toy_logreg_dataset();
    let post = LogRegPosterior::new(xs, ys, 2, cfg.prior_var, cfg.intercept)?;
    let chain = ChainConfig::default();
    let bag = logreg_bag(&post, &chain, cfg.n_posterior, cfg.seed)?;
    let samples_path = run.path("posterior_samples.csv");
    bag.write_csv(&samples_path, &run.header)?;
    let teacher = McPredictor::new(&bag, cfg.intercept)?;
    let grid = probe_grid(cfg.grid_n, cfg.grid_lim);
    let mut report = Vec::new();
    for &loss in &cfg.losses {
        let mut dc = BinaryDistillConfig::reference(loss, cfg.seed);
        dc.n_compact = cfg.n_compact;
        dc.train.iterations = cfg.iterations;
        dc.train.batch_size = cfg.batch_size;
        dc.rule = distilkit::optim::UpdateRule::sgd(Schedule::linear(cfg.learning_rate, cfg.iterations));
        dc.input_std = cfg.input_std;
        dc.chain = chain.clone();
        for &mode in &cfg.modes {
            let (model, _) = match mode {
                FitMode::Batch => binary_distill_batch(&teacher, 2, &dc)?,
                FitMode::Online => binary_distill_online(&post, &dc)?,
            };
            let tag = format!(
                "{}_{}",
                loss_tag(loss),
                if mode == FitMode::Batch { "batch" } else { "online" }
            );
            run.json(&format!("logreg_{tag}.json"), "model", &model)?;
            let gp = run.path(&format!("grid_{tag}.csv"));
            write_grid_csv(&gp, &run.header, &grid, &teacher, &model)?;
            let (mean, max) = grid_discrepancy(&model, &teacher, &grid);
            println!("{tag:<10} mean |f-t| {mean:.4}, max {max:.4}");
            report.push(vec![tag, num(mean), num(max)]);
        }
    }
    run.csv(
        "logreg_report.csv",
        &["model", "mean_abs_diff", "max_abs_diff"],
        &report,
    )?;
    run.finish()
}
