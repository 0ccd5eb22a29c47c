use distilkit::bayes::{
    binary_ce_grad, binary_distill_batch, single_sample_target, BinaryDistillConfig, BinaryLoss, CompactBinaryModel,
    CompactInit, LogRegPosterior, McPredictor,
};
use distilkit::bayes::{grid_1d, grid_discrepancy, probe_grid};
use distilkit::mcmc::LogDensity;
use distilkit::rng::{normal, seeded};

#[test]
fn online_ce_gradient_averages_to_batch_gradient() {
    let mut rng = seeded(17);
    let bag: Vec<Vec<f64>> = (0..500)
        .map(|_| vec![2.0 + normal(&mut rng), -1.0 + 0.5 * normal(&mut rng)])
        .collect();
    let teacher = McPredictor::from_weights(bag.clone(), false).unwrap();
    let model = CompactBinaryModel::from_prior(2, false, 10, 1.0, &mut rng).unwrap();
    let net = model.network();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = vec![3.0 * normal(&mut rng), 3.0 * normal(&mut rng)];
        let (_, gb) = binary_ce_grad(&model, &net, &x, teacher.predict(&x)).unwrap();
        let mut go = vec![0.0; gb.len()];
        for w in &bag {
            let (_, g) = binary_ce_grad(&model, &net, &x, single_sample_target(w, &x, false).t).unwrap();
            for (a, b) in go.iter_mut().zip(g) {
                *a += b / bag.len() as f64;
            }
        }
        for (a, b) in gb.iter().zip(&go) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-10, "max gradient difference {worst:e}");
}

#[test]
fn point_at_origin_leaves_prior_unchanged() {
    let prior = LogRegPosterior::new(vec![], vec![], 2, 100.0, false).unwrap();
    let one = LogRegPosterior::new(vec![vec![0.0, 0.0]], vec![1], 2, 100.0, false).unwrap();
    let mut rng = seeded(2);
    let offsets: Vec<f64> = (0..20)
        .map(|_| {
            let w = [5.0 * normal(&mut rng), 5.0 * normal(&mut rng)];
            one.log_density(&w) - prior.log_density(&w)
        })
        .collect();
    for o in &offsets {
        assert!((o - 0.5f64.ln()).abs() < 1e-12);
    }
}

fn quick(loss: BinaryLoss, n_compact: usize, seed: u64) -> BinaryDistillConfig {
    let mut cfg = BinaryDistillConfig::reference(loss, seed);
    cfg.n_compact = n_compact;
    cfg.init = CompactInit::Prior { std: 1.0 };
    cfg
}

#[test]
fn single_sample_teacher_is_recovered() {
    let teacher = McPredictor::from_weights(vec![vec![1.5, -0.7]], false).unwrap();
    let (m, _) = binary_distill_batch(&teacher, 2, &quick(BinaryLoss::CrossEntropy, 1, 3)).unwrap();
    let (_, max) = grid_discrepancy(&m, &teacher, &probe_grid(41, 10.0));
    assert!(max <= 1e-3, "max |f - t| = {max}");
}

#[test]
fn symmetric_bag_gives_one_half() {
    let teacher = McPredictor::from_weights(vec![vec![1.0, 2.0], vec![-1.0, -2.0]], false).unwrap();
    let (m, _) = binary_distill_batch(&teacher, 2, &quick(BinaryLoss::CrossEntropy, 10, 4)).unwrap();
    let (mean, max) = grid_discrepancy(&m, &teacher, &probe_grid(41, 10.0));
    assert!(mean <= 0.02 && max <= 0.05, "mean {mean}, max {max}");
}

/// Max |f − t| over a 1-D grid after DSE-only training.
pub fn dse_1d_discrepancy(seed: u64) -> f64 {
    let teacher = McPredictor::from_weights(vec![vec![0.4], vec![1.5], vec![-3.0]], false).unwrap();
    let mut cfg = quick(BinaryLoss::DerivativeSquareError, 3, seed);
    cfg.train.iterations = 20_000;
    cfg.rule = distilkit::optim::UpdateRule::sgd(distilkit::optim::Schedule::linear(1.0, 20_000));
    let (m, _) = binary_distill_batch(&teacher, 1, &cfg).unwrap();
    grid_1d(-10.0, 10.0, 401)
        .into_iter()
        .map(|x| (m.predict(&[x]) - teacher.predict(&[x])).abs())
        .fold(0.0, f64::max)
}

#[test]
fn dse_alone_recovers_a_1d_teacher() {
    let d = dse_1d_discrepancy(5);
    assert!(d <= 1e-2, "max |f - t| = {d}");
}
