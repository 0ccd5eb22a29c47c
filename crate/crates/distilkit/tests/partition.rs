use distilkit::gendistill::{distill_rbm, GenLoss, RbmDistillConfig};
use distilkit::nade::NadeModel;
use distilkit::partition::{estimate_all, LogZEstimate, LogZMethod, PartitionConfig};
use distilkit::rbm::RbmModel;
use distilkit::rng::seeded;
use distilkit::Result;

type NoProbe = fn(&NadeModel) -> Result<f64>;

/// A 12-visible, 6-hidden random RBM and a NADE distilled from it with KL on
/// 50,000 teacher samples.
pub fn distilled_pair(seed: u64) -> (RbmModel, NadeModel) {
    let mut rng = seeded(seed);
    let rbm = RbmModel::random(12, 6, 1.0, 0.5, &mut rng);
    let mut nade = NadeModel::random(12, 20, &mut rng).unwrap();
    let mut cfg = RbmDistillConfig::reference(GenLoss::Kl, seed + 1);
    cfg.distill.train.iterations = 2500;
    distill_rbm(&rbm, &mut nade, &cfg, None::<NoProbe>).unwrap();
    (rbm, nade)
}

fn get(es: &[LogZEstimate], m: LogZMethod) -> &LogZEstimate {
    es.iter().find(|e| e.method == m).unwrap()
}

#[test]
fn twelve_bit_rbm_with_nade_proposal() {
    let (rbm, nade) = distilled_pair(100);
    let mut methods = LogZMethod::ESTIMATORS.to_vec();
    methods.push(LogZMethod::Exact);
    let es = estimate_all(&rbm, &nade, &methods, &PartitionConfig::reference(7)).unwrap();
    let exact = get(&es, LogZMethod::Exact).estimate;
    let bridge = get(&es, LogZMethod::Bridge);
    let is = get(&es, LogZMethod::Importance);
    assert!(bridge.covers(exact, 3.0));
    assert!(is.covers(exact, 3.0));
    assert!(bridge.se <= is.se);
    let trivial = get(&es, LogZMethod::Trivial).estimate;
    let lower = get(&es, LogZMethod::KlLower);
    let upper = get(&es, LogZMethod::KlUpper);
    assert!(trivial <= lower.estimate + 3.0 * lower.se);
    assert!(lower.estimate - 3.0 * lower.se <= exact);
    assert!(exact <= upper.estimate + 3.0 * upper.se);
}
