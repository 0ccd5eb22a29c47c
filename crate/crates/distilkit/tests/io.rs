use distilkit::config::{load_config, DistillSpec};
use distilkit::dataio::{load_idx_pair, Dataset};
use distilkit::mcmc::SampleBag;
use distilkit::nade::NadeModel;
use distilkit::nn::Network;
use distilkit::rbm::RbmModel;
use distilkit::rng::seeded;
use distilkit::Error;
use tempfile::TempDir;

#[test]
fn models_survive_a_trip_through_disk() {
    let dir = TempDir::new().unwrap();
    let p = |n: &str| dir.path().join(n);
    let mut rng = seeded(11);

    let net = Network::random("5-relu-4-probit-3-logsoftmax-2", &mut rng).unwrap();
    net.save(&p("a.net")).unwrap();
    assert_eq!(Network::load(&p("a.net")).unwrap(), net);
    net.save_json(&p("a.json")).unwrap();
    assert_eq!(Network::load_json(&p("a.json")).unwrap(), net);

    let nade = NadeModel::random(6, 3, &mut rng)
        .unwrap()
        .with_ordering(vec![5, 0, 4, 1, 3, 2])
        .unwrap();
    nade.save(&p("a.nade")).unwrap();
    assert_eq!(NadeModel::load(&p("a.nade")).unwrap(), nade);

    let rbm = RbmModel::random(7, 2, 1.0, 0.5, &mut rng);
    rbm.save(&p("a.rbm")).unwrap();
    assert_eq!(RbmModel::load(&p("a.rbm")).unwrap(), rbm);

    let ds = Dataset::new(3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125], Some(vec![1, 7])).unwrap();
    ds.save(&p("a.ds")).unwrap();
    assert_eq!(Dataset::load(&p("a.ds")).unwrap(), ds);

    let mut bag = SampleBag::new(2);
    bag.push(0, 3, &[1.5, -2.0]);
    bag.push(1, 9, &[f64::MIN_POSITIVE, 1e300]);
    bag.save(&p("a.bag")).unwrap();
    assert_eq!(SampleBag::load(&p("a.bag")).unwrap(), bag);
}

#[test]
fn damaged_files_are_rejected_with_an_offset() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.rbm");
    RbmModel::random(4, 3, 1.0, 0.5, &mut seeded(2)).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(RbmModel::load(&path), Err(Error::Parse { .. })));

    let mut wrong = bytes.clone();
    wrong[0] ^= 0xff;
    std::fs::write(&path, &wrong).unwrap();
    assert!(matches!(RbmModel::load(&path), Err(Error::Parse { .. })));

    // a network file is not a NADE file
    let net = dir.path().join("n.net");
    Network::random("3-logsoftmax-2", &mut seeded(1))
        .unwrap()
        .save(&net)
        .unwrap();
    assert!(NadeModel::load(&net).is_err());

    assert!(matches!(
        RbmModel::load(&dir.path().join("absent")),
        Err(Error::MissingInput(_)) | Err(Error::Io(_))
    ));
}

fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend(d.to_be_bytes());
    }
    v.extend_from_slice(body);
    v
}

#[test]
fn idx_pair_scales_pixels_and_keeps_shape() {
    let dir = TempDir::new().unwrap();
    let (im, lb) = (dir.path().join("im"), dir.path().join("lb"));
    std::fs::write(
        &im,
        idx(0x803, &[2, 2, 3], &[0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6]),
    )
    .unwrap();
    std::fs::write(&lb, idx(0x801, &[2], &[4, 9])).unwrap();
    let ds = load_idx_pair(&im, &lb).unwrap();
    assert_eq!((ds.n, ds.d, ds.rows, ds.cols), (2, 6, 2, 3));
    assert_eq!(ds.labels, Some(vec![4, 9]));
    assert_eq!(ds.image(0), &[0.0, 1.0, 0.2, 0.4, 0.6, 0.8]);

    std::fs::write(&lb, idx(0x801, &[3], &[4, 9, 1])).unwrap();
    assert!(load_idx_pair(&im, &lb).is_err());
}

#[test]
fn configs_reject_unknown_fields_and_missing_files() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(
        &path,
        "seed = 1\nteachers = [\"t.net\"]\nstudent = \"784-logsoftmax-10\"\nloss = \"cross_entropy\"\ngenerator = { kind = \"data\" }\ntrain = { iterations = 10, batch_size = 5 }\n",
    )
    .unwrap();
    let spec: DistillSpec = load_config(&path).unwrap();
    assert_eq!(spec.seed, 1);

    std::fs::write(
        &path,
        "seed = 1\nteachers = [\"t.net\"]\nstudent = \"784-logsoftmax-10\"\nloss = \"cross_entropy\"\ngenerator = { kind = \"data\" }\ntrain = { iterations = 10, batch_size = 5 }\nlearning_rat = 3\n",
    )
    .unwrap();
    assert!(matches!(load_config::<DistillSpec>(&path), Err(Error::Config(_))));
    assert!(matches!(
        load_config::<DistillSpec>(&dir.path().join("nope.toml")),
        Err(Error::MissingInput(_))
    ));
}
