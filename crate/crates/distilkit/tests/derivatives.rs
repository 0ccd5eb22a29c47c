mod common;

use common::{density_errors, nade_point, net_case, net_errors, random_nade};
use distilkit::density::{DensityModel, DiagGaussian};
use distilkit::nn::{Nonlinearity, OutputFn};
use proptest::prelude::*;

#[test]
fn all_nonlinearities_and_output_functions() {
    let mut hidden = std::collections::HashSet::new();
    let mut kinds = std::collections::HashSet::new();
    let mut worst = (0.0f64, 0.0f64);
    for k in 0..24 {
        let c = net_case(k, 1);
        for l in c.net.layers() {
            hidden.insert(l.act);
        }
        kinds.insert(c.kind);
        let (g, h) = net_errors(&c, k as u64);
        assert!(
            g <= 1e-5,
            "case {k} ({}, {:?}): gradient rel err {g:e}",
            c.net.arch(),
            c.kind
        );
        assert!(
            h <= 1e-4,
            "case {k} ({}, {:?}): HVP rel err {h:e}",
            c.net.arch(),
            c.kind
        );
        worst = (worst.0.max(g), worst.1.max(h));
    }
    assert_eq!(hidden.len(), Nonlinearity::ALL.len());
    assert_eq!(kinds.len(), OutputFn::ALL.len());
    eprintln!("worst gradient {:e}, worst HVP {:e}", worst.0, worst.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn random_nets_pass_fd(k in 0usize..1000, seed in 0u64..1000) {
        let c = net_case(k, seed);
        let (g, h) = net_errors(&c, seed);
        prop_assert!(g <= 1e-5, "gradient {g:e} for {}", c.net.arch());
        prop_assert!(h <= 1e-4, "HVP {h:e} for {}", c.net.arch());
    }
}

#[test]
fn nade_derivatives() {
    for seed in 0..8u64 {
        let m = random_nade(6 + seed as usize % 3, 4, seed);
        let x = nade_point(m.dim(), seed);
        let (g, h) = density_errors(&m, &x, seed);
        assert!(g <= 1e-5, "seed {seed}: gradient {g:e}");
        assert!(h <= 1e-4, "seed {seed}: HVP {h:e}");
    }
}

#[test]
fn gaussian_student_derivatives() {
    let g = DiagGaussian::new(&[0.4, -1.3, 2.0], &[0.6, 1.7, 0.9]);
    let (ge, he) = density_errors(&g, &[1.0, 0.2, -0.5], 3);
    assert!(ge <= 1e-5 && he <= 1e-4);
}
