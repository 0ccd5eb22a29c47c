#![allow(dead_code)]

use distilkit::check::{fd_directional, fd_gradient};
use distilkit::density::DensityModel;
use distilkit::mathx::rel_err;
use distilkit::nade::NadeModel;
use distilkit::nn::{LayerSpec, Network, Nonlinearity, OutputFn, RDirection};
use distilkit::rng::{normal, seeded, shuffle, uniform, Rng};

pub struct NetCase {
    pub net: Network,
    pub kind: OutputFn,
    pub x: Vec<f64>,
    pub t: Vec<f64>,
}

fn heads(kind: OutputFn) -> &'static [Nonlinearity] {
    use Nonlinearity::*;
    match kind {
        OutputFn::CrossEntropy => &[Softmax, Logistic, Probit],
        OutputFn::BinaryCrossEntropy => &[Logistic, Probit, Softmax],
        _ => &Nonlinearity::ALL,
    }
}

fn target(kind: OutputFn, n: usize, rng: &mut Rng) -> Vec<f64> {
    match kind {
        OutputFn::CrossEntropy => {
            let w: Vec<f64> = (0..n).map(|_| uniform(rng) + 0.05).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        }
        OutputFn::BinaryCrossEntropy => (0..n).map(|_| uniform(rng)).collect(),
        _ => (0..n).map(|_| normal(rng)).collect(),
    }
}

/// Case `k` cycles the output function fastest, then the hidden
/// nonlinearity, then the head; every third case has two hidden layers.
pub fn net_case(k: usize, seed: u64) -> NetCase {
    let mut rng = seeded(seed.wrapping_mul(1000).wrapping_add(k as u64));
    let kind = OutputFn::ALL[k % 4];
    let hidden = Nonlinearity::ALL[k % 6];
    let hs = heads(kind);
    let head = hs[(k / 4) % hs.len()];
    let d = 3 + k % 3;
    let mut layers = vec![LayerSpec {
        n_in: d,
        n_out: 4,
        act: hidden,
    }];
    if k % 3 == 2 {
        layers.push(LayerSpec {
            n_in: 4,
            n_out: 5,
            act: Nonlinearity::ALL[(k + 1) % 6],
        });
    }
    let last = layers.last().unwrap().n_out;
    layers.push(LayerSpec {
        n_in: last,
        n_out: 3,
        act: head,
    });
    let mut net = Network::new(layers).unwrap();
    let bounded = matches!(
        head,
        Nonlinearity::Logistic | Nonlinearity::Probit | Nonlinearity::Softmax
    );
    // Outputs pinned at the probability clamp have no useful derivative.
    let x: Vec<f64> = loop {
        for p in net.params_mut() {
            *p = 0.7 * normal(&mut rng);
        }
        let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let y = net.output(&x).unwrap();
        if !bounded || y.iter().all(|&v| v > 1e-6 && v < 1.0 - 1e-6) {
            break x;
        }
    };
    let t = target(kind, 3, &mut rng);
    NetCase { net, kind, x, t }
}

fn joint(net: &Network, x: &[f64]) -> Vec<f64> {
    net.params().iter().chain(x).copied().collect()
}

/// (gradient error, HVP error) against central differences.
pub fn net_errors(c: &NetCase, seed: u64) -> (f64, f64) {
    let np = c.net.n_params();
    let p = joint(&c.net, &c.x);
    let eval = |q: &[f64]| {
        let mut n = c.net.clone();
        n.set_params(&q[..np]).unwrap();
        n
    };
    let (_, g) = c.net.eval_grad(&c.x, c.kind, &c.t).unwrap();
    let fd = fd_gradient(|q| eval(q).eval_grad(&q[np..], c.kind, &c.t).unwrap().0, &p, 1e-6);
    let ge = rel_err(&joint_grads(&g.theta, &g.x), &fd);
    let mut rng = seeded(seed);
    let v: Vec<f64> = (0..p.len()).map(|_| normal(&mut rng)).collect();
    let dir = RDirection::new(v[..np].to_vec(), v[np..].to_vec());
    let (_, _, h) = c.net.eval_hvp(&c.x, c.kind, &c.t, &dir).unwrap();
    let fdh = fd_directional(
        |q| {
            let (_, g) = eval(q).eval_grad(&q[np..], c.kind, &c.t).unwrap();
            joint_grads(&g.theta, &g.x)
        },
        &p,
        &v,
        1e-5,
    );
    (ge, rel_err(&joint_grads(&h.theta, &h.x), &fdh))
}

fn joint_grads(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub fn random_nade(i: usize, j: usize, seed: u64) -> NadeModel {
    let mut rng = seeded(seed);
    let mut m = NadeModel::random(i, j, &mut rng).unwrap();
    for v in m.params_mut() {
        *v += 0.4 * normal(&mut rng);
    }
    let mut ord: Vec<usize> = (0..i).collect();
    shuffle(&mut rng, &mut ord);
    m.with_ordering(ord).unwrap()
}

/// Same check for any density model at a (possibly relaxed) point `x`.
pub fn density_errors<S: DensityModel + Clone>(m: &S, x: &[f64], seed: u64) -> (f64, f64) {
    let np = m.params().len();
    let p: Vec<f64> = m.params().iter().chain(x).copied().collect();
    let at = |q: &[f64]| {
        let mut c = m.clone();
        c.params_mut().copy_from_slice(&q[..np]);
        c
    };
    let (_, gt, gx) = m.grad_log_density(x);
    let fd = fd_gradient(|q| at(q).log_density(&q[np..]), &p, 1e-6);
    let ge = rel_err(&joint_grads(&gt, &gx), &fd);
    let mut rng = seeded(seed);
    let v: Vec<f64> = (0..p.len()).map(|_| normal(&mut rng)).collect();
    let (ht, hx) = m.hvp_log_density(x, &v[..np], &v[np..]);
    let fdh = fd_directional(
        |q| {
            let (_, a, b) = at(q).grad_log_density(&q[np..]);
            joint_grads(&a, &b)
        },
        &p,
        &v,
        1e-5,
    );
    (ge, rel_err(&joint_grads(&ht, &hx), &fdh))
}

/// A binary point plus, for odd seeds, a relaxed interior point.
pub fn nade_point(i: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed ^ 0x5eed);
    (0..i)
        .map(|_| {
            let u = uniform(&mut rng);
            if seed.is_multiple_of(2) {
                (u < 0.5) as u8 as f64
            } else {
                0.1 + 0.8 * u
            }
        })
        .collect()
}
