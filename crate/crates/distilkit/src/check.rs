//! Central finite-difference oracles for derivative checks.

/// ∇f(p) by central differences with step `h`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, p: &[f64], h: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            q[i] = p[i] + h;
            let up = f(&q);
            q[i] = p[i] - h;
            let dn = f(&q);
            q[i] = p[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// (∇g(p + h·v) − ∇g(p − h·v)) / 2h, an estimate of H·v.
pub fn fd_directional<G: FnMut(&[f64]) -> Vec<f64>>(mut g: G, p: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let up: Vec<f64> = p.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let dn: Vec<f64> = p.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let a = g(&up);
    a.iter().zip(g(&dn)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}
