//! Oracles shared by several test targets.
#![allow(dead_code)]

use crossscale::attention::QkvWeights;
use crossscale::tensor::{Tensor, TensorError, Var};

/// Reduces to a scalar with position-dependent weights so every output
/// coordinate contributes a distinct gradient.
pub fn weighted<'t>(v: Var<'t>) -> Result<Var<'t>, TensorError> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 + 0.3).sin()).collect();
    let w = v.tape().constant(Tensor::new(shape, w)?);
    v.mul(w)?.sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub struct Scalars {
    pub q: f64,
    pub k: f64,
    pub v: f64,
}

/// Written out by hand for `B = 1`, `T = 4`, `P = 2`, `D = 1`: two patches
/// of two steps, scalar projections, `sqrt(D) = 1`.
pub fn brute_force(
    x: [f64; 4],
    kp: [f64; 4],
    kl: [f64; 4],
    wp: &Scalars,
    wl: &Scalars,
) -> ([f64; 4], Vec<f64>, Vec<f64>) {
    let pool = |s: [f64; 4]| [(s[0] + s[1]) / 2.0, (s[2] + s[3]) / 2.0];
    let (px, pk) = (pool(x), pool(kp));
    let mut a_p = Vec::new();
    let mut c_p = [0.0; 2];
    for n in 0..2 {
        let q = px[n] * wp.q;
        let row = softmax(&[q * pk[0] * wp.k, q * pk[1] * wp.k]);
        c_p[n] = row[0] * px[0] * wp.v + row[1] * px[1] * wp.v;
        a_p.extend(row);
    }
    let mut a_l = Vec::new();
    let mut out = [0.0; 4];
    for n in 0..2 {
        for i in 0..2 {
            let q = x[2 * n + i] * wl.q;
            let row = softmax(&[q * kl[2 * n] * wl.k, q * kl[2 * n + 1] * wl.k]);
            let c_l = row[0] * x[2 * n] * wl.v + row[1] * x[2 * n + 1] * wl.v;
            out[2 * n + i] = c_p[n] + c_l;
            a_l.extend(row);
        }
    }
    (out, a_p, a_l)
}

pub fn scalar_qkv(s: &Scalars) -> QkvWeights<Tensor> {
    let t = |v| Tensor::new(vec![1, 1], vec![v]).unwrap();
    QkvWeights {
        query: t(s.q),
        key: t(s.k),
        value: t(s.v),
    }
}
