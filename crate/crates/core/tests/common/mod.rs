//! Test-only reference implementations: plain double-precision loops that
//! share no code with the library's kernels.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;
pub mod weights;

use mixencoder::{Rng, Scalar, Tensor};

pub fn random_tensor<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal::<T>(std))
}

/// Row-major 2-D matrix of f64 used by the oracles.
pub type Mat = Vec<Vec<f64>>;

pub fn to_mat<T: Scalar>(t: &Tensor<T>) -> Mat {
    let w = t.last_dim();
    t.data()
        .chunks(w)
        .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
        .collect()
}

pub fn to_vec64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

pub fn max_rel_err(got: &[f64], want: &[f64], floor: f64) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max)
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
