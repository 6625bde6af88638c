//! Small synthetic benchmarks for the classical classifiers.

use super::Matrix;
use crate::tensor::RngState;

/// Centre of class `c`: on axis `c % dim`, alternating sign, pushed outward
/// for classes beyond `2 * dim` so every centre is distinct.
fn centre(c: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let sign = if (c / dim) % 2 == 0 { 1.0 } else { -1.0 };
    v[c % dim] = sign * separation * (1 + c / (2 * dim)) as f64;
    v
}

/// Isotropic Gaussian blobs, `n_per_class` rows per class, classes
/// interleaved.
pub fn gaussian_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    std: f64,
    seed: u64,
) -> (Matrix, Vec<usize>) {
    let mut rng = RngState::new(seed);
    let centres: Vec<Vec<f64>> = (0..n_classes).map(|c| centre(c, dim, separation)).collect();
    let n = n_per_class * n_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        data.extend(centres[c].iter().map(|m| m + std * rng.normal()));
        y.push(c);
    }
    (Matrix::new(n, dim, data).expect("consistent sizes"), y)
}

/// Two blobs labelled `+1` and `-1`.
pub fn binary_blobs(n_per_class: usize, dim: usize, separation: f64, std: f64, seed: u64) -> (Matrix, Vec<f64>) {
    let (x, y) = gaussian_blobs(n_per_class, 2, dim, separation, std, seed);
    (x, y.into_iter().map(|c| if c == 0 { 1.0 } else { -1.0 }).collect())
}

/// The four corners `(+-1, +-1)` labelled by the sign of `x0 * x1`.
pub fn xor_corners() -> (Matrix, Vec<f64>) {
    let pts = [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)];
    let x = Matrix::new(4, 2, pts.iter().flat_map(|&(a, b)| [a, b]).collect()).expect("4x2");
    let y = pts.iter().map(|&(a, b)| if a * b > 0.0 { 1.0 } else { -1.0 }).collect();
    (x, y)
}
