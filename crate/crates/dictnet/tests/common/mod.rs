#![allow(dead_code)]

use dictnet_core::numerics::seeded_gaussian;
use dictnet_core::{Matrix, RngSeed};

/// `n` samples from `classes` mutually orthogonal coordinate subspaces of
/// dimension `rank` in `R^d`, labels cycling `0, 1, 2, ...`, plus Gaussian noise.
/// Coefficients are `0.5 + |g|` so every class sits in a positive cone; a
/// sign-symmetric class could not be told apart from its mirror image by any
/// decision rule that is odd in `x`.
pub fn planted_classes(d: usize, n: usize, classes: usize, rank: usize, noise: f64, scale: f64, seed: u64) -> (Matrix, Vec<usize>) {
    assert!(classes * rank <= d);
    let coef = seeded_gaussian(rank, n, RngSeed(seed));
    let eps = seeded_gaussian(d, n, RngSeed(seed + 1));
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let x = Matrix::from_fn(d, n, |r, c| {
        let class = labels[c];
        let signal = if r / rank == class && r < classes * rank {
            scale * (0.5 + coef.get(r % rank, c).abs())
        } else {
            0.0
        };
        signal + noise * eps.get(r, c)
    });
    (x, labels)
}

/// Same data with each class subspace spread over all coordinates by a fixed
/// random orthonormal basis (Gram-Schmidt of a Gaussian matrix).
pub fn planted_rotated(d: usize, n: usize, classes: usize, rank: usize, noise: f64, scale: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let (x, labels) = planted_classes(d, n, classes, rank, noise, scale, seed);
    let q = orthonormal(d, seed + 7);
    (q.matmul(&x), labels)
}

pub fn orthonormal(d: usize, seed: u64) -> Matrix {
    let g = seeded_gaussian(d, d, RngSeed(seed));
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for c in 0..d {
        let mut v = g.column(c);
        for u in &cols {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.iter().map(|a| a / norm).collect());
    }
    Matrix::from_columns(d, &cols).unwrap()
}

pub fn accuracy(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
