//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use aspca::rng::stream_rng;
use aspca::simgen::gen_normal_matrix;
use aspca::{AmbientSpace, BasisSet, SampleSet};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 0xF1C7, 0)
}

/// Small 2D grid with random positive quadrature weights.
pub fn random_space(rng: &mut ChaCha8Rng, max_side: usize) -> AmbientSpace {
    let dims = [rng.random_range(2..=max_side), rng.random_range(2..=max_side)];
    let v = dims[0] * dims[1];
    let weights = (0..v).map(|_| rng.random_range(0.2..2.0)).collect();
    AmbientSpace::with_weights(&dims, weights).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    gen_normal_matrix(rows, cols, rng)
}

pub fn random_sample(rng: &mut ChaCha8Rng, n: usize, v: usize) -> SampleSet {
    SampleSet::from_matrix(random_matrix(rng, n, v)).unwrap()
}

/// Weighted inner products of the rows of `a` with the rows of `b`, looped.
pub fn looped_cross(space: &AmbientSpace, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let w = space.weights();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        (0..a.ncols()).map(|v| w[v] * a[(i, v)] * b[(j, v)]).sum()
    })
}

/// The identity basis: one indicator per cell.
pub fn identity_basis(v: usize) -> BasisSet {
    BasisSet::raw(DMatrix::identity(v, v))
}

/// Eigenpairs of the weighted empirical covariance operator computed on
/// the full grid: `W^{1/2} C W^{1/2}` with `C` the divisor-n covariance.
/// Eigenfunctions come back as rows, unit-norm in the weighted product,
/// in descending order, only those above `rel_tol · lambda_1`.
pub fn dense_pca(space: &AmbientSpace, sample: &SampleSet, rel_tol: f64) -> (Vec<f64>, DMatrix<f64>) {
    let z = sample.matrix();
    let n = z.nrows() as f64;
    let mean = z.row_sum() / n;
    let mut c = z.clone();
    for i in 0..c.nrows() {
        let mut row = c.row_mut(i);
        row -= &mean;
    }
    let cov = c.transpose() * &c / n;
    let sw: Vec<f64> = space.weights().iter().map(|w| w.sqrt()).collect();
    let v = sw.len();
    let k = DMatrix::from_fn(v, v, |a, b| sw[a] * cov[(a, b)] * sw[b]);
    let eig = SymmetricEigen::new(k);
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let top = eig.eigenvalues[order[0]].max(0.0);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > rel_tol * top)
        .collect();
    let lambdas = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    let phi = DMatrix::from_fn(keep.len(), v, |j, cell| eig.eigenvectors[(cell, keep[j])] / sw[cell]);
    (lambdas, phi)
}

/// Largest absolute difference after flipping `b`'s rows to agree in sign
/// with `a`'s.
pub fn sign_aligned_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut worst: f64 = 0.0;
    for j in 0..a.nrows() {
        let dot: f64 = a.row(j).dot(&b.row(j));
        let s = if dot < 0.0 { -1.0 } else { 1.0 };
        for v in 0..a.ncols() {
            worst = worst.max((a[(j, v)] - s * b[(j, v)]).abs());
        }
    }
    worst
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
