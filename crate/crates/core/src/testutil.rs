use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random `rows x cols` matrix of rank exactly `rank` (almost surely).
pub fn random_rank_matrix<R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    rank: usize,
) -> DMatrix<f64> {
    random_matrix(rng, rows, rank) * random_matrix(rng, rank, cols)
}

pub fn random_spd<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * n as f64
}
