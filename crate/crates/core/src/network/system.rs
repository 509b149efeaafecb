use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, noise_factor, DenseMatrix};

/// Noise distribution for generated measurements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseMode {
    #[default]
    Gaussian,
    /// Standard normal draws rejected outside `[-2, 2]` before scaling by `B`,
    /// so with diagonal `B` every noise entry satisfies `|v_k| <= 2 σ_k`.
    Truncated,
}

/// A linear measurement model `z = H x + v` with `v ~ N(0, Σ)`, `Σ = B Bᵀ`,
/// whose rows are split into contiguous monitor blocks.
#[derive(Clone, Debug)]
pub struct MeasurementSystem {
    h: DenseMatrix,
    sigma: DenseMatrix,
    b: DenseMatrix,
    x_true: DVector<f64>,
    noise: DVector<f64>,
    z: DVector<f64>,
    blocks: Vec<Range<usize>>,
}

impl MeasurementSystem {
    pub fn new(
        h: DenseMatrix,
        sigma: DenseMatrix,
        b: DenseMatrix,
        x_true: DVector<f64>,
        noise: DVector<f64>,
        blocks: Vec<Range<usize>>,
    ) -> Result<Self> {
        let (p, n) = h.shape();
        let mismatch = |what: &str| Error::DimensionMismatch(what.to_string());
        if sigma.shape() != (p, p) {
            return Err(mismatch("covariance must be p x p"));
        }
        if b.nrows() != p {
            return Err(mismatch("noise factor must have p rows"));
        }
        if x_true.len() != n || noise.len() != p {
            return Err(mismatch("state or noise vector has the wrong length"));
        }
        check_blocks(&blocks, p)?;
        for m in [&h, &sigma, &b] {
            ensure_finite(m)?;
        }
        let z = &h * &x_true + &noise;
        Ok(Self {
            h,
            sigma,
            b,
            x_true,
            noise,
            z,
            blocks,
        })
    }

    pub fn h(&self) -> &DenseMatrix {
        &self.h
    }

    pub fn sigma(&self) -> &DenseMatrix {
        &self.sigma
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn x_true(&self) -> &DVector<f64> {
        &self.x_true
    }

    pub fn noise(&self) -> &DVector<f64> {
        &self.noise
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn measurement_count(&self) -> usize {
        self.h.nrows()
    }

    pub fn monitor_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn h_block(&self, i: usize) -> DenseMatrix {
        self.h.rows_range(self.blocks[i].clone()).into_owned()
    }

    pub fn b_block(&self, i: usize) -> DenseMatrix {
        self.b.rows_range(self.blocks[i].clone()).into_owned()
    }

    pub fn z_block(&self, i: usize) -> DVector<f64> {
        self.z.rows_range(self.blocks[i].clone()).into_owned()
    }
}

pub(crate) fn check_blocks(blocks: &[Range<usize>], rows: usize) -> Result<()> {
    let mut next = 0;
    for (i, r) in blocks.iter().enumerate() {
        if r.start != next || r.end < r.start {
            return Err(Error::ContractViolation(format!(
                "block {i} ({r:?}) does not continue the row partition at {next}"
            )));
        }
        next = r.end;
    }
    if next != rows {
        return Err(Error::ContractViolation(format!(
            "blocks cover {next} rows of {rows}"
        )));
    }
    Ok(())
}

fn draw_standard<R: Rng>(rng: &mut R, len: usize, mode: NoiseMode) -> DVector<f64> {
    DVector::from_fn(len, |_, _| loop {
        let g: f64 = StandardNormal.sample(rng);
        if mode == NoiseMode::Gaussian || g.abs() <= 2.0 {
            break g;
        }
    })
}

/// One noise vector `v = B g`.
pub fn generate_noise<R: Rng>(b: &DenseMatrix, mode: NoiseMode, rng: &mut R) -> DVector<f64> {
    b * draw_standard(rng, b.ncols(), mode)
}

/// `z = H x + B g` with `g` standard normal from a generator seeded by `seed`.
pub fn generate_measurements(
    h: &DenseMatrix,
    x: &DVector<f64>,
    b: &DenseMatrix,
    seed: u64,
) -> Result<DVector<f64>> {
    let snaps = generate_snapshots(h, x, b, 1, NoiseMode::Gaussian, seed)?;
    Ok(snaps.column(0).into_owned())
}

/// `count` independent measurement vectors as the columns of a matrix.
pub fn generate_snapshots(
    h: &DenseMatrix,
    x: &DVector<f64>,
    b: &DenseMatrix,
    count: usize,
    mode: NoiseMode,
    seed: u64,
) -> Result<DenseMatrix> {
    if h.ncols() != x.len() || b.nrows() != h.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "H is {}x{}, x has {} entries, B has {} rows",
            h.nrows(),
            h.ncols(),
            x.len(),
            b.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = h * x;
    let mut out = DMatrix::zeros(h.nrows(), count);
    for mut col in out.column_iter_mut() {
        col.copy_from(&(&clean + generate_noise(b, mode, &mut rng)));
    }
    Ok(out)
}

fn target_row(z_len: usize, block: &Range<usize>, row: usize) -> Result<usize> {
    if block.end > z_len || row >= block.len() {
        return Err(Error::ContractViolation(format!(
            "row {row} is outside monitor block {block:?}"
        )));
    }
    Ok(block.start + row)
}

/// Adds one uniform `[0, w_max]` draw to row `row` of the monitor block.
/// Returns the corrupted vector and the drawn magnitude.
pub fn inject_false_data(
    z: &DVector<f64>,
    block: &Range<usize>,
    row: usize,
    w_max: f64,
    seed: u64,
) -> Result<(DVector<f64>, f64)> {
    if !(w_max.is_finite() && w_max >= 0.0) {
        return Err(Error::ContractViolation(format!(
            "w_max must be nonnegative, got {w_max}"
        )));
    }
    let w = if w_max == 0.0 {
        0.0
    } else {
        ChaCha8Rng::seed_from_u64(seed).random_range(0.0..=w_max)
    };
    Ok((inject_fixed(z, block, row, w)?, w))
}

/// Adds `w` to row `row` of the monitor block.
pub fn inject_fixed(
    z: &DVector<f64>,
    block: &Range<usize>,
    row: usize,
    w: f64,
) -> Result<DVector<f64>> {
    let k = target_row(z.len(), block, row)?;
    let mut out = z.clone();
    out[k] += w;
    Ok(out)
}

/// Mean absolute value of the entries of `z`.
pub fn nominal_injection(z: &DVector<f64>) -> f64 {
    if z.is_empty() {
        0.0
    } else {
        z.iter().map(|x| x.abs()).sum::<f64>() / z.len() as f64
    }
}

fn random_block_sizes<R: Rng>(rng: &mut R, rows: usize, blocks: usize) -> Vec<Range<usize>> {
    let mut cuts: Vec<usize> = Vec::with_capacity(blocks + 1);
    cuts.push(0);
    let mut pool: Vec<usize> = (1..rows).collect();
    for k in 0..blocks.saturating_sub(1) {
        let idx = rng.random_range(k..pool.len());
        pool.swap(k, idx);
        cuts.push(pool[k]);
    }
    cuts.push(rows);
    cuts.sort_unstable();
    cuts.windows(2).map(|w| w[0]..w[1]).collect()
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Noise-free random system `z = H x` whose `H` may have a nontrivial kernel,
/// split into `blocks` nonempty row blocks.
pub fn random_consistent_system(
    n: usize,
    rows: usize,
    blocks: usize,
    seed: u64,
) -> Result<MeasurementSystem> {
    if n == 0 || blocks == 0 || rows < blocks {
        return Err(Error::ContractViolation(format!(
            "need n >= 1 and {rows} rows >= {blocks} blocks >= 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_rank = n.min(rows);
    let rank = if rng.random_range(0.0..1.0) < 0.5 {
        max_rank
    } else {
        rng.random_range(1..=max_rank)
    };
    let h = gaussian(&mut rng, rows, rank) * gaussian(&mut rng, rank, n);
    let x = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let ranges = random_block_sizes(&mut rng, rows, blocks);
    MeasurementSystem::new(
        h,
        DMatrix::identity(rows, rows),
        DMatrix::identity(rows, rows),
        x,
        DVector::zeros(rows),
        ranges,
    )
}

/// Noisy random system with full-column-rank `H` (`p >= n`), diagonal
/// covariance with standard deviations in `[0.5, 1.5]`, split into `blocks`
/// nonempty row blocks.
pub fn random_estimation_system(
    n: usize,
    p: usize,
    blocks: usize,
    seed: u64,
) -> Result<MeasurementSystem> {
    if n == 0 || p < n || blocks == 0 || p < blocks {
        return Err(Error::ContractViolation(format!(
            "need 1 <= n={n} <= p={p} and 1 <= blocks={blocks} <= p"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = gaussian(&mut rng, p, n);
    let sd = DVector::from_fn(p, |_, _| rng.random_range(0.5..1.5));
    let sigma = DMatrix::from_diagonal(&sd.map(|s| s * s));
    let b = noise_factor(&sigma)?;
    let x = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let noise = generate_noise(&b, NoiseMode::Gaussian, &mut rng);
    let ranges = random_block_sizes(&mut rng, p, blocks);
    MeasurementSystem::new(h, sigma, b, x, noise, ranges)
}
