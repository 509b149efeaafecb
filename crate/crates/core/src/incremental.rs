//! Sequential minimum-norm estimation and its weighted-least-squares link.
//!
//! Monitors process their equation blocks one after another. Each keeps a
//! running solution `x̂` of every block seen so far and an orthonormal basis
//! `K` of the directions those blocks leave undetermined, then hands both to
//! the next monitor. After the last block `x̂` is the minimum-norm solution of
//! the stacked system.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    ensure_finite, factor, induced_norm, orthonormal_span, pseudoinverse, pseudoinverse_scaled,
    spectral_norm, svd, DenseMatrix, MatrixNorm,
};
use crate::network::MeasurementSystem;
use crate::subspace::{Repr, Subspace};

/// Residual allowed on processed equations, relative to `max(1, |z|_∞)`.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-8;

/// One monitor's equations `matrix · x = rhs`. Each column of `rhs` is an
/// independent right-hand side (a measurement snapshot).
#[derive(Clone, Debug)]
pub struct EquationBlock {
    pub matrix: DenseMatrix,
    pub rhs: DenseMatrix,
}

impl EquationBlock {
    pub fn new(matrix: DenseMatrix, rhs: DVector<f64>) -> Result<Self> {
        let rhs = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        Self::with_snapshots(matrix, rhs)
    }

    pub fn with_snapshots(matrix: DenseMatrix, rhs: DenseMatrix) -> Result<Self> {
        if matrix.nrows() != rhs.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "block has {} rows but right-hand side has {}",
                matrix.nrows(),
                rhs.nrows()
            )));
        }
        ensure_finite(&matrix)?;
        ensure_finite(&rhs)?;
        Ok(Self { matrix, rhs })
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ambient_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn snapshots(&self) -> usize {
        self.rhs.ncols()
    }

    pub fn residual(&self, x: &DenseMatrix) -> DenseMatrix {
        &self.rhs - &self.matrix * x
    }
}

/// How the running kernel basis is stored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelForm {
    /// Start from the complement form and switch once the kernel is smaller.
    #[default]
    Auto,
    Explicit,
    Complement,
}

/// Work done by one block update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepRecord {
    pub rows: usize,
    pub kernel_dim_before: usize,
    pub kernel_dim_after: usize,
    pub rank: usize,
    /// `min(a b², a² b)` for the `a x b` matrix that was decomposed.
    pub svd_cost: usize,
}

/// Running estimate `x̂` (one column per snapshot) and kernel `K`.
#[derive(Clone, Debug)]
pub struct IncrementalState {
    pub(crate) x: DenseMatrix,
    pub(crate) kernel: Subspace,
}

fn svd_cost(a: usize, b: usize) -> usize {
    (a * b * b).min(a * a * b)
}

impl IncrementalState {
    /// `x̂ = 0`, `K` = the whole space.
    pub fn new(ambient_dim: usize, snapshots: usize) -> Self {
        Self {
            x: DMatrix::zeros(ambient_dim, snapshots),
            kernel: Subspace::full(ambient_dim),
        }
    }

    pub fn with_form(ambient_dim: usize, snapshots: usize, form: KernelForm) -> Self {
        let kernel = match form {
            KernelForm::Explicit => Subspace::explicit(DMatrix::identity(ambient_dim, ambient_dim)),
            _ => Subspace::full(ambient_dim),
        };
        Self {
            x: DMatrix::zeros(ambient_dim, snapshots),
            kernel,
        }
    }

    pub fn estimate(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn kernel(&self) -> &Subspace {
        &self.kernel
    }

    pub fn into_parts(self) -> (DenseMatrix, Subspace) {
        (self.x, self.kernel)
    }

    /// `x̂ += K (A K)† (y − A x̂)` and `K := Basis(K Ker(A K))`.
    pub fn absorb(&mut self, a: &DenseMatrix, y: &DenseMatrix) -> Result<StepRecord> {
        let n = self.x.nrows();
        if a.ncols() != n || y.nrows() != a.nrows() || y.ncols() != self.x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "block {}x{} with {}x{} right-hand side against state {}x{}",
                a.nrows(),
                a.ncols(),
                y.nrows(),
                y.ncols(),
                n,
                self.x.ncols()
            )));
        }
        let rows = a.nrows();
        let before = self.kernel.dim();
        if rows == 0 || before == 0 {
            return Ok(StepRecord {
                rows,
                kernel_dim_before: before,
                kernel_dim_after: before,
                rank: 0,
                svd_cost: 0,
            });
        }
        let scale = a.norm();
        let residual = y - a * &self.x;
        let (rank, cost) = match &mut self.kernel.repr {
            Repr::Complement(r) => {
                // A K Kᵀ = A (I − R Rᵀ), and (A K Kᵀ)† = K (A K)†.
                let g = a - (a * &*r) * r.transpose();
                let f = factor(&g, scale, Some((rows, before)), false)?;
                // Exact in theory; numerically it keeps a large update from
                // leaking into equations that are already satisfied.
                let step = f.solve(&residual);
                self.x += &step - &*r * (r.transpose() * &step);
                if f.rank() > 0 {
                    let fresh = &f.v - &*r * (r.transpose() * &f.v);
                    let fresh = orthonormal_span(&fresh, 0.5)?;
                    let mut grown = DMatrix::zeros(n, r.ncols() + fresh.ncols());
                    grown.columns_mut(0, r.ncols()).copy_from(r);
                    grown
                        .columns_mut(r.ncols(), fresh.ncols())
                        .copy_from(&fresh);
                    *r = grown;
                }
                (f.rank(), svd_cost(rows, n))
            }
            Repr::Explicit(k) => {
                let ak = a * &*k;
                let f = factor(&ak, scale, None, true)?;
                self.x += &*k * f.solve(&residual);
                let w = f.kernel.as_ref().expect("kernel requested");
                *k = &*k * w;
                (f.rank(), svd_cost(rows, before.max(rows)))
            }
        };
        Ok(StepRecord {
            rows,
            kernel_dim_before: before,
            kernel_dim_after: self.kernel.dim(),
            rank,
            svd_cost: cost,
        })
    }
}

/// Result of a full pass over the blocks.
#[derive(Clone, Debug)]
pub struct IncrementalRun {
    pub estimate: DenseMatrix,
    pub kernel: Subspace,
    /// Number of hand-offs of `(x̂, K)` between consecutive monitors.
    pub transmissions: usize,
    pub steps: Vec<StepRecord>,
}

fn consistency_tolerance(blocks: &[EquationBlock]) -> f64 {
    let z_inf = blocks.iter().map(|b| b.rhs.amax()).fold(0.0, f64::max);
    CONSISTENCY_TOLERANCE * z_inf.max(1.0)
}

pub(crate) fn max_residual(blocks: &[EquationBlock], x: &DenseMatrix) -> f64 {
    blocks
        .iter()
        .map(|b| b.residual(x).amax())
        .fold(0.0, f64::max)
}

/// Runs the sequential algorithm over `blocks` and checks that every
/// equation holds at the end.
pub fn run_incremental(blocks: &[EquationBlock], form: KernelForm) -> Result<IncrementalRun> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::ContractViolation("no equation blocks".into()))?;
    let (n, s) = (first.ambient_dim(), first.snapshots());
    for b in blocks {
        if b.ambient_dim() != n || b.snapshots() != s {
            return Err(Error::DimensionMismatch(
                "blocks disagree on ambient dimension or snapshot count".into(),
            ));
        }
    }
    let mut state = IncrementalState::with_form(n, s, form);
    let mut steps = Vec::with_capacity(blocks.len());
    let mut transmissions = 0;
    for (i, block) in blocks.iter().enumerate() {
        steps.push(state.absorb(&block.matrix, &block.rhs)?);
        if form == KernelForm::Auto {
            state.kernel.compact()?;
        }
        if i + 1 < blocks.len() {
            transmissions += 1;
        }
    }
    let residual = max_residual(blocks, &state.x);
    let tolerance = consistency_tolerance(blocks);
    if residual.is_nan() || residual > tolerance {
        return Err(Error::Inconsistent {
            residual,
            tolerance,
        });
    }
    Ok(IncrementalRun {
        estimate: state.x,
        kernel: state.kernel,
        transmissions,
        steps,
    })
}

/// Minimum-norm solution of the stacked blocks, `H† z`.
pub fn incremental_min_norm(blocks: &[EquationBlock]) -> Result<DVector<f64>> {
    let run = run_incremental(blocks, KernelForm::Auto)?;
    Ok(run.estimate.column(0).into_owned())
}

/// Centralized weighted-least-squares estimate and its gain.
#[derive(Clone, Debug)]
pub struct WlsSolution {
    pub estimate: DVector<f64>,
    /// `W = (Hᵀ Σ⁻¹ H)⁻¹ Hᵀ Σ⁻¹`.
    pub gain: DenseMatrix,
}

/// `W = (Hᵀ Σ⁻¹ H)⁻¹ Hᵀ Σ⁻¹` for full-column-rank `H` and SPD `Σ`.
pub fn wls_gain(h: &DenseMatrix, sigma: &DenseMatrix) -> Result<DenseMatrix> {
    ensure_finite(h)?;
    ensure_finite(sigma)?;
    let (p, n) = h.shape();
    if sigma.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "covariance {}x{} for {p} measurements",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let rank = svd(h)?.rank;
    if rank < n {
        return Err(Error::ContractViolation(format!(
            "measurement matrix has a nontrivial kernel (rank {rank} < {n})"
        )));
    }
    let chol = sigma.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        min_eigenvalue: f64::NAN,
    })?;
    let sigma_inv_h = chol.solve(h);
    let normal = h.transpose() * &sigma_inv_h;
    let normal_chol = normal.cholesky().ok_or_else(|| {
        Error::Numerical("normal matrix Hᵀ Σ⁻¹ H is not numerically positive definite".into())
    })?;
    Ok(normal_chol.solve(&sigma_inv_h.transpose()))
}

pub fn wls_oracle(h: &DenseMatrix, sigma: &DenseMatrix, z: &DVector<f64>) -> Result<WlsSolution> {
    let gain = wls_gain(h, sigma)?;
    if z.len() != h.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} measurements for {} rows",
            z.len(),
            h.nrows()
        )));
    }
    Ok(WlsSolution {
        estimate: &gain * z,
        gain,
    })
}

/// The monitor blocks `[H_i  εB_i]` of `z = [H  εB] (x, v̄)`.
#[derive(Clone, Debug)]
pub struct EpsilonEmbedding {
    pub epsilon: f64,
    pub state_dim: usize,
    pub blocks: Vec<DenseMatrix>,
}

impl EpsilonEmbedding {
    pub fn new(
        h: &DenseMatrix,
        b: &DenseMatrix,
        row_blocks: &[Range<usize>],
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::ContractViolation(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if b.nrows() != h.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "H has {} rows, B has {}",
                h.nrows(),
                b.nrows()
            )));
        }
        crate::network::check_blocks(row_blocks, h.nrows())?;
        let n = h.ncols();
        let blocks = row_blocks
            .iter()
            .map(|r| {
                let mut a = DMatrix::zeros(r.len(), n + b.ncols());
                a.columns_mut(0, n).copy_from(&h.rows_range(r.clone()));
                a.columns_mut(n, b.ncols())
                    .copy_from(&(b.rows_range(r.clone()) * epsilon));
                a
            })
            .collect();
        Ok(Self {
            epsilon,
            state_dim: n,
            blocks,
        })
    }

    pub fn for_system(system: &MeasurementSystem, epsilon: f64) -> Result<Self> {
        Self::new(system.h(), system.b(), system.blocks(), epsilon)
    }

    pub fn ambient_dim(&self) -> usize {
        self.blocks.first().map_or(self.state_dim, |b| b.ncols())
    }

    /// Pairs each augmented block with its slice of the measurements
    /// (columns are snapshots).
    pub fn equation_blocks(
        &self,
        row_blocks: &[Range<usize>],
        z: &DenseMatrix,
    ) -> Result<Vec<EquationBlock>> {
        self.blocks
            .iter()
            .zip(row_blocks)
            .map(|(a, r)| {
                EquationBlock::with_snapshots(a.clone(), z.rows_range(r.clone()).into_owned())
            })
            .collect()
    }
}

/// `1e-6 · s_max(H) / s_max(B)`.
pub fn default_epsilon(h: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    let sh = svd(h)?.largest_singular_value();
    let sb = svd(b)?.largest_singular_value();
    if sh <= 0.0 || sb <= 0.0 {
        return Err(Error::ContractViolation(
            "H and B must be nonzero to choose epsilon".into(),
        ));
    }
    Ok(1e-6 * sh / sb)
}

/// `x̂(ε)` for every column of `z`, computed block by block on the embedded
/// system.
pub fn wls_incremental_snapshots(
    h: &DenseMatrix,
    b: &DenseMatrix,
    z: &DenseMatrix,
    row_blocks: &[Range<usize>],
    epsilon: f64,
) -> Result<DenseMatrix> {
    let emb = EpsilonEmbedding::new(h, b, row_blocks, epsilon)?;
    let blocks = emb.equation_blocks(row_blocks, z)?;
    let run = run_incremental(&blocks, KernelForm::Auto)?;
    Ok(run.estimate.rows(0, h.ncols()).into_owned())
}

/// `x̂(ε)`: the state part of the minimum-norm solution of `z = [H εB](x, v̄)`.
pub fn wls_incremental(
    h: &DenseMatrix,
    b: &DenseMatrix,
    z: &DVector<f64>,
    row_blocks: &[Range<usize>],
    epsilon: f64,
) -> Result<DVector<f64>> {
    let zm = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
    Ok(wls_incremental_snapshots(h, b, &zm, row_blocks, epsilon)?
        .column(0)
        .into_owned())
}

/// Closed-form pseudoinverse of `[H  εB]` together with its building blocks.
#[derive(Clone, Debug)]
pub struct BlockPinv {
    /// `[H εB]†`, `(n + p) x p`.
    pub pinv: DenseMatrix,
    /// `C = ε (I − H H†) B`.
    pub c: DenseMatrix,
    /// `E = I − C† C`.
    pub e: DenseMatrix,
    /// `D = ε E [I + ε² E Bᵀ (H Hᵀ)† B E]⁻¹ Bᵀ (H Hᵀ)† (I − ε B C†)`.
    pub d: DenseMatrix,
    /// `H†`.
    pub h_pinv: DenseMatrix,
}

impl BlockPinv {
    /// Rows of the pseudoinverse acting on the state, `H† − ε H† B (C† + D)`.
    pub fn state_block(&self) -> DenseMatrix {
        self.pinv.rows(0, self.h_pinv.nrows()).into_owned()
    }
}

pub fn block_pinv_formula(h: &DenseMatrix, b: &DenseMatrix, epsilon: f64) -> Result<BlockPinv> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::ContractViolation(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (p, n) = h.shape();
    if b.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "B must be {p}x{p}, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    let q = b.ncols();
    let h_pinv = pseudoinverse(h)?;
    let eye = DMatrix::<f64>::identity(p, p);
    let c = (&eye - h * &h_pinv) * b * epsilon;
    let c_pinv = pseudoinverse_scaled(&c, epsilon * spectral_norm(b)?)?;
    let e = DMatrix::<f64>::identity(q, q) - &c_pinv * &c;
    let h_norm = spectral_norm(h)?;
    let hht_pinv = pseudoinverse_scaled(&(h * h.transpose()), h_norm * h_norm)?;
    let bt_m = b.transpose() * &hht_pinv;
    let inner = DMatrix::<f64>::identity(q, q) + (&e * &bt_m * b * &e) * (epsilon * epsilon);
    let inner_chol = inner.clone().cholesky().ok_or_else(|| {
        Error::Numerical("I + ε² E Bᵀ (H Hᵀ)† B E is not numerically invertible".into())
    })?;
    let tail = &bt_m * (&eye - b * &c_pinv * epsilon);
    let d = &e * inner_chol.solve(&tail) * epsilon;
    let bottom = &c_pinv + &d;
    let top = &h_pinv - &h_pinv * b * &bottom * epsilon;
    let mut pinv = DMatrix::zeros(n + q, p);
    pinv.rows_mut(0, n).copy_from(&top);
    pinv.rows_mut(n, q).copy_from(&bottom);
    Ok(BlockPinv {
        pinv,
        c,
        e,
        d,
        h_pinv,
    })
}

/// `x_wls − x̂(ε) = ε H† B D z`.
pub fn approximation_error_exact(
    h: &DenseMatrix,
    b: &DenseMatrix,
    z: &DVector<f64>,
    epsilon: f64,
) -> Result<DVector<f64>> {
    let f = block_pinv_formula(h, b, epsilon)?;
    if z.len() != h.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} measurements for {} rows",
            z.len(),
            h.nrows()
        )));
    }
    Ok(&f.h_pinv * b * (&f.d * z) * epsilon)
}

/// An `ε` together with a flag for the case `ε >= 1`, where the embedding no
/// longer acts as a small perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonChoice {
    pub epsilon: f64,
    pub exceeds_unity: bool,
}

/// Largest `ε` with `ε · bound_hbdz <= target`.
pub fn epsilon_for_accuracy(bound_hbdz: f64, target: f64) -> Result<EpsilonChoice> {
    if !(bound_hbdz.is_finite() && bound_hbdz > 0.0 && target.is_finite() && target > 0.0) {
        return Err(Error::ContractViolation(format!(
            "bound ({bound_hbdz}) and target ({target}) must be positive"
        )));
    }
    let epsilon = target / bound_hbdz;
    Ok(EpsilonChoice {
        epsilon,
        exceeds_unity: epsilon >= 1.0,
    })
}

/// `|I − H W| · v_norm` in the chosen induced norm.
pub fn residual_bound_with_norm(
    h: &DenseMatrix,
    sigma: &DenseMatrix,
    v_norm: f64,
    norm: MatrixNorm,
) -> Result<f64> {
    let w = wls_gain(h, sigma)?;
    let p = h.nrows();
    let proj = DMatrix::<f64>::identity(p, p) - h * w;
    Ok(induced_norm(&proj, norm)? * v_norm)
}

/// `|I − H W|_∞ · v_norm`.
pub fn residual_bound(h: &DenseMatrix, sigma: &DenseMatrix, v_norm: f64) -> Result<f64> {
    residual_bound_with_norm(h, sigma, v_norm, MatrixNorm::Infinity)
}
