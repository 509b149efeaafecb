//! Dense linear-algebra kernels shared by every estimator.
//!
//! Numerical rank is decided with a single rule: singular values at or below
//! `max(rows, cols) * f64::EPSILON * s_max` are treated as zero. Callers that
//! work on projected matrices (a block multiplied by a kernel basis) pass the
//! norm of the unprojected block as the reference scale, so that a block whose
//! rows were already absorbed is recognized as numerically zero instead of
//! being normalized by its own round-off.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Real matrix with explicit dimensions. All operations reject non-finite entries.
pub type DenseMatrix = DMatrix<f64>;

/// Relative floor applied on top of [`rank_tolerance`] when a matrix is
/// factored against an external reference scale: singular values at or below
/// `RANK_FLOOR * scale` are round-off left over from projecting out
/// directions that were already resolved.
pub const RANK_FLOOR: f64 = 1e-11;

/// Largest principal angle (as a sine) tolerated when two bases are compared
/// as subspaces.
pub const SUBSPACE_TOLERANCE: f64 = 1e-8;

/// Threshold at or below which a singular value counts as zero.
pub fn rank_tolerance(rows: usize, cols: usize, s_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * s_max
}

pub fn ensure_finite(m: &DenseMatrix) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Thin singular value decomposition `M = U diag(s) V^T` with nonincreasing `s`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub singular_values: DVector<f64>,
    pub v: DenseMatrix,
    pub rank: usize,
}

impl SvdResult {
    pub fn largest_singular_value(&self) -> f64 {
        self.singular_values.get(0).copied().unwrap_or(0.0)
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        &self.u * DMatrix::from_diagonal(&self.singular_values) * self.v.transpose()
    }
}

/// Full singular value decomposition `M = U diag(s) Vᵀ` with square `U`, `V`
/// and nonincreasing `s` (length `min(rows, cols)`).
fn full_svd(m: &DenseMatrix) -> Result<(DenseMatrix, DVector<f64>, DenseMatrix)> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok((
            DMatrix::identity(rows, rows),
            DVector::zeros(0),
            DMatrix::identity(cols, cols),
        ));
    }
    let svd = nalgebra_lapack::SVD::new(m.clone()).ok_or(Error::SvdNotConverged { rows, cols })?;
    if !svd.singular_values.iter().all(|x| x.is_finite()) {
        return Err(Error::SvdNotConverged { rows, cols });
    }
    Ok((svd.u, svd.singular_values, svd.vt.transpose()))
}

/// Thin variant of [`full_svd`].
fn raw_svd(m: &DenseMatrix) -> Result<(DenseMatrix, DVector<f64>, DenseMatrix)> {
    let (u, s, v) = full_svd(m)?;
    let k = s.len();
    Ok((
        u.columns(0, k).into_owned(),
        s,
        v.columns(0, k).into_owned(),
    ))
}

pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    ensure_finite(m)?;
    let (u, s, v) = raw_svd(m)?;
    let s_max = s.get(0).copied().unwrap_or(0.0);
    let tol = rank_tolerance(m.nrows(), m.ncols(), s_max);
    let rank = s.iter().filter(|&&x| x > tol).count();
    Ok(SvdResult {
        u,
        singular_values: s,
        v,
        rank,
    })
}

/// Pseudoinverse and (optionally) kernel of one matrix, read off one SVD.
#[derive(Clone, Debug)]
pub(crate) struct Factored {
    /// Left singular vectors of the retained singular values.
    pub u: DenseMatrix,
    pub s: DVector<f64>,
    /// Right singular vectors of the retained singular values (row-space basis).
    pub v: DenseMatrix,
    pub kernel: Option<DenseMatrix>,
}

impl Factored {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `M^+ rhs`.
    pub fn solve(&self, rhs: &DenseMatrix) -> DenseMatrix {
        let mut t = self.u.transpose() * rhs;
        for (mut row, s) in t.row_iter_mut().zip(self.s.iter()) {
            row /= *s;
        }
        &self.v * t
    }

    pub fn pinv(&self) -> DenseMatrix {
        let mut vs = self.v.clone();
        for (mut col, s) in vs.column_iter_mut().zip(self.s.iter()) {
            col /= *s;
        }
        vs * self.u.transpose()
    }
}

/// Factor `m` with rank decided against `max(s_max, scale)`, never below
/// `RANK_FLOOR * scale`. `logical` overrides
/// the shape used in the tolerance, for matrices that stand in for a product of
/// a different shape.
pub(crate) fn factor(
    m: &DenseMatrix,
    scale: f64,
    logical: Option<(usize, usize)>,
    want_kernel: bool,
) -> Result<Factored> {
    let (rows, cols) = m.shape();
    let (lr, lc) = logical.unwrap_or((rows, cols));
    factor_with(m, want_kernel, |s_max| {
        let reference = s_max.max(scale);
        (
            rank_tolerance(lr, lc, reference).max(RANK_FLOOR * scale),
            reference,
        )
    })
}

/// Factor `m`, a product of orthonormal bases or similar matrix of unit
/// scale, treating singular values at or below `tolerance` as zero.
pub(crate) fn factor_at(m: &DenseMatrix, tolerance: f64, want_kernel: bool) -> Result<Factored> {
    factor_with(m, want_kernel, |s_max| (tolerance, s_max.max(1.0)))
}

/// `rule(s_max)` gives the rank tolerance and the scale the rank was
/// decided against.
fn factor_with(
    m: &DenseMatrix,
    want_kernel: bool,
    rule: impl FnOnce(f64) -> (f64, f64),
) -> Result<Factored> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    let (u, s, v) = if want_kernel {
        full_svd(m)?
    } else {
        raw_svd(m)?
    };
    let (tol, reference) = rule(s.get(0).copied().unwrap_or(0.0));
    let rank = s.iter().take_while(|&&x| x > tol).count();
    let kernel = want_kernel.then(|| v.columns(rank, cols - rank).into_owned());
    let f = Factored {
        u: u.view((0, 0), (rows, rank)).into_owned(),
        s: s.rows(0, rank).into_owned(),
        v: v.columns(0, rank).into_owned(),
        kernel,
    };
    audit_record(m, &f, reference);
    Ok(f)
}

/// Orthonormal basis of the column span of `m`, rank decided against `scale`.
pub(crate) fn orthonormal_span(m: &DenseMatrix, scale: f64) -> Result<DenseMatrix> {
    if m.ncols() == 0 {
        return Ok(DMatrix::zeros(m.nrows(), 0));
    }
    let (u, s, _) = raw_svd(m)?;
    let s_max = s.get(0).copied().unwrap_or(0.0);
    let tol = rank_tolerance(m.nrows(), m.ncols(), s_max.max(scale));
    let rank = s.iter().take_while(|&&x| x > tol).count();
    Ok(u.columns(0, rank).into_owned())
}

/// Orthonormal basis of the orthogonal complement of the span of the
/// orthonormal columns `q`.
pub(crate) fn orthogonal_complement(q: &DenseMatrix) -> Result<DenseMatrix> {
    let (n, r) = q.shape();
    if r == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    if r >= n {
        return Ok(DMatrix::zeros(n, 0));
    }
    let (u, s, _) = full_svd(q)?;
    let rank = s.iter().filter(|&&x| x > 0.5).count();
    Ok(u.columns(rank, n - rank).into_owned())
}

pub fn pseudoinverse(m: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(factor(m, 0.0, None, false)?.pinv())
}

/// Pseudoinverse of a matrix whose true singular values are either zero or
/// comparable to `scale`, such as a product with a projector.
pub fn pseudoinverse_scaled(m: &DenseMatrix, scale: f64) -> Result<DenseMatrix> {
    Ok(factor(m, scale, None, false)?.pinv())
}

/// Orthonormal basis of the null space of `m`.
pub fn kernel_basis(m: &DenseMatrix) -> Result<SubspaceBasis> {
    let f = factor(m, 0.0, None, true)?;
    Ok(SubspaceBasis {
        basis: f.kernel.expect("kernel requested"),
    })
}

/// Linear subspace carried as a matrix with orthonormal columns. Zero columns
/// encode the zero subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBasis {
    basis: DenseMatrix,
}

impl SubspaceBasis {
    /// Wrap a matrix whose columns are already orthonormal (checked to 1e-10).
    pub fn from_orthonormal(basis: DenseMatrix) -> Result<Self> {
        ensure_finite(&basis)?;
        let gram = basis.transpose() * &basis;
        let k = basis.ncols();
        let defect = (gram - DMatrix::<f64>::identity(k, k)).amax();
        if defect > 1e-10 {
            return Err(Error::ContractViolation(format!(
                "basis columns are not orthonormal (defect {defect:e})"
            )));
        }
        Ok(Self { basis })
    }

    /// Subspace spanned by arbitrary columns.
    pub fn span_of(columns: &DenseMatrix) -> Result<Self> {
        ensure_finite(columns)?;
        Ok(Self {
            basis: orthonormal_span(columns, 0.0)?,
        })
    }

    pub(crate) fn from_trusted(basis: DenseMatrix) -> Self {
        Self { basis }
    }

    pub fn zero(ambient_dim: usize) -> Self {
        Self {
            basis: DMatrix::zeros(ambient_dim, 0),
        }
    }

    pub fn full(ambient_dim: usize) -> Self {
        Self {
            basis: DMatrix::identity(ambient_dim, ambient_dim),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn is_zero(&self) -> bool {
        self.dim() == 0
    }

    pub fn basis(&self) -> &DenseMatrix {
        &self.basis
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.basis
    }

    pub fn project(&self, x: &DenseMatrix) -> DenseMatrix {
        &self.basis * (self.basis.transpose() * x)
    }

    /// Sine of the largest principal angle between `other` and this subspace,
    /// i.e. how far the columns of `other` stick out of `self`.
    pub fn max_angle_sine(&self, other: &SubspaceBasis) -> f64 {
        if other.is_zero() {
            return 0.0;
        }
        let residual = other.basis() - self.project(other.basis());
        match raw_svd(&residual) {
            Ok((_, s, _)) => s.get(0).copied().unwrap_or(0.0),
            Err(_) => f64::INFINITY,
        }
    }

    pub fn contains_subspace(&self, other: &SubspaceBasis, tol: f64) -> bool {
        self.ambient_dim() == other.ambient_dim() && self.max_angle_sine(other) <= tol
    }

    /// Basis-independent equality: equal dimension and all principal angles
    /// within `tol`.
    pub fn same_subspace(&self, other: &SubspaceBasis, tol: f64) -> bool {
        self.ambient_dim() == other.ambient_dim()
            && self.dim() == other.dim()
            && self.max_angle_sine(other) <= tol
            && other.max_angle_sine(self) <= tol
    }

    /// Distance of `v` from the subspace, relative to `max(1, |v|)`.
    pub fn relative_distance(&self, v: &DVector<f64>) -> f64 {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let off = (&m - self.project(&m)).norm();
        off / v.norm().max(1.0)
    }
}

/// Orthonormal basis of `Im(a) ∩ Im(b)`, read off the kernel of `[-a  b]`.
pub fn subspace_intersection(a: &SubspaceBasis, b: &SubspaceBasis) -> Result<SubspaceBasis> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::DimensionMismatch(format!(
            "intersection of subspaces in ambient dimensions {} and {}",
            a.ambient_dim(),
            b.ambient_dim()
        )));
    }
    let n = a.ambient_dim();
    let (ka, kb) = (a.dim(), b.dim());
    if ka == 0 || kb == 0 {
        return Ok(SubspaceBasis::zero(n));
    }
    let mut stacked = DMatrix::zeros(n, ka + kb);
    stacked.columns_mut(0, ka).copy_from(&(-a.basis()));
    stacked.columns_mut(ka, kb).copy_from(b.basis());
    let f = factor(&stacked, 1.0, None, true)?;
    let kernel = f.kernel.expect("kernel requested");
    let mapped = a.basis() * kernel.rows(0, ka);
    Ok(SubspaceBasis {
        basis: orthonormal_span(&mapped, 0.5)?,
    })
}

/// Full-row-rank factor `B` with `B B^T = sigma`, built from the eigenvectors
/// and square-rooted eigenvalues of `sigma`.
pub fn noise_factor(sigma: &DenseMatrix) -> Result<DenseMatrix> {
    ensure_finite(sigma)?;
    if !sigma.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "covariance must be square, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let asym = (sigma - sigma.transpose()).amax();
    if asym > 1e-10 {
        return Err(Error::ContractViolation(format!(
            "covariance is not symmetric (asymmetry {asym:e})"
        )));
    }
    let p = sigma.nrows();
    if p == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let lambda_min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if lambda_min <= rank_tolerance(p, p, lambda_max) || lambda_max <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: lambda_min,
        });
    }
    let mut b = eig.eigenvectors;
    for (mut col, lambda) in b.column_iter_mut().zip(eig.eigenvalues.iter()) {
        col *= lambda.sqrt();
    }
    Ok(b)
}

/// Checks `Ker((H^+)^T) = Ker(H)` as subspaces.
pub fn pinv_kernel_check(h: &DenseMatrix) -> Result<bool> {
    let pinv = pseudoinverse(h)?;
    let left = kernel_basis(&pinv.transpose())?;
    let right = kernel_basis(h)?;
    Ok(left.same_subspace(&right, SUBSPACE_TOLERANCE))
}

/// Induced matrix norms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MatrixNorm {
    One,
    Two,
    #[default]
    Infinity,
}

pub fn induced_norm(m: &DenseMatrix, norm: MatrixNorm) -> Result<f64> {
    ensure_finite(m)?;
    Ok(match norm {
        MatrixNorm::One => m
            .column_iter()
            .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        MatrixNorm::Infinity => m
            .row_iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        MatrixNorm::Two => svd(m)?.largest_singular_value(),
    })
}

pub fn spectral_norm(m: &DenseMatrix) -> Result<f64> {
    induced_norm(m, MatrixNorm::Two)
}

/// Deviations of a candidate pseudoinverse from the four Moore–Penrose
/// identities, each relative to the natural scale of the identity.
#[derive(Clone, Copy, Debug)]
pub struct MoorePenroseDefect {
    /// `|M M^+ M - M|_max / s_max(M)`
    pub reconstruction: f64,
    /// `|M^+ M M^+ - M^+|_max / s_max(M^+)`
    pub pinv_reconstruction: f64,
    /// `|M M^+ - (M M^+)^T|_max`
    pub left_symmetry: f64,
    /// `|M^+ M - (M^+ M)^T|_max`
    pub right_symmetry: f64,
}

impl MoorePenroseDefect {
    pub fn max(&self) -> f64 {
        self.reconstruction
            .max(self.pinv_reconstruction)
            .max(self.left_symmetry)
            .max(self.right_symmetry)
    }
}

pub fn moore_penrose_defect(m: &DenseMatrix, pinv: &DenseMatrix) -> Result<MoorePenroseDefect> {
    moore_penrose_defect_at(m, pinv, 0.0)
}

/// As [`moore_penrose_defect`], with the reconstruction measured against
/// `max(s_max(M), scale)`. A matrix that is round-off at `scale` has the
/// zero pseudoinverse, and its defect stays at round-off level.
pub fn moore_penrose_defect_at(
    m: &DenseMatrix,
    pinv: &DenseMatrix,
    scale: f64,
) -> Result<MoorePenroseDefect> {
    let s_m = spectral_norm(m)?.max(scale).max(f64::MIN_POSITIVE);
    let s_p = spectral_norm(pinv)?.max(f64::MIN_POSITIVE);
    let mp = m * pinv;
    let pm = pinv * m;
    Ok(MoorePenroseDefect {
        reconstruction: (&mp * m - m).amax() / s_m,
        pinv_reconstruction: (&pm * pinv - pinv).amax() / s_p,
        left_symmetry: (&mp - mp.transpose()).amax(),
        right_symmetry: (&pm - pm.transpose()).amax(),
    })
}

/// A matrix handed to the pseudoinverse kernel, with the pseudoinverse it got.
#[derive(Clone, Debug)]
pub struct PinvSample {
    pub matrix: DenseMatrix,
    pub pinv: DenseMatrix,
    /// Scale the numerical rank was decided against.
    pub scale: f64,
}

impl PinvSample {
    pub fn defect(&self) -> Result<MoorePenroseDefect> {
        moore_penrose_defect_at(&self.matrix, &self.pinv, self.scale)
    }
}

struct AuditLog {
    capacity: usize,
    stride: usize,
    seen: usize,
    samples: Vec<PinvSample>,
}

thread_local! {
    static AUDIT: RefCell<Option<AuditLog>> = const { RefCell::new(None) };
}

fn audit_record(m: &DenseMatrix, f: &Factored, scale: f64) {
    AUDIT.with(|cell| {
        if let Some(log) = cell.borrow_mut().as_mut() {
            if log.seen % log.stride == 0 && log.samples.len() < log.capacity {
                log.samples.push(PinvSample {
                    matrix: m.clone(),
                    pinv: f.pinv(),
                    scale,
                });
            }
            log.seen += 1;
        }
    });
}

/// Runs `f` while sampling every `stride`-th matrix factored for a
/// pseudoinverse on this thread (at most `capacity` samples).
pub fn audit_pseudoinverses<R>(
    capacity: usize,
    stride: usize,
    f: impl FnOnce() -> R,
) -> (R, Vec<PinvSample>) {
    let previous = AUDIT.with(|cell| {
        cell.borrow_mut().replace(AuditLog {
            capacity,
            stride: stride.max(1),
            seen: 0,
            samples: Vec::new(),
        })
    });
    let out = f();
    let log = AUDIT.with(|cell| std::mem::replace(&mut *cell.borrow_mut(), previous));
    (out, log.map(|l| l.samples).unwrap_or_default())
}
