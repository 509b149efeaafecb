//! Kernel bases as carried by the estimators.
//!
//! A kernel that is still large is cheaper to hold through an orthonormal
//! basis of its orthogonal complement, so a [`Subspace`] stores whichever of
//! the two is smaller once it has been compacted.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::linalg::{orthogonal_complement, DenseMatrix, SubspaceBasis};

#[derive(Clone, Debug)]
pub(crate) enum Repr {
    /// Orthonormal basis of the subspace itself.
    Explicit(DenseMatrix),
    /// Orthonormal basis of the orthogonal complement.
    Complement(DenseMatrix),
}

/// A linear subspace of `R^N` in either explicit or complement form.
#[derive(Clone, Debug)]
pub struct Subspace {
    pub(crate) repr: Repr,
}

/// How a kernel basis is put on the wire.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BasisTransmission {
    /// Always send an explicit basis of the kernel.
    #[default]
    Full,
    /// Send the smaller of the kernel basis and its complement, plus a tag.
    Smaller,
}

impl Subspace {
    pub fn full(ambient_dim: usize) -> Self {
        Self {
            repr: Repr::Complement(DMatrix::zeros(ambient_dim, 0)),
        }
    }

    pub fn zero(ambient_dim: usize) -> Self {
        Self {
            repr: Repr::Explicit(DMatrix::zeros(ambient_dim, 0)),
        }
    }

    pub fn from_basis(basis: SubspaceBasis) -> Self {
        Self {
            repr: Repr::Explicit(basis.into_matrix()),
        }
    }

    pub(crate) fn explicit(basis: DenseMatrix) -> Self {
        Self {
            repr: Repr::Explicit(basis),
        }
    }

    pub(crate) fn complement(basis: DenseMatrix) -> Self {
        Self {
            repr: Repr::Complement(basis),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match &self.repr {
            Repr::Explicit(k) => k.nrows(),
            Repr::Complement(r) => r.nrows(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Repr::Explicit(k) => k.ncols(),
            Repr::Complement(r) => r.nrows() - r.ncols(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.dim() == 0
    }

    pub fn is_complement_form(&self) -> bool {
        matches!(self.repr, Repr::Complement(_))
    }

    /// Orthonormal basis of the subspace.
    pub fn to_basis(&self) -> Result<SubspaceBasis> {
        Ok(SubspaceBasis::from_trusted(self.explicit_matrix()?))
    }

    /// Orthonormal basis of the orthogonal complement.
    pub fn complement_basis(&self) -> Result<SubspaceBasis> {
        Ok(SubspaceBasis::from_trusted(match &self.repr {
            Repr::Explicit(k) => orthogonal_complement(k)?,
            Repr::Complement(r) => r.clone(),
        }))
    }

    pub(crate) fn explicit_matrix(&self) -> Result<DenseMatrix> {
        match &self.repr {
            Repr::Explicit(k) => Ok(k.clone()),
            Repr::Complement(r) => orthogonal_complement(r),
        }
    }

    /// Orthogonal projection of the columns of `x` onto the subspace.
    pub fn project(&self, x: &DenseMatrix) -> DenseMatrix {
        match &self.repr {
            Repr::Explicit(k) => k * (k.transpose() * x),
            Repr::Complement(r) => x - r * (r.transpose() * x),
        }
    }

    /// Switch to the explicit form once the kernel is the smaller side.
    pub fn compact(&mut self) -> Result<()> {
        if let Repr::Complement(r) = &self.repr {
            if 2 * r.ncols() > r.nrows() {
                self.repr = Repr::Explicit(orthogonal_complement(r)?);
            }
        }
        Ok(())
    }

    pub fn into_explicit(self) -> Result<Self> {
        match self.repr {
            Repr::Explicit(_) => Ok(self),
            Repr::Complement(r) => Ok(Self::explicit(orthogonal_complement(&r)?)),
        }
    }

    /// Real numbers (plus a one-word type tag when applicable) needed to send
    /// this subspace.
    pub fn wire_words(&self, mode: BasisTransmission) -> usize {
        let n = self.ambient_dim();
        let k = self.dim();
        match mode {
            BasisTransmission::Full => n * k,
            BasisTransmission::Smaller => n * k.min(n - k) + 1,
        }
    }

    pub fn same_subspace(&self, other: &Subspace, tol: f64) -> Result<bool> {
        Ok(self.to_basis()?.same_subspace(&other.to_basis()?, tol))
    }

    pub fn contains(&self, other: &Subspace, tol: f64) -> Result<bool> {
        Ok(self.to_basis()?.contains_subspace(&other.to_basis()?, tol))
    }
}
