//! Orthonormal subspaces and the projections built on them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default relative cutoff for treating a singular value as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Default absolute residual below which a vector adds nothing to a span.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-10;

/// Which side of a matrix a projection acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `B Bᵀ m`: project every column onto the subspace.
    ColumnsOnto,
    /// `m - B Bᵀ m`.
    ColumnsComplement,
    /// `m B Bᵀ`: project every row onto the subspace.
    RowsOnto,
    /// `m - m B Bᵀ`.
    RowsComplement,
}

/// A subspace of `R^ambient_dim` stored as an orthonormal basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subspace {
    ambient_dim: usize,
    basis: Vec<DVector<f64>>,
}

impl Subspace {
    pub fn empty(ambient_dim: usize) -> Self {
        Self {
            ambient_dim,
            basis: Vec::new(),
        }
    }

    /// Wraps vectors that are already orthonormal. Fails if any vector has the
    /// wrong length or the set is not orthonormal to within 1e-10.
    pub fn from_orthonormal(ambient_dim: usize, basis: Vec<DVector<f64>>) -> Result<Self> {
        if basis.len() > ambient_dim {
            return Err(Error::InvalidParameter(format!(
                "{} basis vectors in a {}-dimensional space",
                basis.len(),
                ambient_dim
            )));
        }
        for (i, b) in basis.iter().enumerate() {
            check_len(ambient_dim, b.len())?;
            if (b.norm() - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidParameter(format!(
                    "basis vector {i} has norm {}",
                    b.norm()
                )));
            }
            for c in &basis[..i] {
                if b.dot(c).abs() > 1e-10 {
                    return Err(Error::InvalidParameter(
                        "basis vectors are not orthogonal".into(),
                    ));
                }
            }
        }
        Ok(Self { ambient_dim, basis })
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn basis(&self) -> &[DVector<f64>] {
        &self.basis
    }

    /// Basis stacked as the columns of an `ambient_dim x dim` matrix.
    pub fn basis_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.ambient_dim, self.basis.len(), |i, j| self.basis[j][i])
    }

    /// Component of `v` orthogonal to the subspace, with one
    /// re-orthogonalization pass.
    fn orthogonal_residual(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut r = v.clone();
        for _ in 0..2 {
            for b in &self.basis {
                let c = b.dot(&r);
                r.axpy(-c, b, 1.0);
            }
        }
        r
    }

    /// Adds `v` to the span. Returns `true` if the dimension grew, `false` if
    /// the residual of `v` had norm at most `tol`.
    pub fn extend(&mut self, v: &DVector<f64>, tol: f64) -> Result<bool> {
        check_len(self.ambient_dim, v.len())?;
        if self.basis.len() == self.ambient_dim {
            return Ok(false);
        }
        let r = self.orthogonal_residual(v);
        let n = r.norm();
        if n <= tol {
            return Ok(false);
        }
        self.basis.push(r / n);
        Ok(true)
    }

    /// `P v`.
    pub fn project_onto(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for b in &self.basis {
            out.axpy(b.dot(v), b, 1.0);
        }
        out
    }

    /// `(I - P) v`, computed in a single pass.
    pub fn project_complement(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for b in &self.basis {
            out.axpy(-b.dot(v), b, 1.0);
        }
        out
    }

    /// Norm of the component of `v` outside the subspace.
    pub fn residual_norm(&self, v: &DVector<f64>) -> f64 {
        self.project_complement(v).norm()
    }

    /// Vector form of [`Subspace::project`]; `side` must be a columns variant
    /// (rows of a column vector are scalars, so the row variants reject it).
    pub fn project_vector(&self, v: &DVector<f64>, side: Side) -> Result<DVector<f64>> {
        check_len(self.ambient_dim, v.len())?;
        match side {
            Side::ColumnsOnto => Ok(self.project_onto(v)),
            Side::ColumnsComplement => Ok(self.project_complement(v)),
            Side::RowsOnto | Side::RowsComplement => Err(Error::InvalidParameter(
                "row projections need a matrix argument".into(),
            )),
        }
    }

    /// Projects the columns or rows of `m`.
    pub fn project(&self, m: &DMatrix<f64>, side: Side) -> Result<DMatrix<f64>> {
        match side {
            Side::ColumnsOnto | Side::ColumnsComplement => {
                check_len(self.ambient_dim, m.nrows())?;
                let mut onto = DMatrix::zeros(m.nrows(), m.ncols());
                for b in &self.basis {
                    // b (bᵀ m)
                    let coeffs = m.tr_mul(b);
                    onto.ger(1.0, b, &coeffs, 1.0);
                }
                Ok(if side == Side::ColumnsOnto {
                    onto
                } else {
                    m - onto
                })
            }
            Side::RowsOnto | Side::RowsComplement => {
                check_len(self.ambient_dim, m.ncols())?;
                let mut onto = DMatrix::zeros(m.nrows(), m.ncols());
                for b in &self.basis {
                    // (m b) bᵀ
                    let coeffs = m * b;
                    onto.ger(1.0, &coeffs, b, 1.0);
                }
                Ok(if side == Side::RowsOnto { onto } else { m - onto })
            }
        }
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// Orthonormal basis of `span(vectors)` by Gram–Schmidt with
/// re-orthogonalization. Vectors whose residual against the partial basis is
/// at most `tol` are dropped.
pub fn orthonormal_basis(
    ambient_dim: usize,
    vectors: &[DVector<f64>],
    tol: f64,
) -> Result<Subspace> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let mut s = Subspace::empty(ambient_dim);
    for v in vectors {
        s.extend(v, tol)?;
    }
    Ok(s)
}

/// Smallest and largest singular values of `m` that exceed
/// `rank_tol * sigma_max`.
pub fn nonzero_singular_bounds(m: &DMatrix<f64>, rank_tol: f64) -> Result<(f64, f64)> {
    if !(rank_tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rank_tol must be positive, got {rank_tol}"
        )));
    }
    if m.is_empty() {
        return Err(Error::NoNonzeroSingularValues);
    }
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if !(max > 0.0) {
        return Err(Error::NoNonzeroSingularValues);
    }
    let cutoff = rank_tol * max;
    let min = sv
        .iter()
        .cloned()
        .filter(|&s| s > cutoff)
        .fold(f64::INFINITY, f64::min);
    Ok((min, max))
}

/// Largest singular value, via the eigenvalues of the smaller Gram matrix.
/// Returns 0 for an empty or all-zero matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = if m.nrows() >= m.ncols() {
        m.tr_mul(m)
    } else {
        m * m.transpose()
    };
    let top = gram
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    top.max(0.0).sqrt()
}
