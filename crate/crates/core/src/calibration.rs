//! Closed-form calibrated projection.
//!
//! Given prompt pairs `(z_i, z_j)` that name the same class with different
//! spurious attributes, the projection that stays closest to the identity
//! while collapsing every pair difference is
//!
//! ```text
//! C = (I + λ/|S| · Σ (z_i − z_j)(z_i − z_j)ᵀ)⁻¹
//! ```
//!
//! Embeddings arrive already encoded, so the pre-trained projection is the
//! identity on embedding space and the calibrated embedding of `z` is `C·z`.
//! `C` is obtained by a Cholesky factorization of the regularized Gram matrix
//! and one triangular solve per column; it is never formed by explicit
//! inversion.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::codec::{self, Reader};
use crate::embedding::{EmbeddingSet, EmbeddingVector};
use crate::error::{Error, FormatError, Result};

pub const CMAT_MAGIC: [u8; 4] = *b"CMAT";
pub const CMAT_VERSION: u32 = 1;

/// Positive prompt pairs sharing one embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPairSet {
    dim: usize,
    pairs: Vec<(EmbeddingVector, EmbeddingVector)>,
}

impl PromptPairSet {
    pub fn new(pairs: Vec<(EmbeddingVector, EmbeddingVector)>) -> Result<Self> {
        let dim = pairs
            .first()
            .map(|(a, _)| a.dim())
            .ok_or_else(|| Error::invalid("prompt pair set is empty"))?;
        for (a, b) in &pairs {
            for v in [a, b] {
                if v.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: v.dim(),
                    });
                }
            }
        }
        Ok(Self { dim, pairs })
    }

    /// Reads consecutive rows of an embedding set as `(first, second)` pairs.
    pub fn from_embedding_set(set: &EmbeddingSet) -> Result<Self> {
        if !set.len().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "pair file must hold an even number of rows, got {}",
                set.len()
            )));
        }
        let pairs = set
            .entries()
            .chunks_exact(2)
            .map(|c| (c[0].1.clone(), c[1].1.clone()))
            .collect();
        Self::new(pairs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(EmbeddingVector, EmbeddingVector)] {
        &self.pairs
    }

    pub fn differences(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.pairs
            .iter()
            .map(|(a, b)| DVector::from_iterator(self.dim, a.iter().zip(b.iter()).map(|(x, y)| x - y)))
    }

    /// `I + λ/|S| · Σ d dᵀ`.
    pub fn regularized_gram(&self, lambda: f64) -> DMatrix<f64> {
        let mut gram = DMatrix::<f64>::zeros(self.dim, self.dim);
        for d in self.differences() {
            gram.ger(1.0, &d, &d, 1.0);
        }
        let mut m = gram * (lambda / self.len() as f64);
        for i in 0..self.dim {
            m[(i, i)] += 1.0;
        }
        m
    }
}

/// A symmetric positive definite `d×d` projection with eigenvalues in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMatrix {
    lambda: f64,
    m: DMatrix<f64>,
}

impl CalibrationMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            lambda: 0.0,
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// `C·z`.
    pub fn project(&self, z: &EmbeddingVector) -> Result<EmbeddingVector> {
        if z.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: z.dim(),
            });
        }
        EmbeddingVector::from_dvector(&(&self.m * z.to_dvector()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(20 + 8 * d * d);
        out.extend_from_slice(&CMAT_MAGIC);
        codec::put_u32(&mut out, CMAT_VERSION);
        codec::put_u32(&mut out, codec::len_u32(d, "dim")?);
        codec::put_f64(&mut out, self.lambda);
        for i in 0..d {
            for j in 0..d {
                codec::put_f64(&mut out, self.m[(i, j)]);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(&CMAT_MAGIC)?;
        r.version(CMAT_VERSION)?;
        let d = r.u32()? as usize;
        if d < 2 {
            return Err(FormatError::InvalidHeader(format!("dim must be >= 2, got {d}")));
        }
        let lambda = r.f64()?;
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(FormatError::InvalidHeader(format!("invalid lambda {lambda}")));
        }
        let n = d
            .checked_mul(d)
            .ok_or_else(|| FormatError::InvalidHeader("dim overflows".into()))?;
        let values = r.f64_block(n)?;
        r.finish()?;
        Ok(Self {
            lambda,
            m: DMatrix::from_row_slice(d, d, &values),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = codec::read_file(path)?;
        codec::at_path(path, Self::from_bytes(&bytes))
    }
}

/// Builds `C = (I + λ/|S| Σ ddᵀ)⁻¹` for the given pairs.
pub fn build_calibration(pairs: &PromptPairSet, lambda: f64) -> Result<CalibrationMatrix> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let d = pairs.dim();
    if lambda == 0.0 {
        return Ok(CalibrationMatrix::identity(d));
    }
    let gram = pairs.regularized_gram(lambda);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Solver("regularized gram matrix is not positive definite".into()))?;
    let mut m = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut e = DVector::<f64>::zeros(d);
        e[j] = 1.0;
        chol.solve_mut(&mut e);
        m.set_column(j, &e);
    }
    // The exact inverse is symmetric; average away the rounding asymmetry.
    let m = (&m + m.transpose()) * 0.5;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("non-finite calibration entry".into()));
    }
    Ok(CalibrationMatrix { lambda, m })
}

/// Frobenius residual `‖A·C − I‖_F / √d` for the regularized gram `A`.
pub fn calibration_residual(pairs: &PromptPairSet, c: &CalibrationMatrix) -> f64 {
    let d = pairs.dim();
    let r = pairs.regularized_gram(c.lambda()) * c.matrix() - DMatrix::<f64>::identity(d, d);
    r.norm() / (d as f64).sqrt()
}
