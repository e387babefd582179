//! Pooled prompt embeddings, the labelled sets that hold them, and the
//! similarity measures the bias gate is built on.
//!
//! Vectors are stored in 64-bit precision. The on-disk `EMBD` format keeps
//! 32-bit floats, so values loaded from disk are exactly representable and
//! survive a save/load cycle bit for bit.

mod format;
mod similarity;

use std::collections::HashSet;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{
    decode_embedding_set, encode_embedding_set, load_embedding_set, load_sidecar, save_embedding_set, ExportSidecar,
    EMBD_MAGIC, EMBD_VERSION,
};
pub use similarity::{pearson_similarity, similarity, SimilarityKind};

/// A single pooled embedding. At least two coordinates, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "embedding needs at least 2 coordinates, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite embedding coordinate at {i}")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn to_dvector(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_column_slice(&self.0)
    }

    pub(crate) fn from_dvector(v: &nalgebra::DVector<f64>) -> Result<Self> {
        Self::new(v.iter().copied().collect())
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// An ordered, uniquely labelled collection of embeddings sharing one width.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    entries: Vec<(String, EmbeddingVector)>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!("embedding dim must be >= 2, got {dim}")));
        }
        Ok(Self {
            dim,
            entries: Vec::new(),
        })
    }

    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Result<Self> {
        let mut set = Self::new(dim)?;
        for (label, v) in entries {
            set.push(label, v)?;
        }
        Ok(set)
    }

    /// Appends an entry. Labels must be unique and free of newlines.
    pub fn push(&mut self, label: impl Into<String>, vector: EmbeddingVector) -> Result<()> {
        let label = label.into();
        if vector.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.dim(),
            });
        }
        if label.contains('\n') {
            return Err(Error::invalid(format!("label {label:?} contains a newline")));
        }
        if self.entries.iter().any(|(l, _)| *l == label) {
            return Err(Error::invalid(format!("duplicate label {label:?}")));
        }
        self.entries.push((label, vector));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, EmbeddingVector)] {
        &self.entries
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(l, _)| l.as_str())
    }

    pub fn vectors(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn get(&self, label: &str) -> Option<&EmbeddingVector> {
        self.entries.iter().find(|(l, _)| l == label).map(|(_, v)| v)
    }

    /// Rounds every coordinate to the nearest `f32`, the precision the file
    /// format stores.
    pub fn quantized(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(l, v)| {
                let q = v.iter().map(|&x| f64::from(x as f32)).collect();
                (l.clone(), EmbeddingVector(q))
            })
            .collect();
        Self { dim: self.dim, entries }
    }
}

/// The protected attribute values a fairness or gate computation ranges over,
/// e.g. `["male", "female"]` or `["light", "dark"]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct AttributeSet(Vec<String>);

impl AttributeSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::invalid("attribute set needs at least two names"));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate attribute {n:?}")));
            }
        }
        Ok(Self(names))
    }

    pub fn gender() -> Self {
        Self(vec!["male".into(), "female".into()])
    }

    pub fn skin_tone() -> Self {
        Self(vec!["light".into(), "dark".into()])
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}

impl TryFrom<Vec<String>> for AttributeSet {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AttributeSet> for Vec<String> {
    fn from(a: AttributeSet) -> Self {
        a.0
    }
}

impl fmt::Display for AttributeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(","))
    }
}
