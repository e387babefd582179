use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Similarity measures available to the gate. Every kind follows a
/// higher-is-closer convention: distances are returned negated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    Pearson,
    Cosine,
    NegEuclidean,
    NegManhattan,
    /// Generalized (weighted) Jaccard after shifting both vectors by their
    /// joint minimum. An approximation: Jaccard is a set measure and has no
    /// canonical real-valued form.
    Jaccard,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 5] = [
        SimilarityKind::Pearson,
        SimilarityKind::Cosine,
        SimilarityKind::NegEuclidean,
        SimilarityKind::NegManhattan,
        SimilarityKind::Jaccard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityKind::Pearson => "pearson",
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::NegEuclidean => "neg_euclidean",
            SimilarityKind::NegManhattan => "neg_manhattan",
            SimilarityKind::Jaccard => "jaccard",
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown similarity kind {s:?}")))
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("similarity needs vectors of length >= 2"));
    }
    Ok(())
}

/// Sample Pearson correlation of paired coordinates.
pub fn pearson_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateSimilarity("zero-variance input to pearson"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateSimilarity("zero vector in cosine"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn jaccard(a: &[f64], b: &[f64]) -> Result<f64> {
    let shift = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let (mut num, mut den) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x - shift, y - shift);
        num += x.min(y);
        den += x.max(y);
    }
    if den == 0.0 {
        return Err(Error::DegenerateSimilarity("all-equal vectors in jaccard"));
    }
    Ok(num / den)
}

pub fn similarity(kind: SimilarityKind, a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    match kind {
        SimilarityKind::Pearson => pearson_similarity(a, b),
        SimilarityKind::Cosine => cosine(a, b),
        SimilarityKind::NegEuclidean => Ok(-a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
        SimilarityKind::NegManhattan => Ok(-a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()),
        SimilarityKind::Jaccard => jaccard(a, b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // covariance / (σa σb) written out directly
    fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        let (ma, mb) = (mean(a), mean(b));
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n).sqrt();
        cov / (sa * sb)
    }

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson_similarity(&[1., 2., 3.], &[1., 2., 3.]).unwrap(), 1.0);
        assert_eq!(pearson_similarity(&[1., 2., 3.], &[-1., -2., -3.]).unwrap(), -1.0);
        let (a, b) = ([1., 2., 3., 4.], [2., 1., 4., 3.]);
        let expected = pearson_oracle(&a, &b);
        assert!((expected - 0.6).abs() < 1e-15);
        assert!((pearson_similarity(&a, &b).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn pearson_rejects_constant_input() {
        assert!(matches!(
            pearson_similarity(&[1., 1., 1.], &[1., 2., 3.]),
            Err(Error::DegenerateSimilarity(_))
        ));
    }

    #[test]
    fn distance_and_cosine_anchors() {
        assert_eq!(
            similarity(SimilarityKind::NegEuclidean, &[0., 0.], &[3., 4.]).unwrap(),
            -5.0
        );
        assert_eq!(
            similarity(SimilarityKind::NegManhattan, &[0., 0.], &[3., -4.]).unwrap(),
            -7.0
        );
        let a = [0.3, -1.2, 4.0];
        assert!((similarity(SimilarityKind::Cosine, &a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!(similarity(SimilarityKind::Cosine, &[0., 0.], &a[..2]).is_err());
    }

    #[test]
    fn jaccard_matches_min_max_oracle() {
        let a = [0.5, -1.0, 2.0, 0.0];
        let b = [1.5, 0.5, -0.5, 0.25];
        // joint minimum is -1.0
        let a2: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        let b2: Vec<f64> = b.iter().map(|x| x + 1.0).collect();
        let mins: f64 = a2.iter().zip(&b2).map(|(x, y)| x.min(*y)).sum();
        let maxs: f64 = a2.iter().zip(&b2).map(|(x, y)| x.max(*y)).sum();
        let got = similarity(SimilarityKind::Jaccard, &a, &b).unwrap();
        assert!((got - mins / maxs).abs() < 1e-15);
        assert_eq!(similarity(SimilarityKind::Jaccard, &a, &a).unwrap(), 1.0);
        assert!(similarity(SimilarityKind::Jaccard, &[2., 2.], &[2., 2.]).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SimilarityKind::ALL {
            assert_eq!(k.as_str().parse::<SimilarityKind>().unwrap(), k);
        }
        assert!("hamming".parse::<SimilarityKind>().is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..10).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn pearson_symmetric_and_affine_invariant(
            (a, b) in vec_strategy(),
            alpha in 0.1f64..20.0,
            beta in -50.0f64..50.0,
        ) {
            let Ok(ab) = pearson_similarity(&a, &b) else { return Ok(()); };
            let ba = pearson_similarity(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let t: Vec<f64> = a.iter().map(|x| alpha * x + beta).collect();
            let tb = pearson_similarity(&t, &b).unwrap();
            prop_assert!((ab - tb).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn distances_are_nonpositive((a, b) in vec_strategy()) {
            for kind in [SimilarityKind::NegEuclidean, SimilarityKind::NegManhattan] {
                let s = similarity(kind, &a, &b).unwrap();
                prop_assert!(s <= 0.0);
                prop_assert_eq!(s == 0.0, a == b);
                prop_assert_eq!(similarity(kind, &a, &a).unwrap(), 0.0);
            }
        }
    }
}
