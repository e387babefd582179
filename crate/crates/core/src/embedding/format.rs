//! The `EMBD` interchange format.
//!
//! ```text
//! offset  size   field
//! 0       4      ASCII "EMBD"
//! 4       4      u32 LE version (= 1)
//! 8       4      u32 LE count n
//! 12      4      u32 LE dim d
//! 16      4      u32 LE name-block length L
//! 20      L      UTF-8, exactly n newline-terminated labels
//! 20+L    4·n·d  f32 LE values, row-major (one vector after another)
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingSet, EmbeddingVector};
use crate::codec::{self, Reader};
use crate::error::{Error, FormatError, Result};

pub const EMBD_MAGIC: [u8; 4] = *b"EMBD";
pub const EMBD_VERSION: u32 = 1;

pub fn encode_embedding_set(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let mut names = String::new();
    for label in set.labels() {
        names.push_str(label);
        names.push('\n');
    }
    let mut out = Vec::with_capacity(20 + names.len() + 4 * set.len() * set.dim());
    out.extend_from_slice(&EMBD_MAGIC);
    codec::put_u32(&mut out, EMBD_VERSION);
    codec::put_u32(&mut out, codec::len_u32(set.len(), "count")?);
    codec::put_u32(&mut out, codec::len_u32(set.dim(), "dim")?);
    codec::put_u32(&mut out, codec::len_u32(names.len(), "name block")?);
    out.extend_from_slice(names.as_bytes());
    for v in set.vectors() {
        for &x in v.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embedding_set(bytes: &[u8]) -> std::result::Result<EmbeddingSet, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(&EMBD_MAGIC)?;
    r.version(EMBD_VERSION)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let name_len = r.u32()? as usize;
    if d < 2 {
        return Err(FormatError::InvalidHeader(format!("dim must be >= 2, got {d}")));
    }
    let block = std::str::from_utf8(r.take(name_len)?).map_err(|_| FormatError::InvalidUtf8)?;
    let labels: Vec<&str> = if block.is_empty() {
        Vec::new()
    } else {
        match block.strip_suffix('\n') {
            Some(body) => body.split('\n').collect(),
            // last label is not newline-terminated
            None => {
                return Err(FormatError::LabelCountMismatch {
                    expected: n,
                    found: block.split('\n').count().saturating_sub(1),
                })
            }
        }
    };
    if labels.len() != n {
        return Err(FormatError::LabelCountMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    let mut seen = HashSet::with_capacity(n);
    for l in &labels {
        if !seen.insert(*l) {
            return Err(FormatError::DuplicateLabel((*l).to_owned()));
        }
    }

    let count = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| FormatError::InvalidHeader("payload size overflows".into()))?;
    let payload = r.take(count)?;
    r.finish()?;

    let mut entries = Vec::with_capacity(n);
    for (row, label) in labels.into_iter().enumerate() {
        let mut values = Vec::with_capacity(d);
        for col in 0..d {
            let at = (row * d + col) * 4;
            let x = f32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes"));
            if !x.is_finite() {
                return Err(FormatError::NonFinite(row * d + col));
            }
            values.push(f64::from(x));
        }
        entries.push((label.to_owned(), EmbeddingVector(values)));
    }
    Ok(EmbeddingSet { dim: d, entries })
}

pub fn load_embedding_set(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = codec::read_file(path)?;
    codec::at_path(path, decode_embedding_set(&bytes))
}

pub fn save_embedding_set(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    codec::write_file(path.as_ref(), &encode_embedding_set(set)?)
}

/// Metadata the exporter writes beside each `EMBD` file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSidecar {
    pub encoder: String,
    pub pooling: String,
    pub template: String,
    pub created: String,
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<ExportSidecar> {
    let path = path.as_ref();
    let bytes = codec::read_file(path)?;
    serde_json::from_slice(&bytes).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(n: u32, d: u32, l: u32) -> Vec<u8> {
        let mut b = b"EMBD".to_vec();
        for x in [1, n, d, l] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b
    }

    #[test]
    fn single_zero_vector() {
        let mut bytes = header(1, 4, 5);
        bytes.extend_from_slice(b"zero\n");
        bytes.extend_from_slice(&[0u8; 16]);
        let set = decode_embedding_set(&bytes).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.entries()[0].0, "zero");
        assert_eq!(set.entries()[0].1.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn empty_set_is_header_only() {
        let set = EmbeddingSet::new(8).unwrap();
        let bytes = encode_embedding_set(&set).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(bytes, header(0, 8, 0));
        assert_eq!(decode_embedding_set(&bytes).unwrap(), set);
    }

    #[test]
    fn payload_size_for_two_vectors() {
        let set = EmbeddingSet::from_entries(
            3,
            [
                ("a".to_string(), EmbeddingVector::new(vec![1.0, 2.0, 3.0]).unwrap()),
                ("bb".to_string(), EmbeddingVector::new(vec![4.0, 5.0, 6.0]).unwrap()),
            ],
        )
        .unwrap();
        let bytes = encode_embedding_set(&set).unwrap();
        let name_block = "a\nbb\n".len();
        assert_eq!(bytes.len() - 20 - name_block, 24);
        assert_eq!(bytes, encode_embedding_set(&set).unwrap());
    }

    #[test]
    fn distinct_load_errors() {
        let mut bad = header(0, 8, 0);
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_embedding_set(&bad), Err(FormatError::BadMagic { .. })));

        let mut v2 = header(0, 8, 0);
        v2[4] = 2;
        assert!(matches!(
            decode_embedding_set(&v2),
            Err(FormatError::VersionMismatch { found: 2, .. })
        ));

        let mut short = header(1, 2, 2);
        short.extend_from_slice(b"a\n");
        short.extend_from_slice(&[0u8; 7]);
        assert!(matches!(
            decode_embedding_set(&short),
            Err(FormatError::Truncated { .. })
        ));

        let mut count = header(2, 2, 2);
        count.extend_from_slice(b"a\n");
        count.extend_from_slice(&[0u8; 16]);
        assert!(matches!(
            decode_embedding_set(&count),
            Err(FormatError::LabelCountMismatch { expected: 2, found: 1 })
        ));

        let mut nan = header(1, 2, 2);
        nan.extend_from_slice(b"a\n");
        nan.extend_from_slice(&0f32.to_le_bytes());
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_embedding_set(&nan), Err(FormatError::NonFinite(1))));

        let mut trailing = header(0, 2, 0);
        trailing.push(0);
        assert!(matches!(
            decode_embedding_set(&trailing),
            Err(FormatError::TrailingBytes(1))
        ));
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let entries = (0..7).map(|i| {
            let v: Vec<f64> = (0..16).map(|_| f64::from(rng.random::<f32>() - 0.5)).collect();
            (format!("row {i}"), EmbeddingVector::new(v).unwrap())
        });
        let set = EmbeddingSet::from_entries(16, entries).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.embd");
        let b = dir.path().join("b.embd");
        save_embedding_set(&set, &a).unwrap();
        let loaded = load_embedding_set(&a).unwrap();
        assert_eq!(loaded, set);
        save_embedding_set(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    proptest! {
        #[test]
        fn round_trip_any_set(
            dim in 2usize..12,
            rows in proptest::collection::vec(proptest::collection::vec(-1e6f32..1e6, 12), 0..10),
        ) {
            let entries = rows.iter().enumerate().map(|(i, r)| {
                let v = r[..dim].iter().map(|&x| f64::from(x)).collect();
                (format!("label-{i} ✓"), EmbeddingVector::new(v).unwrap())
            });
            let set = EmbeddingSet::from_entries(dim, entries).unwrap();
            let bytes = encode_embedding_set(&set).unwrap();
            let back = decode_embedding_set(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(encode_embedding_set(&back).unwrap(), bytes);
        }
    }
}
