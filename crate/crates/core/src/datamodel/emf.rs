//! The `EMF1` feature-matrix file format.
//!
//! ```text
//! 0..4    b"EMF1"
//! 4..8    rows  (u32, little endian)
//! 8..12   cols  (u32, little endian)
//! 12..    rows * cols f32 values, little endian, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"EMF1";
const HEADER_LEN: usize = 12;

/// Immutable `rows x cols` matrix of finite `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(Error::shape(
                "feature matrix",
                format!("{} values", rows * cols),
                values.len(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                path: "<memory>".into(),
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, values })
    }

    /// Rounds each entry to the nearest `f32`.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::new(
            m.rows(),
            m.cols(),
            m.as_slice().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// `path` only labels error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            let mut found = [0u8; 4];
            let n = bytes.len().min(4);
            found[..n].copy_from_slice(&bytes[..n]);
            if &found != MAGIC {
                return Err(Error::BadMagic {
                    path: path.into(),
                    found,
                });
            }
            return Err(Error::SizeMismatch {
                path: path.into(),
                rows: 0,
                cols: 0,
                expected: 0,
                actual: bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if &found != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                found,
            });
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let payload = &bytes[HEADER_LEN..];
        let expected = rows as usize * cols as usize * 4;
        if payload.len() != expected {
            return Err(Error::SizeMismatch {
                path: path.into(),
                rows,
                cols,
                expected,
                actual: payload.len(),
            });
        }
        let (rows, cols) = (rows as usize, cols as usize);
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        let mut values = Vec::with_capacity(rows * cols);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    path: path.into(),
                    row: i / cols,
                    col: i % cols,
                });
            }
            values.push(v);
        }
        Ok(Self { rows, cols, values })
    }
}

pub fn load_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes, path)
}

/// Atomic write: the file appears complete or not at all.
pub fn save_feature_matrix(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    crate::runner::io::write_atomic(path.as_ref(), &m.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emf");
        let m = FeatureMatrix::new(2, 3, vec![1.5, -0.0, 3.25e-8, f32::MAX, f32::MIN_POSITIVE, -7.0])
            .unwrap();
        save_feature_matrix(&path, &m).unwrap();
        let back = load_feature_matrix(&path).unwrap();
        assert_eq!(back.rows(), 2);
        assert_eq!(back.cols(), 3);
        let bits = |fm: &FeatureMatrix| fm.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
    }

    #[test]
    fn header_layout() {
        let m = FeatureMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = m.to_bytes();
        assert_eq!(&b[0..4], b"EMF1");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 20);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut b = FeatureMatrix::new(1, 1, vec![0.0]).unwrap().to_bytes();
        b[0..4].copy_from_slice(b"XXXX");
        let err = FeatureMatrix::from_bytes(&b, Path::new("x.emf")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found, .. } if &found == b"XXXX"));
    }

    #[test]
    fn short_payload_is_rejected() {
        let mut b = Vec::new();
        b.extend_from_slice(b"EMF1");
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        for i in 0..15 {
            b.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let err = FeatureMatrix::from_bytes(&b, Path::new("x.emf")).unwrap_err();
        assert!(matches!(
            err,
            Error::SizeMismatch { rows: 4, cols: 4, expected: 64, actual: 60, .. }
        ));
    }

    #[test]
    fn non_finite_reports_position() {
        let mut b = FeatureMatrix::new(2, 2, vec![0.0; 4]).unwrap().to_bytes();
        b[12 + 3 * 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = FeatureMatrix::from_bytes(&b, Path::new("x.emf")).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 1, .. }));
    }
}
