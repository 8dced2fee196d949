//! Square linear maps applied to the shared embedding space, and their PRISMP file format.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::archive::{f32le_bytes, f32le_values, read_entries, write_entries};
use crate::embedding::{l2_norm, EmbeddingSet};
use crate::error::{Error, Result};

pub const PRISMP_FORMAT: &str = "PRISMP";
pub const PRISMP_VERSION: u32 = 1;
const MANIFEST: &str = "projection.json";
const MATRIX: &str = "matrix.bin";

/// Below this norm a projected vector is considered collapsed.
pub const COLLAPSE_NORM: f64 = 1e-10;

/// A dense `d x d` map. Learned maps are not required to be idempotent.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix(pub(crate) DMatrix<f64>);

impl ProjectionMatrix {
    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::invalid(format!(
                "projection must be a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let p = Self(m);
        p.check_finite()?;
        Ok(p)
    }

    /// Row-major constructor.
    pub fn from_row_slice(dim: usize, values: &[f64]) -> Result<Self> {
        if values.len() != dim * dim {
            return Err(Error::invalid(format!(
                "expected {} matrix entries for dim {dim}, got {}",
                dim * dim,
                values.len()
            )));
        }
        Self::from_matrix(DMatrix::from_row_slice(dim, dim, values))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn check_finite(&self) -> Result<()> {
        let d = self.dim();
        for row in 0..d {
            for col in 0..d {
                if !self.0[(row, col)].is_finite() {
                    return Err(Error::NonFiniteMatrix { row, col });
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.0 * DVector::from_column_slice(v)).data.into()
    }

    /// Frobenius distance to another matrix of the same size.
    pub fn frobenius_distance(&self, other: &DMatrix<f64>) -> f64 {
        (&self.0 - other).norm()
    }
}

/// Maps every vector through `p`, optionally renormalising to unit length.
pub fn apply_projection(p: &ProjectionMatrix, set: &EmbeddingSet, renormalize: bool) -> Result<EmbeddingSet> {
    if p.dim() != set.dim() {
        return Err(Error::DimMismatch {
            expected: set.dim(),
            found: p.dim(),
        });
    }
    set.map_vectors(|rec| {
        let mut z = p.apply(&rec.vector);
        if renormalize {
            let norm = l2_norm(&z);
            if norm <= COLLAPSE_NORM {
                return Err(Error::Collapse(rec.id.clone()));
            }
            z.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(z)
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dim: usize,
    dtype: String,
}

pub fn save_projection(p: &ProjectionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        format: PRISMP_FORMAT.into(),
        version: PRISMP_VERSION,
        dim: p.dim(),
        dtype: "f32le".into(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|source| Error::Json {
        path: path.join(MANIFEST),
        source,
    })?;
    json.push(b'\n');
    let d = p.dim();
    let bytes = f32le_bytes((0..d).flat_map(|r| (0..d).map(move |c| p.0[(r, c)])));
    write_entries(path, &[(MANIFEST, &json), (MATRIX, &bytes)])
}

pub fn load_projection(path: impl AsRef<Path>) -> Result<ProjectionMatrix> {
    let path = path.as_ref();
    let mut entries = read_entries(path, &[MANIFEST, MATRIX])?;
    let bytes = entries.pop().unwrap_or_default();
    let json = entries.pop().unwrap_or_default();
    let malformed = |msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| malformed(e.to_string()))?;
    if manifest.format != PRISMP_FORMAT || manifest.version != PRISMP_VERSION || manifest.dtype != "f32le" {
        return Err(malformed(format!(
            "expected {PRISMP_FORMAT} v{PRISMP_VERSION} f32le, found {} v{} {}",
            manifest.format, manifest.version, manifest.dtype
        )));
    }
    if manifest.dim == 0 {
        return Err(malformed("dim must be positive".into()));
    }
    let expected = manifest.dim * manifest.dim * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            path: path.join(MATRIX),
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = f32le_values(&bytes).collect();
    ProjectionMatrix::from_row_slice(manifest.dim, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingRecord, SetKind};

    fn set_of(vectors: &[Vec<f64>]) -> EmbeddingSet {
        let records = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| EmbeddingRecord::new(format!("v{i}"), v.clone()).with_class(0))
            .collect();
        EmbeddingSet::new(
            SetKind::Image,
            vectors[0].len(),
            vec!["c".into()],
            vec![],
            records,
        )
        .unwrap()
    }

    fn kill_first(dim: usize) -> ProjectionMatrix {
        let mut m = DMatrix::identity(dim, dim);
        m[(0, 0)] = 0.0;
        ProjectionMatrix::from_matrix(m).unwrap()
    }

    #[test]
    fn identity_is_identity() {
        let s = 0.5f64.sqrt();
        let set = set_of(&[vec![s, s, 0.0], vec![0.0, 0.0, 1.0]]);
        let out = apply_projection(&ProjectionMatrix::identity(3), &set, true).unwrap();
        assert_eq!(out, set);
    }

    #[test]
    fn kill_coordinate_then_renormalize() {
        let s = 0.5f64.sqrt();
        let out = apply_projection(&kill_first(3), &set_of(&[vec![s, s, 0.0]]), true).unwrap();
        let v = &out.records()[0].vector;
        assert!(v[0].abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);
        assert_eq!(out.records()[0].class_label, Some(0));
    }

    #[test]
    fn collapse_is_an_error() {
        let err = apply_projection(&kill_first(3), &set_of(&[vec![1.0, 0.0, 0.0]]), true).unwrap_err();
        assert!(matches!(err, Error::Collapse(ref id) if id == "v0"));
        // without renormalisation the zero vector is a legal output
        assert!(apply_projection(&kill_first(3), &set_of(&[vec![1.0, 0.0, 0.0]]), false).is_ok());
    }

    #[test]
    fn dim_mismatch() {
        let err =
            apply_projection(&ProjectionMatrix::identity(4), &set_of(&[vec![1.0, 0.0]]), true).unwrap_err();
        assert!(matches!(
            err,
            Error::DimMismatch {
                expected: 2,
                found: 4
            }
        ));
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = DMatrix::identity(2, 2);
        m[(1, 0)] = f64::INFINITY;
        assert!(matches!(
            ProjectionMatrix::from_matrix(m),
            Err(Error::NonFiniteMatrix { row: 1, col: 0 })
        ));
    }

    #[test]
    fn prismp_round_trip_is_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.prismp");
        let p = ProjectionMatrix::from_row_slice(2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        save_projection(&p, &path).unwrap();
        let bytes = std::fs::read(path.join(MATRIX)).unwrap();
        assert_eq!(&bytes[4..8], &2.0f32.to_le_bytes());
        assert_eq!(load_projection(&path).unwrap(), p);

        std::fs::write(path.join(MATRIX), &bytes[..12]).unwrap();
        assert!(matches!(load_projection(&path), Err(Error::PayloadLength { .. })));
    }
}
