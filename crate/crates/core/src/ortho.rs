//! Closed-form debiasing projector: removes the span of spurious attribute embeddings.
//!
//! `P = I - A A^+`, the orthogonal projector onto the complement of `col(A)`. For
//! full-rank `A` this equals `I - A (A^T A)^{-1} A^T`; for rank-deficient `A`
//! (near-synonymous attribute texts) the Gram inverse does not exist, so the
//! basis of `col(A)` comes from a Householder QR with column-norm pivoting and
//! columns whose residual falls below `rank_tol * |R_00|` are dropped.

use nalgebra::{DMatrix, DVector};

use crate::embedding::{EmbeddingSet, SetKind, MIN_NORM};
use crate::error::{Error, Result};
use crate::projection::ProjectionMatrix;

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Attribute embeddings as the columns of a `dim x n` matrix, each scaled to unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMatrix {
    dim: usize,
    columns: Vec<DVector<f64>>,
}

impl AttributeMatrix {
    pub fn new(dim: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!(
                "attribute space needs dim >= 2, got {dim}"
            )));
        }
        if columns.is_empty() {
            return Err(Error::invalid("attribute matrix needs at least one column"));
        }
        if columns.len() >= dim {
            return Err(Error::invalid(format!(
                "{} attribute columns would annihilate a {dim}-dimensional space",
                columns.len()
            )));
        }
        let columns = columns
            .into_iter()
            .enumerate()
            .map(|(j, c)| {
                if c.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        found: c.len(),
                    });
                }
                if let Some(i) = c.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        id: format!("column {j}"),
                        index: i,
                    });
                }
                let v = DVector::from_vec(c);
                let norm = v.norm();
                if norm <= MIN_NORM {
                    return Err(Error::ZeroNorm(format!("column {j}")));
                }
                Ok(v / norm)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, columns })
    }

    pub fn from_embedding_set(set: &EmbeddingSet) -> Result<Self> {
        if set.kind() != SetKind::Attribute {
            return Err(Error::invalid(format!(
                "expected an attribute set, got {}",
                set.kind().as_str()
            )));
        }
        Self::new(
            set.dim(),
            set.records().iter().map(|r| r.vector.clone()).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.columns)
    }
}

/// Orthonormal basis of the column span, one basis vector per column of the result.
pub fn span_basis(attrs: &AttributeMatrix, rank_tol: f64) -> DMatrix<f64> {
    let d = attrs.dim;
    let n = attrs.columns.len();
    let mut a = attrs.to_matrix();
    // Householder vectors, each acting on rows k..d
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut leading = 0.0;

    for k in 0..n {
        let (pivot, pivot_norm) = (k..n)
            .map(|j| (j, a.column(j).rows(k, d - k).norm()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if k == 0 {
            leading = pivot_norm;
        }
        if pivot_norm <= rank_tol * leading {
            break;
        }
        a.swap_columns(k, pivot);

        let x = a.column(k).rows(k, d - k).clone_owned();
        let alpha = if x[0] >= 0.0 { -pivot_norm } else { pivot_norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.norm();
        v /= vnorm;
        for j in k..n {
            let mut col = a.column_mut(j);
            let mut col = col.rows_mut(k, d - k);
            let s = 2.0 * v.dot(&col);
            col.axpy(-s, &v, 1.0);
        }
        reflectors.push(v);
    }

    let rank = reflectors.len();
    // Q[:, :rank] = H_0 H_1 ... H_{rank-1} applied to the first `rank` unit vectors
    let mut q = DMatrix::<f64>::zeros(d, rank);
    for j in 0..rank {
        q[(j, j)] = 1.0;
    }
    for (k, v) in reflectors.iter().enumerate().rev() {
        for j in 0..rank {
            let mut col = q.column_mut(j);
            let mut col = col.rows_mut(k, d - k);
            let s = 2.0 * v.dot(&col);
            col.axpy(-s, v, 1.0);
        }
    }
    q
}

/// Projector onto the orthogonal complement of the attribute span.
pub fn orthogonal_projection(attrs: &AttributeMatrix, rank_tol: f64) -> Result<ProjectionMatrix> {
    if !(rank_tol.is_finite() && rank_tol >= 0.0) {
        return Err(Error::invalid(format!(
            "rank tolerance must be >= 0, got {rank_tol}"
        )));
    }
    let q = span_basis(attrs, rank_tol);
    let d = attrs.dim;
    let mut p = DMatrix::<f64>::identity(d, d);
    for i in 0..d {
        for j in i..d {
            let s: f64 = (0..q.ncols()).map(|k| q[(i, k)] * q[(j, k)]).sum();
            p[(i, j)] -= s;
            if i != j {
                p[(j, i)] = p[(i, j)];
            }
        }
    }
    ProjectionMatrix::from_matrix(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn assert_diag(p: &ProjectionMatrix, diag: &[f64]) {
        let expected = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
        assert!(p.frobenius_distance(&expected) < 1e-12, "{}", p.matrix());
    }

    #[test]
    fn single_axis() {
        let p = orthogonal_projection(&AttributeMatrix::new(4, vec![e(0, 4)]).unwrap(), DEFAULT_RANK_TOL)
            .unwrap();
        assert_diag(&p, &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn correlated_columns_span_a_plane() {
        let s = 0.5f64.sqrt();
        let attrs = AttributeMatrix::new(4, vec![e(0, 4), vec![s, s, 0.0, 0.0]]).unwrap();
        let p = orthogonal_projection(&attrs, DEFAULT_RANK_TOL).unwrap();
        assert_diag(&p, &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn duplicate_columns_drop_rank() {
        let v = vec![0.3, -0.2, 0.9, 0.1, 0.0];
        let attrs =
            AttributeMatrix::new(5, vec![v.clone(), v.clone(), v.iter().map(|x| 2.0 * x).collect()]).unwrap();
        assert_eq!(span_basis(&attrs, DEFAULT_RANK_TOL).ncols(), 1);
        let single =
            orthogonal_projection(&AttributeMatrix::new(5, vec![v]).unwrap(), DEFAULT_RANK_TOL).unwrap();
        let triple = orthogonal_projection(&attrs, DEFAULT_RANK_TOL).unwrap();
        assert!(single.frobenius_distance(triple.matrix()) < 1e-12);
    }

    #[test]
    fn input_errors() {
        assert!(AttributeMatrix::new(2, vec![e(0, 2), e(1, 2)]).is_err());
        assert!(matches!(
            AttributeMatrix::new(3, vec![vec![0.0; 3]]),
            Err(Error::ZeroNorm(_))
        ));
        assert!(AttributeMatrix::new(3, vec![]).is_err());
        assert!(AttributeMatrix::new(1, vec![vec![1.0]]).is_err());
        assert!(AttributeMatrix::new(3, vec![vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn exactly_symmetric() {
        let attrs = AttributeMatrix::new(
            6,
            vec![
                vec![0.1, 0.5, -0.3, 0.7, 0.2, -0.1],
                vec![0.4, -0.1, 0.2, 0.0, 0.9, 0.3],
            ],
        )
        .unwrap();
        let p = orthogonal_projection(&attrs, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(p.matrix(), &p.matrix().transpose());
    }
}
