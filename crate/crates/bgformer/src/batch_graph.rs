//! Dual-relational batch graph: a directed k-NN adjacency over feature
//! similarity (visual edges) and a dense same-label adjacency (semantic
//! edges), each with its own normalization.

use crate::error::{Error, Result};
use crate::numerics::matrix::{matmul, Matrix};

/// Row-wise sparse weighted adjacency. Each row holds its neighbor list as
/// (column, weight) pairs sorted by column index; the diagonal is never
/// stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    size: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseAdjacency {
    pub fn new(size: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), size);
        SparseAdjacency { size, rows }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn iter_edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, w)| (i, j, w)))
    }

    /// True iff `other` stores exactly the same (row, column) positions.
    pub fn same_pattern(&self, other: &SparseAdjacency) -> bool {
        self.size == other.size
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0))
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.size, self.size);
        for (i, j, w) in self.iter_edges() {
            m.set(i, j, w);
        }
        m
    }

    /// y = A x, accumulating each output row over its stored neighbors in
    /// column order. Adds nnz * x.cols() to `multiply_adds`.
    pub fn aggregate(&self, x: &Matrix, multiply_adds: &mut u64) -> Result<Matrix> {
        if x.rows() != self.size {
            return Err(Error::ShapeMismatch {
                op: "sparse_aggregate",
                lhs_rows: self.size,
                lhs_cols: self.size,
                rhs_rows: x.rows(),
                rhs_cols: x.cols(),
            });
        }
        let c = x.cols();
        let mut out = Matrix::zeros(self.size, c);
        for i in 0..self.size {
            for &(j, w) in &self.rows[i] {
                let src = x.row(j);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
            *multiply_adds += self.rows[i].len() as u64 * c as u64;
        }
        Ok(out)
    }

    /// y = A^T x; the reverse-mode counterpart of `aggregate`.
    pub fn aggregate_transpose(&self, x: &Matrix, multiply_adds: &mut u64) -> Result<Matrix> {
        if x.rows() != self.size {
            return Err(Error::ShapeMismatch {
                op: "sparse_aggregate_transpose",
                lhs_rows: self.size,
                lhs_cols: self.size,
                rhs_rows: x.rows(),
                rhs_cols: x.cols(),
            });
        }
        let c = x.cols();
        let mut out = Matrix::zeros(self.size, c);
        for i in 0..self.size {
            let src = x.row(i);
            for &(j, w) in &self.rows[i] {
                let dst = out.row_mut(j);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
            *multiply_adds += self.rows[i].len() as u64 * c as u64;
        }
        Ok(out)
    }
}

/// Dense B x B {0,1} matrix with A[i][j] = 1 iff labels match. Symmetric,
/// diagonal all ones.
pub type LabelAdjacency = Matrix;

/// Per-batch graph: raw and min-max-normalized visual adjacencies sharing one
/// sparsity pattern, the Laplacian-normalized label adjacency, and the batch
/// labels.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    pub a_v: SparseAdjacency,
    pub a_v_norm: SparseAdjacency,
    pub a_l_norm: Matrix,
    pub labels: Vec<i64>,
}

/// S = F F^T.
pub fn similarity(f: &Matrix) -> Matrix {
    matmul(f, &f.transpose()).expect("f * f^T shapes always agree")
}

/// Keep, per row i, the k columns j != i with the largest s[i][j]. Ties at
/// the cutoff go to the smaller column index. The result is directed.
pub fn knn_visual_adjacency(s: &Matrix, k: usize) -> Result<SparseAdjacency> {
    let b = s.rows();
    if s.cols() != b {
        return Err(Error::ShapeMismatch {
            op: "knn_visual_adjacency",
            lhs_rows: b,
            lhs_cols: s.cols(),
            rhs_rows: b,
            rhs_cols: b,
        });
    }
    if k == 0 || k > b.saturating_sub(1) {
        return Err(Error::contract(format!(
            "k-NN neighbor count k={k} out of range [1, {}] for batch size {b}",
            b.saturating_sub(1)
        )));
    }
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let mut candidates: Vec<(usize, f64)> = (0..b)
            .filter(|&j| j != i)
            .map(|j| (j, s.get(i, j)))
            .collect();
        // Largest weight first; equal weights keep the smaller column.
        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("similarity weights must not be NaN")
                .then(a.0.cmp(&b.0))
        });
        candidates.truncate(k);
        candidates.sort_by_key(|&(j, _)| j);
        rows.push(candidates);
    }
    Ok(SparseAdjacency::new(b, rows))
}

/// A[i][j] = 1 iff labels[i] == labels[j].
pub fn label_adjacency(labels: &[i64]) -> LabelAdjacency {
    let b = labels.len();
    let mut m = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            if labels[i] == labels[j] {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

/// Rescale stored edge weights to (w - min) / (max - min), ranging over the
/// stored entries only; structural zeros are untouched. If all stored weights
/// are equal the result is all zeros.
pub fn minmax_normalize(a_v: &SparseAdjacency) -> Result<SparseAdjacency> {
    if a_v.nnz() == 0 {
        return Err(Error::contract(
            "min-max normalization requires at least one stored edge".to_string(),
        ));
    }
    let mut w_min = f64::INFINITY;
    let mut w_max = f64::NEG_INFINITY;
    for (_, _, w) in a_v.iter_edges() {
        w_min = w_min.min(w);
        w_max = w_max.max(w);
    }
    let range = w_max - w_min;
    let rows = a_v
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .map(|&(j, w)| {
                    let nw = if range == 0.0 {
                        0.0
                    } else {
                        (w - w_min) / range
                    };
                    (j, nw)
                })
                .collect()
        })
        .collect();
    Ok(SparseAdjacency::new(a_v.size, rows))
}

/// D^{-1/2} (A + I) D^{-1/2} with D_ii the row sums of A itself. Each entry
/// is computed as (A + I)_ij / sqrt(D_ii * D_jj): the degrees are exact
/// integers, so the product and its square root carry no rounding for
/// perfect squares and the result is symmetric bit for bit.
pub fn sym_laplacian_normalize(a_l: &LabelAdjacency) -> Matrix {
    let b = a_l.rows();
    let deg: Vec<f64> = (0..b).map(|i| a_l.row(i).iter().sum()).collect();
    let mut out = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let aug = a_l.get(i, j) + if i == j { 1.0 } else { 0.0 };
            out.set(i, j, aug / (deg[i] * deg[j]).sqrt());
        }
    }
    out
}

/// Assemble the full batch graph from features and labels.
pub fn build_batch_graph(f: &Matrix, labels: &[i64], k: usize) -> Result<BatchGraph> {
    if f.rows() != labels.len() {
        return Err(Error::contract(format!(
            "feature rows {} != label count {}",
            f.rows(),
            labels.len()
        )));
    }
    let s = similarity(f);
    let a_v = knn_visual_adjacency(&s, k)?;
    let a_v_norm = minmax_normalize(&a_v)?;
    let a_l_norm = sym_laplacian_normalize(&label_adjacency(labels));
    Ok(BatchGraph {
        a_v,
        a_v_norm,
        a_l_norm,
        labels: labels.to_vec(),
    })
}

/// Edge-dump text format: header `# B=<B> k=<k>`, then one line per stored
/// edge `i<TAB>j<TAB>raw<TAB>norm` with rows ascending.
pub fn dump_graph(g: &BatchGraph, k: usize) -> String {
    let mut out = format!("# B={} k={}\n", g.a_v.size(), k);
    for i in 0..g.a_v.size() {
        for (&(j, raw), &(_, norm)) in g.a_v.row(i).iter().zip(g.a_v_norm.row(i)) {
            out.push_str(&format!("{i}\t{j}\t{raw}\t{norm}\n"));
        }
    }
    out
}
