//! Sparse symmetric linear algebra.
//!
//! Matrices are stored as the lower triangle in compressed-column form with
//! sorted row indices and the diagonal as the first entry of every column.
//! The structure (column pointers and row indices) lives behind an [`Arc`]
//! so that the many precision matrices built during a fit share one pattern
//! and the symbolic factorization can be reused.

mod cholesky;
mod ordering;
mod selinv;

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

pub use cholesky::{CholFactor, SymbolicCholesky};
pub use ordering::{minimum_degree, Ordering};
pub use selinv::SelectedInverse;

/// Smallest admissible pivot in the numeric factorization.
pub const PIVOT_THRESHOLD: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("matrix is not positive definite: pivot {pivot:e} at original index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for dimension {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("sparsity pattern differs from the one used for symbolic analysis")]
    PatternMismatch,
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("invalid permutation")]
    InvalidPermutation,
}

/// Adjacency structure of a symmetric matrix (the graph of its non-zeros).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsePattern {
    n: usize,
    adjacency: Vec<Vec<usize>>,
}

impl SparsePattern {
    /// Builds a pattern from undirected edges; the diagonal is always added.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adjacency: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (i, j) in edges {
            assert!(i < n && j < n, "edge ({i}, {j}) outside dimension {n}");
            if i != j {
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
        for row in &mut adjacency {
            row.sort_unstable();
            row.dedup();
        }
        Self { n, adjacency }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Sorted neighbours of `i`, including `i` itself.
    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    /// Number of stored lower-triangle entries (diagonal included).
    pub fn nnz_lower(&self) -> usize {
        self.adjacency
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().filter(|&&j| j <= i).count())
            .sum()
    }
}

/// Compressed lower-triangle structure shared between matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LowerStructure {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

impl LowerStructure {
    pub fn from_pattern(pattern: &SparsePattern) -> Self {
        let n = pattern.n();
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::with_capacity(pattern.nnz_lower());
        col_ptr.push(0);
        for j in 0..n {
            row_idx.extend(pattern.neighbours(j).iter().copied().filter(|&i| i >= j));
            col_ptr.push(row_idx.len());
        }
        Self { n, col_ptr, row_idx }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    /// Storage position of entry `(i, j)`; either triangle may be named.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if c >= self.n {
            return None;
        }
        let start = self.col_ptr[c];
        let rows = &self.row_idx[start..self.col_ptr[c + 1]];
        rows.binary_search(&r).ok().map(|p| start + p)
    }

    pub fn pattern(&self) -> SparsePattern {
        let mut edges = Vec::with_capacity(self.nnz());
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                edges.push((self.row_idx[p], j));
            }
        }
        SparsePattern::from_edges(self.n, edges)
    }
}

/// Symmetric sparse matrix stored by its lower triangle.
#[derive(Debug, Clone)]
pub struct SparseSym {
    structure: Arc<LowerStructure>,
    values: Vec<f64>,
}

impl SparseSym {
    pub fn zeros(structure: Arc<LowerStructure>) -> Self {
        let values = vec![0.0; structure.nnz()];
        Self { structure, values }
    }

    pub fn from_values(structure: Arc<LowerStructure>, values: Vec<f64>) -> Result<Self, SparseError> {
        if values.len() != structure.nnz() {
            return Err(SparseError::DimensionMismatch { expected: structure.nnz(), got: values.len() });
        }
        Ok(Self { structure, values })
    }

    /// Assembles from `(row, col, value)` triplets; duplicates are summed and
    /// an entry given in the upper triangle is mirrored into the lower one.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, SparseError> {
        for &(i, j, _) in triplets {
            if i >= n || j >= n {
                return Err(SparseError::IndexOutOfRange { index: i.max(j), n });
            }
        }
        let pattern = SparsePattern::from_edges(n, triplets.iter().map(|&(i, j, _)| (i, j)));
        let structure = Arc::new(LowerStructure::from_pattern(&pattern));
        let mut out = Self::zeros(structure);
        for &(i, j, v) in triplets {
            let p = out.structure.position(i, j).expect("entry present in pattern");
            out.values[p] += v;
        }
        Ok(out)
    }

    pub fn identity(n: usize) -> Self {
        let triplets: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, &triplets).expect("valid identity")
    }

    /// Lower triangle of a dense symmetric matrix; exact zeros are dropped.
    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let n = dense.nrows();
        let mut triplets = Vec::new();
        for j in 0..n {
            for i in j..n {
                let v = dense[(i, j)];
                if v != 0.0 || i == j {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, &triplets).expect("valid dense input")
    }

    pub fn n(&self) -> usize {
        self.structure.n
    }

    pub fn structure(&self) -> &Arc<LowerStructure> {
        &self.structure
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.structure.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn check_finite(&self) -> Result<(), SparseError> {
        let s = &self.structure;
        for j in 0..s.n {
            for p in s.col_ptr[j]..s.col_ptr[j + 1] {
                if !self.values[p].is_finite() {
                    return Err(SparseError::NonFinite { row: s.row_idx[p], col: j });
                }
            }
        }
        Ok(())
    }

    /// `y = Q x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let s = &self.structure;
        assert_eq!(x.len(), s.n, "dimension mismatch in mul_vec");
        let mut y = vec![0.0; s.n];
        for j in 0..s.n {
            for p in s.col_ptr[j]..s.col_ptr[j + 1] {
                let i = s.row_idx[p];
                let v = self.values[p];
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    /// `xᵀ Q x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let s = &self.structure;
        assert_eq!(x.len(), s.n, "dimension mismatch in quad_form");
        let mut acc = 0.0;
        for j in 0..s.n {
            for p in s.col_ptr[j]..s.col_ptr[j + 1] {
                let i = s.row_idx[p];
                let v = self.values[p] * x[i] * x[j];
                acc += if i == j { v } else { 2.0 * v };
            }
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let s = &self.structure;
        let mut d = DMatrix::zeros(s.n, s.n);
        for j in 0..s.n {
            for p in s.col_ptr[j]..s.col_ptr[j + 1] {
                let i = s.row_idx[p];
                d[(i, j)] = self.values[p];
                d[(j, i)] = self.values[p];
            }
        }
        d
    }

    /// Full analysis plus numeric factorization with the default ordering.
    pub fn factorize(&self) -> Result<CholFactor, SparseError> {
        let symbolic = Arc::new(SymbolicCholesky::analyze(&self.structure, Ordering::MinimumDegree)?);
        symbolic.factorize(self)
    }
}
