use std::sync::Arc;

use super::{LowerStructure, Ordering, SelectedInverse, SparseError, SparseSym, PIVOT_THRESHOLD};

/// Ordering plus the non-zero structure of the Cholesky factor.
///
/// Computed once per pattern; [`SymbolicCholesky::factorize`] then only does
/// numeric work, which is what the hyperparameter loop needs.
#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `iperm[old] = new`
    iperm: Vec<usize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    /// For row `j`: the columns `k < j` with `L[j, k] != 0` and the position
    /// of that entry inside column `k`.
    row_ptr: Vec<usize>,
    row_entries: Vec<(usize, usize)>,
    /// Destination in the factor storage of every stored input entry.
    input_map: Vec<usize>,
    input: Arc<LowerStructure>,
}

impl SymbolicCholesky {
    pub fn analyze(structure: &Arc<LowerStructure>, ordering: Ordering) -> Result<Self, SparseError> {
        let n = structure.n();
        let perm = ordering.permutation(structure)?;
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // permuted lower adjacency: for each new column j, rows i > j
        let (col_ptr, row_idx) = (structure.col_ptr(), structure.row_idx());
        let mut lower: Vec<Vec<usize>> = vec![Vec::new(); n];
        for c in 0..n {
            for &r in &row_idx[col_ptr[c]..col_ptr[c + 1]] {
                let (a, b) = (iperm[r], iperm[c]);
                if a != b {
                    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
                    lower[lo].push(hi);
                }
            }
        }

        // column patterns by merging children along the elimination tree
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut mark = vec![usize::MAX; n];
        let mut l_col_ptr = Vec::with_capacity(n + 1);
        let mut l_row_idx: Vec<usize> = Vec::new();
        l_col_ptr.push(0);
        let mut scratch = Vec::new();
        for j in 0..n {
            scratch.clear();
            mark[j] = j;
            for &i in &lower[j] {
                if mark[i] != j {
                    mark[i] = j;
                    scratch.push(i);
                }
            }
            for &c in &children[j] {
                let rows = &l_row_idx[l_col_ptr[c] + 1..l_col_ptr[c + 1]];
                for &i in rows {
                    if mark[i] != j {
                        mark[i] = j;
                        scratch.push(i);
                    }
                }
            }
            scratch.sort_unstable();
            l_row_idx.push(j);
            l_row_idx.extend_from_slice(&scratch);
            l_col_ptr.push(l_row_idx.len());
            if let Some(&parent) = scratch.first() {
                children[parent].push(j);
            }
        }

        let nnz = l_row_idx.len();
        let mut counts = vec![0usize; n];
        for j in 0..n {
            for &i in &l_row_idx[l_col_ptr[j] + 1..l_col_ptr[j + 1]] {
                counts[i] += 1;
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        for j in 0..n {
            row_ptr.push(row_ptr[j] + counts[j]);
        }
        let mut fill = row_ptr[..n].to_vec();
        let mut row_entries = vec![(0, 0); row_ptr[n]];
        for k in 0..n {
            for p in l_col_ptr[k] + 1..l_col_ptr[k + 1] {
                let i = l_row_idx[p];
                row_entries[fill[i]] = (k, p);
                fill[i] += 1;
            }
        }

        let mut input_map = Vec::with_capacity(structure.nnz());
        for c in 0..n {
            for &r in &row_idx[col_ptr[c]..col_ptr[c + 1]] {
                let (a, b) = (iperm[r], iperm[c]);
                let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                let rows = &l_row_idx[l_col_ptr[lo]..l_col_ptr[lo + 1]];
                let off = rows.binary_search(&hi).expect("input entry covered by factor pattern");
                input_map.push(l_col_ptr[lo] + off);
            }
        }
        debug_assert!(input_map.iter().all(|&p| p < nnz));

        Ok(Self {
            n,
            perm,
            iperm,
            l_col_ptr,
            l_row_idx,
            row_ptr,
            row_entries,
            input_map,
            input: Arc::clone(structure),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn iperm(&self) -> &[usize] {
        &self.iperm
    }

    /// Number of stored entries of `L` (diagonal included).
    pub fn nnz_factor(&self) -> usize {
        self.l_row_idx.len()
    }

    pub(crate) fn col(&self, j: usize) -> (usize, usize) {
        (self.l_col_ptr[j], self.l_col_ptr[j + 1])
    }

    pub(crate) fn row_idx(&self) -> &[usize] {
        &self.l_row_idx
    }

    /// Storage position of `L[i, j]` in permuted indices, `i >= j`.
    pub(crate) fn factor_position(&self, i: usize, j: usize) -> Option<usize> {
        let (start, end) = self.col(j);
        self.l_row_idx[start..end].binary_search(&i).ok().map(|p| start + p)
    }

    /// Numeric factorization of a matrix whose structure matches the analysed one.
    pub fn factorize(self: &Arc<Self>, q: &SparseSym) -> Result<CholFactor, SparseError> {
        let same = Arc::ptr_eq(&self.input, q.structure()) || *self.input == **q.structure();
        if !same {
            return Err(SparseError::PatternMismatch);
        }
        let n = self.n;
        let mut values = vec![0.0; self.l_row_idx.len()];
        for (&dst, &v) in self.input_map.iter().zip(q.values()) {
            values[dst] += v;
        }

        let mut work = vec![0.0; n];
        let mut logdet = 0.0;
        for j in 0..n {
            let (start, end) = self.col(j);
            for p in start..end {
                work[self.l_row_idx[p]] = values[p];
            }
            for &(k, pos) in &self.row_entries[self.row_ptr[j]..self.row_ptr[j + 1]] {
                let ljk = values[pos];
                let k_end = self.l_col_ptr[k + 1];
                for p in pos..k_end {
                    work[self.l_row_idx[p]] -= values[p] * ljk;
                }
            }
            let d = work[j];
            if !(d > PIVOT_THRESHOLD) || !d.is_finite() {
                return Err(SparseError::NotPositiveDefinite { index: self.perm[j], pivot: d });
            }
            let ljj = d.sqrt();
            logdet += ljj.ln();
            values[start] = ljj;
            work[j] = 0.0;
            for p in start + 1..end {
                let i = self.l_row_idx[p];
                values[p] = work[i] / ljj;
                work[i] = 0.0;
            }
        }
        Ok(CholFactor { symbolic: Arc::clone(self), values, logdet: 2.0 * logdet })
    }
}

/// Numeric Cholesky factor `P Q Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    symbolic: Arc<SymbolicCholesky>,
    values: Vec<f64>,
    logdet: f64,
}

impl CholFactor {
    pub fn n(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `log det Q = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn perm(&self) -> &[usize] {
        &self.symbolic.perm
    }

    /// `L` as a dense matrix in permuted indices.
    pub fn l_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n();
        let mut l = nalgebra::DMatrix::zeros(n, n);
        for j in 0..n {
            let (start, end) = self.symbolic.col(j);
            for p in start..end {
                l[(self.symbolic.l_row_idx[p], j)] = self.values[p];
            }
        }
        l
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        if b.len() != self.n() {
            return Err(SparseError::DimensionMismatch { expected: self.n(), got: b.len() });
        }
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        Ok(x)
    }

    /// Overwrites `x` (original ordering) with `Q⁻¹ x`.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let s = &*self.symbolic;
        let mut y: Vec<f64> = s.perm.iter().map(|&old| x[old]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        for (new, &old) in s.perm.iter().enumerate() {
            x[old] = y[new];
        }
    }

    /// Solves `L y = b` in permuted indices.
    pub(crate) fn forward(&self, y: &mut [f64]) {
        let s = &*self.symbolic;
        for j in 0..s.n {
            let (start, end) = s.col(j);
            let yj = y[j] / self.values[start];
            y[j] = yj;
            if yj != 0.0 {
                for p in start + 1..end {
                    y[s.l_row_idx[p]] -= self.values[p] * yj;
                }
            }
        }
    }

    /// Solves `Lᵀ x = y` in permuted indices.
    pub(crate) fn backward(&self, y: &mut [f64]) {
        let s = &*self.symbolic;
        for j in (0..s.n).rev() {
            let (start, end) = s.col(j);
            let mut acc = y[j];
            for p in start + 1..end {
                acc -= self.values[p] * y[s.l_row_idx[p]];
            }
            y[j] = acc / self.values[start];
        }
    }

    /// Columns `Q⁻¹ e_j` for each requested original index `j`.
    pub fn inverse_columns(&self, cols: &[usize]) -> Result<Vec<Vec<f64>>, SparseError> {
        let n = self.n();
        cols.iter()
            .map(|&j| {
                if j >= n {
                    return Err(SparseError::IndexOutOfRange { index: j, n });
                }
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                self.solve_in_place(&mut e);
                Ok(e)
            })
            .collect()
    }

    /// Selected inverse on the pattern of `L + Lᵀ`.
    pub fn selected_inverse(&self) -> SelectedInverse {
        SelectedInverse::compute(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn identity_factor_is_identity() {
        let f = SparseSym::identity(3).factorize().unwrap();
        assert_eq!(f.l_dense(), DMatrix::identity(3, 3));
        assert_eq!(f.logdet(), 0.0);
    }

    #[test]
    fn hand_two_by_two() {
        let q = SparseSym::from_triplets(2, &[(0, 0, 4.0), (1, 0, 2.0), (1, 1, 3.0)]).unwrap();
        let sym = Arc::new(SymbolicCholesky::analyze(q.structure(), Ordering::Natural).unwrap());
        let f = sym.factorize(&q).unwrap();
        let l = f.l_dense();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert!((f.logdet() - 8f64.ln()).abs() < 1e-14);
        let x = f.solve(&[8.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14, "{x:?}");
        let x = f.solve(&[8.0, 7.0]).unwrap();
        assert!((x[0] - 1.25).abs() < 1e-14 && (x[1] - 1.5).abs() < 1e-14, "{x:?}");
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let f = SparseSym::identity(4).factorize().unwrap();
        assert_eq!(f.solve(&[1.0, -2.0, 3.5, 0.0]).unwrap(), vec![1.0, -2.0, 3.5, 0.0]);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let q = SparseSym::from_triplets(2, &[(0, 0, 1.0), (1, 0, 2.0), (1, 1, 1.0)]).unwrap();
        assert!(matches!(q.factorize(), Err(SparseError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn dimension_errors() {
        let f = SparseSym::identity(3).factorize().unwrap();
        assert_eq!(f.solve(&[1.0]).unwrap_err(), SparseError::DimensionMismatch { expected: 3, got: 1 });
        assert_eq!(f.inverse_columns(&[3]).unwrap_err(), SparseError::IndexOutOfRange { index: 3, n: 3 });
    }

    #[test]
    fn pattern_mismatch_is_detected() {
        let a = SparseSym::identity(2);
        let b = SparseSym::from_triplets(2, &[(0, 0, 1.0), (1, 0, 0.1), (1, 1, 1.0)]).unwrap();
        let sym = Arc::new(SymbolicCholesky::analyze(a.structure(), Ordering::Natural).unwrap());
        assert_eq!(sym.factorize(&b).unwrap_err(), SparseError::PatternMismatch);
    }

    #[test]
    fn inverse_columns_hand() {
        let q = SparseSym::from_triplets(2, &[(0, 0, 4.0), (1, 0, 2.0), (1, 1, 3.0)]).unwrap();
        let f = q.factorize().unwrap();
        let c = f.inverse_columns(&[0]).unwrap();
        assert!((c[0][0] - 0.375).abs() < 1e-15);
        assert!((c[0][1] + 0.25).abs() < 1e-15);
        let e = SparseSym::identity(3).factorize().unwrap().inverse_columns(&[1]).unwrap();
        assert_eq!(e[0], vec![0.0, 1.0, 0.0]);
    }
}
