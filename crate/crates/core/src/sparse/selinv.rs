use std::sync::Arc;

use super::{CholFactor, SymbolicCholesky};

/// Entries of `Q⁻¹` on the non-zero pattern of `L + Lᵀ`.
///
/// Values are stored aligned with the factor storage, so lookups go through
/// the factor's permutation.
#[derive(Debug, Clone)]
pub struct SelectedInverse {
    symbolic: Arc<SymbolicCholesky>,
    values: Vec<f64>,
}

impl SelectedInverse {
    /// Takahashi recursion, processed from the last column backwards:
    ///
    /// `C_ij = δ_ij / L_ii² − (1 / L_ii) Σ_{k > i, L_ki ≠ 0} L_ki C_kj`
    pub(crate) fn compute(factor: &CholFactor) -> Self {
        let sym = Arc::clone(factor.symbolic());
        let l = factor.values();
        let rows = sym.row_idx();
        let mut c = vec![0.0; l.len()];
        let n = sym.n();

        for j in (0..n).rev() {
            let (start, end) = sym.col(j);
            let ljj = l[start];
            // off-diagonal entries of column j first; they only need columns > j
            for p in start + 1..end {
                let i = rows[p];
                let mut acc = 0.0;
                for q in start + 1..end {
                    let k = rows[q];
                    acc += l[q] * lookup(&sym, &c, k, i);
                }
                c[p] = -acc / ljj;
            }
            let mut acc = 0.0;
            for q in start + 1..end {
                acc += l[q] * c[q];
            }
            c[start] = 1.0 / (ljj * ljj) - acc / ljj;
        }
        Self { symbolic: sym, values: c }
    }

    pub fn n(&self) -> usize {
        self.symbolic.n()
    }

    /// `(Q⁻¹)_ij` if `(i, j)` lies in the filled pattern (original indices).
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let ip = self.symbolic.iperm();
        if i >= ip.len() || j >= ip.len() {
            return None;
        }
        let (a, b) = (ip[i], ip[j]);
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        self.symbolic.factor_position(hi, lo).map(|p| self.values[p])
    }

    /// Diagonal of `Q⁻¹` in original ordering.
    pub fn diagonal(&self) -> Vec<f64> {
        let perm = self.symbolic.perm();
        let mut d = vec![0.0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            d[old] = self.values[self.symbolic.col(new).0];
        }
        d
    }

    /// All stored entries `(i, j, C_ij)` with original indices, `i` and `j`
    /// in either order as they appear in the factor.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let perm = self.symbolic.perm();
        let rows = self.symbolic.row_idx();
        let mut out = Vec::with_capacity(self.values.len());
        for j in 0..self.n() {
            let (start, end) = self.symbolic.col(j);
            for p in start..end {
                out.push((perm[rows[p]], perm[j], self.values[p]));
            }
        }
        out
    }
}

#[inline]
fn lookup(sym: &SymbolicCholesky, c: &[f64], a: usize, b: usize) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    let p = sym
        .factor_position(hi, lo)
        .expect("filled pattern is closed under the Takahashi recursion");
    c[p]
}
