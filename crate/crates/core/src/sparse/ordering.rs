use std::collections::{BTreeSet, HashSet};

use super::{LowerStructure, SparseError};

/// Fill-reducing ordering used by the symbolic analysis.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Ordering {
    /// Greedy minimum degree on the explicit elimination graph.
    #[default]
    MinimumDegree,
    /// Identity permutation.
    Natural,
    /// Caller-supplied permutation, `perm[new] = old`.
    Custom(Vec<usize>),
}

impl Ordering {
    pub(crate) fn permutation(&self, structure: &LowerStructure) -> Result<Vec<usize>, SparseError> {
        let n = structure.n();
        match self {
            Ordering::MinimumDegree => Ok(minimum_degree(structure)),
            Ordering::Natural => Ok((0..n).collect()),
            Ordering::Custom(perm) => {
                if perm.len() != n {
                    return Err(SparseError::InvalidPermutation);
                }
                let mut seen = vec![false; n];
                for &p in perm {
                    if p >= n || seen[p] {
                        return Err(SparseError::InvalidPermutation);
                    }
                    seen[p] = true;
                }
                Ok(perm.clone())
            }
        }
    }
}

/// Minimum-degree ordering. Ties are broken by the smaller node index, so
/// the result depends only on the pattern.
pub fn minimum_degree(structure: &LowerStructure) -> Vec<usize> {
    let n = structure.n();
    let mut adj: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    let (col_ptr, row_idx) = (structure.col_ptr(), structure.row_idx());
    for j in 0..n {
        for &i in &row_idx[col_ptr[j]..col_ptr[j + 1]] {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }

    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|i| (adj[i].len(), i)).collect();
    let mut perm = Vec::with_capacity(n);
    while let Some((_, v)) = queue.pop_first() {
        perm.push(v);
        let neighbours: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &neighbours {
            let before = adj[u].len();
            adj[u].remove(&v);
            for &w in &neighbours {
                if w != u {
                    adj[u].insert(w);
                }
            }
            let after = adj[u].len();
            if after != before {
                queue.remove(&(before, u));
                queue.insert((after, u));
            }
        }
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparsePattern;

    fn arrow(n: usize) -> LowerStructure {
        // node 0 connected to everything
        LowerStructure::from_pattern(&SparsePattern::from_edges(n, (1..n).map(|i| (0, i))))
    }

    #[test]
    fn hub_node_is_not_eliminated_early() {
        let perm = minimum_degree(&arrow(6));
        assert_eq!(perm.len(), 6);
        // once a single leaf remains the hub ties with it
        assert!(perm[..4].iter().all(|&v| v != 0));
    }

    #[test]
    fn ordering_is_a_permutation_and_deterministic() {
        let s = LowerStructure::from_pattern(&SparsePattern::from_edges(
            7,
            [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (0, 6), (2, 5)],
        ));
        let a = minimum_degree(&s);
        let b = minimum_degree(&s);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn custom_ordering_is_validated() {
        let s = arrow(3);
        assert!(Ordering::Custom(vec![0, 0, 1]).permutation(&s).is_err());
        assert!(Ordering::Custom(vec![0, 1]).permutation(&s).is_err());
        assert_eq!(Ordering::Custom(vec![2, 0, 1]).permutation(&s).unwrap(), vec![2, 0, 1]);
    }
}
