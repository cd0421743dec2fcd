mod common;

use common::{dense_inverse, random_sparse_spd};
use inla_core::sparse::{Ordering, SparseSym, SymbolicCholesky};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permuted(q: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(perm[i], perm[j])])
}

#[test]
fn factor_reproduces_permuted_matrix() {
    for seed in 0..10 {
        let q = random_sparse_spd(50, 0.08, seed);
        let f = q.factorize().unwrap();
        let l = f.l_dense();
        let pq = permuted(&q.to_dense(), f.perm());
        let err = (pq - &l * l.transpose()).amax();
        assert!(err <= 1e-12 * q.max_abs(), "seed {seed}: {err:e}");
    }
}

#[test]
fn minimum_degree_never_fills_more_than_natural_on_arrow() {
    // arrow with the hub first: natural order fills completely
    let n = 40;
    let mut t = vec![(0, 0, n as f64)];
    for i in 1..n {
        t.push((i, 0, 1.0));
        t.push((i, i, 2.0));
    }
    let q = SparseSym::from_triplets(n, &t).unwrap();
    let md = SymbolicCholesky::analyze(q.structure(), Ordering::MinimumDegree).unwrap();
    let nat = SymbolicCholesky::analyze(q.structure(), Ordering::Natural).unwrap();
    assert_eq!(md.nnz_factor(), 2 * n - 1);
    assert_eq!(nat.nnz_factor(), n * (n + 1) / 2);
}

#[test]
fn solve_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random_sparse_spd(100, 0.05, 77);
    let b: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = q.factorize().unwrap().solve(&b).unwrap();
    let r = q.mul_vec(&x);
    let res = r.iter().zip(&b).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let bmax = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    assert!(res / bmax <= 1e-10);
    let dense = q.to_dense().cholesky().unwrap().solve(&DVector::from_column_slice(&b));
    assert!((DVector::from_column_slice(&x) - dense).amax() < 1e-10);
}

#[test]
fn selected_inverse_matches_dense_inverse() {
    let q = random_sparse_spd(200, 0.03, 5);
    let sel = q.factorize().unwrap().selected_inverse();
    let inv = dense_inverse(&q.to_dense());
    for i in 0..200 {
        for j in 0..200 {
            if q.get(i, j) != 0.0 {
                let v = sel.get(i, j).expect("pattern entry stored");
                assert!((v - inv[(i, j)]).abs() <= 1e-9 * inv[(i, j)].abs().max((inv[(i, i)] * inv[(j, j)]).sqrt()));
            }
        }
    }
    for (i, j, v) in sel.entries() {
        assert!((v - inv[(i, j)]).abs() < 1e-9 * (inv[(i, i)] * inv[(j, j)]).sqrt());
    }
}

#[test]
fn inverse_columns_match_dense_inverse() {
    let q = random_sparse_spd(100, 0.05, 9);
    let inv = dense_inverse(&q.to_dense());
    let cols = [0, 17, 42, 63, 99];
    let got = q.factorize().unwrap().inverse_columns(&cols).unwrap();
    for (k, &j) in cols.iter().enumerate() {
        let norm = inv.column(j).amax();
        for i in 0..100 {
            assert!((got[k][i] - inv[(i, j)]).abs() <= 1e-10 * norm);
        }
    }
}
