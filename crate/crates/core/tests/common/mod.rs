#![allow(dead_code)]

use inla_core::sparse::SparseSym;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Diagonally dominant sparse SPD matrix with off-diagonal fill ≈ `density`.
pub fn random_sparse_spd(n: usize, density: f64, seed: u64) -> SparseSym {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::new();
    let mut row_sum = vec![0.0; n];
    for j in 0..n {
        for i in j + 1..n {
            if rng.random::<f64>() < density {
                let v: f64 = rng.random_range(-1.0..1.0);
                triplets.push((i, j, v));
                row_sum[i] += v.abs();
                row_sum[j] += v.abs();
            }
        }
    }
    for (i, s) in row_sum.iter().enumerate() {
        triplets.push((i, i, s + rng.random_range(0.5..2.0)));
    }
    SparseSym::from_triplets(n, &triplets).expect("valid triplets")
}

/// Share of stored off-diagonal entries in the full matrix.
pub fn density(q: &SparseSym) -> f64 {
    let n = q.n() as f64;
    let off = (q.structure().nnz() as f64 - n) * 2.0;
    off / (n * n)
}

pub fn dense_inverse(q: &DMatrix<f64>) -> DMatrix<f64> {
    q.clone().cholesky().expect("SPD").inverse()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
