use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;
use crate::error::{Error, Result};

/// Thin Householder QR of a column-major `rows × cols` buffer (`rows ≥ cols`).
/// Returns Q column-major with `diag(R) ≥ 0`.
pub(crate) fn thin_q(rows: usize, cols: usize, mut a: Vec<f64>) -> Vec<f64> {
    debug_assert!(cols <= rows);
    let col = |j: usize| j * rows;
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut diag_sign = vec![1.0f64; cols];

    for j in 0..cols {
        let x = &a[col(j) + j..col(j) + rows];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = x.to_vec();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|t| t * t).sum();
        // R_jj = alpha; flip Q's column later so the diagonal is positive
        diag_sign[j] = if alpha < 0.0 { -1.0 } else { 1.0 };
        for k in j..cols {
            let base = col(k) + j;
            let dot: f64 = v
                .iter()
                .zip(&a[base..col(k) + rows])
                .map(|(p, q)| p * q)
                .sum();
            let f = 2.0 * dot / vnorm_sq;
            for (i, vi) in v.iter().enumerate() {
                a[base + i] -= f * vi;
            }
        }
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{cols-1} applied to the first `cols` unit vectors.
    let mut q = vec![0.0f64; rows * cols];
    for j in 0..cols {
        q[col(j) + j] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        let vnorm_sq: f64 = v.iter().map(|t| t * t).sum();
        for k in 0..cols {
            let base = col(k) + j;
            let dot: f64 = v
                .iter()
                .zip(&q[base..col(k) + rows])
                .map(|(p, s)| p * s)
                .sum();
            let f = 2.0 * dot / vnorm_sq;
            for (i, vi) in v.iter().enumerate() {
                q[base + i] -= f * vi;
            }
        }
    }
    for (j, s) in diag_sign.iter().enumerate() {
        if *s < 0.0 {
            for x in &mut q[col(j)..col(j) + rows] {
                *x = -*x;
            }
        }
    }
    q
}

/// Column-orthonormal `rows × cols` matrix from a seeded Gaussian fill
/// followed by QR. Identical seeds give identical output.
pub fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> Result<Matrix> {
    if cols > rows {
        return Err(Error::argument(format!(
            "cannot build {cols} orthonormal columns in dimension {rows}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let q = thin_q(rows, cols, fill);
    let mut out = Matrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            out.set(i, j, q[j * rows + i] as f32);
        }
    }
    Ok(out)
}
