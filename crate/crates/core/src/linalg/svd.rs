use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Reduced SVD `m = u · diag(sigma) · vᵀ` with `r = min(rows, cols)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f32>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns of the working matrix are rotated pairwise in 64-bit until every
/// pair is orthogonal to machine precision. Singular values come out sorted
/// descending (ties keep column order) and each `u` column has its
/// largest-magnitude entry positive.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if !m.is_finite() {
        return Err(Error::Numeric(
            "svd input contains non-finite values".into(),
        ));
    }
    let transposed = m.rows() < m.cols();
    let (rows, cols) = if transposed {
        (m.cols(), m.rows())
    } else {
        (m.rows(), m.cols())
    };
    // Column-major working copy of the tall orientation.
    let mut w = vec![0.0f64; rows * cols];
    for j in 0..cols {
        for i in 0..rows {
            let x = if transposed { m.get(j, i) } else { m.get(i, j) };
            w[j * rows + i] = x as f64;
        }
    }
    let mut v = vec![0.0f64; cols * cols];
    for j in 0..cols {
        v[j * cols + j] = 1.0;
    }

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let wp = &w[p * rows..(p + 1) * rows];
                    let wq = &w[q * rows..(q + 1) * rows];
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in wp.iter().zip(wq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, rows, p, q, c, s);
                rotate(&mut v, cols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..cols)
        .map(|j| {
            w[j * rows..(j + 1) * rows]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    // stable: equal values keep their original column order
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let sigma_max = norms.iter().cloned().fold(0.0, f64::max);
    let null_floor = sigma_max * f64::EPSILON * rows as f64;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut sigma = Vec::with_capacity(cols);
    let mut pending_null = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        v_cols.push(v[j * cols..(j + 1) * cols].to_vec());
        if s > null_floor && s > 0.0 {
            u_cols.push(w[j * rows..(j + 1) * rows].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(Vec::new());
            pending_null.push(slot);
        }
    }
    complete_basis(&mut u_cols, &pending_null, rows);

    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let mut best = 0usize;
        for (i, x) in uc.iter().enumerate() {
            if x.abs() > uc[best].abs() {
                best = i;
            }
        }
        if uc[best] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let to_matrix = |cols_: &[Vec<f64>], n: usize| {
        let mut out = Matrix::zeros(n, cols_.len());
        for (j, c) in cols_.iter().enumerate() {
            for (i, &x) in c.iter().enumerate() {
                out.set(i, j, x as f32);
            }
        }
        out
    };
    let left = to_matrix(&u_cols, rows);
    let right = to_matrix(&v_cols, cols);
    let sigma: Vec<f32> = sigma.into_iter().map(|s| s as f32).collect();
    Ok(if transposed {
        SvdFactors {
            u: right,
            sigma,
            v: left,
        }
    } else {
        SvdFactors {
            u: left,
            sigma,
            v: right,
        }
    })
}

fn rotate(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(q * len);
    let xp = &mut head[p * len..(p + 1) * len];
    let xq = &mut tail[..len];
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the empty slots in `cols` with unit vectors orthogonal to every
/// other column, drawn from the standard basis by modified Gram-Schmidt.
fn complete_basis(cols: &mut [Vec<f64>], slots: &[usize], dim: usize) {
    for &slot in slots {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let dot: f64 = other.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    cand.iter_mut().zip(other).for_each(|(c, o)| *c -= dot * o);
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(n, _)| norm > *n) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("dimension is positive");
        cols[slot] = cand.into_iter().map(|x| x / norm).collect();
    }
}

/// `Σ_{p<k} sigma_p · u_p · v_pᵀ`, accumulated in 64-bit in ascending `p`.
///
/// Only the first `k` columns are read, so the result for a given prefix
/// never depends on columns beyond it.
pub(crate) fn outer_sum(u: &Matrix, sigma: &[f32], v: &Matrix, k: usize) -> Matrix {
    debug_assert!(k <= sigma.len() && k <= u.cols() && k <= v.cols());
    let (m, n) = (u.rows(), v.rows());
    let mut out = Matrix::zeros(m, n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for p in 0..k {
            let coef = u.get(i, p) as f64 * sigma[p] as f64;
            if coef == 0.0 {
                continue;
            }
            for (j, a) in acc.iter_mut().enumerate() {
                *a += coef * v.get(j, p) as f64;
            }
        }
        for (j, a) in acc.iter().enumerate() {
            out.set(i, j, *a as f32);
        }
    }
    out
}

/// Best rank-`k` approximation from existing factors.
pub fn rank_k_approx(f: &SvdFactors, k: usize) -> Result<Matrix> {
    if k == 0 || k > f.rank() {
        return Err(Error::argument(format!(
            "rank k = {k} outside 1..={}",
            f.rank()
        )));
    }
    Ok(outer_sum(&f.u, &f.sigma, &f.v, k))
}

/// Full reconstruction `u · diag(sigma) · vᵀ`.
pub fn reconstruct(f: &SvdFactors) -> Matrix {
    outer_sum(&f.u, &f.sigma, &f.v, f.rank())
}
