//! Dense 2-D linear algebra used throughout the factorized network.
//!
//! Everything is stored in 32-bit precision. The SVD and QR routines
//! accumulate in 64-bit internally and round once on output.

mod matrix;
mod qr;
mod svd;

pub use matrix::{matmul, reshape_to_matrix, reshape_to_tensor, Matrix, Tensor4};
pub use qr::random_orthonormal;
pub(crate) use svd::outer_sum as svd_outer_sum;
pub use svd::{rank_k_approx, reconstruct, svd, SvdFactors};

/// Largest entrywise deviation of `mᵀm` from the identity.
pub fn gram_deviation(m: &Matrix) -> f32 {
    let mut worst = 0.0f64;
    for i in 0..m.cols() {
        for j in i..m.cols() {
            let mut dot = 0.0f64;
            for r in 0..m.rows() {
                dot += m.get(r, i) as f64 * m.get(r, j) as f64;
            }
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst as f32
}
