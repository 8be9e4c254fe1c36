//! Compression-aware continual learning.
//!
//! A sequence of classification tasks is trained on a convolutional network
//! whose weights live in SVD-factorized form. Each task learns a residual
//! `U diag(σ) Vᵀ` on top of a frozen shared space, is pruned by
//! singular-value energy and then appended to that space. Earlier tasks are
//! recovered exactly by reading a prefix of the stored factors.

pub mod autodiff;
pub mod compression;
pub mod error;
pub mod factorized;
pub mod harness;
pub mod linalg;
pub mod regularizers;
pub mod trainer;

pub use error::{Error, Result};
