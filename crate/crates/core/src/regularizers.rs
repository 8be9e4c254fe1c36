//! Orthogonality and Hoyer-sparsity penalties on task factors, and the
//! total training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::factorized::{FactorNodes, TaskFactors};
use crate::linalg::{matmul, Matrix};

/// Guard added to `‖σ‖₂` inside the training graph.
pub const HOYER_EPS: f32 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_orth: f32,
    pub lambda_sparse: f32,
}

impl LossWeights {
    pub fn new(lambda_orth: f32, lambda_sparse: f32) -> Result<Self> {
        let w = Self {
            lambda_orth,
            lambda_sparse,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("lambda_orth", self.lambda_orth),
            ("lambda_sparse", self.lambda_sparse),
        ] {
            if !x.is_finite() || x < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {x}"
                )));
            }
        }
        Ok(())
    }
}

fn gram_minus_identity_norm(m: &Matrix) -> f64 {
    let gram = matmul(&m.transpose(), m).expect("square gram");
    let mut sq = 0.0f64;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let d = gram.get(i, j) as f64 - if i == j { 1.0 } else { 0.0 };
            sq += d * d;
        }
    }
    sq.sqrt()
}

/// `Σ_l (‖UᵀU − I‖_F + ‖VᵀV − I‖_F) / r_l²`, non-squared norms.
/// Zero-width layers contribute nothing.
pub fn l_orth(factors: &TaskFactors) -> f64 {
    factors
        .layers
        .iter()
        .filter(|f| f.rank() > 0)
        .map(|f| {
            let r = f.rank() as f64;
            (gram_minus_identity_norm(&f.u) + gram_minus_identity_norm(&f.v)) / (r * r)
        })
        .sum()
}

/// `Σ_l ‖σ_l‖₁ / ‖σ_l‖₂`. A layer whose σ is all zeros has no defined ratio.
pub fn l_sparse(factors: &TaskFactors) -> Result<f64> {
    let mut total = 0.0;
    for (l, f) in factors
        .layers
        .iter()
        .enumerate()
        .filter(|(_, f)| f.rank() > 0)
    {
        total += hoyer(&f.sigma).ok_or_else(|| {
            Error::Numeric(format!("layer {l}: Hoyer ratio undefined for all-zero σ"))
        })?;
    }
    Ok(total)
}

/// `‖σ‖₁ / ‖σ‖₂` on magnitudes, `None` for the zero vector.
pub fn hoyer(sigma: &[f32]) -> Option<f64> {
    let l1: f64 = sigma.iter().map(|&s| (s as f64).abs()).sum();
    let l2: f64 = sigma
        .iter()
        .map(|&s| (s as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    (l2 > 0.0).then(|| l1 / l2)
}

pub fn total_loss(task_loss: f64, l_orth: f64, l_sparse: f64, w: &LossWeights) -> f64 {
    task_loss + w.lambda_orth as f64 * l_orth + w.lambda_sparse as f64 * l_sparse
}

/// Records the orthogonality penalty over every non-empty layer. Returns
/// `None` if no layer has any columns.
pub fn orth_in_graph(g: &mut Graph, layers: &[FactorNodes]) -> Result<Option<NodeId>> {
    let mut acc: Option<NodeId> = None;
    for f in layers {
        let r = g.value(f.sigma).len();
        if r == 0 {
            continue;
        }
        let neg_eye = g.constant(Matrix::identity(r).map(|x| -x));
        let mut layer_sum: Option<NodeId> = None;
        for m in [f.u, f.v] {
            let mt = g.transpose(m)?;
            let gram = g.mat_mul(mt, m)?;
            let diff = g.add(gram, neg_eye)?;
            let norm = g.frobenius_norm(diff)?;
            layer_sum = Some(match layer_sum {
                Some(s) => g.add(s, norm)?,
                None => norm,
            });
        }
        let scaled = g.scale(layer_sum.expect("two terms"), 1.0 / (r * r) as f32)?;
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc)
}

/// Records `Σ_l ‖σ_l‖₁ / (‖σ_l‖₂ + ε)`.
pub fn sparse_in_graph(g: &mut Graph, layers: &[FactorNodes]) -> Result<Option<NodeId>> {
    let mut acc: Option<NodeId> = None;
    for f in layers {
        if g.value(f.sigma).is_empty() {
            continue;
        }
        let l1 = g.l1_norm(f.sigma)?;
        let l2 = g.l2_norm(f.sigma)?;
        let eps = g.constant(Matrix::scalar(HOYER_EPS));
        let den = g.add(l2, eps)?;
        let ratio = g.div(l1, den)?;
        acc = Some(match acc {
            Some(a) => g.add(a, ratio)?,
            None => ratio,
        });
    }
    Ok(acc)
}

/// `task + λ_orth·orth + λ_sparse·sparse`, skipping absent or zero-weighted
/// terms.
pub fn total_in_graph(
    g: &mut Graph,
    task: NodeId,
    orth: Option<NodeId>,
    sparse: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut total = task;
    if let Some(o) = orth.filter(|_| w.lambda_orth > 0.0) {
        let s = g.scale(o, w.lambda_orth)?;
        total = g.add(total, s)?;
    }
    if let Some(sp) = sparse.filter(|_| w.lambda_sparse > 0.0) {
        let s = g.scale(sp, w.lambda_sparse)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}
