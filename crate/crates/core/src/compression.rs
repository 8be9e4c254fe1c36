//! Post-training singular-value sorting and energy-based pruning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorized::{LayerFactors, TaskFactors};
use crate::linalg::gram_deviation;

/// Which inequality decides how many singular values survive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneCriterion {
    /// Smallest `k` with `Σ_{i≤k} σᵢ² / Σ σᵢ² ≥ 1 − e`.
    #[default]
    TotalEnergy,
    /// Smallest `k` with `Σ_{i>k} σᵢ² ≤ e · Σ_{i≤k} σᵢ²`.
    TailVsRetained,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub energy_e: f64,
    pub min_rank: usize,
    #[serde(default)]
    pub criterion: PruneCriterion,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            energy_e: 1e-5,
            min_rank: 1,
            criterion: PruneCriterion::TotalEnergy,
        }
    }
}

impl PruneConfig {
    pub fn with_energy(energy_e: f64) -> Self {
        Self {
            energy_e,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.energy_e) {
            return Err(Error::Config(format!(
                "pruning energy e = {} must lie in [0, 1)",
                self.energy_e
            )));
        }
        if self.min_rank == 0 {
            return Err(Error::Config("min_rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// Permutes columns so `|σ|` is non-increasing (stable on ties) and folds
/// negative signs into `U`.
pub fn sort_layer(f: &LayerFactors) -> LayerFactors {
    let mut order: Vec<usize> = (0..f.rank()).collect();
    order.sort_by(|&a, &b| f.sigma[b].abs().total_cmp(&f.sigma[a].abs()));
    let mut u = f.u.select_columns(&order);
    let v = f.v.select_columns(&order);
    let sigma = order
        .iter()
        .enumerate()
        .map(|(j, &src)| {
            let s = f.sigma[src];
            if s < 0.0 {
                for i in 0..u.rows() {
                    u.set(i, j, -u.get(i, j));
                }
            }
            s.abs()
        })
        .collect();
    LayerFactors { u, sigma, v }
}

pub fn sort_by_magnitude(f: &TaskFactors) -> TaskFactors {
    TaskFactors {
        task: f.task,
        layers: f.layers.iter().map(sort_layer).collect(),
    }
}

/// Number of leading singular values to keep. `sigma` must be sorted
/// descending and non-negative.
pub fn energy_topk(sigma: &[f32], cfg: &PruneConfig) -> usize {
    let r = sigma.len();
    if r == 0 {
        return 0;
    }
    let sq: Vec<f64> = sigma.iter().map(|&s| (s as f64) * (s as f64)).collect();
    let total: f64 = sq.iter().sum();
    if total == 0.0 {
        return cfg.min_rank.min(r);
    }
    let topk = match cfg.criterion {
        PruneCriterion::TotalEnergy => {
            let mut topk = 0;
            let mut current = 0.0f64;
            while current / total < 1.0 - cfg.energy_e && topk < r {
                current += sq[topk];
                topk += 1;
            }
            topk
        }
        PruneCriterion::TailVsRetained => {
            let mut retained = 0.0f64;
            let mut k = r;
            for (i, s) in sq.iter().enumerate() {
                retained += s;
                let tail: f64 = sq[i + 1..].iter().sum();
                if tail <= cfg.energy_e * retained {
                    k = i + 1;
                    break;
                }
            }
            k
        }
    };
    topk.max(cfg.min_rank).min(r)
}

/// Keeps the leading `topk` columns of every (already sorted) layer.
pub fn energy_prune(sorted: &TaskFactors, cfg: &PruneConfig) -> Result<TaskFactors> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(sorted.layers.len());
    for (l, f) in sorted.layers.iter().enumerate() {
        if f.sigma.iter().any(|&s| s < 0.0 || !s.is_finite())
            || f.sigma.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::argument(format!(
                "layer {l}: σ must be sorted descending and non-negative before pruning"
            )));
        }
        let k = energy_topk(&f.sigma, cfg);
        layers.push(truncate_layer(f, k));
    }
    Ok(TaskFactors {
        task: sorted.task,
        layers,
    })
}

pub(crate) fn truncate_layer(f: &LayerFactors, k: usize) -> LayerFactors {
    LayerFactors {
        u: f.u.leading_columns(k),
        sigma: f.sigma[..k].to_vec(),
        v: f.v.leading_columns(k),
    }
}

/// Sort, then prune by singular-value energy.
pub fn compress(f: &TaskFactors, cfg: &PruneConfig) -> Result<TaskFactors> {
    energy_prune(&sort_by_magnitude(f), cfg)
}

/// Per-layer diagnostics of one compression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCompression {
    pub layer: usize,
    pub original_rank: usize,
    pub retained_rank: usize,
    /// `‖W − W_k‖_F²` measured on the dense reconstructions.
    pub error_sq: f64,
    /// `Σ_{i>k} σᵢ²` of the sorted factors.
    pub tail_energy: f64,
    pub total_energy: f64,
    pub gram_deviation_u: f32,
    pub gram_deviation_v: f32,
}

/// Compresses and reports, per layer, the measured reconstruction error next
/// to the tail energy it should match when `U`, `V` are orthonormal.
pub fn compress_with_report(
    f: &TaskFactors,
    cfg: &PruneConfig,
) -> Result<(TaskFactors, Vec<LayerCompression>)> {
    let sorted = sort_by_magnitude(f);
    let pruned = energy_prune(&sorted, cfg)?;
    let report = sorted
        .layers
        .iter()
        .zip(&pruned.layers)
        .enumerate()
        .map(|(l, (full, kept))| {
            let dense = full.reconstruct();
            let approx = kept.reconstruct();
            let error_sq = dense
                .data()
                .iter()
                .zip(approx.data())
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            let sq = |s: &[f32]| s.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
            LayerCompression {
                layer: l,
                original_rank: full.rank(),
                retained_rank: kept.rank(),
                error_sq,
                tail_energy: sq(&full.sigma[kept.rank()..]),
                total_energy: sq(&full.sigma),
                gram_deviation_u: gram_deviation(&full.u),
                gram_deviation_v: gram_deviation(&full.v),
            }
        })
        .collect();
    Ok((pruned, report))
}
