use serde::{Deserialize, Serialize};

use crate::trainer::Mode;

/// Outcome of one continual run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub seed: u64,
    /// Row `j`, column `i`: test accuracy on task `i` after training task `j`
    /// (0-based, populated for `i ≤ j`).
    pub acc_matrix: Vec<Vec<Option<f64>>>,
    pub acc: f64,
    pub bwt: f64,
    /// Model size in bytes after each task.
    pub size_bytes: Vec<usize>,
    pub final_size_bytes: usize,
    /// `final_size_bytes / 10⁶`.
    pub size_mb: f64,
    /// Row `l`, column `t`: rank appended to layer `l` by task `t`.
    pub rank_allocation: Vec<Vec<usize>>,
    pub wall_clock_secs: Vec<f64>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn num_tasks(&self) -> usize {
        self.acc_matrix.len()
    }

    /// Total rank appended by each task across layers.
    pub fn ranks_per_task(&self) -> Vec<usize> {
        let tasks = self.rank_allocation.first().map_or(0, Vec::len);
        (0..tasks)
            .map(|t| self.rank_allocation.iter().map(|row| row[t]).sum())
            .collect()
    }

    /// Copy without timing, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_clock_secs.iter_mut().for_each(|t| *t = 0.0);
        r
    }
}

/// Mean of the final row.
pub fn average_accuracy(acc_matrix: &[Vec<Option<f64>>]) -> f64 {
    let Some(last) = acc_matrix.last() else {
        return 0.0;
    };
    let vals: Vec<f64> = last.iter().flatten().copied().collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// `(1/(T−1)) Σ_{i<T} (R_{T,i} − R_{i,i})`; zero for a single task.
pub fn backward_transfer(acc_matrix: &[Vec<Option<f64>>]) -> f64 {
    let t = acc_matrix.len();
    if t < 2 {
        return 0.0;
    }
    let last = &acc_matrix[t - 1];
    let sum: f64 = (0..t - 1)
        .map(|i| last[i].unwrap_or(0.0) - acc_matrix[i][i].unwrap_or(0.0))
        .sum();
    sum / (t - 1) as f64
}

/// Fills ACC, BWT and sizes; the remaining fields are left for the caller.
pub fn compute_metrics(
    mode: Mode,
    seed: u64,
    acc_matrix: Vec<Vec<Option<f64>>>,
    size_bytes: Vec<usize>,
) -> MetricsReport {
    let final_size_bytes = size_bytes.last().copied().unwrap_or(0);
    MetricsReport {
        mode,
        seed,
        acc: average_accuracy(&acc_matrix),
        bwt: backward_transfer(&acc_matrix),
        acc_matrix,
        size_mb: final_size_bytes as f64 / 1e6,
        final_size_bytes,
        size_bytes,
        rank_allocation: Vec::new(),
        wall_clock_secs: Vec::new(),
        config: serde_json::Value::Null,
    }
}
