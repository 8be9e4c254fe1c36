use super::kernels::{self, Dense, View};
use super::{Graph, NodeId, Op};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per trainable leaf: `max_i |analytic_i − numeric_i| / max(‖numeric‖_∞, ‖analytic‖_∞)`.
    pub per_parameter: Vec<(NodeId, f64)>,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

/// Checks `g.backward(loss)` entry by entry against central finite
/// differences. The graph is replayed in 64-bit for every perturbation so
/// the numeric side is not limited by 32-bit rounding.
pub fn grad_check(g: &Graph, loss: NodeId, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = g.backward(loss)?;
    if !(step > 0.0) {
        return Err(Error::argument("finite-difference step must be positive"));
    }
    let base: Vec<Option<Dense<f64>>> = (0..=loss.0)
        .map(|i| match g.nodes[i].op {
            Op::Leaf { .. } => {
                let m = &g.nodes[i].value;
                Some(Dense {
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.data().iter().map(|&x| x as f64).collect(),
                })
            }
            _ => None,
        })
        .collect();

    let mut per_parameter = Vec::new();
    let mut max_deviation = 0.0f64;
    for (id, grad) in analytic.iter() {
        let len = grad.len();
        let mut numeric = vec![0.0f64; len];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let f_plus = replay(g, loss, &base, id, e, step)?;
            let f_minus = replay(g, loss, &base, id, e, -step)?;
            *slot = (f_plus - f_minus) / (2.0 * step);
        }
        let scale = numeric
            .iter()
            .map(|x| x.abs())
            .chain(grad.data().iter().map(|&x| (x as f64).abs()))
            .fold(0.0f64, f64::max);
        let worst = numeric
            .iter()
            .zip(grad.data())
            .map(|(n, &a)| (n - a as f64).abs())
            .fold(0.0f64, f64::max);
        let dev = if scale > 0.0 { worst / scale } else { 0.0 };
        max_deviation = max_deviation.max(dev);
        per_parameter.push((id, dev));
    }
    Ok(GradCheckReport {
        per_parameter,
        max_deviation,
        tolerance,
    })
}

fn replay(
    g: &Graph,
    loss: NodeId,
    base: &[Option<Dense<f64>>],
    leaf: NodeId,
    entry: usize,
    delta: f64,
) -> Result<f64> {
    let mut values: Vec<Dense<f64>> = Vec::with_capacity(loss.0 + 1);
    for i in 0..=loss.0 {
        let v = match &g.nodes[i].op {
            Op::Leaf { .. } => {
                let mut v = base[i].clone().expect("leaf value");
                if i == leaf.0 {
                    v.data[entry] += delta;
                }
                v
            }
            op => {
                let inputs: Vec<View<'_, f64>> =
                    op.inputs().iter().map(|&j| values[j.0].view()).collect();
                kernels::forward(op, &inputs)?
            }
        };
        values.push(v);
    }
    Ok(values[loss.0].data[0])
}
