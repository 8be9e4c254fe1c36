//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Leaves are either trainable
//! parameters or frozen constants; every other node records its op and
//! inputs together with the forward value computed at insertion time.
//! [`Graph::backward`] walks the list in reverse and returns gradients for
//! the trainable leaves only.

mod gradcheck;
pub(crate) mod kernels;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use kernels::View;

pub use gradcheck::{grad_check, GradCheckReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial layout of a 2-D convolution whose weight is a `c × (n·kh·kw)`
/// matrix and whose input rows are flattened `(n, H, W)` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1;
        let ow = (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1;
        (oh, ow)
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub(crate) fn check(&self, w_rows: usize, w_cols: usize, x_cols: usize) -> Result<()> {
        if self.stride == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.height + 2 * self.padding < self.kernel_h
            || self.width + 2 * self.padding < self.kernel_w
        {
            return Err(Error::shape(format!("invalid conv geometry {self:?}")));
        }
        if w_cols != self.patch_len() || x_cols != self.input_len() || w_rows == 0 {
            return Err(Error::shape(format!(
                "conv2d weight {w_rows}x{w_cols} / input width {x_cols} do not match {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Scale,
    Transpose,
    DiagEmbed,
    Relu,
    Conv2d,
    Linear,
    SoftmaxCrossEntropy,
    Frobenius,
    L1,
    L2,
    Div,
    Dropout,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf {
        trainable: bool,
    },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f32),
    Transpose(NodeId),
    DiagEmbed(NodeId),
    Relu(NodeId),
    Conv2d {
        weight: NodeId,
        input: NodeId,
        geom: ConvGeometry,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    Frobenius(NodeId),
    L1(NodeId),
    L2(NodeId),
    Div(NodeId, NodeId),
    Dropout {
        input: NodeId,
        mask: Vec<f32>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::DiagEmbed(a)
            | Op::Relu(a)
            | Op::Frobenius(a)
            | Op::L1(a)
            | Op::L2(a) => vec![*a],
            Op::Conv2d { weight, input, .. } => vec![*weight, *input],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Dropout { input, .. } => vec![*input],
        }
    }

    pub(crate) fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf { .. } => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Transpose(_) => OpKind::Transpose,
            Op::DiagEmbed(_) => OpKind::DiagEmbed,
            Op::Relu(_) => OpKind::Relu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Frobenius(_) => OpKind::Frobenius,
            Op::L1(_) => OpKind::L1,
            Op::L2(_) => OpKind::L2,
            Op::Div(..) => OpKind::Div,
            Op::Dropout { .. } => OpKind::Dropout,
        })
    }
}

struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to trainable leaves.
#[derive(Clone, Debug, Default)]
pub struct GradientSet {
    grads: BTreeMap<NodeId, Matrix>,
}

impl GradientSet {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.remove(&id)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    disabled_backward: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Frozen leaf: participates in the forward pass, never receives a
    /// gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf { trainable },
            value,
            requires_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }

    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .map(NodeId)
            .filter(|&id| self.is_trainable(id))
            .collect()
    }

    /// Every relu input node, for callers that want to keep gradient
    /// checks away from the kink.
    pub fn relu_inputs(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .collect()
    }

    /// Replaces one op kind's backward rule with zeros. Only useful as a
    /// negative control for [`grad_check`].
    pub fn disable_backward(&mut self, kind: OpKind) {
        self.disabled_backward = Some(kind);
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::argument(format!("unknown node {}", id.0)));
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let inputs = op.inputs();
        for &i in &inputs {
            self.check_id(i)?;
        }
        let views: Vec<View<'_, f32>> = inputs
            .iter()
            .map(|&i| {
                let m = &self.nodes[i.0].value;
                View {
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.data(),
                }
            })
            .collect();
        let out = kernels::forward(&op, &views)?;
        let value = Matrix::new(out.rows, out.cols, out.data)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn mat_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> Result<NodeId> {
        self.push(Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    /// Vector (either orientation) to square diagonal matrix.
    pub fn diag_embed(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::DiagEmbed(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    /// Convolution of a batch (`B × n·H·W`) by a `c × n·kh·kw` weight,
    /// giving `B × c·H'·W'`.
    pub fn conv2d(&mut self, weight: NodeId, input: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        self.push(Op::Conv2d {
            weight,
            input,
            geom,
        })
    }

    /// `features · weight + bias` with weight `d × k` and bias `1 × k`.
    pub fn linear(&mut self, features: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::Linear {
            input: features,
            weight,
            bias,
        })
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check_id(logits)?;
        let (rows, cols) = self.nodes[logits.0].value.shape();
        if labels.len() != rows || rows == 0 {
            return Err(Error::shape(format!(
                "{} labels for {rows} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    pub fn frobenius_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Frobenius(a))
    }

    pub fn l1_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L1(a))
    }

    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L2(a))
    }

    /// Scalar quotient `a / b`.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1 − rate)` during
    /// training, identity otherwise.
    pub fn dropout(&mut self, a: NodeId, rate: f32, seed: u64, train: bool) -> Result<NodeId> {
        self.check_id(a)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::argument(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        let len = self.nodes[a.0].value.len();
        let mask = if train && rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 / (1.0 - rate);
            (0..len)
                .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; len]
        };
        self.push(Op::Dropout { input: a, mask })
    }

    /// Gradients of the scalar `loss` for every trainable leaf it depends on.
    pub fn backward(&self, loss: NodeId) -> Result<GradientSet> {
        self.check_id(loss)?;
        if self.nodes[loss.0].value.len() != 1 {
            let (r, c) = self.nodes[loss.0].value.shape();
            return Err(Error::argument(format!("loss must be scalar, got {r}x{c}")));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));
        let mut grads = GradientSet::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { trainable } = node.op {
                if trainable {
                    grads.grads.insert(NodeId(idx), g);
                }
                continue;
            }
            let zeroed = node.op.kind() == self.disabled_backward;
            for (input, contribution) in self.local_grads(&node.op, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let contribution = if zeroed {
                    Matrix::zeros(contribution.rows(), contribution.cols())
                } else {
                    contribution
                };
                accumulate(&mut adj[input.0], contribution);
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of one op for each of its inputs that needs
    /// a gradient.
    fn local_grads(&self, op: &Op, g: &Matrix) -> Result<Vec<(NodeId, Matrix)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    out.push((*a, crate::linalg::matmul(g, &val(*b).transpose())?));
                }
                if needs(*b) {
                    out.push((*b, crate::linalg::matmul(&val(*a).transpose(), g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Scale(a, s) => out.push((*a, g.map(|x| x * s))),
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::DiagEmbed(a) => {
                let (r, c) = val(*a).shape();
                let n = r * c;
                let diag: Vec<f32> = (0..n).map(|i| g.get(i, i)).collect();
                out.push((*a, Matrix::new(r, c, diag)?));
            }
            Op::Relu(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                out.push((*a, Matrix::new(x.rows(), x.cols(), data)?));
            }
            Op::Conv2d {
                weight,
                input,
                geom,
            } => {
                let w = val(*weight);
                let x = val(*input);
                let (oh, ow) = geom.output_hw();
                let p = oh * ow;
                let k = geom.patch_len();
                let c = w.rows();
                let mut dw = vec![0.0f32; c * k];
                let mut dx = if needs(*input) {
                    Some(vec![0.0f32; x.len()])
                } else {
                    None
                };
                let mut cols = vec![0.0f32; k * p];
                let wt = w.transpose();
                let mut dcols = vec![0.0f32; k * p];
                for b in 0..x.rows() {
                    let g_b = View {
                        rows: c,
                        cols: p,
                        data: &g.data()[b * c * p..(b + 1) * c * p],
                    };
                    if needs(*weight) {
                        kernels::im2col(x.row(b), geom, &mut cols);
                        let cols_t = kernels::transpose(View {
                            rows: k,
                            cols: p,
                            data: &cols,
                        });
                        kernels::gemm_acc(g_b, cols_t.view(), &mut dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|d| *d = 0.0);
                        let wt_view = View {
                            rows: k,
                            cols: c,
                            data: wt.data(),
                        };
                        kernels::gemm_acc(wt_view, g_b, &mut dcols);
                        let n_in = geom.input_len();
                        kernels::col2im(&dcols, geom, &mut dx[b * n_in..(b + 1) * n_in]);
                    }
                }
                if needs(*weight) {
                    out.push((*weight, Matrix::new(c, k, dw)?));
                }
                if let Some(dx) = dx {
                    out.push((*input, Matrix::new(x.rows(), x.cols(), dx)?));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                if needs(*input) {
                    out.push((*input, crate::linalg::matmul(g, &val(*weight).transpose())?));
                }
                if needs(*weight) {
                    out.push((*weight, crate::linalg::matmul(&val(*input).transpose(), g)?));
                }
                if needs(*bias) {
                    let k = g.cols();
                    let mut db = vec![0.0f32; k];
                    for r in 0..g.rows() {
                        for (d, &x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    let (br, bc) = val(*bias).shape();
                    out.push((*bias, Matrix::new(br, bc, db)?));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let z = val(*logits);
                let mut probs = kernels::softmax_rows(View {
                    rows: z.rows(),
                    cols: z.cols(),
                    data: z.data(),
                });
                let k = z.cols();
                let scale = g.data()[0] / z.rows() as f32;
                for (i, &y) in labels.iter().enumerate() {
                    probs[i * k + y] -= 1.0;
                }
                probs.iter_mut().for_each(|p| *p *= scale);
                out.push((*logits, Matrix::new(z.rows(), k, probs)?));
            }
            Op::Frobenius(a) | Op::L2(a) => {
                let x = val(*a);
                let norm = x.frobenius_sq().sqrt() as f32;
                let gs = g.data()[0];
                let grad = if norm > 0.0 {
                    x.map(|v| gs * v / norm)
                } else {
                    Matrix::zeros(x.rows(), x.cols())
                };
                out.push((*a, grad));
            }
            Op::L1(a) => {
                let gs = g.data()[0];
                out.push((
                    *a,
                    val(*a).map(|v| {
                        if v > 0.0 {
                            gs
                        } else if v < 0.0 {
                            -gs
                        } else {
                            0.0
                        }
                    }),
                ));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a).data()[0], val(*b).data()[0]);
                let gs = g.data()[0];
                if needs(*a) {
                    out.push((*a, Matrix::scalar(gs / y)));
                }
                if needs(*b) {
                    out.push((*b, Matrix::scalar(-gs * x / (y * y))));
                }
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                out.push((*input, Matrix::new(g.rows(), g.cols(), data)?));
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Matrix>, contribution: Matrix) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(contribution.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
    }
}
