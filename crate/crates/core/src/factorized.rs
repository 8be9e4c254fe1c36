//! SVD-parameterized convolutional network with an additive shared space.
//!
//! Every conv layer's reshaped weight `W ∈ R^{c × nhw}` is the sum of a
//! frozen part read from [`SharedSpace`] and a trainable residual
//! `U diag(σ) Vᵀ` owned by the current task. After a task is compressed its
//! factors are appended to the shared space and the cumulative per-layer
//! widths are recorded as that task's identifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SvdFactors};

/// Dimensions of one conv weight `(c, n, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl LayerShape {
    pub fn new(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w }
    }

    /// Rows of the reshaped weight.
    pub fn m(&self) -> usize {
        self.c
    }

    /// Columns of the reshaped weight, `n·h·w`.
    pub fn q(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn dense_params(&self) -> usize {
        self.m() * self.q()
    }

    /// Parameters of a rank-`r` factorization: `c·r + nhw·r + r`.
    pub fn factorized_params(&self, r: usize) -> usize {
        (self.m() + self.q() + 1) * r
    }

    /// Width that makes the factorized layer no larger than the dense one:
    /// `floor(c·nhw / (c + nhw + 1))`, at least 1.
    pub fn expansion_rank(&self) -> usize {
        (self.dense_params() / (self.m() + self.q() + 1)).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub shape: LayerShape,
    pub stride: usize,
    pub padding: usize,
}

/// Conv stack (each layer followed by relu) plus per-task linear heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<ConvLayer>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config(
                "network needs at least one conv layer".into(),
            ));
        }
        let mut channels = self.input_channels;
        for (l, layer) in self.layers.iter().enumerate() {
            let s = layer.shape;
            if s.c == 0 || s.n == 0 || s.h == 0 || s.w == 0 {
                return Err(Error::Config(format!("layer {l} has a zero dimension")));
            }
            if s.n != channels {
                return Err(Error::Config(format!(
                    "layer {l} expects {} input channels, previous layer gives {channels}",
                    s.n
                )));
            }
            channels = s.c;
        }
        let geoms = self.geometries();
        for (l, (g, layer)) in geoms.iter().zip(&self.layers).enumerate() {
            g.check(layer.shape.m(), layer.shape.q(), g.input_len())
                .map_err(|e| Error::Config(format!("layer {l}: {e}")))?;
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(|l| l.shape).collect()
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }

    /// Per-layer convolution geometry, threading spatial sizes through.
    pub fn geometries(&self) -> Vec<ConvGeometry> {
        let (mut ch, mut h, mut w) = (self.input_channels, self.input_height, self.input_width);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let g = ConvGeometry {
                in_channels: ch,
                height: h,
                width: w,
                kernel_h: layer.shape.h,
                kernel_w: layer.shape.w,
                stride: layer.stride.max(1),
                padding: layer.padding,
            };
            if h + 2 * layer.padding >= layer.shape.h && w + 2 * layer.padding >= layer.shape.w {
                let (oh, ow) = g.output_hw();
                h = oh;
                w = ow;
            }
            ch = layer.shape.c;
            out.push(g);
        }
        out
    }

    pub fn head_input_dim(&self) -> usize {
        let geoms = self.geometries();
        let last = geoms.last().expect("validated network has layers");
        let (oh, ow) = last.output_hw();
        self.layers.last().unwrap().shape.c * oh * ow
    }
}

/// Factors `U (c×r)`, `σ (r)`, `V (q×r)` of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFactors {
    pub u: Matrix,
    pub sigma: Vec<f32>,
    pub v: Matrix,
}

impl LayerFactors {
    pub fn empty(shape: LayerShape) -> Self {
        Self {
            u: Matrix::zeros(shape.m(), 0),
            sigma: Vec::new(),
            v: Matrix::zeros(shape.q(), 0),
        }
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn check_shape(&self, shape: LayerShape) -> Result<()> {
        let r = self.rank();
        if self.u.shape() != (shape.m(), r) || self.v.shape() != (shape.q(), r) {
            return Err(Error::shape(format!(
                "factors U {:?}, V {:?}, rank {r} do not fit layer {shape:?}",
                self.u.shape(),
                self.v.shape()
            )));
        }
        Ok(())
    }

    /// `Σ_{i<k} σ_i u_i v_iᵀ`.
    pub fn reconstruct_prefix(&self, k: usize) -> Matrix {
        linalg::svd_outer_sum(&self.u, &self.sigma, &self.v, k)
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_prefix(self.rank())
    }

    pub fn to_svd(&self) -> SvdFactors {
        SvdFactors {
            u: self.u.clone(),
            sigma: self.sigma.clone(),
            v: self.v.clone(),
        }
    }

    /// Appends `other`'s columns after this one's.
    pub fn concat(&self, other: &LayerFactors) -> Result<LayerFactors> {
        let mut sigma = self.sigma.clone();
        sigma.extend_from_slice(&other.sigma);
        Ok(LayerFactors {
            u: self.u.hconcat(&other.u)?,
            sigma,
            v: self.v.hconcat(&other.v)?,
        })
    }
}

/// One task's residual factors for every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFactors {
    pub task: usize,
    pub layers: Vec<LayerFactors>,
}

impl TaskFactors {
    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(LayerFactors::rank).collect()
    }
}

/// Per-task linear classifier on the flattened conv features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    /// `head_input_dim × classes`.
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl TaskHead {
    pub fn new(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::shape(format!(
                "head bias length {} vs {} classes",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Self { weight, bias })
    }

    /// Uniform in `±1/sqrt(d)`.
    pub fn random(input_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (input_dim as f32).sqrt();
        let weight = (0..input_dim * classes)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = (0..classes).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Matrix::new(input_dim, classes, weight).expect("sized"),
            bias,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bias_matrix(&self) -> Matrix {
        Matrix::new(1, self.bias.len(), self.bias.clone()).expect("sized")
    }
}

/// Frozen concatenation of every compressed task plus the task identifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedSpace {
    shapes: Vec<LayerShape>,
    layers: Vec<LayerFactors>,
    /// `rank_table[l][t]` = cumulative width of layer `l` after task `t+1`.
    rank_table: Vec<Vec<u32>>,
    heads: Vec<TaskHead>,
}

impl SharedSpace {
    pub fn new(shapes: Vec<LayerShape>) -> Self {
        let layers = shapes.iter().map(|&s| LayerFactors::empty(s)).collect();
        let rank_table = vec![Vec::new(); shapes.len()];
        Self {
            shapes,
            layers,
            rank_table,
            heads: Vec::new(),
        }
    }

    /// Rebuilds a space from stored parts, checking every invariant.
    pub fn from_parts(
        shapes: Vec<LayerShape>,
        layers: Vec<LayerFactors>,
        rank_table: Vec<Vec<u32>>,
        heads: Vec<TaskHead>,
    ) -> Result<Self> {
        if layers.len() != shapes.len() || rank_table.len() != shapes.len() {
            return Err(Error::shape("layer count mismatch in shared space"));
        }
        let tasks = heads.len();
        for (l, ((shape, f), row)) in shapes.iter().zip(&layers).zip(&rank_table).enumerate() {
            f.check_shape(*shape)?;
            if row.len() != tasks {
                return Err(Error::shape(format!(
                    "rank table row {l} has {} entries for {tasks} tasks",
                    row.len()
                )));
            }
            if row.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::shape(format!("rank table row {l} decreases")));
            }
            let width = row.last().copied().unwrap_or(0) as usize;
            if width != f.rank() {
                return Err(Error::shape(format!(
                    "layer {l} stores {} columns, rank table says {width}",
                    f.rank()
                )));
            }
        }
        Ok(Self {
            shapes,
            layers,
            rank_table,
            heads,
        })
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn layers(&self) -> &[LayerFactors] {
        &self.layers
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn rank_table(&self) -> &[Vec<u32>] {
        &self.rank_table
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    /// Cumulative widths `R_{l,t}` for every layer; `t = 0` gives zeros.
    pub fn ranks_at(&self, t: usize) -> Result<Vec<usize>> {
        if t > self.num_tasks() {
            return Err(Error::argument(format!(
                "task {t} not in 0..={}",
                self.num_tasks()
            )));
        }
        Ok(self
            .rank_table
            .iter()
            .map(|row| if t == 0 { 0 } else { row[t - 1] as usize })
            .collect())
    }

    /// Per-layer ranks appended by task `t` (1-based).
    pub fn appended_ranks(&self, t: usize) -> Result<Vec<usize>> {
        if t == 0 {
            return Err(Error::argument("tasks are numbered from 1"));
        }
        let hi = self.ranks_at(t)?;
        let lo = self.ranks_at(t - 1)?;
        Ok(hi.iter().zip(&lo).map(|(a, b)| a - b).collect())
    }

    /// Dense reconstruction of the first `upto` tasks' factors per layer.
    pub fn prefix_weights(&self, upto: usize) -> Result<Vec<Matrix>> {
        let ranks = self.ranks_at(upto)?;
        Ok(self
            .layers
            .iter()
            .zip(ranks)
            .map(|(f, k)| f.reconstruct_prefix(k))
            .collect())
    }

    /// Weights and head that task `t` (1-based) was evaluated with.
    pub fn extract_subnetwork(&self, t: usize) -> Result<Subnetwork> {
        if t == 0 || t > self.num_tasks() {
            return Err(Error::argument(format!(
                "task {t} not in 1..={}",
                self.num_tasks()
            )));
        }
        Ok(Subnetwork {
            weights: self.prefix_weights(t)?,
            head: self.heads[t - 1].clone(),
        })
    }

    /// New space with `pruned`'s columns appended after the existing ones.
    pub fn append(&self, pruned: &TaskFactors, head: TaskHead) -> Result<SharedSpace> {
        if pruned.layers.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} factor layers for a {}-layer space",
                pruned.layers.len(),
                self.layers.len()
            )));
        }
        if let Some(first) = self.heads.first() {
            if head.input_dim() != first.input_dim() {
                return Err(Error::shape("task head input dimension mismatch"));
            }
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut rank_table = self.rank_table.clone();
        for (l, (f, add)) in self.layers.iter().zip(&pruned.layers).enumerate() {
            add.check_shape(self.shapes[l])?;
            let merged = f.concat(add)?;
            rank_table[l].push(merged.rank() as u32);
            layers.push(merged);
        }
        let mut heads = self.heads.clone();
        heads.push(head);
        Ok(SharedSpace {
            shapes: self.shapes.clone(),
            layers,
            rank_table,
            heads,
        })
    }

    /// Stored conv parameters `Σ_l (c + nhw + 1)·R_l`.
    pub fn factor_param_count(&self) -> usize {
        self.shapes
            .iter()
            .zip(&self.layers)
            .map(|(s, f)| s.factorized_params(f.rank()))
            .sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.heads.iter().map(TaskHead::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.factor_param_count() + self.head_param_count()
    }

    /// 4 bytes per stored 32-bit parameter.
    pub fn size_bytes(&self) -> usize {
        4 * self.param_count()
    }
}

/// Dense per-layer weights and the head of one task, ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnetwork {
    pub weights: Vec<Matrix>,
    pub head: TaskHead,
}

impl Subnetwork {
    /// Eval-mode logits for a batch of flattened inputs (`B × n·H·W`).
    pub fn logits(&self, spec: &NetworkSpec, inputs: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let weights: Vec<NodeId> = self.weights.iter().map(|w| g.constant(w.clone())).collect();
        let hw = g.constant(self.head.weight.clone());
        let hb = g.constant(self.head.bias_matrix());
        let x = g.constant(inputs.clone());
        let out = network_logits(&mut g, spec, &weights, (hw, hb), x, None)?;
        Ok(g.value(out).clone())
    }
}

/// Fresh residual factors and head for task `t`, at the expansion width
/// of every layer.
pub fn expand(spec: &NetworkSpec, t: usize, classes: usize, seed: u64) -> (TaskFactors, TaskHead) {
    let ranks: Vec<usize> = spec
        .layers
        .iter()
        .map(|l| l.shape.expansion_rank())
        .collect();
    expand_with_ranks(spec, &ranks, t, classes, seed)
}

/// Like [`expand`] with explicit per-layer widths (zero allowed).
pub fn expand_with_ranks(
    spec: &NetworkSpec,
    ranks: &[usize],
    t: usize,
    classes: usize,
    seed: u64,
) -> (TaskFactors, TaskHead) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layers
        .iter()
        .zip(ranks)
        .map(|(layer, &r)| {
            let s = layer.shape;
            let u = linalg::random_orthonormal(s.m(), r.min(s.m()), rng.gen())
                .expect("width bounded by rows");
            let v = linalg::random_orthonormal(s.q(), r.min(s.q()), rng.gen())
                .expect("width bounded by rows");
            let r = u.cols().min(v.cols());
            let sigma = (0..r).map(|_| 0.1 - rng.gen_range(0.0f32..0.1)).collect();
            LayerFactors {
                u: u.leading_columns(r),
                sigma,
                v: v.leading_columns(r),
            }
        })
        .collect();
    let head = TaskHead::random(spec.head_input_dim(), classes, rng.gen());
    (TaskFactors { task: t, layers }, head)
}

/// `W_l = shared_{≤upto} + U_l diag(σ_l) V_lᵀ` for every layer.
pub fn compose_weights(
    shared: &SharedSpace,
    upto: usize,
    residual: &TaskFactors,
) -> Result<Vec<Matrix>> {
    if residual.layers.len() != shared.shapes().len() {
        return Err(Error::shape(
            "residual layer count does not match shared space",
        ));
    }
    let base = shared.prefix_weights(upto)?;
    base.iter()
        .zip(&residual.layers)
        .zip(shared.shapes())
        .map(|((b, f), s)| {
            f.check_shape(*s)?;
            b.add(&f.reconstruct())
        })
        .collect()
}

/// Graph nodes for one layer's trainable residual.
#[derive(Clone, Copy, Debug)]
pub struct FactorNodes {
    pub u: NodeId,
    pub sigma: NodeId,
    pub v: NodeId,
}

/// Records `shared + U diag(σ) Vᵀ` in the graph. `shared` is a frozen
/// constant; pass `None` when the shared space is empty.
pub fn compose_in_graph(
    g: &mut Graph,
    shared: Option<NodeId>,
    residual: FactorNodes,
) -> Result<NodeId> {
    let d = g.diag_embed(residual.sigma)?;
    let ud = g.mat_mul(residual.u, d)?;
    let vt = g.transpose(residual.v)?;
    let res = g.mat_mul(ud, vt)?;
    match shared {
        Some(s) => g.add(s, res),
        None => Ok(res),
    }
}

/// Per-layer dropout rates and the mask seed for one training step.
#[derive(Clone, Copy, Debug)]
pub struct DropoutPlan<'a> {
    pub rates: &'a [f32],
    pub seed: u64,
}

/// Conv stack with relu (and dropout after each activation when a plan is
/// given) followed by the task head.
pub fn network_logits(
    g: &mut Graph,
    spec: &NetworkSpec,
    weights: &[NodeId],
    head: (NodeId, NodeId),
    input: NodeId,
    dropout: Option<DropoutPlan<'_>>,
) -> Result<NodeId> {
    if weights.len() != spec.layers.len() {
        return Err(Error::shape(format!(
            "{} weights for {} layers",
            weights.len(),
            spec.layers.len()
        )));
    }
    let mut x = input;
    for (l, (w, geom)) in weights.iter().zip(spec.geometries()).enumerate() {
        x = g.conv2d(*w, x, geom)?;
        x = g.relu(x)?;
        if let Some(plan) = dropout {
            let rate = plan.rates.get(l).copied().unwrap_or(0.0);
            if rate > 0.0 {
                x = g.dropout(x, rate, plan.seed.wrapping_add(l as u64), true)?;
            }
        }
    }
    g.linear(x, head.0, head.1)
}
