//! Per-task compression-aware training and the continual loop over a
//! task stream, including the ablation modes.

mod optim;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::compression::{self, PruneConfig, PruneCriterion};
use crate::error::{Error, Result};
use crate::factorized::{
    self, compose_in_graph, network_logits, DropoutPlan, FactorNodes, LayerFactors, NetworkSpec,
    SharedSpace, Subnetwork, TaskFactors, TaskHead,
};
use crate::harness::metrics::{compute_metrics, MetricsReport};
use crate::linalg::Matrix;
use crate::regularizers::{self, LossWeights};

pub use optim::{lr_schedule, AdamConfig, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Expansion, training, compression and append for every task.
    Full,
    /// Expansion only for the first task; later tasks fit in its width.
    Fixed,
    /// Independent factorized single-task models, nothing shared.
    St,
    /// Independent dense single-task models.
    BaselineUb,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Fixed => "fixed",
            Mode::St => "st",
            Mode::BaselineUb => "baseline_ub",
        }
    }

    pub fn plan(&self) -> ModePlan {
        match self {
            Mode::Full => ModePlan {
                factorized: true,
                shared: true,
                capped_width: false,
            },
            Mode::Fixed => ModePlan {
                factorized: true,
                shared: true,
                capped_width: true,
            },
            Mode::St => ModePlan {
                factorized: true,
                shared: false,
                capped_width: false,
            },
            Mode::BaselineUb => ModePlan {
                factorized: false,
                shared: false,
                capped_width: false,
            },
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "fixed" => Ok(Mode::Fixed),
            "st" => Ok(Mode::St),
            "baseline_ub" => Ok(Mode::BaselineUb),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected full, fixed, st or baseline_ub)"
            ))),
        }
    }
}

/// What a mode switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModePlan {
    pub factorized: bool,
    /// Later tasks build on the frozen factors of earlier ones.
    pub shared: bool,
    /// Total stored width per layer is capped at the first task's expansion.
    pub capped_width: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f32,
    pub lambda_orth: f32,
    pub lambda_sparse: f32,
    pub energy_e: f64,
    pub prune_criterion: PruneCriterion,
    pub mode: Mode,
    pub seed: u64,
    /// Dropout after each conv layer's activation; missing entries mean 0.
    pub dropout: Vec<f32>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            base_lr: 1e-3,
            lr_drop_epochs: vec![80, 120, 180],
            lr_drop_factor: 10.0,
            lambda_orth: 1.0,
            lambda_sparse: 0.1,
            energy_e: 1e-5,
            prune_criterion: PruneCriterion::TotalEnergy,
            mode: Mode::Full,
            seed: 0,
            dropout: Vec::new(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(Error::Config(
                "learning rate and drop factor must be positive".into(),
            ));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "lr_drop_epochs must be strictly increasing".into(),
            ));
        }
        if self
            .lr_drop_epochs
            .last()
            .is_some_and(|&e| e >= self.epochs)
        {
            return Err(Error::Config("lr_drop_epochs must lie below epochs".into()));
        }
        if self.dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        self.loss_weights().validate()?;
        self.prune_config().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_orth: self.lambda_orth,
            lambda_sparse: self.lambda_sparse,
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            energy_e: self.energy_e,
            min_rank: 1,
            criterion: self.prune_criterion,
        }
    }

    pub fn lr(&self, epoch: usize) -> f32 {
        lr_schedule(
            epoch,
            self.base_lr,
            &self.lr_drop_epochs,
            self.lr_drop_factor,
        )
    }
}

/// Flattened inputs (`N × n·H·W`) with integer labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        (
            Matrix::new(idx.len(), d, data).expect("sized"),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Train and test split of one task, labels in `0..classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub classes: usize,
    pub train: Samples,
    pub test: Samples,
}

impl TaskDataset {
    pub fn validate(&self, input_len: usize) -> Result<()> {
        for (name, s) in [("train", &self.train), ("test", &self.test)] {
            if s.inputs.rows() != s.labels.len() {
                return Err(Error::Data(format!(
                    "{name}: {} inputs for {} labels",
                    s.inputs.rows(),
                    s.labels.len()
                )));
            }
            if s.inputs.cols() != input_len {
                return Err(Error::Data(format!(
                    "{name}: inputs have {} features, network expects {input_len}",
                    s.inputs.cols()
                )));
            }
            if let Some(&y) = s.labels.iter().find(|&&y| y >= self.classes) {
                return Err(Error::Data(format!(
                    "{name}: label {y} outside 0..{}",
                    self.classes
                )));
            }
        }
        if self.train.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss of one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub epoch_loss: Vec<f32>,
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the per-layer conv weights from the parameter leaves; returns
/// the weights and any factor leaves the regularizers should see.
type WeightBuilder<'a> =
    dyn Fn(&mut Graph, &[NodeId]) -> Result<(Vec<NodeId>, Vec<FactorNodes>)> + 'a;

/// Shared minibatch loop. The last two entries of `params` are the head
/// weight and bias.
fn fit(
    data: &TaskDataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    task: usize,
    seed: u64,
    params: &mut [Matrix],
    build: &WeightBuilder<'_>,
) -> Result<TrainTrace> {
    let weights = cfg.loss_weights();
    let refs: Vec<&Matrix> = params.iter().collect();
    let mut opt = OptimizerState::new(cfg.adam, &refs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let mut trace = TrainTrace::default();
    let mut step = 0usize;
    let n_head = params.len() - 2;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.gather(batch);
            let mut g = Graph::new();
            let leaves: Vec<NodeId> = params.iter().map(|p| g.parameter(p.clone())).collect();
            let (conv_w, factor_nodes) = build(&mut g, &leaves[..n_head])?;
            let input = g.constant(x);
            let plan = DropoutPlan {
                rates: &cfg.dropout,
                seed: mix_seed(seed, 1000 + step as u64),
            };
            let logits = network_logits(
                &mut g,
                spec,
                &conv_w,
                (leaves[n_head], leaves[n_head + 1]),
                input,
                Some(plan),
            )?;
            let task_loss = g.softmax_cross_entropy(logits, &y)?;
            let orth = if weights.lambda_orth > 0.0 {
                regularizers::orth_in_graph(&mut g, &factor_nodes)?
            } else {
                None
            };
            let sparse = if weights.lambda_sparse > 0.0 {
                regularizers::sparse_in_graph(&mut g, &factor_nodes)?
            } else {
                None
            };
            let total = regularizers::total_in_graph(&mut g, task_loss, orth, sparse, &weights)?;
            let loss = g.scalar_value(total);
            if !loss.is_finite() {
                return Err(Error::Training {
                    task,
                    epoch,
                    step,
                    loss,
                });
            }
            // One backward pass routes exactly as the per-group split: the
            // orthogonality term reaches only U, V and the sparsity term only σ.
            let mut grads = g.backward(total)?;
            let grad_list: Vec<Matrix> = leaves
                .iter()
                .zip(params.iter())
                .map(|(&id, p)| {
                    grads
                        .take(id)
                        .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
                })
                .collect();
            let grad_refs: Vec<&Matrix> = grad_list.iter().collect();
            opt.update(params, &grad_refs, lr)?;
            loss_sum += loss as f64;
            batches += 1;
            step += 1;
        }
        trace.epoch_loss.push((loss_sum / batches as f64) as f32);
    }
    Ok(trace)
}

/// Trains one task's residual factors and head against a frozen shared
/// space (all of whose tasks are used as the frozen summand).
pub fn train_task(
    data: &TaskDataset,
    shared: &SharedSpace,
    fresh: TaskFactors,
    head: TaskHead,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TaskFactors, TaskHead, TrainTrace)> {
    data.validate(spec.input_len())?;
    if fresh.layers.len() != spec.layers.len() {
        return Err(Error::shape("residual factors do not match the network"));
    }
    for (f, layer) in fresh.layers.iter().zip(&spec.layers) {
        f.check_shape(layer.shape)?;
    }
    let shared_w = if shared.num_tasks() > 0 {
        Some(shared.prefix_weights(shared.num_tasks())?)
    } else {
        None
    };

    let mut params = Vec::with_capacity(3 * fresh.layers.len() + 2);
    for f in &fresh.layers {
        params.push(f.u.clone());
        params.push(Matrix::new(1, f.rank(), f.sigma.clone())?);
        params.push(f.v.clone());
    }
    params.push(head.weight.clone());
    params.push(head.bias_matrix());

    let build = |g: &mut Graph, leaves: &[NodeId]| -> Result<(Vec<NodeId>, Vec<FactorNodes>)> {
        let mut conv = Vec::with_capacity(leaves.len() / 3);
        let mut nodes = Vec::with_capacity(leaves.len() / 3);
        for (l, chunk) in leaves.chunks(3).enumerate() {
            let f = FactorNodes {
                u: chunk[0],
                sigma: chunk[1],
                v: chunk[2],
            };
            let frozen = shared_w.as_ref().map(|w| g.constant(w[l].clone()));
            conv.push(compose_in_graph(g, frozen, f)?);
            nodes.push(f);
        }
        Ok((conv, nodes))
    };
    let trace = fit(data, spec, cfg, fresh.task, seed, &mut params, &build)?;

    let bias = params.pop().expect("bias").into_data();
    let weight = params.pop().expect("head weight");
    let layers = params
        .chunks(3)
        .map(|c| LayerFactors {
            u: c[0].clone(),
            sigma: c[1].data().to_vec(),
            v: c[2].clone(),
        })
        .collect();
    Ok((
        TaskFactors {
            task: fresh.task,
            layers,
        },
        TaskHead::new(weight, bias)?,
        trace,
    ))
}

/// Dense single-task model used as the unfactorized reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTaskModel {
    pub weights: Vec<Matrix>,
    pub head: TaskHead,
}

impl DenseTaskModel {
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Matrix::len).sum::<usize>() + self.head.param_count()
    }
}

/// Trains an unfactorized network (no regularizers) for one task.
pub fn train_dense_task(
    data: &TaskDataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    task: usize,
    seed: u64,
) -> Result<(DenseTaskModel, TrainTrace)> {
    use rand::Rng;
    data.validate(spec.input_len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<Matrix> = spec
        .layers
        .iter()
        .map(|l| {
            let s = l.shape;
            let bound = 1.0 / (s.q() as f32).sqrt();
            let data = (0..s.dense_params())
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Matrix::new(s.m(), s.q(), data).expect("sized")
        })
        .collect();
    let head = TaskHead::random(spec.head_input_dim(), data.classes, rng.gen());
    let bias = head.bias_matrix();
    params.push(head.weight);
    params.push(bias);
    let build = |_: &mut Graph, leaves: &[NodeId]| Ok((leaves.to_vec(), Vec::new()));
    let trace = fit(data, spec, cfg, task, seed, &mut params, &build)?;
    let bias = params.pop().expect("bias").into_data();
    let weight = params.pop().expect("head weight");
    Ok((
        DenseTaskModel {
            weights: params,
            head: TaskHead::new(weight, bias)?,
        },
        trace,
    ))
}

/// Eval-mode logits of `samples` under one task's sub-network.
pub fn predict(sub: &Subnetwork, spec: &NetworkSpec, samples: &Samples) -> Result<Matrix> {
    sub.logits(spec, &samples.inputs)
}

/// Fraction of argmax predictions equal to the label (first index wins ties).
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate(sub: &Subnetwork, spec: &NetworkSpec, samples: &Samples) -> Result<f64> {
    Ok(accuracy(&predict(sub, spec, samples)?, &samples.labels))
}

/// Everything a finished (or in-progress) run has stored.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    /// One shared space holding every task (full and fixed modes).
    Shared(SharedSpace),
    /// One single-task space per task (st mode).
    PerTask(Vec<SharedSpace>),
    /// One dense model per task (baseline_ub mode).
    Dense(Vec<DenseTaskModel>),
}

impl TrainedModel {
    pub fn num_tasks(&self) -> usize {
        match self {
            TrainedModel::Shared(s) => s.num_tasks(),
            TrainedModel::PerTask(v) => v.len(),
            TrainedModel::Dense(v) => v.len(),
        }
    }

    /// Inference weights of task `t` (1-based).
    pub fn subnetwork(&self, t: usize) -> Result<Subnetwork> {
        if t == 0 || t > self.num_tasks() {
            return Err(Error::argument(format!(
                "task {t} not in 1..={}",
                self.num_tasks()
            )));
        }
        match self {
            TrainedModel::Shared(s) => s.extract_subnetwork(t),
            TrainedModel::PerTask(v) => v[t - 1].extract_subnetwork(1),
            TrainedModel::Dense(v) => Ok(Subnetwork {
                weights: v[t - 1].weights.clone(),
                head: v[t - 1].head.clone(),
            }),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TrainedModel::Shared(s) => s.param_count(),
            TrainedModel::PerTask(v) => v.iter().map(SharedSpace::param_count).sum(),
            TrainedModel::Dense(v) => v.iter().map(DenseTaskModel::param_count).sum(),
        }
    }

    pub fn size_bytes(&self) -> usize {
        4 * self.param_count()
    }

    pub fn shared(&self) -> Option<&SharedSpace> {
        match self {
            TrainedModel::Shared(s) => Some(s),
            _ => None,
        }
    }

    /// Rank appended per (layer, task); empty for dense models.
    pub fn rank_allocation(&self, layers: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); layers];
        for t in 1..=self.num_tasks() {
            let ranks = match self {
                TrainedModel::Shared(s) => s.appended_ranks(t)?,
                TrainedModel::PerTask(v) => v[t - 1].appended_ranks(1)?,
                TrainedModel::Dense(_) => return Ok(vec![Vec::new(); layers]),
            };
            for (row, r) in out.iter_mut().zip(ranks) {
                row.push(r);
            }
        }
        Ok(out)
    }
}

/// Snapshot handed to observers after each task is stored.
pub struct TaskEvent<'a> {
    /// 1-based task index.
    pub task: usize,
    pub model: &'a TrainedModel,
    /// Trained residual before compression (factorized modes).
    pub trained: Option<&'a TaskFactors>,
    pub compressed: Option<&'a TaskFactors>,
    pub accuracies: &'a [f64],
}

pub struct ContinualRun {
    pub model: TrainedModel,
    pub report: MetricsReport,
}

pub fn run_continual(
    stream: &[TaskDataset],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<ContinualRun> {
    run_continual_with(stream, spec, cfg, &mut |_| {})
}

/// Expand, train, compress and store each task in turn; after each task
/// every task seen so far is evaluated from the stored model.
pub fn run_continual_with(
    stream: &[TaskDataset],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&TaskEvent<'_>),
) -> Result<ContinualRun> {
    spec.validate()?;
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::argument("task stream is empty"));
    }
    let plan = cfg.mode.plan();
    let shapes = spec.shapes();
    let expansion: Vec<usize> = shapes.iter().map(|s| s.expansion_rank()).collect();
    let prune = cfg.prune_config();

    let mut model = match cfg.mode {
        Mode::Full | Mode::Fixed => TrainedModel::Shared(SharedSpace::new(shapes.clone())),
        Mode::St => TrainedModel::PerTask(Vec::new()),
        Mode::BaselineUb => TrainedModel::Dense(Vec::new()),
    };
    let mut acc_matrix: Vec<Vec<Option<f64>>> = Vec::with_capacity(stream.len());
    let mut sizes = Vec::with_capacity(stream.len());
    let mut clock = Vec::with_capacity(stream.len());

    for (idx, data) in stream.iter().enumerate() {
        let t = idx + 1;
        let started = Instant::now();
        let task_seed = mix_seed(cfg.seed, t as u64);
        let wrap = |e: Error| e.in_task(t);
        data.validate(spec.input_len()).map_err(wrap)?;

        let mut trained_factors = None;
        let mut compressed_factors = None;
        if plan.factorized {
            let empty = SharedSpace::new(shapes.clone());
            let frozen = match (&model, plan.shared) {
                (TrainedModel::Shared(s), true) => s,
                _ => &empty,
            };
            let (fresh, head) = if plan.capped_width {
                let used = frozen.ranks_at(frozen.num_tasks()).map_err(wrap)?;
                let widths: Vec<usize> = expansion
                    .iter()
                    .zip(&used)
                    .map(|(cap, u)| cap - u.min(cap))
                    .collect();
                factorized::expand_with_ranks(spec, &widths, t, data.classes, task_seed)
            } else {
                factorized::expand(spec, t, data.classes, task_seed)
            };
            let (trained, head, _) =
                train_task(data, frozen, fresh, head, spec, cfg, task_seed).map_err(wrap)?;
            let pruned = compression::compress(&trained, &prune).map_err(wrap)?;
            match &mut model {
                TrainedModel::Shared(s) => {
                    let next = s.append(&pruned, head).map_err(wrap)?;
                    if cfg.mode == Mode::Full {
                        for (l, (f, cap)) in next.layers().iter().zip(&expansion).enumerate() {
                            if f.rank() > *cap {
                                tracing::warn!(
                                    layer = l,
                                    stored = f.rank(),
                                    dense_break_even = cap,
                                    "factorized storage now exceeds the dense layer"
                                );
                            }
                        }
                    }
                    *s = next;
                }
                TrainedModel::PerTask(v) => {
                    v.push(empty.append(&pruned, head).map_err(wrap)?);
                }
                TrainedModel::Dense(_) => unreachable!("dense model in factorized mode"),
            }
            trained_factors = Some(trained);
            compressed_factors = Some(pruned);
        } else {
            let (dense, _) = train_dense_task(data, spec, cfg, t, task_seed).map_err(wrap)?;
            match &mut model {
                TrainedModel::Dense(v) => v.push(dense),
                _ => unreachable!("factorized model in dense mode"),
            }
        }

        let mut row = vec![None; stream.len()];
        let mut accs = Vec::with_capacity(t);
        for (i, task_data) in stream.iter().take(t).enumerate() {
            let sub = model.subnetwork(i + 1).map_err(wrap)?;
            let a = evaluate(&sub, spec, &task_data.test).map_err(wrap)?;
            row[i] = Some(a);
            accs.push(a);
        }
        acc_matrix.push(row);
        sizes.push(model.size_bytes());
        clock.push(started.elapsed().as_secs_f64());
        tracing::info!(task = t, mode = %cfg.mode, acc = accs[idx], size = model.size_bytes(), "task stored");
        observer(&TaskEvent {
            task: t,
            model: &model,
            trained: trained_factors.as_ref(),
            compressed: compressed_factors.as_ref(),
            accuracies: &accs,
        });
    }

    let mut report = compute_metrics(cfg.mode, cfg.seed, acc_matrix, sizes);
    report.rank_allocation = model.rank_allocation(shapes.len())?;
    report.wall_clock_secs = clock;
    report.config = serde_json::json!({ "train": cfg, "network": spec });
    Ok(ContinualRun { model, report })
}
