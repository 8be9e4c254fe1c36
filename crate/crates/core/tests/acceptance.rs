//! End-to-end acceptance checks. Runs every criterion, prints one line per
//! criterion and exits non-zero if any fails.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cacl::autodiff::{grad_check, ConvGeometry, Graph, NodeId};
use cacl::compression::{compress, energy_prune, energy_topk, PruneConfig};
use cacl::factorized::{
    compose_in_graph, expand, expand_with_ranks, network_logits, ConvLayer, DropoutPlan,
    FactorNodes, LayerFactors, LayerShape, NetworkSpec, SharedSpace, TaskFactors,
};
use cacl::harness::{decode_space, encode_space, generate_stream, TaskStreamSpec};
use cacl::linalg::{random_orthonormal, rank_k_approx, svd, Matrix, SvdFactors};
use cacl::regularizers::{self, LossWeights};
use cacl::trainer::{
    evaluate, run_continual, run_continual_with, train_task, ContinualRun, Mode, TrainConfig,
};
use cacl::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- setup

/// Desk-scale network: 2×8×8 input, two strided 3×3 conv layers, 64-d head.
fn network() -> NetworkSpec {
    NetworkSpec {
        input_channels: 2,
        input_height: 8,
        input_width: 8,
        layers: vec![
            ConvLayer {
                shape: LayerShape::new(16, 2, 3, 3),
                stride: 2,
                padding: 1,
            },
            ConvLayer {
                shape: LayerShape::new(16, 16, 3, 3),
                stride: 2,
                padding: 1,
            },
        ],
    }
}

fn train_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 32,
        base_lr: 3e-3,
        lr_drop_epochs: vec![40, 60, 90],
        lambda_orth: 1.0,
        lambda_sparse: 0.1,
        energy_e: 1e-5,
        mode,
        seed,
        ..TrainConfig::default()
    }
}

/// Five 2-class tasks, 200 samples per class.
fn five_task_stream(seed: u64) -> Vec<cacl::trainer::TaskDataset> {
    generate_stream(&TaskStreamSpec {
        tasks: 5,
        classes_per_task: 2,
        samples_per_class: 200,
        noise: 2.0,
        seed,
        ..TaskStreamSpec::default()
    })
    .unwrap()
}

const SEEDS: [u64; 3] = [0, 1, 2];
const MODES: [Mode; 4] = [Mode::Full, Mode::Fixed, Mode::St, Mode::BaselineUb];

struct StreamRun {
    mode: Mode,
    seed: u64,
    run: ContinualRun,
    secs: f64,
}

/// Every mode on the five-task stream for every seed, computed once.
fn stream_runs() -> &'static [StreamRun] {
    static RUNS: OnceLock<Vec<StreamRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let spec = network();
        let mut out = Vec::new();
        for seed in SEEDS {
            let stream = five_task_stream(seed);
            for mode in MODES {
                let t0 = Instant::now();
                let run = run_continual(&stream, &spec, &train_config(mode, seed)).unwrap();
                out.push(StreamRun {
                    mode,
                    seed,
                    run,
                    secs: t0.elapsed().as_secs_f64(),
                });
            }
        }
        out
    })
}

fn stream_run(mode: Mode, seed: u64) -> &'static StreamRun {
    stream_runs()
        .iter()
        .find(|r| r.mode == mode && r.seed == seed)
        .unwrap()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------- 1

fn zero_forgetting() -> Outcome {
    let t0 = Instant::now();
    let spec = network();
    let stream = five_task_stream(0);
    let mut fresh: Vec<Matrix> = Vec::new();
    let mut final_logits: Vec<Matrix> = Vec::new();
    let run = run_continual_with(&stream, &spec, &train_config(Mode::Full, 0), &mut |ev| {
        let sub = ev.model.subnetwork(ev.task).unwrap();
        fresh.push(sub.logits(&spec, &stream[ev.task - 1].test.inputs).unwrap());
        if ev.task == stream.len() {
            for t in 1..=ev.task {
                let sub = ev.model.subnetwork(t).unwrap();
                final_logits.push(sub.logits(&spec, &stream[t - 1].test.inputs).unwrap());
            }
        }
    })
    .unwrap();
    let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let identical = fresh
        .iter()
        .zip(&final_logits)
        .filter(|(a, b)| bits(a) == bits(b))
        .count();
    let secs = t0.elapsed().as_secs_f64();
    let bwt = run.report.bwt;
    outcome(
        identical == 5 && bwt == 0.0 && secs < 300.0,
        format!("{identical}/5 tasks bitwise identical logits, BWT = {bwt}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

/// `max |MᵀM − I|` in f64.
fn gram_dev(m: &Matrix) -> f64 {
    let (rows, cols) = m.shape();
    let mut worst = 0.0f64;
    for i in 0..cols {
        for j in 0..cols {
            let dot: f64 = (0..rows)
                .map(|k| m.get(k, i) as f64 * m.get(k, j) as f64)
                .sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// `U diag(σ) Vᵀ` summed in f64 over the first `k` columns.
fn outer_f64(f: &SvdFactors, k: usize) -> Vec<f64> {
    let (m, n) = (f.u.rows(), f.v.rows());
    let mut out = vec![0.0f64; m * n];
    for c in 0..k {
        let s = f.sigma[c] as f64;
        for i in 0..m {
            let us = f.u.get(i, c) as f64 * s;
            for j in 0..n {
                out[i * n + j] += us * f.v.get(j, c) as f64;
            }
        }
    }
    out
}

fn svd_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_rec, mut worst_gram, mut unsorted) = (0.0f64, 0.0f64, 0);
    for i in 0..1000 {
        let rows = rng.gen_range(1..=64);
        let cols = rng.gen_range(1..=600);
        let a = if i % 10 == 0 {
            // rank-deficient: product of thin factors
            let k = rng.gen_range(1..=rows.min(cols));
            cacl::linalg::matmul(
                &rand_matrix(&mut rng, rows, k, 1.0),
                &rand_matrix(&mut rng, k, cols, 1.0),
            )
            .unwrap()
        } else {
            rand_matrix(&mut rng, rows, cols, 1.0)
        };
        let a = if i % 2 == 1 { a.transpose() } else { a };
        let f = svd(&a).unwrap();
        if f.sigma.windows(2).any(|w| w[1] > w[0]) || f.sigma.iter().any(|&s| s < 0.0) {
            unsorted += 1;
        }
        let rec = outer_f64(&f, f.rank());
        let (num, den) = a
            .data()
            .iter()
            .zip(&rec)
            .fold((0.0, 0.0), |(n, d), (x, y)| {
                (n + (*x as f64 - y).powi(2), d + (*x as f64).powi(2))
            });
        worst_rec = worst_rec.max((num / den).sqrt());
        worst_gram = worst_gram.max(gram_dev(&f.u)).max(gram_dev(&f.v));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_rec <= 1e-4 && worst_gram <= 1e-5 && unsorted == 0 && secs < 60.0,
        format!(
            "1000 matrices: max rel. reconstruction error {worst_rec:.2e}, max Gram deviation \
             {worst_gram:.2e}, unsorted {unsorted}, {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn rank_k_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_identity, mut worst_library) = (0.0f64, 0.0f64);
    let mut checked = 0usize;
    for i in 0..200 {
        let rows = rng.gen_range(1..=24);
        let cols = rng.gen_range(1..=40);
        let f = if i % 2 == 0 {
            svd(&rand_matrix(&mut rng, rows, cols, 1.0)).unwrap()
        } else {
            // orthonormal factors with ties and zeros among the σ
            let r = rows.min(cols);
            let mut sigma: Vec<f32> = (0..r)
                .map(|_| match rng.gen_range(0..4) {
                    0 => 0.0,
                    1 => 0.5,
                    _ => rng.gen_range(1e-3f32..3.0),
                })
                .collect();
            sigma.sort_by(|a, b| b.total_cmp(a));
            SvdFactors {
                u: random_orthonormal(rows, r, rng.gen()).unwrap(),
                sigma,
                v: random_orthonormal(cols, r, rng.gen()).unwrap(),
            }
        };
        let full = outer_f64(&f, f.rank());
        for k in 1..=f.rank() {
            let ak = outer_f64(&f, k);
            let lhs: f64 = full.iter().zip(&ak).map(|(a, b)| (a - b).powi(2)).sum();
            let rhs: f64 = f.sigma[k..].iter().map(|&s| (s as f64).powi(2)).sum();
            let rel = if rhs > 0.0 {
                (lhs - rhs).abs() / rhs
            } else {
                lhs
            };
            worst_identity = worst_identity.max(rel);

            let lib = rank_k_approx(&f, k).unwrap();
            let scale = ak.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
            let dev = lib
                .data()
                .iter()
                .zip(&ak)
                .fold(0.0f64, |m, (x, y)| m.max((*x as f64 - y).abs()));
            worst_library = worst_library.max(dev / scale);
            checked += 1;
        }
    }
    outcome(
        worst_identity <= 1e-6 && worst_library <= 1e-6,
        format!(
            "{checked} (factor set, k) pairs: max rel. |‖A−A_k‖²−Σσ²| {worst_identity:.2e}, \
             library A_k vs oracle {worst_library:.2e}"
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Random projection to a scalar so every output entry matters.
fn project(g: &mut Graph, x: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let (r, c) = g.value(x).shape();
    let left = g.constant(rand_matrix(rng, 1, r, 1.0));
    let right = g.constant(rand_matrix(rng, c, 1, 1.0));
    let t = g.mat_mul(left, x).unwrap();
    g.mat_mul(t, right).unwrap()
}

/// Entries bounded away from zero (kinks of relu and |·|).
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    rand_matrix(rng, rows, cols, 1.0).map(|v| {
        if v.abs() < 0.05 {
            v + 0.1f32.copysign(v)
        } else {
            v
        }
    })
}

/// Moves orthonormal factors off `UᵀU = I`, where the orthogonality
/// penalty has a kink.
fn jitter(rng: &mut ChaCha8Rng, m: &Matrix) -> Matrix {
    let noise = rand_matrix(rng, m.rows(), m.cols(), 0.1);
    let data = m
        .data()
        .iter()
        .zip(noise.data())
        .map(|(a, b)| a + b)
        .collect();
    Matrix::new(m.rows(), m.cols(), data).unwrap()
}

fn composed_instance(rng: &mut ChaCha8Rng) -> (Graph, NodeId) {
    let spec = NetworkSpec {
        input_channels: 2,
        input_height: 5,
        input_width: 5,
        layers: vec![
            ConvLayer {
                shape: LayerShape::new(3, 2, 3, 3),
                stride: 2,
                padding: 1,
            },
            ConvLayer {
                shape: LayerShape::new(4, 3, 2, 2),
                stride: 1,
                padding: 0,
            },
        ],
    };
    let (fresh, head) = expand(&spec, 2, 3, rng.gen());
    let mut g = Graph::new();
    let mut weights = Vec::new();
    let mut nodes = Vec::new();
    for (f, s) in fresh.layers.iter().zip(spec.shapes()) {
        let shared = g.constant(rand_matrix(rng, s.m(), s.q(), 0.3));
        let sigma: Vec<f32> = f.sigma.iter().map(|_| rng.gen_range(0.2f32..1.0)).collect();
        let n = FactorNodes {
            u: g.parameter(jitter(rng, &f.u)),
            sigma: g.parameter(Matrix::new(1, sigma.len(), sigma).unwrap()),
            v: g.parameter(jitter(rng, &f.v)),
        };
        weights.push(compose_in_graph(&mut g, Some(shared), n).unwrap());
        nodes.push(n);
    }
    let hw = g.parameter(head.weight.clone());
    let hb = g.parameter(head.bias_matrix());
    let x = g.constant(rand_matrix(rng, 4, spec.input_len(), 2.0));
    let plan = DropoutPlan {
        rates: &[0.2],
        seed: rng.gen(),
    };
    let logits = network_logits(&mut g, &spec, &weights, (hw, hb), x, Some(plan)).unwrap();
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    let ce = g.softmax_cross_entropy(logits, &labels).unwrap();
    let orth = regularizers::orth_in_graph(&mut g, &nodes).unwrap();
    let sparse = regularizers::sparse_in_graph(&mut g, &nodes).unwrap();
    let w = LossWeights::new(1.0, 0.4).unwrap();
    let total = regularizers::total_in_graph(&mut g, ce, orth, sparse, &w).unwrap();
    (g, total)
}

/// Smallest distance of any relu input from zero.
fn kink_margin(g: &Graph) -> f32 {
    g.relu_inputs()
        .iter()
        .flat_map(|&id| g.value(id).data().iter().map(|v| v.abs()))
        .fold(f32::INFINITY, f32::min)
}

/// Redraws composed instances until no relu input sits within a
/// finite-difference step of its kink.
fn clear_of_kinks(rng: &mut ChaCha8Rng) -> (Graph, NodeId) {
    loop {
        let (g, loss) = composed_instance(rng);
        if kink_margin(&g) >= 0.05 {
            return (g, loss);
        }
    }
}

fn op_instance(op: &str, rng: &mut ChaCha8Rng) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let loss = match op {
        "mat_mul" => {
            let k = rng.gen_range(1..5);
            let a = g.parameter(rand_matrix(rng, r, k, 1.0));
            let b = g.parameter(rand_matrix(rng, k, c, 1.0));
            let y = g.mat_mul(a, b).unwrap();
            project(&mut g, y, rng)
        }
        "add" => {
            let a = g.parameter(rand_matrix(rng, r, c, 1.0));
            let b = g.parameter(rand_matrix(rng, r, c, 1.0));
            let y = g.add(a, b).unwrap();
            project(&mut g, y, rng)
        }
        "scale" => {
            let a = g.parameter(rand_matrix(rng, r, c, 1.0));
            let y = g.scale(a, rng.gen_range(-3.0..3.0)).unwrap();
            project(&mut g, y, rng)
        }
        "transpose" => {
            let a = g.parameter(rand_matrix(rng, r, c, 1.0));
            let y = g.transpose(a).unwrap();
            project(&mut g, y, rng)
        }
        "diag_embed" => {
            let a = g.parameter(rand_matrix(rng, 1, c, 1.0));
            let y = g.diag_embed(a).unwrap();
            project(&mut g, y, rng)
        }
        "relu" => {
            let a = g.parameter(away_from_zero(rng, r, c));
            let y = g.relu(a).unwrap();
            project(&mut g, y, rng)
        }
        "conv2d" => {
            let geom = ConvGeometry {
                in_channels: rng.gen_range(1..4),
                height: rng.gen_range(3..7),
                width: rng.gen_range(3..7),
                kernel_h: rng.gen_range(1..4),
                kernel_w: rng.gen_range(1..4),
                stride: rng.gen_range(1..3),
                padding: rng.gen_range(0..2),
            };
            let out_c = rng.gen_range(1..4);
            let batch = rng.gen_range(1..3);
            let w = g.parameter(rand_matrix(rng, out_c, geom.patch_len(), 1.0));
            let x = g.parameter(rand_matrix(rng, batch, geom.input_len(), 1.0));
            let y = g.conv2d(w, x, geom).unwrap();
            project(&mut g, y, rng)
        }
        "linear" => {
            let d = rng.gen_range(1..6);
            let x = g.parameter(rand_matrix(rng, r, d, 1.0));
            let w = g.parameter(rand_matrix(rng, d, c, 1.0));
            let b = g.parameter(rand_matrix(rng, 1, c, 1.0));
            let y = g.linear(x, w, b).unwrap();
            project(&mut g, y, rng)
        }
        "softmax_cross_entropy" => {
            let classes = rng.gen_range(2..6);
            let x = g.parameter(rand_matrix(rng, r, classes, 2.0));
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..classes)).collect();
            g.softmax_cross_entropy(x, &labels).unwrap()
        }
        "frobenius_norm" => {
            let a = g.parameter(rand_matrix(rng, r, c, 1.0));
            g.frobenius_norm(a).unwrap()
        }
        "l1_norm" => {
            let a = g.parameter(away_from_zero(rng, r, c));
            g.l1_norm(a).unwrap()
        }
        "l2_norm" => {
            let a = g.parameter(rand_matrix(rng, 1, c, 1.0));
            g.l2_norm(a).unwrap()
        }
        "div" => {
            let a = g.parameter(rand_matrix(rng, 1, 1, 2.0));
            let b = g.parameter(Matrix::scalar(rng.gen_range(0.5..2.0)));
            g.div(a, b).unwrap()
        }
        "dropout" => {
            let a = g.parameter(rand_matrix(rng, r, c, 1.0));
            let y = g
                .dropout(a, rng.gen_range(0.1..0.6), rng.gen(), true)
                .unwrap();
            project(&mut g, y, rng)
        }
        other => unreachable!("{other}"),
    };
    (g, loss)
}

fn gradient_oracle() -> Outcome {
    const OPS: [&str; 14] = [
        "mat_mul",
        "add",
        "scale",
        "transpose",
        "diag_embed",
        "relu",
        "conv2d",
        "linear",
        "softmax_cross_entropy",
        "frobenius_norm",
        "l1_norm",
        "l2_norm",
        "div",
        "dropout",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for op in OPS.iter().copied().chain(std::iter::once("composed")) {
        for _ in 0..20 {
            let (g, loss) = if op == "composed" {
                clear_of_kinks(&mut rng)
            } else {
                op_instance(op, &mut rng)
            };
            let report = grad_check(&g, loss, 1e-3, 1e-3).unwrap();
            worst = worst.max(report.max_deviation);
            cases += 1;
            if !report.passed() {
                failures.push(format!("{op} ({:.1e})", report.max_deviation));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{cases} instances over {} ops + composed graph, max deviation {worst:.2e}{}",
            OPS.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failures.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------- 5

/// Scans every k and returns the smallest one whose retained energy
/// fraction reaches `1 − e` (at least one column).
fn brute_force_topk(sigma: &[f32], e: f64) -> usize {
    let sq: Vec<f64> = sigma.iter().map(|&s| (s as f64) * (s as f64)).collect();
    let total: f64 = sq.iter().sum();
    if total == 0.0 {
        return 1.min(sigma.len());
    }
    let mut best = sigma.len();
    for k in (0..=sigma.len()).rev() {
        let retained: f64 = sq[..k].iter().sum();
        if retained / total >= 1.0 - e {
            best = k;
        }
    }
    best.max(1).min(sigma.len())
}

fn pruning_traces() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut cases = 0;
    for i in 0..500 {
        let r = rng.gen_range(1..=24);
        let mut sigma: Vec<f32> = match i % 5 {
            0 => (0..r).map(|_| rng.gen_range(0.0f32..3.0)).collect(),
            1 => (0..r)
                .map(|_| [0.0f32, 1.0, 2.0][rng.gen_range(0..3)])
                .collect(),
            2 => (0..r)
                .map(|_| {
                    if rng.gen_bool(0.4) {
                        0.0
                    } else {
                        rng.gen_range(0.0f32..1.0)
                    }
                })
                .collect(),
            3 => (0..r).map(|j| 10f32.powi(-(j as i32))).collect(),
            _ => {
                let v = rng.gen_range(0.1f32..2.0);
                vec![v; r]
            }
        };
        if i == 7 {
            sigma = vec![0.0; r];
        }
        sigma.sort_by(|a, b| b.total_cmp(a));
        let rows = rng.gen_range(r..r + 4);
        let layer = LayerFactors {
            u: rand_matrix(&mut rng, rows, r, 1.0),
            sigma: sigma.clone(),
            v: rand_matrix(&mut rng, rows + 2, r, 1.0),
        };
        let task = TaskFactors {
            task: 1,
            layers: vec![layer.clone()],
        };
        for e in [0.0, 1e-5, 0.5] {
            let pruned = energy_prune(&task, &PruneConfig::with_energy(e)).unwrap();
            let k = brute_force_topk(&sigma, e);
            let kept = &pruned.layers[0];
            let same = kept.rank() == k
                && kept.sigma[..] == sigma[..k]
                && kept.u == layer.u.leading_columns(k)
                && kept.v == layer.v.leading_columns(k);
            cases += 1;
            if !same {
                mismatches += 1;
            }
        }
    }
    let cfg = PruneConfig::with_energy(1e-5);
    let traces = [
        energy_topk(&[3.0, 2.0, 1.0, 0.001], &cfg) == 3,
        energy_topk(&[5.0, 0.0, 0.0], &cfg) == 1,
        energy_topk(&[2.0, 1.0], &PruneConfig::with_energy(0.5)) == 1,
    ];
    let traced = traces.iter().filter(|&&t| t).count();
    outcome(
        mismatches == 0 && traced == 3,
        format!("{cases} (σ, e) cases, {mismatches} mismatches vs brute force; worked traces {traced}/3"),
    )
}

// ---------------------------------------------------------------- 6 and 7

/// One easy 2-class task, shared by the orthogonality and sparsity checks.
fn toy_task(seed: u64) -> cacl::trainer::TaskDataset {
    generate_stream(&TaskStreamSpec {
        tasks: 1,
        noise: 1.0,
        seed,
        ..TaskStreamSpec::default()
    })
    .unwrap()
    .remove(0)
}

struct ToyResult {
    trained: TaskFactors,
    retained_rank: usize,
    accuracy: f64,
}

fn train_toy(seed: u64, lambda_orth: f32, lambda_sparse: f32) -> ToyResult {
    let spec = network();
    let data = toy_task(seed);
    let cfg = TrainConfig {
        lambda_orth,
        lambda_sparse,
        ..train_config(Mode::Full, seed)
    };
    let (fresh, head) = expand(&spec, 1, 2, seed);
    let empty = SharedSpace::new(spec.shapes());
    let (trained, head, _) = train_task(&data, &empty, fresh, head, &spec, &cfg, seed).unwrap();
    let pruned = compress(&trained, &cfg.prune_config()).unwrap();
    let space = empty.append(&pruned, head).unwrap();
    let accuracy = evaluate(&space.extract_subnetwork(1).unwrap(), &spec, &data.test).unwrap();
    ToyResult {
        retained_rank: pruned.ranks().iter().sum(),
        trained,
        accuracy,
    }
}

/// `‖MᵀM − I‖_F / r²`.
fn normalized_gram(m: &Matrix) -> f64 {
    let r = m.cols();
    let mut sq = 0.0f64;
    for i in 0..r {
        for j in 0..r {
            let dot: f64 = (0..m.rows())
                .map(|k| m.get(k, i) as f64 * m.get(k, j) as f64)
                .sum();
            let target = if i == j { 1.0 } else { 0.0 };
            sq += (dot - target).powi(2);
        }
    }
    sq.sqrt() / (r * r) as f64
}

fn orthogonality_efficacy() -> Outcome {
    let (mut worst_on, mut min_ratio) = (0.0f64, f64::INFINITY);
    for seed in SEEDS {
        let on = train_toy(seed, 1.0, 0.0);
        let off = train_toy(seed, 0.0, 0.0);
        for (a, b) in on.trained.layers.iter().zip(&off.trained.layers) {
            for (x, y) in [(&a.u, &b.u), (&a.v, &b.v)] {
                let (d_on, d_off) = (normalized_gram(x), normalized_gram(y));
                worst_on = worst_on.max(d_on);
                min_ratio = min_ratio.min(d_off / d_on.max(f64::MIN_POSITIVE));
            }
        }
    }
    outcome(
        worst_on < 1e-2 && min_ratio > 5.0,
        format!(
            "3 seeds × 2 layers × (U, V): max deviation with λ_orth=1 {worst_on:.2e}, \
             min ratio λ_orth=0 / λ_orth=1 {min_ratio:.1e}"
        ),
    )
}

fn sparsity_compression() -> Outcome {
    let sparse: Vec<ToyResult> = SEEDS.iter().map(|&s| train_toy(s, 1.0, 0.4)).collect();
    let dense: Vec<ToyResult> = SEEDS.iter().map(|&s| train_toy(s, 1.0, 0.0)).collect();
    let rank = |rs: &[ToyResult]| mean(rs.iter().map(|r| r.retained_rank as f64));
    let acc = |rs: &[ToyResult]| mean(rs.iter().map(|r| r.accuracy));
    let (r_s, r_d) = (rank(&sparse), rank(&dense));
    let cost = 100.0 * (acc(&dense) - acc(&sparse));
    outcome(
        r_s < r_d && cost <= 2.0,
        format!(
            "mean retained rank {r_s:.2} (λ_sparse=0.4) vs {r_d:.2} (0.0); accuracy cost {cost:.2} pts"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn compression_vs_dense() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut secs = 0.0;
    for seed in SEEDS {
        let full = stream_run(Mode::Full, seed);
        let base = stream_run(Mode::BaselineUb, seed);
        let (fs, bs) = (
            full.run.report.final_size_bytes,
            base.run.report.final_size_bytes,
        );
        let gap = 100.0 * (base.run.report.acc - full.run.report.acc);
        pass &= (fs as f64) <= 0.6 * bs as f64 && gap <= 5.0;
        secs += full.secs + base.secs;
        lines.push(format!(
            "seed {seed}: {:.2}× size, ACC gap {gap:.2} pts",
            fs as f64 / bs as f64
        ));
    }
    pass &= secs < 900.0;
    outcome(pass, format!("{} ({secs:.1}s)", lines.join("; ")))
}

// ---------------------------------------------------------------- 9

fn dynamic_allocation() -> Outcome {
    let spec = network();
    let mut votes = 0;
    let mut seen = Vec::new();
    for seed in 0..5u64 {
        let stream = generate_stream(&TaskStreamSpec {
            tasks: 4,
            noise: 1.0,
            overlap: vec![0.0, 0.4, 0.7, 0.85],
            seed,
            ..TaskStreamSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            lambda_sparse: 0.005,
            ..train_config(Mode::Full, seed)
        };
        let run = run_continual(&stream, &spec, &cfg).unwrap();
        let ranks = run.report.ranks_per_task();
        let hardest = *ranks.last().unwrap();
        let non_constant = ranks.iter().any(|&r| r != ranks[0]);
        if non_constant && ranks[..ranks.len() - 1].iter().all(|&r| r < hardest) {
            votes += 1;
        }
        seen.push(format!("{ranks:?}"));
    }
    outcome(
        votes >= 3,
        format!(
            "appended rank per task {}; hardest strictly largest in {votes}/5 seeds",
            seen.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 10

fn ablation_ordering() -> Outcome {
    let acc = |m: Mode| mean(SEEDS.iter().map(|&s| stream_run(m, s).run.report.acc));
    let size = |m: Mode| {
        mean(
            SEEDS
                .iter()
                .map(|&s| stream_run(m, s).run.report.final_size_bytes as f64),
        )
    };
    let (a_b, a_s, a_f, a_x) = (
        acc(Mode::BaselineUb),
        acc(Mode::St),
        acc(Mode::Fixed),
        acc(Mode::Full),
    );
    let (s_s, s_f) = (size(Mode::St), size(Mode::Full));
    outcome(
        a_b >= a_s && a_s >= a_f - 0.02 && s_s >= s_f,
        format!(
            "mean ACC baseline_ub {:.2}, st {:.2}, fixed {:.2}, full {:.2}; mean size st {s_s:.0} B ≥ full {s_f:.0} B",
            100.0 * a_b,
            100.0 * a_s,
            100.0 * a_f,
            100.0 * a_x
        ),
    )
}

// ---------------------------------------------------------------- 11

fn random_space(rng: &mut ChaCha8Rng) -> (NetworkSpec, SharedSpace) {
    let n_in = rng.gen_range(1..4);
    let c1 = rng.gen_range(1..6);
    let c2 = rng.gen_range(1..6);
    let spec = NetworkSpec {
        input_channels: n_in,
        input_height: rng.gen_range(3..7),
        input_width: rng.gen_range(3..7),
        layers: vec![
            ConvLayer {
                shape: LayerShape::new(c1, n_in, 3, 3),
                stride: rng.gen_range(1..3),
                padding: 1,
            },
            ConvLayer {
                shape: LayerShape::new(c2, c1, 1, 1),
                stride: 1,
                padding: 0,
            },
        ],
    };
    let mut space = SharedSpace::new(spec.shapes());
    for t in 1..=rng.gen_range(0..5) {
        let ranks: Vec<usize> = spec
            .shapes()
            .iter()
            .map(|s| rng.gen_range(0..=s.expansion_rank()))
            .collect();
        let (mut f, head) = expand_with_ranks(&spec, &ranks, t, rng.gen_range(2..6), rng.gen());
        for l in &mut f.layers {
            // arbitrary bit patterns, including negative zero and subnormals
            for s in &mut l.sigma {
                *s = match rng.gen_range(0..4) {
                    0 => -0.0,
                    1 => f32::from_bits(rng.gen_range(1..0x0080_0000)),
                    _ => rng.gen_range(-5.0..5.0),
                };
            }
        }
        space = space.append(&f, head).unwrap();
    }
    (spec, space)
}

fn space_bits(space: &SharedSpace) -> Vec<u32> {
    let mut bits = Vec::new();
    for f in space.layers() {
        bits.extend(f.u.data().iter().map(|v| v.to_bits()));
        bits.extend(f.sigma.iter().map(|v| v.to_bits()));
        bits.extend(f.v.data().iter().map(|v| v.to_bits()));
    }
    for h in space.heads() {
        bits.extend(h.weight.data().iter().map(|v| v.to_bits()));
        bits.extend(h.bias.iter().map(|v| v.to_bits()));
    }
    bits
}

fn serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dir = std::env::temp_dir().join(format!("cacl-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (mut lossless, mut truncations, mut rejected) = (0, 0, 0);
    for i in 0..100 {
        let (spec, space) = random_space(&mut rng);
        let path = dir.join(format!("m{i}.cacl"));
        cacl::harness::save_space(&spec, &space, &path).unwrap();
        let (spec2, space2) = cacl::harness::load_space(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let same_outputs = (1..=space.num_tasks()).all(|t| {
            let x = rand_matrix(&mut rng, 3, spec.input_len(), 1.0);
            let a = space
                .extract_subnetwork(t)
                .unwrap()
                .logits(&spec, &x)
                .unwrap();
            let b = space2
                .extract_subnetwork(t)
                .unwrap()
                .logits(&spec2, &x)
                .unwrap();
            a.data()
                .iter()
                .map(|v| v.to_bits())
                .eq(b.data().iter().map(|v| v.to_bits()))
        });
        if spec2 == spec
            && space_bits(&space2) == space_bits(&space)
            && space2.rank_table() == space.rank_table()
            && encode_space(&spec2, &space2).unwrap() == bytes
            && same_outputs
        {
            lossless += 1;
        }
        for cut in (0..bytes.len()).step_by(64) {
            truncations += 1;
            if matches!(decode_space(&bytes[..cut]), Err(Error::Format { .. })) {
                rejected += 1;
            }
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    outcome(
        lossless == 100 && rejected == truncations,
        format!("{lossless}/100 round-trips bitwise lossless; {rejected}/{truncations} truncations rejected"),
    )
}

// ---------------------------------------------------------------- driver

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("zero forgetting", zero_forgetting),
        ("SVD correctness", svd_correctness),
        ("rank-k error identity", rank_k_identity),
        ("gradient oracle", gradient_oracle),
        ("pruning trace equivalence", pruning_traces),
        ("orthogonality efficacy", orthogonality_efficacy),
        ("sparsity drives compression", sparsity_compression),
        ("compression vs dense baseline", compression_vs_dense),
        ("dynamic allocation", dynamic_allocation),
        ("ablation ordering", ablation_ordering),
        ("serialization", serialization),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let started = Instant::now();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("{:02}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id == *f || name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let o = check();
        let took = Duration::from_secs_f64(t0.elapsed().as_secs_f64());
        println!(
            "[{}] {id} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    }
    println!(
        "acceptance: {} failed ({:.1}s total)",
        failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
