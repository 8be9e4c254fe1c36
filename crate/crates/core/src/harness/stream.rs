use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::trainer::{Samples, TaskDataset};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    #[default]
    SyntheticBlobs,
    SplitFile,
}

/// Description of a task stream; every task draws its own classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStreamSpec {
    pub kind: StreamKind,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Samples drawn per class (blobs) or the per-class cap (file; 0 keeps all).
    pub samples_per_class: usize,
    /// Flattened input is `channels × height × width`.
    pub input_shape: [usize; 3],
    pub seed: u64,
    /// Per-sample noise std of the blobs.
    pub noise: f32,
    /// Per-task pull of class means toward their centroid, in `[0, 1)`.
    /// Missing entries mean 0.
    pub overlap: Vec<f32>,
    pub path: Option<PathBuf>,
    /// Original labels making up each task, in task-local label order.
    pub partition: Vec<Vec<usize>>,
}

impl Default for TaskStreamSpec {
    fn default() -> Self {
        Self {
            kind: StreamKind::SyntheticBlobs,
            tasks: 5,
            classes_per_task: 2,
            samples_per_class: 200,
            input_shape: [2, 8, 8],
            seed: 0,
            noise: 1.0,
            overlap: Vec::new(),
            path: None,
            partition: Vec::new(),
        }
    }
}

impl TaskStreamSpec {
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn overlap_of(&self, task: usize) -> f32 {
        self.overlap.get(task).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len() == 0 {
            return Err(Error::Config("input shape must be non-empty".into()));
        }
        match self.kind {
            StreamKind::SyntheticBlobs => {
                if self.tasks == 0 || self.classes_per_task < 2 || self.samples_per_class < 2 {
                    return Err(Error::Config(
                        "blobs need ≥ 1 task, ≥ 2 classes per task and ≥ 2 samples per class"
                            .into(),
                    ));
                }
                if self.overlap.iter().any(|o| !(0.0..1.0).contains(o)) {
                    return Err(Error::Config("overlap must lie in [0, 1)".into()));
                }
                if !(self.noise >= 0.0) {
                    return Err(Error::Config("noise must be non-negative".into()));
                }
            }
            StreamKind::SplitFile => {
                if self.path.is_none() {
                    return Err(Error::Config("split_file needs a path".into()));
                }
                if self.partition.is_empty() {
                    return Err(Error::Config("split_file needs a class partition".into()));
                }
                let mut seen = BTreeSet::new();
                for (t, classes) in self.partition.iter().enumerate() {
                    if classes.len() < 2 {
                        return Err(Error::Config(format!(
                            "task {} has fewer than 2 classes",
                            t + 1
                        )));
                    }
                    for &c in classes {
                        if !seen.insert(c) {
                            return Err(Error::Config(format!(
                                "class {c} appears in more than one task"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn generate_stream(spec: &TaskStreamSpec) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    match spec.kind {
        StreamKind::SyntheticBlobs => Ok(blobs(spec)),
        StreamKind::SplitFile => {
            let path = spec.path.as_ref().expect("validated");
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let (inputs, labels) = parse_labeled_csv(&text, spec.input_len())?;
            split_by_partition(spec, &inputs, &labels)
        }
    }
}

fn blobs(spec: &TaskStreamSpec) -> Vec<TaskDataset> {
    let d = spec.input_len();
    let k = spec.classes_per_task;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.tasks)
        .map(|t| {
            let means: Vec<Vec<f32>> = (0..k)
                .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let centroid: Vec<f32> = (0..d)
                .map(|j| means.iter().map(|m| m[j]).sum::<f32>() / k as f32)
                .collect();
            let o = spec.overlap_of(t);
            let mut per_class = Vec::with_capacity(k);
            for m in &means {
                let pulled: Vec<f32> = m
                    .iter()
                    .zip(&centroid)
                    .map(|(a, c)| (1.0 - o) * a + o * c)
                    .collect();
                let rows: Vec<Vec<f32>> = (0..spec.samples_per_class)
                    .map(|_| {
                        pulled
                            .iter()
                            .map(|&mu| {
                                let z: f32 = StandardNormal.sample(&mut rng);
                                mu + spec.noise * z
                            })
                            .collect()
                    })
                    .collect();
                per_class.push(rows);
            }
            stratified_split(per_class, d, k, &mut rng)
        })
        .collect()
}

/// 80/20 split of every class, shuffled.
fn stratified_split(
    per_class: Vec<Vec<Vec<f32>>>,
    d: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> TaskDataset {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mut rows) in per_class.into_iter().enumerate() {
        rows.shuffle(rng);
        let cut = (rows.len() * 4).div_ceil(5);
        for (i, row) in rows.into_iter().enumerate() {
            if i < cut {
                train.push((row, label));
            } else {
                test.push((row, label));
            }
        }
    }
    train.shuffle(rng);
    test.shuffle(rng);
    TaskDataset {
        classes,
        train: to_samples(train, d),
        test: to_samples(test, d),
    }
}

fn to_samples(rows: Vec<(Vec<f32>, usize)>, d: usize) -> Samples {
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for (row, y) in rows {
        data.extend(row);
        labels.push(y);
    }
    Samples {
        inputs: Matrix::new(labels.len(), d, data).expect("sized"),
        labels,
    }
}

fn split_by_partition(
    spec: &TaskStreamSpec,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<Vec<TaskDataset>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = inputs.cols();
    spec.partition
        .iter()
        .enumerate()
        .map(|(t, classes)| {
            let mut per_class = Vec::with_capacity(classes.len());
            for &c in classes {
                let mut rows: Vec<Vec<f32>> = labels
                    .iter()
                    .enumerate()
                    .filter(|&(_, &y)| y == c)
                    .map(|(i, _)| inputs.row(i).to_vec())
                    .collect();
                if rows.len() < 2 {
                    return Err(Error::Data(format!(
                        "task {}: class {c} has {} samples, need at least 2",
                        t + 1,
                        rows.len()
                    )));
                }
                if spec.samples_per_class > 0 && rows.len() > spec.samples_per_class {
                    rows.shuffle(&mut rng);
                    rows.truncate(spec.samples_per_class);
                }
                per_class.push(rows);
            }
            Ok(stratified_split(per_class, d, classes.len(), &mut rng))
        })
        .collect()
}

/// Parses `label,f1,...,fD` lines (blank lines and `#` comments skipped).
pub fn parse_labeled_csv(text: &str, features: usize) -> Result<(Matrix, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: String| Error::Data(format!("line {}: {what}", lineno + 1));
        let mut fields = line.split(',').map(str::trim);
        let label = fields
            .next()
            .unwrap_or_default()
            .parse::<usize>()
            .map_err(|e| bad(format!("label: {e}")))?;
        let before = data.len();
        for f in fields {
            data.push(
                f.parse::<f32>()
                    .map_err(|e| bad(format!("feature '{f}': {e}")))?,
            );
        }
        if data.len() - before != features {
            return Err(bad(format!(
                "{} features, expected {features}",
                data.len() - before
            )));
        }
        labels.push(label);
    }
    Ok((Matrix::new(labels.len(), features, data)?, labels))
}

/// Inverse of [`parse_labeled_csv`]; values print in shortest round-trip form.
pub fn write_labeled_csv(samples: &Samples) -> String {
    let mut out = String::new();
    for (i, y) in samples.labels.iter().enumerate() {
        out.push_str(&y.to_string());
        for v in samples.inputs.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskStreamSpec {
        TaskStreamSpec {
            tasks: 2,
            samples_per_class: 50,
            input_shape: [1, 2, 2],
            seed: 4,
            ..TaskStreamSpec::default()
        }
    }

    #[test]
    fn blob_sizes_and_labels() {
        let s = generate_stream(&small()).unwrap();
        assert_eq!(s.len(), 2);
        for t in &s {
            assert_eq!(t.train.len(), 80);
            assert_eq!(t.test.len(), 20);
            assert_eq!(t.train.labels.iter().filter(|&&y| y == 1).count(), 40);
            t.validate(4).unwrap();
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(
            generate_stream(&small()).unwrap(),
            generate_stream(&small()).unwrap()
        );
        let other = TaskStreamSpec { seed: 5, ..small() };
        assert_ne!(
            generate_stream(&small()).unwrap(),
            generate_stream(&other).unwrap()
        );
    }

    /// Nearest-class-mean of the training split; a linear rule.
    fn nearest_mean_accuracy(t: &TaskDataset) -> f64 {
        let d = t.train.inputs.cols();
        let mut means = vec![vec![0.0f64; d]; t.classes];
        let mut counts = vec![0usize; t.classes];
        for (i, &y) in t.train.labels.iter().enumerate() {
            counts[y] += 1;
            for (m, &v) in means[y].iter_mut().zip(t.train.inputs.row(i)) {
                *m += v as f64;
            }
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= *c as f64);
        }
        let hits = t
            .test
            .labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| {
                let dist = |m: &Vec<f64>| -> f64 {
                    m.iter()
                        .zip(t.test.inputs.row(i))
                        .map(|(a, &b)| (a - b as f64).powi(2))
                        .sum()
                };
                (0..t.classes)
                    .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                    .unwrap()
                    == y
            })
            .count();
        hits as f64 / t.test.len() as f64
    }

    #[test]
    fn separated_blobs_are_linearly_separable() {
        let spec = TaskStreamSpec {
            tasks: 2,
            input_shape: [2, 8, 8],
            noise: 0.5,
            ..TaskStreamSpec::default()
        };
        for t in generate_stream(&spec).unwrap() {
            assert!(nearest_mean_accuracy(&t) >= 0.99);
        }
    }

    #[test]
    fn overlap_makes_tasks_harder() {
        let spec = TaskStreamSpec {
            tasks: 2,
            input_shape: [1, 4, 4],
            overlap: vec![0.0, 0.9],
            ..TaskStreamSpec::default()
        };
        let s = generate_stream(&spec).unwrap();
        assert!(nearest_mean_accuracy(&s[1]) < nearest_mean_accuracy(&s[0]));
    }

    #[test]
    fn overlapping_partition_is_config_error() {
        let spec = TaskStreamSpec {
            kind: StreamKind::SplitFile,
            path: Some("unused.csv".into()),
            partition: vec![vec![1, 2], vec![2, 3]],
            ..small()
        };
        assert!(matches!(generate_stream(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn split_file_partitions_by_class() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut text = String::from("# label,f1,f2\n");
        for c in 0..4 {
            for i in 0..10 {
                text.push_str(&format!(
                    "{c},{},{}\n",
                    c as f32 + 0.01 * i as f32,
                    -(c as f32)
                ));
            }
        }
        std::fs::write(&path, text).unwrap();
        let spec = TaskStreamSpec {
            kind: StreamKind::SplitFile,
            input_shape: [1, 1, 2],
            path: Some(path),
            partition: vec![vec![3, 0], vec![1, 2]],
            samples_per_class: 0,
            ..small()
        };
        let s = generate_stream(&spec).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].train.len() + s[0].test.len(), 20);
        // task-local label 0 is original class 3
        let i = s[0].train.labels.iter().position(|&y| y == 0).unwrap();
        assert_eq!(s[0].train.inputs.row(i)[1], -3.0);
    }

    #[test]
    fn missing_file_is_io_error() {
        let spec = TaskStreamSpec {
            kind: StreamKind::SplitFile,
            path: Some("/nonexistent/data.csv".into()),
            partition: vec![vec![0, 1]],
            ..small()
        };
        assert!(matches!(generate_stream(&spec), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = &generate_stream(&small()).unwrap()[0];
        let (inputs, labels) = parse_labeled_csv(&write_labeled_csv(&t.test), 4).unwrap();
        assert_eq!(inputs, t.test.inputs);
        assert_eq!(labels, t.test.labels);
        assert!(parse_labeled_csv("0,1.0\n", 2).is_err());
        assert!(parse_labeled_csv("x,1.0\n", 1).is_err());
    }
}
