//! Flat key/value run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compression::PruneCriterion;
use crate::error::{Error, Result};
use crate::factorized::{ConvLayer, LayerShape, NetworkSpec};
use crate::harness::stream::{StreamKind, TaskStreamSpec};
use crate::trainer::{AdamConfig, Mode, TrainConfig};

/// Every key is optional; omitted keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // training
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f32,
    pub lambda_orth: f32,
    pub lambda_sparse: f32,
    pub energy_e: f64,
    pub prune_criterion: PruneCriterion,
    pub dropout: Vec<f32>,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    // network
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv_channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub paddings: Vec<usize>,
    // task stream
    pub stream_kind: StreamKind,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    /// Defaults to `seed`.
    pub stream_seed: Option<u64>,
    pub noise: f32,
    pub overlap: Vec<f32>,
    pub data_path: Option<PathBuf>,
    pub partition: Vec<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = TaskStreamSpec::default();
        Self {
            mode: t.mode,
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            lr_drop_epochs: t.lr_drop_epochs,
            lr_drop_factor: t.lr_drop_factor,
            lambda_orth: t.lambda_orth,
            lambda_sparse: t.lambda_sparse,
            energy_e: t.energy_e,
            prune_criterion: t.prune_criterion,
            dropout: t.dropout,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            input_channels: s.input_shape[0],
            input_height: s.input_shape[1],
            input_width: s.input_shape[2],
            conv_channels: vec![8, 8],
            kernel_sizes: vec![3, 3],
            strides: vec![1, 2],
            paddings: vec![1, 1],
            stream_kind: s.kind,
            tasks: s.tasks,
            classes_per_task: s.classes_per_task,
            samples_per_class: s.samples_per_class,
            stream_seed: None,
            noise: s.noise,
            overlap: s.overlap,
            data_path: None,
            partition: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a relative `data_path` is taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.data_path, path.parent()) {
            if p.is_relative() {
                cfg.data_path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            lr_drop_epochs: self.lr_drop_epochs.clone(),
            lr_drop_factor: self.lr_drop_factor,
            lambda_orth: self.lambda_orth,
            lambda_sparse: self.lambda_sparse,
            energy_e: self.energy_e,
            prune_criterion: self.prune_criterion,
            mode: self.mode,
            seed: self.seed,
            dropout: self.dropout.clone(),
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        }
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        let l = self.conv_channels.len();
        if [
            self.kernel_sizes.len(),
            self.strides.len(),
            self.paddings.len(),
        ] != [l; 3]
        {
            return Err(Error::Config(
                "conv_channels, kernel_sizes, strides and paddings must have equal length".into(),
            ));
        }
        let mut n = self.input_channels;
        let layers = (0..l)
            .map(|i| {
                let c = self.conv_channels[i];
                let k = self.kernel_sizes[i];
                let layer = ConvLayer {
                    shape: LayerShape::new(c, n, k, k),
                    stride: self.strides[i],
                    padding: self.paddings[i],
                };
                n = c;
                layer
            })
            .collect();
        let spec = NetworkSpec {
            input_channels: self.input_channels,
            input_height: self.input_height,
            input_width: self.input_width,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn stream(&self) -> TaskStreamSpec {
        let tasks = match self.stream_kind {
            StreamKind::SyntheticBlobs => self.tasks,
            StreamKind::SplitFile => self.partition.len(),
        };
        TaskStreamSpec {
            kind: self.stream_kind,
            tasks,
            classes_per_task: self.classes_per_task,
            samples_per_class: self.samples_per_class,
            input_shape: [self.input_channels, self.input_height, self.input_width],
            seed: self.stream_seed.unwrap_or(self.seed),
            noise: self.noise,
            overlap: self.overlap.clone(),
            path: self.data_path.clone(),
            partition: self.partition.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train().validate()?;
        self.network()?;
        self.stream().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.train(), TrainConfig::default());
        let net = c.network().unwrap();
        assert_eq!(net.layers[1].shape, LayerShape::new(8, 8, 3, 3));
        assert_eq!(net.head_input_dim(), 128);
    }

    #[test]
    fn parses_flat_keys() {
        let c = RunConfig::from_toml(
            r#"
            mode = "fixed"
            seed = 7
            epochs = 30
            lr_drop_epochs = [10, 20]
            prune_criterion = "tail_vs_retained"
            overlap = [0.0, 0.5]
            "#,
        )
        .unwrap();
        assert_eq!(c.mode, Mode::Fixed);
        assert_eq!(c.stream().seed, 7);
        assert_eq!(c.train().prune_criterion, PruneCriterion::TailVsRetained);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            RunConfig::from_toml("mode = \"dense\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("epoch = 3"),
            Err(Error::Config(_))
        ));
        let c = RunConfig {
            strides: vec![1],
            ..RunConfig::default()
        };
        assert!(matches!(c.network(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig {
            data_path: Some("x.csv".into()),
            partition: vec![vec![0, 1]],
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}
