//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use eunet_core::data::{ShapeKind, SyntheticConfig};
use eunet_core::harness::TrainConfig;
use eunet_core::loss::LossKind;
use eunet_core::models::ModelConfig;
use eunet_core::uncertainty::{LabelSource, UncertaintyConfig};
use eunet_core::Exec;

/// Every key a config file may set, in the order the resolved file lists them.
pub const KEYS: &[&str] = &[
    "backbone",
    "mhex",
    "in_channels",
    "classes",
    "base_width",
    "depth",
    "mhex_hidden",
    "seed",
    "max_epochs",
    "early_stop_patience",
    "lr_reduce_patience",
    "lr",
    "lr_factor",
    "batch_size",
    "loss",
    "aux_weight",
    "folds",
    "test_fold",
    "image_size",
    "sample_count",
    "shape_kinds",
    "noise_std",
    "boundary_blur_px",
    "data_seed",
    "epsilon",
    "normalize",
    "pixel_stride",
    "labels",
    "samples",
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub test_fold: usize,
    pub data: SyntheticConfig,
    pub uncertainty: UncertaintyConfig,
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            folds: 5,
            test_fold: 0,
            data: SyntheticConfig::default(),
            uncertainty: UncertaintyConfig {
                exec: Exec::Sequential,
                ..UncertaintyConfig::default()
            },
            samples: 50,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("invalid value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError(format!(
            "invalid value {value:?} for key {key:?} (expected true or false)"
        ))),
    }
}

fn shape_name(k: ShapeKind) -> &'static str {
    match k {
        ShapeKind::Disk => "disk",
        ShapeKind::Ellipse => "ellipse",
        ShapeKind::Blob => "blob",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "backbone" => self.model.backbone = parse(key, v)?,
            "mhex" => self.model.with_mhex = parse_bool(key, v)?,
            "in_channels" => self.model.in_channels = parse(key, v)?,
            "classes" => self.model.class_count = parse(key, v)?,
            "base_width" => self.model.base_width = parse(key, v)?,
            "depth" => self.model.depth = parse(key, v)?,
            "mhex_hidden" => self.model.mhex_hidden = parse(key, v)?,
            "seed" => {
                let s = parse(key, v)?;
                self.model.seed = s;
                self.train.seed = s;
            }
            "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "early_stop_patience" => self.train.early_stop_patience = parse(key, v)?,
            "lr_reduce_patience" => self.train.lr_reduce_patience = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "lr_factor" => self.train.lr_factor = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "loss" => self.train.loss_kind = parse::<LossKind>(key, v)?,
            "aux_weight" => {
                self.train.aux_weight = if v == "auto" { None } else { Some(parse(key, v)?) };
            }
            "folds" => self.folds = parse(key, v)?,
            "test_fold" => self.test_fold = parse(key, v)?,
            "image_size" => self.data.image_size = parse(key, v)?,
            "sample_count" => self.data.sample_count = parse(key, v)?,
            "shape_kinds" => {
                self.data.shape_kinds = v
                    .split(',')
                    .map(|s| parse::<ShapeKind>(key, s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "noise_std" => self.data.noise_std = parse(key, v)?,
            "boundary_blur_px" => self.data.boundary_blur_px = parse(key, v)?,
            "data_seed" => self.data.seed = parse(key, v)?,
            "epsilon" => self.uncertainty.epsilon = parse(key, v)?,
            "normalize" => self.uncertainty.normalize = parse_bool(key, v)?,
            "pixel_stride" => self.uncertainty.pixel_stride = parse(key, v)?,
            "labels" => {
                self.uncertainty.labels = match v {
                    "prediction" => LabelSource::FinalPrediction,
                    "deepest" => LabelSource::DeepestHead,
                    _ => return Err(ConfigError(format!("invalid value {v:?} for key \"labels\""))),
                }
            }
            "samples" => self.samples = parse(key, v)?,
            _ => return Err(ConfigError(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "backbone" => self.model.backbone.to_string(),
            "mhex" => self.model.with_mhex.to_string(),
            "in_channels" => self.model.in_channels.to_string(),
            "classes" => self.model.class_count.to_string(),
            "base_width" => self.model.base_width.to_string(),
            "depth" => self.model.depth.to_string(),
            "mhex_hidden" => self.model.mhex_hidden.to_string(),
            "seed" => self.model.seed.to_string(),
            "max_epochs" => self.train.max_epochs.to_string(),
            "early_stop_patience" => self.train.early_stop_patience.to_string(),
            "lr_reduce_patience" => self.train.lr_reduce_patience.to_string(),
            "lr" => self.train.lr.to_string(),
            "lr_factor" => self.train.lr_factor.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "loss" => self.train.loss_kind.to_string(),
            "aux_weight" => self.train.aux_weight.map_or("auto".into(), |w| w.to_string()),
            "folds" => self.folds.to_string(),
            "test_fold" => self.test_fold.to_string(),
            "image_size" => self.data.image_size.to_string(),
            "sample_count" => self.data.sample_count.to_string(),
            "shape_kinds" => self
                .data
                .shape_kinds
                .iter()
                .map(|&k| shape_name(k))
                .collect::<Vec<_>>()
                .join(","),
            "noise_std" => self.data.noise_std.to_string(),
            "boundary_blur_px" => self.data.boundary_blur_px.to_string(),
            "data_seed" => self.data.seed.to_string(),
            "epsilon" => self.uncertainty.epsilon.to_string(),
            "normalize" => self.uncertainty.normalize.to_string(),
            "pixel_stride" => self.uncertainty.pixel_stride.to_string(),
            "labels" => match self.uncertainty.labels {
                LabelSource::FinalPrediction => "prediction".into(),
                LabelSource::DeepestHead => "deepest".into(),
            },
            "samples" => self.samples.to_string(),
            other => unreachable!("unlisted key {other}"),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    n + 1
                )));
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key with its effective value, one per line.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: eunet_core::Error| ConfigError(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.data.validate().map_err(wrap)?;
        self.uncertainty.validate().map_err(wrap)?;
        if self.data.image_size % (1 << self.model.depth) != 0 {
            return Err(ConfigError(format!(
                "image_size {} is not divisible by 2^depth = {}",
                self.data.image_size,
                1 << self.model.depth
            )));
        }
        if self.model.in_channels != 1 {
            return Err(ConfigError(
                "synthetic data is single-channel; in_channels must be 1".into(),
            ));
        }
        if self.folds < 3 || self.test_fold >= self.folds {
            return Err(ConfigError("need folds >= 3 and test_fold < folds".into()));
        }
        if self.folds > self.data.sample_count {
            return Err(ConfigError("more folds than samples".into()));
        }
        Ok(())
    }
}
