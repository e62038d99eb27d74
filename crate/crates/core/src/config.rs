//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Variant, LOSS_NAMES};
use crate::models::{Arch, ModelSpec};
use crate::ops::{MapMetric, SsimConfig};

/// Every accepted key, in echo order.
pub const KEYS: [&str; 25] = [
    "dataset",
    "model",
    "input_side",
    "target_layer",
    "loss",
    "lambda_class",
    "lambda_proto",
    "lambda_batch_proto",
    "ssim_c1",
    "ssim_c2",
    "ssim_c3",
    "ssim_alpha",
    "ssim_beta",
    "ssim_gamma",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "train_fraction",
    "train_limit",
    "val_limit",
    "test_limit",
    "data_root",
    "output_dir",
    "timing",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: Dataset,
    pub model: ModelSpec,
    pub loss: LossConfig,
    /// SSIM constants, used whenever the metric is SSIM.
    pub ssim: SsimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Share of the official training split used for training; the rest validates.
    pub train_fraction: f64,
    /// Caps on split sizes; 0 keeps everything.
    pub train_limit: usize,
    pub val_limit: usize,
    pub test_limit: usize,
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    /// Record wall-clock seconds in the metrics file. Off by default so that
    /// reruns produce identical files; wall time always goes to `timing.csv`.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: Dataset::Mnist,
            model: ModelSpec::new(Arch::SimpleCnn, 28),
            loss: LossConfig::default(),
            ssim: SsimConfig::default(),
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            seed: 42,
            train_fraction: 0.9,
            train_limit: 0,
            val_limit: 0,
            test_limit: 0,
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            timing: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse {value:?} as a value for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("cannot parse {value:?} as a boolean for `{key}`")),
    }
}

impl TrainConfig {
    /// Set one key. Unknown keys list every valid key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let model_default_target = self.model.target_layer == self.model.arch.default_target();
        match key {
            "dataset" => {
                self.dataset = Dataset::parse(value).ok_or_else(|| format!("unknown dataset {value:?} (mnist, fmnist)"))?
            }
            "model" => {
                let arch = Arch::parse(value).ok_or_else(|| format!("unknown model {value:?} (simplecnn, resnet18)"))?;
                self.model.arch = arch;
                if model_default_target || !arch.layers().contains(&self.model.target_layer.as_str()) {
                    self.model.target_layer = arch.default_target().to_string();
                }
            }
            "input_side" => self.model.input_side = parse_num(key, value)?,
            "target_layer" => self.model.target_layer = value.to_string(),
            "loss" => {
                let (variant, metric) = LossConfig::parse_name(value)
                    .ok_or_else(|| format!("unknown loss {value:?}; valid: {}", LOSS_NAMES.join(", ")))?;
                self.loss.variant = variant;
                self.loss.metric = metric;
            }
            "lambda_class" => self.loss.lambda_class = parse_num(key, value)?,
            "lambda_proto" => self.loss.lambda_proto = parse_num(key, value)?,
            "lambda_batch_proto" => self.loss.lambda_batch_proto = parse_num(key, value)?,
            "ssim_c1" => self.ssim.c1 = parse_num(key, value)?,
            "ssim_c2" => self.ssim.c2 = parse_num(key, value)?,
            "ssim_c3" => self.ssim.c3 = parse_num(key, value)?,
            "ssim_alpha" => self.ssim.alpha = parse_num(key, value)?,
            "ssim_beta" => self.ssim.beta = parse_num(key, value)?,
            "ssim_gamma" => self.ssim.gamma = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "train_fraction" => self.train_fraction = parse_num(key, value)?,
            "train_limit" => self.train_limit = parse_num(key, value)?,
            "val_limit" => self.val_limit = parse_num(key, value)?,
            "test_limit" => self.test_limit = parse_num(key, value)?,
            "data_root" => self.data_root = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "timing" => self.timing = parse_bool(key, value)?,
            _ => return Err(format!("unknown key `{key}`; valid keys: {}", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Loss settings with the configured SSIM constants applied.
    pub fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss;
        if let MapMetric::Ssim(_) = loss.metric {
            loss.metric = MapMetric::Ssim(self.ssim);
        }
        loss
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        self.model.validate()?;
        self.effective_loss().validate()?;
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        let min_batch = if self.model.arch == Arch::ResNet18 { 2 } else { 1 };
        if self.batch_size < min_batch {
            return bad(format!("batch_size must be >= {min_batch} for {}", self.model.arch));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite value >= 0, got {}", self.lr));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        Ok(())
    }

    /// Parse `key=value` lines; `#` starts a comment. Defaults fill the rest.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides, reporting failures against `--set`.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for (i, item) in overrides.iter().enumerate() {
            let err = |msg: String| Error::Config {
                line: i + 1,
                msg: format!("--set {item}: {msg}"),
            };
            let (key, value) = item.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            self.set(key.trim(), value.trim()).map_err(err)?;
        }
        self.validate()
    }

    /// Every key with its effective value; parses back to the same config.
    pub fn echo(&self) -> String {
        let loss_name = self.loss.name();
        let values: [String; 25] = [
            self.dataset.name().into(),
            self.model.arch.name().into(),
            self.model.input_side.to_string(),
            self.model.target_layer.clone(),
            loss_name,
            self.loss.lambda_class.to_string(),
            self.loss.lambda_proto.to_string(),
            self.loss.lambda_batch_proto.to_string(),
            self.ssim.c1.to_string(),
            self.ssim.c2.to_string(),
            self.ssim.c3.to_string(),
            self.ssim.alpha.to_string(),
            self.ssim.beta.to_string(),
            self.ssim.gamma.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.seed.to_string(),
            self.train_fraction.to_string(),
            self.train_limit.to_string(),
            self.val_limit.to_string(),
            self.test_limit.to_string(),
            self.data_root.display().to_string(),
            self.output_dir.display().to_string(),
            self.timing.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// Whether the trained objective includes a CAM term.
    pub fn trains_cam(&self) -> bool {
        self.loss.variant != Variant::Baseline && self.loss.proto_weight() != 0.0
    }
}
