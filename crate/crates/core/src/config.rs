//! Flat `key = value` experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::InfluenceMode;
use crate::nn::Arch;

/// Every run parameter. Only `model`, `dataset` and `r` are required; the
/// rest fall back to the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `tiny-cnn`, `lenet`, `vgg16` or `resnet56`.
    pub model: String,
    /// `mnist`, `cifar10` or `synthetic`.
    pub dataset: String,
    pub data_dir: PathBuf,
    /// Use only the first N training / test examples (0 = all; synthetic
    /// datasets default to 1000 / 500).
    pub train_subset: usize,
    pub test_subset: usize,
    /// Channel widths of tiny-cnn.
    pub tiny_widths: [usize; 4],

    /// Target fraction of prunable channels to remove.
    pub r: f64,
    pub beta_start: f64,
    pub beta_start_fc: f64,
    pub beta_end_factor: f64,
    /// Steps over which β anneals from start to end, per conv / fc layer.
    pub beta_steps: usize,
    pub beta_steps_fc: usize,
    pub stall_boost: f64,
    pub patience: usize,
    pub lambda_gain: f64,
    pub binarize_threshold: f64,
    pub delta_bin: f64,
    pub window: usize,
    /// Steps between convergence checks.
    pub check_every: usize,
    pub max_prune_steps: usize,

    pub influence_mode: InfluenceMode,
    pub ema_rho: f64,
    /// Batches per influence window during pruning (0 = one epoch).
    pub influence_batches: usize,
    /// Batches used for the model-wide baseline measurement (0 = one epoch).
    pub measure_batches: usize,
    /// Initial micro-convolution kernel value.
    pub score_scale: f64,
    pub micro_lr: f64,
    pub micro_momentum: f64,

    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    /// Fractions of the baseline epochs at which the lr decays.
    pub lr_milestones: Vec<f64>,
    pub baseline_epochs: usize,
    pub prune_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub crop_pad: usize,
    pub flip: bool,

    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "tiny-cnn".into(),
            dataset: "mnist".into(),
            data_dir: PathBuf::from("data/mnist-desk"),
            train_subset: 0,
            test_subset: 0,
            tiny_widths: [8, 16, 24, 32],
            r: 0.4,
            beta_start: 0.01,
            beta_start_fc: 0.01,
            beta_end_factor: 100.0,
            beta_steps: 120,
            beta_steps_fc: 120,
            stall_boost: 2.0,
            patience: 3,
            lambda_gain: 5.0,
            binarize_threshold: 1e-6,
            delta_bin: 0.01,
            window: 3,
            check_every: 10,
            max_prune_steps: 3000,
            influence_mode: InfluenceMode::Absolute,
            ema_rho: 0.9,
            influence_batches: 0,
            measure_batches: 0,
            score_scale: 100.0,
            micro_lr: 0.01,
            micro_momentum: 0.9,
            batch_size: 64,
            eval_batch_size: 500,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.1,
            lr_milestones: vec![0.5, 0.75],
            baseline_epochs: 10,
            prune_lr: 0.01,
            finetune_epochs: 2,
            finetune_lr: 0.01,
            crop_pad: 0,
            flip: false,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

const REQUIRED: [&str; 3] = ["model", "dataset", "r"];

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line defining `key`, or 0 when absent.
fn line_of_key(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map_or(0, |i| i + 1)
}

fn key_on_line(text: &str, line: usize) -> String {
    text.lines()
        .nth(line.saturating_sub(1))
        .and_then(|l| l.split_once('='))
        .map(|(k, _)| k.trim().to_string())
        .unwrap_or_default()
}

impl ExperimentConfig {
    pub fn arch(&self) -> Result<Arch> {
        Arch::from_tag(&self.model)
    }

    /// Range and consistency checks; `source` is used to point at lines.
    pub fn validate(&self, source: &str) -> Result<()> {
        let fail = |key: &str, msg: String| Error::Config {
            line: line_of_key(source, key),
            key: key.to_string(),
            msg,
        };
        if let Err(e) = self.arch() {
            return Err(fail("model", e.to_string()));
        }
        if !["mnist", "cifar10", "synthetic"].contains(&self.dataset.as_str()) {
            return Err(fail("dataset", format!("unknown dataset `{}` (mnist, cifar10 or synthetic)", self.dataset)));
        }
        if !(0.0..1.0).contains(&self.r) {
            return Err(fail("r", format!("compression rate {} must lie in [0, 1)", self.r)));
        }
        let positive = [
            ("beta_start", self.beta_start),
            ("beta_start_fc", self.beta_start_fc),
            ("lambda_gain", self.lambda_gain),
            ("binarize_threshold", self.binarize_threshold),
            ("score_scale", self.score_scale),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(fail(key, format!("{v} must be positive")));
            }
        }
        let non_negative = [
            ("lr", self.lr),
            ("prune_lr", self.prune_lr),
            ("finetune_lr", self.finetune_lr),
            ("micro_lr", self.micro_lr),
            ("weight_decay", self.weight_decay),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(fail(key, format!("{v} must be ≥ 0")));
            }
        }
        let unit = [
            ("momentum", self.momentum),
            ("micro_momentum", self.micro_momentum),
            ("ema_rho", self.ema_rho),
        ];
        for (key, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return Err(fail(key, format!("{v} must lie in [0, 1)")));
            }
        }
        if self.beta_end_factor < 1.0 {
            return Err(fail("beta_end_factor", format!("{} must be ≥ 1", self.beta_end_factor)));
        }
        if self.stall_boost < 1.0 {
            return Err(fail("stall_boost", format!("{} must be ≥ 1", self.stall_boost)));
        }
        if !(self.delta_bin > 0.0 && self.delta_bin < 0.5) {
            return Err(fail("delta_bin", format!("{} must lie in (0, 0.5)", self.delta_bin)));
        }
        if self.batch_size < 2 {
            return Err(fail("batch_size", format!("{} is too small (batch norm needs ≥ 2)", self.batch_size)));
        }
        for (key, v) in [
            ("eval_batch_size", self.eval_batch_size),
            ("window", self.window),
            ("patience", self.patience),
            ("check_every", self.check_every),
            ("beta_steps", self.beta_steps),
            ("beta_steps_fc", self.beta_steps_fc),
            ("baseline_epochs", self.baseline_epochs),
        ] {
            if v == 0 {
                return Err(fail(key, "must be ≥ 1".into()));
            }
        }
        if self.tiny_widths.contains(&0) {
            return Err(fail("tiny_widths", "widths must be ≥ 1".into()));
        }
        if let Some(m) = self.lr_milestones.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(fail("lr_milestones", format!("milestone {m} must lie in [0, 1]")));
        }
        Ok(())
    }

    /// The effective configuration as it would be written to disk.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn write_effective(&self, path: &Path) -> Result<()> {
        let text = format!("# effective configuration\n{}", self.dump());
        crate::report::write_atomic(path, text.as_bytes())
    }
}

/// Parses config text: unknown keys and type errors are reported with the
/// offending key and line; absent optional keys take their defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map_or(0, |s| line_of_offset(text, s.start));
        Error::Config {
            line,
            key: key_on_line(text, line),
            msg: e.message().to_string(),
        }
    })?;
    if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table() || v.is_array() && v.as_array().is_some_and(|a| a.iter().any(|x| x.is_table()))) {
        return Err(Error::Config {
            line: line_of_key(text, key),
            key: key.clone(),
            msg: "nested tables are not allowed".into(),
        });
    }
    for key in REQUIRED {
        if !table.contains_key(key) {
            return Err(Error::Config {
                line: 0,
                key: key.into(),
                msg: "required key is missing".into(),
            });
        }
    }
    let config: ExperimentConfig = toml::from_str(text).map_err(|e: toml::de::Error| {
        let line = e.span().map_or(0, |s| line_of_offset(text, s.start));
        let msg = e.message().to_string();
        let key = msg
            .strip_prefix("unknown field `")
            .and_then(|rest| rest.split('`').next())
            .map(str::to_string)
            .unwrap_or_else(|| key_on_line(text, line));
        Error::Config { line, key, msg }
    })?;
    config.validate(text)?;
    Ok(config)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
