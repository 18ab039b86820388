//! FLOPs and parameter accounting, run reports in JSON and CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvUnit, Layer, MaskedLayer, Model};

/// Multiply-accumulates of one conv or linear layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsCount {
    pub layers: Vec<LayerFlops>,
    pub total_macs: u64,
}

impl FlopsCount {
    /// `2 × MACs`.
    pub fn flops(&self) -> u64 {
        2 * self.total_macs
    }
}

/// Channels of a layer whose gate is not exactly zero (all of them when
/// the layer carries no gate).
fn active(layer: &dyn MaskedLayer) -> usize {
    match layer.instrumentation() {
        Some(instr) => instr.gate.iter().filter(|&&g| g != 0.0).count(),
        None => layer.out_channels(),
    }
}

fn conv_macs(unit: &ConvUnit, active_in: usize, shape: &[usize]) -> (u64, Vec<usize>) {
    let conv = &unit.conv;
    let (kh, kw) = conv.kernel();
    let oh = (shape[1] + 2 * conv.padding - kh) / conv.stride + 1;
    let ow = (shape[2] + 2 * conv.padding - kw) / conv.stride + 1;
    let out = active(conv);
    let macs = (out * active_in * kh * kw * oh * ow) as u64;
    (macs, vec![out, oh, ow])
}

/// Counts conv MACs as `Cout·Cin·Kh·Kw·Hout·Wout` and linear MACs as
/// `out·in`, skipping gated-off output channels and the inputs they feed.
/// Bias, batch norm, pooling and activations are not counted.
pub fn count_flops(model: &Model) -> Result<FlopsCount> {
    let shapes = model.layer_input_shapes()?;
    let mut layers = Vec::new();
    // active channels of the current activation (features once flattened)
    let mut active_in = model.input_shape[0];
    for (i, (layer, shape)) in model.layers.iter().zip(&shapes).enumerate() {
        match layer {
            Layer::Conv(u) => {
                let (macs, out) = conv_macs(u, active_in, shape);
                layers.push(LayerFlops {
                    name: format!("conv@{i}"),
                    macs,
                });
                active_in = out[0];
            }
            Layer::Residual(b) => {
                let (m1, h) = conv_macs(&b.first, active_in, shape);
                let (m2, y) = conv_macs(&b.second, h[0], &h);
                layers.push(LayerFlops {
                    name: format!("block@{i}.conv1"),
                    macs: m1,
                });
                layers.push(LayerFlops {
                    name: format!("block@{i}.conv2"),
                    macs: m2,
                });
                if let Some(sc) = &b.shortcut {
                    let (m3, _) = conv_macs(sc, active_in, shape);
                    layers.push(LayerFlops {
                        name: format!("block@{i}.shortcut"),
                        macs: m3,
                    });
                }
                active_in = y[0];
            }
            Layer::Linear(u) => {
                let out = active(&u.linear);
                layers.push(LayerFlops {
                    name: format!("fc@{i}"),
                    macs: (out * active_in) as u64,
                });
                active_in = out;
            }
            Layer::Flatten => {
                active_in *= shape[1..].iter().product::<usize>();
            }
            Layer::MaxPool(_) | Layer::GlobalAvgPool => {}
        }
    }
    let total_macs = layers.iter().map(|l| l.macs).sum();
    Ok(FlopsCount { layers, total_macs })
}

/// Retention of one prunable layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRetention {
    pub layer: String,
    pub channels_before: usize,
    pub channels_after: usize,
    pub target_kept: usize,
}

impl LayerRetention {
    pub fn retention(&self) -> f64 {
        self.channels_after as f64 / self.channels_before as f64
    }
}

/// Outcome of a full run. Accuracies and reductions are percentages;
/// `r_target`/`r_actual` are fractions of prunable channels removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub dataset: String,
    pub baseline_acc: f64,
    pub pruned_acc: f64,
    pub acc_drop: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub flops_reduction: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub params_reduction: f64,
    pub r_target: f64,
    pub r_actual: f64,
    pub layers: Vec<LayerRetention>,
    /// Effective configuration as `key = value` lines.
    pub config: String,
    /// Wall-clock seconds per phase; not part of [`RunReport::same_outcome`].
    pub phase_seconds: Vec<(String, f64)>,
}

pub fn reduction_percent(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - after / before)
    }
}

impl RunReport {
    /// Fills the derived fields from the raw counts.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &str,
        dataset: &str,
        baseline_acc: f64,
        pruned_acc: f64,
        flops: (u64, u64),
        params: (usize, usize),
        r_target: f64,
        layers: Vec<LayerRetention>,
        config: String,
    ) -> Self {
        let before: usize = layers.iter().map(|l| l.channels_before).sum();
        let after: usize = layers.iter().map(|l| l.channels_after).sum();
        let r_actual = if before == 0 { 0.0 } else { (before - after) as f64 / before as f64 };
        RunReport {
            model: model.to_string(),
            dataset: dataset.to_string(),
            baseline_acc,
            pruned_acc,
            acc_drop: baseline_acc - pruned_acc,
            flops_before: flops.0,
            flops_after: flops.1,
            flops_reduction: reduction_percent(flops.0 as f64, flops.1 as f64),
            params_before: params.0,
            params_after: params.1,
            params_reduction: reduction_percent(params.0 as f64, params.1 as f64),
            r_target,
            r_actual,
            layers,
            config,
            phase_seconds: Vec::new(),
        }
    }

    /// Equality ignoring wall-clock timings and the configured `out_dir`.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        let strip = |r: &RunReport| RunReport {
            phase_seconds: Vec::new(),
            config: r
                .config
                .lines()
                .filter(|l| !l.trim_start().starts_with("out_dir"))
                .collect::<Vec<_>>()
                .join("\n"),
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("report json: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("report json: {e}")))
    }

    pub fn summary_row(&self) -> SummaryRow {
        SummaryRow {
            model: self.model.clone(),
            dataset: self.dataset.clone(),
            baseline_acc: self.baseline_acc,
            pruned_acc: self.pruned_acc,
            acc_drop: self.acc_drop,
            flops_reduction: self.flops_reduction,
            params_reduction: self.params_reduction,
            r_target: self.r_target,
            r_actual: self.r_actual,
        }
    }
}

/// One line of the summary CSV, in column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub dataset: String,
    pub baseline_acc: f64,
    pub pruned_acc: f64,
    pub acc_drop: f64,
    pub flops_reduction: f64,
    pub params_reduction: f64,
    pub r_target: f64,
    pub r_actual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub layer: String,
    pub channels_before: usize,
    pub channels_after: usize,
    pub target_kept: usize,
    pub retention: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes `path` atomically (temporary sibling, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// JSON writes the whole report. CSV writes the one-row summary to `path`
/// and the per-layer table next to it as `<stem>_layers.csv`.
pub fn emit_report(report: &RunReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format {
        ReportFormat::Json => write_atomic(path, report.to_json()?.as_bytes()),
        ReportFormat::Csv => {
            write_atomic(path, &csv_bytes(&[report.summary_row()])?)?;
            let rows: Vec<RetentionRow> = report
                .layers
                .iter()
                .map(|l| RetentionRow {
                    layer: l.layer.clone(),
                    channels_before: l.channels_before,
                    channels_after: l.channels_after,
                    target_kept: l.target_kept,
                    retention: l.retention(),
                })
                .collect();
            write_atomic(&retention_path(path), &csv_bytes(&rows)?)
        }
    }
}

pub fn retention_path(summary: &Path) -> std::path::PathBuf {
    let stem = summary.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    summary.with_file_name(format!("{stem}_layers.csv"))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e.to_string()))).collect()
}

pub fn read_json_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunReport::from_json(&text)
}
