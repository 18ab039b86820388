//! Per-weight influence read out of the mask gradient, its per-channel
//! aggregate, and the micro-convolution that turns influence slabs into a
//! soft channel strategy.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MaskedLayer;
use crate::tensor::Tensor;

/// Averaged `∂L/∂M` of one layer, shaped like its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMap {
    pub layer: usize,
    pub values: Tensor,
    pub sample_count: usize,
}

impl InfluenceMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// Shape of one output channel's slab.
    pub fn slab_shape(&self) -> &[usize] {
        &self.values.shape()[1..]
    }

    fn slab_len(&self) -> usize {
        self.values.len() / self.channels().max(1)
    }

    fn slab(&self, k: usize) -> &[f64] {
        let n = self.slab_len();
        &self.values.data()[k * n..(k + 1) * n]
    }

    /// Entry-wise magnitudes divided by the mean absolute channel influence,
    /// so that scores are comparable across layers and training stages.
    /// An all-zero map stays all zero.
    pub fn normalized_magnitude(&self) -> InfluenceMap {
        let mean = self.values.data().iter().map(|v| v.abs()).sum::<f64>() / self.channels() as f64;
        let scale = if mean > 0.0 { 1.0 / mean } else { 0.0 };
        InfluenceMap {
            layer: self.layer,
            values: self.values.map(|v| v.abs() * scale),
            sample_count: self.sample_count,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfluenceMode {
    #[default]
    Absolute,
    Signed,
}

impl std::str::FromStr for InfluenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(InfluenceMode::Absolute),
            "signed" => Ok(InfluenceMode::Signed),
            other => Err(Error::invalid(format!("unknown influence mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfluence {
    pub layer: usize,
    pub values: Vec<f64>,
}

/// Reads the accumulated mask gradient as a per-example influence estimate
/// and resets the accumulator.
pub fn capture_influence(layer: &mut dyn MaskedLayer, layer_id: usize) -> Result<InfluenceMap> {
    let instr = layer
        .instrumentation_mut()
        .ok_or_else(|| Error::invalid(format!("layer {layer_id} carries no mask")))?;
    if instr.mask_samples == 0 {
        return Err(Error::invalid(format!("layer {layer_id}: mask gradient accumulator is empty")));
    }
    let samples = instr.mask_samples;
    let values = instr.mask_grad.scale(1.0 / samples as f64);
    instr.zero_mask_grad();
    Ok(InfluenceMap {
        layer: layer_id,
        values,
        sample_count: samples,
    })
}

/// Sums each output channel's slab, signed or by magnitude.
pub fn channel_influence(map: &InfluenceMap, mode: InfluenceMode) -> ChannelInfluence {
    let values = (0..map.channels())
        .map(|k| match mode {
            InfluenceMode::Absolute => map.slab(k).iter().map(|v| v.abs()).sum(),
            InfluenceMode::Signed => map.slab(k).iter().sum(),
        })
        .collect();
    ChannelInfluence {
        layer: map.layer,
        values,
    }
}

/// `ρ·running + (1−ρ)·fresh`.
pub fn ema_merge(running: &InfluenceMap, fresh: &InfluenceMap, rho: f64) -> Result<InfluenceMap> {
    if running.layer != fresh.layer {
        return Err(Error::invalid(format!(
            "ema_merge: layer {} vs layer {}",
            running.layer, fresh.layer
        )));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid(format!("ema_merge: ρ = {rho} outside [0, 1)")));
    }
    let values = running
        .values
        .zip_with(&fresh.values, "ema_merge", |a, b| rho * a + (1.0 - rho) * b)?;
    Ok(InfluenceMap {
        layer: running.layer,
        values,
        sample_count: running.sample_count + fresh.sample_count,
    })
}

/// One kernel the size of a channel slab, shared by all output channels of
/// a layer, plus a scalar bias. Carries its own momentum buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroConv {
    pub kernel: Tensor,
    pub bias: f64,
    kernel_velocity: Tensor,
    bias_velocity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroConvGrad {
    pub kernel: Tensor,
    pub bias: f64,
}

impl MicroConv {
    pub fn new(kernel: Tensor, bias: f64) -> Self {
        let kernel_velocity = Tensor::zeros(kernel.shape());
        MicroConv {
            kernel,
            bias,
            kernel_velocity,
            bias_velocity: 0.0,
        }
    }

    /// Every kernel entry set to `value`; on a normalised magnitude map this
    /// scores channels by `value × (channel influence / mean influence)`.
    pub fn uniform(slab_shape: &[usize], value: f64) -> Self {
        Self::new(Tensor::full(slab_shape, value), 0.0)
    }

    /// Momentum SGD on the kernel and bias.
    pub fn apply(&mut self, grad: &MicroConvGrad, learning_rate: f64, momentum: f64) -> Result<()> {
        self.kernel_velocity = self
            .kernel_velocity
            .zip_with(&grad.kernel, "micro-conv update", |v, g| momentum * v + g)?;
        self.bias_velocity = momentum * self.bias_velocity + grad.bias;
        let step = self.kernel_velocity.scale(learning_rate);
        self.kernel = self.kernel.sub(&step)?;
        self.bias -= learning_rate * self.bias_velocity;
        Ok(())
    }
}

fn check_slab(k: &MicroConv, map: &InfluenceMap) -> Result<()> {
    if k.kernel.shape() != map.slab_shape() {
        return Err(Error::shape("micro_conv_score", k.kernel.shape(), map.slab_shape()));
    }
    Ok(())
}

/// `s[k] = ⟨kernel, map[k]⟩ + bias`.
pub fn micro_conv_score(k: &MicroConv, map: &InfluenceMap) -> Result<Vec<f64>> {
    check_slab(k, map)?;
    Ok((0..map.channels())
        .map(|c| map.slab(c).iter().zip(k.kernel.data()).map(|(a, b)| a * b).sum::<f64>() + k.bias)
        .collect())
}

/// `E[k] = 1 / (1 + exp(−β·(s[k] − τ)))`, saturating instead of overflowing.
pub fn scaled_sigmoid(beta: f64, s: &[f64], tau: f64) -> Vec<f64> {
    s.iter()
        .map(|&v| {
            let z = beta * (v - tau);
            if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

/// Entries below this are treated as pruned.
pub const BINARIZE_THRESHOLD: f64 = 1e-6;

/// `B[k] = E[k] ≥ threshold`.
pub fn binarize_with(e: &[f64], threshold: f64) -> Vec<bool> {
    e.iter().map(|&v| v >= threshold).collect()
}

pub fn binarize(e: &[f64]) -> Vec<bool> {
    binarize_with(e, BINARIZE_THRESHOLD)
}

/// Gradient of the loss with respect to the micro-convolution, given
/// `grad_e = ∂L/∂E`. `τ` is treated as a constant.
pub fn strategy_grad(k: &MicroConv, map: &InfluenceMap, e: &[f64], grad_e: &[f64], beta: f64) -> Result<MicroConvGrad> {
    check_slab(k, map)?;
    if e.len() != map.channels() || grad_e.len() != map.channels() {
        return Err(Error::shape("strategy_grad", &[e.len(), grad_e.len()], &[map.channels()]));
    }
    let mut kernel = vec![0.0; k.kernel.len()];
    let mut bias = 0.0;
    for c in 0..map.channels() {
        let ds = grad_e[c] * beta * e[c] * (1.0 - e[c]);
        if ds == 0.0 {
            continue;
        }
        bias += ds;
        for (g, m) in kernel.iter_mut().zip(map.slab(c)) {
            *g += ds * m;
        }
    }
    Ok(MicroConvGrad {
        kernel: Tensor::new(k.kernel.shape().to_vec(), kernel)?,
        bias,
    })
}

/// Centering offset placing exactly `prune_count` of `s` below it: the
/// midpoint between the last score to prune and the first to keep. With
/// nothing to prune it sits `margin` below the smallest score.
pub fn centering_offset(s: &[f64], prune_count: usize, margin: f64) -> f64 {
    let mut sorted = s.to_vec();
    sorted.sort_by(f64::total_cmp);
    match prune_count {
        0 => sorted[0] - margin,
        m if m >= sorted.len() => sorted[sorted.len() - 1] + margin,
        m => 0.5 * (sorted[m - 1] + sorted[m]),
    }
}

/// Soft, hard and target strategy of one layer plus recent history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyState {
    pub e: Vec<f64>,
    pub b: Vec<bool>,
    pub t: Vec<bool>,
    pub tau: f64,
    pub beta: f64,
    pub history: VecDeque<Vec<f64>>,
    pub capacity: usize,
}

impl StrategyState {
    pub fn new(t: Vec<bool>, capacity: usize) -> Self {
        let c = t.len();
        StrategyState {
            e: vec![0.5; c],
            b: vec![true; c],
            t,
            tau: 0.0,
            beta: 0.0,
            history: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn channels(&self) -> usize {
        self.t.len()
    }

    /// Sets `E` and derives `B` from it.
    pub fn update(&mut self, e: Vec<f64>, threshold: f64) {
        self.b = binarize_with(&e, threshold);
        self.e = e;
    }

    /// Appends the current `E` to the history ring.
    pub fn snapshot(&mut self) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(self.e.clone());
    }

    pub fn kept_target(&self) -> usize {
        self.t.iter().filter(|&&t| t).count()
    }

    pub fn kept_actual(&self) -> usize {
        self.b.iter().filter(|&&b| b).count()
    }
}
