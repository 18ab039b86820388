//! Global threshold, target strategies, the λ rule, β annealing,
//! convergence detection and physical compaction.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::ChannelInfluence;
use crate::nn::Model;

/// Model-wide pruning cut: a channel is pruned when its key
/// `(influence, layer, channel)` is lexicographically ≤ the cut key.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub theta: f64,
    pub last_layer: usize,
    pub last_channel: usize,
    /// Number of channels marked when the cut was computed.
    pub marked: usize,
}

impl Threshold {
    /// A bare threshold: everything with influence ≤ θ is pruned.
    pub fn at(theta: f64) -> Self {
        Threshold {
            theta,
            last_layer: usize::MAX,
            last_channel: usize::MAX,
            marked: 0,
        }
    }

    pub fn prunes(&self, layer: usize, channel: usize, influence: f64) -> bool {
        match influence.total_cmp(&self.theta) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => (layer, channel) <= (self.last_layer, self.last_channel),
        }
    }
}

fn key_cmp(a: &(usize, usize, f64), b: &(usize, usize, f64)) -> Ordering {
    a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
}

/// Marks the `⌈r·N⌉` least influential channels of the whole model. Ties
/// are broken by `(layer, channel)` ascending.
pub fn global_threshold(channels: &[(usize, usize, f64)], r: f64) -> Result<Threshold> {
    if channels.is_empty() {
        return Err(Error::invalid("global_threshold: no channels"));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(Error::invalid(format!("compression rate {r} outside [0, 1)")));
    }
    if let Some(bad) = channels.iter().find(|c| !c.2.is_finite()) {
        return Err(Error::invalid(format!("non-finite influence {} at layer {} channel {}", bad.2, bad.0, bad.1)));
    }
    let count = (r * channels.len() as f64).ceil() as usize;
    if count == 0 {
        let min = channels.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
        return Ok(Threshold {
            theta: min - min.abs().max(1.0),
            last_layer: 0,
            last_channel: 0,
            marked: 0,
        });
    }
    let mut sorted = channels.to_vec();
    sorted.sort_by(key_cmp);
    let (layer, channel, theta) = sorted[count - 1];
    Ok(Threshold {
        theta,
        last_layer: layer,
        last_channel: channel,
        marked: count,
    })
}

/// Channels kept when a layer would otherwise be emptied.
pub fn fallback_keep(channels: usize, r: f64) -> usize {
    ((0.2 * (1.0 - r) * channels as f64).ceil() as usize).clamp(1, channels.max(1))
}

/// `T[k] = true` for channels that survive the cut. A layer with no
/// survivors instead keeps its [`fallback_keep`] most influential channels.
pub fn target_vector(influence: &ChannelInfluence, cut: &Threshold, r: f64) -> Vec<bool> {
    let values = &influence.values;
    let mut t: Vec<bool> = values
        .iter()
        .enumerate()
        .map(|(k, &v)| !cut.prunes(influence.layer, k, v))
        .collect();
    if !values.is_empty() && !t.contains(&true) {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        for &k in order.iter().take(fallback_keep(values.len(), r)) {
            t[k] = true;
        }
    }
    t
}

/// Default gain of the λ rule.
pub const LAMBDA_GAIN: f64 = 5.0;

/// `gain·|T/C + B/C − 1|` when `1 − B/C ≥ T/C`, otherwise 0. `T` and `B` are
/// the kept-channel counts of the target and actual strategies. Evaluated on
/// the counts, so the boundary and the value are exact up to one rounding.
pub fn lambda_value(t_count: usize, b_count: usize, channels: usize, gain: f64) -> f64 {
    if channels >= b_count + t_count {
        gain * (channels - b_count - t_count) as f64 / channels as f64
    } else {
        0.0
    }
}

/// Geometric β annealing with a stall boost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub total_steps: usize,
    pub current_step: usize,
    pub stall_boost_factor: f64,
    pub patience: usize,
    /// Product of all boosts applied so far.
    pub boost: f64,
    stalled_checks: usize,
}

impl BetaSchedule {
    pub fn new(beta_start: f64, end_factor: f64, total_steps: usize) -> Result<Self> {
        if !(beta_start > 0.0) || !(end_factor >= 1.0) || total_steps == 0 {
            return Err(Error::invalid(format!(
                "β schedule needs β_start > 0, end factor ≥ 1 and steps ≥ 1 (got {beta_start}, {end_factor}, {total_steps})"
            )));
        }
        Ok(BetaSchedule {
            beta_start,
            beta_end: beta_start * end_factor,
            total_steps,
            current_step: 0,
            stall_boost_factor: 2.0,
            patience: 3,
            boost: 1.0,
            stalled_checks: 0,
        })
    }

    pub fn with_stall(mut self, factor: f64, patience: usize) -> Self {
        self.stall_boost_factor = factor.max(1.0);
        self.patience = patience.max(1);
        self
    }

    pub fn advance(&mut self) {
        self.current_step += 1;
    }

    pub fn finished(&self) -> bool {
        self.current_step >= self.total_steps
    }

    /// Records one convergence check. A stalled check only counts once the
    /// base schedule has run out; after `patience` of them in a row, every
    /// later β is multiplied by the boost factor. Returns whether a boost
    /// fired.
    pub fn observe(&mut self, stalled: bool) -> bool {
        if !stalled || !self.finished() {
            self.stalled_checks = 0;
            return false;
        }
        self.stalled_checks += 1;
        if self.stalled_checks >= self.patience {
            self.stalled_checks = 0;
            self.boost *= self.stall_boost_factor;
            return true;
        }
        false
    }
}

/// `β_start·(β_end/β_start)^(step/total)` times the accumulated boost; the
/// step saturates at `total_steps`.
pub fn beta_at(schedule: &BetaSchedule) -> f64 {
    let progress = schedule.current_step.min(schedule.total_steps) as f64 / schedule.total_steps as f64;
    schedule.beta_start * (schedule.beta_end / schedule.beta_start).powf(progress) * schedule.boost
}

/// `‖E − T‖²`.
pub fn strategy_loss(e: &[f64], t: &[bool]) -> Result<f64> {
    if e.len() != t.len() {
        return Err(Error::shape("strategy_loss", &[e.len()], &[t.len()]));
    }
    Ok(e.iter()
        .zip(t)
        .map(|(&v, &t)| {
            let d = v - if t { 1.0 } else { 0.0 };
            d * d
        })
        .sum())
}

/// True when the last `window` snapshots are all within `delta_bin` of
/// binary and share one hard pattern.
pub fn has_converged<'a, I>(history: I, delta_bin: f64, window: usize) -> bool
where
    I: IntoIterator<Item = &'a Vec<f64>>,
    I::IntoIter: DoubleEndedIterator,
{
    let recent: Vec<&Vec<f64>> = history.into_iter().rev().take(window).collect();
    if window == 0 || recent.len() < window {
        return false;
    }
    let pattern = |e: &Vec<f64>| e.iter().map(|&v| v >= 0.5).collect::<Vec<_>>();
    let first = pattern(recent[0]);
    recent
        .iter()
        .all(|e| e.iter().all(|&v| v.min(1.0 - v) <= delta_bin) && pattern(e) == first)
}

/// Target plan for the whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub r: f64,
    pub threshold: Threshold,
    /// One target vector per prunable layer, in slot order.
    pub targets: Vec<Vec<bool>>,
}

impl CompressionPlan {
    /// Builds the plan from per-layer channel influence given in slot order.
    pub fn from_influence(influence: &[ChannelInfluence], r: f64) -> Result<Self> {
        let all: Vec<(usize, usize, f64)> = influence
            .iter()
            .flat_map(|ci| ci.values.iter().enumerate().map(move |(k, &v)| (ci.layer, k, v)))
            .collect();
        let threshold = global_threshold(&all, r)?;
        let targets = influence.iter().map(|ci| target_vector(ci, &threshold, r)).collect();
        Ok(CompressionPlan { r, threshold, targets })
    }

    pub fn total_channels(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }

    pub fn kept_channels(&self) -> usize {
        self.targets.iter().flatten().filter(|&&t| t).count()
    }
}

/// Physically removes every channel whose `keep` entry is false, along with
/// its bias, batch-norm entries and the matching inputs of its consumer, and
/// strips all mask and gate machinery. `keep` is given in
/// [`Model::prunable_slots`] order and each layer's gate must already equal
/// it exactly.
pub fn compact(mut model: Model, keep: &[Vec<bool>]) -> Result<Model> {
    let slots = model.prunable_slots();
    if slots.len() != keep.len() {
        return Err(Error::invalid(format!(
            "compact: {} strategies for {} prunable layers",
            keep.len(),
            slots.len()
        )));
    }
    for (slot, b) in slots.iter().zip(keep) {
        let layer = model.slot(*slot)?;
        if b.len() != layer.out_channels() {
            return Err(Error::shape("compact", &[b.len()], &[layer.out_channels()]));
        }
        if !b.contains(&true) {
            return Err(Error::invalid(format!("compact: {slot} would keep no channels")));
        }
        if let Some(instr) = layer.instrumentation() {
            let settled = instr
                .gate
                .iter()
                .zip(b)
                .all(|(&g, &k)| g == if k { 1.0 } else { 0.0 });
            if !settled {
                return Err(Error::invalid(format!(
                    "compact: strategy of {slot} has not converged to its binary gate"
                )));
            }
        }
    }
    for (slot, b) in slots.iter().zip(keep) {
        if b.iter().all(|&k| k) {
            continue;
        }
        let idx: Vec<usize> = b.iter().enumerate().filter_map(|(i, &k)| k.then_some(i)).collect();
        model.narrow_slot(*slot, &idx)?;
    }
    model.strip_instrumentation();
    model.clear_caches();
    Ok(model)
}
