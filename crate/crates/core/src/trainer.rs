//! Baseline training, layer-by-layer prune-while-training with the joint
//! loss, fine-tuning, compaction and evaluation, as a resumable pipeline.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::controller::{
    beta_at, compact, has_converged, lambda_value, strategy_loss, BetaSchedule, CompressionPlan,
};
use crate::data::{self, batches, Batch, BatchStream, Dataset, Split};
use crate::error::{Error, Result};
use crate::influence::{
    capture_influence, centering_offset, channel_influence, ema_merge, micro_conv_score, scaled_sigmoid,
    strategy_grad, ChannelInfluence, InfluenceMap, MicroConv, StrategyState,
};
use crate::nn::{sgd_step, softmax_cross_entropy, Arch, Mode, Model, SlotKind, SlotPath};
use crate::report::{count_flops, emit_report, LayerRetention, ReportFormat, RunReport};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseKind {
    Baseline,
    /// Index into the model's prunable slots.
    Prune(usize),
    Finetune,
}

/// Step decay: `initial · decay^(number of milestones ≤ epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decay: 1.0,
            milestones: Vec::new(),
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: PhaseKind,
    pub epochs: usize,
    pub lr: LrSchedule,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub classification_loss: f64,
    pub strategy_loss: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Kept fraction (`B` popcount / channels) of the active layer.
    pub retention: Vec<f64>,
    pub accuracy: Option<f64>,
}

impl StepMetrics {
    pub fn total_loss(&self) -> f64 {
        self.classification_loss + self.lambda * self.strategy_loss
    }
}

/// Optimiser and rule constants for [`train_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_gain: f64,
    pub binarize_threshold: f64,
    pub micro_lr: f64,
    pub micro_momentum: f64,
}

impl StepOptions {
    pub fn from_config(config: &ExperimentConfig, learning_rate: f64) -> Self {
        StepOptions {
            learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            lambda_gain: config.lambda_gain,
            binarize_threshold: config.binarize_threshold,
            micro_lr: config.micro_lr,
            micro_momentum: config.micro_momentum,
        }
    }
}

/// Strategy-learning state of the layer currently being pruned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPruner {
    pub slot: SlotPath,
    pub micro: MicroConv,
    /// Running (EMA) influence of the layer.
    pub running: InfluenceMap,
    /// `running` as fed to the micro-convolution.
    pub normalized: InfluenceMap,
    pub state: StrategyState,
    pub schedule: BetaSchedule,
    pub steps: usize,
}

impl LayerPruner {
    pub fn new(slot: SlotPath, running: InfluenceMap, target: Vec<bool>, schedule: BetaSchedule, score_scale: f64, window: usize) -> Result<Self> {
        if target.len() != running.channels() {
            return Err(Error::shape("layer pruner", &[target.len()], &[running.channels()]));
        }
        let micro = MicroConv::uniform(running.slab_shape(), score_scale);
        let normalized = running.normalized_magnitude();
        let mut pruner = LayerPruner {
            slot,
            micro,
            running,
            normalized,
            state: StrategyState::new(target, window),
            schedule,
            steps: 0,
        };
        pruner.recenter()?;
        pruner.state.beta = beta_at(&pruner.schedule);
        let e = pruner.strategy()?;
        pruner.state.update(e, 0.0);
        Ok(pruner)
    }

    pub fn scores(&self) -> Result<Vec<f64>> {
        micro_conv_score(&self.micro, &self.normalized)
    }

    /// Number of channels the target removes.
    pub fn prune_count(&self) -> usize {
        self.state.channels() - self.state.kept_target()
    }

    /// Re-places τ so that exactly the target's number of channels score
    /// below it.
    pub fn recenter(&mut self) -> Result<()> {
        let s = self.scores()?;
        let margin = s.iter().map(|v| v.abs()).sum::<f64>() / s.len() as f64;
        self.state.tau = centering_offset(&s, self.prune_count(), margin.max(1e-12));
        Ok(())
    }

    /// Current soft strategy `E`.
    pub fn strategy(&self) -> Result<Vec<f64>> {
        Ok(scaled_sigmoid(beta_at(&self.schedule), &self.scores()?, self.state.tau))
    }

    /// Folds a fresh measurement into the running map and recenters.
    pub fn absorb(&mut self, fresh: &InfluenceMap, rho: f64) -> Result<()> {
        self.running = ema_merge(&self.running, fresh, rho)?;
        self.normalized = self.running.normalized_magnitude();
        self.recenter()
    }
}

/// One optimisation step. Without an active layer this is plain SGD on the
/// classification loss. With one, the layer is gated by its soft strategy,
/// the joint loss `CE + λ·‖E − T‖²` is minimised, the micro-convolution is
/// updated and β advances.
pub fn train_step(model: &mut Model, batch: &Batch, mut active: Option<&mut LayerPruner>, opts: &StepOptions) -> Result<StepMetrics> {
    if batch.labels.is_empty() {
        return Err(Error::invalid("train_step: empty batch"));
    }
    let mut metrics = StepMetrics::default();
    if let Some(p) = active.as_deref_mut() {
        let e = p.strategy()?;
        p.state.beta = beta_at(&p.schedule);
        p.state.update(e, opts.binarize_threshold);
        model.set_gate(p.slot, &p.state.e)?;
    }
    model.set_mode(Mode::Train);
    model.zero_grad();
    let logits = model.forward(&batch.images)?;
    let (ce, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
    model.backward(&grad)?;
    metrics.classification_loss = ce;

    if let Some(p) = active {
        let st = &p.state;
        let c = st.channels();
        let lambda = lambda_value(st.kept_target(), st.kept_actual(), c, opts.lambda_gain);
        let sl = strategy_loss(&st.e, &st.t)?;
        let gate_grad = model
            .slot(p.slot)?
            .instrumentation()
            .map(|i| i.gate_grad.clone())
            .ok_or_else(|| Error::invalid(format!("{} carries no gate", p.slot)))?;
        let grad_e: Vec<f64> = (0..c)
            .map(|k| {
                let t = if st.t[k] { 1.0 } else { 0.0 };
                gate_grad[k] + lambda * 2.0 * (st.e[k] - t)
            })
            .collect();
        let g = strategy_grad(&p.micro, &p.normalized, &st.e, &grad_e, st.beta)?;
        p.micro.apply(&g, opts.micro_lr, opts.micro_momentum)?;
        p.schedule.advance();
        p.steps += 1;
        metrics.lambda = lambda;
        metrics.strategy_loss = sl;
        metrics.beta = st.beta;
        metrics.retention = vec![st.kept_actual() as f64 / c as f64];
    }
    sgd_step(model, opts.learning_rate, opts.momentum, opts.weight_decay);
    Ok(metrics)
}

/// Top-1 accuracy in percent, evaluated with running batch-norm statistics.
pub fn evaluate(model: &mut Model, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluate: empty dataset"));
    }
    let previous = model.mode;
    model.set_mode(Mode::Eval);
    let mut correct = 0usize;
    for batch in batches(dataset, &BatchStream::eval(batch_size.max(1)), 0)? {
        let logits = model.forward(&batch.images)?;
        correct += predictions(&logits).iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    model.set_mode(previous);
    model.clear_caches();
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

/// Arg-max per row (first maximum wins).
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Influence of every prunable layer, accumulated over `batch_list` with
/// eval-mode batch norm and no parameter update.
pub fn measure_influence(model: &mut Model, batch_list: &[Batch]) -> Result<Vec<InfluenceMap>> {
    if batch_list.is_empty() {
        return Err(Error::invalid("measure_influence: no batches"));
    }
    let previous = model.mode;
    model.set_mode(Mode::Eval);
    model.zero_mask_grads();
    for batch in batch_list {
        model.zero_grad();
        let logits = model.forward(&batch.images)?;
        let (_, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
        model.backward(&grad)?;
    }
    model.zero_grad();
    model.set_mode(previous);
    let slots = model.prunable_slots();
    slots
        .iter()
        .enumerate()
        .map(|(i, &slot)| capture_influence(model.slot_mut(slot)?, i))
        .collect()
}

/// Where a pipeline stands; each stage ends with a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cursor {
    Fresh,
    Baseline,
    Measured,
    /// This many prunable layers have been pruned.
    Pruned(usize),
    Finetuned,
    Done,
}

impl Cursor {
    pub fn label(&self) -> String {
        match self {
            Cursor::Fresh => "fresh".into(),
            Cursor::Baseline => "baseline".into(),
            Cursor::Measured => "measured".into(),
            Cursor::Pruned(k) => format!("prune-{k}"),
            Cursor::Finetuned => "finetuned".into(),
            Cursor::Done => "final".into(),
        }
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineState {
    pub config: ExperimentConfig,
    pub model: Model,
    pub cursor: Cursor,
    /// Next epoch index of the training stream (the shuffle and
    /// augmentation RNG counter).
    pub data_epoch: u64,
    pub baseline_acc: Option<f64>,
    pub baseline_flops: u64,
    pub baseline_params: usize,
    pub baseline_maps: Vec<InfluenceMap>,
    pub plan: Option<CompressionPlan>,
    /// Finished strategies, one per pruned layer.
    pub strategies: Vec<StrategyState>,
    pub report: Option<RunReport>,
    pub phase_seconds: Vec<(String, f64)>,
}

impl PipelineState {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.put_raw("config", self.config.dump().into_bytes());
        ck.put("state", self)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut state: PipelineState = ck.get("state")?;
        state.model.trace_shapes()?;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint()?, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// Train and test splits named by the configuration.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match config.dataset.as_str() {
        "mnist" => (
            data::load_mnist_dir(&config.data_dir, Split::Train)?,
            data::load_mnist_dir(&config.data_dir, Split::Test)?,
        ),
        "cifar10" => (
            data::load_cifar10_dir(&config.data_dir, Split::Train)?,
            data::load_cifar10_dir(&config.data_dir, Split::Test)?,
        ),
        "synthetic" => {
            let n = |v: usize, d: usize| if v == 0 { d } else { v };
            (
                data::synthetic(config.seed, n(config.train_subset, 1000), 10, &[1, 12, 12], Split::Train)?,
                data::synthetic(config.seed, n(config.test_subset, 500), 10, &[1, 12, 12], Split::Test)?,
            )
        }
        other => return Err(Error::invalid(format!("unknown dataset `{other}`"))),
    };
    Ok((train.take(config.train_subset), test.take(config.test_subset)))
}

pub fn build_model(config: &ExperimentConfig, image_shape: &[usize], classes: usize) -> Result<Model> {
    match config.arch()? {
        Arch::TinyCnn => Model::tiny_cnn(image_shape, classes, &config.tiny_widths, config.seed),
        arch => Model::build(&arch, image_shape, classes, config.seed),
    }
}

/// A staged, checkpointed run of the whole method.
pub struct Pipeline {
    pub state: PipelineState,
    pub train: Dataset,
    pub test: Dataset,
    /// Directory for per-stage checkpoints; `None` disables saving.
    pub checkpoint_dir: Option<PathBuf>,
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let (train, test) = load_datasets(&config)?;
        let model = build_model(&config, train.image_shape(), train.classes)?;
        Ok(Self::with_data(config, model, train, test))
    }

    pub fn with_data(config: ExperimentConfig, model: Model, train: Dataset, test: Dataset) -> Self {
        Pipeline {
            state: PipelineState {
                config,
                model,
                cursor: Cursor::Fresh,
                data_epoch: 0,
                baseline_acc: None,
                baseline_flops: 0,
                baseline_params: 0,
                baseline_maps: Vec::new(),
                plan: None,
                strategies: Vec::new(),
                report: None,
                phase_seconds: Vec::new(),
            },
            train,
            test,
            checkpoint_dir: None,
            verbose: false,
        }
    }

    /// Continues from a saved state, reloading the datasets it names.
    pub fn resume(state: PipelineState) -> Result<Self> {
        let (train, test) = load_datasets(&state.config)?;
        Ok(Self::resume_with_data(state, train, test))
    }

    pub fn resume_with_data(state: PipelineState, train: Dataset, test: Dataset) -> Self {
        Pipeline {
            state,
            train,
            test,
            checkpoint_dir: None,
            verbose: false,
        }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn stream(&self) -> BatchStream {
        let c = &self.state.config;
        BatchStream::train(c.batch_size, c.seed).with_augmentation(c.crop_pad, c.flip)
    }

    fn next_epoch(&mut self) -> Result<Vec<Batch>> {
        let epoch = self.state.data_epoch;
        self.state.data_epoch += 1;
        let out = batches(&self.train, &self.stream(), epoch)?;
        if out.is_empty() {
            return Err(Error::invalid("training set is smaller than one batch"));
        }
        Ok(out)
    }

    fn train_epochs(&mut self, phase: &Phase) -> Result<()> {
        for epoch in 0..phase.epochs {
            let opts = StepOptions::from_config(&self.state.config, phase.lr.at(epoch));
            let mut loss = 0.0;
            let list = self.next_epoch()?;
            for batch in &list {
                loss += train_step(&mut self.state.model, batch, None, &opts)?.classification_loss;
            }
            self.log(format!("{:?} epoch {epoch}: loss {:.4}", phase.kind, loss / list.len() as f64));
        }
        Ok(())
    }

    pub fn baseline_phase(&self) -> Phase {
        let c = &self.state.config;
        let milestones = c
            .lr_milestones
            .iter()
            .map(|m| (m * c.baseline_epochs as f64).floor() as usize)
            .collect();
        Phase {
            kind: PhaseKind::Baseline,
            epochs: c.baseline_epochs,
            lr: LrSchedule {
                initial: c.lr,
                decay: c.lr_decay,
                milestones,
            },
        }
    }

    fn pruner_for(&self, index: usize) -> Result<LayerPruner> {
        let c = &self.state.config;
        let slot = self.state.model.prunable_slots()[index];
        let plan = self.state.plan.as_ref().ok_or_else(|| Error::invalid("no compression plan"))?;
        let (start, steps) = match slot.kind() {
            SlotKind::Conv => (c.beta_start, c.beta_steps),
            SlotKind::Linear => (c.beta_start_fc, c.beta_steps_fc),
        };
        let schedule = BetaSchedule::new(start, c.beta_end_factor, steps)?.with_stall(c.stall_boost, c.patience);
        LayerPruner::new(
            slot,
            self.state.baseline_maps[index].clone(),
            plan.targets[index].clone(),
            schedule,
            c.score_scale,
            c.window,
        )
    }

    /// Anneals one layer's strategy while training with the joint loss until
    /// it is binary and stable, then fixes the layer's gate to `B`.
    pub fn prune_layer(&mut self, index: usize) -> Result<StrategyState> {
        let mut pruner = self.pruner_for(index)?;
        let c = self.state.config.clone();
        let opts = StepOptions::from_config(&c, c.prune_lr);
        self.state.model.zero_mask_grads();
        let mut since_refresh = 0usize;
        loop {
            let list = self.next_epoch()?;
            let window = if c.influence_batches == 0 { list.len() } else { c.influence_batches };
            for batch in &list {
                let m = train_step(&mut self.state.model, batch, Some(&mut pruner), &opts)?;
                since_refresh += 1;
                if since_refresh == window {
                    since_refresh = 0;
                    let fresh = capture_influence(self.state.model.slot_mut(pruner.slot)?, index)?;
                    pruner.absorb(&fresh, c.ema_rho)?;
                }
                if pruner.steps % c.check_every != 0 {
                    continue;
                }
                pruner.state.e = pruner.strategy()?;
                pruner.state.update(pruner.state.e.clone(), c.binarize_threshold);
                pruner.state.snapshot();
                let history = &pruner.state.history;
                let binary = has_converged(history, c.delta_bin, c.window);
                // values that look binary but are neither pruned nor fully on
                let undecided = pruner
                    .state
                    .e
                    .iter()
                    .any(|&v| v >= c.binarize_threshold && v <= c.delta_bin);
                if binary && !undecided {
                    self.log(format!(
                        "{}: converged after {} steps, kept {}/{} (target {}), β {:.3}",
                        pruner.slot,
                        pruner.steps,
                        pruner.state.kept_actual(),
                        pruner.state.channels(),
                        pruner.state.kept_target(),
                        m.beta
                    ));
                    let gate: Vec<f64> = pruner.state.b.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                    self.state.model.set_gate(pruner.slot, &gate)?;
                    return Ok(pruner.state);
                }
                let stalled = history.len() >= c.window && {
                    let pattern = |e: &Vec<f64>| e.iter().map(|&v| v >= 0.5).collect::<Vec<_>>();
                    let last = pattern(history.back().expect("non-empty"));
                    history.iter().rev().take(c.window).all(|e| pattern(e) == last)
                };
                if pruner.schedule.observe(stalled) {
                    self.log(format!("{}: stall, β boost now ×{}", pruner.slot, pruner.schedule.boost));
                }
                if pruner.steps >= c.max_prune_steps {
                    return Err(Error::NotConverged {
                        layer: index,
                        steps: pruner.steps,
                        snapshot: pruner.state.e.clone(),
                    });
                }
            }
        }
    }

    fn checkpoint(&self) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            let path = dir.join(format!("{}.ckpt", self.state.cursor.label()));
            self.state.save(&path)?;
            self.log(format!("checkpoint {}", path.display()));
        }
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.state.cursor == Cursor::Done
    }

    /// Runs the next stage and checkpoints. Returns the new cursor.
    pub fn advance(&mut self) -> Result<Cursor> {
        let started = Instant::now();
        let slots = self.state.model.prunable_slots().len();
        let c = self.state.config.clone();
        let next = match self.state.cursor {
            Cursor::Fresh => {
                let phase = self.baseline_phase();
                self.train_epochs(&phase)?;
                let acc = evaluate(&mut self.state.model, &self.test, c.eval_batch_size)?;
                self.log(format!("baseline accuracy {acc:.2}%"));
                self.state.baseline_acc = Some(acc);
                self.state.baseline_flops = count_flops(&self.state.model)?.flops();
                self.state.baseline_params = self.state.model.param_count();
                Cursor::Baseline
            }
            Cursor::Baseline => {
                let mut list = self.next_epoch()?;
                if c.measure_batches > 0 {
                    list.truncate(c.measure_batches);
                }
                let maps = measure_influence(&mut self.state.model, &list)?;
                let influence: Vec<ChannelInfluence> =
                    maps.iter().map(|m| channel_influence(m, c.influence_mode)).collect();
                let plan = CompressionPlan::from_influence(&influence, c.r)?;
                self.log(format!(
                    "θ = {:.6e}, keeping {}/{} channels",
                    plan.threshold.theta,
                    plan.kept_channels(),
                    plan.total_channels()
                ));
                self.state.baseline_maps = maps;
                self.state.plan = Some(plan);
                Cursor::Measured
            }
            Cursor::Measured | Cursor::Pruned(_) => {
                let done = match self.state.cursor {
                    Cursor::Pruned(k) => k,
                    _ => 0,
                };
                if done == slots {
                    let phase = Phase {
                        kind: PhaseKind::Finetune,
                        epochs: c.finetune_epochs,
                        lr: LrSchedule::constant(c.finetune_lr),
                    };
                    self.train_epochs(&phase)?;
                    Cursor::Finetuned
                } else {
                    let st = self.prune_layer(done)?;
                    self.state.strategies.push(st);
                    Cursor::Pruned(done + 1)
                }
            }
            Cursor::Finetuned => {
                self.finish()?;
                Cursor::Done
            }
            Cursor::Done => return Ok(Cursor::Done),
        };
        self.state
            .phase_seconds
            .push((next.label(), started.elapsed().as_secs_f64()));
        self.state.cursor = next;
        self.checkpoint()?;
        Ok(next)
    }

    fn finish(&mut self) -> Result<()> {
        let c = self.state.config.clone();
        let keep: Vec<Vec<bool>> = self.state.strategies.iter().map(|s| s.b.clone()).collect();
        let before: Vec<usize> = self
            .state
            .model
            .prunable_slots()
            .iter()
            .map(|&s| self.state.model.slot(s).map(|l| l.out_channels()))
            .collect::<Result<_>>()?;
        let model = compact(self.state.model.clone(), &keep)?;
        self.state.model = model;
        let acc = evaluate(&mut self.state.model, &self.test, c.eval_batch_size)?;
        self.log(format!("pruned accuracy {acc:.2}%"));
        let layers = self
            .state
            .model
            .prunable_slots()
            .iter()
            .zip(&before)
            .zip(&self.state.strategies)
            .map(|((&slot, &b), st)| {
                Ok(LayerRetention {
                    layer: slot.to_string(),
                    channels_before: b,
                    channels_after: self.state.model.slot(slot)?.out_channels(),
                    target_kept: st.kept_target(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let report = RunReport::new(
            &c.model,
            &c.dataset,
            self.state.baseline_acc.unwrap_or(f64::NAN),
            acc,
            (self.state.baseline_flops, count_flops(&self.state.model)?.flops()),
            (self.state.baseline_params, self.state.model.param_count()),
            c.r,
            layers,
            c.dump(),
        );
        self.state.report = Some(report);
        Ok(())
    }

    /// Runs every remaining stage and returns the report.
    pub fn run(&mut self) -> Result<RunReport> {
        while !self.is_done() {
            self.advance()?;
        }
        let mut report = self.state.report.clone().ok_or_else(|| Error::Invariant("finished without a report".into()))?;
        report.phase_seconds = self.state.phase_seconds.clone();
        Ok(report)
    }

    /// Runs until the cursor equals `stop` (or the run ends).
    pub fn run_until(&mut self, stop: Cursor) -> Result<()> {
        while self.state.cursor != stop && !self.is_done() {
            self.advance()?;
        }
        Ok(())
    }
}

/// Full pipeline from a configuration, writing checkpoints, the effective
/// configuration and the report files into `config.out_dir`.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunReport> {
    let out = config.out_dir.clone();
    config.write_effective(&out.join("effective-config.toml"))?;
    let mut pipeline = Pipeline::new(config.clone())?;
    pipeline.checkpoint_dir = Some(out.clone());
    let report = pipeline.run()?;
    write_report_files(&report, &out)?;
    Ok(report)
}

pub fn write_report_files(report: &RunReport, dir: &Path) -> Result<()> {
    emit_report(report, ReportFormat::Json, dir.join("report.json"))?;
    emit_report(report, ReportFormat::Csv, dir.join("report.csv"))
}
