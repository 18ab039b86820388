//! Command-line surface. Diagnostics go to stderr, data to files.
//!
//! Exit codes: 0 success, 1 user error, 2 internal invariant violation.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{parse_config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::influence::channel_influence;
use crate::report::write_atomic;
use crate::trainer::{evaluate, load_datasets, measure_influence, write_report_files, Cursor, Pipeline, PipelineState};

#[derive(Debug, Parser)]
#[command(name = "chanprune", version, about = "Influence-guided channel pruning for small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed (overrides `seed`; ignored when resuming a checkpoint).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Progress messages on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the baseline model; writes `baseline.ckpt`.
    Train,
    /// Measure influence, fix the plan and prune every layer in turn.
    Prune,
    /// Fine-tune the pruned model, compact it and write the report.
    Finetune,
    /// Print the test accuracy of a checkpoint's model.
    Eval,
    /// Re-emit `report.json` and `report.csv` from a finished checkpoint.
    Report,
    /// Write per-channel influence, sorted ascending, to `influence.csv`.
    InspectInfluence,
    /// Every stage from scratch (or from `--checkpoint`) to the report.
    Run,
}

fn user(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invariant(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn config_for(cli: &Cli, from_checkpoint: Option<&ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut config = match (&cli.config, from_checkpoint) {
        (Some(path), _) => parse_config(path)?,
        (None, Some(c)) => c.clone(),
        (None, None) => return Err(user("--config is required")),
    };
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if from_checkpoint.is_none() {
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
    }
    Ok(config)
}

fn resume(cli: &Cli) -> Result<Pipeline> {
    let path = cli.checkpoint.as_ref().ok_or_else(|| user("--checkpoint is required"))?;
    let mut state = PipelineState::load(path)?;
    let config = config_for(cli, Some(&state.config))?;
    state.config.out_dir = config.out_dir.clone();
    let mut pipeline = Pipeline::resume(state)?;
    pipeline.verbose = cli.verbose;
    pipeline.checkpoint_dir = Some(config.out_dir);
    Ok(pipeline)
}

fn fresh_or_resume(cli: &Cli) -> Result<Pipeline> {
    if cli.checkpoint.is_some() {
        return resume(cli);
    }
    let config = config_for(cli, None)?;
    config.write_effective(&config.out_dir.join("effective-config.toml"))?;
    let mut pipeline = Pipeline::new(config.clone())?;
    pipeline.verbose = cli.verbose;
    pipeline.checkpoint_dir = Some(config.out_dir);
    Ok(pipeline)
}

fn out_dir(p: &Pipeline) -> &Path {
    &p.state.config.out_dir
}

fn run(cli: &Cli) -> Result<()> {
    match cli.command {
        Command::Train => {
            let mut p = fresh_or_resume(cli)?;
            if p.state.cursor != Cursor::Fresh {
                return Err(user("checkpoint is past the baseline stage"));
            }
            p.advance()?;
            eprintln!("baseline accuracy {:.2}%", p.state.baseline_acc.unwrap_or(f64::NAN));
        }
        Command::Prune => {
            let mut p = resume(cli)?;
            if matches!(p.state.cursor, Cursor::Fresh | Cursor::Finetuned | Cursor::Done) {
                return Err(user(format!("cannot prune from the `{}` stage", p.state.cursor.label())));
            }
            let n = p.state.model.prunable_slots().len();
            p.run_until(Cursor::Pruned(n))?;
        }
        Command::Finetune => {
            let mut p = resume(cli)?;
            let n = p.state.model.prunable_slots().len();
            if p.state.cursor != Cursor::Pruned(n) {
                return Err(user(format!("fine-tuning needs a fully pruned checkpoint, got `{}`", p.state.cursor.label())));
            }
            let report = p.run()?;
            write_report_files(&report, out_dir(&p))?;
            eprintln!("pruned accuracy {:.2}% (drop {:.2})", report.pruned_acc, report.acc_drop);
        }
        Command::Run => {
            let mut p = fresh_or_resume(cli)?;
            let report = p.run()?;
            write_report_files(&report, out_dir(&p))?;
            eprintln!(
                "baseline {:.2}%, pruned {:.2}%, {:.1}% FLOPs removed",
                report.baseline_acc, report.pruned_acc, report.flops_reduction
            );
        }
        Command::Eval => {
            let path = cli.checkpoint.as_ref().ok_or_else(|| user("--checkpoint is required"))?;
            let mut state = PipelineState::load(path)?;
            let config = config_for(cli, Some(&state.config))?;
            let (_, test) = load_datasets(&config)?;
            let acc = evaluate(&mut state.model, &test, config.eval_batch_size)?;
            println!("{acc:.2}");
        }
        Command::Report => {
            let p = resume(cli)?;
            let mut report = p.state.report.clone().ok_or_else(|| user("checkpoint has no finished report"))?;
            report.phase_seconds = p.state.phase_seconds.clone();
            write_report_files(&report, out_dir(&p))?;
        }
        Command::InspectInfluence => inspect_influence(cli)?,
    }
    Ok(())
}

fn inspect_influence(cli: &Cli) -> Result<()> {
    let mut p = fresh_or_resume(cli)?;
    if !p.state.model.is_instrumented() {
        return Err(user("the checkpoint's model is compacted and carries no masks"));
    }
    let rows = influence_rows(&mut p)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "channel", "influence"]).map_err(|e| user(e.to_string()))?;
    for (layer, channel, v) in &rows {
        w.write_record([layer.to_string(), channel.to_string(), v.to_string()])
            .map_err(|e| user(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| user(e.to_string()))?;
    let path = out_dir(&p).join("influence.csv");
    write_atomic(&path, &bytes)?;
    eprintln!("{} channels written to {}", rows.len(), path.display());
    Ok(())
}

/// `(layer, channel, influence)` for every prunable channel, ascending by
/// influence with ties broken by `(layer, channel)`. Layers are numbered in
/// prunable-slot order. Measured on the pipeline's next training epoch
/// without advancing it.
pub fn influence_rows(p: &mut Pipeline) -> Result<Vec<(usize, usize, f64)>> {
    let c = p.state.config.clone();
    let stream = crate::data::BatchStream::train(c.batch_size, c.seed).with_augmentation(c.crop_pad, c.flip);
    let mut list = crate::data::batches(&p.train, &stream, p.state.data_epoch)?;
    if c.measure_batches > 0 {
        list.truncate(c.measure_batches);
    }
    let maps = measure_influence(&mut p.state.model, &list)?;
    let mut rows: Vec<(usize, usize, f64)> = maps
        .iter()
        .flat_map(|m| {
            channel_influence(m, c.influence_mode)
                .values
                .into_iter()
                .enumerate()
                .map(move |(k, v)| (m.layer, k, v))
        })
        .collect();
    rows.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    Ok(rows)
}
