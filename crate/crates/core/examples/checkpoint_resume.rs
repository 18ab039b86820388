//! Stop a run after the first pruned layer, reload the checkpoint, finish,
//! and compare with an uninterrupted run.

use chanprune::config::ExperimentConfig;
use chanprune::trainer::{Cursor, Pipeline, PipelineState};

fn config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: "synthetic".into(),
        tiny_widths: [8, 8, 8, 8],
        r: 0.25,
        batch_size: 32,
        baseline_epochs: 8,
        lr: 0.05,
        finetune_epochs: 1,
        influence_batches: 4,
        measure_batches: 4,
        check_every: 4,
        seed: 5,
        ..ExperimentConfig::default()
    }
}

fn main() -> chanprune::Result<()> {
    let dir = std::env::temp_dir().join("chanprune-resume-example");
    let mut first = Pipeline::new(config())?;
    first.checkpoint_dir = Some(dir.clone());
    first.run_until(Cursor::Pruned(1))?;
    let path = dir.join(Cursor::Pruned(1).label() + ".ckpt");
    println!("stopped at {}", path.display());

    let state = PipelineState::load(&path)?;
    let resumed = Pipeline::resume(state)?.run()?;
    let whole = Pipeline::new(config())?.run()?;
    println!("resumed: {:.2}% → {:.2}%", resumed.baseline_acc, resumed.pruned_acc);
    println!("whole:   {:.2}% → {:.2}%", whole.baseline_acc, whole.pruned_acc);
    println!("identical outcome: {}", resumed.same_outcome(&whole));
    Ok(())
}
