//! End-to-end run: baseline, influence measurement, layer-by-layer pruning,
//! fine-tuning, compaction and report.
//!
//!     cargo run --release --example mnist_pipeline -- configs/mnist-desk.toml

use chanprune::config::parse_config;
use chanprune::trainer::{write_report_files, Pipeline};

fn main() -> chanprune::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "configs/mnist-desk.toml".into());
    let config = parse_config(&path)?;
    let out = config.out_dir.clone();
    config.write_effective(&out.join("effective-config.toml"))?;

    let mut pipeline = Pipeline::new(config)?;
    pipeline.verbose = true;
    pipeline.checkpoint_dir = Some(out.clone());
    let report = pipeline.run()?;
    write_report_files(&report, &out)?;

    println!("baseline  {:.2}%", report.baseline_acc);
    println!("pruned    {:.2}%  (drop {:.2})", report.pruned_acc, report.acc_drop);
    println!("channels  {:.1}% removed (target {:.1}%)", 100.0 * report.r_actual, 100.0 * report.r_target);
    println!("FLOPs     {:.1}% fewer", report.flops_reduction);
    for (phase, secs) in &report.phase_seconds {
        println!("  {phase:<10} {secs:6.1}s");
    }
    Ok(())
}
