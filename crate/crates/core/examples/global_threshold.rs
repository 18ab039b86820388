//! One model-wide threshold marks ⌈r·N⌉ channels; targets are derived per
//! layer, with a fallback for layers that would lose everything.

use chanprune::controller::{global_threshold, CompressionPlan};
use chanprune::influence::ChannelInfluence;

fn main() -> chanprune::Result<()> {
    let layers = vec![
        ChannelInfluence { layer: 0, values: vec![0.9, 0.1, 0.7, 0.05] },
        ChannelInfluence { layer: 1, values: vec![1e-4, 2e-4, 3e-4, 4e-4, 5e-4] },
        ChannelInfluence { layer: 2, values: vec![0.3, 0.6, 0.2] },
    ];
    let flat: Vec<(usize, usize, f64)> = layers
        .iter()
        .flat_map(|l| l.values.iter().enumerate().map(move |(k, &v)| (l.layer, k, v)))
        .collect();
    let cut = global_threshold(&flat, 0.5)?;
    println!("θ = {:.4e}, {} of {} channels marked", cut.theta, cut.marked, flat.len());

    let plan = CompressionPlan::from_influence(&layers, 0.5)?;
    for (l, t) in plan.targets.iter().enumerate() {
        let bits: String = t.iter().map(|&k| if k { '1' } else { '0' }).collect();
        println!("layer {l}: T = {bits}");
    }
    println!("kept {}/{}", plan.kept_channels(), plan.total_channels());
    Ok(())
}
