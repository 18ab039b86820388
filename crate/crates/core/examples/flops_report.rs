//! Per-layer MAC counts of the bundled architectures.

use chanprune::nn::Model;
use chanprune::report::count_flops;

fn main() -> chanprune::Result<()> {
    let models = [
        ("tiny-cnn", Model::tiny_cnn(&[1, 28, 28], 10, &[8, 16, 24, 32], 0)?),
        ("lenet", Model::lenet(&[1, 28, 28], 10, 0)?),
        ("vgg16", Model::vgg16(&[3, 32, 32], 10, 0)?),
        ("resnet56", Model::resnet(&[3, 32, 32], 10, &[16, 32, 64], 9, 0)?),
    ];
    for (name, model) in &models {
        let count = count_flops(model)?;
        println!("{name:<9} {:>12} FLOPs  {:>9} params  {} layers", count.flops(), model.param_count(), count.layers.len());
    }
    let tiny = count_flops(&models[0].1)?;
    for l in &tiny.layers {
        println!("  {:<10} {:>9} MACs", l.name, l.macs);
    }
    Ok(())
}
