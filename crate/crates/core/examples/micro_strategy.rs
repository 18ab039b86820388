//! A learned strategy on a fixed influence map: the micro-convolution scores
//! each channel and the scaled sigmoid hardens as β grows.

use chanprune::controller::{beta_at, BetaSchedule};
use chanprune::influence::{binarize, micro_conv_score, scaled_sigmoid, InfluenceMap, MicroConv};
use chanprune::Tensor;

fn main() -> chanprune::Result<()> {
    // six channels with a 2×3×3 slab each; channel k has uniform magnitude k
    let map = InfluenceMap {
        layer: 0,
        values: Tensor::from_fn(&[6, 2, 3, 3], |i| (i / 18) as f64),
        sample_count: 1,
    };
    let micro = MicroConv::uniform(&[2, 3, 3], 1.0);
    let scores = micro_conv_score(&micro, &map)?;
    let tau = 0.5 * (scores[1] + scores[2]);
    println!("scores {scores:?}, τ {tau}");

    let mut schedule = BetaSchedule::new(0.01, 100.0, 8)?;
    while !schedule.finished() {
        let beta = beta_at(&schedule);
        let e = scaled_sigmoid(beta, &scores, tau);
        let shown: Vec<String> = e.iter().map(|v| format!("{v:.3}")).collect();
        println!("β {beta:>7.4}  E [{}]", shown.join(", "));
        schedule.advance();
    }
    let e = scaled_sigmoid(beta_at(&schedule) * 50.0, &scores, tau);
    println!("B {:?}", binarize(&e));
    Ok(())
}
