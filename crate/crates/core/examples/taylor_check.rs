//! First-order check: removing a small fraction δ of a weight changes the
//! loss by about −δ·I, with a residual that shrinks quadratically. A weight
//! whose perturbation crosses a ReLU or max-pool kink breaks the pattern, so
//! the median over several weights is reported.

use chanprune::data::{synthetic, Split};
use chanprune::nn::{softmax_cross_entropy, Mode, Model};
use chanprune::Tensor;

fn loss(model: &mut Model, x: &Tensor, labels: &[usize]) -> f64 {
    softmax_cross_entropy(&model.forward(x).unwrap(), labels).unwrap().0
}

fn scaled(model: &Model, layer: usize, index: usize, factor: f64) -> Model {
    let mut probe = model.clone();
    let mut at = 0;
    probe.for_each_masked_mut(&mut |l| {
        if at == layer {
            l.weight_mut().value.data_mut()[index] *= factor;
        }
        at += 1;
    });
    probe
}

fn main() -> chanprune::Result<()> {
    let ds = synthetic(2, 64, 10, &[1, 12, 12], Split::Train)?;
    let (x, labels) = ds.gather(&(0..64).collect::<Vec<_>>());
    let mut model = Model::tiny_cnn(&[1, 12, 12], 10, &[4, 4, 4, 4], 2)?;
    model.set_mode(Mode::Eval);

    model.zero_grad();
    model.zero_mask_grads();
    let (base, g) = softmax_cross_entropy(&model.forward(&x)?, &labels)?;
    model.backward(&g)?;
    let influence = model.masked_layers()[1].instrumentation().unwrap().mask_grad.clone();
    println!("loss {base:.6}");

    let deltas = [1e-3, 5e-4, 2.5e-4];
    let mut ratios = vec![Vec::new(); 2];
    for index in 0..20 {
        let i = influence.data()[index];
        let residuals: Vec<f64> = deltas
            .iter()
            .map(|&d| (loss(&mut scaled(&model, 1, index, 1.0 - d), &x, &labels) - base + d * i).abs())
            .collect();
        if residuals.contains(&0.0) {
            continue;
        }
        println!("weight {index:>2}: I {i:+.3e}, residuals {:.3e} {:.3e} {:.3e}", residuals[0], residuals[1], residuals[2]);
        ratios[0].push(residuals[0] / residuals[1]);
        ratios[1].push(residuals[1] / residuals[2]);
    }
    for r in &mut ratios {
        r.sort_by(f64::total_cmp);
    }
    println!("median residual ratio per halving: {:.3}, {:.3}", ratios[0][ratios[0].len() / 2], ratios[1][ratios[1].len() / 2]);
    Ok(())
}
