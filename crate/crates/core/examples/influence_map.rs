//! Weight influence of a conv layer from its mask gradient, checked against
//! the weight gradient times the weight.

use chanprune::influence::{capture_influence, channel_influence, InfluenceMode};
use chanprune::nn::{MaskedConv, MaskedLayer};
use chanprune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> chanprune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut conv = MaskedConv::new(3, 6, 3, 1, 1, &mut rng);
    let x = Tensor::from_fn(&[4, 3, 8, 8], |_| rng.gen_range(-1.0..1.0));

    let y = conv.masked_forward(&x)?;
    // loss = mean(y²)/2
    let grad = y.scale(1.0 / y.len() as f64);
    conv.masked_backward(&grad)?;

    let w = conv.weight.value.clone();
    let direct = Tensor::from_fn(w.shape(), |i| conv.weight.grad.data()[i] * w.data()[i]);
    let map = capture_influence(&mut conv, 0)?;
    println!("samples {}", map.sample_count);
    println!("max |∂L/∂M − grad_W⊙W/n| = {:.2e}", map.values.max_abs_diff(&direct.scale(0.25))?);

    let ci = channel_influence(&map, InfluenceMode::Absolute);
    for (k, v) in ci.values.iter().enumerate() {
        println!("channel {k}: {v:.6}");
    }
    Ok(())
}
