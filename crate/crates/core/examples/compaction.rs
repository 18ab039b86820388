//! Physically removing gated-off channels leaves the eval-mode function
//! unchanged and shrinks the parameter count.

use chanprune::controller::compact;
use chanprune::nn::{Mode, Model};
use chanprune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> chanprune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = Model::tiny_cnn(&[1, 12, 12], 10, &[8, 8, 8, 8], 3)?;
    let mut keep = Vec::new();
    for slot in model.prunable_slots() {
        let b: Vec<bool> = (0..8).map(|k| k == 0 || rng.gen_bool(0.6)).collect();
        let gate: Vec<f64> = b.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        model.set_gate(slot, &gate)?;
        keep.push(b);
    }
    let mut small = compact(model.clone(), &keep)?;

    let x = Tensor::from_fn(&[16, 1, 12, 12], |_| rng.gen_range(-1.0..1.0));
    model.set_mode(Mode::Eval);
    small.set_mode(Mode::Eval);
    let diff = model.forward(&x)?.max_abs_diff(&small.forward(&x)?)?;
    println!("params {} → {}", model.param_count(), small.param_count());
    println!("max |Δlogit| {diff:.2e}");
    Ok(())
}
