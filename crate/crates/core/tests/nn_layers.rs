mod common;

use chanprune::data::Batch;
use chanprune::influence::capture_influence;
use chanprune::nn::{sgd_step, softmax_cross_entropy, MaskedConv, MaskedLayer, Model, SlotPath, FREEZE_THRESHOLD};
use chanprune::trainer::{train_step, StepOptions};
use chanprune::Tensor;
use common::{random, rng};
use proptest::prelude::*;

fn scalar_conv(w: f64) -> MaskedConv {
    MaskedConv::from_parts(Tensor::full(&[1, 1, 1, 1], w), Tensor::zeros(&[1]), 1, 0)
}

#[test]
fn scalar_network_by_hand() {
    // x = 2, W = 3, loss = y²/2 → ∂L/∂y = 6, ∂L/∂M = 6·2·3 = 36
    let mut layer = scalar_conv(3.0);
    let y = layer.masked_forward(&Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
    assert_eq!(y.data(), &[6.0]);
    layer.masked_backward(&Tensor::full(&[1, 1, 1, 1], 6.0)).unwrap();
    let instr = layer.instr.as_ref().unwrap();
    assert_eq!(instr.mask_grad.data(), &[36.0]);
    assert_eq!(layer.weight.grad.data()[0] * 3.0, 36.0);
    assert_eq!(instr.mask.data(), &[1.0]);
}

#[test]
fn scalar_influence_is_divided_by_batch() {
    // a batch of four copies under the mean loss: each contributes 36/4
    let mut layer = scalar_conv(3.0);
    let y = layer.masked_forward(&Tensor::full(&[4, 1, 1, 1], 2.0)).unwrap();
    let grad = y.scale(1.0 / 4.0);
    layer.masked_backward(&grad).unwrap();
    let map = capture_influence(&mut layer, 0).unwrap();
    assert_eq!(map.sample_count, 4);
    assert!((map.values.data()[0] - 36.0 / 4.0).abs() < 1e-12);
    assert_eq!(layer.instr.as_ref().unwrap().mask_samples, 0);
    assert!(capture_influence(&mut layer, 0).is_err());
}

#[test]
fn gate_scales_scalar_output() {
    let mut layer = scalar_conv(3.0);
    layer.instr.as_mut().unwrap().gate = vec![0.5];
    let y = layer.masked_forward(&Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
    assert_eq!(y.data(), &[3.0]);
}

fn batch(seed: u64, n: usize, shape: &[usize]) -> Batch {
    let mut r = rng(seed);
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Batch {
        images: random(&mut r, &full),
        labels: (0..n).map(|i| i % 10).collect(),
        indices: (0..n).collect(),
    }
}

fn opts(lr: f64) -> StepOptions {
    StepOptions {
        learning_rate: lr,
        momentum: 0.9,
        weight_decay: 5e-4,
        lambda_gain: 5.0,
        binarize_threshold: 1e-6,
        micro_lr: 0.0,
        micro_momentum: 0.0,
    }
}

/// Plain momentum SGD written out against an uninstrumented copy.
fn vanilla_step(model: &mut Model, b: &Batch, lr: f64) {
    model.zero_grad();
    let logits = model.forward(&b.images).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &b.labels).unwrap();
    model.backward(&g).unwrap();
    model.for_each_param_group(&mut |p, _| {
        for i in 0..p.value.len() {
            let v = 0.9 * p.velocity.data()[i] + p.grad.data()[i] + 5e-4 * p.value.data()[i];
            p.velocity.data_mut()[i] = v;
            p.value.data_mut()[i] -= lr * v;
        }
    });
}

#[test]
fn instrumented_training_equals_vanilla_sgd() {
    let shape = [1, 8, 8];
    let mut gated = Model::tiny_cnn(&shape, 10, &[4, 4, 4, 4], 9).unwrap();
    let mut plain = gated.clone();
    plain.strip_instrumentation();
    for step in 0..5 {
        let b = batch(step, 6, &shape);
        train_step(&mut gated, &b, None, &opts(0.05)).unwrap();
        vanilla_step(&mut plain, &b, 0.05);
    }
    let mut a = Vec::new();
    gated.for_each_param_group(&mut |p, _| a.extend_from_slice(p.value.data()));
    let mut b = Vec::new();
    plain.for_each_param_group(&mut |p, _| b.extend_from_slice(p.value.data()));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn mask_never_changes_during_training() {
    let shape = [1, 8, 8];
    let mut model = Model::tiny_cnn(&shape, 10, &[4, 4, 4, 4], 10).unwrap();
    for step in 0..3 {
        train_step(&mut model, &batch(step, 4, &shape), None, &opts(0.1)).unwrap();
    }
    for layer in model.masked_layers() {
        let instr = layer.instrumentation().unwrap();
        assert!(instr.mask.data().iter().all(|&m| m == 1.0));
        assert_eq!(instr.mask_grad.shape(), layer.weight().value.shape());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frozen_filters_keep_their_weights(
        gates in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..FREEZE_THRESHOLD, FREEZE_THRESHOLD..=1.0], 4),
        seed in 0u64..1000,
    ) {
        let shape = [1, 8, 8];
        let mut model = Model::tiny_cnn(&shape, 10, &[4, 4, 4, 4], seed).unwrap();
        model.set_gate(SlotPath::Conv(0), &gates).unwrap();
        let before = match &model.layers[0] {
            chanprune::nn::Layer::Conv(u) => u.conv.weight.value.clone(),
            _ => unreachable!(),
        };
        let b = batch(seed, 4, &shape);
        model.zero_grad();
        let logits = model.forward(&b.images).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &b.labels).unwrap();
        model.backward(&g).unwrap();
        sgd_step(&mut model, 0.1, 0.9, 5e-4);
        let after = match &model.layers[0] {
            chanprune::nn::Layer::Conv(u) => u.conv.weight.value.clone(),
            _ => unreachable!(),
        };
        let slab = before.len() / 4;
        for (k, &gate) in gates.iter().enumerate() {
            let same = before.data()[k * slab..(k + 1) * slab] == after.data()[k * slab..(k + 1) * slab];
            if gate < FREEZE_THRESHOLD {
                prop_assert!(same, "filter {} with gate {} moved", k, gate);
            }
        }
    }

    #[test]
    fn gates_outside_unit_interval_are_rejected(g in prop_oneof![-10.0f64..-1e-9, 1.0f64 + 1e-9..10.0]) {
        let mut model = Model::tiny_cnn(&[1, 8, 8], 10, &[4, 4, 4, 4], 0).unwrap();
        prop_assert!(model.set_gate(SlotPath::Conv(0), &[g, 1.0, 1.0, 1.0]).is_err());
    }
}
