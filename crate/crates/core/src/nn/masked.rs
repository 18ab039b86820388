use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::optim::{select_axis0, select_axis1, Param};
use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, gemm_nn, gemm_nt, gemm_tn, hadamard, Tensor};

/// Mask filter, its gradient accumulator and the channel gate of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instrumentation {
    /// All-ones, same shape as the weights. Never updated.
    pub mask: Tensor,
    /// Accumulated `∂L/∂M`, equal to `Σ grad_W ⊙ W` over the window.
    pub mask_grad: Tensor,
    /// Number of examples that contributed to `mask_grad`.
    pub mask_samples: usize,
    /// Multiplier per output channel, in `[0, 1]`.
    pub gate: Vec<f64>,
    /// Accumulated `∂L/∂gate`.
    pub gate_grad: Vec<f64>,
}

impl Instrumentation {
    fn new(weight_shape: &[usize]) -> Self {
        let channels = weight_shape[0];
        Instrumentation {
            mask: Tensor::ones(weight_shape),
            mask_grad: Tensor::zeros(weight_shape),
            mask_samples: 0,
            gate: vec![1.0; channels],
            gate_grad: vec![0.0; channels],
        }
    }

    pub fn zero_mask_grad(&mut self) {
        self.mask_grad.fill(0.0);
        self.mask_samples = 0;
    }

    fn select_outputs(&self, keep: &[usize]) -> Self {
        Instrumentation {
            mask: select_axis0(&self.mask, keep),
            mask_grad: select_axis0(&self.mask_grad, keep),
            mask_samples: self.mask_samples,
            gate: keep.iter().map(|&k| self.gate[k]).collect(),
            gate_grad: keep.iter().map(|&k| self.gate_grad[k]).collect(),
        }
    }

    fn select_inputs(&self, keep: &[usize], group: usize) -> Self {
        Instrumentation {
            mask: select_axis1(&self.mask, keep, group),
            mask_grad: select_axis1(&self.mask_grad, keep, group),
            ..self.clone()
        }
    }

    /// `∂L/∂gate[k] = ⟨grad channel k, pre-gate channel k⟩`; returns the
    /// gradient flowing to the pre-gate activations.
    fn backward_gate(&mut self, pre_gate: &Tensor, grad: &Tensor) -> (Tensor, Vec<f64>) {
        let channels = self.gate.len();
        let plane = grad.len() / (grad.shape()[0] * channels);
        let mut step = vec![0.0; channels];
        let mut out = grad.clone();
        for (chunk_idx, (g, pre)) in out.data_mut().chunks_mut(plane).zip(pre_gate.data().chunks(plane)).enumerate() {
            let k = chunk_idx % channels;
            step[k] += g.iter().zip(pre).map(|(a, b)| a * b).sum::<f64>();
            let gate = self.gate[k];
            g.iter_mut().for_each(|v| *v *= gate);
        }
        for (acc, s) in self.gate_grad.iter_mut().zip(&step) {
            *acc += s;
        }
        (out, step)
    }

    /// Records `∂L/∂(M⊙W) ⊙ W` into the accumulator and returns `∂L/∂W`.
    fn backward_mask(&mut self, weight: &Tensor, grad_effective: &Tensor, batch: usize) -> Result<Tensor> {
        self.mask_grad.add_assign(&hadamard(grad_effective, weight)?)?;
        self.mask_samples += batch;
        hadamard(grad_effective, &self.mask)
    }
}

fn apply_gate(gate: &[f64], y: &Tensor) -> Tensor {
    let channels = gate.len();
    let plane = y.len() / (y.shape()[0] * channels);
    let mut out = y.clone();
    for (chunk_idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let g = gate[chunk_idx % channels];
        if g != 1.0 {
            chunk.iter_mut().for_each(|v| *v *= g);
        }
    }
    out
}

/// Common surface of the instrumented layers.
pub trait MaskedLayer {
    /// `op(M⊙W, x) + bias`, then output channel `k` scaled by `gate[k]`.
    fn masked_forward(&mut self, x: &Tensor) -> Result<Tensor>;

    /// Returns `(∂L/∂x, ∂L/∂gate)` for this call; parameter gradients and the
    /// mask gradient are accumulated in place.
    fn masked_backward(&mut self, grad_y: &Tensor) -> Result<(Tensor, Vec<f64>)>;

    fn weight(&self) -> &Param;
    fn weight_mut(&mut self) -> &mut Param;
    fn bias(&self) -> &Param;
    fn out_channels(&self) -> usize;
    fn instrumentation(&self) -> Option<&Instrumentation>;
    fn instrumentation_mut(&mut self) -> Option<&mut Instrumentation>;
}

#[derive(Clone, Debug, Default)]
struct Cache {
    input: Option<Tensor>,
    pre_gate: Option<Tensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskedConv {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    pub instr: Option<Instrumentation>,
    #[serde(skip)]
    cache: Cache,
}

impl MaskedConv {
    /// He-normal initialisation, zero bias, instrumented.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = Tensor::from_fn(&shape, |_| normal.sample(rng));
        Self::from_parts(weight, Tensor::zeros(&[out_channels]), stride, padding)
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        let instr = Some(Instrumentation::new(weight.shape()));
        MaskedConv {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            padding,
            instr,
            cache: Cache::default(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.value.shape()[2], self.weight.value.shape()[3])
    }

    fn effective_weight(&self) -> Result<Tensor> {
        match &self.instr {
            Some(instr) => hadamard(&instr.mask, &self.weight.value),
            None => Ok(self.weight.value.clone()),
        }
    }

    /// Convolution with the masked filter, before the gate.
    pub fn forward_ungated(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_forward(x, &self.effective_weight()?, &self.bias.value, self.stride, self.padding)?;
        self.cache.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward_ungated(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .input
            .take()
            .ok_or_else(|| Error::invalid("masked conv backward without a cached forward"))?;
        let effective = self.effective_weight()?;
        let (gx, g_eff, gb) = conv2d_backward(&x, &effective, grad_y, self.stride, self.padding)?;
        let gw = match &mut self.instr {
            Some(instr) => instr.backward_mask(&self.weight.value, &g_eff, x.shape()[0])?,
            None => g_eff,
        };
        self.weight.grad.add_assign(&gw)?;
        self.bias.grad.add_assign(&gb)?;
        Ok(gx)
    }

    pub fn gate_forward(&mut self, y: &Tensor) -> Tensor {
        match &self.instr {
            Some(instr) => {
                self.cache.pre_gate = Some(y.clone());
                apply_gate(&instr.gate, y)
            }
            None => y.clone(),
        }
    }

    pub fn gate_backward(&mut self, grad: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        match &mut self.instr {
            Some(instr) => {
                let pre = self
                    .cache
                    .pre_gate
                    .take()
                    .ok_or_else(|| Error::invalid("gate backward without a cached forward"))?;
                Ok(instr.backward_gate(&pre, grad))
            }
            None => Ok((grad.clone(), Vec::new())),
        }
    }

    pub(crate) fn select_outputs(&self, keep: &[usize]) -> Self {
        MaskedConv {
            weight: self.weight.select_outputs(keep),
            bias: self.bias.select_outputs(keep),
            stride: self.stride,
            padding: self.padding,
            instr: self.instr.as_ref().map(|i| i.select_outputs(keep)),
            cache: Cache::default(),
        }
    }

    pub(crate) fn select_inputs(&self, keep: &[usize]) -> Self {
        MaskedConv {
            weight: self.weight.select_inputs(keep, 1),
            bias: self.bias.clone(),
            stride: self.stride,
            padding: self.padding,
            instr: self.instr.as_ref().map(|i| i.select_inputs(keep, 1)),
            cache: Cache::default(),
        }
    }

    pub(crate) fn strip(&mut self) {
        self.instr = None;
        self.cache = Cache::default();
    }
}

impl MaskedLayer for MaskedConv {
    fn masked_forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_ungated(x)?;
        Ok(self.gate_forward(&y))
    }

    fn masked_backward(&mut self, grad_y: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if self.cache.input.is_none() {
            return Err(Error::invalid("masked conv backward without a cached forward"));
        }
        let (grad_pre, grad_gate) = self.gate_backward(grad_y)?;
        Ok((self.backward_ungated(&grad_pre)?, grad_gate))
    }

    fn weight(&self) -> &Param {
        &self.weight
    }
    fn weight_mut(&mut self) -> &mut Param {
        &mut self.weight
    }
    fn bias(&self) -> &Param {
        &self.bias
    }
    fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
    fn instrumentation(&self) -> Option<&Instrumentation> {
        self.instr.as_ref()
    }
    fn instrumentation_mut(&mut self) -> Option<&mut Instrumentation> {
        self.instr.as_mut()
    }
}

/// Fully connected layer, weights `[out, in]`, input `[N, in]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskedLinear {
    pub weight: Param,
    pub bias: Param,
    pub instr: Option<Instrumentation>,
    #[serde(skip)]
    cache: Cache,
}

impl MaskedLinear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / in_features as f64).sqrt()).expect("positive std");
        let weight = Tensor::from_fn(&[out_features, in_features], |_| normal.sample(rng));
        Self::from_parts(weight, Tensor::zeros(&[out_features]))
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Self {
        let instr = Some(Instrumentation::new(weight.shape()));
        MaskedLinear {
            weight: Param::new(weight),
            bias: Param::new(bias),
            instr,
            cache: Cache::default(),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn effective_weight(&self) -> Result<Tensor> {
        match &self.instr {
            Some(instr) => hadamard(&instr.mask, &self.weight.value),
            None => Ok(self.weight.value.clone()),
        }
    }

    pub fn forward_ungated(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out_f, in_f) = (self.out_channels(), self.in_features());
        if x.rank() != 2 || x.shape()[1] != in_f {
            return Err(Error::shape("linear", x.shape(), self.weight.value.shape()));
        }
        let n = x.shape()[0];
        let w = self.effective_weight()?;
        let mut y = vec![0.0; n * out_f];
        gemm_nt(n, in_f, out_f, x.data(), w.data(), &mut y);
        for row in y.chunks_mut(out_f) {
            row.iter_mut().zip(self.bias.value.data()).for_each(|(v, b)| *v += b);
        }
        self.cache.input = Some(x.clone());
        Tensor::new(vec![n, out_f], y)
    }

    pub fn backward_ungated(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .input
            .take()
            .ok_or_else(|| Error::invalid("masked linear backward without a cached forward"))?;
        let (out_f, in_f) = (self.out_channels(), self.in_features());
        let n = x.shape()[0];
        if grad_y.shape() != [n, out_f] {
            return Err(Error::shape("linear backward", grad_y.shape(), &[n, out_f]));
        }
        let w = self.effective_weight()?;
        let mut g_eff = vec![0.0; out_f * in_f];
        gemm_tn(n, out_f, in_f, grad_y.data(), x.data(), &mut g_eff);
        let g_eff = Tensor::new(vec![out_f, in_f], g_eff)?;
        let mut gb = vec![0.0; out_f];
        for row in grad_y.data().chunks(out_f) {
            gb.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
        let mut gx = vec![0.0; n * in_f];
        gemm_nn(n, out_f, in_f, grad_y.data(), w.data(), &mut gx);

        let gw = match &mut self.instr {
            Some(instr) => instr.backward_mask(&self.weight.value, &g_eff, n)?,
            None => g_eff,
        };
        self.weight.grad.add_assign(&gw)?;
        self.bias.grad.add_assign(&Tensor::new(vec![out_f], gb)?)?;
        Tensor::new(vec![n, in_f], gx)
    }

    pub fn gate_forward(&mut self, y: &Tensor) -> Tensor {
        match &self.instr {
            Some(instr) => {
                self.cache.pre_gate = Some(y.clone());
                apply_gate(&instr.gate, y)
            }
            None => y.clone(),
        }
    }

    pub fn gate_backward(&mut self, grad: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        match &mut self.instr {
            Some(instr) => {
                let pre = self
                    .cache
                    .pre_gate
                    .take()
                    .ok_or_else(|| Error::invalid("gate backward without a cached forward"))?;
                Ok(instr.backward_gate(&pre, grad))
            }
            None => Ok((grad.clone(), Vec::new())),
        }
    }

    pub(crate) fn select_outputs(&self, keep: &[usize]) -> Self {
        MaskedLinear {
            weight: self.weight.select_outputs(keep),
            bias: self.bias.select_outputs(keep),
            instr: self.instr.as_ref().map(|i| i.select_outputs(keep)),
            cache: Cache::default(),
        }
    }

    /// `group` is the number of flattened positions per upstream channel.
    pub(crate) fn select_inputs(&self, keep: &[usize], group: usize) -> Self {
        MaskedLinear {
            weight: self.weight.select_inputs(keep, group),
            bias: self.bias.clone(),
            instr: self.instr.as_ref().map(|i| i.select_inputs(keep, group)),
            cache: Cache::default(),
        }
    }

    pub(crate) fn strip(&mut self) {
        self.instr = None;
        self.cache = Cache::default();
    }
}

impl MaskedLayer for MaskedLinear {
    fn masked_forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_ungated(x)?;
        Ok(self.gate_forward(&y))
    }

    fn masked_backward(&mut self, grad_y: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if self.cache.input.is_none() {
            return Err(Error::invalid("masked linear backward without a cached forward"));
        }
        let (grad_pre, grad_gate) = self.gate_backward(grad_y)?;
        Ok((self.backward_ungated(&grad_pre)?, grad_gate))
    }

    fn weight(&self) -> &Param {
        &self.weight
    }
    fn weight_mut(&mut self) -> &mut Param {
        &mut self.weight
    }
    fn bias(&self) -> &Param {
        &self.bias
    }
    fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
    fn instrumentation(&self) -> Option<&Instrumentation> {
        self.instr.as_ref()
    }
    fn instrumentation_mut(&mut self) -> Option<&mut Instrumentation> {
        self.instr.as_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_conv(w: f64) -> MaskedConv {
        MaskedConv::from_parts(Tensor::full(&[1, 1, 1, 1], w), Tensor::zeros(&[1]), 1, 0)
    }

    #[test]
    fn scalar_gate_scaling() {
        let x = Tensor::full(&[1, 1, 1, 1], 2.0);
        let mut conv = scalar_conv(3.0);
        assert_eq!(conv.masked_forward(&x).unwrap().data(), &[6.0]);
        conv.instr.as_mut().unwrap().gate[0] = 0.5;
        assert_eq!(conv.masked_forward(&x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn scalar_chain_rule() {
        // loss = y²/2 with y = M·W·x = 6
        let x = Tensor::full(&[1, 1, 1, 1], 2.0);
        let mut conv = scalar_conv(3.0);
        let y = conv.masked_forward(&x).unwrap();
        let grad_y = y.clone();
        let (gx, gg) = conv.masked_backward(&grad_y).unwrap();
        let instr = conv.instr.as_ref().unwrap();
        assert_eq!(instr.mask_grad.data(), &[36.0]);
        assert_eq!(conv.weight.grad.data(), &[12.0]);
        assert_eq!(conv.weight.grad.data()[0] * 3.0, 36.0);
        assert_eq!(gx.data(), &[18.0]);
        assert_eq!(gg, vec![36.0]);
        assert_eq!(instr.mask_samples, 1);
    }

    #[test]
    fn zero_weights_give_zero_mask_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = MaskedConv::from_parts(Tensor::zeros(&[2, 3, 3, 3]), Tensor::zeros(&[2]), 1, 1);
        let x = Tensor::from_fn(&[2, 3, 5, 5], |_| rng.gen_range(-1.0..1.0));
        let y = conv.masked_forward(&x).unwrap();
        conv.masked_backward(&y.map(|_| 1.0)).unwrap();
        assert!(conv.instr.unwrap().mask_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hard_gate_zeroes_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = MaskedConv::new(2, 3, 3, 1, 1, &mut rng);
        conv.instr.as_mut().unwrap().gate[1] = 0.0;
        let x = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let y = conv.masked_forward(&x).unwrap();
        for n in 0..2 {
            for i in 0..16 {
                assert_eq!(y.data()[(n * 3 + 1) * 16 + i], 0.0);
            }
        }
    }

    #[test]
    fn instrumented_forward_is_bit_identical_to_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = MaskedConv::new(3, 4, 3, 1, 1, &mut rng);
        let x = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let plain = conv2d_forward(&x, &conv.weight.value, &conv.bias.value, 1, 1).unwrap();
        assert_eq!(conv.masked_forward(&x).unwrap(), plain);

        let mut lin = MaskedLinear::new(5, 3, &mut rng);
        let x = Tensor::from_fn(&[4, 5], |_| rng.gen_range(-1.0..1.0));
        let y = lin.masked_forward(&x).unwrap();
        let mut stripped = lin.clone();
        stripped.strip();
        assert_eq!(stripped.masked_forward(&x).unwrap(), y);
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let mut conv = scalar_conv(1.0);
        assert!(conv.masked_backward(&Tensor::ones(&[1, 1, 1, 1])).is_err());
        let mut lin = MaskedLinear::from_parts(Tensor::ones(&[1, 1]), Tensor::zeros(&[1]));
        assert!(lin.masked_backward(&Tensor::ones(&[1, 1])).is_err());
    }

    #[test]
    fn linear_shape_mismatch_is_rejected() {
        let mut lin = MaskedLinear::from_parts(Tensor::ones(&[2, 3]), Tensor::zeros(&[2]));
        assert!(lin.masked_forward(&Tensor::ones(&[4, 2])).is_err());
    }
}
