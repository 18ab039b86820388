use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batchnorm::BatchNorm;
use super::functional::{global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, relu, relu_backward};
use super::masked::{MaskedConv, MaskedLayer, MaskedLinear};
use super::optim::Param;
use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    TinyCnn,
    LeNet,
    Vgg16,
    ResNet56,
    /// Hand-assembled networks (test fixtures, examples).
    Custom(String),
}

impl Arch {
    pub fn tag(&self) -> &str {
        match self {
            Arch::TinyCnn => "tiny-cnn",
            Arch::LeNet => "lenet",
            Arch::Vgg16 => "vgg16",
            Arch::ResNet56 => "resnet56",
            Arch::Custom(name) => name,
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "tiny-cnn" => Ok(Arch::TinyCnn),
            "lenet" => Ok(Arch::LeNet),
            "vgg16" => Ok(Arch::Vgg16),
            "resnet56" => Ok(Arch::ResNet56),
            other => Err(Error::invalid(format!(
                "unknown model `{other}` (expected tiny-cnn, lenet, vgg16 or resnet56)"
            ))),
        }
    }
}

/// Convolution, optional batch norm, channel gate, optional ReLU.
///
/// The gate multiplies post-BN activations, so a gate of exactly zero makes
/// the channel's output identically zero and removing it is exact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvUnit {
    pub conv: MaskedConv,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
    pub prunable: bool,
    #[serde(skip)]
    out: Option<Tensor>,
}

impl ConvUnit {
    pub fn new(conv: MaskedConv, batch_norm: bool, relu: bool, prunable: bool) -> Self {
        let bn = batch_norm.then(|| BatchNorm::new(conv.out_channels()));
        ConvUnit {
            conv,
            bn,
            relu,
            prunable,
            out: None,
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = self.conv.forward_ungated(x)?;
        if let Some(bn) = &mut self.bn {
            let gate = self.conv.instr.as_ref().map(|i| i.gate.as_slice());
            y = bn.forward(&y, mode, gate)?;
        }
        y = self.conv.gate_forward(&y);
        if self.relu {
            y = relu(&y);
            self.out = Some(y.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = if self.relu {
            let out = self.out.take().ok_or_else(|| Error::invalid("conv unit backward without forward"))?;
            relu_backward(&out, grad)?
        } else {
            grad.clone()
        };
        g = self.conv.gate_backward(&g)?.0;
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g)?;
        }
        self.conv.backward_ungated(&g)
    }

    fn select_outputs(&self, keep: &[usize]) -> Self {
        ConvUnit {
            conv: self.conv.select_outputs(keep),
            bn: self.bn.as_ref().map(|bn| bn.select(keep)),
            relu: self.relu,
            prunable: self.prunable,
            out: None,
        }
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param, Option<&[f64]>)) {
        let gate = self.conv.instr.as_ref().map(|i| i.gate.clone());
        let gate = gate.as_deref();
        f(&mut self.conv.weight, gate);
        f(&mut self.conv.bias, gate);
        if let Some(bn) = &mut self.bn {
            f(&mut bn.gamma, gate);
            f(&mut bn.beta, gate);
        }
    }

    fn clear_cache(&mut self) {
        self.out = None;
        if let Some(bn) = &mut self.bn {
            bn.clear_cache();
        }
    }
}

/// Linear layer, channel gate, optional ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearUnit {
    pub linear: MaskedLinear,
    pub relu: bool,
    pub prunable: bool,
    #[serde(skip)]
    out: Option<Tensor>,
}

impl LinearUnit {
    pub fn new(linear: MaskedLinear, relu: bool, prunable: bool) -> Self {
        LinearUnit {
            linear,
            relu,
            prunable,
            out: None,
        }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.linear.forward_ungated(x)?;
        let mut y = self.linear.gate_forward(&y);
        if self.relu {
            y = relu(&y);
            self.out = Some(y.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = if self.relu {
            let out = self.out.take().ok_or_else(|| Error::invalid("linear unit backward without forward"))?;
            relu_backward(&out, grad)?
        } else {
            grad.clone()
        };
        let g = self.linear.gate_backward(&g)?.0;
        self.linear.backward_ungated(&g)
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param, Option<&[f64]>)) {
        let gate = self.linear.instr.as_ref().map(|i| i.gate.clone());
        let gate = gate.as_deref();
        f(&mut self.linear.weight, gate);
        f(&mut self.linear.bias, gate);
    }
}

/// `relu(second(first(x)) + shortcut(x))`. Only `first` is prunable: the
/// block's output width is tied to the identity path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub first: ConvUnit,
    pub second: ConvUnit,
    pub shortcut: Option<ConvUnit>,
    #[serde(skip)]
    out: Option<Tensor>,
}

impl ResidualBlock {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let first = ConvUnit::new(MaskedConv::new(in_channels, out_channels, 3, stride, 1, rng), true, true, true);
        let second = ConvUnit::new(MaskedConv::new(out_channels, out_channels, 3, 1, 1, rng), true, false, false);
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            ConvUnit::new(MaskedConv::new(in_channels, out_channels, 1, stride, 0, rng), true, false, false)
        });
        ResidualBlock {
            first,
            second,
            shortcut,
            out: None,
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.first.forward(x, mode)?;
        let y = self.second.forward(&h, mode)?;
        let s = match &mut self.shortcut {
            Some(sc) => sc.forward(x, mode)?,
            None => x.clone(),
        };
        let out = relu(&y.add(&s)?);
        self.out = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let out = self.out.take().ok_or_else(|| Error::invalid("residual backward without forward"))?;
        let g = relu_backward(&out, grad)?;
        let gh = self.second.backward(&g)?;
        let mut gx = self.first.backward(&gh)?;
        let gs = match &mut self.shortcut {
            Some(sc) => sc.backward(&g)?,
            None => g,
        };
        gx.add_assign(&gs)?;
        Ok(gx)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoolLayer {
    pub size: usize,
    #[serde(skip)]
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer {
    Conv(ConvUnit),
    Linear(LinearUnit),
    MaxPool(PoolLayer),
    GlobalAvgPool,
    Flatten,
    Residual(ResidualBlock),
}

/// Location of a prunable masked layer inside a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotPath {
    Conv(usize),
    Linear(usize),
    /// The first convolution of the residual block at this index.
    BlockFirst(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Conv,
    Linear,
}

impl SlotPath {
    pub fn kind(&self) -> SlotKind {
        match self {
            SlotPath::Linear(_) => SlotKind::Linear,
            _ => SlotKind::Conv,
        }
    }

    pub fn layer_index(&self) -> usize {
        match *self {
            SlotPath::Conv(i) | SlotPath::Linear(i) | SlotPath::BlockFirst(i) => i,
        }
    }
}

impl std::fmt::Display for SlotPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SlotPath::Conv(i) => write!(f, "conv@{i}"),
            SlotPath::Linear(i) => write!(f, "fc@{i}"),
            SlotPath::BlockFirst(i) => write!(f, "block@{i}.conv1"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub arch: Arch,
    /// `[C, H, W]` of one example.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<Layer>,
    pub mode: Mode,
    #[serde(skip)]
    shapes: Vec<Vec<usize>>,
}

fn conv_bn_relu(cin: usize, cout: usize, k: usize, padding: usize, prunable: bool, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv(ConvUnit::new(MaskedConv::new(cin, cout, k, 1, padding, rng), true, true, prunable))
}

fn pool(size: usize) -> Layer {
    Layer::MaxPool(PoolLayer { size, cache: None })
}

impl Model {
    pub fn new(arch: Arch, input_shape: &[usize], classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut model = Model {
            arch,
            input_shape: input_shape.to_vec(),
            classes,
            layers,
            mode: Mode::Train,
            shapes: Vec::new(),
        };
        let out = model.trace_shapes()?;
        if out != [classes] {
            return Err(Error::invalid(format!(
                "model output shape {out:?} does not match {classes} classes"
            )));
        }
        Ok(model)
    }

    pub fn build(arch: &Arch, input_shape: &[usize], classes: usize, seed: u64) -> Result<Self> {
        match arch {
            Arch::TinyCnn => Self::tiny_cnn(input_shape, classes, &[8, 16, 16, 32], seed),
            Arch::LeNet => Self::lenet(input_shape, classes, seed),
            Arch::Vgg16 => Self::vgg16(input_shape, classes, seed),
            Arch::ResNet56 => Self::resnet(input_shape, classes, &[16, 32, 64], 9, seed),
            Arch::Custom(name) => Err(Error::invalid(format!("no builder for custom model `{name}`"))),
        }
    }

    /// Four conv-BN-ReLU layers (max-pooling after the first two), global
    /// average pooling and a linear classifier.
    pub fn tiny_cnn(input_shape: &[usize], classes: usize, widths: &[usize; 4], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = input_shape[0];
        let layers = vec![
            conv_bn_relu(c, widths[0], 3, 1, true, &mut rng),
            pool(2),
            conv_bn_relu(widths[0], widths[1], 3, 1, true, &mut rng),
            pool(2),
            conv_bn_relu(widths[1], widths[2], 3, 1, true, &mut rng),
            conv_bn_relu(widths[2], widths[3], 3, 1, true, &mut rng),
            Layer::GlobalAvgPool,
            Layer::Linear(LinearUnit::new(MaskedLinear::new(widths[3], classes, &mut rng), false, false)),
        ];
        Self::new(Arch::TinyCnn, input_shape, classes, layers)
    }

    /// Classic LeNet-5 without batch norm; 28×28 inputs are padded by 2.
    pub fn lenet(input_shape: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = if input_shape[1] == 28 { 2 } else { 0 };
        let conv = |cin, cout, pad, rng: &mut ChaCha8Rng| {
            Layer::Conv(ConvUnit::new(MaskedConv::new(cin, cout, 5, 1, pad, rng), false, true, true))
        };
        if input_shape.len() != 3 || input_shape[1] != input_shape[2] || input_shape[1] + 2 * pad < 14 {
            return Err(Error::invalid(format!("lenet needs square inputs of at least 14×14, got {input_shape:?}")));
        }
        let side = ((input_shape[1] + 2 * pad - 4) / 2 - 4) / 2;
        let layers = vec![
            conv(input_shape[0], 6, pad, &mut rng),
            pool(2),
            conv(6, 16, 0, &mut rng),
            pool(2),
            Layer::Flatten,
            Layer::Linear(LinearUnit::new(MaskedLinear::new(16 * side * side, 120, &mut rng), true, true)),
            Layer::Linear(LinearUnit::new(MaskedLinear::new(120, 84, &mut rng), true, true)),
            Layer::Linear(LinearUnit::new(MaskedLinear::new(84, classes, &mut rng), false, false)),
        ];
        Self::new(Arch::LeNet, input_shape, classes, layers)
    }

    /// VGG-16 with batch norm after every convolution, for 32×32 inputs.
    pub fn vgg16(input_shape: &[usize], classes: usize, seed: u64) -> Result<Self> {
        const CFG: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
        if input_shape.len() != 3 || input_shape[1] < 32 || input_shape[2] < 32 {
            return Err(Error::invalid(format!("vgg16 needs inputs of at least 32×32, got {input_shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = input_shape[0];
        for &width in &CFG {
            if width == 0 {
                layers.push(pool(2));
            } else {
                layers.push(conv_bn_relu(cin, width, 3, 1, true, &mut rng));
                cin = width;
            }
        }
        let flat = 512 * (input_shape[1] / 32) * (input_shape[2] / 32);
        layers.push(Layer::Flatten);
        layers.push(Layer::Linear(LinearUnit::new(MaskedLinear::new(flat, 512, &mut rng), true, true)));
        layers.push(Layer::Linear(LinearUnit::new(MaskedLinear::new(512, classes, &mut rng), false, false)));
        Self::new(Arch::Vgg16, input_shape, classes, layers)
    }

    /// CIFAR-style ResNet: a 3×3 stem, `blocks_per_stage` basic blocks per
    /// entry of `widths` (stride 2 at every stage change, 1×1 projection
    /// shortcuts), global average pooling and a linear classifier.
    pub fn resnet(input_shape: &[usize], classes: usize, widths: &[usize], blocks_per_stage: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![conv_bn_relu(input_shape[0], widths[0], 3, 1, false, &mut rng)];
        let mut cin = widths[0];
        for (stage, &width) in widths.iter().enumerate() {
            for b in 0..blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                layers.push(Layer::Residual(ResidualBlock::new(cin, width, stride, &mut rng)));
                cin = width;
            }
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Linear(LinearUnit::new(MaskedLinear::new(cin, classes, &mut rng), false, false)));
        let arch = if widths == [16, 32, 64] && blocks_per_stage == 9 {
            Arch::ResNet56
        } else {
            Arch::Custom(format!("resnet-{}x{}", widths.len(), blocks_per_stage))
        };
        Self::new(arch, input_shape, classes, layers)
    }

    /// Resolves and caches per-layer input shapes; returns the output shape
    /// of one example.
    pub fn trace_shapes(&mut self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shapes.push(shape.clone());
            let bad = |what: &str| Error::invalid(format!("layer {i}: {what} on input {shape:?}"));
            shape = match layer {
                Layer::Conv(u) => conv_out(&shape, &u.conv).ok_or_else(|| bad("convolution"))?,
                Layer::Residual(b) => {
                    let h = conv_out(&shape, &b.first.conv).ok_or_else(|| bad("block conv1"))?;
                    let y = conv_out(&h, &b.second.conv).ok_or_else(|| bad("block conv2"))?;
                    let s = match &b.shortcut {
                        Some(sc) => conv_out(&shape, &sc.conv).ok_or_else(|| bad("shortcut"))?,
                        None => shape.clone(),
                    };
                    if s != y {
                        return Err(bad("residual width"));
                    }
                    y
                }
                Layer::MaxPool(p) => {
                    if shape.len() != 3 || shape[1] < p.size || shape[2] < p.size {
                        return Err(bad("max pool"));
                    }
                    vec![shape[0], shape[1] / p.size, shape[2] / p.size]
                }
                Layer::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(bad("global pool"));
                    }
                    vec![shape[0]]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Linear(u) => {
                    if shape.len() != 1 || shape[0] != u.linear.in_features() {
                        return Err(bad("linear"));
                    }
                    vec![u.linear.out_channels()]
                }
            };
        }
        self.shapes = shapes;
        Ok(shape)
    }

    /// Input shape (one example) of every layer.
    pub fn layer_input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut probe = Model {
            arch: self.arch.clone(),
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            layers: self.layers.clone(),
            mode: self.mode,
            shapes: Vec::new(),
        };
        probe.trace_shapes()?;
        Ok(probe.shapes)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape("model input", x.shape(), &self.input_shape));
        }
        let mode = self.mode;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Conv(u) => u.forward(&h, mode)?,
                Layer::Linear(u) => u.forward(&h)?,
                Layer::Residual(b) => b.forward(&h, mode)?,
                Layer::MaxPool(p) => {
                    let (y, idx) = max_pool(&h, p.size)?;
                    p.cache = Some((h.shape().to_vec(), idx));
                    y
                }
                Layer::GlobalAvgPool => global_avg_pool(&h)?,
                Layer::Flatten => {
                    let n = h.shape()[0];
                    let rest = h.len() / n;
                    h.reshape(&[n, rest])?
                }
            };
        }
        Ok(h)
    }

    /// Backpropagates `grad_logits` through the cached forward pass and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        if self.shapes.len() != self.layers.len() {
            self.trace_shapes()?;
        }
        let batch = grad_logits.shape()[0];
        let mut g = grad_logits.clone();
        for (layer, in_shape) in self.layers.iter_mut().zip(&self.shapes).rev() {
            let mut full = vec![batch];
            full.extend_from_slice(in_shape);
            g = match layer {
                Layer::Conv(u) => u.backward(&g)?,
                Layer::Linear(u) => u.backward(&g)?,
                Layer::Residual(b) => b.backward(&g)?,
                Layer::MaxPool(p) => {
                    let (shape, idx) = p.cache.take().ok_or_else(|| Error::invalid("pool backward without forward"))?;
                    max_pool_backward(&shape, &idx, &g)?
                }
                Layer::GlobalAvgPool => global_avg_pool_backward(&full, &g)?,
                Layer::Flatten => g.reshape(&full)?,
            };
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param_group(&mut |p, _| p.zero_grad());
        self.for_each_masked_mut(&mut |m| {
            if let Some(instr) = m.instrumentation_mut() {
                instr.gate_grad.iter_mut().for_each(|g| *g = 0.0);
            }
        });
    }

    pub fn zero_mask_grads(&mut self) {
        self.for_each_masked_mut(&mut |m| {
            if let Some(instr) = m.instrumentation_mut() {
                instr.zero_mask_grad();
            }
        });
    }

    /// Visits every trainable parameter together with the gate of the
    /// output channels it belongs to.
    pub fn for_each_param_group(&mut self, f: &mut dyn FnMut(&mut Param, Option<&[f64]>)) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(u) => u.for_each_param(f),
                Layer::Linear(u) => u.for_each_param(f),
                Layer::Residual(b) => {
                    b.first.for_each_param(f);
                    b.second.for_each_param(f);
                    if let Some(sc) = &mut b.shortcut {
                        sc.for_each_param(f);
                    }
                }
                _ => {}
            }
        }
    }

    pub fn for_each_masked_mut(&mut self, f: &mut dyn FnMut(&mut dyn MaskedLayer)) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(u) => f(&mut u.conv),
                Layer::Linear(u) => f(&mut u.linear),
                Layer::Residual(b) => {
                    f(&mut b.first.conv);
                    f(&mut b.second.conv);
                    if let Some(sc) = &mut b.shortcut {
                        f(&mut sc.conv);
                    }
                }
                _ => {}
            }
        }
    }

    pub fn masked_layers(&self) -> Vec<&dyn MaskedLayer> {
        let mut out: Vec<&dyn MaskedLayer> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(u) => out.push(&u.conv),
                Layer::Linear(u) => out.push(&u.linear),
                Layer::Residual(b) => {
                    out.push(&b.first.conv);
                    out.push(&b.second.conv);
                    if let Some(sc) = &b.shortcut {
                        out.push(&sc.conv);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Prunable layers in input-to-output order.
    pub fn prunable_slots(&self) -> Vec<SlotPath> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, layer)| match layer {
                Layer::Conv(u) if u.prunable => Some(SlotPath::Conv(i)),
                Layer::Linear(u) if u.prunable => Some(SlotPath::Linear(i)),
                Layer::Residual(_) => Some(SlotPath::BlockFirst(i)),
                _ => None,
            })
            .collect()
    }

    pub fn slot(&self, path: SlotPath) -> Result<&dyn MaskedLayer> {
        match (path, self.layers.get(path.layer_index())) {
            (SlotPath::Conv(_), Some(Layer::Conv(u))) => Ok(&u.conv),
            (SlotPath::Linear(_), Some(Layer::Linear(u))) => Ok(&u.linear),
            (SlotPath::BlockFirst(_), Some(Layer::Residual(b))) => Ok(&b.first.conv),
            _ => Err(Error::invalid(format!("no prunable layer at {path}"))),
        }
    }

    pub fn slot_mut(&mut self, path: SlotPath) -> Result<&mut dyn MaskedLayer> {
        match (path, self.layers.get_mut(path.layer_index())) {
            (SlotPath::Conv(_), Some(Layer::Conv(u))) => Ok(&mut u.conv),
            (SlotPath::Linear(_), Some(Layer::Linear(u))) => Ok(&mut u.linear),
            (SlotPath::BlockFirst(_), Some(Layer::Residual(b))) => Ok(&mut b.first.conv),
            _ => Err(Error::invalid(format!("no prunable layer at {path}"))),
        }
    }

    /// Overwrites the gate of a prunable layer.
    pub fn set_gate(&mut self, path: SlotPath, gate: &[f64]) -> Result<()> {
        let layer = self.slot_mut(path)?;
        let instr = layer
            .instrumentation_mut()
            .ok_or_else(|| Error::invalid(format!("{path} carries no gate")))?;
        if instr.gate.len() != gate.len() {
            return Err(Error::shape("set_gate", &[instr.gate.len()], &[gate.len()]));
        }
        if let Some(bad) = gate.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::invalid(format!("gate value {bad} outside [0, 1]")));
        }
        instr.gate.copy_from_slice(gate);
        Ok(())
    }

    pub fn is_instrumented(&self) -> bool {
        self.masked_layers().iter().any(|m| m.instrumentation().is_some())
    }

    /// Drops masks, gates and their accumulators from every layer.
    pub fn strip_instrumentation(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(u) => u.conv.strip(),
                Layer::Linear(u) => u.linear.strip(),
                Layer::Residual(b) => {
                    b.first.conv.strip();
                    b.second.conv.strip();
                    if let Some(sc) = &mut b.shortcut {
                        sc.conv.strip();
                    }
                }
                _ => {}
            }
        }
    }

    /// Drops all cached activations (after evaluation or before serialising).
    pub fn clear_caches(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(u) => u.clear_cache(),
                Layer::Linear(u) => u.out = None,
                Layer::Residual(b) => {
                    b.out = None;
                    b.first.clear_cache();
                    b.second.clear_cache();
                    if let Some(sc) = &mut b.shortcut {
                        sc.clear_cache();
                    }
                }
                Layer::MaxPool(p) => p.cache = None,
                _ => {}
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut clone = self.clone();
        let mut total = 0;
        clone.for_each_param_group(&mut |p, _| total += p.value.len());
        total
    }

    /// Physically removes the output channels of `path` not listed in `keep`
    /// together with the matching input slices of its consumer.
    pub fn narrow_slot(&mut self, path: SlotPath, keep: &[usize]) -> Result<()> {
        if keep.is_empty() {
            return Err(Error::invalid(format!("{path} would be left with no channels")));
        }
        let i = path.layer_index();
        match path {
            SlotPath::BlockFirst(_) => {
                let Some(Layer::Residual(b)) = self.layers.get_mut(i) else {
                    return Err(Error::invalid(format!("no residual block at {path}")));
                };
                b.first = b.first.select_outputs(keep);
                b.second.conv = b.second.conv.select_inputs(keep);
            }
            SlotPath::Conv(_) | SlotPath::Linear(_) => {
                let channels = self.slot(path)?.out_channels();
                match &mut self.layers[i] {
                    Layer::Conv(u) => *u = u.select_outputs(keep),
                    Layer::Linear(u) => {
                        u.linear = u.linear.select_outputs(keep);
                    }
                    _ => unreachable!("slot() validated the layer kind"),
                }
                let consumer = (i + 1..self.layers.len())
                    .find(|&j| matches!(self.layers[j], Layer::Conv(_) | Layer::Linear(_) | Layer::Residual(_)))
                    .ok_or_else(|| Error::invalid(format!("{path} has no consumer layer")))?;
                match &mut self.layers[consumer] {
                    Layer::Conv(u) => u.conv = u.conv.select_inputs(keep),
                    Layer::Linear(u) => {
                        let group = u.linear.in_features() / channels;
                        u.linear = u.linear.select_inputs(keep, group);
                    }
                    _ => {
                        return Err(Error::invalid(format!(
                            "{path} feeds a residual block and cannot be narrowed"
                        )))
                    }
                }
            }
        }
        self.trace_shapes()?;
        Ok(())
    }
}

fn conv_out(shape: &[usize], conv: &MaskedConv) -> Option<Vec<usize>> {
    if shape.len() != 3 || shape[0] != conv.in_channels() {
        return None;
    }
    let (kh, kw) = conv.kernel();
    let (h, w) = (shape[1] + 2 * conv.padding, shape[2] + 2 * conv.padding);
    if kh > h || kw > w {
        return None;
    }
    Some(vec![conv.out_channels(), (h - kh) / conv.stride + 1, (w - kw) / conv.stride + 1])
}
