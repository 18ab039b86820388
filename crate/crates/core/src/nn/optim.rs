use serde::{Deserialize, Serialize};

use super::{Model, FREEZE_THRESHOLD};
use crate::tensor::Tensor;

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Momentum SGD with L2 weight decay:
    /// `v ← μ·v + g + wd·w`, `w ← w − lr·v`.
    ///
    /// `gate` groups the parameter along its leading axis; a group whose gate
    /// is below [`FREEZE_THRESHOLD`] keeps both its value and its velocity.
    pub fn sgd_update(&mut self, lr: f64, momentum: f64, weight_decay: f64, gate: Option<&[f64]>) {
        let groups = gate.map_or(1, |g| g.len()).max(1);
        let slab = self.value.len() / groups;
        let value = self.value.data_mut();
        let velocity = self.velocity.data_mut();
        let grad = self.grad.data();
        for k in 0..groups {
            if gate.is_some_and(|g| g[k] < FREEZE_THRESHOLD) {
                continue;
            }
            for i in k * slab..(k + 1) * slab {
                velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * value[i];
                value[i] -= lr * velocity[i];
            }
        }
    }

    /// Keeps only the listed indices along axis 0.
    pub(crate) fn select_outputs(&self, keep: &[usize]) -> Param {
        Param {
            value: select_axis0(&self.value, keep),
            grad: select_axis0(&self.grad, keep),
            velocity: select_axis0(&self.velocity, keep),
        }
    }

    /// Keeps only the listed groups of `group` consecutive entries along axis 1.
    pub(crate) fn select_inputs(&self, keep: &[usize], group: usize) -> Param {
        Param {
            value: select_axis1(&self.value, keep, group),
            grad: select_axis1(&self.grad, keep, group),
            velocity: select_axis1(&self.velocity, keep, group),
        }
    }
}

pub(crate) fn select_axis0(t: &Tensor, keep: &[usize]) -> Tensor {
    let shape = t.shape();
    let slab: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(keep.len() * slab);
    for &k in keep {
        data.extend_from_slice(&t.data()[k * slab..(k + 1) * slab]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = keep.len();
    Tensor::new(new_shape, data).expect("selection preserves slab size")
}

/// Axis-1 selection where each kept index `c` spans `group` consecutive
/// positions `c·group .. (c+1)·group` (the spatial plane of a flattened map).
pub(crate) fn select_axis1(t: &Tensor, keep: &[usize], group: usize) -> Tensor {
    let shape = t.shape();
    let rows = shape[0];
    let inner: usize = shape[2..].iter().product();
    let cols = shape[1];
    let unit = group * inner;
    let mut data = Vec::with_capacity(rows * keep.len() * unit);
    for r in 0..rows {
        let row = &t.data()[r * cols * inner..(r + 1) * cols * inner];
        for &c in keep {
            data.extend_from_slice(&row[c * unit..(c + 1) * unit]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[1] = keep.len() * group;
    Tensor::new(new_shape, data).expect("selection preserves row size")
}

/// One SGD step over every parameter of the model. Masks are not
/// parameters and are never touched.
pub fn sgd_step(model: &mut Model, learning_rate: f64, momentum: f64, weight_decay: f64) {
    model.for_each_param_group(&mut |param, gate| {
        param.sgd_update(learning_rate, momentum, weight_decay, gate);
    });
}
