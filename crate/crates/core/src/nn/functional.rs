//! Stateless activation, pooling and loss functions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through a ReLU given its *output*.
pub(crate) fn relu_backward(output: &Tensor, grad: &Tensor) -> Result<Tensor> {
    output.zip_with(grad, "relu_backward", |y, g| if y > 0.0 { g } else { 0.0 })
}

/// Non-overlapping `size × size` max pooling. Returns the pooled map and,
/// for each output cell, the flat input index it was taken from (first
/// maximum in scan order).
pub fn max_pool(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 4 || size == 0 || x.shape()[2] < size || x.shape()[3] < size {
        return Err(Error::invalid(format!("max_pool {size} on {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let at = base + (oy * size + dy) * w + ox * size + dx;
                        if x.data()[at] > x.data()[best] {
                            best = at;
                        }
                    }
                }
                out.push(x.data()[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn max_pool_backward(input_shape: &[usize], argmax: &[usize], grad: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad.len() {
        return Err(Error::shape("max_pool_backward", grad.shape(), &[argmax.len()]));
    }
    let mut gx = Tensor::zeros(input_shape);
    for (&at, &g) in argmax.iter().zip(grad.data()) {
        gx.data_mut()[at] += g;
    }
    Ok(gx)
}

/// `[N, C, H, W] → [N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::invalid(format!("global_avg_pool on {:?}", x.shape())));
    }
    let plane = x.shape()[2] * x.shape()[3];
    let data = x.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
    Tensor::new(vec![x.shape()[0], x.shape()[1]], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let plane = input_shape[2] * input_shape[3];
    if grad.shape() != [input_shape[0], input_shape[1]] {
        return Err(Error::shape("global_avg_pool_backward", grad.shape(), &input_shape[..2]));
    }
    let mut gx = Vec::with_capacity(grad.len() * plane);
    for &g in grad.data() {
        gx.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − one_hot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = vec![0.0; n * classes];
    let mut loss = 0.0;
    for (i, (row, &label)) in logits.data().chunks(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_denom = denom.ln();
        loss += log_denom - (row[label] - max);
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, v) in g.iter_mut().zip(row) {
            *gj = (v - max).exp() / denom / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, Tensor::new(vec![n, classes], grad)?))
}
