use serde::{Deserialize, Serialize};

use super::optim::Param;
use super::{Mode, FREEZE_THRESHOLD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel batch normalisation over `[N, C]` or `[N, C, H, W]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    #[serde(skip)]
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    mode: Mode,
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn layout(&self, x: &Tensor) -> Result<(usize, usize)> {
        let c = self.channels();
        if (x.rank() != 2 && x.rank() != 4) || x.shape()[1] != c {
            return Err(Error::shape("batchnorm", x.shape(), &[c]));
        }
        Ok((x.shape()[0], x.len() / (x.shape()[0] * c)))
    }

    /// Normalises `x`. In train mode batch statistics are used and the
    /// running statistics updated, except for channels whose `gate` entry is
    /// below the freeze threshold.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, gate: Option<&[f64]>) -> Result<Tensor> {
        let (n, plane) = self.layout(x)?;
        let c = self.channels();
        let count = (n * plane) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::invalid("batchnorm: train mode needs a batch of at least 2"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, chunk) in x.data().chunks(plane).enumerate() {
                    mean[i % c] += chunk.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for (i, chunk) in x.data().chunks(plane).enumerate() {
                    let m = mean[i % c];
                    var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= count);
                for k in 0..c {
                    if gate.is_some_and(|g| g[k] < FREEZE_THRESHOLD) {
                        continue;
                    }
                    let unbiased = var[k] * count / (count - 1.0);
                    self.running_mean[k] = (1.0 - self.momentum) * self.running_mean[k] + self.momentum * mean[k];
                    self.running_var[k] = (1.0 - self.momentum) * self.running_var[k] + self.momentum * unbiased;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut normalized = x.clone();
        let mut out = x.clone();
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        for (i, (nz, o)) in normalized
            .data_mut()
            .chunks_mut(plane)
            .zip(out.data_mut().chunks_mut(plane))
            .enumerate()
        {
            let k = i % c;
            for (z, y) in nz.iter_mut().zip(o.iter_mut()) {
                *z = (*z - mean[k]) * inv_std[k];
                *y = gamma[k] * *z + beta[k];
            }
        }
        self.cache = Some(BnCache {
            mode,
            normalized,
            inv_std,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("batchnorm backward without a cached forward"))?;
        if grad.shape() != cache.normalized.shape() {
            return Err(Error::shape("batchnorm backward", grad.shape(), cache.normalized.shape()));
        }
        let (n, plane) = self.layout(grad)?;
        let c = self.channels();
        let count = (n * plane) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gz = vec![0.0; c];
        for (i, (g, z)) in grad.data().chunks(plane).zip(cache.normalized.data().chunks(plane)).enumerate() {
            sum_g[i % c] += g.iter().sum::<f64>();
            sum_gz[i % c] += g.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        }
        for k in 0..c {
            self.gamma.grad.data_mut()[k] += sum_gz[k];
            self.beta.grad.data_mut()[k] += sum_g[k];
        }
        let gamma = self.gamma.value.data();
        let mut gx = grad.clone();
        for (i, (g, z)) in gx.data_mut().chunks_mut(plane).zip(cache.normalized.data().chunks(plane)).enumerate() {
            let k = i % c;
            let scale = gamma[k] * cache.inv_std[k];
            match cache.mode {
                Mode::Train => {
                    let (mg, mgz) = (sum_g[k] / count, sum_gz[k] / count);
                    for (v, zz) in g.iter_mut().zip(z) {
                        *v = scale * (*v - mg - zz * mgz);
                    }
                }
                Mode::Eval => g.iter_mut().for_each(|v| *v *= scale),
            }
        }
        Ok(gx)
    }

    pub(crate) fn select(&self, keep: &[usize]) -> Self {
        BatchNorm {
            gamma: self.gamma.select_outputs(keep),
            beta: self.beta.select_outputs(keep),
            running_mean: keep.iter().map(|&k| self.running_mean[k]).collect(),
            running_var: keep.iter().map(|&k| self.running_var[k]).collect(),
            momentum: self.momentum,
            eps: self.eps,
            cache: None,
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}
