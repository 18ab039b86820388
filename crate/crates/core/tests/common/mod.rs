#![allow(dead_code)]

use chanprune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Plain nested-loop cross-correlation.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);
    for i in 0..n {
        for o in 0..cout {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = b.data()[o];
                    for ci in 0..cin {
                        for p in 0..kh {
                            for q in 0..kw {
                                let (yy, xx) = ((r * stride + p) as isize - pad as isize, (c * stride + q) as isize - pad as isize);
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                    acc += w.get(&[o, ci, p, q]) * x.get(&[i, ci, yy as usize, xx as usize]);
                                }
                            }
                        }
                    }
                    y.set(&[i, o, r, c], acc);
                }
            }
        }
    }
    y
}

/// `∂⟨grad_y, conv(x, w)⟩/∂w` by nested loops.
pub fn naive_conv_grad_w(x: &Tensor, grad_y: &Tensor, w_shape: &[usize], stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let (oh, ow) = (grad_y.shape()[2], grad_y.shape()[3]);
    let mut g = Tensor::zeros(w_shape);
    for o in 0..cout {
        for ci in 0..cin {
            for p in 0..kh {
                for q in 0..kw {
                    let mut acc = 0.0;
                    for i in 0..n {
                        for r in 0..oh {
                            for c in 0..ow {
                                let (yy, xx) = ((r * stride + p) as isize - pad as isize, (c * stride + q) as isize - pad as isize);
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                    acc += grad_y.get(&[i, o, r, c]) * x.get(&[i, ci, yy as usize, xx as usize]);
                                }
                            }
                        }
                    }
                    g.set(&[o, ci, p, q], acc);
                }
            }
        }
    }
    g
}

/// `∂⟨grad_y, x·wᵀ⟩/∂w` for a linear layer with weights `[out, in]`.
pub fn naive_linear_grad_w(x: &Tensor, grad_y: &Tensor) -> Tensor {
    let (n, inp) = (x.shape()[0], x.shape()[1]);
    let out = grad_y.shape()[1];
    Tensor::from_fn(&[out, inp], |flat| {
        let (o, j) = (flat / inp, flat % inp);
        (0..n).map(|i| grad_y.get(&[i, o]) * x.get(&[i, j])).sum()
    })
}

/// Central differences of `f` at `x`, one entry at a time.
pub fn central_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Largest entry-wise `|a − n| / max(|a|, |n|)`, ignoring pairs where both
/// sides are below `floor` in magnitude.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter(|(a, n)| a.abs().max(n.abs()) >= floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `workspace/data/mnist-desk`.
pub fn mnist_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk")
}
