//! Dense row-major `f64` tensors and the differentiable primitives the layers
//! are built from.
//!
//! Every reduction runs in a fixed order (ascending flat index over the
//! summed extent), so identical inputs always give bit-identical outputs.
//! Convolutions use the cross-correlation convention with NCHW activations
//! and OIHW kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| acc * extent + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    /// Checked mode: rejects NaN or infinite entries.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Invariant(format!(
                "non-finite value {} at flat index {i} of tensor {:?}",
                self.data[i], self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Elementwise product.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

/// `out[m×n] += a[m×k] · b[k×n]`, summing over `k` left to right.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`.
pub(crate) fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Resolved geometry of one 2-D convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve(x_shape: &[usize], w_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 || x_shape[1] != w_shape[1] {
            return Err(Error::shape("conv2d", x_shape, w_shape));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be at least 1"));
        }
        let (h, w) = (x_shape[2] + 2 * padding, x_shape[3] + 2 * padding);
        let (kh, kw) = (w_shape[2], w_shape[3]);
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(Error::invalid(format!(
                "conv2d: degenerate output for input {x_shape:?}, kernel {w_shape:?}, padding {padding}"
            )));
        }
        Ok(ConvGeometry {
            batch: x_shape[0],
            in_channels: x_shape[1],
            height: x_shape[2],
            width: x_shape[3],
            out_channels: w_shape[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Lays one sample out as `[patch_len × out_plane]` columns.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let chan = &sample[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = ((c * self.kernel_h + i) * self.kernel_w + j) * plane;
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.padding as isize;
                        let dst = &mut cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        if y < 0 || y >= self.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &chan[y as usize * self.width..(y as usize + 1) * self.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let x = (ox * self.stride + j) as isize - self.padding as isize;
                            *d = if x < 0 || x >= self.width as isize {
                                0.0
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let chan = &mut sample[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = ((c * self.kernel_h + i) * self.kernel_w + j) * plane;
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.padding as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + j) as isize - self.padding as isize;
                            if x >= 0 && x < self.width as isize {
                                chan[y as usize * self.width + x as usize] += cols[row + oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::resolve(&x.shape, &w.shape, stride, padding)?;
    if bias.shape != [g.out_channels] {
        return Err(Error::shape("conv2d bias", &bias.shape, &[g.out_channels]));
    }
    let (patch, plane) = (g.patch_len(), g.out_plane());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    let mut cols = vec![0.0; patch * plane];
    let mut out = vec![0.0; g.batch * out_len];
    for n in 0..g.batch {
        g.im2col(&x.data[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        gemm_nn(g.out_channels, patch, plane, &w.data, &cols, dst);
        for (co, chunk) in dst.chunks_mut(plane).enumerate() {
            let b = bias.data[co];
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::resolve(&x.shape, &w.shape, stride, padding)?;
    let expected = [g.batch, g.out_channels, g.out_h, g.out_w];
    if grad_out.shape != expected {
        return Err(Error::shape("conv2d_backward", &grad_out.shape, &expected));
    }
    let (patch, plane) = (g.patch_len(), g.out_plane());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    let mut cols = vec![0.0; patch * plane];
    let mut grad_cols = vec![0.0; patch * plane];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_channels];
    for n in 0..g.batch {
        let gout = &grad_out.data[n * out_len..(n + 1) * out_len];
        for (co, chunk) in gout.chunks(plane).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        g.im2col(&x.data[n * in_len..(n + 1) * in_len], &mut cols);
        gemm_nt(g.out_channels, plane, patch, gout, &cols, &mut gw);
        grad_cols.fill(0.0);
        gemm_tn(g.out_channels, patch, plane, &w.data, gout, &mut grad_cols);
        g.col2im(&grad_cols, &mut gx[n * in_len..(n + 1) * in_len]);
    }
    Ok((
        Tensor::new(x.shape.clone(), gx)?,
        Tensor::new(w.shape.clone(), gw)?,
        Tensor::new(vec![g.out_channels], gb)?,
    ))
}

/// Sums over `axes`, dropping them from the result shape.
pub fn reduce_sum(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = a.rank();
    let mut summed = vec![false; rank];
    for &ax in axes {
        if ax >= rank || summed[ax] {
            return Err(Error::invalid(format!(
                "reduce_sum: axis {ax} out of range or repeated for rank {rank}"
            )));
        }
        summed[ax] = true;
    }
    let out_shape: Vec<usize> = (0..rank).filter(|&d| !summed[d]).map(|d| a.shape[d]).collect();
    let mut out = vec![0.0; out_shape.iter().product()];
    let mut index = vec![0usize; rank];
    for &v in &a.data {
        let at = (0..rank)
            .filter(|&d| !summed[d])
            .fold(0, |acc, d| acc * a.shape[d] + index[d]);
        out[at] += v;
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < a.shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
