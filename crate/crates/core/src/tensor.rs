//! Dense row-major `f64` tensors and the numeric kernels the rest of the
//! crate is built on: direct 2-D cross-correlation (full and depthwise),
//! its gradients, matrix products, and mode-n unfolding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Dense n-dimensional array of `f64`, row-major, rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let mut t = Tensor::zeros(shape)?;
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(t)
    }

    pub fn identity(n: usize) -> Result<Self> {
        Tensor::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise operands differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix_dims()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub(crate) fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "tensor rank must be between 1 and {MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Geometry of a 2-D convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvGeometry {
    /// Square kernel, equal stride and padding on both axes.
    pub fn square(kernel: usize, stride: usize, pad: usize, in_ch: usize, out_ch: usize) -> Self {
        ConvGeometry {
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            in_ch,
            out_ch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Geometry("kernel extents must be positive".into()));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::Geometry("strides must be at least 1".into()));
        }
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::Geometry("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Output spatial extent; the stride must divide the swept extent exactly.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let oh = output_extent(h, self.kernel_h, self.stride_h, self.pad_h, "height")?;
        let ow = output_extent(w, self.kernel_w, self.stride_w, self.pad_w, "width")?;
        Ok((oh, ow))
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel_h, self.kernel_w]
    }

    pub fn weight_count(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_ch * self.out_ch
    }
}

pub(crate) fn output_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    axis: &str,
) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::Geometry(format!(
            "{axis}: kernel {kernel} exceeds padded input {padded}"
        )));
    }
    let span = padded - kernel;
    if !span.is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "{axis}: ({size} + 2*{pad} - {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

fn nchw(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape()[..] {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(format!(
            "{what} must be 4-D [N,C,H,W], got {:?}",
            t.shape()
        ))),
    }
}

fn check_kernel(kernel: &Tensor, geom: &ConvGeometry) -> Result<()> {
    if kernel.shape() != geom.kernel_shape() {
        return Err(Error::shape(format!(
            "kernel shape {:?} does not match geometry {:?}",
            kernel.shape(),
            geom.kernel_shape()
        )));
    }
    Ok(())
}

/// Direct 2-D cross-correlation with zero padding, no bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [n, c, h, w] = nchw(input, "conv2d input")?;
    if c != geom.in_ch {
        return Err(Error::shape(format!(
            "conv2d input has {c} channels, geometry expects {}",
            geom.in_ch
        )));
    }
    check_kernel(kernel, geom)?;
    let (oh, ow) = geom.output_hw(h, w)?;
    let mut out = vec![0.0; n * geom.out_ch * oh * ow];
    conv2d_raw(input.data(), kernel.data(), &mut out, [n, c, h, w], geom, oh, ow);
    Tensor::new(&[n, geom.out_ch, oh, ow], out)
}

/// Valid output-index range `[lo, hi)` whose input tap `o*stride + k - pad`
/// lands inside `[0, size)`.
#[inline]
fn tap_range(size: usize, out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k < size + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_raw(
    input: &[f64],
    kernel: &[f64],
    out: &mut [f64],
    [n, c, h, w]: [usize; 4],
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
) {
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    for b in 0..n {
        for o in 0..g.out_ch {
            let out_plane = &mut out[(b * g.out_ch + o) * oh * ow..][..oh * ow];
            for i in 0..c {
                let in_plane = &input[(b * c + i) * h * w..][..h * w];
                for ky in 0..kh {
                    let (y0, y1) = tap_range(h, oh, g.stride_h, ky, g.pad_h);
                    for kx in 0..kw {
                        let wv = kernel[((o * c + i) * kh + ky) * kw + kx];
                        let (x0, x1) = tap_range(w, ow, g.stride_w, kx, g.pad_w);
                        for oy in y0..y1 {
                            let iy = oy * g.stride_h + ky - g.pad_h;
                            let in_row = &in_plane[iy * w..][..w];
                            let out_row = &mut out_plane[oy * ow..][..ow];
                            for ox in x0..x1 {
                                let ix = ox * g.stride_w + kx - g.pad_w;
                                out_row[ox] += wv * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// im2col + matrix product route; agrees with [`conv2d`] to rounding.
pub fn conv2d_im2col(input: &Tensor, kernel: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [n, c, h, w] = nchw(input, "conv2d input")?;
    if c != geom.in_ch {
        return Err(Error::shape(format!(
            "conv2d input has {c} channels, geometry expects {}",
            geom.in_ch
        )));
    }
    check_kernel(kernel, geom)?;
    let (oh, ow) = geom.output_hw(h, w)?;
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let cols_k = c * kh * kw;
    let cols_n = oh * ow;
    let mut out = vec![0.0; n * geom.out_ch * cols_n];
    let mut cols = vec![0.0; cols_k * cols_n];
    for b in 0..n {
        for i in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (i * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let iy = (oy * geom.stride_h + ky) as isize - geom.pad_h as isize;
                            let ix = (ox * geom.stride_w + kx) as isize - geom.pad_w as isize;
                            cols[row * cols_n + oy * ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < h
                                && (ix as usize) < w
                            {
                                input.data()[((b * c + i) * h + iy as usize) * w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
        let dst = &mut out[b * geom.out_ch * cols_n..][..geom.out_ch * cols_n];
        matmul_raw(kernel.data(), &cols, dst, geom.out_ch, cols_k, cols_n);
    }
    Tensor::new(&[n, geom.out_ch, oh, ow], out)
}

/// Gradient of [`conv2d`] with respect to its input, accumulated into `grad_in`.
pub(crate) fn conv2d_backward_input(
    grad_out: &[f64],
    kernel: &[f64],
    grad_in: &mut [f64],
    [n, c, h, w]: [usize; 4],
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
) {
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    for b in 0..n {
        for o in 0..g.out_ch {
            let go_plane = &grad_out[(b * g.out_ch + o) * oh * ow..][..oh * ow];
            for i in 0..c {
                let gi_plane = &mut grad_in[(b * c + i) * h * w..][..h * w];
                for ky in 0..kh {
                    let (y0, y1) = tap_range(h, oh, g.stride_h, ky, g.pad_h);
                    for kx in 0..kw {
                        let wv = kernel[((o * c + i) * kh + ky) * kw + kx];
                        let (x0, x1) = tap_range(w, ow, g.stride_w, kx, g.pad_w);
                        for oy in y0..y1 {
                            let iy = oy * g.stride_h + ky - g.pad_h;
                            let go_row = &go_plane[oy * ow..][..ow];
                            let gi_row = &mut gi_plane[iy * w..][..w];
                            for ox in x0..x1 {
                                let ix = ox * g.stride_w + kx - g.pad_w;
                                gi_row[ix] += wv * go_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv2d`] with respect to its kernel, accumulated into `grad_k`.
pub(crate) fn conv2d_backward_kernel(
    input: &[f64],
    grad_out: &[f64],
    grad_k: &mut [f64],
    [n, c, h, w]: [usize; 4],
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
) {
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    for b in 0..n {
        for o in 0..g.out_ch {
            let go_plane = &grad_out[(b * g.out_ch + o) * oh * ow..][..oh * ow];
            for i in 0..c {
                let in_plane = &input[(b * c + i) * h * w..][..h * w];
                for ky in 0..kh {
                    let (y0, y1) = tap_range(h, oh, g.stride_h, ky, g.pad_h);
                    for kx in 0..kw {
                        let (x0, x1) = tap_range(w, ow, g.stride_w, kx, g.pad_w);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride_h + ky - g.pad_h;
                            let go_row = &go_plane[oy * ow..][..ow];
                            let in_row = &in_plane[iy * w..][..w];
                            for ox in x0..x1 {
                                let ix = ox * g.stride_w + kx - g.pad_w;
                                acc += go_row[ox] * in_row[ix];
                            }
                        }
                        grad_k[((o * c + i) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Per-channel (depthwise) cross-correlation; kernel is `[C, 1, kh, kw]` and
/// `geom.in_ch == geom.out_ch == C`.
pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [n, c, h, w] = nchw(input, "depthwise input")?;
    if c != geom.in_ch || geom.in_ch != geom.out_ch {
        return Err(Error::shape(format!(
            "depthwise conv needs in_ch == out_ch == input channels, got {} / {} / {c}",
            geom.in_ch, geom.out_ch
        )));
    }
    if kernel.shape() != [c, 1, geom.kernel_h, geom.kernel_w] {
        return Err(Error::shape(format!(
            "depthwise kernel shape {:?} does not match [{c},1,{},{}]",
            kernel.shape(),
            geom.kernel_h,
            geom.kernel_w
        )));
    }
    let (oh, ow) = geom.output_hw(h, w)?;
    let mut out = vec![0.0; n * c * oh * ow];
    depthwise_raw(input.data(), kernel.data(), &mut out, [n, c, h, w], geom, oh, ow);
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn depthwise_raw(
    input: &[f64],
    kernel: &[f64],
    out: &mut [f64],
    [n, c, h, w]: [usize; 4],
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
) {
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    for b in 0..n {
        for ch in 0..c {
            let in_plane = &input[(b * c + ch) * h * w..][..h * w];
            let out_plane = &mut out[(b * c + ch) * oh * ow..][..oh * ow];
            for ky in 0..kh {
                let (y0, y1) = tap_range(h, oh, g.stride_h, ky, g.pad_h);
                for kx in 0..kw {
                    let wv = kernel[(ch * kh + ky) * kw + kx];
                    let (x0, x1) = tap_range(w, ow, g.stride_w, kx, g.pad_w);
                    for oy in y0..y1 {
                        let iy = oy * g.stride_h + ky - g.pad_h;
                        for ox in x0..x1 {
                            let ix = ox * g.stride_w + kx - g.pad_w;
                            out_plane[oy * ow + ox] += wv * in_plane[iy * w + ix];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_k: &mut [f64],
    [n, c, h, w]: [usize; 4],
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
) {
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    for b in 0..n {
        for ch in 0..c {
            let base_in = (b * c + ch) * h * w;
            let base_out = (b * c + ch) * oh * ow;
            for ky in 0..kh {
                let (y0, y1) = tap_range(h, oh, g.stride_h, ky, g.pad_h);
                for kx in 0..kw {
                    let k_idx = (ch * kh + ky) * kw + kx;
                    let wv = kernel[k_idx];
                    let (x0, x1) = tap_range(w, ow, g.stride_w, kx, g.pad_w);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * g.stride_h + ky - g.pad_h;
                        for ox in x0..x1 {
                            let ix = ox * g.stride_w + kx - g.pad_w;
                            let go = grad_out[base_out + oy * ow + ox];
                            acc += go * input[base_in + iy * w + ix];
                            grad_in[base_in + iy * w + ix] += wv * go;
                        }
                    }
                    grad_k[k_idx] += acc;
                }
            }
        }
    }
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix_dims()?;
    let (k2, n) = b.as_matrix_dims()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: [{m},{k}] x [{k2},{n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_raw(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// `out[m,n] += a[m,k] * b[k,n]`, all row-major.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..][..n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..][..k];
        for j in 0..n {
            let b_row = &b[j * k..][..k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..][..n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Mode-`mode` matricization. Row index is the `mode` coordinate; columns run
/// row-major over the remaining axes in ascending axis order (last axis fastest).
pub fn unfold(t: &Tensor, mode: usize) -> Result<Tensor> {
    let shape = t.shape();
    if mode >= shape.len() {
        return Err(Error::invalid(format!(
            "unfold mode {mode} out of range for rank {}",
            shape.len()
        )));
    }
    let rows = shape[mode];
    let cols = t.len() / rows;
    let mut out = vec![0.0; t.len()];
    for_each_index(shape, |flat, idx| {
        out[idx[mode] * cols + column_of(shape, idx, mode)] = t.data()[flat];
    });
    Tensor::new(&[rows, cols], out)
}

/// Inverse of [`unfold`].
pub fn fold(m: &Tensor, mode: usize, shape: &[usize]) -> Result<Tensor> {
    if mode >= shape.len() {
        return Err(Error::invalid(format!(
            "fold mode {mode} out of range for rank {}",
            shape.len()
        )));
    }
    let total: usize = shape.iter().product();
    let rows = shape[mode];
    if m.shape() != [rows, total / rows] {
        return Err(Error::shape(format!(
            "matrix {:?} cannot fold into {:?} along mode {mode}",
            m.shape(),
            shape
        )));
    }
    let cols = total / rows;
    let mut out = vec![0.0; total];
    for_each_index(shape, |flat, idx| {
        out[flat] = m.data()[idx[mode] * cols + column_of(shape, idx, mode)];
    });
    Tensor::new(shape, out)
}

fn column_of(shape: &[usize], idx: &[usize], mode: usize) -> usize {
    let mut col = 0;
    for (ax, (&i, &n)) in idx.iter().zip(shape).enumerate() {
        if ax != mode {
            col = col * n + i;
        }
    }
    col
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..total {
        f(flat, &idx);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::zeros(&[2, 0]).is_err());
        assert!(Tensor::zeros(&[]).is_err());
        assert!(Tensor::zeros(&[1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn ones_3x3_with_padding() {
        let x = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let k = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let g = ConvGeometry::square(3, 1, 1, 1, 1);
        let y = conv2d(&x, &k, &g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.get(&[0, 0, 1, 1]), 9.0);
        assert_eq!(y.get(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.get(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn zero_kernel_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let k = Tensor::zeros(&[4, 3, 3, 3]).unwrap();
        let y = conv2d(&x, &k, &ConvGeometry::square(3, 1, 1, 3, 4)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_mismatches() {
        let x = Tensor::zeros(&[1, 2, 5, 5]).unwrap();
        let k = Tensor::zeros(&[4, 3, 3, 3]).unwrap();
        let err = conv2d(&x, &k, &ConvGeometry::square(3, 1, 1, 3, 4)).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        // (6 + 0 - 3) / 2 is not integral
        let x = Tensor::zeros(&[1, 3, 6, 6]).unwrap();
        let err = conv2d(&x, &k, &ConvGeometry::square(3, 2, 0, 3, 4)).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)), "{err}");
        let k_bad = Tensor::zeros(&[4, 3, 2, 3]).unwrap();
        assert!(conv2d(&x, &k_bad, &ConvGeometry::square(3, 1, 1, 3, 4)).is_err());
    }

    #[test]
    fn direct_matches_im2col_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stride, pad, hw) in [(1, 1, 8), (2, 1, 9), (1, 0, 8), (3, 2, 11)] {
            let x = random(&[2, 3, hw, hw], &mut rng);
            let k = random(&[4, 3, 3, 3], &mut rng);
            let g = ConvGeometry::square(3, stride, pad, 3, 4);
            let direct = conv2d(&x, &k, &g).unwrap();
            let oracle = conv2d_im2col(&x, &k, &g).unwrap();
            assert!(rel_diff(&direct, &oracle) < 1e-12);
        }
    }

    #[test]
    fn pointwise_conv_is_channel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 5, 4, 3], &mut rng);
        let k = random(&[6, 5, 1, 1], &mut rng);
        let y = conv2d(&x, &k, &ConvGeometry::square(1, 1, 0, 5, 6)).unwrap();
        let km = k.reshape(&[6, 5]).unwrap();
        for b in 0..2 {
            for p in 0..12 {
                let col = Tensor::from_fn(&[5, 1], |i| x.data()[(b * 5 + i[0]) * 12 + p]).unwrap();
                let expect = matmul(&km, &col).unwrap();
                for o in 0..6 {
                    let got = y.data()[(b * 6 + o) * 12 + p];
                    assert!((got - expect.data()[o]).abs() <= 1e-12 * expect.data()[o].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn conv_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = ConvGeometry::square(3, 1, 1, 2, 3);
        let x = random(&[1, 2, 6, 6], &mut rng);
        let y = random(&[1, 2, 6, 6], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let k2 = random(&[3, 2, 3, 3], &mut rng);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &k, &g).unwrap();
        let rhs = conv2d(&x, &k, &g)
            .unwrap()
            .scale(a)
            .add(&conv2d(&y, &k, &g).unwrap().scale(b))
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().frobenius_norm() < 1e-10);
        let lhs = conv2d(&x, &k.scale(a).add(&k2.scale(b)).unwrap(), &g).unwrap();
        let rhs = conv2d(&x, &k, &g)
            .unwrap()
            .scale(a)
            .add(&conv2d(&x, &k2, &g).unwrap().scale(b))
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn depthwise_matches_per_channel_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 7, 7], &mut rng);
        let k = random(&[3, 1, 3, 1], &mut rng);
        let mut g = ConvGeometry::square(1, 1, 0, 3, 3);
        g.kernel_h = 3;
        g.pad_h = 1;
        g.stride_h = 2;
        let y = depthwise_conv2d(&x, &k, &g).unwrap();
        // Equivalent full conv with a block-diagonal kernel.
        let full = Tensor::from_fn(&[3, 3, 3, 1], |i| {
            if i[0] == i[1] {
                k.get(&[i[0], 0, i[2], 0])
            } else {
                0.0
            }
        })
        .unwrap();
        let oracle = conv2d(&x, &full, &g).unwrap();
        assert!(rel_diff(&y, &oracle) < 1e-12);
    }

    #[test]
    fn matmul_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&[3, 4], &mut rng);
        assert_eq!(matmul(&Tensor::identity(3).unwrap(), &a).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[4, 2]).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matmul(&a, &a).is_err());

        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 6], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                assert!((got.get(&[i, j]) - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn unfold_matrix_cases() {
        let m = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(unfold(&m, 0).unwrap(), m);
        assert_eq!(unfold(&m, 1).unwrap(), m.transpose().unwrap());
        assert!(unfold(&m, 2).is_err());
    }

    #[test]
    fn unfold_3d_index_arithmetic() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64).unwrap();
        let u = unfold(&t, 1).unwrap();
        assert_eq!(u.shape(), &[3, 8]);
        for j in 0..3 {
            for col in 0..8 {
                // remaining axes (0, 2), axis 2 fastest
                let (a, c) = (col / 4, col % 4);
                assert_eq!(u.get(&[j, col]), (a * 100 + j * 10 + c) as f64);
            }
        }
    }

    proptest! {
        #[test]
        fn fold_inverts_unfold(
            dims in proptest::collection::vec(1usize..4, 1..=4),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random(&dims, &mut rng);
            for mode in 0..dims.len() {
                let back = fold(&unfold(&t, mode).unwrap(), mode, &dims).unwrap();
                prop_assert_eq!(&back, &t);
            }
        }
    }
}
