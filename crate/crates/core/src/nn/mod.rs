//! Forward and backward execution of a [`Model`].
//!
//! Every layer variant has a hand-written backward pass. Decomposed layers run
//! their factor chain directly and never materialize the dense kernel.

mod train;

pub use train::{evaluate_top1, train, Optimizer, SgdMomentum, TrainConfig, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::apply_znorm_in_place;
use crate::error::{Error, Result};
use crate::model::{ActShape, Conv2d, DecomposedConv2d, DecomposedDense, Dense, LayerSpec, Model};
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_kernel, conv2d_raw, depthwise_backward, depthwise_raw,
    matmul_nt_raw, matmul_raw, matmul_tn_raw, ConvGeometry, Tensor,
};

/// Gradients of every trainable tensor, grouped per layer in
/// [`LayerSpec::params`] order. Parameterless layers hold an empty list.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Vec<Tensor>>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Result<Self> {
        let layers = model
            .layers
            .iter()
            .map(|l| l.params().iter().map(|t| Tensor::zeros(t.shape())).collect())
            .collect::<Result<_>>()?;
        Ok(GradientSet { layers })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flatten()
    }

    pub(crate) fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().flatten().zip(other.layers.iter().flatten()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn scale(&mut self, alpha: f64) {
        for t in self.layers.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// First layer holding a non-finite gradient entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|ts| ts.iter().any(|t| t.data().iter().any(|v| !v.is_finite())))
    }
}

/// Batched activation: `n` samples of `shape`, contiguous.
#[derive(Clone, Debug)]
struct Act {
    n: usize,
    shape: ActShape,
    data: Vec<f64>,
}

impl Act {
    fn dims4(&self) -> [usize; 4] {
        match self.shape {
            ActShape::Image { c, h, w } => [self.n, c, h, w],
            ActShape::Flat(f) => [self.n, f, 1, 1],
        }
    }
}

enum Cache {
    None,
    Input(Vec<f64>),
    DecomposedConv {
        x: Vec<f64>,
        z1: Vec<f64>,
        z2: Vec<f64>,
        z3: Vec<f64>,
    },
    DecomposedDense {
        x: Vec<f64>,
        xu: Vec<f64>,
        xus: Vec<f64>,
    },
    Relu(Vec<bool>),
    Pool(Vec<usize>),
}

/// Geometries of the four stages of a decomposed convolution.
pub(crate) fn decomposed_stages(g: &ConvGeometry, rank: usize) -> [ConvGeometry; 4] {
    let pointwise_in = ConvGeometry::square(1, 1, 0, g.in_ch, rank);
    let vertical = ConvGeometry {
        kernel_h: g.kernel_h,
        kernel_w: 1,
        stride_h: g.stride_h,
        stride_w: 1,
        pad_h: g.pad_h,
        pad_w: 0,
        in_ch: rank,
        out_ch: rank,
    };
    let horizontal = ConvGeometry {
        kernel_h: 1,
        kernel_w: g.kernel_w,
        stride_h: 1,
        stride_w: g.stride_w,
        pad_h: 0,
        pad_w: g.pad_w,
        in_ch: rank,
        out_ch: rank,
    };
    let pointwise_out = ConvGeometry::square(1, 1, 0, rank, g.out_ch);
    [pointwise_in, vertical, horizontal, pointwise_out]
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    let c = bias.len();
    for (k, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let b = bias[k % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad(grad_out: &[f64], grad_b: &mut [f64], plane: usize) {
    let c = grad_b.len();
    for (k, chunk) in grad_out.chunks_exact(plane).enumerate() {
        grad_b[k % c] += chunk.iter().sum::<f64>();
    }
}

fn image_dims(shape: &ActShape) -> (usize, usize, usize) {
    match *shape {
        ActShape::Image { c, h, w } => (c, h, w),
        ActShape::Flat(f) => (f, 1, 1),
    }
}

fn layer_forward(layer: &LayerSpec, x: Act, out_shape: &ActShape, keep: bool) -> (Act, Cache) {
    let n = x.n;
    let out_len = n * out_shape.elements();
    let (_, oh, ow) = image_dims(out_shape);
    match layer {
        LayerSpec::Conv2d(Conv2d { geom, weight, bias }) => {
            let mut out = vec![0.0; out_len];
            conv2d_raw(&x.data, weight.data(), &mut out, x.dims4(), geom, oh, ow);
            add_channel_bias(&mut out, bias.data(), oh * ow);
            let cache = if keep { Cache::Input(x.data) } else { Cache::None };
            (act(n, out_shape, out), cache)
        }
        LayerSpec::Dense(Dense {
            inputs,
            outputs,
            weight,
            bias,
        }) => {
            let mut out = vec![0.0; out_len];
            matmul_raw(&x.data, weight.data(), &mut out, n, *inputs, *outputs);
            add_channel_bias(&mut out, bias.data(), 1);
            let cache = if keep { Cache::Input(x.data) } else { Cache::None };
            (act(n, out_shape, out), cache)
        }
        LayerSpec::DecomposedConv2d(l) => {
            let [n_, c, h, w] = x.dims4();
            let [g1, g2, g3, g4] = decomposed_stages(&l.geom, l.rank);
            let r = l.rank;
            let mut z1 = vec![0.0; n * r * h * w];
            conv2d_raw(&x.data, l.f3.data(), &mut z1, [n_, c, h, w], &g1, h, w);
            let mut z2 = vec![0.0; n * r * oh * w];
            depthwise_raw(&z1, l.f2.data(), &mut z2, [n, r, h, w], &g2, oh, w);
            let mut z3 = vec![0.0; n * r * oh * ow];
            depthwise_raw(&z2, l.f1.data(), &mut z3, [n, r, oh, w], &g3, oh, ow);
            let mut out = vec![0.0; out_len];
            conv2d_raw(&z3, l.f4.data(), &mut out, [n, r, oh, ow], &g4, oh, ow);
            add_channel_bias(&mut out, l.bias.data(), oh * ow);
            let cache = if keep {
                Cache::DecomposedConv { x: x.data, z1, z2, z3 }
            } else {
                Cache::None
            };
            (act(n, out_shape, out), cache)
        }
        LayerSpec::DecomposedDense(l) => {
            let r = l.rank;
            let mut xu = vec![0.0; n * r];
            matmul_raw(&x.data, l.u.data(), &mut xu, n, l.inputs, r);
            let xus: Vec<f64> = xu
                .iter()
                .enumerate()
                .map(|(k, v)| v * l.s.data()[k % r])
                .collect();
            let mut out = vec![0.0; out_len];
            matmul_nt_raw(&xus, l.v.data(), &mut out, n, r, l.outputs);
            add_channel_bias(&mut out, l.bias.data(), 1);
            let cache = if keep {
                Cache::DecomposedDense { x: x.data, xu, xus }
            } else {
                Cache::None
            };
            (act(n, out_shape, out), cache)
        }
        LayerSpec::Relu => {
            let mask: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
            let out = x.data.iter().map(|&v| v.max(0.0)).collect();
            (act(n, out_shape, out), if keep { Cache::Relu(mask) } else { Cache::None })
        }
        LayerSpec::MaxPool2d { kernel, stride } => {
            let [_, c, h, w] = x.dims4();
            let mut out = vec![0.0; out_len];
            let mut arg = vec![0usize; out_len];
            for plane in 0..n * c {
                let src = &x.data[plane * h * w..][..h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                let i = (oy * stride + ky) * w + ox * stride + kx;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = plane * oh * ow + oy * ow + ox;
                        out[o] = best;
                        arg[o] = plane * h * w + best_i;
                    }
                }
            }
            (act(n, out_shape, out), if keep { Cache::Pool(arg) } else { Cache::None })
        }
        LayerSpec::Flatten => (act(n, out_shape, x.data), Cache::None),
    }
}

fn act(n: usize, shape: &ActShape, data: Vec<f64>) -> Act {
    Act {
        n,
        shape: shape.clone(),
        data,
    }
}

/// Returns `(grad_input, parameter gradients)`; `want_input` skips the input
/// gradient for the first layer.
fn layer_backward(
    layer: &LayerSpec,
    cache: Cache,
    in_shape: &ActShape,
    n: usize,
    grad_out: &[f64],
    out_shape: &ActShape,
    want_input: bool,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let in_len = n * in_shape.elements();
    let (c, h, w) = image_dims(in_shape);
    let (_, oh, ow) = image_dims(out_shape);
    Ok(match (layer, cache) {
        (LayerSpec::Conv2d(Conv2d { geom, weight, .. }), Cache::Input(x)) => {
            let dims = [n, c, h, w];
            let mut gw = vec![0.0; weight.len()];
            conv2d_backward_kernel(&x, grad_out, &mut gw, dims, geom, oh, ow);
            let mut gb = vec![0.0; geom.out_ch];
            channel_bias_grad(grad_out, &mut gb, oh * ow);
            let mut gx = vec![0.0; if want_input { in_len } else { 0 }];
            if want_input {
                conv2d_backward_input(grad_out, weight.data(), &mut gx, dims, geom, oh, ow);
            }
            (
                gx,
                vec![Tensor::new(weight.shape(), gw)?, Tensor::new(&[geom.out_ch], gb)?],
            )
        }
        (
            LayerSpec::Dense(Dense {
                inputs,
                outputs,
                weight,
                ..
            }),
            Cache::Input(x),
        ) => {
            let mut gw = vec![0.0; weight.len()];
            matmul_tn_raw(&x, grad_out, &mut gw, n, *inputs, *outputs);
            let mut gb = vec![0.0; *outputs];
            channel_bias_grad(grad_out, &mut gb, 1);
            let mut gx = vec![0.0; if want_input { in_len } else { 0 }];
            if want_input {
                matmul_nt_raw(grad_out, weight.data(), &mut gx, n, *outputs, *inputs);
            }
            (
                gx,
                vec![Tensor::new(weight.shape(), gw)?, Tensor::new(&[*outputs], gb)?],
            )
        }
        (LayerSpec::DecomposedConv2d(l), Cache::DecomposedConv { x, z1, z2, z3 }) => {
            let r = l.rank;
            let [g1, g2, g3, g4] = decomposed_stages(&l.geom, r);
            let mut gf4 = vec![0.0; l.f4.len()];
            conv2d_backward_kernel(&z3, grad_out, &mut gf4, [n, r, oh, ow], &g4, oh, ow);
            let mut gb = vec![0.0; l.geom.out_ch];
            channel_bias_grad(grad_out, &mut gb, oh * ow);
            let mut gz3 = vec![0.0; z3.len()];
            conv2d_backward_input(grad_out, l.f4.data(), &mut gz3, [n, r, oh, ow], &g4, oh, ow);

            let mut gz2 = vec![0.0; z2.len()];
            let mut gf1 = vec![0.0; l.f1.len()];
            depthwise_backward(&z2, l.f1.data(), &gz3, &mut gz2, &mut gf1, [n, r, oh, w], &g3, oh, ow);
            let mut gz1 = vec![0.0; z1.len()];
            let mut gf2 = vec![0.0; l.f2.len()];
            depthwise_backward(&z1, l.f2.data(), &gz2, &mut gz1, &mut gf2, [n, r, h, w], &g2, oh, w);

            let mut gf3 = vec![0.0; l.f3.len()];
            conv2d_backward_kernel(&x, &gz1, &mut gf3, [n, c, h, w], &g1, h, w);
            let mut gx = vec![0.0; if want_input { in_len } else { 0 }];
            if want_input {
                conv2d_backward_input(&gz1, l.f3.data(), &mut gx, [n, c, h, w], &g1, h, w);
            }
            (
                gx,
                vec![
                    Tensor::new(l.f1.shape(), gf1)?,
                    Tensor::new(l.f2.shape(), gf2)?,
                    Tensor::new(l.f3.shape(), gf3)?,
                    Tensor::new(l.f4.shape(), gf4)?,
                    Tensor::new(&[l.geom.out_ch], gb)?,
                ],
            )
        }
        (LayerSpec::DecomposedDense(l), Cache::DecomposedDense { x, xu, xus }) => {
            let r = l.rank;
            let mut gv = vec![0.0; l.v.len()];
            matmul_tn_raw(grad_out, &xus, &mut gv, n, l.outputs, r);
            let mut gb = vec![0.0; l.outputs];
            channel_bias_grad(grad_out, &mut gb, 1);
            let mut gxus = vec![0.0; n * r];
            matmul_raw(grad_out, l.v.data(), &mut gxus, n, l.outputs, r);
            let mut gs = vec![0.0; r];
            let mut gxu = vec![0.0; n * r];
            for k in 0..n * r {
                gs[k % r] += gxus[k] * xu[k];
                gxu[k] = gxus[k] * l.s.data()[k % r];
            }
            let mut gu = vec![0.0; l.u.len()];
            matmul_tn_raw(&x, &gxu, &mut gu, n, l.inputs, r);
            let mut gx = vec![0.0; if want_input { in_len } else { 0 }];
            if want_input {
                matmul_nt_raw(&gxu, l.u.data(), &mut gx, n, r, l.inputs);
            }
            (
                gx,
                vec![
                    Tensor::new(l.u.shape(), gu)?,
                    Tensor::new(&[r], gs)?,
                    Tensor::new(l.v.shape(), gv)?,
                    Tensor::new(&[l.outputs], gb)?,
                ],
            )
        }
        (LayerSpec::Relu, Cache::Relu(mask)) => (
            grad_out
                .iter()
                .zip(mask)
                .map(|(&g, m)| if m { g } else { 0.0 })
                .collect(),
            Vec::new(),
        ),
        (LayerSpec::MaxPool2d { .. }, Cache::Pool(arg)) => {
            let mut gx = vec![0.0; in_len];
            for (g, &i) in grad_out.iter().zip(&arg) {
                gx[i] += g;
            }
            (gx, Vec::new())
        }
        (LayerSpec::Flatten, _) => (grad_out.to_vec(), Vec::new()),
        (layer, _) => {
            return Err(Error::invalid(format!(
                "missing forward cache for {} layer",
                layer.kind()
            )))
        }
    })
}

fn input_act(model: &Model, batch: &Tensor) -> Result<Act> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != model.input_shape {
        return Err(Error::shape(format!(
            "batch shape {:?} does not match model input [N,{},{},{}]",
            shape, model.input_shape[0], model.input_shape[1], model.input_shape[2]
        )));
    }
    let mut data = batch.data().to_vec();
    if let Some(norm) = &model.input_norm {
        let [c, h, w] = model.input_shape;
        apply_znorm_in_place(&mut data, c, h * w, norm);
    }
    Ok(Act {
        n: shape[0],
        shape: model.input_act(),
        data,
    })
}

/// Logits `[N, num_classes]` for a raw batch `[N, C, H, W]`. The model's
/// input normalization, if any, is applied first.
pub fn forward(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let shapes = model.infer_shapes()?;
    let mut x = input_act(model, batch)?;
    for (layer, shape) in model.layers.iter().zip(&shapes) {
        x = layer_forward(layer, x, shape, false).0;
    }
    let n = x.n;
    let width = x.shape.elements();
    Tensor::new(&[n, width], x.data)
}

/// Softmax cross-entropy summed over the batch and its gradient with respect
/// to the logits, each scaled by `1 / denom`.
pub(crate) fn cross_entropy(
    logits: &[f64],
    labels: &[usize],
    classes: usize,
    denom: f64,
) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (k, g) in grad[i * classes..(i + 1) * classes].iter_mut().enumerate() {
            let p = (row[k] - log_z).exp();
            *g = (p - if k == label { 1.0 } else { 0.0 }) / denom;
        }
    }
    (loss / denom, grad)
}

/// Loss and gradients over `batch`, with both normalized by `denom`
/// (the full batch size when called on a shard).
pub(crate) fn loss_and_grads_scaled(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    denom: f64,
) -> Result<(f64, GradientSet)> {
    let shapes = model.infer_shapes()?;
    let x = input_act(model, batch)?;
    if labels.len() != x.n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            x.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            model.num_classes
        )));
    }
    let n = x.n;
    let mut caches = Vec::with_capacity(model.layers.len());
    let mut cur = x;
    for (layer, shape) in model.layers.iter().zip(&shapes) {
        let (next, cache) = layer_forward(layer, cur, shape, true);
        caches.push(cache);
        cur = next;
    }
    let (loss, mut grad) = cross_entropy(&cur.data, labels, model.num_classes, denom);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    let mut grads = vec![Vec::new(); model.layers.len()];
    for (i, cache) in caches.into_iter().enumerate().rev() {
        let in_shape = if i == 0 {
            model.input_act()
        } else {
            shapes[i - 1].clone()
        };
        let (gx, gp) = layer_backward(
            &model.layers[i],
            cache,
            &in_shape,
            n,
            &grad,
            &shapes[i],
            i > 0,
        )?;
        grads[i] = gp;
        grad = gx;
    }
    let set = GradientSet { layers: grads };
    if let Some(layer) = set.first_non_finite() {
        return Err(Error::layer(layer, "non-finite gradient"));
    }
    Ok((loss, set))
}

/// Mean softmax cross-entropy over the batch and its gradient for every
/// trainable tensor.
pub fn loss_and_grads(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<(f64, GradientSet)> {
    loss_and_grads_scaled(model, batch, labels, labels.len().max(1) as f64)
}

/// The reference classifier
/// `conv(C→16,3×3)-ReLU-pool-conv(16→32,3×3)-ReLU-pool-flatten-dense(→128)-ReLU-dense(→classes)`
/// with He-normal weights and zero biases. `H` and `W` must be multiples of 4.
pub fn reference_cnn(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Model> {
    let [c, h, w] = input_shape;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!(
            "reference CNN needs spatial extents divisible by 4, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = 32 * (h / 4) * (w / 4);
    let layers = vec![
        he_conv(ConvGeometry::square(3, 1, 1, c, 16), &mut rng)?,
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
        he_conv(ConvGeometry::square(3, 1, 1, 16, 32), &mut rng)?,
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
        LayerSpec::Flatten,
        he_dense(flat, 128, &mut rng)?,
        LayerSpec::Relu,
        he_dense(128, num_classes, &mut rng)?,
    ];
    Model::new("reference-cnn", input_shape, num_classes, layers)
}

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

pub fn he_conv(geom: ConvGeometry, rng: &mut ChaCha8Rng) -> Result<LayerSpec> {
    let fan_in = geom.in_ch * geom.kernel_h * geom.kernel_w;
    Ok(LayerSpec::Conv2d(Conv2d {
        geom,
        weight: he_tensor(&geom.kernel_shape(), fan_in, rng)?,
        bias: Tensor::zeros(&[geom.out_ch])?,
    }))
}

pub fn he_dense(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Result<LayerSpec> {
    Ok(LayerSpec::Dense(Dense {
        inputs,
        outputs,
        weight: he_tensor(&[inputs, outputs], inputs, rng)?,
        bias: Tensor::zeros(&[outputs])?,
    }))
}

/// Test-only access to the decomposed-layer variants with random factors.
#[doc(hidden)]
pub fn random_decomposed_conv(geom: ConvGeometry, rank: usize, rng: &mut ChaCha8Rng) -> Result<LayerSpec> {
    Ok(LayerSpec::DecomposedConv2d(DecomposedConv2d {
        geom,
        rank,
        f1: he_tensor(&[rank, 1, 1, geom.kernel_w], geom.kernel_w, rng)?,
        f2: he_tensor(&[rank, 1, geom.kernel_h, 1], geom.kernel_h, rng)?,
        f3: he_tensor(&[rank, geom.in_ch, 1, 1], geom.in_ch, rng)?,
        f4: he_tensor(&[geom.out_ch, rank, 1, 1], rank, rng)?,
        bias: he_tensor(&[geom.out_ch], 4, rng)?,
    }))
}

#[doc(hidden)]
pub fn random_decomposed_dense(inputs: usize, outputs: usize, rank: usize, rng: &mut ChaCha8Rng) -> Result<LayerSpec> {
    Ok(LayerSpec::DecomposedDense(DecomposedDense {
        inputs,
        outputs,
        rank,
        u: he_tensor(&[inputs, rank], inputs, rng)?,
        s: he_tensor(&[rank], 2, rng)?,
        v: he_tensor(&[outputs, rank], rank, rng)?,
        bias: he_tensor(&[outputs], 4, rng)?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut m = reference_cnn([1, 8, 8], 3, 1).unwrap();
        for t in m.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i[2] + i[3]) as f64).unwrap();
        let y = forward(&m, &x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = vec![0.5; 8];
        let (loss, _) = cross_entropy(&logits, &[1, 3], 4, 2.0);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_batches() {
        let m = reference_cnn([1, 8, 8], 3, 1).unwrap();
        assert!(forward(&m, &Tensor::zeros(&[2, 1, 8, 4]).unwrap()).is_err());
        let x = Tensor::zeros(&[1, 1, 8, 8]).unwrap();
        assert!(loss_and_grads(&m, &x, &[3]).is_err());
        assert!(loss_and_grads(&m, &x, &[0, 1]).is_err());
        assert!(reference_cnn([1, 10, 10], 3, 1).is_err());
    }

    #[test]
    fn non_finite_weights_are_reported() {
        let mut m = reference_cnn([1, 8, 8], 3, 1).unwrap();
        m.params_mut().last_mut().unwrap().data_mut()[0] = f64::NAN;
        let x = Tensor::from_fn(&[1, 1, 8, 8], |_| 1.0).unwrap();
        assert!(loss_and_grads(&m, &x, &[0]).is_err());
    }
}
