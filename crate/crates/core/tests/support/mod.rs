//! Independent oracles shared by the integration tests: naive instrumented
//! forward passes that count multiply-accumulates, a central-difference
//! gradient checker, and constructed low-rank weights.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankcut::model::{ActShape, LayerSpec};
use rankcut::nn::loss_and_grads;
use rankcut::{Model, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// 4-D kernel `Σ_k a_k ⊗ b_k ⊗ c_k ⊗ d_k` from Gaussian-ish factors.
pub fn cp_kernel(shape: [usize; 4], rank: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let factors: Vec<Vec<f64>> = shape
        .iter()
        .map(|&n| (0..n * rank).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    Tensor::from_fn(&shape, |i| {
        (0..rank)
            .map(|k| (0..4).map(|m| factors[m][i[m] * rank + k]).product::<f64>())
            .sum()
    })
    .unwrap()
}

// ---------------------------------------------------------------------------
// Instrumented forward pass

struct Img {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn conv(
    x: &Img,
    weight: &[f64],
    out_ch: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    depthwise: bool,
    macs: &mut u64,
) -> Img {
    let oh = (x.h + 2 * ph - kh) / sh + 1;
    let ow = (x.w + 2 * pw - kw) / sw + 1;
    let in_per_out = if depthwise { 1 } else { x.c };
    let mut out = vec![0.0; out_ch * oh * ow];
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..in_per_out {
                    let c = if depthwise { o } else { ci };
                    for ky in 0..kh {
                        for kx in 0..kw {
                            *macs += 1;
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            let v = x.data[(c * x.h + iy as usize) * x.w + ix as usize];
                            acc += weight[((o * in_per_out + ci) * kh + ky) * kw + kx] * v;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Img {
        c: out_ch,
        h: oh,
        w: ow,
        data: out,
    }
}

fn add_bias(x: &mut Img, bias: &[f64]) {
    let plane = x.h * x.w;
    for (k, v) in x.data.iter_mut().enumerate() {
        *v += bias[k / plane];
    }
}

/// Single-sample forward pass written from the layer definitions, counting
/// one MAC per multiply-accumulate (taps on zero padding included).
pub fn instrumented_forward(model: &Model, sample: &[f64]) -> (Vec<f64>, u64) {
    let [c, h, w] = model.input_shape;
    let mut data = sample.to_vec();
    if let Some(norm) = &model.input_norm {
        for (k, v) in data.iter_mut().enumerate() {
            let ch = k / (h * w);
            *v = (*v - norm.mean[ch]) / norm.std[ch];
        }
    }
    let mut x = Img { c, h, w, data };
    let mut macs = 0u64;
    for layer in &model.layers {
        x = match layer {
            LayerSpec::Conv2d(l) => {
                let g = &l.geom;
                let mut y = conv(
                    &x,
                    l.weight.data(),
                    g.out_ch,
                    (g.kernel_h, g.kernel_w),
                    (g.stride_h, g.stride_w),
                    (g.pad_h, g.pad_w),
                    false,
                    &mut macs,
                );
                add_bias(&mut y, l.bias.data());
                y
            }
            LayerSpec::DecomposedConv2d(l) => {
                let g = &l.geom;
                let r = l.rank;
                let z1 = conv(&x, l.f3.data(), r, (1, 1), (1, 1), (0, 0), false, &mut macs);
                let z2 = conv(&z1, l.f2.data(), r, (g.kernel_h, 1), (g.stride_h, 1), (g.pad_h, 0), true, &mut macs);
                let z3 = conv(&z2, l.f1.data(), r, (1, g.kernel_w), (1, g.stride_w), (0, g.pad_w), true, &mut macs);
                let mut y = conv(&z3, l.f4.data(), g.out_ch, (1, 1), (1, 1), (0, 0), false, &mut macs);
                add_bias(&mut y, l.bias.data());
                y
            }
            LayerSpec::Dense(l) => {
                let mut y = l.bias.data().to_vec();
                for i in 0..l.inputs {
                    for (j, yj) in y.iter_mut().enumerate() {
                        macs += 1;
                        *yj += x.data[i] * l.weight.data()[i * l.outputs + j];
                    }
                }
                Img {
                    c: l.outputs,
                    h: 1,
                    w: 1,
                    data: y,
                }
            }
            LayerSpec::DecomposedDense(l) => {
                let r = l.rank;
                let mut t = vec![0.0; r];
                for i in 0..l.inputs {
                    for (k, tk) in t.iter_mut().enumerate() {
                        macs += 1;
                        *tk += x.data[i] * l.u.data()[i * r + k];
                    }
                }
                for (k, tk) in t.iter_mut().enumerate() {
                    macs += 1;
                    *tk *= l.s.data()[k];
                }
                let mut y = l.bias.data().to_vec();
                for (j, yj) in y.iter_mut().enumerate() {
                    for (k, tk) in t.iter().enumerate() {
                        macs += 1;
                        *yj += tk * l.v.data()[j * r + k];
                    }
                }
                Img {
                    c: l.outputs,
                    h: 1,
                    w: 1,
                    data: y,
                }
            }
            LayerSpec::Relu => Img {
                data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                ..x
            },
            LayerSpec::MaxPool2d { kernel, stride } => {
                let oh = (x.h - kernel) / stride + 1;
                let ow = (x.w - kernel) / stride + 1;
                let mut out = Vec::with_capacity(x.c * oh * ow);
                for ch in 0..x.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = f64::NEG_INFINITY;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    m = m.max(x.data[(ch * x.h + oy * stride + ky) * x.w + ox * stride + kx]);
                                }
                            }
                            out.push(m);
                        }
                    }
                }
                Img {
                    c: x.c,
                    h: oh,
                    w: ow,
                    data: out,
                }
            }
            LayerSpec::Flatten => Img {
                c: x.c * x.h * x.w,
                h: 1,
                w: 1,
                ..x
            },
        };
    }
    (x.data, macs)
}

/// Parameters counted one stored scalar at a time.
pub fn enumerate_params(model: &Model) -> usize {
    let mut n = 0;
    for layer in &model.layers {
        for t in layer.params() {
            for _ in t.data() {
                n += 1;
            }
        }
    }
    n
}

pub fn activation_elements(shape: &ActShape) -> usize {
    match *shape {
        ActShape::Image { c, h, w } => c * h * w,
        ActShape::Flat(n) => n,
    }
}

// ---------------------------------------------------------------------------
// Finite differences

fn param_slots(layer: &mut LayerSpec) -> Vec<&mut Tensor> {
    match layer {
        LayerSpec::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
        LayerSpec::Dense(l) => vec![&mut l.weight, &mut l.bias],
        LayerSpec::DecomposedConv2d(l) => vec![&mut l.f1, &mut l.f2, &mut l.f3, &mut l.f4, &mut l.bias],
        LayerSpec::DecomposedDense(l) => vec![&mut l.u, &mut l.s, &mut l.v, &mut l.bias],
        _ => Vec::new(),
    }
}

fn nudge(model: &Model, layer: usize, slot: usize, index: usize, by: f64) -> Model {
    let mut m = model.clone();
    let mut slots = param_slots(&mut m.layers[layer]);
    let t = &mut slots[slot];
    let mut data = t.data().to_vec();
    data[index] += by;
    **t = Tensor::new(t.shape(), data).unwrap();
    m
}

/// Compares analytic gradients with central differences on up to
/// `per_tensor` entries of every parameter tensor. Returns the worst
/// relative error `|a − n| / max(|a|, |n|)` over entries whose magnitude
/// exceeds `floor` (smaller ones must agree absolutely within `floor`).
pub fn gradient_check(model: &Model, x: &Tensor, labels: &[usize], per_tensor: usize, floor: f64) -> f64 {
    let (_, grads) = loss_and_grads(model, x, labels).unwrap();
    let loss = |m: &Model| loss_and_grads(m, x, labels).unwrap().0;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (li, layer_grads) in grads.layers.iter().enumerate() {
        for (si, g) in layer_grads.iter().enumerate() {
            let n = g.len();
            let step = n.div_ceil(per_tensor).max(1);
            for idx in (0..n).step_by(step) {
                let plus = loss(&nudge(model, li, si, idx, h));
                let minus = loss(&nudge(model, li, si, idx, -h));
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = g.data()[idx];
                let scale = analytic.abs().max(numeric.abs());
                let err = if scale > floor {
                    (analytic - numeric).abs() / scale
                } else {
                    assert!(
                        (analytic - numeric).abs() <= floor,
                        "layer {li} tensor {si}[{idx}]: {analytic} vs {numeric}"
                    );
                    0.0
                };
                worst = worst.max(err);
            }
        }
    }
    worst
}
