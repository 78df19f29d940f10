//! Cost metrics of a model and the original-vs-optimized enhancement row.
//!
//! Conventions: size is 4 bytes per trainable parameter (biases included),
//! MACs count every multiply-accumulate of a single-sample forward pass
//! including taps that land on zero padding, and the memory footprint adds
//! every activation (input included) at batch size 1 to the parameter bytes.
//! One MAC is two FLOPs.

use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActShape, LayerSpec, Model};
use crate::nn::forward;
use crate::tensor::Tensor;

pub const BYTES_PER_PARAM: u64 = 4;
const MIB: f64 = 1024.0 * 1024.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Top-1 accuracy, percent.
    pub accuracy: f64,
    pub size_bytes: u64,
    /// Per sample.
    pub macs: u64,
    pub params: u64,
    /// Bytes at batch size 1.
    pub memory_footprint: u64,
    /// Median single-sample forward time.
    pub execution_time_ms: f64,
}

impl MetricsRecord {
    pub fn size_mb(&self) -> f64 {
        self.size_bytes as f64 / MIB
    }

    pub fn footprint_mb(&self) -> f64 {
        self.memory_footprint as f64 / MIB
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingOptions {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for TimingOptions {
    fn default() -> Self {
        TimingOptions { warmup: 5, runs: 30 }
    }
}

/// All six metrics; `accuracy` is supplied by the caller.
pub fn measure(model: &Model, accuracy: f64, timing: TimingOptions) -> Result<MetricsRecord> {
    let params = model.count_params() as u64;
    Ok(MetricsRecord {
        accuracy,
        size_bytes: BYTES_PER_PARAM * params,
        macs: count_macs(model)?,
        params,
        memory_footprint: memory_footprint(model)?,
        execution_time_ms: measure_time(model, timing.warmup, timing.runs)?,
    })
}

/// MACs of one layer applied to a single sample of shape `input`.
pub fn layer_macs(layer: &LayerSpec, input: &ActShape) -> Result<u64> {
    let out = layer.output_shape(input)?;
    let spatial = |s: &ActShape| match *s {
        ActShape::Image { h, w, .. } => (h as u64, w as u64),
        ActShape::Flat(_) => (1, 1),
    };
    let (h, w) = spatial(input);
    let (oh, ow) = spatial(&out);
    Ok(match layer {
        LayerSpec::Conv2d(l) => oh * ow * l.geom.weight_count() as u64,
        LayerSpec::Dense(l) => (l.inputs * l.outputs) as u64,
        LayerSpec::DecomposedConv2d(l) => {
            let g = &l.geom;
            let r = l.rank as u64;
            let pointwise_in = h * w * g.in_ch as u64 * r;
            let vertical = oh * w * g.kernel_h as u64 * r;
            let horizontal = oh * ow * g.kernel_w as u64 * r;
            let pointwise_out = oh * ow * r * g.out_ch as u64;
            pointwise_in + vertical + horizontal + pointwise_out
        }
        LayerSpec::DecomposedDense(l) => {
            let r = l.rank as u64;
            l.inputs as u64 * r + r + r * l.outputs as u64
        }
        LayerSpec::Relu | LayerSpec::MaxPool2d { .. } | LayerSpec::Flatten => 0,
    })
}

pub fn count_macs(model: &Model) -> Result<u64> {
    let shapes = model.infer_shapes()?;
    let mut input = model.input_act();
    let mut total = 0;
    for (layer, out) in model.layers.iter().zip(shapes) {
        total += layer_macs(layer, &input)?;
        input = out;
    }
    Ok(total)
}

pub fn memory_footprint(model: &Model) -> Result<u64> {
    let activations: usize = model.input_act().elements()
        + model
            .infer_shapes()?
            .iter()
            .map(ActShape::elements)
            .sum::<usize>();
    Ok(BYTES_PER_PARAM * (model.count_params() + activations) as u64)
}

/// Median wall-clock milliseconds of `runs` single-sample forward passes
/// after `warmup` discarded ones. Runs on the calling thread.
pub fn measure_time(model: &Model, warmup: usize, runs: usize) -> Result<f64> {
    if runs == 0 {
        return Err(Error::invalid("timing needs at least one run"));
    }
    let [c, h, w] = model.input_shape;
    let x = Tensor::from_fn(&[1, c, h, w], |i| ((i[2] * w + i[3]) % 7) as f64 / 7.0)?;
    for _ in 0..warmup {
        forward(model, &x)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        forward(model, &x)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    Ok(median.max(1e-6))
}

/// Signed accuracy difference and `original / optimized` ratios. A ratio
/// is `None` (rendered "inf") when the optimized metric is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancementRow {
    /// `optimized − original`, points.
    pub accuracy_delta: f64,
    pub size: Option<f64>,
    pub macs: Option<f64>,
    pub params: Option<f64>,
    pub memory_footprint: Option<f64>,
    pub execution_time: Option<f64>,
}

pub fn enhancement(original: &MetricsRecord, optimized: &MetricsRecord) -> EnhancementRow {
    let ratio = |name: &str, a: f64, b: f64| {
        if b == 0.0 {
            warn!("optimized {name} is zero; ratio reported as inf");
            None
        } else {
            Some(a / b)
        }
    };
    EnhancementRow {
        accuracy_delta: optimized.accuracy - original.accuracy,
        size: ratio("size", original.size_bytes as f64, optimized.size_bytes as f64),
        macs: ratio("MACs", original.macs as f64, optimized.macs as f64),
        params: ratio("params", original.params as f64, optimized.params as f64),
        memory_footprint: ratio(
            "memory footprint",
            original.memory_footprint as f64,
            optimized.memory_footprint as f64,
        ),
        execution_time: ratio(
            "execution time",
            original.execution_time_ms,
            optimized.execution_time_ms,
        ),
    }
}

/// `"12.34x"`, or `"inf"`.
pub fn format_ratio(ratio: Option<f64>) -> String {
    match ratio {
        Some(r) => format!("{r:.2}x"),
        None => "inf".to_string(),
    }
}

/// Two decimals with an ASCII sign; negative zero prints as `0.00`.
pub fn format_delta(delta: f64) -> String {
    let s = format!("{delta:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}
