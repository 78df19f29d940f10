use std::thread;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, loss_and_grads_scaled, GradientSet};
use crate::data::{augment_sample, sample_rng, shuffle, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub workers: usize,
    pub shuffle: bool,
    /// Applied to training batches only.
    pub augment: Option<AugmentConfig>,
    /// Layer indices whose parameters are left untouched (no gradient step,
    /// no weight decay).
    #[serde(default)]
    pub frozen: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            workers: 1,
            shuffle: true,
            augment: Some(AugmentConfig::default()),
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        if let Some(aug) = &self.augment {
            aug.validate()?;
        }
        Ok(())
    }
}

/// Parameter update rule. `step` receives every trainable tensor of the
/// model in layer order together with the matching gradient and must leave
/// the parameters unchanged when the learning rate is zero.
pub trait Optimizer {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]);
}

/// SGD with classical momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for SgdMomentum {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

fn gather(data: &Dataset, indices: &[usize], augment: Option<(&AugmentConfig, u64)>) -> Result<(Tensor, Vec<usize>)> {
    let shape = data.sample_shape();
    let mut buf = Vec::with_capacity(indices.len() * data.sample_len());
    for &i in indices {
        match augment {
            Some((cfg, seed)) => {
                let mut rng = sample_rng(seed, i as u64);
                buf.extend(augment_sample(data.sample(i), shape, cfg, &mut rng));
            }
            None => buf.extend_from_slice(data.sample(i)),
        }
    }
    let [c, h, w] = shape;
    Ok((
        Tensor::new(&[indices.len(), c, h, w], buf)?,
        indices.iter().map(|&i| data.labels[i]).collect(),
    ))
}

/// Loss and gradients for one mini-batch split into `workers` contiguous
/// shards; shard results are summed in shard order.
fn batch_gradients(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    augment: Option<(&AugmentConfig, u64)>,
    workers: usize,
) -> Result<(f64, GradientSet)> {
    let denom = indices.len() as f64;
    let shards: Vec<&[usize]> = indices.chunks(indices.len().div_ceil(workers)).collect();
    let results: Vec<Result<(f64, GradientSet)>> = if shards.len() == 1 {
        vec![gather(data, shards[0], augment)
            .and_then(|(x, y)| loss_and_grads_scaled(model, &x, &y, denom))]
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = shards
                .iter()
                .map(|shard| {
                    s.spawn(move || {
                        let (x, y) = gather(data, shard, augment)?;
                        loss_and_grads_scaled(model, &x, &y, denom)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one shard")?;
    for r in iter {
        let (l, g) = r?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Mini-batch SGD with momentum, weight decay and global-norm clipping at
/// [`CLIP_NORM`]. The result depends only on `(model, data, cfg)`: the
/// epoch order comes from `cfg.seed`, augmentation streams from
/// `(seed, epoch, sample)`, and shard gradients are reduced in fixed order.
pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    train_with(model, data, cfg, &mut opt)
}

pub fn train_with(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut dyn Optimizer,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if data.sample_shape() != model.input_shape {
        return Err(Error::shape(format!(
            "dataset samples {:?} do not match model input {:?}",
            data.sample_shape(),
            model.input_shape
        )));
    }
    let mut model = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            shuffle(&mut order, &mut rng);
        }
        let aug_seed = cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let fault = |message: String| Error::Training {
                epoch,
                batch: b,
                message,
            };
            let augment = cfg.augment.as_ref().map(|a| (a, aug_seed));
            let (loss, mut grads) = batch_gradients(&model, data, batch, augment, cfg.workers)
                .map_err(|e| fault(e.to_string()))?;
            if !loss.is_finite() {
                return Err(fault(format!("non-finite loss {loss}")));
            }
            for &i in &cfg.frozen {
                if let Some(layer) = grads.layers.get_mut(i) {
                    layer.clear();
                }
            }
            let norm = grads.global_norm();
            if norm > CLIP_NORM {
                grads.scale(CLIP_NORM / norm);
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut params: Vec<&mut Tensor> = model
                .layers
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| !cfg.frozen.contains(i))
                .flat_map(|(_, l)| l.params_mut())
                .collect();
            opt.step(&mut params, &grad_refs);
            total += loss * batch.len() as f64;
        }
        let mean = total / data.len() as f64;
        debug!("epoch {} loss {:.6}", epoch + 1, mean);
        losses.push(mean);
    }
    if let Some(last) = losses.last() {
        info!("trained {} epochs, final loss {:.6}", cfg.epochs, last);
    }
    Ok(TrainOutcome { model, losses })
}

/// Top-1 accuracy in percent; ties go to the lowest class index.
pub fn evaluate_top1(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let (x, y) = gather(data, chunk, None)?;
        let logits = forward(model, &x)?;
        let k = model.num_classes;
        for (row, &label) in logits.data().chunks_exact(k).zip(&y) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}
