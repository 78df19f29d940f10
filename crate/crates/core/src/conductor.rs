//! Pipeline orchestration: configuration, layer selection, the two search
//! stages, and the final delta check.

use log::info;
use serde::{Deserialize, Serialize};

use crate::annealer::{stage2, AnnealSchedule};
use crate::data::{AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::explorer::{break_even_rank, stage1, FactorCache};
use crate::lowrank::AlsOptions;
use crate::metrics::{enhancement, measure, TimingOptions};
use crate::model::Model;
use crate::nn::{evaluate_top1, TrainConfig};
use crate::report::{Environment, Report, ReportRow, REPORT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationConfig {
    /// Tolerable accuracy drop, absolute percentage points.
    pub delta: f64,
    /// 1 = exploration only, 2 = exploration then annealing.
    pub stage: u8,
    pub workers: usize,
    pub seed: u64,
    /// Layers with fewer weights stay dense.
    pub min_layer_params: usize,
    /// Reconstruction-error threshold for the initial ranks.
    pub epsilon1: f64,
    pub finetune_epochs_stage1: usize,
    pub proxy_epochs: usize,
    pub final_epochs: usize,
    pub backoff_rounds: usize,
    pub anneal: AnnealSchedule,
    pub batch_size: usize,
    pub finetune_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub als_restarts: usize,
    pub als_max_iters: usize,
    pub als_tol: f64,
    pub timing: TimingOptions,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        OptimizationConfig {
            delta: 1.0,
            stage: 2,
            workers: 1,
            seed: 0,
            min_layer_params: 1000,
            epsilon1: 0.05,
            finetune_epochs_stage1: 10,
            proxy_epochs: 2,
            final_epochs: 10,
            backoff_rounds: 5,
            anneal: AnnealSchedule::default(),
            batch_size: 32,
            finetune_lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            augment: false,
            als_restarts: 3,
            als_max_iters: 200,
            als_tol: 1e-7,
            timing: TimingOptions::default(),
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::invalid("stage must be 1 or 2"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be >= 1"));
        }
        if !(self.epsilon1 >= 0.0 && self.epsilon1.is_finite()) {
            return Err(Error::invalid("epsilon1 must be >= 0"));
        }
        for (name, v) in [
            ("finetune_epochs_stage1", self.finetune_epochs_stage1),
            ("proxy_epochs", self.proxy_epochs),
            ("final_epochs", self.final_epochs),
            ("als_restarts", self.als_restarts),
            ("als_max_iters", self.als_max_iters),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.timing.runs == 0 {
            return Err(Error::invalid("timing runs must be >= 1"));
        }
        self.anneal.validate()?;
        self.finetune(1, 0).validate()
    }

    pub fn als_options(&self) -> AlsOptions {
        AlsOptions {
            max_iters: self.als_max_iters,
            tol: self.als_tol,
            restarts: self.als_restarts,
            seed: self.seed,
        }
    }

    /// Fine-tuning run of `epochs`; `salt` gives every run its own
    /// deterministic shuffle and augmentation streams.
    pub fn finetune(&self, epochs: usize, salt: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            lr: self.finetune_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            workers: self.workers,
            shuffle: true,
            augment: self.augment.then(AugmentConfig::default),
            frozen: Vec::new(),
        }
    }
}

/// One bit per optimizable layer: 1 = transform, 0 = frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedList {
    /// Model layer index of each bit.
    pub layers: Vec<usize>,
    pub bits: Vec<bool>,
}

impl ComposedList {
    pub fn selected(&self) -> Vec<usize> {
        self.layers
            .iter()
            .zip(&self.bits)
            .filter(|(_, &b)| b)
            .map(|(&i, _)| i)
            .collect()
    }

    pub fn set(&mut self, layer: usize, bit: bool) {
        if let Some(k) = self.layers.iter().position(|&l| l == layer) {
            self.bits[k] = bit;
        }
    }

    pub fn render(&self) -> String {
        let bits: Vec<&str> = self.bits.iter().map(|&b| if b { "1" } else { "0" }).collect();
        format!("[{}]", bits.join(","))
    }
}

/// A layer is transformed iff it has at least `min_layer_params` weights
/// and a factorization of rank 2 or more can still save parameters.
pub fn build_composed_list(model: &Model, min_layer_params: usize) -> ComposedList {
    let layers = model.optimizable_indices();
    let bits = layers
        .iter()
        .map(|&i| {
            let l = &model.layers[i];
            l.weight_count() >= min_layer_params && break_even_rank(l) >= 2
        })
        .collect();
    ComposedList { layers, bits }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub pass: bool,
    /// `delta − drop`
    pub margin: f64,
}

/// Accuracies differing by float noise at exactly `delta` still pass.
const BOUNDARY_SLACK: f64 = 1e-9;

pub fn check_termination(baseline: f64, candidate: f64, delta: f64) -> Termination {
    let drop = baseline - candidate;
    Termination {
        pass: drop <= delta + BOUNDARY_SLACK,
        margin: delta - drop,
    }
}

/// Data handed to the pipeline. `val` drives every decision; `test`, when
/// present, only feeds the reported accuracy column.
pub struct PipelineData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: Option<&'a Dataset>,
    pub descriptor: String,
}

pub struct PipelineOutcome {
    pub model: Model,
    pub report: Report,
}

pub fn run_pipeline(model: &Model, data: &PipelineData, cfg: &OptimizationConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    model.validate()?;
    let baseline_val = evaluate_top1(model, data.val)?;
    info!("baseline validation accuracy {baseline_val:.2}%");
    let composed = build_composed_list(model, cfg.min_layer_params);
    info!("composed list {}", composed.render());

    let mut cache = FactorCache::new(cfg.als_options());
    let s1 = stage1(model, data.train, data.val, &composed, cfg, baseline_val, &mut cache)?;
    info!(
        "stage 1: {} params, validation {:.2}%",
        s1.model.count_params(),
        s1.best.val_accuracy
    );
    let s2 = if cfg.stage == 2 {
        let out = stage2(model, &s1, data.train, data.val, cfg, baseline_val, &mut cache)?;
        info!(
            "stage 2: {} params, validation {:.2}%",
            out.model.count_params(),
            out.val_accuracy
        );
        Some(out)
    } else {
        None
    };

    let (final_model, final_val, final_ranks) = match &s2 {
        Some(s) => (&s.model, s.val_accuracy, s.ranks.clone()),
        None => (&s1.model, s1.best.val_accuracy, s1.ranks.clone()),
    };
    let termination = check_termination(baseline_val, final_val, cfg.delta);

    let accuracy = |m: &Model, val: f64| -> Result<f64> {
        match data.test {
            Some(t) => evaluate_top1(m, t),
            None => Ok(val),
        }
    };
    let mut rows = vec![ReportRow {
        label: "Original".into(),
        val_accuracy: baseline_val,
        metrics: measure(model, accuracy(model, baseline_val)?, cfg.timing)?,
    }];
    rows.push(ReportRow {
        label: "Stage1".into(),
        val_accuracy: s1.best.val_accuracy,
        metrics: measure(&s1.model, accuracy(&s1.model, s1.best.val_accuracy)?, cfg.timing)?,
    });
    if let Some(s) = &s2 {
        rows.push(ReportRow {
            label: "Stage2".into(),
            val_accuracy: s.val_accuracy,
            metrics: measure(&s.model, accuracy(&s.model, s.val_accuracy)?, cfg.timing)?,
        });
    }
    let enh = enhancement(&rows[0].metrics, &rows[rows.len() - 1].metrics);
    let final_composed = ComposedList {
        layers: composed.layers.clone(),
        bits: composed
            .layers
            .iter()
            .map(|i| final_ranks.contains_key(i))
            .collect(),
    };
    let report = Report {
        report_version: REPORT_VERSION,
        config: cfg.clone(),
        dataset: data.descriptor.clone(),
        model_name: model.name.clone(),
        composed_list: final_composed,
        ranks: final_ranks,
        delta_not_met: !termination.pass,
        margin: termination.margin,
        rows,
        enhancement: enh,
        stage1_rounds: s1.rounds.clone(),
        anneal_audit: s2.as_ref().map(|s| s.audit.clone()).unwrap_or_default(),
        anneal_fell_back: s2.as_ref().is_some_and(|s| s.fell_back),
        environment: Environment::current(cfg.workers),
    };
    Ok(PipelineOutcome {
        model: final_model.clone(),
        report,
    })
}
