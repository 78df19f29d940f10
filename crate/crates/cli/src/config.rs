//! Flat `key = value` configuration with flag overrides.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rankcut::conductor::OptimizationConfig;
use rankcut::data::SynthSpec;

#[derive(Debug, thiserror::Error)]
#[error("{origin}: {message}")]
pub struct ConfigError {
    pub origin: Origin,
    pub message: String,
}

/// Where a setting came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag(String),
    Effective,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "config line {n}"),
            Origin::Flag(name) => write!(f, "flag --{name}"),
            Origin::Effective => write!(f, "configuration"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
    },
    Synth(SynthSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub opt: OptimizationConfig,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub idx_train_images: Option<PathBuf>,
    pub idx_train_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    /// Epochs and learning rate of the `train` subcommand.
    pub train_epochs: usize,
    pub train_lr: f64,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            opt: OptimizationConfig::default(),
            model: None,
            out: None,
            report: None,
            idx_train_images: None,
            idx_train_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
            synth: None,
            train_epochs: 15,
            train_lr: 0.01,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a {}, got `{value}`", std::any::type_name::<T>()))
}

fn boolean(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{value}`")),
    }
}

fn float_list(key: &str, value: &str) -> Result<Vec<f64>, String> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

pub fn parse_synth(value: &str) -> Result<SynthSpec, String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let [n, classes, hw, seed] = parts[..] else {
        return Err(format!("synth expects n,classes,hw,seed, got `{value}`"));
    };
    Ok(SynthSpec {
        n_per_class: num("synth n", n)?,
        num_classes: num("synth classes", classes)?,
        hw: num("synth hw", hw)?,
        seed: num("synth seed", seed)?,
    })
}

/// `cpu:<workers>` is the only device.
pub fn parse_device(value: &str) -> Result<usize, String> {
    let workers = value.strip_prefix("cpu:").ok_or_else(|| {
        format!("device `{value}` is not supported; only CPU execution is available, use cpu:<workers>")
    })?;
    let n: usize = num("device", workers)?;
    if n == 0 {
        return Err("device cpu:<workers> needs at least one worker".into());
    }
    Ok(n)
}

impl CliConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let o = &mut self.opt;
        match key {
            "delta" => o.delta = num(key, value)?,
            "stage" => o.stage = num(key, value)?,
            "workers" => o.workers = num(key, value)?,
            "device" => o.workers = parse_device(value)?,
            "seed" => o.seed = num(key, value)?,
            "min_layer_params" => o.min_layer_params = num(key, value)?,
            "epsilon1" => o.epsilon1 = num(key, value)?,
            "finetune_epochs_stage1" => o.finetune_epochs_stage1 = num(key, value)?,
            "proxy_epochs" => o.proxy_epochs = num(key, value)?,
            "final_epochs" => o.final_epochs = num(key, value)?,
            "backoff_rounds" => o.backoff_rounds = num(key, value)?,
            "anneal_t0" => o.anneal.t0 = num(key, value)?,
            "anneal_gamma" => o.anneal.gamma = num(key, value)?,
            "anneal_steps" => o.anneal.steps = num(key, value)?,
            "anneal_shrink_factors" => o.anneal.shrink_factors = float_list(key, value)?,
            "anneal_grow_factor" => o.anneal.grow_factor = num(key, value)?,
            "anneal_grow_prob" => o.anneal.grow_prob = num(key, value)?,
            "anneal_lambda" => o.anneal.lambda = num(key, value)?,
            "batch_size" => o.batch_size = num(key, value)?,
            "finetune_lr" => o.finetune_lr = num(key, value)?,
            "momentum" => o.momentum = num(key, value)?,
            "weight_decay" => o.weight_decay = num(key, value)?,
            "augment" => o.augment = boolean(key, value)?,
            "als_restarts" => o.als_restarts = num(key, value)?,
            "als_max_iters" => o.als_max_iters = num(key, value)?,
            "als_tol" => o.als_tol = num(key, value)?,
            "timing_warmup" => o.timing.warmup = num(key, value)?,
            "timing_runs" => o.timing.runs = num(key, value)?,
            "train_epochs" => self.train_epochs = num(key, value)?,
            "train_lr" => self.train_lr = num(key, value)?,
            "model" => self.model = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "report" => self.report = Some(value.into()),
            "idx_train_images" => self.idx_train_images = Some(value.into()),
            "idx_train_labels" => self.idx_train_labels = Some(value.into()),
            "idx_test_images" => self.idx_test_images = Some(value.into()),
            "idx_test_labels" => self.idx_test_labels = Some(value.into()),
            "synth" => self.synth = Some(parse_synth(value)?),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Range checks; every check involves a single key, so running this
    /// after each assignment pins an error on the line or flag that set it.
    fn check(&self) -> Result<(), String> {
        self.opt
            .validate()
            .map_err(|e| e.to_string().trim_start_matches("invalid argument: ").to_string())?;
        if self.train_epochs == 0 {
            return Err("train_epochs must be >= 1".into());
        }
        Ok(())
    }

    /// Dataset selected by the idx/synth keys, if any.
    pub fn dataset(&self) -> Result<Option<DatasetSpec>, ConfigError> {
        let err = |m: &str| ConfigError {
            origin: Origin::Effective,
            message: m.to_string(),
        };
        let idx_any = self.idx_train_images.is_some() || self.idx_train_labels.is_some();
        match (&self.synth, idx_any) {
            (Some(_), true) => Err(err("choose either idx files or synth, not both")),
            (Some(s), false) => Ok(Some(DatasetSpec::Synth(*s))),
            (None, false) => Ok(None),
            (None, true) => {
                let (Some(images), Some(labels)) = (&self.idx_train_images, &self.idx_train_labels) else {
                    return Err(err("idx training data needs both images and labels"));
                };
                let test = match (&self.idx_test_images, &self.idx_test_labels) {
                    (Some(i), Some(l)) => Some((i.clone(), l.clone())),
                    (None, None) => None,
                    _ => return Err(err("idx test data needs both images and labels")),
                };
                Ok(Some(DatasetSpec::Idx {
                    train_images: images.clone(),
                    train_labels: labels.clone(),
                    test,
                }))
            }
        }
    }

    /// Effective settings, one `key = value` per line.
    pub fn echo(&self) -> String {
        let o = &self.opt;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let factors: Vec<String> = o.anneal.shrink_factors.iter().map(|f| f.to_string()).collect();
        let mut lines = vec![
            format!("delta = {}", o.delta),
            format!("stage = {}", o.stage),
            format!("workers = {}", o.workers),
            format!("seed = {}", o.seed),
            format!("min_layer_params = {}", o.min_layer_params),
            format!("epsilon1 = {}", o.epsilon1),
            format!("finetune_epochs_stage1 = {}", o.finetune_epochs_stage1),
            format!("proxy_epochs = {}", o.proxy_epochs),
            format!("final_epochs = {}", o.final_epochs),
            format!("backoff_rounds = {}", o.backoff_rounds),
            format!("anneal_t0 = {}", o.anneal.t0),
            format!("anneal_gamma = {}", o.anneal.gamma),
            format!("anneal_steps = {}", o.anneal.steps),
            format!("anneal_shrink_factors = {}", factors.join(",")),
            format!("anneal_grow_factor = {}", o.anneal.grow_factor),
            format!("anneal_grow_prob = {}", o.anneal.grow_prob),
            format!("anneal_lambda = {}", o.anneal.lambda),
            format!("batch_size = {}", o.batch_size),
            format!("finetune_lr = {}", o.finetune_lr),
            format!("momentum = {}", o.momentum),
            format!("weight_decay = {}", o.weight_decay),
            format!("augment = {}", o.augment),
            format!("als_restarts = {}", o.als_restarts),
            format!("als_max_iters = {}", o.als_max_iters),
            format!("als_tol = {}", o.als_tol),
            format!("timing_warmup = {}", o.timing.warmup),
            format!("timing_runs = {}", o.timing.runs),
            format!("train_epochs = {}", self.train_epochs),
            format!("train_lr = {}", self.train_lr),
        ];
        for (key, value) in [
            ("model", path(&self.model)),
            ("out", path(&self.out)),
            ("report", path(&self.report)),
            ("idx_train_images", path(&self.idx_train_images)),
            ("idx_train_labels", path(&self.idx_train_labels)),
            ("idx_test_images", path(&self.idx_test_images)),
            ("idx_test_labels", path(&self.idx_test_labels)),
        ] {
            if !value.is_empty() {
                lines.push(format!("{key} = {value}"));
            }
        }
        if let Some(s) = &self.synth {
            lines.push(format!("synth = {},{},{},{}", s.n_per_class, s.num_classes, s.hw, s.seed));
        }
        lines.join("\n")
    }

    pub fn require(&self, key: &str) -> Result<PathBuf, ConfigError> {
        let value = match key {
            "model" => &self.model,
            "out" => &self.out,
            "report" => &self.report,
            _ => &None,
        };
        value.clone().ok_or_else(|| ConfigError {
            origin: Origin::Effective,
            message: format!("missing required key `{key}` (set it in the config file or pass --{key})"),
        })
    }
}

/// Applies `file` (if any) and then `overrides` on top of the defaults,
/// and validates the result.
pub fn parse_config(file: Option<&str>, overrides: &[(String, String)]) -> Result<CliConfig, ConfigError> {
    let mut cfg = CliConfig::default();
    let mut seen = std::collections::BTreeMap::new();
    for (n, raw) in file.unwrap_or("").lines().enumerate() {
        let origin = Origin::Line(n + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fail = |message: String| ConfigError {
            origin: origin.clone(),
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(prev) = seen.insert(key.to_string(), n + 1) {
            return Err(fail(format!("`{key}` already set on line {prev}")));
        }
        cfg.set(key, value).and_then(|_| cfg.check()).map_err(fail)?;
    }
    for (key, value) in overrides {
        cfg.set(key, value).and_then(|_| cfg.check()).map_err(|message| ConfigError {
            origin: Origin::Flag(key.replace('_', "-")),
            message,
        })?;
    }
    cfg.dataset()?;
    Ok(cfg)
}
