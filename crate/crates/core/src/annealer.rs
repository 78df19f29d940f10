//! Stage 2: simulated annealing over the rank vector with the composed list
//! frozen.
//!
//! Geometric cooling `T_k = T0·γᵏ`, single-layer proposals, and Metropolis
//! acceptance on `E = size_ratio + λ·max(0, drop − δ)`.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conductor::{check_termination, OptimizationConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::explorer::{break_even_rank, finetune, FactorCache, RankAssignment, Stage1Outcome};
use crate::model::Model;
use crate::nn::evaluate_top1;

const ANNEAL_STREAM: u64 = 0xA22E_A1ED;
const FINAL_SALT: u64 = 0xF1AA;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub t0: f64,
    /// Cooling factor, `0 < γ < 1`.
    pub gamma: f64,
    pub steps: usize,
    pub shrink_factors: Vec<f64>,
    pub grow_factor: f64,
    pub grow_prob: f64,
    /// Penalty weight on the constraint violation.
    pub lambda: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            t0: 0.1,
            gamma: 0.9,
            steps: 20,
            shrink_factors: vec![0.6, 0.8],
            grow_factor: 1.25,
            grow_prob: 0.2,
            lambda: 10.0,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(Error::invalid("anneal T0 must be > 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("anneal gamma must lie in (0, 1)"));
        }
        if self.shrink_factors.is_empty() || self.shrink_factors.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::invalid("shrink factors must be non-empty and in (0, 1)"));
        }
        if !(self.grow_factor > 1.0 && self.grow_factor.is_finite()) {
            return Err(Error::invalid("grow factor must be > 1"));
        }
        if !(0.0..=1.0).contains(&self.grow_prob) {
            return Err(Error::invalid("grow probability must lie in [0, 1]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        Ok(())
    }

    pub fn temperature(&self, step: usize) -> f64 {
        self.t0 * self.gamma.powi(step as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    /// Compressed / original parameter count.
    pub size_ratio: f64,
    /// Validation accuracy drop, points.
    pub drop: f64,
    pub lambda: f64,
}

pub fn energy(terms: &EnergyTerms, delta: f64) -> f64 {
    terms.size_ratio + terms.lambda * (terms.drop - delta).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub layer: usize,
    pub from: usize,
    pub to: usize,
    /// Multiplier applied to the rank.
    pub factor: f64,
}

// Guards the floor/ceil against products like 5·0.6 landing a hair off.
const ROUNDING_SLACK: f64 = 1e-9;

pub fn shrink(rank: usize, factor: f64) -> usize {
    ((rank as f64 * factor + ROUNDING_SLACK).floor() as usize).max(1)
}

pub fn grow(rank: usize, factor: f64, cap: usize) -> usize {
    ((rank as f64 * factor - ROUNDING_SLACK).ceil() as usize).min(cap).max(rank)
}

/// Picks one layer uniformly and rescales its rank; other layers keep
/// theirs. `caps` holds the break-even rank of every layer in `ranks`.
pub fn propose(
    ranks: &RankAssignment,
    caps: &RankAssignment,
    schedule: &AnnealSchedule,
    rng: &mut impl Rng,
) -> Result<(RankAssignment, Proposal)> {
    if ranks.is_empty() {
        return Err(Error::invalid("cannot propose on an empty rank assignment"));
    }
    let layers: Vec<usize> = ranks.keys().copied().collect();
    let layer = layers[rng.random_range(0..layers.len())];
    let from = ranks[&layer];
    let (to, factor) = if rng.random::<f64>() < schedule.grow_prob {
        let cap = caps.get(&layer).copied().unwrap_or(from);
        (grow(from, schedule.grow_factor, cap), schedule.grow_factor)
    } else {
        let f = schedule.shrink_factors[rng.random_range(0..schedule.shrink_factors.len())];
        (shrink(from, f), f)
    };
    let mut next = ranks.clone();
    next.insert(layer, to);
    Ok((next, Proposal { layer, from, to, factor }))
}

/// Metropolis rule.
pub fn accept(delta_e: f64, temperature: f64, rng: &mut impl Rng) -> bool {
    debug_assert!(temperature > 0.0);
    delta_e <= 0.0 || rng.random::<f64>() < (-delta_e / temperature).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub step: usize,
    pub temperature: f64,
    pub proposal: Proposal,
    /// The proposal left the ranks unchanged; nothing was evaluated.
    pub noop: bool,
    pub val_accuracy: f64,
    pub params: usize,
    pub energy: f64,
    pub delta_e: f64,
    pub accepted: bool,
    pub feasible: bool,
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub model: Model,
    pub ranks: RankAssignment,
    pub val_accuracy: f64,
    pub audit: Vec<AuditEntry>,
    /// Evaluated proposals that met the constraint.
    pub feasible_states: usize,
    /// The stage-1 model was returned.
    pub fell_back: bool,
}

#[derive(Clone)]
struct State {
    ranks: RankAssignment,
    model: Model,
    val_accuracy: f64,
    energy: f64,
}

pub fn stage2(
    original: &Model,
    s1: &Stage1Outcome,
    train_data: &Dataset,
    val: &Dataset,
    cfg: &OptimizationConfig,
    baseline_val: f64,
    cache: &mut FactorCache,
) -> Result<Stage2Outcome> {
    let sched = &cfg.anneal;
    let fallback = |audit: Vec<AuditEntry>, feasible_states: usize| Stage2Outcome {
        model: s1.model.clone(),
        ranks: s1.ranks.clone(),
        val_accuracy: s1.best.val_accuracy,
        audit,
        feasible_states,
        fell_back: true,
    };
    if sched.steps == 0 || s1.ranks.is_empty() {
        return Ok(fallback(Vec::new(), 0));
    }
    let original_params = original.count_params() as f64;
    let stage1_params = s1.model.count_params();
    let energy_of = |model: &Model, acc: f64| {
        let terms = EnergyTerms {
            size_ratio: model.count_params() as f64 / original_params,
            drop: baseline_val - acc,
            lambda: sched.lambda,
        };
        energy(&terms, cfg.delta)
    };
    let caps: RankAssignment = s1
        .ranks
        .keys()
        .map(|&i| (i, break_even_rank(&original.layers[i])))
        .collect();

    let mut current = State {
        ranks: s1.ranks.clone(),
        model: s1.model.clone(),
        val_accuracy: s1.best.val_accuracy,
        energy: energy_of(&s1.model, s1.best.val_accuracy),
    };
    // Best feasible state found so far; `None` means stage 1 is still best.
    let mut best: Option<State> = None;
    let mut best_energy = if s1.best.feasible {
        current.energy
    } else {
        f64::INFINITY
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(ANNEAL_STREAM);
    let mut audit = Vec::with_capacity(sched.steps);
    let mut feasible_states = 0;

    for step in 1..=sched.steps {
        let t = sched.temperature(step);
        let (ranks, proposal) = propose(&current.ranks, &caps, sched, &mut rng)?;
        if proposal.to == proposal.from {
            audit.push(AuditEntry {
                step,
                temperature: t,
                proposal,
                noop: true,
                val_accuracy: current.val_accuracy,
                params: current.model.count_params(),
                energy: current.energy,
                delta_e: 0.0,
                accepted: true,
                feasible: check_termination(baseline_val, current.val_accuracy, cfg.delta).pass,
            });
            continue;
        }
        let fault = |e: Error| Error::Anneal {
            step,
            source: Box::new(e),
        };
        let (layer, _) = cache.layer(original, proposal.layer, proposal.to).map_err(fault)?;
        let candidate = current.model.replace_layer(proposal.layer, layer).map_err(fault)?;
        let tuned = finetune(&candidate, &ranks, train_data, cfg, cfg.proxy_epochs, 0xA000 + step as u64)
            .map_err(fault)?;
        let acc = evaluate_top1(&tuned, val).map_err(fault)?;
        let e = energy_of(&tuned, acc);
        let delta_e = e - current.energy;
        let accepted = accept(delta_e, t, &mut rng);
        let feasible = check_termination(baseline_val, acc, cfg.delta).pass;
        let params = tuned.count_params();
        debug!(
            "step {step}: layer {} {}→{}, val {acc:.2}%, E {e:.4} (ΔE {delta_e:+.4}), {}",
            proposal.layer,
            proposal.from,
            proposal.to,
            if accepted { "accepted" } else { "rejected" }
        );
        audit.push(AuditEntry {
            step,
            temperature: t,
            proposal,
            noop: false,
            val_accuracy: acc,
            params,
            energy: e,
            delta_e,
            accepted,
            feasible,
        });
        let state = State {
            ranks,
            model: tuned,
            val_accuracy: acc,
            energy: e,
        };
        if feasible {
            feasible_states += 1;
        }
        if feasible && params <= stage1_params && e < best_energy {
            best_energy = e;
            best = Some(state.clone());
        }
        if accepted {
            current = state;
        }
    }

    let Some(best) = best else {
        info!("annealing found no feasible improvement; keeping the stage-1 model");
        return Ok(fallback(audit, feasible_states));
    };
    let tuned = finetune(&best.model, &best.ranks, train_data, cfg, cfg.final_epochs, FINAL_SALT)?;
    let acc = evaluate_top1(&tuned, val)?;
    if !check_termination(baseline_val, acc, cfg.delta).pass {
        info!("final fine-tune of the annealed state missed delta ({acc:.2}%); keeping the stage-1 model");
        return Ok(fallback(audit, feasible_states));
    }
    Ok(Stage2Outcome {
        model: tuned,
        ranks: best.ranks,
        val_accuracy: acc,
        audit,
        feasible_states,
        fell_back: false,
    })
}
