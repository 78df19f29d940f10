//! Stage 1: reconstruction-driven initial ranks, fine-tuning, and rank
//! backoff until the accuracy constraint holds.

use std::collections::BTreeMap;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::conductor::{check_termination, ComposedList, OptimizationConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lowrank::{
    conv_from_factors, cp_als, cp_als_warm, decompose_conv, decompose_dense, svd, rank_for_energy, AlsOptions,
    CpFactors, FactorSet,
};
use crate::model::{LayerSpec, Model};
use crate::nn::{evaluate_top1, train};

/// Model layer index → rank. Only transformed layers appear.
pub type RankAssignment = BTreeMap<usize, usize>;

/// Largest rank whose factorization has fewer weights than the dense
/// layer; 0 when no rank does (and for non-optimizable layers).
pub fn break_even_rank(layer: &LayerSpec) -> usize {
    match layer {
        LayerSpec::Conv2d(l) => {
            let g = &l.geom;
            (g.weight_count() - 1) / (g.kernel_w + g.kernel_h + g.in_ch + g.out_ch)
        }
        LayerSpec::Dense(l) => (l.inputs * l.outputs - 1) / (l.inputs + l.outputs + 1),
        _ => 0,
    }
}

/// Memoized factorizations of the original layers, keyed by
/// `(layer index, rank)`.
pub struct FactorCache {
    opts: AlsOptions,
    layers: BTreeMap<(usize, usize), (LayerSpec, f64)>,
}

impl FactorCache {
    pub fn new(opts: AlsOptions) -> Self {
        FactorCache {
            opts,
            layers: BTreeMap::new(),
        }
    }

    pub fn options(&self) -> &AlsOptions {
        &self.opts
    }

    /// Decomposed replacement for `original.layers[index]` at `rank`, with
    /// its reconstruction error.
    pub fn layer(&mut self, original: &Model, index: usize, rank: usize) -> Result<(LayerSpec, f64)> {
        if let Some(hit) = self.layers.get(&(index, rank)) {
            return Ok(hit.clone());
        }
        let entry = match &original.layers[index] {
            LayerSpec::Dense(l) => {
                let (d, f) = decompose_dense(l, rank)?;
                (LayerSpec::DecomposedDense(d), f.fit())
            }
            LayerSpec::Conv2d(l) => {
                let (d, f) = decompose_conv(l, rank, &self.opts)?;
                (LayerSpec::DecomposedConv2d(d), f.fit())
            }
            other => {
                return Err(Error::layer(index, format!("{} layers cannot be decomposed", other.kind())))
            }
        };
        self.layers.insert((index, rank), entry.clone());
        Ok(entry)
    }

    fn insert_conv(&mut self, original: &Model, index: usize, cp: CpFactors) -> Result<()> {
        if let LayerSpec::Conv2d(l) = &original.layers[index] {
            let rank = cp.rank;
            let fit = cp.fit;
            let d = conv_from_factors(l, &FactorSet::Conv(cp))?;
            self.layers
                .entry((index, rank))
                .or_insert((LayerSpec::DecomposedConv2d(d), fit));
        }
        Ok(())
    }
}

/// Smallest rank per selected layer meeting the reconstruction threshold:
/// singular-value tail energy ≤ ε² for dense layers, CP fit ≤ ε for
/// convolutions (doubling grid then binary refinement, each step warm
/// started). Everything is capped at the break-even rank. Returns the ranks
/// and the fit at each.
pub fn initial_ranks(
    model: &Model,
    composed: &ComposedList,
    epsilon1: f64,
    cache: &mut FactorCache,
) -> Result<(RankAssignment, BTreeMap<usize, f64>)> {
    let mut ranks = RankAssignment::new();
    let mut fits = BTreeMap::new();
    for index in composed.selected() {
        let layer = &model.layers[index];
        let cap = break_even_rank(layer);
        if cap == 0 {
            return Err(Error::layer(index, "selected layer has no compressing rank"));
        }
        let rank = match layer {
            LayerSpec::Dense(l) => {
                let s = svd(&l.weight).map_err(|e| Error::layer(index, e.to_string()))?;
                rank_for_energy(&s.s, epsilon1).clamp(1, cap)
            }
            LayerSpec::Conv2d(l) => conv_rank_search(model, index, &l.weight, cap, epsilon1, cache)
                .map_err(|e| Error::layer(index, e.to_string()))?,
            _ => unreachable!("composed list holds only optimizable layers"),
        };
        let (_, fit) = cache.layer(model, index, rank)?;
        debug!("layer {index}: initial rank {rank} (cap {cap}, fit {fit:.4})");
        ranks.insert(index, rank);
        fits.insert(index, fit);
    }
    Ok((ranks, fits))
}

fn conv_rank_search(
    model: &Model,
    index: usize,
    kernel: &crate::tensor::Tensor,
    cap: usize,
    eps: f64,
    cache: &mut FactorCache,
) -> Result<usize> {
    let opts = cache.options().clone();
    let mut failing: Option<CpFactors> = None;
    let mut grid = 1usize;
    let passing = loop {
        let r = grid.min(cap);
        let f = match &failing {
            None => cp_als(kernel, r, &opts)?,
            Some(prev) => cp_als_warm(kernel, prev, r, &opts)?,
        };
        let fit = f.fit;
        cache.insert_conv(model, index, f.clone())?;
        if fit <= eps {
            break r;
        }
        failing = Some(f);
        if r == cap {
            return Ok(cap);
        }
        grid *= 2;
    };
    // Refine between the last failing grid rank and the passing one.
    let Some(mut lo) = failing else {
        return Ok(passing);
    };
    let mut hi = passing;
    while hi - lo.rank > 1 {
        let mid = (lo.rank + hi) / 2;
        let f = cp_als_warm(kernel, &lo, mid, &opts)?;
        cache.insert_conv(model, index, f.clone())?;
        if f.fit <= eps {
            hi = mid;
        } else {
            lo = f;
        }
    }
    Ok(hi)
}

/// `original` with every layer in `ranks` replaced by its factorization.
pub fn build_candidate(
    original: &Model,
    ranks: &RankAssignment,
    cache: &mut FactorCache,
) -> Result<(Model, BTreeMap<usize, f64>)> {
    let mut model = original.clone();
    let mut fits = BTreeMap::new();
    for (&index, &rank) in ranks {
        let (layer, fit) = cache.layer(original, index, rank)?;
        model = model.replace_layer(index, layer)?;
        fits.insert(index, fit);
    }
    Ok((model, fits))
}

/// Fine-tunes only the layers in `ranks`; everything else stays frozen.
pub(crate) fn finetune(
    model: &Model,
    ranks: &RankAssignment,
    data: &Dataset,
    cfg: &OptimizationConfig,
    epochs: usize,
    salt: u64,
) -> Result<Model> {
    if ranks.is_empty() {
        return Ok(model.clone());
    }
    let mut tc = cfg.finetune(epochs, salt);
    tc.frozen = (0..model.layers.len()).filter(|i| !ranks.contains_key(i)).collect();
    Ok(train(model, data, &tc)?.model)
}

/// Raises the ranks of the ⌈25%⌉ worst-fit layers by 1.5× (rounded up,
/// capped). A layer already at its cap is dropped from the assignment.
pub fn backoff(ranks: &mut RankAssignment, fits: &BTreeMap<usize, f64>, caps: &BTreeMap<usize, usize>) -> Vec<usize> {
    let mut order: Vec<usize> = ranks.keys().copied().collect();
    order.sort_by(|a, b| fits[b].total_cmp(&fits[a]).then(a.cmp(b)));
    let count = order.len().div_ceil(4);
    let mut restored = Vec::new();
    for index in order.into_iter().take(count) {
        let cap = caps[&index];
        let r = ranks[&index];
        if r >= cap {
            ranks.remove(&index);
            restored.push(index);
        } else {
            ranks.insert(index, (r * 3).div_ceil(2).min(cap));
        }
    }
    restored
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub ranks: RankAssignment,
    pub fits: BTreeMap<usize, f64>,
    pub params: usize,
    pub val_accuracy: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCandidate {
    pub round: usize,
    pub val_accuracy: f64,
    pub params: usize,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationState {
    pub ranks: RankAssignment,
    pub round: usize,
    pub fits: BTreeMap<usize, f64>,
    pub best: Option<BestCandidate>,
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    /// Best candidate: feasible first, then fewest parameters.
    pub model: Model,
    /// Ranks of the best candidate.
    pub ranks: RankAssignment,
    pub best: BestCandidate,
    pub state: ExplorationState,
    pub rounds: Vec<RoundRecord>,
    pub delta_not_met: bool,
}

pub fn stage1(
    original: &Model,
    train_data: &Dataset,
    val: &Dataset,
    composed: &ComposedList,
    cfg: &OptimizationConfig,
    baseline_val: f64,
    cache: &mut FactorCache,
) -> Result<Stage1Outcome> {
    let identity = |state| Stage1Outcome {
        model: original.clone(),
        ranks: RankAssignment::new(),
        best: BestCandidate {
            round: 0,
            val_accuracy: baseline_val,
            params: original.count_params(),
            feasible: true,
        },
        state,
        rounds: Vec::new(),
        delta_not_met: false,
    };
    if composed.selected().is_empty() {
        return Ok(identity(ExplorationState {
            ranks: RankAssignment::new(),
            round: 0,
            fits: BTreeMap::new(),
            best: None,
        }));
    }

    let caps: BTreeMap<usize, usize> = composed
        .selected()
        .into_iter()
        .map(|i| (i, break_even_rank(&original.layers[i])))
        .collect();
    let (mut ranks, _) = initial_ranks(original, composed, cfg.epsilon1, cache)?;
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut best: Option<(BestCandidate, Model, RankAssignment)> = None;
    let mut state = ExplorationState {
        ranks: ranks.clone(),
        round: 0,
        fits: BTreeMap::new(),
        best: None,
    };
    for round in 0..=cfg.backoff_rounds {
        let (candidate, fits) = build_candidate(original, &ranks, cache)?;
        let tuned = finetune(&candidate, &ranks, train_data, cfg, cfg.finetune_epochs_stage1, 0x51 + round as u64)?;
        let acc = if ranks.is_empty() {
            baseline_val
        } else {
            evaluate_top1(&tuned, val)?
        };
        let feasible = check_termination(baseline_val, acc, cfg.delta).pass;
        let params = tuned.count_params();
        info!("stage 1 round {round}: ranks {ranks:?}, {params} params, validation {acc:.2}%");
        rounds.push(RoundRecord {
            round,
            ranks: ranks.clone(),
            fits: fits.clone(),
            params,
            val_accuracy: acc,
            feasible,
        });
        let record = BestCandidate {
            round,
            val_accuracy: acc,
            params,
            feasible,
        };
        let better = match &best {
            None => true,
            Some((b, _, _)) => (feasible && !b.feasible) || (feasible == b.feasible && params < b.params),
        };
        if better {
            best = Some((record.clone(), tuned, ranks.clone()));
        }
        state = ExplorationState {
            ranks: ranks.clone(),
            round,
            fits: fits.clone(),
            best: best.as_ref().map(|b| b.0.clone()),
        };
        if feasible || round == cfg.backoff_rounds {
            break;
        }
        let restored = backoff(&mut ranks, &fits, &caps);
        for index in restored {
            debug!("layer {index} at break-even rank; restored dense");
        }
    }
    let (best, model, ranks) = best.expect("at least one round runs");
    Ok(Stage1Outcome {
        delta_not_met: !best.feasible,
        model,
        ranks,
        best,
        state,
        rounds,
    })
}
