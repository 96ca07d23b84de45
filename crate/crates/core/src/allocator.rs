//! Layer-adaptive cache budgets.
//!
//! Offline, each layer is compressed to a small probe budget and the
//! relative Frobenius error of its attention-block outputs is accumulated
//! over teacher-forced decode steps:
//!
//! ```text
//! e_d(l) = Σ_t ‖O_comp(l,t) − O_full(l,t)‖_F / (‖O_full(l,t)‖_F + ε)
//! ê_d(l) = e_d(l) / Σ_k e_d(k)          per calibration family d
//! ē(l)   = mean_d ê_d(l)
//! ẽ(l)   = ē(l) / Σ_k ē(k)
//! ```
//!
//! [`allocate`] then spreads a global token budget across layers in
//! proportion to `ẽ`, within per-layer bounds `[m, M]`, and repairs the
//! rounding residue one token at a time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::EvictionDecision;
use crate::error::{Error, Result};
use crate::heads::HeadScoreTable;
use crate::model::GQAModel;
use crate::numerics::{l2_norm, Matrix};
use crate::policies::{Policy, PolicyKind, PolicyParams};

/// Smallest per-layer allocation used by [`default_bounds`].
pub const DEFAULT_MIN_BUDGET: usize = 32;
pub const DEFAULT_PROBE_BUDGET: usize = 32;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Which layers are compressed while one layer's error is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    /// Only the measured layer is compressed; every other layer keeps its
    /// full cache, so the measured layer sees unperturbed inputs.
    #[default]
    OneLayer,
    /// Every layer is compressed at once and decoded together.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileOptions {
    pub probe_budget: usize,
    pub epsilon: f64,
    pub mode: ProfileMode,
    pub policy: PolicyKind,
    /// Policy parameters of the probe; taken from the run's policy section.
    #[serde(skip)]
    pub params: PolicyParams,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            probe_budget: DEFAULT_PROBE_BUDGET,
            epsilon: DEFAULT_EPSILON,
            mode: ProfileMode::OneLayer,
            policy: PolicyKind::CompressKv,
            params: PolicyParams::default(),
        }
    }
}

/// One calibration prompt: the prompt rows and the teacher-forced decode
/// inputs that follow it.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationPrompt<'a> {
    pub prompt: &'a Matrix,
    pub decode_inputs: &'a Matrix,
}

/// A family of calibration prompts, normalized together.
#[derive(Debug, Clone)]
pub struct CalibrationSet<'a> {
    pub name: String,
    pub prompts: Vec<CalibrationPrompt<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerErrorProfile {
    pub datasets: Vec<String>,
    /// `[dataset][layer]` accumulated relative errors.
    pub raw: Vec<Vec<f64>>,
    /// `[dataset][layer]` L1-normalized within each dataset.
    pub per_dataset: Vec<Vec<f64>>,
    /// Mean of `per_dataset` across datasets.
    pub averaged: Vec<f64>,
    /// `averaged`, L1-normalized; sums to 1.
    pub normalized: Vec<f64>,
    pub epsilon: f64,
    pub probe_budget: usize,
    pub decode_steps: usize,
    pub mode: ProfileMode,
    pub policy: PolicyKind,
}

impl LayerErrorProfile {
    pub fn num_layers(&self) -> usize {
        self.normalized.len()
    }
}

/// L1 normalization; an all-zero vector maps to the uniform distribution.
pub fn l1_normalize(v: &[f64]) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

/// The three normalization stages of raw `[dataset][layer]` errors.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedErrors {
    pub per_dataset: Vec<Vec<f64>>,
    pub averaged: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Normalizes `[dataset][layer]` raw errors: per dataset, then the mean
/// across datasets, then once more across layers.
pub fn normalize_errors(raw: &[Vec<f64>]) -> Result<NormalizedErrors> {
    let layers = raw.first().map_or(0, Vec::len);
    if raw.is_empty() || layers == 0 || raw.iter().any(|r| r.len() != layers) {
        return Err(Error::InvalidArgument("need at least one dataset with a common, non-zero layer count".into()));
    }
    if raw.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("raw errors must be finite and non-negative".into()));
    }
    let per_dataset: Vec<Vec<f64>> = raw.iter().map(|r| l1_normalize(r)).collect();
    let d = per_dataset.len() as f64;
    let averaged: Vec<f64> = (0..layers)
        .map(|l| per_dataset.iter().map(|r| r[l]).sum::<f64>() / d)
        .collect();
    let normalized = l1_normalize(&averaged);
    Ok(NormalizedErrors { per_dataset, averaged, normalized })
}

/// Relative Frobenius error of one output row.
pub fn relative_error(comp: &[f64], full: &[f64], epsilon: f64) -> f64 {
    let diff: Vec<f64> = comp.iter().zip(full).map(|(a, b)| a - b).collect();
    l2_norm(&diff) / (l2_norm(full) + epsilon)
}

/// Per-layer errors of one prompt, `[layer]`.
pub fn prompt_layer_errors(
    model: &GQAModel,
    prompt: CalibrationPrompt<'_>,
    table: Option<&HeadScoreTable>,
    opts: &ProfileOptions,
) -> Result<Vec<f64>> {
    let steps = prompt.decode_inputs.rows();
    if steps == 0 {
        return Err(Error::InvalidArgument("error profiling needs at least one decode step".into()));
    }
    let num_layers = model.config().num_layers;
    let pre = model.prefill(prompt.prompt)?;
    let policy = Policy::from_kind(opts.policy, table)?;
    let decisions: Vec<EvictionDecision> = (0..num_layers)
        .map(|l| policy.decide(&pre.trace, l, opts.probe_budget, &opts.params))
        .collect::<Result<_>>()?;

    let mut full_cache = pre.cache.clone();
    let full_steps = prompt
        .decode_inputs
        .row_iter()
        .map(|x| model.decode_step(&mut full_cache, x))
        .collect::<Result<Vec<_>>>()?;

    let mut errors = vec![0.0; num_layers];
    match opts.mode {
        ProfileMode::OneLayer => {
            for (l, d) in decisions.iter().enumerate() {
                let mut view = pre.cache.layer(l).retain_view(&d.keep_indices)?;
                for step in &full_steps {
                    let input = &step.layer_inputs[l];
                    let (k, v) = model.project_kv(l, input)?;
                    view.append(&k, &v)?;
                    let comp = model.attention_block_output(l, input, &view)?;
                    errors[l] += relative_error(&comp, &step.layer_outputs[l], opts.epsilon);
                }
            }
        }
        ProfileMode::Joint => {
            let mut cache = pre.cache.clone();
            for d in &decisions {
                cache.apply_eviction(d)?;
            }
            for (x, full) in prompt.decode_inputs.row_iter().zip(&full_steps) {
                let comp = model.decode_step(&mut cache, x)?;
                for (l, e) in errors.iter_mut().enumerate() {
                    *e += relative_error(&comp.layer_outputs[l], &full.layer_outputs[l], opts.epsilon);
                }
            }
        }
    }
    Ok(errors)
}

/// Profiles every layer over all calibration sets and normalizes the
/// result. `table` is required when the probe policy is compresskv.
pub fn profile_layer_errors(
    model: &GQAModel,
    sets: &[CalibrationSet<'_>],
    table: Option<&HeadScoreTable>,
    opts: &ProfileOptions,
) -> Result<LayerErrorProfile> {
    if sets.is_empty() || sets.iter().any(|s| s.prompts.is_empty()) {
        return Err(Error::InvalidArgument("every calibration set needs at least one prompt".into()));
    }
    let num_layers = model.config().num_layers;
    let mut raw = Vec::with_capacity(sets.len());
    let mut decode_steps = None;
    for set in sets {
        for p in &set.prompts {
            let t = p.decode_inputs.rows();
            if t == 0 {
                return Err(Error::InvalidArgument("error profiling needs at least one decode step".into()));
            }
            if *decode_steps.get_or_insert(t) != t {
                return Err(Error::InvalidArgument("calibration prompts must share one decode length".into()));
            }
        }
        let per_prompt: Vec<Vec<f64>> = set
            .prompts
            .par_iter()
            .map(|p| prompt_layer_errors(model, *p, table, opts))
            .collect::<Result<_>>()?;
        let mut e = vec![0.0; num_layers];
        for p in &per_prompt {
            for (a, b) in e.iter_mut().zip(p) {
                *a += b;
            }
        }
        raw.push(e);
    }
    let NormalizedErrors { per_dataset, averaged, normalized } = normalize_errors(&raw)?;
    Ok(LayerErrorProfile {
        datasets: sets.iter().map(|s| s.name.clone()).collect(),
        raw,
        per_dataset,
        averaged,
        normalized,
        epsilon: opts.epsilon,
        probe_budget: opts.probe_budget,
        decode_steps: decode_steps.unwrap_or(0),
        mode: opts.mode,
        policy: opts.policy,
    })
}

/// Per-layer token budgets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub budgets: Vec<usize>,
    pub min: usize,
    pub max: usize,
    pub total: usize,
    /// Single-token corrections applied after proportional rounding.
    pub corrections: usize,
}

impl BudgetPlan {
    /// Equal split; any remainder goes to the lowest layers.
    pub fn uniform(num_layers: usize, total: usize) -> Self {
        let base = total / num_layers;
        let extra = total % num_layers;
        let budgets: Vec<usize> = (0..num_layers).map(|l| base + usize::from(l < extra)).collect();
        Self {
            min: *budgets.iter().min().unwrap_or(&0),
            max: *budgets.iter().max().unwrap_or(&0),
            budgets,
            total,
            corrections: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.budgets.len()
    }

    /// `layer,budget` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,budget\n");
        for (l, b) in self.budgets.iter().enumerate() {
            s.push_str(&format!("{l},{b}\n"));
        }
        s
    }
}

/// `(m, M)` with `m = 32` and `M = 3 · ⌊total / layers⌋`.
pub fn default_bounds(total: usize, num_layers: usize) -> Result<(usize, usize)> {
    if num_layers == 0 {
        return Err(Error::InvalidArgument("need at least one layer".into()));
    }
    if total < DEFAULT_MIN_BUDGET * num_layers {
        return Err(Error::Infeasible(format!(
            "total budget {total} is below {DEFAULT_MIN_BUDGET} per layer for {num_layers} layers"
        )));
    }
    Ok((DEFAULT_MIN_BUDGET, 3 * (total / num_layers)))
}

/// Error-proportional allocation of `total` tokens within `[min, max]` per
/// layer.
///
/// Every layer starts at `min`; the remainder `R` is split as
/// `round(ẽ_i · R)` (half away from zero) and clipped to the bounds. The
/// residue is then repaired one token at a time: a shortfall goes to the
/// highest-error layer still below `max`, an excess comes from the
/// lowest-error layer still above `min`, ties to the lower layer index.
pub fn allocate(errors: &[f64], total: usize, min: usize, max: usize) -> Result<BudgetPlan> {
    let l = errors.len();
    if l == 0 {
        return Err(Error::InvalidArgument("need at least one layer".into()));
    }
    if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::InvalidArgument("layer errors must be finite and non-negative".into()));
    }
    if min > max || total < l * min || total > l * max {
        return Err(Error::Infeasible(format!(
            "total {total} is outside [{}, {}] for {l} layers with bounds [{min}, {max}]",
            l * min,
            l * max
        )));
    }
    let (lo, hi) = (min as i64, max as i64);
    let mut budgets = vec![lo; l];
    let remaining = total as i64 - budgets.iter().sum::<i64>();
    for (b, &e) in budgets.iter_mut().zip(errors) {
        *b = (*b + (e * remaining as f64).round() as i64).clamp(lo, hi);
    }
    let mut delta = total as i64 - budgets.iter().sum::<i64>();
    let ceiling = l * (max - min) + 1;
    let mut corrections = 0;
    while delta != 0 {
        if corrections >= ceiling {
            return Err(Error::Infeasible(format!("allocation did not converge within {ceiling} corrections")));
        }
        let pick = if delta > 0 {
            (0..l)
                .filter(|&i| budgets[i] < hi)
                .reduce(|best, i| if errors[i] > errors[best] { i } else { best })
        } else {
            (0..l)
                .filter(|&i| budgets[i] > lo)
                .reduce(|best, i| if errors[i] < errors[best] { i } else { best })
        };
        let Some(j) = pick else { break };
        budgets[j] += delta.signum();
        delta -= delta.signum();
        corrections += 1;
    }
    Ok(BudgetPlan {
        budgets: budgets.into_iter().map(|b| b as usize).collect(),
        min,
        max,
        total,
        corrections,
    })
}
