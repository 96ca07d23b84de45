//! Token eviction policies.
//!
//! Each policy maps a prefill attention trace and a per-layer token budget
//! to an [`EvictionDecision`] in prompt coordinates:
//!
//! * **streaming** keeps the first `sink` positions and the most recent
//!   ones;
//! * **snapkv** scores prefix positions by the attention they receive from
//!   the last `window` query rows, summed over every head, pooled, and keeps
//!   the best plus the window itself;
//! * **compresskv** does the same with only the layer's top semantic
//!   retrieval heads, averaged, so streaming-dominated heads cannot crowd
//!   out retrieved content.
//!
//! Every decision keeps exactly `min(budget, prompt_len)` positions.
//! Ranking ties go to the higher pooled score, then the lower position.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::EvictionDecision;
use crate::error::{Error, Result};
use crate::heads::{select_top_heads, HeadScoreTable};
use crate::model::AttentionTrace;
use crate::numerics::avg_pool_1d;

/// How snapkv combines its per-KV-group scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapKvMode {
    /// Group scores are summed into one decision shared by the whole layer.
    #[default]
    LayerUnified,
    /// One keep set per KV group (see [`snapkv_per_group`]); not storable
    /// in a layer-unified cache.
    PerGroup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    /// Trailing prompt positions whose query rows score the prefix; always kept.
    pub window: usize,
    /// Odd average-pooling kernel applied across token positions.
    pub pool_kernel: usize,
    /// Semantic retrieval heads per layer that drive compresskv.
    pub top_k_heads: usize,
    /// Initial positions the streaming policy always keeps.
    pub sink: usize,
    pub snapkv_mode: SnapKvMode,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            window: 8,
            pool_kernel: 5,
            top_k_heads: 4,
            sink: 4,
            snapkv_mode: SnapKvMode::LayerUnified,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidArgument("window must be at least 1".into()));
        }
        if self.pool_kernel == 0 || self.pool_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("pool_kernel must be odd, got {}", self.pool_kernel)));
        }
        if self.top_k_heads == 0 {
            return Err(Error::InvalidArgument("top_k_heads must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Streaming,
    SnapKv,
    CompressKv,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Streaming, PolicyKind::SnapKv, PolicyKind::CompressKv];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Streaming => "streaming",
            PolicyKind::SnapKv => "snapkv",
            PolicyKind::CompressKv => "compresskv",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown policy `{s}` (streaming, snapkv, compresskv)")))
    }
}

/// A policy ready to run. compresskv borrows the head table it selects from.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Streaming,
    SnapKv,
    CompressKv(&'a HeadScoreTable),
}

impl<'a> Policy<'a> {
    /// Resolves a kind; compresskv needs a head table.
    pub fn from_kind(kind: PolicyKind, table: Option<&'a HeadScoreTable>) -> Result<Self> {
        Ok(match kind {
            PolicyKind::Streaming => Policy::Streaming,
            PolicyKind::SnapKv => Policy::SnapKv,
            PolicyKind::CompressKv => Policy::CompressKv(table.ok_or(Error::MissingHeadScores(0))?),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Streaming => PolicyKind::Streaming,
            Policy::SnapKv => PolicyKind::SnapKv,
            Policy::CompressKv(_) => PolicyKind::CompressKv,
        }
    }

    pub fn decide(&self, trace: &AttentionTrace, layer: usize, budget: usize, params: &PolicyParams) -> Result<EvictionDecision> {
        match self {
            Policy::Streaming => streaming_policy(layer, trace.prompt_len, budget, params),
            Policy::SnapKv => snapkv_policy(trace, layer, budget, params),
            Policy::CompressKv(table) => compresskv_policy(trace, layer, budget, params, table),
        }
    }

    /// One decision per layer for per-layer `budgets`.
    pub fn decide_all(&self, trace: &AttentionTrace, budgets: &[usize], params: &PolicyParams) -> Result<Vec<EvictionDecision>> {
        if budgets.len() != trace.num_layers() {
            return Err(Error::shape("Policy::decide_all", format!("{} budgets", trace.num_layers()), budgets.len()));
        }
        budgets
            .iter()
            .enumerate()
            .map(|(l, &b)| self.decide(trace, l, b, params))
            .collect()
    }
}

/// Keeps the first `sink` positions and the last `budget - sink`.
pub fn streaming_policy(layer: usize, prompt_len: usize, budget: usize, params: &PolicyParams) -> Result<EvictionDecision> {
    params.validate()?;
    if budget >= prompt_len {
        return Ok(EvictionDecision::keep_all(layer, prompt_len));
    }
    if budget < params.sink + params.window {
        return Err(Error::Infeasible(format!(
            "streaming budget {budget} is below sink + window = {}",
            params.sink + params.window
        )));
    }
    let keep = (0..params.sink).chain(prompt_len - (budget - params.sink)..prompt_len).collect();
    EvictionDecision::new(layer, keep)
}

/// Sum over the last `window` query rows of one head's prefill matrix, for
/// every prefix position `0..prompt_len - window`.
fn window_sums(trace: &AttentionTrace, layer: usize, head: usize, window: usize) -> Vec<f64> {
    let m = &trace.layers[layer].prefill[head];
    let n = trace.prompt_len;
    let mut acc = vec![0.0; n - window];
    for i in n - window..n {
        for (a, &v) in acc.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    acc
}

fn accumulate(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

/// Pools a prefix score vector and keeps the best `budget - window`
/// positions plus the window.
fn select_with_window(layer: usize, scores: &[f64], prompt_len: usize, budget: usize, params: &PolicyParams) -> Result<EvictionDecision> {
    let pooled = avg_pool_1d(scores, params.pool_kernel)?;
    let mut keep = top_positions(&pooled, budget - params.window);
    keep.extend(prompt_len - params.window..prompt_len);
    EvictionDecision::new(layer, keep)
}

/// Indices of the `k` largest scores, returned in ascending position order.
fn top_positions(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn check_budget(trace: &AttentionTrace, layer: usize, budget: usize, params: &PolicyParams) -> Result<bool> {
    params.validate()?;
    if layer >= trace.num_layers() {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    if budget >= trace.prompt_len {
        return Ok(true);
    }
    if budget <= params.window {
        return Err(Error::Infeasible(format!(
            "budget {budget} must exceed the observation window {}",
            params.window
        )));
    }
    Ok(false)
}

/// Per-KV-group window scores over prefix positions (un-pooled).
pub fn snapkv_group_scores(trace: &AttentionTrace, layer: usize, window: usize) -> Vec<Vec<f64>> {
    let group = trace.group_size();
    (0..trace.num_kv_heads)
        .map(|g| {
            let mut acc = vec![0.0; trace.prompt_len - window];
            for h in g * group..(g + 1) * group {
                accumulate(&mut acc, &window_sums(trace, layer, h, window));
            }
            acc
        })
        .collect()
}

/// Layer-unified snapkv: group scores summed across groups, pooled, top
/// positions plus the window.
pub fn snapkv_policy(trace: &AttentionTrace, layer: usize, budget: usize, params: &PolicyParams) -> Result<EvictionDecision> {
    if check_budget(trace, layer, budget, params)? {
        return Ok(EvictionDecision::keep_all(layer, trace.prompt_len));
    }
    let mut total = vec![0.0; trace.prompt_len - params.window];
    for g in snapkv_group_scores(trace, layer, params.window) {
        accumulate(&mut total, &g);
    }
    select_with_window(layer, &total, trace.prompt_len, budget, params)
}

/// Per-group snapkv: one keep set per KV group, each selected from that
/// group's own pooled scores.
pub fn snapkv_per_group(trace: &AttentionTrace, layer: usize, budget: usize, params: &PolicyParams) -> Result<Vec<EvictionDecision>> {
    if check_budget(trace, layer, budget, params)? {
        return Ok(vec![EvictionDecision::keep_all(layer, trace.prompt_len); trace.num_kv_heads]);
    }
    snapkv_group_scores(trace, layer, params.window)
        .iter()
        .map(|g| select_with_window(layer, g, trace.prompt_len, budget, params))
        .collect()
}

/// Head-driven selection: the layer's top `top_k_heads` semantic retrieval
/// heads score the prefix (window sums averaged across those heads, then
/// pooled) and one keep set serves every head in the layer.
///
/// `top_k_heads` is capped at the layer's head count.
pub fn compresskv_policy(
    trace: &AttentionTrace,
    layer: usize,
    budget: usize,
    params: &PolicyParams,
    table: &HeadScoreTable,
) -> Result<EvictionDecision> {
    if layer >= table.num_layers() || table.num_heads() != trace.num_q_heads {
        return Err(Error::MissingHeadScores(layer));
    }
    if check_budget(trace, layer, budget, params)? {
        return Ok(EvictionDecision::keep_all(layer, trace.prompt_len));
    }
    let k = params.top_k_heads.min(trace.num_q_heads);
    let mut heads = select_top_heads(table, layer, k)?;
    heads.sort_unstable();
    let mut mean = vec![0.0; trace.prompt_len - params.window];
    for &h in &heads {
        accumulate(&mut mean, &window_sums(trace, layer, h, params.window));
    }
    mean.iter_mut().for_each(|v| *v /= k as f64);
    select_with_window(layer, &mean, trace.prompt_len, budget, params)
}
