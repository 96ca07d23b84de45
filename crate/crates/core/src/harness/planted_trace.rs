//! Attention traces with planted per-head behaviour.
//!
//! Every row is a mixture of a few mass components, each spread over a set
//! of positions with small multiplicative jitter:
//!
//! | label                | observation rows and decode rows              | other prefill rows       |
//! |----------------------|-----------------------------------------------|--------------------------|
//! | `streaming`          | 0.45 sink, 0.45 recent `local`, 0.10 diffuse  | same                     |
//! | `semantic_retrieval` | 0.60 span ∪ neighbours, 0.10 sink, 0.30 diffuse | 0.10 sink, 0.90 diffuse |
//! | `copy_paste`         | decode: ~0.2 on `span[t mod s]`, 0.10 sink, rest diffuse | 0.10 sink, 0.90 diffuse |
//! | `diffuse`            | jittered near-uniform                         | same                     |
//!
//! Within span ∪ neighbours, span positions weigh twice as much as the
//! (radius 2) neighbours. Observation rows are the last `window` prompt rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{score_heads, AnswerSpan, HeadScoreTable};
use crate::model::{AttentionTrace, DecodeRows, LayerTrace};
use crate::numerics::{mix_seed, Matrix};
use crate::policies::{compresskv_policy, snapkv_policy, PolicyParams};

pub const NEIGHBOUR_RADIUS: usize = 2;
const JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLabel {
    Streaming,
    CopyPaste,
    SemanticRetrieval,
    Diffuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTraceSpec {
    /// `[layer][head]`.
    pub labels: Vec<Vec<HeadLabel>>,
    pub num_kv_heads: usize,
    pub seq_len: usize,
    /// Observation window of the eviction policies.
    pub window: usize,
    /// Recency width of streaming heads; at least `window`.
    pub local: usize,
    pub sink: usize,
    pub span_len: usize,
    pub decode_steps: usize,
    pub seed: u64,
}

impl PlantedTraceSpec {
    pub fn new(labels: Vec<Vec<HeadLabel>>, num_kv_heads: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            labels,
            num_kv_heads,
            seq_len,
            window: 8,
            local: 16,
            sink: 4,
            span_len: 4,
            decode_steps: 8,
            seed,
        }
    }

    fn validate(&self) -> Result<usize> {
        let heads = self.labels.first().map_or(0, Vec::len);
        if heads == 0 || self.labels.iter().any(|l| l.len() != heads) {
            return Err(Error::InvalidArgument("labels must cover every head of every layer".into()));
        }
        if self.num_kv_heads == 0 || !heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::InvalidArgument(format!(
                "{heads} heads cannot be split into {} groups",
                self.num_kv_heads
            )));
        }
        if self.local < self.window || self.span_len == 0 || self.decode_steps == 0 || self.sink == 0 {
            return Err(Error::InvalidArgument("need sink, span, decode steps > 0 and local >= window".into()));
        }
        let need = self.sink + self.local + self.span_len + 2 * NEIGHBOUR_RADIUS + 1;
        if self.seq_len < need {
            return Err(Error::Infeasible(format!("sequence length {} is below {need}", self.seq_len)));
        }
        Ok(heads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTrace {
    pub trace: AttentionTrace,
    pub labels: Vec<Vec<HeadLabel>>,
    pub span: AnswerSpan,
    /// Token emitted at each decode step (the span tokens, cyclically).
    pub generated: Vec<u32>,
    pub sink: usize,
    pub window: usize,
    pub local: usize,
}

impl PlantedTrace {
    pub fn neighbourhood(&self) -> Vec<usize> {
        let lo = self.span.first().saturating_sub(NEIGHBOUR_RADIUS);
        let hi = (self.span.last() + NEIGHBOUR_RADIUS).min(self.trace.prompt_len - 1);
        (lo..=hi).collect()
    }

    pub fn heads_with(&self, layer: usize, label: HeadLabel) -> Vec<usize> {
        (0..self.labels[layer].len()).filter(|&h| self.labels[layer][h] == label).collect()
    }

    /// Head scores computed from the decode rows.
    pub fn head_table(&self) -> Result<HeadScoreTable> {
        score_heads(&self.trace, &self.generated, &self.span)
    }

    /// Checks row sums and the mass placement each label promises.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        self.trace.validate(tol)?;
        let n = self.trace.prompt_len;
        let near = self.neighbourhood();
        let fail = |what: &str, l: usize, h: usize, m: f64| {
            Err(Error::InvalidArgument(format!("layer {l} head {h}: {what} mass {m:.3}")))
        };
        for (l, lt) in self.trace.layers.iter().enumerate() {
            for (h, label) in self.labels[l].iter().enumerate() {
                let mut rows: Vec<(usize, &[f64])> =
                    (0..n).map(|i| (i, &lt.prefill[h].row(i)[..=i])).collect();
                rows.extend(lt.decode.iter().map(|d| (d.positions.len() - 1, d.rows[h].as_slice())));
                match label {
                    HeadLabel::Streaming => {
                        for (c, row) in rows {
                            let m: f64 = row
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| *j < self.sink || *j + self.local > c)
                                .map(|(_, a)| a)
                                .sum();
                            if m < 0.8 {
                                return fail("sink + recent", l, h, m);
                            }
                        }
                    }
                    HeadLabel::SemanticRetrieval => {
                        for d in &lt.decode {
                            let m: f64 = near.iter().map(|&j| d.rows[h][j]).sum();
                            if m < 0.5 {
                                return fail("span + neighbours", l, h, m);
                            }
                        }
                    }
                    HeadLabel::CopyPaste | HeadLabel::Diffuse => {}
                }
            }
        }
        Ok(())
    }
}

struct RowBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    row: Vec<f64>,
}

impl RowBuilder<'_> {
    fn jitter(&mut self, sigma: f64) -> f64 {
        (sigma * 3f64.sqrt() * (2.0 * self.rng.random::<f64>() - 1.0)).exp()
    }

    /// Spreads `mass` over `(position, weight)` pairs in proportion to the
    /// jittered weights.
    fn add(&mut self, mass: f64, parts: impl IntoIterator<Item = (usize, f64)>) {
        let parts: Vec<(usize, f64)> = parts.into_iter().collect();
        let w: Vec<f64> = parts.iter().map(|&(_, w)| w * self.jitter(JITTER)).collect();
        let total: f64 = w.iter().sum();
        for (&(p, _), wi) in parts.iter().zip(&w) {
            self.row[p] += mass * wi / total;
        }
    }

    fn diffuse(&mut self, mass: f64, sigma: f64) {
        let v = self.row.len();
        let w: Vec<f64> = (0..v).map(|_| self.jitter(sigma)).collect();
        let total: f64 = w.iter().sum();
        for (r, wi) in self.row.iter_mut().zip(&w) {
            *r += mass * wi / total;
        }
    }
}

struct Layout<'a> {
    spec: &'a PlantedTraceSpec,
    span: &'a [usize],
    near: Vec<(usize, f64)>,
}

impl Layout<'_> {
    /// Row over positions `0..=c`. `step` is the decode step, if any.
    fn row(&self, rng: &mut ChaCha8Rng, label: HeadLabel, c: usize, step: Option<usize>) -> Vec<f64> {
        let spec = self.spec;
        let observing = step.is_some() || c + spec.window >= spec.seq_len;
        let sink = (0..spec.sink.min(c + 1)).map(|j| (j, 1.0));
        let mut b = RowBuilder { rng, row: vec![0.0; c + 1] };
        match label {
            HeadLabel::Streaming => {
                b.add(0.45, sink);
                b.add(0.45, ((c + 1).saturating_sub(spec.local)..=c).map(|j| (j, 1.0)));
                b.diffuse(0.10, 0.5);
            }
            HeadLabel::SemanticRetrieval if observing => {
                b.add(0.60, self.near.iter().copied());
                b.add(0.10, sink);
                b.diffuse(0.30, 0.5);
            }
            HeadLabel::CopyPaste if step.is_some() => {
                let peak = 0.2 * b.jitter(0.25);
                let target = self.span[step.unwrap_or(0) % self.span.len()];
                b.add(peak, [(target, 1.0)]);
                b.add(0.10, sink);
                b.diffuse(0.9 - peak, 0.5);
            }
            HeadLabel::SemanticRetrieval | HeadLabel::CopyPaste => {
                b.add(0.10, sink);
                b.diffuse(0.90, 0.5);
            }
            HeadLabel::Diffuse => b.diffuse(1.0, 0.5),
        }
        b.row
    }
}

pub fn generate_planted_trace(spec: &PlantedTraceSpec) -> Result<PlantedTrace> {
    let heads = spec.validate()?;
    let n = spec.seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x7ace));
    let lo = spec.sink + NEIGHBOUR_RADIUS;
    let hi = n - spec.local - spec.span_len - NEIGHBOUR_RADIUS;
    let start = rng.random_range(lo..=hi);
    let answer_ids: Vec<u32> = (0..spec.span_len as u32).map(|i| 100 + i).collect();
    let span = AnswerSpan::contiguous(start, spec.span_len, answer_ids.clone())?;
    let near = (start - NEIGHBOUR_RADIUS..start + spec.span_len + NEIGHBOUR_RADIUS)
        .map(|j| (j, if span.contains(j) { 2.0 } else { 1.0 }))
        .collect();
    let layout = Layout { spec, span: &span.positions, near };

    let layers = spec
        .labels
        .iter()
        .map(|labels| {
            let prefill = labels
                .iter()
                .map(|&label| {
                    let mut m = Matrix::zeros(n, n);
                    for i in 0..n {
                        let row = layout.row(&mut rng, label, i, None);
                        m.row_mut(i)[..=i].copy_from_slice(&row);
                    }
                    m
                })
                .collect();
            let decode = (0..spec.decode_steps)
                .map(|t| DecodeRows {
                    positions: (0..=n + t).collect(),
                    rows: labels.iter().map(|&label| layout.row(&mut rng, label, n + t, Some(t))).collect(),
                })
                .collect();
            LayerTrace { prefill, decode }
        })
        .collect();

    Ok(PlantedTrace {
        trace: AttentionTrace {
            num_q_heads: heads,
            num_kv_heads: spec.num_kv_heads,
            prompt_len: n,
            layers,
        },
        labels: spec.labels.clone(),
        span,
        generated: (0..spec.decode_steps).map(|t| answer_ids[t % spec.span_len]).collect(),
        sink: spec.sink,
        window: spec.window,
        local: spec.local,
    })
}

/// One layer of `groups` GQA groups, each holding `streaming_per_group`
/// streaming heads and one semantic retrieval head at a seeded slot.
pub fn streaming_dominated_spec(groups: usize, streaming_per_group: usize, seq_len: usize, seed: u64) -> PlantedTraceSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1c));
    let g = streaming_per_group + 1;
    let mut labels = Vec::with_capacity(groups * g);
    for _ in 0..groups {
        let slot = rng.random_range(0..g);
        labels.extend((0..g).map(|i| if i == slot { HeadLabel::SemanticRetrieval } else { HeadLabel::Streaming }));
    }
    PlantedTraceSpec::new(vec![labels], groups, seq_len, seed)
}

/// `layers` layers of `heads` heads; `srh` semantic retrieval heads per
/// layer at seeded slots, the rest streaming or diffuse at random.
pub fn random_srh_spec(layers: usize, heads: usize, kv_heads: usize, srh: usize, seq_len: usize, seed: u64) -> Result<PlantedTraceSpec> {
    if srh > heads {
        return Err(Error::InvalidArgument(format!("{srh} retrieval heads do not fit in {heads} heads")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5e));
    let labels = (0..layers)
        .map(|_| {
            let mut slots: Vec<usize> = (0..heads).collect();
            for i in 0..srh {
                let j = rng.random_range(i..heads);
                slots.swap(i, j);
            }
            let chosen = &slots[..srh];
            (0..heads)
                .map(|h| {
                    if chosen.contains(&h) {
                        HeadLabel::SemanticRetrieval
                    } else if rng.random::<bool>() {
                        HeadLabel::Streaming
                    } else {
                        HeadLabel::Diffuse
                    }
                })
                .collect()
        })
        .collect();
    Ok(PlantedTraceSpec::new(labels, kv_heads, seq_len, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryOutcome {
    pub seed: u64,
    pub prompt_len: usize,
    pub budget: usize,
    pub compresskv_retained: bool,
    pub snapkv_retained: bool,
}

/// Streaming-dominated groups (3 streaming + 1 retrieval head each, 4
/// groups) at budget `⌊budget_fraction · n⌋`, with `n` drawn from
/// `len_range` per seed. The head table comes from the trace's own decode
/// rows.
pub fn streaming_dominance_battery(
    seeds: impl IntoIterator<Item = u64>,
    len_range: (usize, usize),
    budget_fraction: f64,
    params: &PolicyParams,
) -> Result<Vec<BatteryOutcome>> {
    seeds
        .into_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xba));
            let n = rng.random_range(len_range.0..=len_range.1);
            let planted = generate_planted_trace(&streaming_dominated_spec(4, 3, n, seed))?;
            let table = planted.head_table()?;
            let budget = (budget_fraction * n as f64).floor() as usize;
            let ck = compresskv_policy(&planted.trace, 0, budget, params, &table)?;
            let sk = snapkv_policy(&planted.trace, 0, budget, params)?;
            Ok(BatteryOutcome {
                seed,
                prompt_len: n,
                budget,
                compresskv_retained: planted.span.retained_by(&ck.keep_indices),
                snapkv_retained: planted.span.retained_by(&sk.keep_indices),
            })
        })
        .collect()
}
