//! Head scoring from attention traces.
//!
//! Two scores per (layer, head), both computed over decode steps whose
//! emitted token belongs to the answer:
//!
//! * semantic retrieval: total attention mass the head places on the answer
//!   span, summed over those steps;
//! * copy-paste retrieval: fraction of those steps where the head's
//!   single highest-weight position lies inside the span.
//!
//! Scores from several calibration prompts are merged by summation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cache::{KVCache, LayerCache};
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, DecodeStep, GQAModel, Prefill};
use crate::numerics::Matrix;

/// Prompt positions holding the planted answer, and the token ids that
/// count as emitting it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub positions: Vec<usize>,
    pub answer_token_ids: Vec<u32>,
}

impl AnswerSpan {
    /// Sorts and deduplicates `positions`; rejects an empty span.
    pub fn new(mut positions: Vec<usize>, answer_token_ids: Vec<u32>) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if positions.is_empty() {
            return Err(Error::InvalidArgument("answer span is empty".into()));
        }
        Ok(Self {
            positions,
            answer_token_ids,
        })
    }

    pub fn contiguous(start: usize, len: usize, answer_token_ids: Vec<u32>) -> Result<Self> {
        Self::new((start..start + len).collect(), answer_token_ids)
    }

    pub fn contains(&self, position: usize) -> bool {
        self.positions.binary_search(&position).is_ok()
    }

    pub fn is_answer_token(&self, id: u32) -> bool {
        self.answer_token_ids.contains(&id)
    }

    pub fn first(&self) -> usize {
        self.positions[0]
    }

    pub fn last(&self) -> usize {
        *self.positions.last().expect("non-empty span")
    }

    /// True if every span position is in the sorted `kept` list.
    pub fn retained_by(&self, kept: &[usize]) -> bool {
        self.positions.iter().all(|p| kept.binary_search(p).is_ok())
    }
}

/// Semantic and copy-paste scores for every (layer, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TableRepr", try_from = "TableRepr")]
pub struct HeadScoreTable {
    num_layers: usize,
    num_heads: usize,
    semantic: Vec<Vec<f64>>,
    copy_paste: Vec<Vec<f64>>,
    pub model_fingerprint: Option<String>,
    pub model_seed: Option<u64>,
    pub calibration_prompts: usize,
}

#[derive(Serialize, Deserialize)]
struct TableRepr {
    num_layers: usize,
    num_heads: usize,
    model_fingerprint: Option<String>,
    model_seed: Option<u64>,
    calibration_prompts: usize,
    scores: Vec<HeadScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub semantic_score: f64,
    pub copy_paste_score: f64,
}

impl From<HeadScoreTable> for TableRepr {
    fn from(t: HeadScoreTable) -> Self {
        TableRepr {
            num_layers: t.num_layers,
            num_heads: t.num_heads,
            scores: t.records(),
            model_fingerprint: t.model_fingerprint,
            model_seed: t.model_seed,
            calibration_prompts: t.calibration_prompts,
        }
    }
}

impl TryFrom<TableRepr> for HeadScoreTable {
    type Error = Error;

    fn try_from(r: TableRepr) -> Result<Self> {
        let mut semantic = vec![vec![f64::NAN; r.num_heads]; r.num_layers];
        let mut copy_paste = semantic.clone();
        for s in &r.scores {
            if s.layer >= r.num_layers || s.head >= r.num_heads {
                return Err(Error::InvalidArgument(format!("score for ({}, {}) out of range", s.layer, s.head)));
            }
            semantic[s.layer][s.head] = s.semantic_score;
            copy_paste[s.layer][s.head] = s.copy_paste_score;
        }
        let mut t = HeadScoreTable::from_scores(semantic, copy_paste)?;
        t.model_fingerprint = r.model_fingerprint;
        t.model_seed = r.model_seed;
        t.calibration_prompts = r.calibration_prompts;
        Ok(t)
    }
}

/// Which score to rank heads by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Semantic,
    CopyPaste,
}

impl HeadScoreTable {
    /// Builds a table from `[layer][head]` score grids. Every entry must be
    /// finite and non-negative.
    pub fn from_scores(semantic: Vec<Vec<f64>>, copy_paste: Vec<Vec<f64>>) -> Result<Self> {
        let num_layers = semantic.len();
        let num_heads = semantic.first().map_or(0, Vec::len);
        let grids_ok = copy_paste.len() == num_layers
            && semantic.iter().chain(&copy_paste).all(|r| r.len() == num_heads);
        if !grids_ok {
            return Err(Error::shape(
                "HeadScoreTable",
                format!("{num_layers} × {num_heads} grids"),
                "ragged score grids",
            ));
        }
        if let Some(bad) = semantic.iter().chain(&copy_paste).flatten().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("head score {bad} is not finite and non-negative")));
        }
        Ok(Self {
            num_layers,
            num_heads,
            semantic,
            copy_paste,
            model_fingerprint: None,
            model_seed: None,
            calibration_prompts: 1,
        })
    }

    /// Table where every head has the same semantic score.
    pub fn uniform(num_layers: usize, num_heads: usize) -> Self {
        Self::from_scores(vec![vec![1.0; num_heads]; num_layers], vec![vec![0.0; num_heads]; num_layers])
            .expect("uniform table is valid")
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn semantic(&self, layer: usize) -> &[f64] {
        &self.semantic[layer]
    }

    pub fn copy_paste(&self, layer: usize) -> &[f64] {
        &self.copy_paste[layer]
    }

    pub fn scores(&self, kind: ScoreKind, layer: usize) -> &[f64] {
        match kind {
            ScoreKind::Semantic => &self.semantic[layer],
            ScoreKind::CopyPaste => &self.copy_paste[layer],
        }
    }

    pub fn records(&self) -> Vec<HeadScore> {
        let mut out = Vec::with_capacity(self.num_layers * self.num_heads);
        for l in 0..self.num_layers {
            for h in 0..self.num_heads {
                out.push(HeadScore {
                    layer: l,
                    head: h,
                    semantic_score: self.semantic[l][h],
                    copy_paste_score: self.copy_paste[l][h],
                });
            }
        }
        out
    }

    /// L1-normalized scores of one layer; all zeros stay zeros.
    pub fn normalized(&self, kind: ScoreKind, layer: usize) -> Vec<f64> {
        let s = self.scores(kind, layer);
        let total: f64 = s.iter().sum();
        if total > 0.0 {
            s.iter().map(|v| v / total).collect()
        } else {
            s.to_vec()
        }
    }

    /// Adds another table's scores (multi-prompt aggregation).
    pub fn merge(&mut self, other: &HeadScoreTable) -> Result<()> {
        if (self.num_layers, self.num_heads) != (other.num_layers, other.num_heads) {
            return Err(Error::shape(
                "HeadScoreTable::merge",
                format!("{} × {}", self.num_layers, self.num_heads),
                format!("{} × {}", other.num_layers, other.num_heads),
            ));
        }
        for (a, b) in self.semantic.iter_mut().flatten().zip(other.semantic.iter().flatten()) {
            *a += b;
        }
        for (a, b) in self.copy_paste.iter_mut().flatten().zip(other.copy_paste.iter().flatten()) {
            *a += b;
        }
        self.calibration_prompts += other.calibration_prompts;
        Ok(())
    }

    pub fn with_model(mut self, model: &GQAModel) -> Self {
        self.model_fingerprint = Some(model.config().fingerprint());
        self.model_seed = Some(model.config().seed);
        self
    }
}

fn qualifying_steps<'a>(trace: &'a AttentionTrace, generated: &'a [u32], span: &'a AnswerSpan) -> Result<Vec<usize>> {
    if let Some(&p) = span.positions.iter().find(|&&p| p >= trace.prompt_len) {
        return Err(Error::InvalidArgument(format!(
            "span position {p} exceeds prompt length {}",
            trace.prompt_len
        )));
    }
    if generated.len() != trace.decode_steps() {
        return Err(Error::shape("head scoring", format!("{} generated tokens", trace.decode_steps()), generated.len()));
    }
    Ok(generated
        .iter()
        .enumerate()
        .filter(|(_, id)| span.is_answer_token(**id))
        .map(|(t, _)| t)
        .collect())
}

/// `[layer][head]` sum over answer-emitting steps of the head's attention
/// mass on the span.
pub fn semantic_retrieval_score(trace: &AttentionTrace, generated: &[u32], span: &AnswerSpan) -> Result<Vec<Vec<f64>>> {
    let steps = qualifying_steps(trace, generated, span)?;
    Ok(trace
        .layers
        .iter()
        .map(|lt| {
            (0..trace.num_q_heads)
                .map(|h| {
                    let mut score = 0.0;
                    for &t in &steps {
                        let step = &lt.decode[t];
                        let mass: f64 = step
                            .positions
                            .iter()
                            .zip(&step.rows[h])
                            .filter(|(p, _)| span.contains(**p))
                            .map(|(_, a)| a)
                            .sum();
                        score += mass;
                    }
                    score
                })
                .collect()
        })
        .collect())
}

/// `[layer][head]` fraction of answer-emitting steps whose argmax position
/// (lowest position on ties) falls inside the span; zero with no such steps.
pub fn copy_paste_retrieval_score(trace: &AttentionTrace, generated: &[u32], span: &AnswerSpan) -> Result<Vec<Vec<f64>>> {
    let steps = qualifying_steps(trace, generated, span)?;
    Ok(trace
        .layers
        .iter()
        .map(|lt| {
            (0..trace.num_q_heads)
                .map(|h| {
                    if steps.is_empty() {
                        return 0.0;
                    }
                    let hits = steps
                        .iter()
                        .filter(|&&t| {
                            let step = &lt.decode[t];
                            argmax(&step.rows[h]).is_some_and(|j| span.contains(step.positions[j]))
                        })
                        .count();
                    hits as f64 / steps.len() as f64
                })
                .collect()
        })
        .collect())
}

fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in row.iter().enumerate() {
        if best.is_none_or(|b| v > row[b]) {
            best = Some(j);
        }
    }
    best
}

/// Both scores for one calibration prompt.
pub fn score_heads(trace: &AttentionTrace, generated: &[u32], span: &AnswerSpan) -> Result<HeadScoreTable> {
    HeadScoreTable::from_scores(
        semantic_retrieval_score(trace, generated, span)?,
        copy_paste_retrieval_score(trace, generated, span)?,
    )
}

/// The `k` heads of `layer` with the highest semantic score, ties broken by
/// lower head index. Returned in ranking order.
pub fn select_top_heads(table: &HeadScoreTable, layer: usize, k: usize) -> Result<Vec<usize>> {
    if layer >= table.num_layers() {
        return Err(Error::MissingHeadScores(layer));
    }
    if k == 0 || k > table.num_heads() {
        return Err(Error::InvalidArgument(format!(
            "top-k must be in 1..={}, got {k}",
            table.num_heads()
        )));
    }
    let s = table.semantic(layer);
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Top `k` (layer, head) pairs across the whole model by one score, ties
/// broken by lower (layer, head).
pub fn top_heads_global(table: &HeadScoreTable, kind: ScoreKind, k: usize) -> Result<Vec<(usize, usize)>> {
    let total = table.num_layers() * table.num_heads();
    if k > total {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {total} heads in the table")));
    }
    let mut all: Vec<(usize, usize, f64)> = (0..table.num_layers())
        .flat_map(|l| table.scores(kind, l).iter().enumerate().map(move |(h, &s)| (l, h, s)))
        .collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    Ok(all.into_iter().take(k).map(|(l, h, _)| (l, h)).collect())
}

/// Set of (layer, query head) pairs whose outputs are zeroed before `W_O`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMask(BTreeSet<(usize, usize)>);

impl HeadMask {
    pub fn new(heads: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self(heads.into_iter().collect())
    }

    pub fn contains(&self, layer: usize, head: usize) -> bool {
        self.0.contains(&(layer, head))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.0.iter()
    }
}

/// A model whose masked heads contribute nothing to attention-block outputs.
#[derive(Debug, Clone)]
pub struct MaskedModel<'a> {
    model: &'a GQAModel,
    mask: HeadMask,
}

/// Masks the given heads; rejects heads outside the model.
pub fn mask_heads<'a>(model: &'a GQAModel, heads: &HeadMask) -> Result<MaskedModel<'a>> {
    let c = model.config();
    if let Some(&(l, h)) = heads.iter().find(|&&(l, h)| l >= c.num_layers || h >= c.num_q_heads) {
        return Err(Error::InvalidArgument(format!("head ({l}, {h}) is outside the model")));
    }
    Ok(MaskedModel {
        model,
        mask: heads.clone(),
    })
}

impl MaskedModel<'_> {
    pub fn model(&self) -> &GQAModel {
        self.model
    }

    pub fn mask(&self) -> &HeadMask {
        &self.mask
    }

    pub fn prefill(&self, prompt: &Matrix) -> Result<Prefill> {
        self.model.prefill_masked(prompt, &self.mask)
    }

    pub fn decode_step(&self, cache: &mut KVCache, token: &[f64]) -> Result<DecodeStep> {
        self.model.decode_step_masked(cache, token, &self.mask)
    }

    pub fn attention_block_output(&self, layer: usize, input_row: &[f64], view: &LayerCache) -> Result<Vec<f64>> {
        self.model.attention_block_output_masked(layer, input_row, view, &self.mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecodeRows, LayerTrace, ModelConfig};
    use crate::numerics::seeded_random_matrix;
    use proptest::prelude::*;

    /// One layer, `rows[h][t]` decode rows over positions `0..width`.
    fn trace_from_rows(rows: Vec<Vec<Vec<f64>>>, prompt_len: usize) -> AttentionTrace {
        let heads = rows.len();
        let steps = rows[0].len();
        let decode = (0..steps)
            .map(|t| DecodeRows {
                positions: (0..rows[0][t].len()).collect(),
                rows: (0..heads).map(|h| rows[h][t].clone()).collect(),
            })
            .collect();
        AttentionTrace {
            num_q_heads: heads,
            num_kv_heads: 1,
            prompt_len,
            layers: vec![LayerTrace {
                prefill: Vec::new(),
                decode,
            }],
        }
    }

    fn span23() -> AnswerSpan {
        AnswerSpan::new(vec![2, 3], vec![7]).unwrap()
    }

    #[test]
    fn no_answer_tokens_means_zero() {
        let t = trace_from_rows(vec![vec![vec![0.1, 0.2, 0.3, 0.4]; 2]], 4);
        let s = semantic_retrieval_score(&t, &[1, 2], &span23()).unwrap();
        assert_eq!(s, vec![vec![0.0]]);
        assert_eq!(copy_paste_retrieval_score(&t, &[1, 2], &span23()).unwrap(), vec![vec![0.0]]);
    }

    #[test]
    fn hand_evaluated_double_sum() {
        let rows = vec![vec![vec![0.4, 0.1, 0.3, 0.2], vec![0.5, 0.3, 0.1, 0.1]]];
        let t = trace_from_rows(rows, 4);
        let s = semantic_retrieval_score(&t, &[7, 7], &span23()).unwrap();
        assert!((s[0][0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn uniform_head_closed_form() {
        let width = 10;
        let row = vec![1.0 / width as f64; width];
        let t = trace_from_rows(vec![vec![row; 3]], width);
        let span = AnswerSpan::new(vec![4, 5, 6], vec![1]).unwrap();
        let s = semantic_retrieval_score(&t, &[1, 9, 1], &span).unwrap();
        assert!((s[0][0] - 2.0 * 3.0 / width as f64).abs() < 1e-12);
    }

    #[test]
    fn copy_paste_counts_argmax_hits() {
        let streaming = vec![vec![0.7, 0.1, 0.1, 0.1]; 2];
        let half = vec![vec![0.1, 0.1, 0.6, 0.2], vec![0.1, 0.6, 0.2, 0.1]];
        let t = trace_from_rows(vec![streaming, half], 4);
        let c = copy_paste_retrieval_score(&t, &[7, 7], &span23()).unwrap();
        assert_eq!(c, vec![vec![0.0, 0.5]]);
    }

    #[test]
    fn semantic_without_copy_paste() {
        // Mass spread over the span's neighbours, argmax never on the span.
        let row = vec![0.05, 0.3, 0.15, 0.15, 0.3, 0.05];
        let t = trace_from_rows(vec![vec![row; 4]], 6);
        let span = span23();
        let s = semantic_retrieval_score(&t, &[7; 4], &span).unwrap();
        let c = copy_paste_retrieval_score(&t, &[7; 4], &span).unwrap();
        assert!(s[0][0] > 1.0);
        assert_eq!(c[0][0], 0.0);
    }

    #[test]
    fn span_outside_prompt_is_rejected() {
        let t = trace_from_rows(vec![vec![vec![0.5, 0.5]]], 2);
        let span = AnswerSpan::new(vec![2], vec![0]).unwrap();
        assert!(semantic_retrieval_score(&t, &[0], &span).is_err());
        assert!(semantic_retrieval_score(&t, &[], &AnswerSpan::new(vec![1], vec![0]).unwrap()).is_err());
    }

    #[test]
    fn top_heads_tie_rule() {
        let table = HeadScoreTable::from_scores(vec![vec![0.1, 0.5, 0.5, 0.2]], vec![vec![0.0; 4]]).unwrap();
        assert_eq!(select_top_heads(&table, 0, 2).unwrap(), vec![1, 2]);
        let mut all = select_top_heads(&table, 0, 4).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(select_top_heads(&table, 0, 0).is_err());
        assert!(select_top_heads(&table, 0, 5).is_err());
        assert!(select_top_heads(&table, 1, 1).is_err());
    }

    #[test]
    fn table_json_round_trip_and_merge() {
        let mut t = HeadScoreTable::from_scores(vec![vec![0.5, 1.5], vec![0.0, 2.0]], vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let json = serde_json::to_value(&t).unwrap();
        assert_eq!(json["scores"].as_array().unwrap().len(), 4);
        assert_eq!(json["scores"][1]["semantic_score"], 1.5);
        let back: HeadScoreTable = serde_json::from_value(json).unwrap();
        assert_eq!(back, t);

        t.merge(&back).unwrap();
        assert_eq!(t.semantic(0), &[1.0, 3.0]);
        assert_eq!(t.calibration_prompts, 2);
        let n = t.normalized(ScoreKind::Semantic, 0);
        assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(HeadScoreTable::from_scores(vec![vec![-1.0]], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn masking_zeroes_head_contributions() {
        let m = GQAModel::seeded(ModelConfig::new(2, 4, 2, 4, 3).unwrap()).unwrap();
        let x = seeded_random_matrix(6, 16, 4, 1.0).unwrap();
        let plain = m.prefill(&x).unwrap();
        let none = mask_heads(&m, &HeadMask::default()).unwrap().prefill(&x).unwrap();
        assert_eq!(plain.hidden, none.hidden);

        let all_l1 = mask_heads(&m, &HeadMask::new((0..4).map(|h| (1, h)))).unwrap();
        let p = all_l1.prefill(&x).unwrap();
        assert!(p.hidden.data().iter().all(|&v| v == 0.0));
        let mut cache = p.cache;
        let step = all_l1.decode_step(&mut cache, x.row(0)).unwrap();
        assert!(step.hidden.iter().all(|&v| v == 0.0));
        assert!(step.layer_outputs[0].iter().any(|&v| v != 0.0));

        assert!(mask_heads(&m, &HeadMask::new([(2, 0)])).is_err());
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(ints in proptest::collection::vec(0u32..10_000, 8), c in 0.001f64..1000.0, k in 1usize..=8) {
            let s: Vec<f64> = ints.iter().map(|&i| f64::from(i) / 100.0).collect();
            let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
            let a = HeadScoreTable::from_scores(vec![s], vec![vec![0.0; 8]]).unwrap();
            let b = HeadScoreTable::from_scores(vec![scaled], vec![vec![0.0; 8]]).unwrap();
            prop_assert_eq!(select_top_heads(&a, 0, k).unwrap(), select_top_heads(&b, 0, k).unwrap());
        }

        #[test]
        fn semantic_score_bounds_and_monotonicity(seed in 0u64..1000, extra in 0usize..6) {
            let width = 12;
            let steps = 5;
            let raw = seeded_random_matrix(steps * 2, width, seed, 1.0).unwrap();
            let rows: Vec<Vec<Vec<f64>>> = (0..2).map(|h| (0..steps).map(|t| {
                let mut r = raw.row(h * steps + t).to_vec();
                crate::numerics::softmax_in_place(&mut r);
                r
            }).collect()).collect();
            let t = trace_from_rows(rows, width);
            let generated: Vec<u32> = (0..steps as u32).map(|i| i % 2).collect();
            let small = AnswerSpan::new(vec![3, 4], vec![0]).unwrap();
            let big = AnswerSpan::new(vec![3, 4, 6 + extra], vec![0]).unwrap();
            let a = semantic_retrieval_score(&t, &generated, &small).unwrap();
            let b = semantic_retrieval_score(&t, &generated, &big).unwrap();
            let qualifying = generated.iter().filter(|&&g| g == 0).count() as f64;
            for h in 0..2 {
                prop_assert!(b[0][h] >= a[0][h]);
                prop_assert!(b[0][h] <= qualifying + 1e-12);
            }
        }
    }
}
