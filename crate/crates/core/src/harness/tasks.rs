//! Planted-needle recall tasks for seeded models.
//!
//! A task is a random haystack prompt (unit-variance rows) with a short
//! needle span placed uniformly in the interior (never in the first `sink`
//! or last `window` positions).
//!
//! Answer steps share a random question row `x_q`; step `t` is
//! `x_q + 0.3·z_{t mod s}` with fixed noise rows `z_j`. Needle row `j` is
//! built from the first layer's key map so that its keys line up with the
//! queries of answer step `j`:
//!
//! ```text
//! target_g = Σ_{h in group g} x_a(j) W_Q^h        (one d-vector per KV group)
//! x_j      = β · target W_Kᵀ / ‖target W_Kᵀ‖
//! ```
//!
//! Since `W_Kᵀ W_K` is positive semi-definite the resulting logits are
//! positive; `β` is set so the mean per-head logit of step `j` on needle `j`
//! equals `logit_gap`, against haystack logits of roughly unit spread.
//!
//! The `multi-distractor` family additionally plants near-copies of needle
//! rows elsewhere in the haystack.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::heads::AnswerSpan;
use crate::io::TensorBundle;
use crate::model::GQAModel;
use crate::numerics::{dot, l2_norm, mix_seed, seeded_random_matrix, vecmat, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    SingleNeedle,
    MultiDistractor,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 2] = [TaskFamily::SingleNeedle, TaskFamily::MultiDistractor];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::SingleNeedle => "single-needle",
            TaskFamily::MultiDistractor => "multi-distractor",
        }
    }

    fn stream(self) -> u64 {
        match self {
            TaskFamily::SingleNeedle => 0x51,
            TaskFamily::MultiDistractor => 0x52,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub family: TaskFamily,
    pub prompt_len: usize,
    pub span_len: usize,
    pub sink: usize,
    pub window: usize,
    pub answer_steps: usize,
    /// Near-copies of needle rows (multi-distractor family only).
    pub distractors: usize,
    /// Mean per-head logit on the span at answer steps (first layer).
    pub logit_gap: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            family: TaskFamily::SingleNeedle,
            prompt_len: 128,
            span_len: 4,
            sink: 4,
            window: 8,
            answer_steps: 8,
            distractors: 3,
            logit_gap: 6.0,
        }
    }
}

impl TaskParams {
    /// Inclusive range of legal needle start positions.
    pub fn start_range(&self) -> Result<(usize, usize)> {
        let need = self.sink + self.window + self.span_len + 1;
        if self.span_len == 0 || self.answer_steps == 0 {
            return Err(Error::InvalidArgument("span and answer steps must be non-empty".into()));
        }
        if self.prompt_len < need {
            return Err(Error::Infeasible(format!(
                "prompt length {} is below sink + window + span + 1 = {need}",
                self.prompt_len
            )));
        }
        Ok((self.sink, self.prompt_len - self.window - self.span_len))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorProfile {
    pub kind: String,
    pub positions: Vec<usize>,
    /// Weight of the needle row in each near-copy (the rest is fresh noise).
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleTask {
    pub family: TaskFamily,
    pub seed: u64,
    pub prompt_embeddings: Matrix,
    pub answer_embeddings: Matrix,
    pub token_ids: Vec<u32>,
    /// Token emitted at each answer step (the needle, cyclically).
    pub generated_ids: Vec<u32>,
    pub needle_span: AnswerSpan,
    pub distractors: DistractorProfile,
    pub sink: usize,
    pub window: usize,
}

impl NeedleTask {
    pub fn prompt_len(&self) -> usize {
        self.prompt_embeddings.rows()
    }

    pub fn answer_steps(&self) -> usize {
        self.answer_embeddings.rows()
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Per-head query rows of `x` in layer 0.
fn head_queries(model: &GQAModel, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = model.config().head_dim;
    let q = vecmat(x, &model.layer_weights(0).w_q)?;
    Ok(q.chunks(d).map(<[f64]>::to_vec).collect())
}

/// Mean per-head layer-0 logit of query row `x` on key row `y`.
fn mean_logit(model: &GQAModel, x: &[f64], y: &[f64]) -> Result<f64> {
    let cfg = model.config();
    let d = cfg.head_dim;
    let k = vecmat(y, &model.layer_weights(0).w_k)?;
    let qs = head_queries(model, x)?;
    let total: f64 = qs
        .iter()
        .enumerate()
        .map(|(h, q)| {
            let g = cfg.kv_head_of(h);
            dot(q, &k[g * d..(g + 1) * d])
        })
        .sum();
    Ok(total / (cfg.num_q_heads as f64 * (d as f64).sqrt()))
}

/// Row whose layer-0 keys line up with the grouped queries of `x`.
fn aligned_key_row(model: &GQAModel, x: &[f64]) -> Result<Vec<f64>> {
    let cfg = model.config();
    let d = cfg.head_dim;
    let mut target = vec![0.0; cfg.kv_width()];
    for (h, q) in head_queries(model, x)?.iter().enumerate() {
        let g = cfg.kv_head_of(h);
        for (t, v) in target[g * d..(g + 1) * d].iter_mut().zip(q) {
            *t += v;
        }
    }
    let w_k = &model.layer_weights(0).w_k;
    Ok(unit(&(0..cfg.hidden_dim).map(|i| dot(w_k.row(i), &target)).collect::<Vec<_>>()))
}

pub fn generate_needle_task(model: &GQAModel, params: &TaskParams, seed: u64) -> Result<NeedleTask> {
    let (lo, hi) = params.start_range()?;
    let cfg = model.config();
    let n = params.prompt_len;
    let s = params.span_len;
    let hidden = cfg.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, params.family.stream()));
    let start = rng.random_range(lo..=hi);
    let mut prompt = seeded_random_matrix(n, hidden, rng.random(), 1.0)?;

    let mut token_ids: Vec<u32> = (0..n).map(|_| rng.random_range(1000..50_000)).collect();
    for (i, id) in token_ids[start..start + s].iter_mut().enumerate() {
        *id = 100 + i as u32;
    }
    let answer_ids = token_ids[start..start + s].to_vec();
    let span = AnswerSpan::contiguous(start, s, answer_ids.clone())?;

    let question = seeded_random_matrix(1, hidden, rng.random(), 1.0)?;
    let noise = seeded_random_matrix(s, hidden, rng.random(), 1.0)?;
    let step_rows: Vec<Vec<f64>> = (0..s)
        .map(|j| question.row(0).iter().zip(noise.row(j)).map(|(q, z)| q + 0.3 * z).collect())
        .collect();
    for (j, x) in step_rows.iter().enumerate() {
        let dir = aligned_key_row(model, x)?;
        let m = mean_logit(model, x, &dir)?;
        let beta = if m > 0.0 { params.logit_gap / m } else { 0.0 };
        for (v, u) in prompt.row_mut(start + j).iter_mut().zip(&dir) {
            *v = beta * u;
        }
    }

    let similarity = 0.8;
    let mut positions = Vec::new();
    if params.family == TaskFamily::MultiDistractor {
        let free: Vec<usize> = (params.sink..n - params.window).filter(|&p| !span.contains(p)).collect();
        while positions.len() < params.distractors.min(free.len()) {
            let p = free[rng.random_range(0..free.len())];
            if !positions.contains(&p) {
                positions.push(p);
            }
        }
        positions.sort_unstable();
        let fresh = seeded_random_matrix(positions.len().max(1), hidden, rng.random(), 1.0)?;
        for (i, &p) in positions.iter().enumerate() {
            let src = prompt.row(start + i % s).to_vec();
            for (c, v) in prompt.row_mut(p).iter_mut().enumerate() {
                *v = similarity * src[c] + (1.0 - similarity) * fresh.get(i, c);
            }
        }
    }

    let mut answers = Matrix::with_cols(hidden);
    let mut generated_ids = Vec::with_capacity(params.answer_steps);
    for t in 0..params.answer_steps {
        answers.push_row(&step_rows[t % s])?;
        generated_ids.push(answer_ids[t % s]);
    }

    Ok(NeedleTask {
        family: params.family,
        seed,
        prompt_embeddings: prompt,
        answer_embeddings: answers,
        token_ids,
        generated_ids,
        needle_span: span,
        distractors: DistractorProfile {
            kind: match params.family {
                TaskFamily::SingleNeedle => "none".into(),
                TaskFamily::MultiDistractor => "near-copy".into(),
            },
            positions,
            similarity: if params.family == TaskFamily::MultiDistractor { similarity } else { 0.0 },
        },
        sink: params.sink,
        window: params.window,
    })
}

/// `count` tasks with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_task_set(model: &GQAModel, params: &TaskParams, base_seed: u64, count: usize) -> Result<Vec<NeedleTask>> {
    (0..count as u64).map(|i| generate_needle_task(model, params, base_seed + i)).collect()
}

#[derive(Serialize, Deserialize)]
struct TaskMeta {
    family: TaskFamily,
    seed: u64,
    token_ids: Vec<u32>,
    generated_ids: Vec<u32>,
    needle_span: AnswerSpan,
    distractors: DistractorProfile,
    sink: usize,
    window: usize,
}

pub fn tasks_to_bundle(tasks: &[NeedleTask]) -> TensorBundle {
    let meta: Vec<TaskMeta> = tasks
        .iter()
        .map(|t| TaskMeta {
            family: t.family,
            seed: t.seed,
            token_ids: t.token_ids.clone(),
            generated_ids: t.generated_ids.clone(),
            needle_span: t.needle_span.clone(),
            distractors: t.distractors.clone(),
            sink: t.sink,
            window: t.window,
        })
        .collect();
    let mut b = TensorBundle::new(json!({ "kind": "needle-tasks", "tasks": meta }));
    for (i, t) in tasks.iter().enumerate() {
        b.push(format!("task{i}.prompt"), t.prompt_embeddings.clone());
        b.push(format!("task{i}.answer"), t.answer_embeddings.clone());
    }
    b
}

pub fn tasks_from_bundle(b: &TensorBundle) -> Result<Vec<NeedleTask>> {
    if b.meta.get("kind").and_then(|k| k.as_str()) != Some("needle-tasks") {
        return Err(Error::InvalidArgument("bundle does not hold needle tasks".into()));
    }
    let meta: Vec<TaskMeta> = serde_json::from_value(b.meta["tasks"].clone())?;
    meta.into_iter()
        .enumerate()
        .map(|(i, m)| {
            Ok(NeedleTask {
                family: m.family,
                seed: m.seed,
                prompt_embeddings: b.get(&format!("task{i}.prompt"))?.clone(),
                answer_embeddings: b.get(&format!("task{i}.answer"))?.clone(),
                token_ids: m.token_ids,
                generated_ids: m.generated_ids,
                needle_span: m.needle_span,
                distractors: m.distractors,
                sink: m.sink,
                window: m.window,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> GQAModel {
        GQAModel::seeded(ModelConfig::new(2, 4, 2, 8, 7).unwrap()).unwrap()
    }

    #[test]
    fn deterministic_and_interior() {
        let m = model();
        for family in TaskFamily::ALL {
            let p = TaskParams { family, prompt_len: 48, ..Default::default() };
            for seed in 0..40 {
                let a = generate_needle_task(&m, &p, seed).unwrap();
                assert_eq!(a, generate_needle_task(&m, &p, seed).unwrap());
                assert!(a.needle_span.first() >= p.sink);
                assert!(a.needle_span.last() < p.prompt_len - p.window);
                assert!(a.distractors.positions.iter().all(|q| !a.needle_span.contains(*q)));
            }
        }
    }

    #[test]
    fn too_short_prompt_is_rejected() {
        let p = TaskParams { prompt_len: 16, ..Default::default() };
        assert!(matches!(generate_needle_task(&model(), &p, 0), Err(Error::Infeasible(_))));
        let p = TaskParams { prompt_len: 17, ..Default::default() };
        for seed in 0..20 {
            let t = generate_needle_task(&model(), &p, seed).unwrap();
            assert!([4, 5].contains(&t.needle_span.first()));
        }
    }

    #[test]
    fn answer_steps_attend_to_the_needle() {
        let m = model();
        let p = TaskParams { prompt_len: 64, ..Default::default() };
        for seed in 0..10 {
            let t = generate_needle_task(&m, &p, seed).unwrap();
            let mut pre = m.prefill(&t.prompt_embeddings).unwrap();
            let step = m.decode_step(&mut pre.cache, t.answer_embeddings.row(0)).unwrap();
            let mass: f64 = step.attention[0]
                .iter()
                .map(|row| t.needle_span.positions.iter().map(|&j| row[j]).sum::<f64>())
                .sum::<f64>()
                / 4.0;
            assert!(mass > 0.5, "span mass {mass}");
        }
    }

    #[test]
    fn bundle_round_trip() {
        let m = model();
        let p = TaskParams { family: TaskFamily::MultiDistractor, prompt_len: 40, ..Default::default() };
        let tasks = generate_task_set(&m, &p, 10, 3).unwrap();
        let back = tasks_from_bundle(&tasks_to_bundle(&tasks)).unwrap();
        assert_eq!(back, tasks);
    }
}
