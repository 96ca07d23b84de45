//! End-to-end evaluation of eviction policies on needle tasks.
//!
//! Per task: prefill, evict once per layer, teacher-force the answer steps
//! and compare the final hidden rows against the full-cache reference.
//!
//! Recall accuracy here is an analogue: the fraction of answer steps whose
//! hidden row has cosine similarity above the threshold (0.9 by default)
//! with the full-cache row. There is no vocabulary at this scale.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{BudgetPlan, CalibrationPrompt, CalibrationSet};
use crate::error::{Error, Result};
use crate::harness::tasks::NeedleTask;
use crate::heads::{score_heads, HeadScoreTable, MaskedModel};
use crate::model::{AttentionTrace, GQAModel};
use crate::numerics::{cosine_similarity, frobenius_norm, Matrix};
use crate::policies::{Policy, PolicyKind, PolicyParams};

pub const DEFAULT_COSINE_THRESHOLD: f64 = 0.9;

/// Prefill plus teacher-forced decode of the answer steps, with the full
/// trace recorded.
pub fn trace_task(model: &GQAModel, task: &NeedleTask) -> Result<AttentionTrace> {
    let mut pre = model.prefill(&task.prompt_embeddings)?;
    for x in task.answer_embeddings.row_iter() {
        let step = model.decode_step(&mut pre.cache, x)?;
        pre.trace.push_decode(&step);
    }
    Ok(pre.trace)
}

/// Head scores summed over the tasks.
pub fn profile_heads(model: &GQAModel, tasks: &[NeedleTask]) -> Result<HeadScoreTable> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("head profiling needs at least one task".into()));
    }
    let tables: Vec<HeadScoreTable> = tasks
        .par_iter()
        .map(|t| score_heads(&trace_task(model, t)?, &t.generated_ids, &t.needle_span))
        .collect::<Result<_>>()?;
    let mut iter = tables.into_iter();
    let mut table = iter.next().expect("non-empty");
    for t in iter {
        table.merge(&t)?;
    }
    Ok(table.with_model(model))
}

/// Groups tasks by family, in first-seen order, for error profiling.
pub fn calibration_sets(tasks: &[NeedleTask]) -> Vec<CalibrationSet<'_>> {
    let mut sets: Vec<CalibrationSet<'_>> = Vec::new();
    for t in tasks {
        let p = CalibrationPrompt { prompt: &t.prompt_embeddings, decode_inputs: &t.answer_embeddings };
        match sets.iter_mut().find(|s| s.name == t.family.name()) {
            Some(s) => s.prompts.push(p),
            None => sets.push(CalibrationSet { name: t.family.name().into(), prompts: vec![p] }),
        }
    }
    sets
}

/// Fraction of rows whose cosine similarity with the reference row exceeds
/// `threshold`.
pub fn recall_accuracy(comp: &Matrix, reference: &Matrix, threshold: f64) -> f64 {
    if reference.rows() == 0 {
        return 1.0;
    }
    let hits = comp
        .row_iter()
        .zip(reference.row_iter())
        .filter(|(a, b)| cosine_similarity(a, b) > threshold)
        .count();
    hits as f64 / reference.rows() as f64
}

/// `‖comp − reference‖_F / ‖reference‖_F` (absolute when the reference is 0).
pub fn output_drift(comp: &Matrix, reference: &Matrix) -> Result<f64> {
    let diff = frobenius_norm(&comp.sub(reference)?);
    let norm = frobenius_norm(reference);
    Ok(if norm > 0.0 { diff / norm } else { diff })
}

/// Final hidden rows of teacher-forced decoding after evicting with
/// `decisions` (none = full cache).
fn decode_outputs(
    model: &GQAModel,
    task: &NeedleTask,
    decisions: &[crate::cache::EvictionDecision],
) -> Result<Matrix> {
    let mut pre = model.prefill(&task.prompt_embeddings)?;
    for d in decisions {
        pre.cache.apply_eviction(d)?;
    }
    let mut out = Matrix::with_cols(model.config().hidden_dim);
    for x in task.answer_embeddings.row_iter() {
        out.push_row(&model.decode_step(&mut pre.cache, x)?.hidden)?;
    }
    Ok(out)
}

/// Final hidden rows of a head-masked model with a full cache.
pub fn masked_outputs(masked: &MaskedModel<'_>, task: &NeedleTask) -> Result<Matrix> {
    let mut pre = masked.prefill(&task.prompt_embeddings)?;
    let mut out = Matrix::with_cols(masked.model().config().hidden_dim);
    for x in task.answer_embeddings.row_iter() {
        out.push_row(&masked.decode_step(&mut pre.cache, x)?.hidden)?;
    }
    Ok(out)
}

/// Where per-layer budgets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSource {
    /// The same budget in every layer.
    Uniform(usize),
    Plan(BudgetPlan),
}

impl BudgetSource {
    pub fn layer_budgets(&self, num_layers: usize) -> Result<Vec<usize>> {
        match self {
            BudgetSource::Uniform(b) => Ok(vec![*b; num_layers]),
            BudgetSource::Plan(p) if p.num_layers() == num_layers => Ok(p.budgets.clone()),
            BudgetSource::Plan(p) => Err(Error::shape("budget plan", format!("{num_layers} layers"), p.num_layers())),
        }
    }

    fn label(&self) -> String {
        match self {
            BudgetSource::Uniform(b) => format!("uniform:{b}"),
            BudgetSource::Plan(p) => format!("plan:{}", p.total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub seed: u64,
    pub family: String,
    pub needle_span: Vec<usize>,
    pub needle_retained: bool,
    pub recall_accuracy: f64,
    pub drift: f64,
    /// Kept positions per layer.
    pub decisions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub policy: PolicyKind,
    pub budget: String,
    pub layer_budgets: Vec<usize>,
    pub retention_rate: f64,
    pub recall_accuracy: f64,
    pub drift: f64,
    pub tasks: Vec<TaskResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_fingerprint: String,
    pub cosine_threshold: f64,
    pub params: PolicyParams,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn entry(&self, policy: PolicyKind) -> Option<&EvalEntry> {
        self.entries.iter().find(|e| e.policy == policy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub params: PolicyParams,
    pub cosine_threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { params: PolicyParams::default(), cosine_threshold: DEFAULT_COSINE_THRESHOLD }
    }
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        0.0
    } else {
        v.sum::<f64>() / n as f64
    }
}

/// Evaluates every (policy, budget) pair on every task.
pub fn run_eval(
    model: &GQAModel,
    tasks: &[NeedleTask],
    policies: &[PolicyKind],
    budgets: &[BudgetSource],
    table: Option<&HeadScoreTable>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    settings.params.validate()?;
    let num_layers = model.config().num_layers;
    let resolved: Vec<Vec<usize>> = budgets.iter().map(|b| b.layer_budgets(num_layers)).collect::<Result<_>>()?;
    let policies: Vec<Policy<'_>> = policies.iter().map(|&k| Policy::from_kind(k, table)).collect::<Result<_>>()?;

    // [task][entry]
    let per_task: Vec<Vec<TaskResult>> = tasks
        .par_iter()
        .map(|task| {
            let pre = model.prefill(&task.prompt_embeddings)?;
            let reference = decode_outputs(model, task, &[])?;
            let mut results = Vec::with_capacity(policies.len() * resolved.len());
            for policy in &policies {
                for layer_budgets in &resolved {
                    let decisions = policy.decide_all(&pre.trace, layer_budgets, &settings.params)?;
                    let comp = decode_outputs(model, task, &decisions)?;
                    results.push(TaskResult {
                        seed: task.seed,
                        family: task.family.name().into(),
                        needle_span: task.needle_span.positions.clone(),
                        needle_retained: decisions.iter().all(|d| task.needle_span.retained_by(&d.keep_indices)),
                        recall_accuracy: recall_accuracy(&comp, &reference, settings.cosine_threshold),
                        drift: output_drift(&comp, &reference)?,
                        decisions: decisions.into_iter().map(|d| d.keep_indices).collect(),
                    });
                }
            }
            Ok(results)
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    for (pi, policy) in policies.iter().enumerate() {
        for (bi, source) in budgets.iter().enumerate() {
            let idx = pi * budgets.len() + bi;
            let results: Vec<TaskResult> = per_task.iter().map(|r| r[idx].clone()).collect();
            entries.push(EvalEntry {
                policy: policy.kind(),
                budget: source.label(),
                layer_budgets: resolved[bi].clone(),
                retention_rate: mean(results.iter().map(|r| if r.needle_retained { 1.0 } else { 0.0 })),
                recall_accuracy: mean(results.iter().map(|r| r.recall_accuracy)),
                drift: mean(results.iter().map(|r| r.drift)),
                tasks: results,
            });
        }
    }
    Ok(EvalReport {
        model_fingerprint: model.config().fingerprint(),
        cosine_threshold: settings.cosine_threshold,
        params: settings.params.clone(),
        entries,
    })
}
