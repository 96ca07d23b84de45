//! Head-masking ablation: zero the top-k heads by one score and measure how
//! far recall accuracy falls from the unmasked model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::eval::{masked_outputs, recall_accuracy};
use crate::harness::tasks::NeedleTask;
use crate::heads::{mask_heads, top_heads_global, HeadMask, HeadScoreTable, ScoreKind};
use crate::model::GQAModel;
use crate::numerics::{mix_seed, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    /// Top-k heads by semantic retrieval score.
    Semantic,
    /// Top-k heads by copy-paste score.
    CopyPaste,
    /// k random heads outside both top-k_max sets.
    Random,
}

impl AblationArm {
    pub const ALL: [AblationArm; 3] = [AblationArm::Semantic, AblationArm::CopyPaste, AblationArm::Random];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Semantic => "semantic",
            AblationArm::CopyPaste => "copy_paste",
            AblationArm::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub arm: AblationArm,
    pub k: usize,
    pub heads: Vec<(usize, usize)>,
    pub recall_accuracy: f64,
    /// Baseline accuracy minus this point's accuracy.
    pub degradation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: f64,
    pub cosine_threshold: f64,
    pub points: Vec<AblationPoint>,
}

impl AblationReport {
    pub fn point(&self, arm: AblationArm, k: usize) -> Option<&AblationPoint> {
        self.points.iter().find(|p| p.arm == arm && p.k == k)
    }

    /// `arm,k,recall_accuracy,degradation` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,k,recall_accuracy,degradation\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{},{}\n", p.arm.name(), p.k, p.recall_accuracy, p.degradation));
        }
        s
    }
}

fn accuracy(model: &GQAModel, mask: &HeadMask, tasks: &[NeedleTask], reference: &[Matrix], threshold: f64) -> Result<f64> {
    let masked = mask_heads(model, mask)?;
    let per_task: Vec<f64> = tasks
        .par_iter()
        .zip(reference)
        .map(|(t, r)| Ok(recall_accuracy(&masked_outputs(&masked, t)?, r, threshold)))
        .collect::<Result<_>>()?;
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Accuracy after masking, per arm and `k`. `k = 0` is the unmasked
/// baseline. The random arm draws from heads outside the top-`max(k)` sets
/// of both scores (all of them if fewer than `k` remain).
pub fn run_masking_ablation(
    model: &GQAModel,
    table: &HeadScoreTable,
    ks: &[usize],
    tasks: &[NeedleTask],
    threshold: f64,
    seed: u64,
) -> Result<AblationReport> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one task".into()));
    }
    let total = table.num_layers() * table.num_heads();
    let cfg = model.config();
    if total != cfg.num_layers * cfg.num_q_heads {
        return Err(Error::shape("ablation head table", cfg.num_layers * cfg.num_q_heads, total));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > total) {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {total} heads")));
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let mut retrieval = top_heads_global(table, ScoreKind::Semantic, k_max)?;
    retrieval.extend(top_heads_global(table, ScoreKind::CopyPaste, k_max)?);
    let mut others: Vec<(usize, usize)> = (0..table.num_layers())
        .flat_map(|l| (0..table.num_heads()).map(move |h| (l, h)))
        .filter(|p| !retrieval.contains(p))
        .collect();
    others.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xab)));

    let none = mask_heads(model, &HeadMask::default())?;
    let reference: Vec<Matrix> = tasks.par_iter().map(|t| masked_outputs(&none, t)).collect::<Result<_>>()?;
    let per_task: Vec<f64> = reference.iter().map(|r| recall_accuracy(r, r, threshold)).collect();
    let baseline = per_task.iter().sum::<f64>() / per_task.len() as f64;
    let mut points = Vec::new();
    for arm in AblationArm::ALL {
        for &k in ks {
            let heads = match arm {
                AblationArm::Semantic => top_heads_global(table, ScoreKind::Semantic, k)?,
                AblationArm::CopyPaste => top_heads_global(table, ScoreKind::CopyPaste, k)?,
                AblationArm::Random => others.iter().take(k).copied().collect(),
            };
            let acc = if k == 0 { baseline } else { accuracy(model, &HeadMask::new(heads.iter().copied()), tasks, &reference, threshold)? };
            points.push(AblationPoint { arm, k, heads, recall_accuracy: acc, degradation: baseline - acc });
        }
    }
    Ok(AblationReport { baseline, cosine_threshold: threshold, points })
}
