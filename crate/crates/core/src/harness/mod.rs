//! Synthetic workloads, evaluation and ablations.
//!
//! Two substrates: planted attention traces give exact ground truth for
//! head scoring and token selection; seeded models (random or hand-planted)
//! exercise the full prefill, eviction and decode path.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod planted_model;
pub mod planted_trace;
pub mod tasks;

pub use ablation::{run_masking_ablation, AblationArm, AblationReport};
pub use config::RunConfig;
pub use eval::{profile_heads, run_eval, BudgetSource, EvalReport, EvalSettings};
pub use planted_model::{planted_model, planted_task, PlantedModel, PlantedModelParams};
pub use planted_trace::{generate_planted_trace, HeadLabel, PlantedTrace, PlantedTraceSpec};
pub use tasks::{generate_needle_task, NeedleTask, TaskFamily, TaskParams};
