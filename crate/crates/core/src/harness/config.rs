//! One JSON document per run. Every section and field is optional;
//! defaults are the standard settings (window 8, pooling
//! kernel 5, top-4 heads, m = 32, M = 3 × per-layer budget, probe budget 32).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator::{allocate, default_bounds, BudgetPlan, LayerErrorProfile, ProfileOptions};
use crate::error::{Error, Result};
use crate::harness::ablation::AblationArm;
use crate::harness::eval::DEFAULT_COSINE_THRESHOLD;
use crate::harness::planted_model::{planted_model, PlantedModel, PlantedModelParams};
use crate::harness::tasks::{generate_task_set, NeedleTask, TaskFamily, TaskParams};
use crate::model::{GQAModel, ModelConfig};
use crate::numerics::mix_seed;
use crate::policies::{PolicyKind, PolicyParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Random,
    Planted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Random, num_layers: 2, num_q_heads: 8, num_kv_heads: 2, head_dim: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub families: Vec<TaskFamily>,
    pub per_family: usize,
    /// Shared task parameters; `family` is overridden per family.
    pub params: TaskParams,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self { families: TaskFamily::ALL.to_vec(), per_family: 4, params: TaskParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub per_layer: usize,
    /// Global budget for allocation; `per_layer × layers` when absent.
    pub total: Option<usize>,
    pub min: Option<usize>,
    pub max: Option<usize>,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self { per_layer: 64, total: None, min: None, max: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub policies: Vec<PolicyKind>,
    pub cosine_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { policies: PolicyKind::ALL.to_vec(), cosine_threshold: DEFAULT_COSINE_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub ks: Vec<usize>,
    pub arms: Vec<AblationArm>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { ks: vec![0, 2, 4, 8], arms: AblationArm::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub planted: PlantedModelParams,
    pub tasks: TaskSection,
    pub policy: PolicyParams,
    pub profiling: ProfileOptions,
    pub budget: BudgetSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        ModelConfig::new(m.num_layers, m.num_q_heads, m.num_kv_heads, m.head_dim, self.seed)
    }

    /// The model described by the config. Planted models ignore the
    /// geometry fields.
    pub fn build_model(&self) -> Result<GQAModel> {
        match self.model.kind {
            ModelKind::Random => GQAModel::seeded(self.model_config()?),
            ModelKind::Planted => Ok(self.build_planted()?.model),
        }
    }

    pub fn build_planted(&self) -> Result<PlantedModel> {
        planted_model(&self.planted, self.seed)
    }

    /// `per_family` tasks for each family, seeded from the run seed.
    pub fn generate_tasks(&self, model: &GQAModel) -> Result<Vec<NeedleTask>> {
        let mut out = Vec::new();
        for (i, &family) in self.tasks.families.iter().enumerate() {
            let params = TaskParams { family, ..self.tasks.params.clone() };
            let base = mix_seed(self.seed, 0x100 + i as u64) >> 16;
            out.extend(generate_task_set(model, &params, base, self.tasks.per_family)?);
        }
        Ok(out)
    }

    pub fn total_budget(&self, num_layers: usize) -> usize {
        self.budget.total.unwrap_or(self.budget.per_layer * num_layers)
    }

    /// Allocation from a profile, with bounds from the config or the
    /// defaults.
    pub fn plan(&self, profile: &LayerErrorProfile) -> Result<BudgetPlan> {
        let layers = profile.num_layers();
        let total = self.total_budget(layers);
        let (m, big_m) = match (self.budget.min, self.budget.max) {
            (Some(m), Some(big_m)) => (m, big_m),
            (m, big_m) => {
                let (dm, dmax) = default_bounds(total, layers)?;
                (m.unwrap_or(dm), big_m.unwrap_or(dmax))
            }
        };
        allocate(&profile.normalized, total, m, big_m)
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.tasks.families.is_empty() || self.tasks.per_family == 0 {
            return Err(Error::InvalidArgument("config needs at least one task family and task".into()));
        }
        self.tasks.params.start_range()?;
        if self.model.kind == ModelKind::Random {
            self.model_config()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.policy.window, 8);
        assert_eq!(c.policy.pool_kernel, 5);
        assert_eq!(c.policy.top_k_heads, 4);
        assert_eq!(c.profiling.probe_budget, 32);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"layers": 3}}"#).is_err());
    }

    #[test]
    fn tasks_are_deterministic_per_seed() {
        let c = RunConfig { tasks: TaskSection { per_family: 2, ..Default::default() }, ..Default::default() };
        let m = c.build_model().unwrap();
        let a = c.generate_tasks(&m).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, c.generate_tasks(&m).unwrap());
        let other = RunConfig { seed: 1, ..c.clone() };
        assert_ne!(a[0].prompt_embeddings, other.generate_tasks(&m).unwrap()[0].prompt_embeddings);
    }
}
