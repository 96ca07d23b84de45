//! `kvcomp`: generate models and tasks, profile heads and layer errors,
//! allocate budgets, evict, evaluate and ablate.
//!
//! Every subcommand reads an optional JSON run config (`--config`) and
//! applies flag overrides on top. Relative paths resolve against the
//! artifact directory (`--artifact-dir` or `KVCOMP_ARTIFACT_DIR`).
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use kvcomp_core::allocator::{allocate, default_bounds, l1_normalize, profile_layer_errors, ProfileMode};
use kvcomp_core::harness::config::{ModelKind, RunConfig};
use kvcomp_core::harness::eval::{calibration_sets, trace_task};
use kvcomp_core::harness::tasks::{tasks_from_bundle, tasks_to_bundle};
use kvcomp_core::harness::{planted_model, planted_task, run_eval, run_masking_ablation, BudgetSource, EvalSettings, NeedleTask, PlantedModelParams};
use kvcomp_core::io::TensorBundle;
use kvcomp_core::policies::{Policy, PolicyKind};
use kvcomp_core::{AttentionTrace, BudgetPlan, EvictionDecision, GQAModel, HeadScoreTable, LayerErrorProfile};

#[derive(Debug, Parser)]
#[command(name = "kvcomp", version, about = "KV-cache compression experiments on toy GQA models")]
struct Cli {
    /// Directory for artifacts; relative paths resolve against it.
    #[arg(long, global = true, env = "KVCOMP_ARTIFACT_DIR", default_value = ".")]
    artifact_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Random,
    Planted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    OneLayer,
    Joint,
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e: kvcomp_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded model bundle.
    GenModel {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        q_heads: Option<usize>,
        #[arg(long)]
        kv_heads: Option<usize>,
        #[arg(long)]
        head_dim: Option<usize>,
        #[arg(long, default_value = "model")]
        out: PathBuf,
    },
    /// Write needle tasks for a model.
    GenTasks {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model")]
        model: PathBuf,
        #[arg(long)]
        per_family: Option<usize>,
        #[arg(long)]
        prompt_len: Option<usize>,
        #[arg(long)]
        answer_steps: Option<usize>,
        #[arg(long, default_value = "tasks")]
        out: PathBuf,
    },
    /// Score every head on the tasks (semantic retrieval and copy-paste).
    ProfileHeads {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model")]
        model: PathBuf,
        #[arg(long, default_value = "tasks")]
        tasks: PathBuf,
        #[arg(long, default_value = "heads.json")]
        out: PathBuf,
    },
    /// Per-layer compression errors at the probe budget.
    ProfileErrors {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model")]
        model: PathBuf,
        #[arg(long, default_value = "tasks")]
        tasks: PathBuf,
        #[arg(long, default_value = "heads.json")]
        heads: PathBuf,
        #[arg(long)]
        probe_budget: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_parser = parse_policy)]
        policy: Option<PolicyKind>,
        #[arg(long, default_value = "profile.json")]
        out: PathBuf,
    },
    /// Split a global budget across layers (CSV written next to the JSON).
    Allocate {
        #[command(flatten)]
        common: Common,
        /// Error profile; without one the split is uniform over `--layers`.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        total: Option<usize>,
        #[arg(long)]
        min: Option<usize>,
        #[arg(long)]
        max: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, default_value = "plan.json")]
        out: PathBuf,
    },
    /// Eviction decisions for one trace.
    Evict {
        #[command(flatten)]
        common: Common,
        /// Trace bundle; otherwise traced from `--model` and `--tasks`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        model: PathBuf,
        #[arg(long, default_value = "tasks")]
        tasks: PathBuf,
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long, value_parser = parse_policy, default_value = "compresskv")]
        policy: PolicyKind,
        #[arg(long, default_value = "heads.json")]
        heads: PathBuf,
        #[arg(long, conflicts_with = "plan")]
        budget: Option<usize>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value = "decisions.json")]
        out: PathBuf,
    },
    /// Evaluate policies against the full-cache reference.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model")]
        model: PathBuf,
        #[arg(long, default_value = "tasks")]
        tasks: PathBuf,
        #[arg(long, default_value = "heads.json")]
        heads: PathBuf,
        /// Repeatable; defaults to the config's policy list.
        #[arg(long, value_parser = parse_policy)]
        policy: Vec<PolicyKind>,
        /// Uniform per-layer budget.
        #[arg(long, conflicts_with = "plan")]
        budget: Option<usize>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
    },
    /// Mask top heads by each score and measure recall accuracy.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model")]
        model: PathBuf,
        #[arg(long, default_value = "tasks")]
        tasks: PathBuf,
        #[arg(long, default_value = "heads.json")]
        heads: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long, default_value = "ablation.json")]
        out: PathBuf,
    },
    /// Write the attention trace of one task.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model")]
        model: PathBuf,
        #[arg(long, default_value = "tasks")]
        tasks: PathBuf,
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long, default_value = "trace")]
        out: PathBuf,
    },
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn cli_main(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

struct Ctx {
    dir: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    fn config(&self, c: &Common) -> Result<RunConfig> {
        let mut cfg = match &c.config {
            Some(p) => {
                let p = self.path(p);
                RunConfig::load(&p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn write_json<T: Serialize>(&self, p: &Path, value: &T) -> Result<PathBuf> {
        let p = self.path(p);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        println!("wrote {}", p.display());
        Ok(p)
    }

    fn write_text(&self, p: &Path, text: &str) -> Result<()> {
        let p = self.path(p);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        println!("wrote {}", p.display());
        Ok(())
    }

    fn write_bundle(&self, p: &Path, b: &TensorBundle) -> Result<()> {
        let p = self.path(p);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        let written = b.write(&p).with_context(|| format!("writing bundle {}", p.display()))?;
        println!("wrote {}", written.display());
        Ok(())
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, p: &Path) -> Result<T> {
        let p = self.path(p);
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }

    fn read_bundle(&self, p: &Path) -> Result<TensorBundle> {
        let p = self.path(p);
        TensorBundle::read(&p).with_context(|| format!("reading bundle {}", p.display()))
    }

    fn model(&self, p: &Path) -> Result<GQAModel> {
        Ok(GQAModel::from_bundle(&self.read_bundle(p)?)?)
    }

    fn tasks(&self, p: &Path) -> Result<Vec<NeedleTask>> {
        Ok(tasks_from_bundle(&self.read_bundle(p)?)?)
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { dir: cli.artifact_dir };
    match cli.command {
        Command::GenModel { common, kind, layers, q_heads, kv_heads, head_dim, out } => {
            let mut cfg = ctx.config(&common)?;
            if let Some(k) = kind {
                cfg.model.kind = match k {
                    KindArg::Random => ModelKind::Random,
                    KindArg::Planted => ModelKind::Planted,
                };
            }
            let m = &mut cfg.model;
            m.num_layers = layers.unwrap_or(m.num_layers);
            m.num_q_heads = q_heads.unwrap_or(m.num_q_heads);
            m.num_kv_heads = kv_heads.unwrap_or(m.num_kv_heads);
            m.head_dim = head_dim.unwrap_or(m.head_dim);
            let model = cfg.build_model()?;
            let mut b = model.to_bundle();
            if cfg.model.kind == ModelKind::Planted {
                let pm = cfg.build_planted()?;
                b.meta["planted"] = json!({ "params": cfg.planted, "seed": cfg.seed, "labels": pm.labels });
            }
            ctx.write_bundle(&out, &b)
        }
        Command::GenTasks { common, model, per_family, prompt_len, answer_steps, out } => {
            let mut cfg = ctx.config(&common)?;
            cfg.tasks.per_family = per_family.unwrap_or(cfg.tasks.per_family);
            cfg.tasks.params.prompt_len = prompt_len.unwrap_or(cfg.tasks.params.prompt_len);
            cfg.tasks.params.answer_steps = answer_steps.unwrap_or(cfg.tasks.params.answer_steps);
            let bundle = ctx.read_bundle(&model)?;
            let m = GQAModel::from_bundle(&bundle)?;
            let tasks = match bundle.meta.get("planted") {
                Some(p) => {
                    let params: PlantedModelParams = serde_json::from_value(p["params"].clone())?;
                    let seed = p["seed"].as_u64().context("planted model meta has no seed")?;
                    let pm = planted_model(&params, seed)?;
                    if pm.model != m {
                        bail!("planted model bundle does not match its recorded parameters");
                    }
                    let count = cfg.tasks.per_family * cfg.tasks.families.len();
                    (0..count as u64).map(|i| planted_task(&pm, cfg.seed.wrapping_mul(1000).wrapping_add(i))).collect::<Result<_, _>>()?
                }
                None => {
                    cfg.validate()?;
                    cfg.generate_tasks(&m)?
                }
            };
            ctx.write_bundle(&out, &tasks_to_bundle(&tasks))
        }
        Command::ProfileHeads { common, model, tasks, out } => {
            let _ = ctx.config(&common)?;
            let m = ctx.model(&model)?;
            let t = ctx.tasks(&tasks)?;
            let table = kvcomp_core::harness::profile_heads(&m, &t)?;
            ctx.write_json(&out, &table).map(drop)
        }
        Command::ProfileErrors { common, model, tasks, heads, probe_budget, mode, policy, out } => {
            let cfg = ctx.config(&common)?;
            let mut opts = cfg.profiling.clone();
            opts.params = cfg.policy.clone();
            opts.probe_budget = probe_budget.unwrap_or(opts.probe_budget);
            opts.policy = policy.unwrap_or(opts.policy);
            if let Some(m) = mode {
                opts.mode = match m {
                    ModeArg::OneLayer => ProfileMode::OneLayer,
                    ModeArg::Joint => ProfileMode::Joint,
                };
            }
            let m = ctx.model(&model)?;
            let t = ctx.tasks(&tasks)?;
            let table: Option<HeadScoreTable> =
                if opts.policy == PolicyKind::CompressKv { Some(ctx.read_json(&heads)?) } else { None };
            let profile = profile_layer_errors(&m, &calibration_sets(&t), table.as_ref(), &opts)?;
            ctx.write_json(&out, &profile).map(drop)
        }
        Command::Allocate { common, profile, total, min, max, layers, out } => {
            let cfg = ctx.config(&common)?;
            let errors = match &profile {
                Some(p) => {
                    let prof: LayerErrorProfile = ctx.read_json(p)?;
                    if layers.is_some_and(|l| l != prof.num_layers()) {
                        bail!("--layers disagrees with the profile's {} layers", prof.num_layers());
                    }
                    prof.normalized
                }
                None => {
                    let l = layers.or(Some(cfg.model.num_layers)).filter(|&l| l > 0).context("--layers must be positive")?;
                    l1_normalize(&vec![0.0; l])
                }
            };
            let l = errors.len();
            let total = total.or(cfg.budget.total).unwrap_or(cfg.budget.per_layer * l);
            let (dm, dmax) = match (min.or(cfg.budget.min), max.or(cfg.budget.max)) {
                (Some(a), Some(b)) => (a, b),
                (a, b) => {
                    let (m0, m1) = default_bounds(total, l)?;
                    (a.unwrap_or(m0), b.unwrap_or(m1))
                }
            };
            let plan = allocate(&errors, total, dm, dmax)?;
            let p = ctx.write_json(&out, &plan)?;
            ctx.write_text(&p.with_extension("csv"), &plan.to_csv())
        }
        Command::Evict { common, trace, model, tasks, task, policy, heads, budget, plan, out } => {
            let cfg = ctx.config(&common)?;
            let (tr, span): (AttentionTrace, Option<Vec<usize>>) = match &trace {
                Some(p) => (AttentionTrace::from_bundle(&ctx.read_bundle(p)?)?, None),
                None => {
                    let m = ctx.model(&model)?;
                    let ts = ctx.tasks(&tasks)?;
                    let t = ts.get(task).with_context(|| format!("task {task} out of range ({} tasks)", ts.len()))?;
                    (trace_task(&m, t)?, Some(t.needle_span.positions.clone()))
                }
            };
            let source = budget_source(&ctx, budget, plan.as_deref(), cfg.budget.per_layer)?;
            let table: Option<HeadScoreTable> =
                if policy == PolicyKind::CompressKv { Some(ctx.read_json(&heads)?) } else { None };
            let layer_budgets = source.layer_budgets(tr.num_layers())?;
            let decisions = Policy::from_kind(policy, table.as_ref())?.decide_all(&tr, &layer_budgets, &cfg.policy)?;
            ctx.write_json(&out, &DecisionsReport::new(policy, layer_budgets, decisions, span)).map(drop)
        }
        Command::Eval { common, model, tasks, heads, policy, budget, plan, out } => {
            let cfg = ctx.config(&common)?;
            let policies = if policy.is_empty() { cfg.eval.policies.clone() } else { policy };
            let m = ctx.model(&model)?;
            let t = ctx.tasks(&tasks)?;
            let source = budget_source(&ctx, budget, plan.as_deref(), cfg.budget.per_layer)?;
            let table: Option<HeadScoreTable> =
                if policies.contains(&PolicyKind::CompressKv) { Some(ctx.read_json(&heads)?) } else { None };
            let settings = EvalSettings { params: cfg.policy.clone(), cosine_threshold: cfg.eval.cosine_threshold };
            let report = run_eval(&m, &t, &policies, &[source], table.as_ref(), &settings)?;
            ctx.write_json(&out, &report).map(drop)
        }
        Command::Ablate { common, model, tasks, heads, ks, out } => {
            let cfg = ctx.config(&common)?;
            let ks = if ks.is_empty() { cfg.ablation.ks.clone() } else { ks };
            let m = ctx.model(&model)?;
            let t = ctx.tasks(&tasks)?;
            let table: HeadScoreTable = ctx.read_json(&heads)?;
            let mut report = run_masking_ablation(&m, &table, &ks, &t, cfg.eval.cosine_threshold, cfg.seed)?;
            report.points.retain(|p| cfg.ablation.arms.contains(&p.arm));
            let p = ctx.write_json(&out, &report)?;
            ctx.write_text(&p.with_extension("csv"), &report.to_csv())
        }
        Command::Trace { common, model, tasks, task, out } => {
            let _ = ctx.config(&common)?;
            let m = ctx.model(&model)?;
            let ts = ctx.tasks(&tasks)?;
            let t = ts.get(task).with_context(|| format!("task {task} out of range ({} tasks)", ts.len()))?;
            let mut b = trace_task(&m, t)?.to_bundle();
            b.meta["needle_span"] = json!(t.needle_span);
            b.meta["generated_ids"] = json!(t.generated_ids);
            ctx.write_bundle(&out, &b)
        }
    }
}

fn budget_source(ctx: &Ctx, budget: Option<usize>, plan: Option<&Path>, default: usize) -> Result<BudgetSource> {
    Ok(match (budget, plan) {
        (_, Some(p)) => BudgetSource::Plan(ctx.read_json::<BudgetPlan>(p)?),
        (Some(b), None) => BudgetSource::Uniform(b),
        (None, None) => BudgetSource::Uniform(default),
    })
}

#[derive(Debug, Serialize)]
struct DecisionsReport {
    policy: PolicyKind,
    layer_budgets: Vec<usize>,
    decisions: Vec<EvictionDecision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    needle_span: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    needle_retained: Option<bool>,
}

impl DecisionsReport {
    fn new(policy: PolicyKind, layer_budgets: Vec<usize>, decisions: Vec<EvictionDecision>, span: Option<Vec<usize>>) -> Self {
        let retained = span
            .as_ref()
            .map(|s| decisions.iter().all(|d| s.iter().all(|p| d.keep_indices.binary_search(p).is_ok())));
        Self { policy, layer_budgets, decisions, needle_span: span, needle_retained: retained }
    }
}
