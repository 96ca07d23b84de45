//! Grouped-query attention with an explicit KV cache and a pluggable
//! compression layer.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense f64 kernels.
//! * [`model`]: a pure attention stack with prefill/decode and full traces.
//! * [`cache`]: per-layer, per-KV-head storage with layer-unified eviction.
//! * [`heads`]: semantic-retrieval and copy-paste head scoring, selection, masking.
//! * [`policies`]: streaming, SnapKV-style and SRH-driven eviction policies.
//! * [`allocator`]: compression-error profiling and layer-adaptive budgets.
//! * [`harness`]: synthetic workloads, evaluation and ablations.
//! * [`io`]: flat binary tensor files with JSON sidecars.

pub mod allocator;
pub mod cache;
pub mod error;
pub mod harness;
pub mod heads;
pub mod io;
pub mod model;
pub mod numerics;
pub mod policies;

pub use allocator::{allocate, default_bounds, profile_layer_errors, BudgetPlan, LayerErrorProfile};
pub use cache::{EvictionDecision, KVCache, LayerCache, MemoryReport};
pub use error::{Error, Result};
pub use heads::{AnswerSpan, HeadMask, HeadScoreTable};
pub use model::{AttentionTrace, GQAModel, ModelConfig};
pub use numerics::Matrix;
pub use policies::{Policy, PolicyParams};
