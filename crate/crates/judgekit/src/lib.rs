//! Fine-grained rubric evaluation toolkit.
//!
//! The pipeline decomposes a free-form evaluation task into per-aspect expert
//! subtasks, routes each subtask to a pluggable judge backend, parses the
//! structured judge output into scored evaluations, derives preference
//! triplets from positive evaluations via rule-based corruptions, trains
//! small per-aspect judge models with a reward-token-conditioned preference
//! objective, and scores judge/human agreement with a statistics suite.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`taxonomy`]: the aspect / sub-aspect rubric tree and score bounds
//! - [`orchestrator`]: task decomposition, prompt rendering, output parsing,
//!   and bundle aggregation
//! - [`backends`]: the judge interface plus mock, scripted, and remote
//!   implementations
//! - [`preference`]: corruption transforms and preference dataset construction
//! - [`adto`]: the reward-token preference objective, its analytic gradient,
//!   a finite-difference oracle, layer freezing, and the training loop
//! - [`metrics`]: pairwise accuracy, Pearson, ICC, reference match,
//!   win/tie/lose, and bias probes

pub mod adto;
pub mod backends;
pub mod jsonl;
pub mod metrics;
pub mod orchestrator;
pub mod preference;
pub mod taxonomy;

mod hash;

pub use backends::{BackendConfig, Judge, JudgeError, JudgeRequest, RequestKey};
pub use orchestrator::{EvalMode, EvaluationBundle, ExpertRegistry, Sample, TaskTree};
pub use preference::{PreferenceTriplet, TransformKind};
pub use taxonomy::{default_taxonomy, AspectId, SubAspectEvaluation, TaxonomySpec};
