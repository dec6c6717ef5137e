//! Uncertainty-aware inference middleware.
//!
//! A draft is generated with token logprobs, scored for uncertainty
//! (perplexity, per-token entropy over the top-k alternatives, low-confidence
//! counts), and refined at most once when an OR-logic trigger fires. The
//! refinement prompt carries a structured report of the uncertain tokens,
//! their alternatives and surrounding context.
//!
//! Offline tooling covers calibration (ECE), entropy histograms and
//! synthetic stream generation.

pub mod backend;
pub mod calibration;
pub mod metrics;
pub mod orchestrator;
pub mod report;
pub mod scenarios;
pub mod simulator;
pub mod trace;
pub mod trigger;

pub use backend::{
    Backend, BackendError, GenerationRequest, GenerationResult, Message, Role, Usage,
};
pub use metrics::{
    perplexity, sequence_metrics, token_entropy, Alternative, SequenceMetrics, TokenObservation,
};
pub use orchestrator::{run_query, run_single_pass, LoopConfig, RunRecord};
pub use report::{build_report, render_text, ReportConfig, UncertaintyReport};
pub use trigger::{evaluate_trigger, CauseClass, Condition, TriggerConfig, TriggerDecision};
