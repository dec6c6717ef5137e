//! Per-query loop: draft with logprobs, measure, decide, optionally refine
//! once with an uncertainty report, and record everything.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, GenerationRequest, GenerationResult, Message, Usage, DEFAULT_TOP_K, MAX_TOP_K,
};
use crate::metrics::{
    sequence_metrics_with, ConfidenceBands, SequenceMetrics, VERY_LOW_CONFIDENCE,
};
use crate::report::{
    build_report, render_text_with, RenderOptions, ReportConfig, UncertaintyReport,
};
use crate::trigger::{evaluate_trigger, TriggerConfig, TriggerConfigError, TriggerDecision};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Appended after the rendered report in the refinement prompt.
pub const REFINEMENT_INSTRUCTION: &str = "\
Revise your previous answer using the uncertainty report above. \
Look again at each listed token: compare your choice with the alternatives \
you considered and use the surrounding context to decide whether another option is more accurate. \
Focus on factual accuracy over stylistic variations. \
Keep the parts of the answer that are correct, qualify claims you cannot support, \
and reply with the revised answer only.";

/// Per-1K-token prices. Any currency; defaults are indicative only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub prompt_price: f64,
    pub completion_price: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            prompt_price: 0.0004,
            completion_price: 0.0016,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub model_id: String,
    /// Model for the refinement pass; the draft model when unset.
    pub refinement_model_id: Option<String>,
    pub top_k: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            model_id: "gpt-4.1-mini".to_string(),
            refinement_model_id: None,
            top_k: DEFAULT_TOP_K,
            max_tokens: 1024,
            temperature: 0.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub trigger: TriggerConfig,
    pub report: ReportConfig,
    pub refinement_enabled: bool,
    pub include_alternatives_in_report: bool,
    pub include_context_in_report: bool,
    pub cost_model: CostModel,
    pub generation: GenerationSettings,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            trigger: TriggerConfig::default(),
            report: ReportConfig::default(),
            refinement_enabled: true,
            include_alternatives_in_report: true,
            include_context_in_report: true,
            cost_model: CostModel::default(),
            generation: GenerationSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Trigger(#[from] TriggerConfigError),
    #[error("{0}")]
    Invalid(String),
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.trigger.validate()?;
        let g = &self.generation;
        if !(1..=MAX_TOP_K).contains(&g.top_k) {
            return Err(ConfigError::Invalid(format!(
                "top_k must be in 1..={MAX_TOP_K}, got {}",
                g.top_k
            )));
        }
        if g.max_tokens == 0 {
            return Err(ConfigError::Invalid("max_tokens must be at least 1".into()));
        }
        if !(g.temperature >= 0.0) {
            return Err(ConfigError::Invalid(format!(
                "temperature must be >= 0, got {}",
                g.temperature
            )));
        }
        let r = &self.report;
        if !(r.entry_entropy_threshold >= 0.0) {
            return Err(ConfigError::Invalid(
                "report entry_entropy_threshold must be >= 0".into(),
            ));
        }
        if !(r.low_conf_probability > 0.0 && r.low_conf_probability <= 1.0) {
            return Err(ConfigError::Invalid(
                "report low_conf_probability must be in (0, 1]".into(),
            ));
        }
        let c = &self.cost_model;
        if !(c.prompt_price >= 0.0 && c.completion_price >= 0.0) {
            return Err(ConfigError::Invalid("prices must be >= 0".into()));
        }
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            alternatives: self.include_alternatives_in_report,
            context: self.include_context_in_report,
        }
    }

    /// Bands used for the confidence counts; the low band follows the trigger.
    pub fn confidence_bands(&self) -> ConfidenceBands {
        let low = self.trigger.low_conf_probability;
        ConfidenceBands {
            low,
            very_low: VERY_LOW_CONFIDENCE.min(low),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub generation_ms: f64,
    pub logprob_extraction_ms: f64,
    pub metric_ms: f64,
    pub trigger_ms: f64,
    pub report_ms: f64,
    /// Zero when no refinement ran.
    pub refinement_ms: f64,
    pub total_ms: f64,
}

impl LatencyBreakdown {
    fn finish(mut self) -> Self {
        self.total_ms = self.generation_ms
            + self.logprob_extraction_ms
            + self.metric_ms
            + self.trigger_ms
            + self.report_ms
            + self.refinement_ms;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub result: GenerationResult,
    pub metrics: SequenceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub query: String,
    pub backend: String,
    pub model_id: String,
    pub first_pass: PassRecord,
    pub decision: TriggerDecision,
    pub report: Option<UncertaintyReport>,
    pub refinement_prompt: Option<Vec<Message>>,
    pub second_pass: Option<PassRecord>,
    /// Set when the refinement call failed and the draft was kept.
    pub refinement_error: Option<String>,
    pub degraded: bool,
    pub final_text: String,
    pub latency: LatencyBreakdown,
    pub cost: f64,
    pub started_at: String,
    pub finished_at: String,
}

impl RunRecord {
    pub fn refinement_attempted(&self) -> bool {
        self.second_pass.is_some() || self.refinement_error.is_some()
    }

    pub fn backend_calls(&self) -> usize {
        1 + usize::from(self.refinement_attempted())
    }

    pub fn usages(&self) -> Vec<Usage> {
        std::iter::once(self.first_pass.result.usage)
            .chain(self.second_pass.as_ref().map(|p| p.result.usage))
            .collect()
    }
}

/// A query that produced no usable draft.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("query failed during {stage}: {error}")]
pub struct QueryFailure {
    pub query: String,
    pub stage: String,
    pub error: String,
    pub started_at: String,
    pub finished_at: String,
}

/// Time source for stage timings and record timestamps.
pub trait Clock: Send + Sync {
    /// Monotonic milliseconds from an arbitrary origin.
    fn now_ms(&self) -> f64;
    fn timestamp(&self) -> String;
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1e3
    }

    fn timestamp(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

/// Clock that never advances; used with scripted backends so reruns produce
/// byte-identical traces.
#[derive(Debug, Default, Clone, Copy)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now_ms(&self) -> f64 {
        0.0
    }

    fn timestamp(&self) -> String {
        "1970-01-01T00:00:00.000Z".to_string()
    }
}

fn timed<T>(clock: &dyn Clock, f: impl FnOnce() -> T) -> (T, f64) {
    let start = clock.now_ms();
    let out = f();
    (out, (clock.now_ms() - start).max(0.0))
}

pub fn build_refinement_prompt(
    query: &str,
    first_pass_text: &str,
    report: &UncertaintyReport,
    options: RenderOptions,
) -> Vec<Message> {
    let mut feedback = render_text_with(report, options);
    feedback.push('\n');
    feedback.push_str(REFINEMENT_INSTRUCTION);
    vec![
        Message::user(query),
        Message::assistant(first_pass_text),
        Message::user(feedback),
    ]
}

/// Sum over passes of `(prompt * prompt_price + completion * completion_price) / 1000`.
pub fn estimate_cost(usages: &[Usage], model: &CostModel) -> f64 {
    usages
        .iter()
        .map(|u| {
            (u.prompt_tokens as f64 * model.prompt_price
                + u.completion_tokens as f64 * model.completion_price)
                / 1000.0
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("base latency must be positive, got {0}")]
pub struct NonPositiveBase(pub f64);

/// Average latency added by refinement, as a percentage of the base latency.
pub fn amortized_overhead(
    base_ms: f64,
    refine_ms: f64,
    refine_rate: f64,
) -> Result<f64, NonPositiveBase> {
    if !(base_ms > 0.0) {
        return Err(NonPositiveBase(base_ms));
    }
    Ok(100.0 * refine_rate * refine_ms / base_ms)
}

fn request(config: &LoopConfig, messages: Vec<Message>, pass_index: u32) -> GenerationRequest {
    let g = &config.generation;
    let model_id = match (pass_index, &g.refinement_model_id) {
        (1, Some(m)) => m.clone(),
        _ => g.model_id.clone(),
    };
    GenerationRequest {
        messages,
        top_k: g.top_k,
        max_tokens: g.max_tokens,
        temperature: g.temperature,
        model_id,
        seed: g.seed,
        pass_index,
    }
}

fn default_clock(backend: &dyn Backend) -> Box<dyn Clock> {
    if backend.is_deterministic() {
        Box::new(FrozenClock)
    } else {
        Box::new(SystemClock::default())
    }
}

struct Draft {
    pass: PassRecord,
    decision: TriggerDecision,
    latency: LatencyBreakdown,
}

fn draft(
    query: &str,
    config: &LoopConfig,
    backend: &dyn Backend,
    clock: &dyn Clock,
    started_at: &str,
) -> Result<Draft, QueryFailure> {
    let fail = |stage: &str, error: String| QueryFailure {
        query: query.to_string(),
        stage: stage.to_string(),
        error,
        started_at: started_at.to_string(),
        finished_at: clock.timestamp(),
    };
    let result = backend
        .generate(&request(config, vec![Message::user(query)], 0))
        .map_err(|e| fail("generation", e.to_string()))?;
    let (metrics, metric_ms) = timed(clock, || {
        sequence_metrics_with(&result.tokens, config.confidence_bands())
    });
    let metrics = metrics.map_err(|e| fail("metrics", e.to_string()))?;
    let (decision, trigger_ms) = timed(clock, || evaluate_trigger(&metrics, &config.trigger));
    let latency = LatencyBreakdown {
        generation_ms: (result.wall_time_ms - result.extraction_ms).max(0.0),
        logprob_extraction_ms: result.extraction_ms,
        metric_ms,
        trigger_ms,
        ..LatencyBreakdown::default()
    };
    Ok(Draft {
        pass: PassRecord { result, metrics },
        decision,
        latency,
    })
}

fn single_pass_record(
    query: &str,
    config: &LoopConfig,
    backend: &dyn Backend,
    clock: &dyn Clock,
    started_at: String,
    d: Draft,
) -> RunRecord {
    let cost = estimate_cost(&[d.pass.result.usage], &config.cost_model);
    RunRecord {
        query: query.to_string(),
        backend: backend.name().to_string(),
        model_id: config.generation.model_id.clone(),
        final_text: d.pass.result.text.clone(),
        first_pass: d.pass,
        decision: d.decision,
        report: None,
        refinement_prompt: None,
        second_pass: None,
        refinement_error: None,
        degraded: false,
        latency: d.latency.finish(),
        cost,
        started_at,
        finished_at: clock.timestamp(),
    }
}

/// The baseline: one generation, measured and judged but never refined.
pub fn run_single_pass(
    query: &str,
    config: &LoopConfig,
    backend: &dyn Backend,
) -> Result<RunRecord, QueryFailure> {
    run_single_pass_with_clock(query, config, backend, default_clock(backend).as_ref())
}

pub fn run_single_pass_with_clock(
    query: &str,
    config: &LoopConfig,
    backend: &dyn Backend,
    clock: &dyn Clock,
) -> Result<RunRecord, QueryFailure> {
    let started_at = clock.timestamp();
    let d = draft(query, config, backend, clock, &started_at)?;
    Ok(single_pass_record(
        query, config, backend, clock, started_at, d,
    ))
}

pub fn run_query(
    query: &str,
    config: &LoopConfig,
    backend: &dyn Backend,
) -> Result<RunRecord, QueryFailure> {
    run_query_with_clock(query, config, backend, default_clock(backend).as_ref())
}

/// Runs the full loop. At most two backend calls are made; metrics of the
/// refined answer are recorded but never trigger another pass.
pub fn run_query_with_clock(
    query: &str,
    config: &LoopConfig,
    backend: &dyn Backend,
    clock: &dyn Clock,
) -> Result<RunRecord, QueryFailure> {
    let started_at = clock.timestamp();
    let d = draft(query, config, backend, clock, &started_at)?;
    if !(d.decision.refine && config.refinement_enabled) {
        return Ok(single_pass_record(
            query, config, backend, clock, started_at, d,
        ));
    }

    let Draft {
        pass: first_pass,
        decision,
        mut latency,
    } = d;
    let ((report, prompt), report_ms) = timed(clock, || {
        let report = build_report(
            &first_pass.result.tokens,
            &first_pass.metrics,
            &config.report,
        );
        let prompt = build_refinement_prompt(
            query,
            &first_pass.result.text,
            &report,
            config.render_options(),
        );
        (report, prompt)
    });
    latency.report_ms = report_ms;

    let refine_start = clock.now_ms();
    let outcome = backend
        .generate(&request(config, prompt.clone(), 1))
        .map_err(|e| e.to_string())
        .and_then(|result| {
            sequence_metrics_with(&result.tokens, config.confidence_bands())
                .map(|metrics| PassRecord { result, metrics })
                .map_err(|e| format!("refined answer metrics: {e}"))
        });
    let local_ms = (clock.now_ms() - refine_start).max(0.0);

    let (second_pass, refinement_error) = match outcome {
        Ok(pass) => {
            // the backend's own wall time covers the call; the clock adds local work
            let call_ms = pass.result.wall_time_ms;
            latency.refinement_ms = if backend.is_deterministic() {
                call_ms
            } else {
                local_ms.max(call_ms)
            };
            (Some(pass), None)
        }
        Err(e) => {
            log::warn!("refinement failed, keeping the draft: {e}");
            latency.refinement_ms = local_ms;
            (None, Some(e))
        }
    };

    let final_text = second_pass
        .as_ref()
        .map_or_else(|| first_pass.result.text.clone(), |p| p.result.text.clone());
    let mut usages = vec![first_pass.result.usage];
    usages.extend(second_pass.as_ref().map(|p| p.result.usage));
    Ok(RunRecord {
        query: query.to_string(),
        backend: backend.name().to_string(),
        model_id: config.generation.model_id.clone(),
        first_pass,
        decision,
        report: Some(report),
        refinement_prompt: Some(prompt),
        degraded: refinement_error.is_some(),
        second_pass,
        refinement_error,
        final_text,
        latency: latency.finish(),
        cost: estimate_cost(&usages, &config.cost_model),
        started_at,
        finished_at: clock.timestamp(),
    })
}

/// Runs queries on up to `parallelism` threads. Results come back in input order.
pub fn run_batch(
    queries: &[String],
    config: &LoopConfig,
    backend: &dyn Backend,
    parallelism: usize,
) -> Vec<Result<RunRecord, QueryFailure>> {
    let clock = default_clock(backend);
    let clock = clock.as_ref();
    let slots: Mutex<Vec<Option<Result<RunRecord, QueryFailure>>>> =
        Mutex::new(queries.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = parallelism.clamp(1, queries.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(q) = queries.get(i) else { break };
                let r = run_query_with_clock(q, config, backend, clock);
                slots.lock().expect("batch slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("batch slots poisoned")
        .into_iter()
        .map(|r| r.expect("every query produces a result"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub queries: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub refined: usize,
    pub degraded: usize,
    /// Refined / succeeded.
    pub refinement_rate: f64,
    pub mean_latency_ms: f64,
    pub total_cost: f64,
}

impl BatchSummary {
    pub fn from_results(results: &[Result<RunRecord, QueryFailure>]) -> Self {
        let ok: Vec<&RunRecord> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let refined = ok.iter().filter(|r| r.refinement_attempted()).count();
        let ratio = |n: f64| {
            if ok.is_empty() {
                0.0
            } else {
                n / ok.len() as f64
            }
        };
        Self {
            queries: results.len(),
            succeeded: ok.len(),
            failed: results.len() - ok.len(),
            refined,
            degraded: ok.iter().filter(|r| r.degraded).count(),
            refinement_rate: ratio(refined as f64),
            mean_latency_ms: ratio(ok.iter().map(|r| r.latency.total_ms).sum()),
            total_cost: ok.iter().map(|r| r.cost).sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_arithmetic() {
        let model = CostModel {
            prompt_price: 0.1,
            completion_price: 0.4,
        };
        assert_eq!(estimate_cost(&[], &model), 0.0);
        assert_eq!(estimate_cost(&[Usage::default()], &model), 0.0);
        let u = Usage {
            prompt_tokens: 1000,
            completion_tokens: 1000,
        };
        assert!((estimate_cost(&[u], &model) - 0.5).abs() < 1e-12);
        let v = Usage {
            prompt_tokens: 1234,
            completion_tokens: 77,
        };
        let joint = estimate_cost(&[u, v], &model);
        let split = estimate_cost(&[u], &model) + estimate_cost(&[v], &model);
        assert!((joint - split).abs() < 1e-12);
    }

    #[test]
    fn overhead_arithmetic() {
        let o = amortized_overhead(3028.0, 1203.0, 0.312).unwrap();
        assert!((o - 12.4).abs() < 0.1, "{o}");
        assert_eq!(amortized_overhead(3028.0, 1203.0, 0.0).unwrap(), 0.0);
        assert_eq!(amortized_overhead(500.0, 500.0, 1.0).unwrap(), 100.0);
        assert!(amortized_overhead(0.0, 1.0, 0.5).is_err());
        assert!(amortized_overhead(-3.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn latency_total_is_the_sum() {
        let l = LatencyBreakdown {
            generation_ms: 2847.0,
            logprob_extraction_ms: 12.0,
            metric_ms: 38.0,
            trigger_ms: 4.0,
            report_ms: 127.0,
            refinement_ms: 1203.0,
            total_ms: 0.0,
        }
        .finish();
        assert_eq!(l.total_ms, 4231.0);
    }

    #[test]
    fn config_validation() {
        assert!(LoopConfig::default().validate().is_ok());
        let mut c = LoopConfig::default();
        c.generation.top_k = 0;
        assert!(c.validate().is_err());
        let mut c = LoopConfig::default();
        c.cost_model.prompt_price = -1.0;
        assert!(c.validate().is_err());
        let mut c = LoopConfig::default();
        c.trigger.max_entropy_threshold = -0.5;
        assert!(matches!(c.validate(), Err(ConfigError::Trigger(_))));
    }

    #[test]
    fn bands_follow_trigger() {
        let mut c = LoopConfig::default();
        assert_eq!(c.confidence_bands(), ConfidenceBands::default());
        c.trigger.low_conf_probability = 0.1;
        assert_eq!(
            c.confidence_bands(),
            ConfidenceBands {
                low: 0.1,
                very_low: 0.1
            }
        );
    }
}
