//! OR-logic refinement trigger over perplexity, max entropy and low-confidence count.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::SequenceMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Perplexity,
    Entropy,
    Count,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Perplexity, Condition::Entropy, Condition::Count];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Perplexity => "perplexity",
            Condition::Entropy => "entropy",
            Condition::Count => "count",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = TriggerConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "perplexity" => Ok(Condition::Perplexity),
            "entropy" => Ok(Condition::Entropy),
            "count" => Ok(Condition::Count),
            other => Err(TriggerConfigError::UnknownCondition(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriggerConfigError {
    #[error("{name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("low_conf_probability must lie in (0, 1), got {0}")]
    ProbabilityOutOfRange(f64),
    #[error("at least one trigger condition must be enabled")]
    NothingEnabled,
    #[error("unknown trigger condition {0:?}")]
    UnknownCondition(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    pub perplexity_threshold: f64,
    /// Nats.
    pub max_entropy_threshold: f64,
    pub low_conf_min_count: usize,
    pub low_conf_probability: f64,
    pub enabled_conditions: BTreeSet<Condition>,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            perplexity_threshold: 1.4,
            max_entropy_threshold: 1.5,
            low_conf_min_count: 3,
            low_conf_probability: 0.5,
            enabled_conditions: Condition::ALL.into_iter().collect(),
        }
    }
}

impl TriggerConfig {
    pub fn only(condition: Condition) -> Self {
        Self {
            enabled_conditions: [condition].into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn without(mut self, condition: Condition) -> Self {
        self.enabled_conditions.remove(&condition);
        self
    }

    pub fn validate(&self) -> Result<(), TriggerConfigError> {
        for (name, value) in [
            ("perplexity_threshold", self.perplexity_threshold),
            ("max_entropy_threshold", self.max_entropy_threshold),
            ("low_conf_min_count", self.low_conf_min_count as f64),
        ] {
            if !(value > 0.0) {
                return Err(TriggerConfigError::NonPositive { name, value });
            }
        }
        if !(self.low_conf_probability > 0.0 && self.low_conf_probability < 1.0) {
            return Err(TriggerConfigError::ProbabilityOutOfRange(
                self.low_conf_probability,
            ));
        }
        if self.enabled_conditions.is_empty() {
            return Err(TriggerConfigError::NothingEnabled);
        }
        Ok(())
    }

    fn enabled(&self, c: Condition) -> bool {
        self.enabled_conditions.contains(&c)
    }
}

/// Coarse reading of why a generation was flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CauseClass {
    /// High perplexity only: the whole answer is shaky.
    GlobalConfusion,
    /// High max entropy only: one pivotal choice.
    CriticalDecision,
    /// Many low-confidence tokens only.
    Distributed,
    MultiSignal,
    None,
}

impl CauseClass {
    pub const ALL: [CauseClass; 5] = [
        CauseClass::GlobalConfusion,
        CauseClass::CriticalDecision,
        CauseClass::Distributed,
        CauseClass::MultiSignal,
        CauseClass::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CauseClass::GlobalConfusion => "global_confusion",
            CauseClass::CriticalDecision => "critical_decision",
            CauseClass::Distributed => "distributed",
            CauseClass::MultiSignal => "multi_signal",
            CauseClass::None => "none",
        }
    }
}

impl fmt::Display for CauseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerDecision {
    pub refine: bool,
    pub fired: BTreeSet<Condition>,
    pub cause_class: CauseClass,
}

impl TriggerDecision {
    pub fn from_fired(fired: BTreeSet<Condition>) -> Self {
        let cause_class = classify_cause(&fired);
        Self {
            refine: !fired.is_empty(),
            fired,
            cause_class,
        }
    }

    pub fn fired_names(&self) -> Vec<&'static str> {
        self.fired.iter().map(|c| c.as_str()).collect()
    }
}

/// `ppl > t_ppl  OR  max_H > t_H  OR  low_conf >= n`, restricted to the
/// enabled conditions.
pub fn evaluate_trigger(metrics: &SequenceMetrics, config: &TriggerConfig) -> TriggerDecision {
    let mut fired = BTreeSet::new();
    if config.enabled(Condition::Perplexity) && metrics.perplexity > config.perplexity_threshold {
        fired.insert(Condition::Perplexity);
    }
    if config.enabled(Condition::Entropy) && metrics.max_entropy > config.max_entropy_threshold {
        fired.insert(Condition::Entropy);
    }
    if config.enabled(Condition::Count) && metrics.low_conf_count >= config.low_conf_min_count {
        fired.insert(Condition::Count);
    }
    TriggerDecision::from_fired(fired)
}

pub fn classify_cause(fired: &BTreeSet<Condition>) -> CauseClass {
    let mut it = fired.iter();
    match (it.next(), it.next()) {
        (None, _) => CauseClass::None,
        (Some(_), Some(_)) => CauseClass::MultiSignal,
        (Some(Condition::Perplexity), None) => CauseClass::GlobalConfusion,
        (Some(Condition::Entropy), None) => CauseClass::CriticalDecision,
        (Some(Condition::Count), None) => CauseClass::Distributed,
    }
}
