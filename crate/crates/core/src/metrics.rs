//! Uncertainty signals computed from captured token logprobs.
//!
//! Everything here is a pure function of its inputs. All quantities are in
//! nats unless a function name says otherwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Positive logprobs up to this magnitude are treated as rounding jitter and
/// clamped to zero.
pub const LOGPROB_CLAMP: f64 = 1e-9;

/// Chosen-token probability below which a position counts as low confidence.
pub const LOW_CONFIDENCE: f64 = 0.5;

/// Chosen-token probability below which a position counts as very low confidence.
pub const VERY_LOW_CONFIDENCE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("empty alternatives")]
    EmptyAlternatives,
    #[error("positive logprob {0}")]
    PositiveLogprob(f64),
    #[error("logprob is NaN")]
    NotANumber,
    #[error("underflow: all alternative logprobs are below the representable range")]
    Underflow,
    #[error("negative entropy {0}")]
    NegativeEntropy(f64),
    #[error("at position {position}: {source}")]
    AtPosition {
        position: usize,
        #[source]
        source: Box<MetricsError>,
    },
}

impl MetricsError {
    fn at(self, position: usize) -> Self {
        MetricsError::AtPosition {
            position,
            source: Box::new(self),
        }
    }
}

/// One candidate token at a position, as returned in a top-k list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub text: String,
    pub logprob: f64,
}

impl Alternative {
    pub fn new(text: impl Into<String>, logprob: f64) -> Self {
        Self {
            text: text.into(),
            logprob,
        }
    }
}

/// A generated token with its logprob and the top-k alternatives at its position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenObservation {
    /// Zero-based index within the generation.
    pub position: usize,
    pub text: String,
    /// Natural-log probability of the chosen token.
    pub logprob: f64,
    /// Top-k candidates, non-increasing by logprob.
    pub alternatives: Vec<Alternative>,
}

impl TokenObservation {
    pub fn probability(&self) -> f64 {
        self.logprob.min(0.0).exp()
    }

    /// Logprobs of the distribution used for entropy at this position.
    ///
    /// Some providers return top-k lists that omit the sampled token. When the
    /// chosen text is absent it is prepended so its mass takes part in the
    /// normalization.
    pub fn distribution_logprobs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.alternatives.len() + 1);
        if !self.alternatives.iter().any(|a| a.text == self.text) {
            out.push(self.logprob);
        }
        out.extend(self.alternatives.iter().map(|a| a.logprob));
        out
    }

    /// Same as [`Self::distribution_logprobs`] but keeps the token texts.
    pub fn distribution(&self) -> Vec<Alternative> {
        let mut out = Vec::with_capacity(self.alternatives.len() + 1);
        if !self.alternatives.iter().any(|a| a.text == self.text) {
            out.push(Alternative::new(self.text.clone(), self.logprob));
        }
        out.extend(self.alternatives.iter().cloned());
        out
    }
}

/// Validate one logprob, absorbing tiny positive jitter.
pub fn clamp_logprob(value: f64) -> Result<f64, MetricsError> {
    if value.is_nan() {
        Err(MetricsError::NotANumber)
    } else if value > LOGPROB_CLAMP {
        Err(MetricsError::PositiveLogprob(value))
    } else {
        Ok(value.min(0.0))
    }
}

/// `exp(-mean(logprobs))`.
pub fn perplexity(logprobs: &[f64]) -> Result<f64, MetricsError> {
    if logprobs.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let mut sum = 0.0;
    for (i, &lp) in logprobs.iter().enumerate() {
        sum += clamp_logprob(lp).map_err(|e| e.at(i))?;
    }
    Ok((-sum / logprobs.len() as f64).exp().max(1.0))
}

/// Shannon entropy (nats) of one position's top-k list after renormalizing
/// the observed probabilities to sum to one. Uses `0 * ln 0 = 0`.
pub fn token_entropy(logprobs: &[f64]) -> Result<f64, MetricsError> {
    if logprobs.is_empty() {
        return Err(MetricsError::EmptyAlternatives);
    }
    let mut clamped = Vec::with_capacity(logprobs.len());
    for &lp in logprobs {
        clamped.push(clamp_logprob(lp)?);
    }
    let max = clamped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.exp() == 0.0 {
        return Err(MetricsError::Underflow);
    }
    // Shifting by the max keeps the weights in [0, 1]; normalization cancels it.
    let weights: Vec<f64> = clamped.iter().map(|lp| (lp - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let entropy: f64 = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum();
    let ceiling = (logprobs.len() as f64).ln();
    Ok(entropy.clamp(0.0, ceiling))
}

pub fn nats_to_bits(nats: f64) -> Result<f64, MetricsError> {
    if nats < 0.0 {
        return Err(MetricsError::NegativeEntropy(nats));
    }
    Ok(nats / std::f64::consts::LN_2)
}

/// Probability cut points for the low / very-low confidence counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBands {
    pub low: f64,
    pub very_low: f64,
}

impl Default for ConfidenceBands {
    fn default() -> Self {
        Self {
            low: LOW_CONFIDENCE,
            very_low: VERY_LOW_CONFIDENCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceCounts {
    pub low_conf_count: usize,
    pub very_low_conf_count: usize,
    pub uncertain_fraction: f64,
}

/// Counts of positions whose chosen-token probability is strictly below 0.5
/// and 0.2.
pub fn confidence_counts(tokens: &[TokenObservation]) -> Result<ConfidenceCounts, MetricsError> {
    confidence_counts_with(tokens, ConfidenceBands::default())
}

pub fn confidence_counts_with(
    tokens: &[TokenObservation],
    bands: ConfidenceBands,
) -> Result<ConfidenceCounts, MetricsError> {
    if tokens.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let mut low = 0;
    let mut very_low = 0;
    for (i, tok) in tokens.iter().enumerate() {
        let p = clamp_logprob(tok.logprob).map_err(|e| e.at(i))?.exp();
        if p < bands.low {
            low += 1;
        }
        if p < bands.very_low {
            very_low += 1;
        }
    }
    Ok(ConfidenceCounts {
        low_conf_count: low,
        very_low_conf_count: very_low,
        uncertain_fraction: low as f64 / tokens.len() as f64,
    })
}

/// Aggregate uncertainty profile of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub token_count: usize,
    pub perplexity: f64,
    /// Per-position entropy in nats, aligned with the token list.
    pub entropies: Vec<f64>,
    pub max_entropy: f64,
    pub mean_entropy: f64,
    pub low_conf_count: usize,
    pub very_low_conf_count: usize,
    pub uncertain_fraction: f64,
}

impl SequenceMetrics {
    /// Position of the highest-entropy token (first one on ties).
    pub fn argmax_entropy(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &h) in self.entropies.iter().enumerate() {
            if best.is_none_or(|(_, b)| h > b) {
                best = Some((i, h));
            }
        }
        best.map(|(i, _)| i)
    }
}

pub fn sequence_metrics(tokens: &[TokenObservation]) -> Result<SequenceMetrics, MetricsError> {
    sequence_metrics_with(tokens, ConfidenceBands::default())
}

pub fn sequence_metrics_with(
    tokens: &[TokenObservation],
    bands: ConfidenceBands,
) -> Result<SequenceMetrics, MetricsError> {
    if tokens.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let logprobs: Vec<f64> = tokens.iter().map(|t| t.logprob).collect();
    let perplexity = perplexity(&logprobs)?;
    let entropies = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| token_entropy(&t.distribution_logprobs()).map_err(|e| e.at(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let counts = confidence_counts_with(tokens, bands)?;
    let max_entropy = entropies.iter().copied().fold(0.0, f64::max);
    let mean_entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;
    Ok(SequenceMetrics {
        token_count: tokens.len(),
        perplexity,
        entropies,
        max_entropy,
        mean_entropy,
        low_conf_count: counts.low_conf_count,
        very_low_conf_count: counts.very_low_conf_count,
        uncertain_fraction: counts.uncertain_fraction,
    })
}
