//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's metric code. Sums are compensated
//! (Neumaier) so accumulated rounding stays well below the tolerances the
//! tests assert, and entropy is computed in the unshifted form
//! `ln S - sum(p * l) / S` rather than the library's max-shifted form.

#![allow(dead_code)]

use uncertainty_loop::TokenObservation;

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

fn clamp(l: f64) -> f64 {
    if l > 0.0 && l <= 1e-9 {
        0.0
    } else {
        l
    }
}

pub fn oracle_perplexity(logprobs: &[f64]) -> f64 {
    let n = logprobs.len() as f64;
    (-compensated_sum(logprobs.iter().map(|&l| clamp(l))) / n).exp()
}

pub fn oracle_entropy_from_logprobs(logprobs: &[f64]) -> f64 {
    let ls: Vec<f64> = logprobs.iter().map(|&l| clamp(l)).collect();
    let s = compensated_sum(ls.iter().map(|l| l.exp()));
    let weighted = compensated_sum(
        ls.iter()
            .map(|l| if l.exp() == 0.0 { 0.0 } else { l.exp() * l }),
    );
    (s.ln() - weighted / s).max(0.0)
}

pub fn oracle_entropy_from_probs(probs: &[f64]) -> f64 {
    let s = compensated_sum(probs.iter().copied());
    compensated_sum(probs.iter().filter(|&&p| p > 0.0).map(|&p| {
        let q = p / s;
        -q * q.ln()
    }))
}

/// The distribution a token's entropy is taken over: its listed
/// alternatives, with the chosen token added in front when missing.
pub fn oracle_distribution(t: &TokenObservation) -> Vec<f64> {
    let mut out: Vec<f64> = t.alternatives.iter().map(|a| a.logprob).collect();
    if !t.alternatives.iter().any(|a| a.text == t.text) {
        out.insert(0, t.logprob);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
    pub perplexity: f64,
    pub entropies: Vec<f64>,
    pub max_entropy: f64,
    pub low: usize,
    pub very_low: usize,
}

pub fn oracle_metrics(tokens: &[TokenObservation]) -> OracleMetrics {
    let lps: Vec<f64> = tokens.iter().map(|t| t.logprob).collect();
    let entropies: Vec<f64> = tokens
        .iter()
        .map(|t| oracle_entropy_from_logprobs(&oracle_distribution(t)))
        .collect();
    let probs: Vec<f64> = tokens.iter().map(|t| clamp(t.logprob).exp()).collect();
    OracleMetrics {
        perplexity: oracle_perplexity(&lps),
        max_entropy: entropies.iter().copied().fold(0.0, f64::max),
        entropies,
        low: probs.iter().filter(|&&p| p < 0.5).count(),
        very_low: probs.iter().filter(|&&p| p < 0.2).count(),
    }
}

/// `|a - b| <= rel * |b|`, treating exact equality (including two zeros)
/// as agreement.
pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * b.abs()
}

/// Absolute slack for entropies at or near zero, where relative error is
/// undefined and the unshifted oracle carries a few ulps of `ln S`.
pub const ENTROPY_ABS_FLOOR: f64 = 1e-12;

pub fn entropy_close(a: f64, b: f64, rel: f64) -> bool {
    rel_close(a, b, rel) || (a - b).abs() <= ENTROPY_ABS_FLOOR
}
