//! Uncertainty report handed back to the model for the refinement pass.
//!
//! A report carries the global profile of the draft (perplexity, mean entropy,
//! confidence counts) plus one entry per uncertain position with its
//! confidence, renormalized alternatives and a small context window.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::{self, SequenceMetrics, TokenObservation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Positions with entropy strictly above this (nats) are listed.
    pub entry_entropy_threshold: f64,
    /// Positions with chosen probability strictly below this are listed.
    pub low_conf_probability: f64,
    /// Tokens of context on each side of an entry.
    pub context_window: usize,
    /// Keep at most this many entries, most uncertain first. `None` keeps all.
    pub max_entries: Option<usize>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            entry_entropy_threshold: 1.0,
            low_conf_probability: 0.5,
            context_window: 3,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAlternative {
    pub text: String,
    /// Raw probability reported by the backend.
    pub probability: f64,
    /// Probability after renormalizing over the listed alternatives.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertainTokenEntry {
    pub position: usize,
    pub text: String,
    pub confidence: f64,
    pub alternatives: Vec<ReportAlternative>,
    /// Nats.
    pub entropy: f64,
    pub context_before: Vec<String>,
    pub context_after: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub token_count: usize,
    pub perplexity: f64,
    pub mean_entropy: f64,
    pub max_entropy: f64,
    pub low_conf_count: usize,
    pub very_low_conf_count: usize,
    pub uncertain_fraction: f64,
}

impl From<&SequenceMetrics> for GlobalStats {
    fn from(m: &SequenceMetrics) -> Self {
        Self {
            token_count: m.token_count,
            perplexity: m.perplexity,
            mean_entropy: m.mean_entropy,
            max_entropy: m.max_entropy,
            low_conf_count: m.low_conf_count,
            very_low_conf_count: m.very_low_conf_count,
            uncertain_fraction: m.uncertain_fraction,
        }
    }
}

/// How the entries were chosen; a copy of the config used.
pub type SelectionRule = ReportConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub global: GlobalStats,
    pub entries: Vec<UncertainTokenEntry>,
    pub selection_rule: SelectionRule,
}

impl UncertaintyReport {
    pub fn qualifies(&self, confidence: f64, entropy: f64) -> bool {
        confidence < self.selection_rule.low_conf_probability
            || entropy > self.selection_rule.entry_entropy_threshold
    }
}

/// Which optional sections appear in the rendered text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub alternatives: bool,
    pub context: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            alternatives: true,
            context: true,
        }
    }
}

/// `metrics` must have been computed from `tokens`.
pub fn build_report(
    tokens: &[TokenObservation],
    metrics: &SequenceMetrics,
    config: &ReportConfig,
) -> UncertaintyReport {
    debug_assert_eq!(tokens.len(), metrics.entropies.len());
    let mut entries: Vec<UncertainTokenEntry> = tokens
        .iter()
        .zip(&metrics.entropies)
        .enumerate()
        .filter(|(_, (tok, &h))| {
            tok.probability() < config.low_conf_probability || h > config.entry_entropy_threshold
        })
        .map(|(i, (tok, &h))| entry_for(tokens, i, tok, h, config.context_window))
        .collect();

    if let Some(cap) = config.max_entries {
        if entries.len() > cap {
            // most uncertain first: lowest confidence, then highest entropy
            entries.sort_by(|a, b| {
                a.confidence
                    .total_cmp(&b.confidence)
                    .then(b.entropy.total_cmp(&a.entropy))
                    .then(a.position.cmp(&b.position))
            });
            entries.truncate(cap);
            entries.sort_by_key(|e| e.position);
        }
    }

    UncertaintyReport {
        global: GlobalStats::from(metrics),
        entries,
        selection_rule: config.clone(),
    }
}

fn entry_for(
    tokens: &[TokenObservation],
    index: usize,
    tok: &TokenObservation,
    entropy: f64,
    window: usize,
) -> UncertainTokenEntry {
    let dist = tok.distribution();
    let probs: Vec<f64> = dist.iter().map(|a| a.logprob.min(0.0).exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut alternatives: Vec<ReportAlternative> = dist
        .into_iter()
        .zip(probs)
        .map(|(a, p)| ReportAlternative {
            text: a.text,
            probability: p,
            share: if total > 0.0 { p / total } else { 0.0 },
        })
        .collect();
    alternatives.sort_by(|a, b| b.probability.total_cmp(&a.probability));

    let start = index.saturating_sub(window);
    let end = (index + 1 + window).min(tokens.len());
    UncertainTokenEntry {
        position: tok.position,
        text: tok.text.clone(),
        confidence: tok.probability(),
        alternatives,
        entropy,
        context_before: tokens[start..index]
            .iter()
            .map(|t| t.text.clone())
            .collect(),
        context_after: tokens[index + 1..end]
            .iter()
            .map(|t| t.text.clone())
            .collect(),
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace('\n', "\\n")
        .replace('\r', "\\r")
        .replace('\t', "\\t")
}

fn label(s: &str) -> String {
    escape(s.trim_matches(' '))
}

fn pct(p: f64) -> String {
    format!("{:.1}%", p * 100.0)
}

pub fn render_text(report: &UncertaintyReport) -> String {
    render_text_with(report, RenderOptions::default())
}

/// Line-oriented rendering. Identical reports give identical bytes.
pub fn render_text_with(report: &UncertaintyReport, options: RenderOptions) -> String {
    let g = &report.global;
    let rule = &report.selection_rule;
    let mut out = String::new();
    out.push_str("Uncertainty report\n");
    let _ = writeln!(out, "- Perplexity: {:.3}", g.perplexity);
    let _ = writeln!(out, "- Mean entropy: {:.3} nats", g.mean_entropy);
    let _ = writeln!(out, "- Max entropy: {:.3} nats", g.max_entropy);
    let _ = writeln!(
        out,
        "- Low-confidence tokens: {} of {} ({})",
        g.low_conf_count,
        g.token_count,
        pct(g.uncertain_fraction)
    );
    let _ = writeln!(
        out,
        "- Very low-confidence tokens: {}",
        g.very_low_conf_count
    );
    if report.entries.is_empty() {
        return out;
    }
    let _ = writeln!(
        out,
        "Uncertain tokens (P < {} or entropy > {} nats):",
        rule.low_conf_probability, rule.entry_entropy_threshold
    );
    for e in &report.entries {
        let _ = write!(
            out,
            "'{}' @{}: {}",
            label(&e.text),
            e.position,
            pct(e.confidence)
        );
        if options.alternatives {
            let alts: Vec<String> = e
                .alternatives
                .iter()
                .map(|a| format!("{}({})", label(&a.text), pct(a.probability)))
                .collect();
            let _ = write!(out, " | alts: {}", alts.join(", "));
        }
        if options.context {
            let _ = write!(
                out,
                " | ctx: ...{} [{}]{}...",
                escape(&e.context_before.concat()),
                escape(&e.text),
                escape(&e.context_after.concat())
            );
        }
        let _ = writeln!(out, " | H: {:.3} nats", e.entropy);
    }
    out
}

pub fn render_structured(report: &UncertaintyReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialization is infallible")
}

pub fn parse_structured(doc: &str) -> serde_json::Result<UncertaintyReport> {
    serde_json::from_str(doc)
}

/// Entropy of an entry's listed distribution, recomputed from the raw probabilities.
pub fn entry_entropy(entry: &UncertainTokenEntry) -> Option<f64> {
    let lps: Vec<f64> = entry
        .alternatives
        .iter()
        .map(|a| a.probability.ln())
        .collect();
    metrics::token_entropy(&lps).ok()
}
