//! Built-in scripted scenarios for demos and tests.

use crate::backend::scripted::StreamBuilder;
use crate::backend::{GenerationResult, ScriptedScenario};

pub const AGI_QUERY: &str = "Is artificial general intelligence likely to be achieved by 2030?";

pub const BUILTIN: [&str; 4] = ["agi_2030", "confident", "refine_fails", "batch16"];

pub fn builtin(name: &str) -> Option<ScriptedScenario> {
    match name {
        "agi_2030" => Some(agi_2030()),
        "confident" => Some(confident()),
        "refine_fails" => Some(refine_fails()),
        "batch16" => Some(batch16()),
        _ => None,
    }
}

const TOP_K: usize = 5;

/// Chosen-token probabilities for the eight low-confidence positions of the
/// AGI draft, keyed by position.
const DRAFT_LOW: [(usize, f64); 8] = [
    (12, 0.45),
    (13, 0.44),
    (15, 0.28),
    (22, 0.38),
    (25, 0.47),
    (27, 0.34),
    (28, 0.412),
    (36, 0.41),
];

const DRAFT_WORDS: [&str; 40] = [
    "Many",
    " experts",
    " believe",
    " that",
    " artificial",
    " general",
    " intelligence",
    " (",
    "AGI",
    ")",
    " is",
    " a",
    " realistic",
    " goal",
    " and",
    " likely",
    " to",
    " be",
    " achieved",
    " within",
    " the",
    " next",
    " few",
    " years",
    ",",
    " possibly",
    " by",
    " around",
    " 2030",
    ".",
    " Rapid",
    " progress",
    " in",
    " large",
    " language",
    " models",
    " supports",
    " this",
    " view",
    ".",
];

/// The draft is tuned to a perplexity of exactly 1.35: the 32 confident
/// tokens share whatever log-mass the eight shaky ones leave over.
pub fn agi_draft() -> GenerationResult {
    let target_total = -(DRAFT_WORDS.len() as f64) * 1.35f64.ln();
    let low_total: f64 = DRAFT_LOW.iter().map(|(_, p)| p.ln()).sum();
    let filler_p =
        ((target_total - low_total) / (DRAFT_WORDS.len() - DRAFT_LOW.len()) as f64).exp();

    let mut b = StreamBuilder::new();
    for (i, w) in DRAFT_WORDS.iter().enumerate() {
        b = match DRAFT_LOW.iter().find(|(pos, _)| *pos == i) {
            Some(&(15, p)) => b.token(
                w,
                p,
                &[
                    (" unlikely", 0.25),
                    (" possible", 0.20),
                    (" uncertain", 0.15),
                    (" improbable", 0.12),
                ],
            ),
            Some(&(_, p)) => b.spread(w, p, TOP_K),
            None => b.spread(w, filler_p, TOP_K),
        };
    }
    b.finish(24, 2847.0 + 12.0, 12.0)
}

fn calm(text: &str, p: f64) -> StreamBuilder {
    words(text)
        .into_iter()
        .fold(StreamBuilder::new(), |b, w| b.spread(&w, p, TOP_K))
}

/// Splits text into word-like tokens that keep their leading space.
fn words(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (i, w) in text.split(' ').enumerate() {
        out.push(if i == 0 {
            w.to_string()
        } else {
            format!(" {w}")
        });
    }
    out
}

pub fn agi_refined() -> GenerationResult {
    calm(
        "Whether AGI will be achieved by 2030 is uncertain. Some researchers consider it possible, \
         but many expect longer timelines, and there is no agreed definition or test for AGI. \
         Claims of a specific date should be treated with caution.",
        0.95,
    )
    .finish(210, 1203.0, 10.0)
}

pub fn agi_2030() -> ScriptedScenario {
    ScriptedScenario::new(
        "agi_2030",
        "AGI-by-2030 draft: perplexity 1.35, one 5-way split at 'likely', eight low-confidence tokens",
    )
    .respond_any(0, agi_draft())
    .respond_any(1, agi_refined())
}

/// Every token is chosen with probability 1 (perplexity exactly 1.0).
pub fn confident_answer() -> GenerationResult {
    let mut b = StreamBuilder::new();
    for w in words("The capital of France is Paris.") {
        b = b.token(
            &w,
            1.0,
            &[(" the", (-40.0f64).exp()), (" a", (-41.0f64).exp())],
        );
    }
    b.finish(12, 900.0, 3.0)
}

pub fn confident() -> ScriptedScenario {
    ScriptedScenario::new("confident", "fully confident single-sentence answer")
        .respond_any(0, confident_answer())
}

pub fn refine_fails() -> ScriptedScenario {
    ScriptedScenario::new(
        "refine_fails",
        "AGI draft that triggers, then the refinement call fails",
    )
    .respond_any(0, agi_draft())
    .fail_any(1, 503, "service unavailable")
}

/// Which of the sixteen batch queries trigger, and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchShape {
    Calm,
    /// Perplexity only.
    Diffuse,
    /// Max entropy only.
    Pivot,
    /// Low-confidence count only.
    Scattered,
    /// Max entropy and count.
    Mixed,
}

pub const BATCH_SHAPES: [BatchShape; 16] = {
    use BatchShape::*;
    [
        Calm, Calm, Diffuse, Calm, Calm, Pivot, Calm, Calm, Scattered, Calm, Calm, Mixed, Calm,
        Calm, Mixed, Calm,
    ]
};

pub fn batch16_queries() -> Vec<String> {
    (1..=16)
        .map(|i| format!("Batch question {i:02}: summarize the trade-offs of approach {i}."))
        .collect()
}

fn batch_draft(i: usize, shape: BatchShape) -> GenerationResult {
    let body = format!(
        "Approach {} balances cost and accuracy by reusing cached results while validating new inputs before use.",
        i + 1
    );
    let ws = words(&body);
    let mut b = StreamBuilder::new();
    for (j, w) in ws.iter().enumerate() {
        b = match (shape, j) {
            (BatchShape::Diffuse, _) => b.spread(w, 0.6, TOP_K),
            (BatchShape::Pivot | BatchShape::Mixed, 5) => b.token(
                w,
                0.24,
                &[
                    (" alpha", 0.22),
                    (" beta", 0.20),
                    (" gamma", 0.18),
                    (" delta", 0.16),
                ],
            ),
            (BatchShape::Scattered | BatchShape::Mixed, 2 | 8 | 11) => b.token(
                w,
                0.45,
                &[
                    (" alpha", 0.35),
                    (" beta", 0.10),
                    (" gamma", 0.06),
                    (" delta", 0.04),
                ],
            ),
            _ => b.spread(w, 0.92, TOP_K),
        };
    }
    b.finish(20 + i as u64, 1500.0 + 100.0 * i as f64, 5.0)
}

/// Sixteen queries; five are built to trigger refinement.
pub fn batch16() -> ScriptedScenario {
    let mut s = ScriptedScenario::new(
        "batch16",
        "sixteen queries, five of which trigger refinement",
    );
    for (i, (q, shape)) in batch16_queries().into_iter().zip(BATCH_SHAPES).enumerate() {
        s = s.respond_to_query(0, q.clone(), batch_draft(i, shape));
        if shape != BatchShape::Calm {
            let refined = calm(
                &format!(
                    "Revised: approach {} is a reasonable default with caveats.",
                    i + 1
                ),
                0.95,
            )
            .finish(150, 900.0, 4.0);
            s = s.respond_to_query(1, q, refined);
        }
    }
    s
}
