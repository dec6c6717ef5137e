//! Uncertainty report: selection by brute-force scan, rendering and the
//! structured round trip.

use proptest::prelude::*;
use uncertainty_loop::metrics::sequence_metrics;
use uncertainty_loop::report::{
    parse_structured, render_structured, render_text_with, RenderOptions,
};
use uncertainty_loop::{build_report, render_text, Alternative, ReportConfig, TokenObservation};

fn tok(position: usize, text: &str, p: f64, alts: &[(&str, f64)]) -> TokenObservation {
    TokenObservation {
        position,
        text: text.into(),
        logprob: p.ln(),
        alternatives: alts
            .iter()
            .map(|(t, q)| Alternative::new(*t, q.ln()))
            .collect(),
    }
}

fn fixture() -> Vec<TokenObservation> {
    vec![
        tok(0, "The", 1.0, &[("The", 1.0)]),
        tok(1, " sky", 0.9, &[(" sky", 0.9), (" sea", 0.1)]),
        tok(2, " is", 1.0, &[(" is", 1.0)]),
        tok(
            3,
            " blue",
            0.4,
            &[(" blue", 0.4), (" grey", 0.35), (" red", 0.25)],
        ),
        tok(4, " and", 0.8, &[(" and", 0.8), (",", 0.2)]),
        tok(
            5,
            " clear",
            0.3,
            &[
                (" clear", 0.3),
                (" calm", 0.28),
                (" bright", 0.22),
                (" cold", 0.2),
            ],
        ),
        tok(
            6,
            " tonight",
            0.6,
            &[
                (" tonight", 0.6),
                (" today", 0.2),
                (" now", 0.1),
                (" later", 0.1),
            ],
        ),
        tok(7, ".", 1.0, &[(".", 1.0)]),
    ]
}

#[test]
fn golden_three_entry_render() {
    let tokens = fixture();
    let m = sequence_metrics(&tokens).unwrap();
    let report = build_report(&tokens, &m, &ReportConfig::default());
    assert_eq!(
        report
            .entries
            .iter()
            .map(|e| e.position)
            .collect::<Vec<_>>(),
        vec![3, 5, 6]
    );
    let expected = include_str!("fixtures/report_three_entries.txt");
    assert_eq!(render_text(&report), expected);
}

#[test]
fn ablated_sections_disappear() {
    let tokens = fixture();
    let m = sequence_metrics(&tokens).unwrap();
    let report = build_report(&tokens, &m, &ReportConfig::default());
    let none = render_text_with(
        &report,
        RenderOptions {
            alternatives: false,
            context: false,
        },
    );
    assert!(!none.contains("alts:"));
    assert!(!none.contains("ctx:"));
    assert!(none.contains("'clear' @5: 30.0% | H: 1.373 nats\n"));
    let ctx_only = render_text_with(
        &report,
        RenderOptions {
            alternatives: false,
            context: true,
        },
    );
    assert!(!ctx_only.contains("alts:") && ctx_only.contains("ctx:"));
}

#[test]
fn confident_sequence_has_no_entries() {
    let tokens: Vec<_> = (0..5)
        .map(|i| tok(i, " ok", 1.0, &[(" ok", 1.0)]))
        .collect();
    let m = sequence_metrics(&tokens).unwrap();
    let r = build_report(&tokens, &m, &ReportConfig::default());
    assert!(r.entries.is_empty());
    assert_eq!(r.global.perplexity, 1.0);
    assert!(!render_text(&r).contains("Uncertain tokens"));
}

#[test]
fn context_clips_at_edges() {
    let tokens = vec![
        tok(0, "a", 1.0, &[("a", 1.0)]),
        tok(1, "b", 0.3, &[("b", 0.3), ("c", 0.7)]),
        tok(2, "d", 1.0, &[("d", 1.0)]),
    ];
    let m = sequence_metrics(&tokens).unwrap();
    let r = build_report(&tokens, &m, &ReportConfig::default());
    assert_eq!(r.entries.len(), 1);
    assert_eq!(r.entries[0].context_before, vec!["a"]);
    assert_eq!(r.entries[0].context_after, vec!["d"]);
}

#[test]
fn cap_keeps_least_confident() {
    let tokens = fixture();
    let m = sequence_metrics(&tokens).unwrap();
    let cfg = ReportConfig {
        max_entries: Some(2),
        ..ReportConfig::default()
    };
    let r = build_report(&tokens, &m, &cfg);
    assert_eq!(
        r.entries.iter().map(|e| e.position).collect::<Vec<_>>(),
        vec![3, 5]
    );
}

fn sequence() -> impl Strategy<Value = Vec<TokenObservation>> {
    prop::collection::vec(prop::collection::vec(-6.0f64..0.0, 1..6), 1..30).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, mut lps)| {
                lps.sort_by(|a, b| b.total_cmp(a));
                TokenObservation {
                    position: i,
                    text: format!(" w{i}"),
                    logprob: lps[0],
                    alternatives: lps
                        .iter()
                        .enumerate()
                        .map(|(j, &l)| {
                            Alternative::new(
                                if j == 0 {
                                    format!(" w{i}")
                                } else {
                                    format!(" x{j}")
                                },
                                l,
                            )
                        })
                        .collect(),
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn selection_is_sound_and_complete(tokens in sequence(), p in 0.05f64..0.95, h in 0.0f64..1.6) {
        let m = sequence_metrics(&tokens).unwrap();
        let cfg = ReportConfig { low_conf_probability: p, entry_entropy_threshold: h, ..ReportConfig::default() };
        let r = build_report(&tokens, &m, &cfg);
        prop_assert!(r.entries.len() <= tokens.len());
        prop_assert!(r.entries.windows(2).all(|w| w[0].position < w[1].position));
        let scan: Vec<usize> = tokens
            .iter()
            .zip(&m.entropies)
            .filter(|(t, &e)| t.logprob.exp() < p || e > h)
            .map(|(t, _)| t.position)
            .collect();
        prop_assert_eq!(r.entries.iter().map(|e| e.position).collect::<Vec<_>>(), scan);
        for e in &r.entries {
            prop_assert!(r.qualifies(e.confidence, e.entropy));
            prop_assert!(e.context_before.len() <= 3 && e.context_after.len() <= 3);
        }
    }

    #[test]
    fn rendering_is_deterministic_and_round_trips(tokens in sequence()) {
        let m = sequence_metrics(&tokens).unwrap();
        let r = build_report(&tokens, &m, &ReportConfig::default());
        let copy = r.clone();
        prop_assert_eq!(render_text(&r), render_text(&copy));
        let back = parse_structured(&render_structured(&r)).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(render_text(&back), render_text(&r));
    }
}
