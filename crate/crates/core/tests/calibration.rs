//! Calibration bins, both ECE variants, entropy histograms and trigger mix.

use proptest::prelude::*;
use uncertainty_loop::backend::ScriptedBackend;
use uncertainty_loop::calibration::{
    bin_tokens, ece_unweighted, ece_weighted, entropy_histogram, quintile_edges, trigger_mix,
    uniform_edges, CalibrationError, CalibrationSample,
};
use uncertainty_loop::orchestrator::run_batch;
use uncertainty_loop::scenarios;
use uncertainty_loop::{CauseClass, LoopConfig};

/// Published calibration table: (predicted, actual accuracy, gap, token count).
const TABLE: [(f64, f64, f64, usize); 5] = [
    (0.10, 0.087, 0.013, 1247),
    (0.30, 0.314, 0.014, 3892),
    (0.50, 0.483, 0.017, 8431),
    (0.70, 0.726, 0.026, 15238),
    (0.90, 0.918, 0.018, 21192),
];

/// Synthetic samples with the table's per-bin counts and (rounded) accuracies.
fn table_samples() -> Vec<CalibrationSample> {
    let mut out = Vec::new();
    for (b, &(_, acc, _, n)) in TABLE.iter().enumerate() {
        let lower = 0.2 * b as f64;
        let correct = (acc * n as f64).round() as usize;
        for j in 0..n {
            out.push(CalibrationSample {
                confidence: lower + 0.2 * (j as f64 + 0.5) / n as f64,
                correct: j < correct,
            });
        }
    }
    out
}

/// Count-weighted mean of the table's gap column, computed straight from the table.
fn weighted_oracle() -> f64 {
    let total: usize = TABLE.iter().map(|r| r.3).sum();
    TABLE
        .iter()
        .map(|&(_, _, gap, n)| gap * n as f64)
        .sum::<f64>()
        / total as f64
}

#[test]
fn table_reconstruction() {
    let samples = table_samples();
    assert_eq!(samples.len(), 50_000);
    let bins = bin_tokens(&samples, &quintile_edges()).unwrap();
    for (bin, &(pred, acc, gap, n)) in bins.iter().zip(&TABLE) {
        assert_eq!(bin.token_count, n);
        assert!((bin.predicted_confidence - pred).abs() < 1e-12);
        assert!((bin.actual_accuracy.unwrap() - acc).abs() < 5e-4, "{bin:?}");
        assert!((bin.gap - gap).abs() < 5e-4, "{bin:?}");
    }
    let unweighted = ece_unweighted(&bins);
    assert!((unweighted - 0.088).abs() <= 0.001, "{unweighted}");
    let weighted = ece_weighted(&bins).unwrap();
    assert!((weighted_oracle() - 0.0198).abs() <= 0.0005);
    assert!((weighted - weighted_oracle()).abs() <= 0.0005, "{weighted}");
    assert!((weighted - 0.0198).abs() <= 0.0005, "{weighted}");
}

#[test]
fn ece_arithmetic() {
    let s = |c: f64, ok: bool| CalibrationSample {
        confidence: c,
        correct: ok,
    };
    // predicted 0.5, 4 of 10 correct
    let one: Vec<_> = (0..10).map(|i| s(0.5, i < 4)).collect();
    let bins = bin_tokens(&one, &uniform_edges(1)).unwrap();
    assert!((ece_unweighted(&bins) - 0.1).abs() < 1e-12);
    assert!((ece_weighted(&bins).unwrap() - 0.1).abs() < 1e-12);
    // two equal-count bins, gaps 0.0 and 0.1
    let mut two: Vec<_> = (0..20).map(|i| s(0.25, i < 5)).collect();
    two.extend((0..20).map(|i| s(0.75, i < 13)));
    let bins = bin_tokens(&two, &uniform_edges(2)).unwrap();
    assert!((ece_weighted(&bins).unwrap() - 0.05).abs() < 1e-12);
    // perfectly calibrated
    let perfect: Vec<_> = (0..10).map(|i| s(0.5, i < 5)).collect();
    assert_eq!(
        ece_unweighted(&bin_tokens(&perfect, &uniform_edges(1)).unwrap()),
        0.0
    );
    assert_eq!(
        ece_weighted(&bin_tokens(&[], &quintile_edges()).unwrap()),
        Err(CalibrationError::Empty)
    );
    assert!(matches!(
        bin_tokens(&[s(1.2, true)], &quintile_edges()),
        Err(CalibrationError::ConfidenceOutOfRange(_))
    ));
    assert_eq!(
        bin_tokens(&[s(0.5, true)], &[0.0, 0.6, 0.5, 1.0]),
        Err(CalibrationError::BadEdges)
    );
}

#[test]
fn histogram_edges_and_errors() {
    let h = entropy_histogram(&[0.0; 7], 0.1).unwrap();
    assert_eq!((h.bands.low, h.bands.medium, h.bands.high), (1.0, 0.0, 0.0));
    let h = entropy_histogram(&[0.5, 1.0, 0.49], 0.25).unwrap();
    assert_eq!(h.counts, vec![0, 1, 1, 0, 1]);
    assert!((h.bands.low - 1.0 / 3.0).abs() < 1e-15);
    assert!((h.bands.medium - 1.0 / 3.0).abs() < 1e-15);
    assert!((h.bands.high - 1.0 / 3.0).abs() < 1e-15);
    assert!(matches!(
        entropy_histogram(&[-0.1], 0.1),
        Err(CalibrationError::NegativeEntropy(_))
    ));
    assert!(matches!(
        entropy_histogram(&[0.1], 0.0),
        Err(CalibrationError::BadBinWidth(_))
    ));
    assert_eq!(entropy_histogram(&[], 0.1), Err(CalibrationError::Empty));
}

#[test]
fn trigger_mix_over_the_batch() {
    let queries = scenarios::batch16_queries();
    let backend = ScriptedBackend::new(scenarios::batch16()).unwrap();
    let records: Vec<_> = run_batch(&queries, &LoopConfig::default(), &backend, 4)
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let mix = trigger_mix(&records).unwrap();
    assert_eq!((mix.records, mix.triggered, mix.empty), (16, 5, false));
    assert_eq!(mix.fractions[&CauseClass::GlobalConfusion], 0.2);
    assert_eq!(mix.fractions[&CauseClass::CriticalDecision], 0.2);
    assert_eq!(mix.fractions[&CauseClass::Distributed], 0.2);
    assert_eq!(mix.fractions[&CauseClass::MultiSignal], 0.4);
    assert!((mix.fractions.values().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(!mix.fractions.contains_key(&CauseClass::None));

    let calm: Vec<_> = records
        .iter()
        .filter(|r| !r.decision.refine)
        .cloned()
        .collect();
    let mix = trigger_mix(&calm).unwrap();
    assert!(mix.empty);
    assert_eq!(mix.triggered, 0);
    assert!(mix.fractions.values().all(|&f| f == 0.0));
    assert_eq!(trigger_mix(&[]), Err(CalibrationError::Empty));
}

fn samples() -> impl Strategy<Value = Vec<CalibrationSample>> {
    prop::collection::vec(
        (0.0f64..=1.0, any::<bool>()).prop_map(|(confidence, correct)| CalibrationSample {
            confidence,
            correct,
        }),
        1..400,
    )
}

proptest! {
    #[test]
    fn binning_matches_a_linear_scan(s in samples(), bins in 1usize..12) {
        let edges = uniform_edges(bins);
        let got = bin_tokens(&s, &edges).unwrap();
        prop_assert_eq!(got.iter().map(|b| b.token_count).sum::<usize>(), s.len());
        let mut counts = vec![0usize; bins];
        let mut correct = vec![0usize; bins];
        for x in &s {
            let mut idx = bins - 1;
            for b in 0..bins {
                if edges[b] <= x.confidence && x.confidence < edges[b + 1] {
                    idx = b;
                    break;
                }
            }
            counts[idx] += 1;
            correct[idx] += usize::from(x.correct);
        }
        for (b, bin) in got.iter().enumerate() {
            prop_assert_eq!(bin.token_count, counts[b]);
            let acc = (counts[b] > 0).then(|| correct[b] as f64 / counts[b] as f64);
            prop_assert_eq!(bin.actual_accuracy, acc);
            prop_assert!(bin.gap >= 0.0);
            prop_assert!((bin.lower - 100.0 * edges[b]).abs() < 1e-9 && (bin.upper - 100.0 * edges[b + 1]).abs() < 1e-9);
        }
        let max_gap = got.iter().map(|b| b.gap).fold(0.0, f64::max);
        prop_assert!(ece_weighted(&got).unwrap() <= max_gap + 1e-12);
        prop_assert!(ece_unweighted(&got) <= bins as f64 * max_gap + 1e-12);
    }

    #[test]
    fn histogram_scan_and_band_invariance(e in prop::collection::vec(0.0f64..2.5, 1..500), shift in 2u32..6) {
        let width = 0.5f64.powi(shift as i32);
        let h = entropy_histogram(&e, width).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>(), e.len());
        for (i, &c) in h.counts.iter().enumerate() {
            let lo = i as f64 * width;
            let scan = e.iter().filter(|&&x| lo <= x && x < lo + width).count();
            prop_assert_eq!(c, scan);
        }
        let b = h.bands;
        prop_assert!((b.low + b.medium + b.high - 1.0).abs() < 1e-9);
        let fine = entropy_histogram(&e, width / 8.0).unwrap();
        prop_assert_eq!(fine.bands, h.bands);
    }
}
