//! Offline analysis over accumulated runs: confidence calibration, entropy
//! histograms and the mix of trigger causes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::RunRecord;
use crate::trigger::CauseClass;

/// Entropy band cut points (nats); each band is lower-inclusive.
pub const LOW_BAND_UPPER: f64 = 0.5;
pub const MEDIUM_BAND_UPPER: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("confidence {0} is outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("bin edges must be strictly increasing from 0 to 1")]
    BadEdges,
    #[error("no samples")]
    Empty,
    #[error("negative entropy {0}")]
    NegativeEntropy(f64),
    #[error("bin width must be positive, got {0}")]
    BadBinWidth(f64),
}

/// A token's predicted confidence and whether it turned out correct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    /// Percent.
    pub lower: f64,
    /// Percent.
    pub upper: f64,
    /// Bin midpoint as a fraction.
    pub predicted_confidence: f64,
    /// `None` for an empty bin.
    pub actual_accuracy: Option<f64>,
    pub gap: f64,
    pub token_count: usize,
}

/// The five 20%-wide bins.
pub fn quintile_edges() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
}

pub fn uniform_edges(bins: usize) -> Vec<f64> {
    let n = bins.max(1);
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

fn validate_edges(edges: &[f64]) -> Result<(), CalibrationError> {
    let ok = edges.len() >= 2
        && edges[0] == 0.0
        && edges[edges.len() - 1] == 1.0
        && edges.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(CalibrationError::BadEdges)
    }
}

/// Bins are lower-inclusive / upper-exclusive, except the last which also
/// takes confidence 1.0.
pub fn bin_tokens(
    samples: &[CalibrationSample],
    edges: &[f64],
) -> Result<Vec<CalibrationBin>, CalibrationError> {
    validate_edges(edges)?;
    let n_bins = edges.len() - 1;
    let mut counts = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    for s in samples {
        if !(0.0..=1.0).contains(&s.confidence) {
            return Err(CalibrationError::ConfidenceOutOfRange(s.confidence));
        }
        let idx = (edges.partition_point(|&e| e <= s.confidence) - 1).min(n_bins - 1);
        counts[idx] += 1;
        correct[idx] += usize::from(s.correct);
    }
    Ok((0..n_bins)
        .map(|i| {
            let predicted = (edges[i] + edges[i + 1]) / 2.0;
            let actual = (counts[i] > 0).then(|| correct[i] as f64 / counts[i] as f64);
            CalibrationBin {
                lower: edges[i] * 100.0,
                upper: edges[i + 1] * 100.0,
                predicted_confidence: predicted,
                actual_accuracy: actual,
                gap: actual.map_or(0.0, |a| (predicted - a).abs()),
                token_count: counts[i],
            }
        })
        .collect())
}

/// Unweighted sum of per-bin gaps. This is how a table of per-bin "ECE
/// components" adds up to a single overall figure; it is not the standard
/// count-weighted ECE.
pub fn ece_unweighted(bins: &[CalibrationBin]) -> f64 {
    bins.iter().map(|b| b.gap).sum()
}

/// Standard ECE: per-bin gaps weighted by the share of samples in the bin.
pub fn ece_weighted(bins: &[CalibrationBin]) -> Result<f64, CalibrationError> {
    let total: usize = bins.iter().map(|b| b.token_count).sum();
    if total == 0 {
        return Err(CalibrationError::Empty);
    }
    Ok(bins
        .iter()
        .map(|b| b.token_count as f64 / total as f64 * b.gap)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandFractions {
    /// `[0, 0.5)` nats.
    pub low: f64,
    /// `[0.5, 1.0)` nats.
    pub medium: f64,
    /// `[1.0, ..)` nats.
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistogram {
    pub bin_width: f64,
    /// `counts[i]` covers `[i * bin_width, (i + 1) * bin_width)`.
    pub counts: Vec<usize>,
    pub total: usize,
    pub bands: BandFractions,
}

impl EntropyHistogram {
    pub fn bin_lower(&self, i: usize) -> f64 {
        i as f64 * self.bin_width
    }
}

pub fn entropy_histogram(
    entropies: &[f64],
    bin_width: f64,
) -> Result<EntropyHistogram, CalibrationError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(CalibrationError::BadBinWidth(bin_width));
    }
    if entropies.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if let Some(&bad) = entropies.iter().find(|h| !(**h >= 0.0)) {
        return Err(CalibrationError::NegativeEntropy(bad));
    }
    let mut counts: Vec<usize> = Vec::new();
    let (mut low, mut medium, mut high) = (0usize, 0usize, 0usize);
    for &h in entropies {
        let idx = (h / bin_width).floor() as usize;
        if idx >= counts.len() {
            counts.resize(idx + 1, 0);
        }
        counts[idx] += 1;
        // bands come from raw values so they do not depend on bin_width
        if h < LOW_BAND_UPPER {
            low += 1;
        } else if h < MEDIUM_BAND_UPPER {
            medium += 1;
        } else {
            high += 1;
        }
    }
    let n = entropies.len() as f64;
    Ok(EntropyHistogram {
        bin_width,
        counts,
        total: entropies.len(),
        bands: BandFractions {
            low: low as f64 / n,
            medium: medium as f64 / n,
            high: high as f64 / n,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerMix {
    pub records: usize,
    pub triggered: usize,
    /// True when nothing triggered; all fractions are then zero.
    pub empty: bool,
    /// Fraction of triggered records per cause (never includes `none`).
    pub fractions: BTreeMap<CauseClass, f64>,
}

/// Cause mix over the records whose trigger fired.
pub fn trigger_mix(records: &[RunRecord]) -> Result<TriggerMix, CalibrationError> {
    if records.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let causes: Vec<CauseClass> = records
        .iter()
        .filter(|r| r.decision.refine)
        .map(|r| r.decision.cause_class)
        .collect();
    let mut fractions: BTreeMap<CauseClass, f64> = CauseClass::ALL
        .into_iter()
        .filter(|c| *c != CauseClass::None)
        .map(|c| (c, 0.0))
        .collect();
    for c in &causes {
        *fractions.entry(*c).or_default() += 1.0 / causes.len() as f64;
    }
    Ok(TriggerMix {
        records: records.len(),
        triggered: causes.len(),
        empty: causes.is_empty(),
        fractions,
    })
}
