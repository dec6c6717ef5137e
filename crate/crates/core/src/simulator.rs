//! Synthetic token streams with a controlled entropy profile.
//!
//! Each position draws a mixture component, jitters its target entropy within
//! the component's spread, and builds a k-way distribution hitting that
//! entropy by mixing a point mass with the uniform distribution.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Alternative, TokenObservation};

/// Bisection stops once the entropy is this close to the target (nats).
pub const ENTROPY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("target entropy {target} is outside [0, ln {k}]")]
    UnreachableEntropy { target: f64, k: usize },
    #[error("top_k must be at least 1")]
    ZeroK,
    #[error("mixture weights must be non-negative and sum to 1 (got {0})")]
    BadWeights(f64),
    #[error("profile has no components")]
    NoComponents,
    #[error("bad sequence length: {0}")]
    BadLength(String),
    #[error("spread must be non-negative, got {0}")]
    BadSpread(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    /// Nats.
    pub target_entropy: f64,
    /// Half-width of the uniform jitter around the target (nats).
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SequenceLength {
    Fixed { tokens: usize },
    Uniform { min: usize, max: usize },
}

impl SequenceLength {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            SequenceLength::Fixed { tokens } => tokens,
            SequenceLength::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub components: Vec<MixtureComponent>,
    pub length: SequenceLength,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SyntheticProfile {
    /// Bimodal mix: confident tokens around 0.2 nats, a thin middle band, and
    /// an uncertain mode around 1.3 nats.
    fn default() -> Self {
        Self {
            components: vec![
                MixtureComponent {
                    weight: 0.71,
                    target_entropy: 0.2,
                    spread: 0.15,
                },
                MixtureComponent {
                    weight: 0.11,
                    target_entropy: 0.75,
                    spread: 0.2,
                },
                MixtureComponent {
                    weight: 0.18,
                    target_entropy: 1.3,
                    spread: 0.25,
                },
            ],
            length: SequenceLength::Fixed { tokens: 50_000 },
            top_k: 5,
            seed: 42,
        }
    }
}

impl SyntheticProfile {
    pub fn single(
        target_entropy: f64,
        spread: f64,
        tokens: usize,
        top_k: usize,
        seed: u64,
    ) -> Self {
        Self {
            components: vec![MixtureComponent {
                weight: 1.0,
                target_entropy,
                spread,
            }],
            length: SequenceLength::Fixed { tokens },
            top_k,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.top_k == 0 {
            return Err(SimulationError::ZeroK);
        }
        if self.components.is_empty() {
            return Err(SimulationError::NoComponents);
        }
        let ceiling = (self.top_k as f64).ln();
        let mut total = 0.0;
        for c in &self.components {
            if !(c.weight >= 0.0) {
                return Err(SimulationError::BadWeights(c.weight));
            }
            if !(c.spread >= 0.0) {
                return Err(SimulationError::BadSpread(c.spread));
            }
            if !(0.0..=ceiling).contains(&c.target_entropy) {
                return Err(SimulationError::UnreachableEntropy {
                    target: c.target_entropy,
                    k: self.top_k,
                });
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(SimulationError::BadWeights(total));
        }
        match self.length {
            SequenceLength::Fixed { tokens: 0 } => {
                Err(SimulationError::BadLength("zero tokens".into()))
            }
            SequenceLength::Uniform { min, max } if min == 0 || min > max => {
                Err(SimulationError::BadLength(format!("uniform {min}..={max}")))
            }
            _ => Ok(()),
        }
    }
}

fn mixture_entropy(lambda: f64, k: usize) -> f64 {
    let kf = k as f64;
    let head = 1.0 - lambda * (kf - 1.0) / kf;
    let tail = lambda / kf;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(head) + (kf - 1.0) * term(tail)
}

/// `lambda * uniform + (1 - lambda) * point_mass`, with `lambda` found by
/// bisection so the entropy matches `target`. Entry 0 carries the point mass.
pub fn entropy_to_distribution(target: f64, k: usize) -> Result<Vec<f64>, SimulationError> {
    if k == 0 {
        return Err(SimulationError::ZeroK);
    }
    let ceiling = (k as f64).ln();
    if !(0.0..=ceiling).contains(&target) {
        return Err(SimulationError::UnreachableEntropy { target, k });
    }
    let lambda = if target == 0.0 {
        0.0
    } else if target == ceiling {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let h = mixture_entropy(mid, k);
            if (h - target).abs() <= ENTROPY_TOLERANCE {
                lo = mid;
                hi = mid;
                break;
            }
            if h < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let kf = k as f64;
    let mut p = vec![lambda / kf; k];
    p[0] = 1.0 - lambda * (kf - 1.0) / kf;
    Ok(p)
}

fn sample_position(
    profile: &SyntheticProfile,
    picker: &WeightedIndex<f64>,
    position: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TokenObservation, SimulationError> {
    let k = profile.top_k;
    let ceiling = (k as f64).ln();
    let c = &profile.components[picker.sample(rng)];
    let jitter = if c.spread > 0.0 {
        rng.random_range(-c.spread..=c.spread)
    } else {
        0.0
    };
    let target = (c.target_entropy + jitter).clamp(0.0, ceiling);
    let probs = entropy_to_distribution(target, k)?;
    let chosen = WeightedIndex::new(&probs)
        .expect("distribution has positive mass")
        .sample(rng);
    let alternatives: Vec<Alternative> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(j, &p)| Alternative::new(format!(" tok{j}"), p.ln()))
        .collect();
    Ok(TokenObservation {
        position,
        text: format!(" tok{chosen}"),
        logprob: probs[chosen].ln(),
        alternatives,
    })
}

fn sample_with(
    profile: &SyntheticProfile,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenObservation>, SimulationError> {
    profile.validate()?;
    let weights: Vec<f64> = profile.components.iter().map(|c| c.weight).collect();
    let picker = WeightedIndex::new(&weights).map_err(|_| SimulationError::BadWeights(0.0))?;
    let n = profile.length.sample(rng);
    (0..n)
        .map(|i| sample_position(profile, &picker, i, rng))
        .collect()
}

/// One stream, fully determined by `profile.seed`.
pub fn sample_stream(profile: &SyntheticProfile) -> Result<Vec<TokenObservation>, SimulationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    sample_with(profile, &mut rng)
}

/// `count` independent sequences. Sequence `i` uses stream `i` of the seeded
/// generator, so the output does not depend on how the work is split.
pub fn sample_sequences(
    profile: &SyntheticProfile,
    count: usize,
) -> Result<Vec<Vec<TokenObservation>>, SimulationError> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
            rng.set_stream(i as u64 + 1);
            sample_with(profile, &mut rng)
        })
        .collect()
}
