//! Stable probability primitives and the seed-derivation contract.
//!
//! All arithmetic is `f64`. Probabilities are clamped to [`PROB_FLOOR`]
//! before any logarithm so that `log(0)` never reaches a loss value.

use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance used when validating that a vector sums to one.
pub const SUM_TOL: f64 = 1e-9;

#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0).ln()
}

/// A probability vector over `M` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates entries in `[0, 1]` summing to one within [`SUM_TOL`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("probability vector is empty"));
        }
        if values
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0 + SUM_TOL)
        {
            return Err(invalid("probability entries must lie in [0, 1]"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn one_hot(m: usize, class: usize) -> Self {
        let mut v = vec![0.0; m];
        v[class] = 1.0;
        Self(v)
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Lowest index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid("softmax input contains a non-finite value"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(ProbVector(out))
}

/// Unchecked softmax writing into `out`; inputs must be finite.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `-Σ target_m · ln p_m` with `p` clamped.
pub fn cross_entropy(p: &[f64], target: &[f64]) -> Result<f64> {
    if p.len() != target.len() {
        return Err(invalid(format!(
            "cross_entropy length mismatch: {} vs {}",
            p.len(),
            target.len()
        )));
    }
    Ok(cross_entropy_unchecked(p, target))
}

pub(crate) fn cross_entropy_unchecked(p: &[f64], target: &[f64]) -> f64 {
    -p.iter()
        .zip(target)
        .map(|(pm, tm)| tm * clamped_ln(*pm))
        .sum::<f64>()
}

/// Shannon entropy in nats; `0 · ln 0` contributes zero.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|pm| **pm > 0.0)
        .map(|pm| pm * clamped_ln(*pm))
        .sum::<f64>()
}

/// Adds `ln prior` to each logit.
pub fn logit_adjust(logits: &[f64], prior: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != prior.len() {
        return Err(invalid(format!(
            "logit_adjust length mismatch: {} vs {}",
            logits.len(),
            prior.len()
        )));
    }
    if prior.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
        return Err(invalid(
            "class prior has a non-positive entry; smooth it before adjusting",
        ));
    }
    Ok(logits.iter().zip(prior).map(|(z, p)| z + p.ln()).collect())
}

/// Purpose of a random stream. Distinct purposes never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    Data,
    TestData,
    Partition,
    Noise,
    Selection,
    Shuffle,
    Detection,
    Custom(u64),
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Data => 2,
            Purpose::TestData => 3,
            Purpose::Partition => 4,
            Purpose::Noise => 5,
            Purpose::Selection => 6,
            Purpose::Shuffle => 7,
            Purpose::Detection => 8,
            Purpose::Custom(c) => 0x1000_0000_0000_0000 ^ c,
        }
    }
}

/// Experiment seed plus a derivation path `(round, client, purpose)`.
///
/// Streams are ChaCha8 seeded with a SplitMix64 hash of the full path, so a
/// client's randomness never depends on which thread runs it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    pub experiment_seed: u64,
    pub round: u64,
    pub client: u64,
    pub purpose: Purpose,
}

impl SeedSpec {
    pub fn new(experiment_seed: u64, purpose: Purpose) -> Self {
        Self {
            experiment_seed,
            round: 0,
            client: 0,
            purpose,
        }
    }

    pub fn round(mut self, round: usize) -> Self {
        self.round = round as u64;
        self
    }

    pub fn client(mut self, client: usize) -> Self {
        self.client = client as u64;
        self
    }

    pub fn purpose(mut self, purpose: Purpose) -> Self {
        self.purpose = purpose;
        self
    }

    pub fn derive(&self) -> u64 {
        let mut h = splitmix64(self.experiment_seed);
        for part in [self.round, self.client, self.purpose.code()] {
            h = splitmix64(h ^ part.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
        h
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive())
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
