//! Label-distribution vectors, the two selection targets, simulated secure
//! aggregation, and cosine distance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Federation;
use crate::seed::derive_rng;

/// Public modulus of the masking field, the Mersenne prime 2^61 - 1.
pub const SECURE_AGG_PRIME: u64 = (1 << 61) - 1;

/// Non-negative per-class count vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Parameter(format!(
                "label distribution components must be finite and non-negative, got {bad}"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_counts(counts: &[u64]) -> Self {
        Self(counts.iter().map(|&c| c as f64).collect())
    }

    pub fn zeros(num_classes: usize) -> Self {
        Self(vec![0.0; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn add_assign(&mut self, other: &LabelDistribution) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn plus(&self, other: &LabelDistribution) -> LabelDistribution {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scaled(&self, factor: f64) -> LabelDistribution {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    /// Exact integer view; fails on fractional components.
    pub fn to_integer_counts(&self) -> Result<Vec<u64>> {
        self.0
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && v <= u64::MAX as f64 {
                    Ok(v as u64)
                } else {
                    Err(Error::Parameter(format!("component {v} is not an integer count")))
                }
            })
            .collect()
    }
}

/// All-ones target: every class equally represented.
pub fn target_balanced(num_classes: usize) -> Result<LabelDistribution> {
    if num_classes < 2 {
        return Err(Error::Parameter(format!("balanced target needs Q >= 2, got {num_classes}")));
    }
    Ok(LabelDistribution(vec![1.0; num_classes]))
}

/// Federation-wide label counts. With `secure_agg_seed` set the sum is
/// produced through [`secure_aggregate`] instead of summing in the clear;
/// both routes return the same vector.
pub fn target_real(federation: &Federation, secure_agg_seed: Option<u64>) -> Result<LabelDistribution> {
    let shares: Vec<LabelDistribution> = federation.shards().iter().map(|s| s.label_distribution()).collect();
    if shares.is_empty() {
        return Err(Error::Empty("federation has no clients".into()));
    }
    match secure_agg_seed {
        Some(seed) if shares.len() >= 2 => secure_aggregate(&shares, SECURE_AGG_PRIME, seed),
        _ => Ok(plain_sum(&shares)),
    }
}

pub fn plain_sum(shares: &[LabelDistribution]) -> LabelDistribution {
    let mut total = LabelDistribution::zeros(shares.first().map_or(0, |s| s.len()));
    for s in shares {
        total.add_assign(s);
    }
    total
}

/// What the server receives from one client: its counts plus pairwise
/// masks, reduced modulo the public prime.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedShare {
    pub client_id: usize,
    pub masked_counts: Vec<u64>,
}

fn pair_mask(seed: u64, i: usize, j: usize, len: usize, prime: u64) -> Vec<u64> {
    let mut rng = derive_rng(seed, 0, &format!("mask/{i}/{j}"));
    (0..len).map(|_| rng.random_range(0..prime)).collect()
}

/// Client side of the masking protocol. Client `i` adds `m_ij` for every
/// `j > i` and subtracts `m_ji` for every `j < i`, so all masks cancel in the
/// server's sum. Pair masks are derived from `(seed, i, j)`.
pub fn mask_shares(shares: &[LabelDistribution], prime: u64, seed: u64) -> Result<Vec<MaskedShare>> {
    let n = shares.len();
    if n < 2 {
        return Err(Error::SecureAggregation(format!(
            "masking needs at least 2 participants, got {n}"
        )));
    }
    if !(2..=SECURE_AGG_PRIME).contains(&prime) {
        return Err(Error::Parameter(format!("modulus {prime} outside 2..=2^61-1")));
    }
    let q = shares[0].len();
    let bound = prime / n as u64;
    let mut counts = Vec::with_capacity(n);
    for s in shares {
        if s.len() != q {
            return Err(Error::Shape(format!("share of length {} among shares of length {q}", s.len())));
        }
        let c = s.to_integer_counts()?;
        if let Some(&big) = c.iter().find(|&&v| v >= bound) {
            return Err(Error::SecureAggregation(format!(
                "count {big} may overflow the field (bound {bound} for {n} participants)"
            )));
        }
        counts.push(c);
    }

    let mut masked = counts;
    for i in 0..n {
        for j in (i + 1)..n {
            let mask = pair_mask(seed, i, j, q, prime);
            for (k, m) in mask.iter().enumerate() {
                // values stay below 2^61, so sums fit in u64
                masked[i][k] = (masked[i][k] + m) % prime;
                masked[j][k] = (masked[j][k] + prime - m) % prime;
            }
        }
    }
    Ok(masked
        .into_iter()
        .enumerate()
        .map(|(client_id, masked_counts)| MaskedShare { client_id, masked_counts })
        .collect())
}

/// Server side: sum of submissions modulo `prime`.
pub fn sum_masked(submissions: &[MaskedShare], prime: u64) -> Vec<u64> {
    let q = submissions.first().map_or(0, |s| s.masked_counts.len());
    let mut total = vec![0u64; q];
    for s in submissions {
        for (t, v) in total.iter_mut().zip(&s.masked_counts) {
            *t = (*t + v) % prime;
        }
    }
    total
}

/// Sums integer label distributions through pairwise additive masking.
/// The result equals the plain componentwise sum exactly.
pub fn secure_aggregate(shares: &[LabelDistribution], prime: u64, seed: u64) -> Result<LabelDistribution> {
    let submissions = mask_shares(shares, prime, seed)?;
    let total = sum_masked(&submissions, prime);
    Ok(LabelDistribution::from_counts(&total))
}

/// `1 - a.b / (|a| |b|)`; errors when either vector is zero.
pub fn cosine_distance(a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("distributions of length {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = (dot / (aa * bb).sqrt()).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}
