//! Dirichlet-controlled label imbalance: local skew across clients and
//! global skew of the combined class sizes.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::labeldist::LabelDistribution;
use crate::seed::{derive_rng, SimRng};

/// Dirichlet concentration. `Alpha::INF` is the homogeneous limit and is
/// handled analytically (uniform proportions).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Alpha(f64);

impl Alpha {
    pub const INF: Alpha = Alpha(f64::INFINITY);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value <= 0.0 {
            return Err(Error::Parameter(format!("Dirichlet concentration must be > 0, got {value}")));
        }
        Ok(Alpha(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_inf(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_inf() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl std::str::FromStr for Alpha {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(Alpha::INF);
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::Parameter(format!("cannot parse concentration {s:?}")))?;
        Alpha::new(v)
    }
}

// Serialized as a number, or the string "inf" for the sentinel.
impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_inf() {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let parsed = match Raw::deserialize(deserializer)? {
            Raw::Num(v) if v.is_infinite() && v > 0.0 => Ok(Alpha::INF),
            Raw::Num(v) => Alpha::new(v),
            Raw::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha_local: Alpha,
    pub alpha_global: Alpha,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("partition.num_clients", "must be at least 1"));
        }
        Ok(())
    }
}

/// One client's slice of the training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub label_counts: Vec<u64>,
    pub sample_indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    pub fn label_distribution(&self) -> LabelDistribution {
        LabelDistribution::from_counts(&self.label_counts)
    }
}

/// Disjoint assignment of training samples to `M` clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    shards: Vec<ClientShard>,
    num_classes: usize,
}

impl Federation {
    /// Builds a federation after checking ids, label counts and disjointness
    /// against `train`.
    pub fn new(shards: Vec<ClientShard>, train: &Dataset) -> Result<Self> {
        let q = train.num_classes();
        let mut seen = HashSet::new();
        for (pos, shard) in shards.iter().enumerate() {
            if shard.client_id != pos {
                return Err(Error::Consistency(format!(
                    "shard at position {pos} carries client id {}",
                    shard.client_id
                )));
            }
            let mut counts = vec![0u64; q];
            for &i in &shard.sample_indices {
                let label = *train.labels().get(i).ok_or_else(|| {
                    Error::Consistency(format!("client {pos} references sample {i} beyond {}", train.len()))
                })?;
                counts[label] += 1;
                if !seen.insert(i) {
                    return Err(Error::Consistency(format!("sample {i} assigned to more than one client")));
                }
            }
            if counts != shard.label_counts {
                return Err(Error::Consistency(format!(
                    "client {pos} declares label counts {:?} but holds {counts:?}",
                    shard.label_counts
                )));
            }
        }
        Ok(Self { shards, num_classes: q })
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn shard(&self, client_id: usize) -> &ClientShard {
        &self.shards[client_id]
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn client_ids(&self) -> Vec<usize> {
        (0..self.shards.len()).collect()
    }

    pub fn client_totals(&self) -> Vec<usize> {
        self.shards.iter().map(ClientShard::len).collect()
    }

    pub fn total_label_counts(&self) -> Vec<u64> {
        let mut total = vec![0u64; self.num_classes];
        for s in &self.shards {
            for (t, c) in total.iter_mut().zip(&s.label_counts) {
                *t += c;
            }
        }
        total
    }

    /// One JSON object per client and line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for shard in &self.shards {
            let line = serde_json::to_string(shard).expect("shards always serialize");
            writeln!(out, "{line}").map_err(|e| Error::io("<federation>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, train: &Dataset) -> Result<Self> {
        let mut shards = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<federation>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let shard: ClientShard = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("federation line {}: {e}", n + 1)))?;
            shards.push(shard);
        }
        Self::new(shards, train)
    }
}

/// Shannon entropy (nats) of a count vector; zero for an empty vector.
pub fn label_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Draws a point on the `k`-simplex from a symmetric Dirichlet by
/// normalizing `k` Gamma(alpha, 1) variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: Alpha, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Parameter("Dirichlet dimension must be at least 1".into()));
    }
    if alpha.is_inf() {
        return Ok(vec![1.0 / k as f64; k]);
    }
    let gamma = Gamma::new(alpha.value(), 1.0)
        .map_err(|e| Error::Parameter(format!("Gamma({}, 1): {e}", alpha.value())))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        return Ok(draws.into_iter().map(|g| g / total).collect());
    }
    // every variate underflowed: the limit is a vertex of the simplex
    let mut vertex = vec![0.0; k];
    vertex[rng.random_range(0..k)] = 1.0;
    Ok(vertex)
}

/// Splits `n` items proportionally to `weights` with largest-remainder
/// rounding; ties in the remainder go to the lower index.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let uniform;
    let weights = if total > 0.0 {
        weights
    } else {
        uniform = vec![1.0; weights.len()];
        &uniform[..]
    };
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut leftover = n.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        shares[i] += 1;
        leftover -= 1;
    }
    shares
}

/// Deals every training sample to exactly one of `M` clients. Each client
/// draws class proportions `p_k ~ Dir(alpha_local)`; the samples of class `q`
/// are then split across clients proportionally to `p_k[q]`.
pub fn dirichlet_local_partition(train: &Dataset, cfg: &PartitionConfig) -> Result<Federation> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("cannot partition an empty training set".into()));
    }
    let m = cfg.num_clients;
    if m > train.len() {
        return Err(Error::Parameter(format!(
            "{m} clients requested for only {} samples",
            train.len()
        )));
    }
    let q = train.num_classes();
    let mut rng = derive_rng(cfg.seed, 0, "partition/local");
    let proportions: Vec<Vec<f64>> = (0..m)
        .map(|_| sample_dirichlet(cfg.alpha_local, q, &mut rng))
        .collect::<Result<_>>()?;

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (class, mut members) in train.indices_by_class().into_iter().enumerate() {
        members.shuffle(&mut rng);
        let column: Vec<f64> = proportions.iter().map(|p| p[class]).collect();
        let mut cursor = 0;
        for (client, share) in apportion(members.len(), &column).into_iter().enumerate() {
            assigned[client].extend_from_slice(&members[cursor..cursor + share]);
            cursor += share;
        }
    }

    let shards = assigned
        .into_iter()
        .enumerate()
        .map(|(client_id, mut sample_indices)| {
            sample_indices.sort_unstable();
            let mut label_counts = vec![0u64; q];
            for &i in &sample_indices {
                label_counts[train.labels()[i]] += 1;
            }
            ClientShard {
                client_id,
                label_counts,
                sample_indices,
            }
        })
        .collect();
    Ok(Federation { shards, num_classes: q })
}

/// Drops samples per class: with `p ~ Dir(alpha_global)`, class `q` keeps
/// `round(p_q / max(p) * n_q)` uniformly chosen samples.
pub fn apply_global_imbalance(train: &Dataset, cfg: &PartitionConfig) -> Result<Dataset> {
    if train.is_empty() {
        return Err(Error::Empty("cannot subsample an empty training set".into()));
    }
    if cfg.alpha_global.is_inf() {
        return Ok(train.clone());
    }
    let mut rng = derive_rng(cfg.seed, 0, "partition/global");
    let p = sample_dirichlet(cfg.alpha_global, train.num_classes(), &mut rng)?;
    subsample_by_proportions(train, &p, &mut rng)
}

/// Applies keep fractions `p_q / max(p)` to each class, keeping original
/// sample order.
pub fn subsample_by_proportions(train: &Dataset, p: &[f64], rng: &mut SimRng) -> Result<Dataset> {
    if p.len() != train.num_classes() {
        return Err(Error::Shape(format!(
            "{} proportions for {} classes",
            p.len(),
            train.num_classes()
        )));
    }
    let max = p.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::Parameter("keep proportions are all zero".into()));
    }
    let mut kept = Vec::new();
    for (class, mut members) in train.indices_by_class().into_iter().enumerate() {
        let keep = ((p[class] / max) * members.len() as f64).round() as usize;
        if keep == 0 && !members.is_empty() {
            log::warn!("global imbalance removed every sample of class {class}");
        }
        members.shuffle(rng);
        kept.extend_from_slice(&members[..keep.min(members.len())]);
    }
    kept.sort_unstable();
    Ok(train.subset(&kept))
}
