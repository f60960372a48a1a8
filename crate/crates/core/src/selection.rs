//! Per-round client selection: a uniform base draw, then optional
//! augmentation that pulls the active label distribution toward a target.

use std::cmp::Ordering;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeldist::{cosine_distance, plain_sum, secure_aggregate, LabelDistribution, SECURE_AGG_PRIME};
use crate::partition::Federation;
use crate::seed::{derive_seed, SimRng};

/// Maximum number of subsets the exhaustive search will score.
pub const EXHAUSTIVE_BUDGET: u128 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetKind {
    Real,
    Balanced,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectionMode {
    Greedy,
    Exhaustive,
    RandomAugment,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Base clients drawn uniformly each round.
    pub m: usize,
    /// Upper bound on clients added by augmentation.
    pub m_dc: usize,
    pub target: TargetKind,
    pub mode: SelectionMode,
    /// Compute the active distribution through masked aggregation.
    pub secure_agg: bool,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("selection.m", "must be at least 1"));
        }
        let needs_target = matches!(self.mode, SelectionMode::Greedy | SelectionMode::Exhaustive);
        if needs_target && self.target == TargetKind::None {
            return Err(Error::config(
                "selection.target",
                "greedy and exhaustive selection need a Real or Balanced target",
            ));
        }
        Ok(())
    }

    /// Clients added on top of the base draw in this configuration.
    pub fn effective_m_dc(&self) -> usize {
        match self.mode {
            SelectionMode::None => 0,
            _ => self.m_dc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `m_dc` clients were added.
    Budget,
    /// No candidate strictly reduced the distance.
    NoImprovement,
    /// Every client is already active.
    NoCandidates,
    /// No augmentation was requested.
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub client: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub base: Vec<usize>,
    pub added: Vec<usize>,
    /// Distance of the base set to the target, when defined.
    pub initial_distance: Option<f64>,
    /// Distance of the final active set to the target, when defined.
    pub achieved_distance: Option<f64>,
    pub trace: Vec<SelectionStep>,
    pub stop: StopReason,
}

impl SelectionOutcome {
    fn unchanged(base: &[usize], distance: Option<f64>, stop: StopReason) -> Self {
        Self {
            base: base.to_vec(),
            added: Vec::new(),
            initial_distance: distance,
            achieved_distance: distance,
            trace: Vec::new(),
            stop,
        }
    }

    /// Base and added clients, in selection order.
    pub fn active_set(&self) -> Vec<usize> {
        self.base.iter().chain(&self.added).copied().collect()
    }
}

/// Uniform sample of `m` distinct ids, returned sorted.
pub fn random_select(all_clients: &[usize], m: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    if m > all_clients.len() {
        return Err(Error::Parameter(format!(
            "cannot select {m} clients out of {}",
            all_clients.len()
        )));
    }
    let mut chosen: Vec<usize> = all_clients.choose_multiple(rng, m).copied().collect();
    chosen.sort_unstable();
    Ok(chosen)
}

fn inactive_clients(active: &[usize], num_clients: usize) -> Result<Vec<usize>> {
    let mut is_active = vec![false; num_clients];
    for &c in active {
        let slot = is_active
            .get_mut(c)
            .ok_or_else(|| Error::Parameter(format!("client {c} is not part of the federation")))?;
        if *slot {
            return Err(Error::Parameter(format!("client {c} listed twice in the active set")));
        }
        *slot = true;
    }
    Ok((0..num_clients).filter(|&c| !is_active[c]).collect())
}

/// Distance to target, with an all-zero active distribution treated as
/// infinitely far (any non-empty candidate improves on it).
fn distance_or_inf(v: &LabelDistribution, target: &LabelDistribution) -> Result<f64> {
    match cosine_distance(v, target) {
        Err(Error::ZeroVector) if v.is_zero() && !target.is_zero() => Ok(f64::INFINITY),
        other => other,
    }
}

fn defined_distance(v: &LabelDistribution, target: &LabelDistribution) -> Option<f64> {
    cosine_distance(v, target).ok()
}

fn check_target(federation: &Federation, target: &LabelDistribution) -> Result<()> {
    if target.len() != federation.num_classes() {
        return Err(Error::Shape(format!(
            "target has {} classes, federation {}",
            target.len(),
            federation.num_classes()
        )));
    }
    if target.is_zero() {
        return Err(Error::ZeroVector);
    }
    Ok(())
}

/// Label distribution of the active set. With `mask_seed` and at least two
/// members the sum goes through masked aggregation.
pub fn active_distribution(active: &[usize], federation: &Federation, mask_seed: Option<u64>) -> Result<LabelDistribution> {
    let shares: Vec<LabelDistribution> = active.iter().map(|&c| federation.shard(c).label_distribution()).collect();
    if shares.is_empty() {
        return Ok(LabelDistribution::zeros(federation.num_classes()));
    }
    match mask_seed {
        Some(seed) if shares.len() >= 2 => secure_aggregate(&shares, SECURE_AGG_PRIME, seed),
        _ => Ok(plain_sum(&shares)),
    }
}

/// Greedy augmentation. Each step adds the inactive client whose counts,
/// added to the current active distribution, give the smallest cosine
/// distance to `target`; ties go to the lowest id. Stops after `m_dc`
/// additions or as soon as the best candidate does not strictly improve.
pub fn greedy_dc_select(
    active: &[usize],
    federation: &Federation,
    target: &LabelDistribution,
    m_dc: usize,
    mask_seed: Option<u64>,
) -> Result<SelectionOutcome> {
    check_target(federation, target)?;
    if active.is_empty() {
        return Err(Error::Empty("greedy selection needs a non-empty base set".into()));
    }
    let mut inactive = inactive_clients(active, federation.num_clients())?;
    let mut members = active.to_vec();

    let step_seed = |step: usize| mask_seed.map(|s| derive_seed(s, step as u64, "greedy"));
    let mut v_active = active_distribution(&members, federation, step_seed(0))?;
    let initial = distance_or_inf(&v_active, target)?;
    let mut current = initial;
    let mut trace = Vec::new();
    let mut stop = StopReason::Budget;

    for step in 0..m_dc {
        if inactive.is_empty() {
            stop = StopReason::NoCandidates;
            break;
        }
        let best = inactive
            .iter()
            .enumerate()
            .filter_map(|(pos, &c)| {
                let combined = v_active.plus(&federation.shard(c).label_distribution());
                cosine_distance(&combined, target).ok().map(|d| (d, c, pos))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match best {
            Some((d, c, pos)) if d < current => {
                inactive.remove(pos);
                members.push(c);
                trace.push(SelectionStep { client: c, distance: d });
                current = d;
                v_active = active_distribution(&members, federation, step_seed(step + 1))?;
            }
            _ => {
                stop = StopReason::NoImprovement;
                break;
            }
        }
    }

    let added: Vec<usize> = trace.iter().map(|s| s.client).collect();
    let finite = |d: f64| d.is_finite().then_some(d);
    Ok(SelectionOutcome {
        base: active.to_vec(),
        added,
        initial_distance: finite(initial),
        achieved_distance: finite(current),
        trace,
        stop,
    })
}

/// Number of subsets of size `0..=k` drawn from `n` items, saturating.
pub fn subset_count(n: usize, k: usize) -> u128 {
    let mut total: u128 = 0;
    let mut binom: u128 = 1;
    for s in 0..=k.min(n) {
        total = total.saturating_add(binom);
        binom = binom.saturating_mul((n - s) as u128) / (s as u128 + 1);
    }
    total
}

pub fn exhaustive_dc_select(
    active: &[usize],
    federation: &Federation,
    target: &LabelDistribution,
    m_dc: usize,
) -> Result<SelectionOutcome> {
    exhaustive_dc_select_with_budget(active, federation, target, m_dc, EXHAUSTIVE_BUDGET)
}

/// Scores every subset of inactive clients of size `0..=m_dc` and keeps the
/// one whose combined distribution is closest to `target`. Ties prefer the
/// smaller subset, then lexicographically smaller client ids.
pub fn exhaustive_dc_select_with_budget(
    active: &[usize],
    federation: &Federation,
    target: &LabelDistribution,
    m_dc: usize,
    budget: u128,
) -> Result<SelectionOutcome> {
    check_target(federation, target)?;
    if active.is_empty() {
        return Err(Error::Empty("exhaustive selection needs a non-empty base set".into()));
    }
    let inactive = inactive_clients(active, federation.num_clients())?;
    let subsets = subset_count(inactive.len(), m_dc);
    if subsets > budget {
        return Err(Error::SearchBudget { subsets, budget });
    }
    let v_active = active_distribution(active, federation, None)?;
    let initial = distance_or_inf(&v_active, target)?;
    let candidates: Vec<LabelDistribution> = inactive.iter().map(|&c| federation.shard(c).label_distribution()).collect();

    let mut best_distance = initial;
    let mut best_subset: Vec<usize> = Vec::new();
    let mut combo: Vec<usize> = Vec::with_capacity(m_dc);
    for size in 1..=m_dc.min(inactive.len()) {
        combo.clear();
        combo.extend(0..size);
        loop {
            let mut combined = v_active.clone();
            for &i in &combo {
                combined.add_assign(&candidates[i]);
            }
            if let Ok(d) = cosine_distance(&combined, target) {
                // enumeration runs by size, then lexicographically, so only a
                // strictly smaller distance may replace the incumbent
                if d.total_cmp(&best_distance) == Ordering::Less {
                    best_distance = d;
                    best_subset = combo.iter().map(|&i| inactive[i]).collect();
                }
            }
            if !next_combination(&mut combo, inactive.len()) {
                break;
            }
        }
    }

    let finite = |d: f64| d.is_finite().then_some(d);
    let stop = if inactive.is_empty() && m_dc > 0 {
        StopReason::NoCandidates
    } else if best_subset.len() < m_dc {
        StopReason::NoImprovement
    } else {
        StopReason::Budget
    };
    // the trace reports the distance reached by the whole subset
    let trace = best_subset
        .last()
        .map(|&c| vec![SelectionStep { client: c, distance: best_distance }])
        .unwrap_or_default();
    Ok(SelectionOutcome {
        base: active.to_vec(),
        added: best_subset,
        initial_distance: finite(initial),
        achieved_distance: finite(best_distance),
        trace,
        stop,
    })
}

/// Advances `combo` (strictly increasing indices below `n`) to the next
/// combination in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in (i + 1)..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Ablation: appends exactly `m_dc` uniformly drawn inactive clients. The
/// distance to `target` is recorded when one is given, never optimized.
pub fn random_augment(
    active: &[usize],
    federation: &Federation,
    m_dc: usize,
    target: Option<&LabelDistribution>,
    rng: &mut SimRng,
) -> Result<SelectionOutcome> {
    let distance_of = |members: &[usize]| -> Result<Option<f64>> {
        Ok(match target {
            Some(t) => defined_distance(&active_distribution(members, federation, None)?, t),
            None => None,
        })
    };
    let initial = distance_of(active)?;
    if m_dc == 0 {
        return Ok(SelectionOutcome::unchanged(active, initial, StopReason::Skipped));
    }
    let inactive = inactive_clients(active, federation.num_clients())?;
    if inactive.is_empty() {
        return Err(Error::Parameter("random augmentation has no inactive clients to draw from".into()));
    }
    if m_dc > inactive.len() {
        return Err(Error::Parameter(format!(
            "cannot add {m_dc} clients, only {} inactive",
            inactive.len()
        )));
    }
    let mut added: Vec<usize> = inactive.choose_multiple(rng, m_dc).copied().collect();
    added.shuffle(rng);
    let mut members = active.to_vec();
    let mut trace = Vec::with_capacity(m_dc);
    for &c in &added {
        members.push(c);
        if let Some(d) = distance_of(&members)? {
            trace.push(SelectionStep { client: c, distance: d });
        }
    }
    let achieved = distance_of(&members)?;
    Ok(SelectionOutcome {
        base: active.to_vec(),
        added,
        initial_distance: initial,
        achieved_distance: achieved,
        trace,
        stop: StopReason::Budget,
    })
}

/// Outcome for rounds without augmentation.
pub fn no_augmentation(active: &[usize], federation: &Federation, target: Option<&LabelDistribution>) -> Result<SelectionOutcome> {
    let distance = match target {
        Some(t) => defined_distance(&active_distribution(active, federation, None)?, t),
        None => None,
    };
    Ok(SelectionOutcome::unchanged(active, distance, StopReason::Skipped))
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use rand::Rng;

    use super::*;
    use crate::dataset::Dataset;
    use crate::partition::ClientShard;
    use crate::seed::rng_from_seed;

    /// Federation whose clients hold exactly the given label counts.
    pub(crate) fn federation_from_counts(counts: &[Vec<u64>]) -> Federation {
        let q = counts[0].len();
        let mut labels = Vec::new();
        let mut shards = Vec::new();
        for (id, c) in counts.iter().enumerate() {
            let start = labels.len();
            for (class, &n) in c.iter().enumerate() {
                labels.extend(std::iter::repeat_n(class, n as usize));
            }
            shards.push(ClientShard {
                client_id: id,
                label_counts: c.clone(),
                sample_indices: (start..labels.len()).collect(),
            });
        }
        let train = Dataset::new(Array2::zeros((labels.len(), 1)), labels, q.max(2)).unwrap();
        Federation::new(shards, &train).unwrap()
    }

    fn ld(v: &[u64]) -> LabelDistribution {
        LabelDistribution::from_counts(v)
    }

    #[test]
    fn random_select_full_and_deterministic() {
        let all: Vec<usize> = (0..100).collect();
        assert_eq!(random_select(&all, 100, &mut rng_from_seed(1)).unwrap(), all);
        let a = random_select(&all, 10, &mut rng_from_seed(5)).unwrap();
        let b = random_select(&all, 10, &mut rng_from_seed(5)).unwrap();
        assert_eq!(a, b);
        assert!(random_select(&all, 101, &mut rng_from_seed(5)).is_err());
    }

    #[test]
    fn random_select_is_uniform() {
        let all: Vec<usize> = (0..100).collect();
        let mut hits = vec![0u32; 100];
        let trials = 10_000;
        for seed in 0..trials {
            let mut rng = crate::seed::derive_rng(seed, 0, "select");
            for c in random_select(&all, 10, &mut rng).unwrap() {
                hits[c] += 1;
            }
        }
        for h in hits {
            let f = f64::from(h) / trials as f64;
            assert!((f - 0.10).abs() <= 0.01, "frequency {f}");
        }
    }

    #[test]
    fn greedy_picks_colinear_completion() {
        // client 0 active with [3,1]; A=[0,2] (id 1), B=[1,0] (id 2)
        let fed = federation_from_counts(&[vec![3, 1], vec![0, 2], vec![1, 0]]);
        let out = greedy_dc_select(&[0], &fed, &ld(&[1, 1]), 1, None).unwrap();
        assert_eq!(out.added, vec![1]);
        assert_eq!(out.achieved_distance, Some(0.0));
    }

    #[test]
    fn greedy_stops_when_already_aligned() {
        let fed = federation_from_counts(&[vec![2, 2], vec![3, 0], vec![0, 1]]);
        let out = greedy_dc_select(&[0], &fed, &ld(&[1, 1]), 2, None).unwrap();
        assert!(out.added.is_empty());
        assert_eq!(out.stop, StopReason::NoImprovement);
        assert_eq!(out.achieved_distance, Some(0.0));
    }

    #[test]
    fn greedy_exact_tie_goes_to_lowest_id() {
        let fed = federation_from_counts(&[vec![4, 1], vec![0, 3], vec![0, 3]]);
        let out = greedy_dc_select(&[0], &fed, &ld(&[1, 1]), 1, None).unwrap();
        assert_eq!(out.added, vec![1]);
    }

    #[test]
    fn greedy_reports_no_candidates() {
        let fed = federation_from_counts(&[vec![1, 3], vec![3, 1]]);
        let out = greedy_dc_select(&[0, 1], &fed, &ld(&[1, 1]), 3, None).unwrap();
        assert_eq!(out.stop, StopReason::NoCandidates);
    }

    #[test]
    fn greedy_masked_path_matches_plain() {
        let mut rng = rng_from_seed(8);
        let counts: Vec<Vec<u64>> = (0..30).map(|_| (0..5).map(|_| rng.random_range(0..50)).collect()).collect();
        let fed = federation_from_counts(&counts);
        let t = ld(&[1, 1, 1, 1, 1]);
        let plain = greedy_dc_select(&[0, 1, 2], &fed, &t, 5, None).unwrap();
        let masked = greedy_dc_select(&[0, 1, 2], &fed, &t, 5, Some(77)).unwrap();
        assert_eq!(plain, masked);
    }

    #[test]
    fn greedy_matches_brute_force_per_step() {
        let mut rng = rng_from_seed(21);
        let counts: Vec<Vec<u64>> = (0..9).map(|_| (0..4).map(|_| rng.random_range(0..20)).collect()).collect();
        let fed = federation_from_counts(&counts);
        let target = ld(&[1, 1, 1, 1]);
        let out = greedy_dc_select(&[0], &fed, &target, 2, None).unwrap();

        // independent scan: recompute every candidate's distance by hand
        let cos = |v: &[f64]| {
            let dot: f64 = v.iter().sum();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (n * 2.0)
        };
        let mut active: Vec<f64> = counts[0].iter().map(|&c| c as f64).collect();
        let mut taken = vec![0usize];
        for step in &out.trace {
            let mut best = (f64::INFINITY, usize::MAX);
            for (c, row) in counts.iter().enumerate().take(9).skip(1) {
                if taken.contains(&c) {
                    continue;
                }
                let v: Vec<f64> = active.iter().zip(row).map(|(a, &b)| a + b as f64).collect();
                let d = cos(&v);
                if d < best.0 - 1e-12 {
                    best = (d, c);
                }
            }
            assert_eq!(step.client, best.1);
            assert!((step.distance - best.0).abs() < 1e-12);
            taken.push(best.1);
            for (a, &b) in active.iter_mut().zip(&counts[best.1]) {
                *a += b as f64;
            }
        }
    }

    #[test]
    fn exhaustive_zero_horizon() {
        let fed = federation_from_counts(&[vec![3, 1], vec![0, 2], vec![1, 0]]);
        let out = exhaustive_dc_select(&[0], &fed, &ld(&[1, 1]), 0).unwrap();
        assert!(out.added.is_empty());
        assert_eq!(out.achieved_distance, Some(cosine_distance(&ld(&[3, 1]), &ld(&[1, 1])).unwrap()));
    }

    #[test]
    fn exhaustive_refuses_large_search() {
        let counts = vec![vec![1, 1]; 60];
        let fed = federation_from_counts(&counts);
        let err = exhaustive_dc_select(&[0], &fed, &ld(&[1, 1]), 6).unwrap_err();
        match err {
            Error::SearchBudget { subsets, .. } => assert_eq!(subsets, subset_count(59, 6)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exhaustive_can_beat_greedy() {
        // greedy grabs the single best client first and is then stuck
        let fed = federation_from_counts(&[vec![10, 0, 0], vec![0, 6, 6], vec![0, 10, 0], vec![0, 0, 10]]);
        let t = ld(&[1, 1, 1]);
        let g = greedy_dc_select(&[0], &fed, &t, 2, None).unwrap();
        let e = exhaustive_dc_select(&[0], &fed, &t, 2).unwrap();
        assert!(e.achieved_distance.unwrap() < g.achieved_distance.unwrap());
        assert_eq!(e.added, vec![2, 3]);
    }

    #[test]
    fn subset_counts() {
        assert_eq!(subset_count(10, 0), 1);
        assert_eq!(subset_count(10, 1), 11);
        assert_eq!(subset_count(10, 3), 1 + 10 + 45 + 120);
        assert_eq!(subset_count(3, 5), 8);
    }

    #[test]
    fn combinations_enumerate_lexicographically() {
        let mut combo = vec![0, 1];
        let mut seen = vec![combo.clone()];
        while next_combination(&mut combo, 4) {
            seen.push(combo.clone());
        }
        assert_eq!(seen, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
    }

    #[test]
    fn random_augment_cases() {
        let fed = federation_from_counts(&vec![vec![1, 1]; 100]);
        let active: Vec<usize> = (0..10).collect();
        let out = random_augment(&active, &fed, 0, None, &mut rng_from_seed(0)).unwrap();
        assert!(out.added.is_empty());

        let a = random_augment(&active, &fed, 5, None, &mut rng_from_seed(4)).unwrap();
        let b = random_augment(&active, &fed, 5, None, &mut rng_from_seed(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.added.len(), 5);
        assert!(a.added.iter().all(|c| !active.contains(c)));

        let all: Vec<usize> = (0..100).collect();
        assert!(random_augment(&all, &fed, 1, None, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn duplicate_active_member_rejected() {
        let fed = federation_from_counts(&[vec![1, 1], vec![1, 1]]);
        assert!(greedy_dc_select(&[0, 0], &fed, &ld(&[1, 1]), 1, None).is_err());
    }

    #[test]
    fn validate_requires_target_for_dc() {
        let cfg = SelectionConfig {
            m: 10,
            m_dc: 5,
            target: TargetKind::None,
            mode: SelectionMode::Greedy,
            secure_agg: false,
        };
        assert!(cfg.validate().is_err());
    }
}
