//! Repeated runs over a sweep of one experiment parameter.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::orchestrator::run_federated;
use crate::orchestrator::RunConfig;
use crate::partition::{apply_global_imbalance, dirichlet_local_partition, Alpha};
use crate::selection::{SelectionMode, TargetKind};
use crate::seed::derive_seed;
use crate::strategies::StrategyKind;

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    AlphaLocal,
    AlphaGlobal,
    MDc,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::AlphaLocal => "alpha_local",
            SweepAxis::AlphaGlobal => "alpha_global",
            SweepAxis::MDc => "m_dc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "alpha_local" => Ok(SweepAxis::AlphaLocal),
            "alpha_global" => Ok(SweepAxis::AlphaGlobal),
            "m_dc" => Ok(SweepAxis::MDc),
            other => Err(Error::config("sweep.axis", format!("unknown axis {other:?}"))),
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: AxisValue) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::AlphaLocal => cfg.partition.alpha_local = Alpha::new(value.0)?,
            SweepAxis::AlphaGlobal => cfg.partition.alpha_global = Alpha::new(value.0)?,
            SweepAxis::MDc => {
                if value.0 < 0.0 || value.0.fract() != 0.0 || !value.0.is_finite() {
                    return Err(Error::config("sweep.values", format!("m_dc must be a non-negative integer, got {value}")));
                }
                cfg.selection.m_dc = value.0 as usize;
            }
        }
        Ok(cfg)
    }
}

/// A swept value; infinity prints as `inf`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct AxisValue(pub f64);

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl std::str::FromStr for AxisValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(AxisValue(f64::INFINITY));
        }
        t.parse()
            .map(AxisValue)
            .map_err(|_| Error::Parameter(format!("cannot parse sweep value {s:?}")))
    }
}

/// One compared algorithm: a server strategy with a selection mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub strategy: StrategyKind,
    pub mode: SelectionMode,
    pub target: TargetKind,
}

impl Variant {
    pub fn baseline(strategy: StrategyKind) -> Self {
        Self {
            strategy,
            mode: SelectionMode::None,
            target: TargetKind::None,
        }
    }

    pub fn dc(strategy: StrategyKind, target: TargetKind) -> Self {
        Self {
            strategy,
            mode: SelectionMode::Greedy,
            target,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.mode == SelectionMode::None
    }

    /// `FedAvg`, `FedAvg_DC`, `FedAvg_DC_exhaustive`, `FedAvg_RA`.
    pub fn label(&self) -> String {
        let suffix = match self.mode {
            SelectionMode::None => "",
            SelectionMode::Greedy => "_DC",
            SelectionMode::Exhaustive => "_DC_exhaustive",
            SelectionMode::RandomAugment => "_RA",
        };
        format!("{}{}", self.strategy.name(), suffix)
    }

    /// Strategy and mode from a label produced by [`Variant::label`].
    pub fn parse_label(label: &str) -> Result<(StrategyKind, SelectionMode)> {
        let (head, mode) = if let Some(h) = label.strip_suffix("_DC_exhaustive") {
            (h, SelectionMode::Exhaustive)
        } else if let Some(h) = label.strip_suffix("_DC") {
            (h, SelectionMode::Greedy)
        } else if let Some(h) = label.strip_suffix("_RA") {
            (h, SelectionMode::RandomAugment)
        } else {
            (label, SelectionMode::None)
        };
        let kind = [StrategyKind::FedAvg, StrategyKind::FedAtt, StrategyKind::FedProx]
            .into_iter()
            .find(|k| k.name() == head)
            .ok_or_else(|| Error::Format(format!("unknown strategy label {label:?}")))?;
        Ok((kind, mode))
    }

    fn configure(&self, cfg: &mut RunConfig) {
        cfg.strategy.kind = self.strategy;
        cfg.selection.mode = self.mode;
        cfg.selection.target = self.target;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GridOptions {
    /// Draw a fresh partition for every repeat instead of one per value.
    pub repartition_per_repeat: bool,
}

/// Aggregate of the repeats of one variant at one swept value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultCell {
    pub dataset: String,
    pub variant: Variant,
    pub label: String,
    pub axis: SweepAxis,
    pub value: AxisValue,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_best_f1: f64,
    /// Completed repeats that enter the mean.
    pub repeats: usize,
    /// Repeats that diverged and were dropped.
    pub failures: usize,
    pub final_f1s: Vec<f64>,
}

impl ResultCell {
    pub fn complete(&self) -> bool {
        self.failures == 0
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every variant `base.repeats` times at every value of `axis`.
///
/// Repeat `r` uses master seed `derive_seed(base.master_seed, r, "repeat")`
/// for all variants, so baseline and augmented runs share their base draws.
/// Diverged repeats are logged and counted in `failures`.
pub fn run_grid(
    base: &RunConfig,
    data: &ExperimentData,
    axis: SweepAxis,
    values: &[AxisValue],
    variants: &[Variant],
    opts: GridOptions,
) -> Result<Vec<ResultCell>> {
    if values.is_empty() {
        return Err(Error::config("sweep.values", "no values to sweep"));
    }
    if variants.is_empty() {
        return Err(Error::config("sweep.variants", "no variants to compare"));
    }
    let mut cells = Vec::with_capacity(values.len() * variants.len());
    for &value in values {
        let at_value = axis.apply(base, value)?;
        let fixed = if opts.repartition_per_repeat {
            None
        } else {
            Some(partition(&at_value, data)?)
        };
        let mut finals: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
        let mut bests: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
        let mut failures = vec![0usize; variants.len()];
        for r in 0..base.repeats {
            let master = derive_seed(base.master_seed, r as u64, "repeat");
            let fresh;
            let (train, federation) = match &fixed {
                Some(p) => (&p.0, &p.1),
                None => {
                    let mut cfg = at_value.clone();
                    cfg.partition.seed = derive_seed(at_value.partition.seed, r as u64, "repeat");
                    fresh = partition(&cfg, data)?;
                    (&fresh.0, &fresh.1)
                }
            };
            for (v, variant) in variants.iter().enumerate() {
                let mut cfg = at_value.clone();
                variant.configure(&mut cfg);
                cfg.master_seed = master;
                cfg.repeats = 1;
                match run_federated(&cfg, federation, train, &data.test) {
                    Ok(out) => {
                        finals[v].push(out.summary.final_f1);
                        bests[v].push(out.summary.best_f1);
                    }
                    Err(e @ Error::Divergence { .. }) => {
                        log::warn!("{} {}={} repeat {r}: {e}", variant.label(), axis.name(), value);
                        failures[v] += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        for (v, variant) in variants.iter().enumerate() {
            let (mean_f1, std_f1) = mean_std(&finals[v]);
            let (mean_best_f1, _) = mean_std(&bests[v]);
            log::info!(
                "{} {} {}={}: F1 {:.4} +- {:.4}",
                data.name,
                variant.label(),
                axis.name(),
                value,
                mean_f1,
                std_f1
            );
            cells.push(ResultCell {
                dataset: data.name.clone(),
                variant: *variant,
                label: variant.label(),
                axis,
                value,
                mean_f1,
                std_f1,
                mean_best_f1,
                repeats: finals[v].len(),
                failures: failures[v],
                final_f1s: std::mem::take(&mut finals[v]),
            });
        }
    }
    Ok(cells)
}

fn partition(cfg: &RunConfig, data: &ExperimentData) -> Result<(Dataset, crate::partition::Federation)> {
    let train = apply_global_imbalance(&data.train, &cfg.partition)?;
    let federation = dirichlet_local_partition(&train, &cfg.partition)?;
    Ok((train, federation))
}
