//! Results and improvement tables as CSV.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::grid::{ResultCell, Variant};
use crate::error::{Error, Result};
use crate::selection::{SelectionMode, TargetKind};
use crate::strategies::StrategyKind;

/// One line of `results.csv`. The `alpha` column holds the swept value,
/// whichever axis it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub target: String,
    pub strategy: String,
    pub axis: String,
    pub alpha: String,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub repeats: usize,
}

impl From<&ResultCell> for ResultRow {
    fn from(c: &ResultCell) -> Self {
        Self {
            dataset: c.dataset.clone(),
            target: target_name(c.variant.target).into(),
            strategy: c.label.clone(),
            axis: c.axis.name().into(),
            alpha: c.value.to_string(),
            mean_f1: c.mean_f1,
            std_f1: c.std_f1,
            repeats: c.repeats,
        }
    }
}

/// One line of `delta.csv`: augmented minus baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub dataset: String,
    pub target: String,
    pub strategy: String,
    pub axis: String,
    pub alpha: String,
    pub delta_mean: f64,
    /// `sqrt(s_dc^2 + s_base^2)`.
    pub delta_std: f64,
}

pub fn target_name(t: TargetKind) -> &'static str {
    match t {
        TargetKind::Real => "real",
        TargetKind::Balanced => "balanced",
        TargetKind::None => "none",
    }
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_results_csv<W: Write>(out: W, cells: &[ResultCell]) -> Result<()> {
    let rows: Vec<ResultRow> = cells.iter().map(ResultRow::from).collect();
    if rows.is_empty() {
        return Err(Error::Empty("no result cells to write".into()));
    }
    write_rows(out, &rows)
}

pub fn write_delta_csv<W: Write>(out: W, rows: &[DeltaRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Empty("no delta rows to write".into()));
    }
    write_rows(out, rows)
}

pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_reader(input);
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i + 2,
                column: 0,
                message: e.to_string(),
            })
        })
        .collect()
}

type Key = (String, String, String, StrategyKind);

/// Pairs every augmented row with the baseline of the same dataset, axis,
/// value and server strategy. A missing or duplicated baseline is an error.
pub fn improvement_report(rows: &[ResultRow]) -> Result<Vec<DeltaRow>> {
    let mut baselines: BTreeMap<Key, &ResultRow> = BTreeMap::new();
    let mut augmented = Vec::new();
    for row in rows {
        let (kind, mode) = Variant::parse_label(&row.strategy)?;
        let key = (row.dataset.clone(), row.axis.clone(), row.alpha.clone(), kind);
        if mode == SelectionMode::None {
            if baselines.insert(key.clone(), row).is_some() {
                return Err(Error::Consistency(format!(
                    "duplicate baseline {} for {} {}={}",
                    row.strategy, row.dataset, row.axis, row.alpha
                )));
            }
        } else {
            augmented.push((key, row));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    augmented
        .into_iter()
        .map(|(key, row)| {
            if !seen.insert((key.clone(), row.strategy.clone(), row.target.clone())) {
                return Err(Error::Consistency(format!(
                    "duplicate row {} target {} for {} {}={}",
                    row.strategy, row.target, row.dataset, row.axis, row.alpha
                )));
            }
            let base = baselines.get(&key).ok_or_else(|| {
                Error::Consistency(format!(
                    "no {} baseline for {} {}={}",
                    key.3.name(),
                    row.dataset,
                    row.axis,
                    row.alpha
                ))
            })?;
            Ok(DeltaRow {
                dataset: row.dataset.clone(),
                target: row.target.clone(),
                strategy: row.strategy.clone(),
                axis: row.axis.clone(),
                alpha: row.alpha.clone(),
                delta_mean: row.mean_f1 - base.mean_f1,
                delta_std: (row.std_f1.powi(2) + base.std_f1.powi(2)).sqrt(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    fn row(strategy: &str, target: &str, alpha: &str, mean: f64, std: f64) -> ResultRow {
        ResultRow {
            dataset: "covtype".into(),
            target: target.into(),
            strategy: strategy.into(),
            axis: "alpha_local".into(),
            alpha: alpha.into(),
            mean_f1: mean,
            std_f1: std,
            repeats: 3,
        }
    }

    #[test]
    fn delta_subtracts_matching_baseline() {
        let rows = vec![
            row("FedAvg", "none", "0.1", 0.60, 0.03),
            row("FedAvg_DC", "real", "0.1", 0.70, 0.04),
            row("FedAtt", "none", "0.1", 0.50, 0.0),
            row("FedAtt_DC", "balanced", "0.1", 0.45, 0.0),
        ];
        let d = improvement_report(&rows).unwrap();
        assert_eq!(d.len(), 2);
        assert_relative_eq!(d[0].delta_mean, 0.10, epsilon = 1e-12);
        assert_relative_eq!(d[0].delta_std, 0.05, epsilon = 1e-12);
        assert_eq!(d[1].strategy, "FedAtt_DC");
        assert_relative_eq!(d[1].delta_mean, -0.05, epsilon = 1e-12);
    }

    #[test]
    fn swapping_roles_negates_the_delta() {
        let a = improvement_report(&[row("FedAvg", "none", "2", 0.61, 0.02), row("FedAvg_DC", "real", "2", 0.66, 0.01)]).unwrap();
        let b = improvement_report(&[row("FedAvg", "none", "2", 0.66, 0.01), row("FedAvg_DC", "real", "2", 0.61, 0.02)]).unwrap();
        assert_relative_eq!(a[0].delta_mean, -b[0].delta_mean, epsilon = 1e-15);
        assert_eq!(a[0].delta_std, b[0].delta_std);
    }

    #[test]
    fn missing_or_duplicate_baseline_is_an_error() {
        assert!(improvement_report(&[row("FedAvg_DC", "real", "2", 0.6, 0.0)]).is_err());
        let dup = [
            row("FedAvg", "none", "2", 0.6, 0.0),
            row("FedAvg", "none", "2", 0.6, 0.0),
            row("FedAvg_DC", "real", "2", 0.6, 0.0),
        ];
        assert!(improvement_report(&dup).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("FedAvg", "none", "inf", 0.625, 0.0125)];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("dataset,target,strategy,axis,alpha,mean_f1,std_f1,repeats\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_results_csv(&buf[..]).unwrap(), rows);
    }
}
