use crate::error::{Error, Result};

/// Support-weighted mean of per-class F1. A class with no true samples has
/// weight zero, so it never affects the score.
pub fn weighted_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("F1 of an empty label set".into()));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fn_ = vec![0u64; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::Parameter(format!("class index outside 0..{num_classes}")));
        }
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let total = labels.len() as f64;
    let mut score = 0.0;
    for q in 0..num_classes {
        let support = tp[q] + fn_[q];
        if support == 0 {
            continue;
        }
        let precision = ratio(tp[q], tp[q] + fp[q]);
        let recall = ratio(tp[q], support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        score += f1 * support as f64 / total;
    }
    Ok(score)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
