//! Datasets, file loaders, synthetic fixtures and the train/test split.

mod covtype;
mod idx;
mod synthetic;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

pub use covtype::{load_covtype_csv, parse_covtype, write_covtype_csv, COVTYPE_CONTINUOUS_COLUMNS};
pub use idx::{load_mnist_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use synthetic::{covtype_surrogate_rows, generate_synthetic};

/// Feature matrix plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Parameter(format!(
                "a dataset needs at least 2 classes, got {num_classes}"
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::Parameter("feature dimension must be positive".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} of sample {i} is outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of samples per class.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the selected rows (in the given order) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Sample indices grouped by class, each group in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    /// Seeded uniform subsample of `n` rows without replacement; returns the
    /// full dataset when `n >= len`.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_from_seed(seed));
        order.truncate(n);
        self.subset(&order)
    }
}

/// Seeded shuffle-and-cut split; the training part has
/// `round(train_fraction * n)` samples.
pub fn train_test_split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let (train_idx, test_idx) = split_indices(ds.len(), train_fraction, seed);
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

pub(crate) fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let test = order.split_off(n_train);
    (order, test)
}
