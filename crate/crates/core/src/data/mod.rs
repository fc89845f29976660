//! Datasets, ingestion, feature expansion and the fixed batching schedule.
//!
//! Sample order is part of the certified object: sample `i` is always trained
//! in batch `i / batch_size`, every epoch, and poisoning never moves a sample.

mod csv_io;
mod features;
mod generators;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::csv_io::{load_csv, CsvSchema};
pub use self::features::{expand, FeatureMap, MinMaxScaler};
pub use self::generators::{diabetes, iris, make_halfmoons, DIABETES_SPLIT, IRIS_SPLIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Sample { features, label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub d: usize,
    pub task: Task,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Dataset {
    /// Builds a dataset and checks the shared-dimension and label invariants.
    /// The schedule defaults to one full-batch epoch.
    pub fn new(train: Vec<Sample>, test: Vec<Sample>, task: Task) -> Result<Self> {
        let d = train
            .first()
            .or(test.first())
            .map(|s| s.features.len())
            .ok_or_else(|| Error::validation("dataset has no samples"))?;
        let batch_size = train.len().max(1);
        let ds = Dataset {
            train,
            test,
            d,
            task,
            batch_size,
            epochs: 1,
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn with_schedule(mut self, batch_size: usize, epochs: usize) -> Result<Self> {
        if batch_size == 0 || epochs == 0 {
            return Err(Error::validation("batch_size and epochs must be positive"));
        }
        self.batch_size = batch_size;
        self.epochs = epochs;
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::validation("feature dimension must be positive"));
        }
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for (i, s) in samples.iter().enumerate() {
                if s.features.len() != self.d {
                    return Err(Error::validation(format!(
                        "{split} sample {i} has {} features, expected {}",
                        s.features.len(),
                        self.d
                    )));
                }
                if s.features.iter().any(|v| !v.is_finite()) || !s.label.is_finite() {
                    return Err(Error::validation(format!("{split} sample {i} is not finite")));
                }
                if self.task == Task::Classification && s.label != 0.0 && s.label != 1.0 {
                    return Err(Error::validation(format!(
                        "{split} sample {i} has label {} outside {{0, 1}}",
                        s.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_test(&self) -> usize {
        self.test.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.batch_size)
    }

    /// Total SGD iteration count `T`.
    pub fn iterations(&self) -> usize {
        self.epochs * self.batches_per_epoch()
    }

    pub fn batch_of(&self, index: usize) -> usize {
        index / self.batch_size
    }

    /// Sample range trained at iteration `t` (1-based, `1..=T`).
    pub fn batch_range(&self, t: usize) -> Range<usize> {
        assert!(t >= 1 && t <= self.iterations(), "iteration {t} out of range");
        let b = (t - 1) % self.batches_per_epoch();
        let start = b * self.batch_size;
        start..(start + self.batch_size).min(self.train.len())
    }

    pub fn schedule(&self) -> Vec<Range<usize>> {
        (1..=self.iterations()).map(|t| self.batch_range(t)).collect()
    }

    /// Moves everything after the first `n_train` training rows into the test split.
    pub fn split_off_test(mut self, n_train: usize) -> Result<Self> {
        if n_train == 0 || n_train > self.train.len() {
            return Err(Error::validation(format!(
                "cannot keep {n_train} of {} rows for training",
                self.train.len()
            )));
        }
        let mut rest = self.train.split_off(n_train);
        rest.append(&mut self.test);
        self.test = rest;
        self.batch_size = self.batch_size.min(self.train.len());
        Ok(self)
    }

    /// Rescales regression labels to `[0, 1]` using the range over both splits.
    pub fn scale_labels_unit(mut self) -> Self {
        let (lo, hi) = self
            .train
            .iter()
            .chain(&self.test)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.label), hi.max(s.label))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        for s in self.train.iter_mut().chain(self.test.iter_mut()) {
            s.label = (s.label - lo) / span;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let train = (0..n)
            .map(|i| Sample::new(vec![i as f64], (i % 2) as f64))
            .collect();
        Dataset::new(train, vec![], Task::Classification).unwrap()
    }

    #[test]
    fn schedule_is_fixed_partition() {
        let ds = toy(10).with_schedule(4, 3).unwrap();
        assert_eq!(ds.batches_per_epoch(), 3);
        assert_eq!(ds.iterations(), 9);
        assert_eq!(ds.batch_range(1), 0..4);
        assert_eq!(ds.batch_range(3), 8..10);
        assert_eq!(ds.batch_range(4), 0..4);
        for t in 1..=ds.iterations() {
            for i in ds.batch_range(t) {
                assert_eq!(ds.batch_of(i), (t - 1) % 3);
            }
        }
    }

    #[test]
    fn rejects_bad_labels_and_dims() {
        let bad = vec![Sample::new(vec![1.0, 2.0], 0.5)];
        assert!(Dataset::new(bad.clone(), vec![], Task::Classification).is_err());
        assert!(Dataset::new(bad, vec![], Task::Regression).is_ok());
        let ragged = vec![Sample::new(vec![1.0], 0.0), Sample::new(vec![1.0, 2.0], 1.0)];
        assert!(Dataset::new(ragged, vec![], Task::Classification).is_err());
    }

    #[test]
    fn split_keeps_order() {
        let ds = toy(10).split_off_test(7).unwrap();
        assert_eq!(ds.n_train(), 7);
        assert_eq!(ds.test[0].features, vec![7.0]);
        assert_eq!(ds.test.len(), 3);
    }

    #[test]
    fn label_scaling_hits_unit_range() {
        let train = vec![Sample::new(vec![0.0], 25.0), Sample::new(vec![0.0], 125.0)];
        let test = vec![Sample::new(vec![0.0], 75.0)];
        let ds = Dataset::new(train, test, Task::Regression).unwrap().scale_labels_unit();
        assert_eq!(ds.train[0].label, 0.0);
        assert_eq!(ds.train[1].label, 1.0);
        assert_eq!(ds.test[0].label, 0.5);
    }
}
