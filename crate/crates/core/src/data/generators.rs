use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample, Task};
use crate::error::{Error, Result};

const IRIS_CSV: &str = include_str!("../../data/iris.csv");
const DIABETES_CSV: &str = include_str!("../../data/diabetes.csv");

/// (train, test) sizes of the bundled Iris subset.
pub const IRIS_SPLIT: (usize, usize) = (80, 20);
/// (train, test) sizes of the bundled Diabetes split; the remaining rows are unused.
pub const DIABETES_SPLIT: (usize, usize) = (320, 89);

/// Two interleaving half circles. Class 0 lies on the upper arc
/// `(cos t, sin t)`, class 1 on the lower arc `(1 - cos t, 0.5 - sin t)`,
/// `t` evenly spaced in `[0, pi]`. Gaussian noise is added per coordinate,
/// the pooled points are shuffled with `seed`, and the first `n_train`
/// become the training split.
pub fn make_halfmoons(n_train: usize, n_test: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::validation("halfmoons needs n_train > 0 and n_test > 0"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::validation("halfmoons noise must be a finite value >= 0"));
    }
    let total = n_train + n_test;
    let n_upper = total / 2;
    let n_lower = total - n_upper;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).expect("noise checked above");
    let mut points = Vec::with_capacity(total);
    for (count, label) in [(n_upper, 0.0), (n_lower, 1.0)] {
        for k in 0..count {
            let t = if count > 1 {
                PI * k as f64 / (count - 1) as f64
            } else {
                0.0
            };
            let (x, y) = if label == 0.0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            points.push(Sample::new(vec![x, y], label));
        }
    }
    if noise > 0.0 {
        for p in &mut points {
            for v in &mut p.features {
                *v += normal.sample(&mut rng);
            }
        }
    }
    points.shuffle(&mut rng);
    Dataset::new(points, Vec::new(), Task::Classification)?.split_off_test(n_train)
}

fn parse_bundled(text: &str) -> Vec<Sample> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut values: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse().expect("bundled data is well-formed"))
                .collect();
            let label = values.pop().expect("label column");
            Sample::new(values, label)
        })
        .collect()
}

/// The first two Iris classes (setosa = 0, versicolor = 1), shuffled with
/// `seed` and split 80/20. Features are in raw centimetres.
pub fn iris(seed: u64) -> Result<Dataset> {
    let mut rows: Vec<Sample> = parse_bundled(IRIS_CSV)
        .into_iter()
        .filter(|s| s.label < 2.0)
        .collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Dataset::new(rows, Vec::new(), Task::Classification)?.split_off_test(IRIS_SPLIT.0)
}

/// Diabetes progression regression, shuffled with `seed`, 320 train / 89
/// test rows, labels rescaled to `[0, 1]`. Features are raw.
pub fn diabetes(seed: u64) -> Result<Dataset> {
    let mut rows = parse_bundled(DIABETES_CSV);
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    rows.truncate(DIABETES_SPLIT.0 + DIABETES_SPLIT.1);
    Ok(Dataset::new(rows, Vec::new(), Task::Regression)?
        .split_off_test(DIABETES_SPLIT.0)?
        .scale_labels_unit())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halfmoons_sizes() {
        let ds = make_halfmoons(100, 40, 0.1, 0).unwrap();
        assert_eq!((ds.n_train(), ds.n_test(), ds.d), (100, 40, 2));
        let ones = ds.train.iter().chain(&ds.test).filter(|s| s.label == 1.0).count();
        assert_eq!(ones, 70);
    }

    #[test]
    fn halfmoons_noiseless_on_arc() {
        let ds = make_halfmoons(30, 10, 0.0, 3).unwrap();
        for s in ds.train.iter().chain(&ds.test).filter(|s| s.label == 0.0) {
            let (x, y) = (s.features[0], s.features[1]);
            assert!((x * x + y * y - 1.0).abs() < 1e-12);
            assert!(y >= 0.0);
        }
    }

    #[test]
    fn halfmoons_is_deterministic() {
        let a = make_halfmoons(50, 20, 0.2, 11).unwrap();
        let b = make_halfmoons(50, 20, 0.2, 11).unwrap();
        assert_eq!(a, b);
        let bits = |d: &Dataset| -> Vec<u64> {
            d.train.iter().flat_map(|s| s.features.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, make_halfmoons(50, 20, 0.2, 12).unwrap());
    }

    #[test]
    fn halfmoons_rejects_bad_input() {
        assert!(make_halfmoons(0, 5, 0.1, 0).is_err());
        assert!(make_halfmoons(5, 5, -0.1, 0).is_err());
    }

    #[test]
    fn iris_split() {
        let ds = iris(0).unwrap();
        assert_eq!((ds.n_train(), ds.n_test(), ds.d), (80, 20, 4));
        assert!(ds.test.iter().any(|s| s.label == 0.0));
        assert!(ds.test.iter().any(|s| s.label == 1.0));
    }

    #[test]
    fn diabetes_split_and_scaling() {
        let ds = diabetes(0).unwrap();
        assert_eq!((ds.n_train(), ds.n_test(), ds.d), (320, 89, 10));
        assert_eq!(ds.task, Task::Regression);
        let labels = ds.train.iter().chain(&ds.test).map(|s| s.label);
        let (lo, hi) = labels.fold((1.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}
