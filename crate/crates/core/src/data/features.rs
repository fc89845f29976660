use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

/// Fixed feature transformation applied to every sample before training.
///
/// Polynomial maps list monomials in graded lexicographic order: by total
/// degree, then by descending exponent of the first variable, then the
/// second, and so on. With `include_bias` the constant monomial comes first.
/// On `(x1, x2)` with degree 2 and a bias this gives
/// `1, x1, x2, x1^2, x1*x2, x2^2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    Identity,
    Polynomial {
        degree: u32,
        #[serde(default)]
        include_bias: bool,
        /// Expected input dimension, checked by [`expand`] when set.
        #[serde(default)]
        input_dim: Option<usize>,
    },
}

impl FeatureMap {
    pub fn polynomial(degree: u32, include_bias: bool) -> Self {
        FeatureMap::Polynomial {
            degree,
            include_bias,
            input_dim: None,
        }
    }

    /// Exponent vectors of the map on a `d`-dimensional input.
    pub fn monomials(&self, d: usize) -> Vec<Vec<u32>> {
        match *self {
            FeatureMap::Identity => (0..d)
                .map(|j| (0..d).map(|k| u32::from(k == j)).collect())
                .collect(),
            FeatureMap::Polynomial {
                degree,
                include_bias,
                ..
            } => {
                let start = if include_bias { 0 } else { 1 };
                let mut out = Vec::new();
                for g in start..=degree {
                    let mut current = vec![0; d];
                    push_exponents(&mut out, &mut current, 0, g);
                }
                out
            }
        }
    }

    pub fn output_dim(&self, d: usize) -> usize {
        match self {
            FeatureMap::Identity => d,
            FeatureMap::Polynomial { .. } => self.monomials(d).len(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Identity => x.to_vec(),
            FeatureMap::Polynomial { .. } => self
                .monomials(x.len())
                .iter()
                .map(|exps| {
                    exps.iter()
                        .zip(x)
                        .map(|(&e, &v)| v.powi(e as i32))
                        .product()
                })
                .collect(),
        }
    }
}

// Exponents for variables `pos..` summing to `remaining`, first variable
// taking the largest share first.
fn push_exponents(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_exponents(out, current, pos + 1, remaining - e);
    }
    current[pos] = 0;
}

/// Applies `map` to both splits, preserving order.
pub fn expand(map: &FeatureMap, dataset: &Dataset) -> Result<Dataset> {
    if let FeatureMap::Polynomial {
        input_dim: Some(expected),
        ..
    } = map
    {
        if *expected != dataset.d {
            return Err(Error::DimensionMismatch {
                context: "feature map input",
                expected: *expected,
                actual: dataset.d,
            });
        }
    }
    let convert = |s: &Sample| -> Result<Sample> {
        if s.features.len() != dataset.d {
            return Err(Error::DimensionMismatch {
                context: "sample features",
                expected: dataset.d,
                actual: s.features.len(),
            });
        }
        Ok(Sample::new(map.apply(&s.features), s.label))
    };
    let train = dataset.train.iter().map(convert).collect::<Result<Vec<_>>>()?;
    let test = dataset.test.iter().map(convert).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        train,
        test,
        d: map.output_dim(dataset.d),
        ..dataset.clone()
    })
}

/// Per-feature min-max scaling fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(dataset: &Dataset) -> Self {
        let mut lo = vec![f64::INFINITY; dataset.d];
        let mut hi = vec![f64::NEG_INFINITY; dataset.d];
        for s in &dataset.train {
            for (j, &v) in s.features.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        MinMaxScaler { lo, hi }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                let span = self.hi[j] - self.lo[j];
                // constant columns collapse to 0
                if span > 0.0 {
                    (v - self.lo[j]) / span
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let conv = |s: &Sample| Sample::new(self.transform(&s.features), s.label);
        Dataset {
            train: dataset.train.iter().map(conv).collect(),
            test: dataset.test.iter().map(conv).collect(),
            ..dataset.clone()
        }
    }
}
