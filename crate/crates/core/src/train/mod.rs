//! Concrete forward/backward semantics and deterministic SGD replay.

mod replay;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Task};
use crate::error::{Error, Result};

pub use replay::{replay, replay_batched, replay_outcome, IterationRecord, ReplayOutcome, SampleRecord, Score, Trace};
pub(crate) use replay::sample_record;

/// One affine layer, `u = W z + b`, with `W` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "layer weights",
                expected: rows * cols,
                actual: weights.len(),
            });
        }
        if bias.len() != rows {
            return Err(Error::DimensionMismatch {
                context: "layer bias",
                expected: rows,
                actual: bias.len(),
            });
        }
        Ok(Layer { rows, cols, weights, bias })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn w(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Network parameters θ = {(W_k, b_k)}. The last layer has one output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<Layer>,
}

impl Params {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let p = Params { layers };
        p.check()?;
        Ok(p)
    }

    /// Single linear layer `w·x + b`.
    pub fn linear(w: Vec<f64>, b: f64) -> Self {
        let d = w.len();
        Params {
            layers: vec![Layer { rows: 1, cols: d, weights: w, bias: vec![b] }],
        }
    }

    /// Zero parameters for layer widths `dims = [n_0, n_1, ..., 1]`.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect())
    }

    /// Seeded uniform initialisation: every weight and bias of layer k is
    /// drawn from U(-1/sqrt(n_{k-1}), 1/sqrt(n_{k-1})) with ChaCha8, layer by
    /// layer, weights row-major then biases.
    pub fn seeded(dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims)?;
        for layer in &mut p.layers {
            let s = 1.0 / (layer.cols.max(1) as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.random_range(-s..=s);
            }
        }
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::validation("parameters need at least one layer"));
        };
        for layer in &self.layers {
            if layer.weights.len() != layer.rows * layer.cols || layer.bias.len() != layer.rows {
                return Err(Error::validation("layer storage does not match its shape"));
            }
        }
        for pair in self.layers.windows(2) {
            if pair[1].cols != pair[0].rows {
                return Err(Error::DimensionMismatch {
                    context: "layer chaining",
                    expected: pair[0].rows,
                    actual: pair[1].cols,
                });
            }
        }
        if last.rows != 1 {
            return Err(Error::DimensionMismatch {
                context: "output layer width",
                expected: 1,
                actual: last.rows,
            });
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `[n_0, n_1, ..., n_K]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.rows));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            layers: self.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect(),
        }
    }

    /// Layer-major flattening: W_1 row-major, b_1, W_2, b_2, ...
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flat parameters",
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut pos = 0;
        for l in &mut out.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Hinge,
    SquaredError,
}

impl Loss {
    pub fn task(self) -> Task {
        match self {
            Loss::Hinge => Task::Classification,
            Loss::SquaredError => Task::Regression,
        }
    }

    /// Hinge margin argument `r = 1 - (2y-1) ŷ`; for squared error, the residual `ŷ - y`.
    pub fn residual(self, yhat: f64, y: f64) -> f64 {
        match self {
            Loss::Hinge => 1.0 - (2.0 * y - 1.0) * yhat,
            Loss::SquaredError => yhat - y,
        }
    }

    pub fn value(self, yhat: f64, y: f64) -> f64 {
        let r = self.residual(yhat, y);
        match self {
            Loss::Hinge => r.max(0.0),
            Loss::SquaredError => r * r,
        }
    }

    /// dL/dŷ. The hinge is inactive at r = 0.
    pub fn derivative(self, yhat: f64, y: f64) -> f64 {
        let r = self.residual(yhat, y);
        match self {
            Loss::Hinge => {
                if r > 0.0 {
                    -(2.0 * y - 1.0)
                } else {
                    0.0
                }
            }
            Loss::SquaredError => 2.0 * r,
        }
    }
}

/// How θ^(0) is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Explicit { params: Params },
    Seeded { hidden: Vec<usize>, seed: u64 },
    Zeros { hidden: Vec<usize> },
}

impl Init {
    pub fn build(&self, input_dim: usize) -> Result<Params> {
        let dims = |hidden: &[usize]| {
            let mut d = vec![input_dim];
            d.extend_from_slice(hidden);
            d.push(1);
            d
        };
        match self {
            Init::Explicit { params } => {
                params.check()?;
                if params.input_dim() != input_dim {
                    return Err(Error::DimensionMismatch {
                        context: "initial parameters input width",
                        expected: input_dim,
                        actual: params.input_dim(),
                    });
                }
                Ok(params.clone())
            }
            Init::Seeded { hidden, seed } => Params::seeded(&dims(hidden), *seed),
            Init::Zeros { hidden } => Params::zeros(&dims(hidden)),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Init::Seeded { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}

/// SGD hyperparameters. Epochs and batch size live on the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Optional per-iteration learning rates α^(1..T); overrides `lr` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<Vec<f64>>,
    pub loss: Loss,
    pub init: Params,
}

impl TrainConfig {
    pub fn new(lr: f64, loss: Loss, init: Params) -> Self {
        TrainConfig { lr, lr_schedule: None, loss, init }
    }

    /// Learning rate for the 1-based iteration `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        match &self.lr_schedule {
            Some(s) => s[t - 1],
            None => self.lr,
        }
    }

    pub fn check(&self, dataset: &crate::data::Dataset) -> Result<()> {
        self.init.check()?;
        if self.init.input_dim() != dataset.d {
            return Err(Error::DimensionMismatch {
                context: "initial parameters vs dataset features",
                expected: dataset.d,
                actual: self.init.input_dim(),
            });
        }
        if self.loss.task() != dataset.task {
            return Err(Error::validation(format!(
                "{:?} loss is incompatible with a {:?} dataset",
                self.loss, dataset.task
            )));
        }
        let rates: Vec<f64> = match &self.lr_schedule {
            Some(s) => {
                if s.len() != dataset.iterations() {
                    return Err(Error::DimensionMismatch {
                        context: "learning-rate schedule",
                        expected: dataset.iterations(),
                        actual: s.len(),
                    });
                }
                s.clone()
            }
            None => vec![self.lr],
        };
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::validation("learning rates must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-layer activations of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardCache {
    /// Pre-activations u_1..u_K.
    pub u: Vec<Vec<f64>>,
    /// Layer inputs z_0 = x, z_1..z_{K-1}.
    pub z: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logit(&self) -> f64 {
        self.u.last().map(|u| u[0]).unwrap_or(0.0)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn forward(params: &Params, x: &[f64]) -> Result<(f64, ForwardCache)> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward input",
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    let cache = forward_unchecked(params, x);
    Ok((cache.logit(), cache))
}

pub(crate) fn forward_unchecked(params: &Params, x: &[f64]) -> ForwardCache {
    let k = params.layers.len();
    let mut u = Vec::with_capacity(k);
    let mut z = Vec::with_capacity(k);
    z.push(x.to_vec());
    for (idx, layer) in params.layers.iter().enumerate() {
        let input = &z[idx];
        let out: Vec<f64> = (0..layer.rows).map(|r| dot(layer.row(r), input) + layer.bias[r]).collect();
        if idx + 1 < k {
            z.push(out.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect());
        }
        u.push(out);
    }
    ForwardCache { u, z }
}

/// Logit only, without keeping the cache.
pub fn predict_logit(params: &Params, x: &[f64]) -> f64 {
    if params.layers.len() == 1 {
        let l = &params.layers[0];
        return dot(&l.weights, x) + l.bias[0];
    }
    forward_unchecked(params, x).logit()
}

/// Backpropagates dL/dŷ through the cached pass; returns dL/dθ.
pub fn backward(params: &Params, cache: &ForwardCache, dlogit: f64) -> Params {
    let k = params.layers.len();
    let mut grads = params.zeros_like();
    let mut g = vec![dlogit];
    for idx in (0..k).rev() {
        let layer = &params.layers[idx];
        let input = &cache.z[idx];
        let gl = &mut grads.layers[idx];
        for r in 0..layer.rows {
            let gr = g[r];
            for c in 0..layer.cols {
                gl.weights[r * layer.cols + c] = gr * input[c];
            }
            gl.bias[r] = gr;
        }
        if idx > 0 {
            let prev_u = &cache.u[idx - 1];
            let mut next = vec![0.0; layer.cols];
            for (c, slot) in next.iter_mut().enumerate() {
                if prev_u[c] > 0.0 {
                    let mut s = 0.0;
                    for r in 0..layer.rows {
                        s += layer.w(r, c) * g[r];
                    }
                    *slot = s;
                }
            }
            g = next;
        }
    }
    grads
}

/// Loss value and parameter gradient for one sample.
pub fn loss_and_grad(params: &Params, sample: &Sample, loss: Loss) -> Result<(f64, Params)> {
    let (logit, cache) = forward(params, &sample.features)?;
    let value = loss.value(logit, sample.label);
    let grad = backward(params, &cache, loss.derivative(logit, sample.label));
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward() {
        let p = Params::linear(vec![1.0, -1.0], 0.0);
        assert_eq!(forward(&p, &[2.0, 1.0]).unwrap().0, 1.0);
        assert_eq!(predict_logit(&p, &[2.0, 1.0]), 1.0);
        let z = Params::zeros(&[3, 1]).unwrap();
        assert_eq!(forward(&z, &[4.0, -2.0, 7.0]).unwrap().0, 0.0);
        assert!(forward(&p, &[1.0]).is_err());
    }

    #[test]
    fn two_layer_forward() {
        let p = Params::new(vec![
            Layer::new(2, 1, vec![1.0, -1.0], vec![0.0, 0.0]).unwrap(),
            Layer::new(1, 2, vec![1.0, 1.0], vec![0.0]).unwrap(),
        ])
        .unwrap();
        let (logit, cache) = forward(&p, &[3.0]).unwrap();
        assert_eq!(cache.u[0], vec![3.0, -3.0]);
        assert_eq!(cache.z[1], vec![3.0, 0.0]);
        assert_eq!(logit, 3.0);
        assert_eq!(predict_logit(&p, &[3.0]), 3.0);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(Loss::Hinge.value(1.0, 1.0), 0.0);
        assert_eq!(Loss::Hinge.derivative(1.0, 1.0), 0.0);
        assert_eq!(Loss::Hinge.value(1.0, 0.0), 2.0);
        assert_eq!(Loss::Hinge.derivative(1.0, 0.0), 1.0);
        assert_eq!(Loss::SquaredError.value(0.75, 0.5), 0.0625);
        assert_eq!(Loss::SquaredError.derivative(0.75, 0.5), 0.5);
    }

    #[test]
    fn chain_and_output_checks() {
        let bad = Params::new(vec![Layer::zeros(2, 3), Layer::zeros(1, 3)]);
        assert!(bad.is_err());
        let wide = Params::new(vec![Layer::zeros(2, 3)]);
        assert!(wide.is_err());
        assert!(Layer::new(1, 2, vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn flat_round_trip_and_seeded_determinism() {
        let p = Params::seeded(&[3, 4, 1], 7).unwrap();
        assert_eq!(p, Params::seeded(&[3, 4, 1], 7).unwrap());
        assert_ne!(p, Params::seeded(&[3, 4, 1], 8).unwrap());
        assert_eq!(p.from_flat(&p.flat()).unwrap(), p);
        assert_eq!(p.num_params(), 3 * 4 + 4 + 4 + 1);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<Params>(&json).unwrap(), p);
    }

    #[test]
    fn linear_gradient_by_hand() {
        let p = Params::linear(vec![1.0], 0.0);
        let (l, g) = loss_and_grad(&p, &Sample::new(vec![1.0], 0.0), Loss::SquaredError).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g.flat(), vec![2.0, 2.0]);
    }
}
