use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{backward, forward_unchecked, ForwardCache, Loss, Params, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::threat::PoisonAssignment;

/// Everything one training sample contributed at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub features: Vec<f64>,
    pub label: f64,
    pub cache: ForwardCache,
    pub logit: f64,
    /// Hinge argument `1 - (2y-1)ŷ`, or the residual `ŷ - y` for squared error.
    pub residual: f64,
    pub loss: f64,
    pub dloss: f64,
    pub grad: Params,
}

impl SampleRecord {
    /// ReLU pattern a_k for every hidden layer.
    pub fn activations(&self) -> Vec<Vec<bool>> {
        let k = self.cache.u.len();
        self.cache.u[..k.saturating_sub(1)]
            .iter()
            .map(|u| u.iter().map(|&v| v > 0.0).collect())
            .collect()
    }

    pub fn hinge_active(&self) -> bool {
        self.residual > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based iteration number.
    pub t: usize,
    pub batch: Range<usize>,
    pub lr: f64,
    pub samples: Vec<SampleRecord>,
}

impl IterationRecord {
    pub fn loss(&self) -> f64 {
        self.samples.iter().map(|s| s.loss).sum()
    }
}

/// Full replay: θ^(0..T) and every per-sample intermediate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub params: Vec<Params>,
    pub iterations: Vec<IterationRecord>,
}

impl Trace {
    pub fn final_params(&self) -> &Params {
        self.params.last().expect("trace holds θ^(0)")
    }

    pub fn num_iterations(&self) -> usize {
        self.iterations.len()
    }

    /// Per-sample losses 𝓛^(t,i), indexed `[t-1][position in batch]`.
    pub fn losses_per_iter(&self) -> Vec<Vec<f64>> {
        self.iterations
            .iter()
            .map(|it| it.samples.iter().map(|s| s.loss).collect())
            .collect()
    }

    pub fn iteration_losses(&self) -> Vec<f64> {
        self.iterations.iter().map(IterationRecord::loss).collect()
    }

    pub fn total_loss(&self) -> f64 {
        self.iteration_losses().iter().sum()
    }

    pub fn record(&self, t: usize, i: usize) -> Option<&SampleRecord> {
        let it = self.iterations.get(t.checked_sub(1)?)?;
        it.samples.get(i.checked_sub(it.batch.start)?)
    }

    pub fn outcome(&self) -> ReplayOutcome {
        ReplayOutcome {
            params: self.final_params().clone(),
            iteration_losses: self.iteration_losses(),
        }
    }
}

/// The lean result of a replay: final parameters and per-iteration batch losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub params: Params,
    pub iteration_losses: Vec<f64>,
}

impl ReplayOutcome {
    pub fn total_loss(&self) -> f64 {
        self.iteration_losses.iter().sum()
    }

    /// Sums of iteration losses per epoch.
    pub fn epoch_losses(&self, batches_per_epoch: usize) -> Vec<f64> {
        self.iteration_losses
            .chunks(batches_per_epoch.max(1))
            .map(|c| c.iter().sum())
            .collect()
    }
}

/// Objective evaluated on a replay outcome.
pub trait Score: Sync {
    fn score(&self, outcome: &ReplayOutcome) -> f64;
}

impl<F: Fn(&ReplayOutcome) -> f64 + Sync> Score for F {
    fn score(&self, outcome: &ReplayOutcome) -> f64 {
        self(outcome)
    }
}

fn effective_samples<'a>(dataset: &'a Dataset, a: &'a PoisonAssignment) -> Result<Vec<(&'a [f64], f64)>> {
    if a.len() != dataset.n_train() {
        return Err(Error::DimensionMismatch {
            context: "assignment length",
            expected: dataset.n_train(),
            actual: a.len(),
        });
    }
    let samples = dataset
        .train
        .iter()
        .enumerate()
        .map(|(i, s)| a.effective(i, s))
        .collect::<Result<Vec<_>>>()?;
    for (x, _) in &samples {
        if x.len() != dataset.d {
            return Err(Error::DimensionMismatch {
                context: "poisoned features",
                expected: dataset.d,
                actual: x.len(),
            });
        }
    }
    Ok(samples)
}

fn add_into(acc: &mut Params, g: &Params) {
    for (a, b) in acc.layers.iter_mut().zip(&g.layers) {
        for (x, y) in a.weights.iter_mut().zip(&b.weights) {
            *x += y;
        }
        for (x, y) in a.bias.iter_mut().zip(&b.bias) {
            *x += y;
        }
    }
}

/// θ ← θ - (α/|B|) G.
fn apply_update(params: &mut Params, acc: &Params, lr: f64, batch_len: usize) {
    let scale = lr / batch_len as f64;
    for (p, g) in params.layers.iter_mut().zip(&acc.layers) {
        for (x, y) in p.weights.iter_mut().zip(&g.weights) {
            *x -= scale * y;
        }
        for (x, y) in p.bias.iter_mut().zip(&g.bias) {
            *x -= scale * y;
        }
    }
}

/// One forward/backward pass at fixed parameters.
pub(crate) fn sample_record(theta: &Params, index: usize, x: &[f64], y: f64, loss: Loss) -> SampleRecord {
    let cache = forward_unchecked(theta, x);
    let logit = cache.logit();
    let dloss = loss.derivative(logit, y);
    let grad = backward(theta, &cache, dloss);
    SampleRecord {
        index,
        features: x.to_vec(),
        label: y,
        logit,
        residual: loss.residual(logit, y),
        loss: loss.value(logit, y),
        dloss,
        grad,
        cache,
    }
}

/// Replays SGD for a complete assignment, recording everything.
pub fn replay(config: &TrainConfig, dataset: &Dataset, assignment: &PoisonAssignment) -> Result<Trace> {
    config.check(dataset)?;
    let samples = effective_samples(dataset, assignment)?;
    let loss = config.loss;
    let mut theta = config.init.clone();
    let mut params = Vec::with_capacity(dataset.iterations() + 1);
    let mut iterations = Vec::with_capacity(dataset.iterations());
    params.push(theta.clone());
    for t in 1..=dataset.iterations() {
        let batch = dataset.batch_range(t);
        let mut acc = theta.zeros_like();
        let mut records = Vec::with_capacity(batch.len());
        for i in batch.clone() {
            let (x, y) = samples[i];
            let rec = sample_record(&theta, i, x, y, loss);
            add_into(&mut acc, &rec.grad);
            records.push(rec);
        }
        let lr = config.lr_at(t);
        apply_update(&mut theta, &acc, lr, batch.len());
        params.push(theta.clone());
        iterations.push(IterationRecord { t, batch, lr, samples: records });
    }
    Ok(Trace { params, iterations })
}

fn run_lean(config: &TrainConfig, dataset: &Dataset, samples: &[(&[f64], f64)]) -> ReplayOutcome {
    let loss = config.loss;
    let mut theta = config.init.clone();
    let mut acc = theta.zeros_like();
    let linear = theta.layers.len() == 1;
    let mut iteration_losses = Vec::with_capacity(dataset.iterations());
    for t in 1..=dataset.iterations() {
        let batch = dataset.batch_range(t);
        for l in &mut acc.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let mut batch_loss = 0.0;
        for &(x, y) in &samples[batch.clone()] {
            if linear {
                // same arithmetic as forward_unchecked/backward for K = 1
                let l = &theta.layers[0];
                let mut s = 0.0;
                for (w, v) in l.weights.iter().zip(x) {
                    s += w * v;
                }
                let logit = s + l.bias[0];
                let g = loss.derivative(logit, y);
                batch_loss += loss.value(logit, y);
                let a = &mut acc.layers[0];
                for (w, v) in a.weights.iter_mut().zip(x) {
                    *w += g * v;
                }
                a.bias[0] += g;
            } else {
                let cache = forward_unchecked(&theta, x);
                let logit = cache.logit();
                batch_loss += loss.value(logit, y);
                let grad = backward(&theta, &cache, loss.derivative(logit, y));
                add_into(&mut acc, &grad);
            }
        }
        apply_update(&mut theta, &acc, config.lr_at(t), batch.len());
        iteration_losses.push(batch_loss);
    }
    ReplayOutcome { params: theta, iteration_losses }
}

/// Final parameters and losses only; bit-identical to [`replay`].
pub fn replay_outcome(config: &TrainConfig, dataset: &Dataset, assignment: &PoisonAssignment) -> Result<ReplayOutcome> {
    config.check(dataset)?;
    let samples = effective_samples(dataset, assignment)?;
    Ok(run_lean(config, dataset, &samples))
}

/// Replays many assignments, in parallel on the current rayon pool. Results
/// follow the input order.
pub fn replay_batched(
    config: &TrainConfig,
    dataset: &Dataset,
    assignments: &[PoisonAssignment],
    score: &dyn Score,
) -> Result<Vec<(Params, f64)>> {
    if assignments.is_empty() {
        return Err(Error::validation("replay_batched needs at least one assignment"));
    }
    config.check(dataset)?;
    assignments
        .par_iter()
        .map(|a| {
            let samples = effective_samples(dataset, a)?;
            let out = run_lean(config, dataset, &samples);
            let value = score.score(&out);
            Ok((out.params, value))
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, Task};
    use crate::threat::SampleState;

    fn one_sample() -> (TrainConfig, Dataset) {
        let ds = Dataset::new(vec![Sample::new(vec![1.0], 0.0)], vec![], Task::Regression).unwrap();
        let cfg = TrainConfig::new(0.1, Loss::SquaredError, Params::linear(vec![1.0], 0.0));
        (cfg, ds)
    }

    #[test]
    fn one_step_by_hand() {
        let (cfg, ds) = one_sample();
        let tr = replay(&cfg, &ds, &PoisonAssignment::all_clean(1)).unwrap();
        assert_eq!(tr.params.len(), 2);
        let r = tr.record(1, 0).unwrap();
        assert_eq!(r.logit, 1.0);
        assert_eq!(r.grad.flat(), vec![2.0, 2.0]);
        let fin = tr.final_params().flat();
        assert!((fin[0] - 0.8).abs() < 1e-15 && (fin[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_init() {
        let (mut cfg, ds) = one_sample();
        cfg.lr = 0.0;
        let ds = ds.with_schedule(1, 5).unwrap();
        let tr = replay(&cfg, &ds, &PoisonAssignment::all_clean(1)).unwrap();
        assert!(tr.params.iter().all(|p| *p == cfg.init));
    }

    #[test]
    fn incomplete_assignment_rejected() {
        let (cfg, ds) = one_sample();
        assert!(matches!(
            replay(&cfg, &ds, &PoisonAssignment::all_undecided(1)),
            Err(Error::IncompleteAssignment(0))
        ));
    }

    #[test]
    fn lean_path_matches_trace_bitwise() {
        let train: Vec<_> = (0..7)
            .map(|i| Sample::new(vec![i as f64 * 0.3 - 1.0, (i * i) as f64 * 0.1], (i % 2) as f64))
            .collect();
        let ds = Dataset::new(train, vec![], Task::Classification)
            .unwrap()
            .with_schedule(3, 2)
            .unwrap();
        for dims in [vec![2, 1], vec![2, 3, 1]] {
            let cfg = TrainConfig::new(0.3, Loss::Hinge, Params::seeded(&dims, 4).unwrap());
            let mut a = PoisonAssignment::all_clean(7);
            a.set(2, SampleState::poisoned(ds.train[2].features.clone(), 1.0));
            let tr = replay(&cfg, &ds, &a).unwrap();
            let out = replay_outcome(&cfg, &ds, &a).unwrap();
            assert_eq!(&out.params, tr.final_params());
            assert_eq!(out.iteration_losses, tr.iteration_losses());
            assert_eq!(tr.iterations.len(), 6);
            assert_eq!(tr.iterations[1].batch, 3..6);
            assert_eq!(tr.iterations[2].batch, 6..7);
        }
    }

    #[test]
    fn batched_errors_on_empty() {
        let (cfg, ds) = one_sample();
        let score = |o: &ReplayOutcome| o.total_loss();
        assert!(replay_batched(&cfg, &ds, &[], &score).is_err());
        let res = replay_batched(&cfg, &ds, &vec![PoisonAssignment::all_clean(1); 3], &score).unwrap();
        assert_eq!(res.len(), 3);
        assert!(res.iter().all(|r| r == &res[0]));
    }
}
