use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BoundState, Interval, PassBounds};
use crate::error::{Error, Result};

/// Alias kept for readability of exported tables.
pub type NeuronBound = Interval;

/// Constants of one forward/backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassBigM {
    pub features: Vec<Interval>,
    pub label: Interval,
    /// Pre-activations per layer; the last entry is the logit.
    pub u: Vec<Vec<Interval>>,
    /// Hidden activations z_1..z_{K-1}.
    pub z: Vec<Vec<Interval>>,
    pub residual: Interval,
    pub loss: Interval,
    pub dloss: Interval,
    /// Flat gradient (layer-major, like `Params::flat`).
    pub grad: Vec<Interval>,
}

impl PassBigM {
    fn from_pass(p: &PassBounds) -> Self {
        PassBigM {
            features: p.features.clone(),
            label: p.label,
            u: p.u.clone(),
            z: p.z[1..].to_vec(),
            residual: p.residual,
            loss: p.loss,
            dloss: p.dloss,
            grad: p.grad.flat(),
        }
    }

    pub fn hull(&self, o: &PassBigM) -> PassBigM {
        let hv = |a: &[Interval], b: &[Interval]| hull_vecs(a, b);
        PassBigM {
            features: hv(&self.features, &o.features),
            label: self.label.hull(&o.label),
            u: self.u.iter().zip(&o.u).map(|(a, b)| hv(a, b)).collect(),
            z: self.z.iter().zip(&o.z).map(|(a, b)| hv(a, b)).collect(),
            residual: self.residual.hull(&o.residual),
            loss: self.loss.hull(&o.loss),
            dloss: self.dloss.hull(&o.dloss),
            grad: hv(&self.grad, &o.grad),
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        for layer in &self.u {
            check_finite(what, layer)?;
        }
        check_finite(what, &self.grad)?;
        check_finite(what, &self.features)?;
        check_finite(what, &[self.label, self.residual, self.loss, self.dloss])
    }
}

/// Constants for training sample `i` at iteration `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBigM {
    pub t: usize,
    pub i: usize,
    /// Pass over the sample's fixed (or clean) value.
    pub base: PassBigM,
    /// Pass over the sample's perturbation set, when it may still change.
    pub adversarial: Option<PassBigM>,
    /// Hull of both passes: bounds valid whether or not the sample is poisoned.
    pub any: PassBigM,
}

fn hull_vecs(a: &[Interval], b: &[Interval]) -> Vec<Interval> {
    a.iter().zip(b).map(|(x, y)| x.hull(y)).collect()
}

fn check_finite(what: &str, v: &[Interval]) -> Result<()> {
    match v.iter().find(|i| !i.is_finite()) {
        Some(bad) => Err(Error::NonFiniteBound(format!("{what}: {bad}"))),
        None => Ok(()),
    }
}

/// Big-M constants for a whole training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigMTable {
    /// Flat parameter bounds per iteration, `params[0]` being the start point.
    pub params: Vec<Vec<Interval>>,
    /// Budget left for undecided samples in the source state.
    pub remaining: usize,
    /// `samples[t-1]` in batch order.
    pub samples: Vec<Vec<SampleBigM>>,
    /// A perturbed pass per iteration (shared by all samples for substitution threats).
    pub aux: Vec<Option<PassBigM>>,
    /// Hidden pre-activation bounds per test sample and hidden layer.
    pub test_hidden: Vec<Vec<Vec<Interval>>>,
    /// Test-logit bounds under the final parameters.
    pub test: Vec<Interval>,
}

/// Extracts big-M constants from a bound state.
pub fn big_m_tables(bs: &BoundState) -> Result<BigMTable> {
    let mut samples = Vec::with_capacity(bs.samples.len());
    let mut aux = Vec::with_capacity(bs.samples.len());
    for (ti, it) in bs.samples.iter().enumerate() {
        let t = ti + 1;
        let mut row = Vec::with_capacity(it.len());
        let mut shared: Option<PassBigM> = None;
        for s in it {
            let base = PassBigM::from_pass(&s.base);
            let adversarial = s.adversarial.as_deref().map(PassBigM::from_pass);
            if shared.is_none() {
                shared = adversarial.clone();
            }
            let any = match &adversarial {
                Some(a) => base.hull(a),
                None => base.clone(),
            };
            let what = format!("t={t} i={}", s.index);
            any.check(&what)?;
            row.push(SampleBigM { t, i: s.index, base, adversarial, any });
        }
        samples.push(row);
        aux.push(shared);
    }
    let params: Vec<Vec<Interval>> = bs.params.iter().map(|p| p.flat()).collect();
    for (t, p) in params.iter().enumerate() {
        check_finite(&format!("parameters at t={t}"), p)?;
    }
    check_finite("test logits", &bs.test_logits)?;
    Ok(BigMTable {
        params,
        remaining: bs.remaining,
        samples,
        aux,
        test_hidden: bs.test_hidden.clone(),
        test: bs.test_logits.clone(),
    })
}

impl BigMTable {
    /// Replaces the test-logit constants, e.g. by tightened ones.
    pub fn with_test_logits(mut self, logits: Vec<Interval>) -> Result<Self> {
        if logits.len() != self.test.len() {
            return Err(Error::DimensionMismatch {
                context: "test logit constants",
                expected: self.test.len(),
                actual: logits.len(),
            });
        }
        check_finite("test logits", &logits)?;
        self.test = logits;
        Ok(self)
    }

    pub fn sample(&self, t: usize, i: usize) -> Option<&SampleBigM> {
        self.samples.get(t.checked_sub(1)?)?.iter().find(|s| s.i == i)
    }

    pub fn iterations(&self) -> usize {
        self.samples.len()
    }

    /// Number of unstable hidden neurons over all training passes and test samples.
    pub fn unstable_neurons(&self) -> usize {
        self.unstable_train_neurons() + self.unstable_test_neurons()
    }

    pub fn unstable_train_neurons(&self) -> usize {
        self.samples
            .iter()
            .flatten()
            .flat_map(|s| s.any.u[..s.any.u.len() - 1].iter().flatten())
            .filter(|iv| iv.phase() == super::Phase::Unstable)
            .count()
    }

    pub fn unstable_test_neurons(&self) -> usize {
        self.test_hidden
            .iter()
            .flatten()
            .flatten()
            .filter(|iv| iv.phase() == super::Phase::Unstable)
            .count()
    }

    /// Nested `{t: {i: {k: [{lo, hi}, ...]}}}` view of the ReLU and hinge
    /// constants plus the test-logit gaps.
    pub fn nested_json(&self) -> Value {
        let mut relu: BTreeMap<String, BTreeMap<String, BTreeMap<String, Vec<Interval>>>> = BTreeMap::new();
        let mut hinge: BTreeMap<String, BTreeMap<String, Interval>> = BTreeMap::new();
        for s in self.samples.iter().flatten() {
            let per_i = relu.entry(s.t.to_string()).or_default().entry(s.i.to_string()).or_default();
            for (k, layer) in s.any.u.iter().enumerate() {
                per_i.insert((k + 1).to_string(), layer.clone());
            }
            hinge.entry(s.t.to_string()).or_default().insert(s.i.to_string(), s.any.residual);
        }
        let test: Vec<Value> = self
            .test
            .iter()
            .enumerate()
            .map(|(i, iv)| json!({"index": i, "lo": iv.lo, "hi": iv.hi, "gap": iv.width()}))
            .collect();
        json!({ "relu": relu, "hinge": hinge, "test": test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_halfmoons;
    use crate::interval::{propagate, Mode};
    use crate::threat::{PoisonAssignment, ThreatModel};
    use crate::train::{replay, Loss, Params, TrainConfig};

    #[test]
    fn degenerate_state_gives_concrete_constants() {
        let ds = make_halfmoons(6, 3, 0.1, 0).unwrap().with_schedule(3, 1).unwrap();
        let cfg = TrainConfig::new(0.2, Loss::Hinge, Params::seeded(&[2, 2, 1], 0).unwrap());
        let a = PoisonAssignment::all_clean(6);
        let bs = propagate(&cfg, &ds, &ThreatModel::label_flip(0), &a, Mode::Direct).unwrap();
        let table = big_m_tables(&bs).unwrap();
        let tr = replay(&cfg, &ds, &a).unwrap();
        for it in &tr.iterations {
            for r in &it.samples {
                let s = table.sample(it.t, r.index).unwrap();
                assert_eq!(s.any.u[0][0], Interval::point(r.cache.u[0][0]));
                assert_eq!(s.any.residual, Interval::point(r.residual));
            }
        }
        let j = table.nested_json();
        assert!(j["relu"]["1"]["0"]["1"].is_array());
    }

    #[test]
    fn hinge_constant_is_affine_image() {
        // y = 1 fixed, ŷ ∈ [-1, 2]  =>  r = 1 - ŷ ∈ [-1, 2]
        let one = Interval::point(1.0);
        let yhat = Interval { lo: -1.0, hi: 2.0 };
        let sign = Interval::point(2.0).mul(&one).sub(&one);
        let r = one.sub(&sign.mul(&yhat));
        assert!((r.lo + 1.0).abs() < 1e-9 && (r.hi - 2.0).abs() < 1e-9);
    }
}
