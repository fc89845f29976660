use super::propagate::top_r_positive;
use super::{BoundState, Interval, REL_EPS};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::solve::{ObjectiveKind, ObjectiveSpec};

/// Logit enclosures of the final model on the test set.
pub fn test_logit_bounds(bs: &BoundState) -> &[Interval] {
    &bs.test_logits
}

/// Upper bound on J over every completion of the state's partial assignment,
/// using the state's own test-logit enclosures.
pub fn dual_bound(bs: &BoundState, objective: &ObjectiveSpec, dataset: &Dataset) -> Result<f64> {
    dual_with_logits(bs, &bs.test_logits, objective, dataset)
}

/// As [`dual_bound`] with externally tightened test logits.
pub fn dual_with_logits(bs: &BoundState, logits: &[Interval], objective: &ObjectiveSpec, dataset: &Dataset) -> Result<f64> {
    objective.check(dataset)?;
    match objective.kind {
        ObjectiveKind::TestError => {
            if logits.len() != dataset.n_test() {
                return Err(Error::ObjectiveMismatch("test logit bounds do not cover the test set".into()));
            }
            Ok(logits
                .iter()
                .zip(&dataset.test)
                .filter(|(iv, s)| if s.label == 1.0 { iv.lo < 0.0 } else { iv.hi >= 0.0 })
                .count() as f64)
        }
        ObjectiveKind::Targeted => {
            if logits.len() != dataset.n_test() {
                return Err(Error::ObjectiveMismatch("test logit bounds do not cover the test set".into()));
            }
            Ok(objective
                .targets
                .iter()
                .filter(|t| {
                    let iv = logits[t.index];
                    if t.label == 1.0 {
                        iv.hi >= 0.0
                    } else {
                        iv.lo < 0.0
                    }
                })
                .count() as f64)
        }
        ObjectiveKind::Dos => Ok(dos_bound(bs)),
    }
}

fn dos_bound(bs: &BoundState) -> f64 {
    // per-iteration sums in batch order, then across iterations, exactly as
    // the replay accumulates them
    let mut total = 0.0;
    let mut mag = 0.0;
    let mut excess = vec![0.0; bs.samples.iter().flatten().map(|s| s.index + 1).max().unwrap_or(0)];
    for it in &bs.samples {
        let mut batch = 0.0;
        for s in it {
            let base = s.base.loss.hi;
            batch += base;
            mag += base.abs();
            if let Some(a) = &s.adversarial {
                excess[s.index] += a.loss.hi - base;
                mag += a.loss.hi.abs();
            }
        }
        total += batch;
    }
    if bs.is_exact() {
        return total;
    }
    let extra = top_r_positive(&mut excess, bs.remaining);
    let m = 4.0 * REL_EPS * (mag + extra) + 1e-300;
    total + extra + m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_halfmoons;
    use crate::interval::{propagate, Mode};
    use crate::solve::evaluate_objective;
    use crate::threat::{PoisonAssignment, SampleState, ThreatModel};
    use crate::train::{replay, Loss, Params, TrainConfig};

    #[test]
    fn complete_assignment_dual_equals_objective() {
        let ds = make_halfmoons(10, 8, 0.2, 5).unwrap().with_schedule(5, 2).unwrap();
        let cfg = TrainConfig::new(0.4, Loss::Hinge, Params::seeded(&[2, 1], 2).unwrap());
        let tm = ThreatModel::label_flip(1);
        let mut a = PoisonAssignment::all_clean(10);
        a.set(3, SampleState::poisoned(ds.train[3].features.clone(), 1.0 - ds.train[3].label));
        let tr = replay(&cfg, &ds, &a).unwrap();
        let bs = propagate(&cfg, &ds, &tm, &a, Mode::Auxiliary).unwrap();
        for o in [ObjectiveSpec::test_error(), ObjectiveSpec::dos()] {
            assert_eq!(dual_bound(&bs, &o, &ds).unwrap(), evaluate_objective(&tr, &o, &ds));
        }
    }

    #[test]
    fn certified_logits_give_zero() {
        let ds = make_halfmoons(4, 2, 0.0, 1).unwrap();
        let cfg = TrainConfig::new(0.0, Loss::Hinge, Params::linear(vec![0.0, 0.0], 0.0));
        let bs = propagate(&cfg, &ds, &ThreatModel::label_flip(0), &PoisonAssignment::all_clean(4), Mode::Direct).unwrap();
        let logits: Vec<Interval> = ds
            .test
            .iter()
            .map(|s| if s.label == 1.0 { Interval { lo: 1.0, hi: 2.0 } } else { Interval { lo: -2.0, hi: -1.0 } })
            .collect();
        assert_eq!(dual_with_logits(&bs, &logits, &ObjectiveSpec::test_error(), &ds).unwrap(), 0.0);
    }
}
