use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::train::{predict_logit, Params, ReplayOutcome, Score, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Number of misclassified test samples.
    TestError,
    /// Number of listed test samples predicted as their target label.
    Targeted,
    /// Cumulative training loss over all iterations.
    Dos,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub index: usize,
    pub label: f64,
}

/// The adversary's objective J(θ), maximised by the attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<TargetEntry>,
}

/// Predicted class: 1 iff the logit is non-negative.
pub fn predict_class(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0
    } else {
        0.0
    }
}

impl ObjectiveSpec {
    pub fn test_error() -> Self {
        ObjectiveSpec { kind: ObjectiveKind::TestError, targets: Vec::new() }
    }

    pub fn dos() -> Self {
        ObjectiveSpec { kind: ObjectiveKind::Dos, targets: Vec::new() }
    }

    pub fn targeted(targets: Vec<TargetEntry>) -> Self {
        ObjectiveSpec { kind: ObjectiveKind::Targeted, targets }
    }

    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        match self.kind {
            ObjectiveKind::TestError | ObjectiveKind::Targeted if dataset.task != Task::Classification => {
                Err(Error::ObjectiveMismatch(format!("{:?} needs a classification dataset", self.kind)))
            }
            ObjectiveKind::Targeted => {
                if self.targets.is_empty() {
                    return Err(Error::ObjectiveMismatch("targeted objective without targets".into()));
                }
                for t in &self.targets {
                    if t.index >= dataset.n_test() {
                        return Err(Error::ObjectiveMismatch(format!("target index {} out of range", t.index)));
                    }
                    if t.label != 0.0 && t.label != 1.0 {
                        return Err(Error::ObjectiveMismatch(format!("target label {} is not 0 or 1", t.label)));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Test-set counts are integers; the DoS loss is continuous.
    pub fn is_integral(&self) -> bool {
        !matches!(self.kind, ObjectiveKind::Dos)
    }

    /// Termination test for a primal/dual pair.
    pub fn gap_closed(&self, primal: f64, dual: f64) -> bool {
        if self.is_integral() {
            dual - primal < 1.0
        } else {
            dual - primal <= 1e-6 * primal.abs().max(dual.abs()).max(1e-12)
        }
    }

    /// J from final parameters and the total training loss.
    pub fn evaluate(&self, params: &Params, total_loss: f64, dataset: &Dataset) -> f64 {
        match self.kind {
            ObjectiveKind::Dos => total_loss,
            ObjectiveKind::TestError => dataset
                .test
                .iter()
                .filter(|s| predict_class(predict_logit(params, &s.features)) != s.label)
                .count() as f64,
            ObjectiveKind::Targeted => self
                .targets
                .iter()
                .filter(|t| predict_class(predict_logit(params, &dataset.test[t.index].features)) == t.label)
                .count() as f64,
        }
    }

    pub fn evaluate_outcome(&self, outcome: &ReplayOutcome, dataset: &Dataset) -> f64 {
        self.evaluate(&outcome.params, outcome.total_loss(), dataset)
    }

    pub fn scorer<'a>(&'a self, dataset: &'a Dataset) -> ObjectiveScore<'a> {
        ObjectiveScore { spec: self, dataset }
    }
}

/// J(θ) of a full replay trace.
pub fn evaluate_objective(trace: &Trace, objective: &ObjectiveSpec, dataset: &Dataset) -> f64 {
    objective.evaluate(trace.final_params(), trace.total_loss(), dataset)
}

/// Adapter so replay_batched can score outcomes.
pub struct ObjectiveScore<'a> {
    spec: &'a ObjectiveSpec,
    dataset: &'a Dataset,
}

impl Score for ObjectiveScore<'_> {
    fn score(&self, outcome: &ReplayOutcome) -> f64 {
        self.spec.evaluate_outcome(outcome, self.dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn ds() -> Dataset {
        let test = vec![
            Sample::new(vec![1.0], 1.0),
            Sample::new(vec![-1.0], 0.0),
            Sample::new(vec![-2.0], 0.0),
        ];
        Dataset::new(vec![Sample::new(vec![0.0], 0.0)], test, Task::Classification).unwrap()
    }

    #[test]
    fn perfect_and_constant_classifiers() {
        let d = ds();
        let o = ObjectiveSpec::test_error();
        assert_eq!(o.evaluate(&Params::linear(vec![1.0], 0.0), 0.0, &d), 0.0);
        // zero logits predict class 1 everywhere
        assert_eq!(o.evaluate(&Params::linear(vec![0.0], 0.0), 0.0, &d), 2.0);
    }

    #[test]
    fn targeted_counts_matches() {
        let d = ds();
        let o = ObjectiveSpec::targeted(vec![TargetEntry { index: 1, label: 1.0 }, TargetEntry { index: 2, label: 0.0 }]);
        o.check(&d).unwrap();
        assert_eq!(o.evaluate(&Params::linear(vec![1.0], 0.0), 0.0, &d), 1.0);
        assert!(ObjectiveSpec::targeted(vec![]).check(&d).is_err());
    }

    #[test]
    fn gap_rules() {
        assert!(ObjectiveSpec::test_error().gap_closed(3.0, 3.9));
        assert!(!ObjectiveSpec::test_error().gap_closed(3.0, 4.0));
        assert!(ObjectiveSpec::dos().gap_closed(10.0, 10.0 + 1e-6));
        assert!(!ObjectiveSpec::dos().gap_closed(10.0, 10.1));
    }
}
