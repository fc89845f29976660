//! Threat models, poisoning assignments and neighborhood enumeration.
//!
//! Classification labels under a bounded threat model follow the `{0,1}`
//! reading of the perturbation constraint: an untouched sample keeps its
//! label, a poisoned one may take either label when `label_flip` is set.

mod actions;
mod assignment;
mod neighborhood;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Task};
use crate::error::{Error, Result};

pub use self::actions::{ActionSpace, GridOptions};
pub use self::assignment::{AttackEntry, PoisonAssignment, SampleState};
pub use self::neighborhood::{exhaustive_radius, neighborhood, neighborhood_in, Neighborhood};

/// Absolute slack for threat-model membership checks on float data.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatKind {
    /// Up to `budget` samples moved within an ∞-ball around their clean values.
    Bounded,
    /// Up to `budget` samples replaced by points from the attacker box.
    Substitution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub kind: ThreatKind,
    /// Maximum number of modified training samples.
    pub budget: usize,
    /// Feature ∞-norm radius (bounded kind).
    #[serde(default)]
    pub epsilon: f64,
    /// Label ∞-norm radius (regression).
    #[serde(default)]
    pub nu: f64,
    /// Poisoned classification samples may take either label.
    #[serde(default)]
    pub label_flip: bool,
    /// Attacker box (substitution kind).
    #[serde(default)]
    pub domain_lo: Vec<f64>,
    #[serde(default)]
    pub domain_hi: Vec<f64>,
    /// Optional finite substitution set. When present the adversary may only
    /// inject these points, and the search over them is complete.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<Sample>>,
}

impl ThreatModel {
    pub fn label_flip(budget: usize) -> Self {
        ThreatModel {
            kind: ThreatKind::Bounded,
            budget,
            epsilon: 0.0,
            nu: 0.0,
            label_flip: true,
            domain_lo: Vec::new(),
            domain_hi: Vec::new(),
            grid: None,
        }
    }

    pub fn bounded(budget: usize, epsilon: f64, nu: f64, label_flip: bool) -> Self {
        ThreatModel {
            epsilon,
            nu,
            label_flip,
            ..Self::label_flip(budget)
        }
    }

    pub fn substitution(budget: usize, lo: Vec<f64>, hi: Vec<f64>, label_flip: bool) -> Self {
        ThreatModel {
            kind: ThreatKind::Substitution,
            budget,
            epsilon: 0.0,
            nu: 0.0,
            label_flip,
            domain_lo: lo,
            domain_hi: hi,
            grid: None,
        }
    }

    /// Checks the model against a dataset (budget, domain shape, label rule).
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        if self.budget > dataset.n_train() {
            return Err(Error::validation(format!(
                "budget {} exceeds training size {}",
                self.budget,
                dataset.n_train()
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) || !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::validation("epsilon and nu must be finite and >= 0"));
        }
        if self.label_flip && dataset.task == Task::Regression {
            return Err(Error::validation("label_flip applies to classification; use nu for regression"));
        }
        if self.kind == ThreatKind::Substitution {
            if self.domain_lo.len() != dataset.d || self.domain_hi.len() != dataset.d {
                return Err(Error::DimensionMismatch {
                    context: "attacker domain",
                    expected: dataset.d,
                    actual: self.domain_lo.len().min(self.domain_hi.len()),
                });
            }
            for (j, (lo, hi)) in self.domain_lo.iter().zip(&self.domain_hi).enumerate() {
                if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::validation(format!(
                        "attacker domain coordinate {j} is not a finite interval: [{lo}, {hi}]"
                    )));
                }
            }
            if let Some(grid) = &self.grid {
                if grid.is_empty() {
                    return Err(Error::validation("substitution grid is empty"));
                }
                for (k, p) in grid.iter().enumerate() {
                    if p.features.len() != dataset.d {
                        return Err(Error::validation(format!("grid point {k} has wrong dimension")));
                    }
                    if !self.in_domain(&p.features) {
                        return Err(Error::validation(format!("grid point {k} lies outside the attacker domain")));
                    }
                }
            }
        }
        Ok(())
    }

    fn in_domain(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.domain_lo.iter().zip(&self.domain_hi))
            .all(|(v, (lo, hi))| *v >= lo - MEMBERSHIP_TOL && *v <= hi + MEMBERSHIP_TOL)
    }

    /// True when the set of admissible poisoned values per sample is finite,
    /// so branching over actions is complete.
    pub fn is_discrete(&self, task: Task) -> bool {
        match self.kind {
            ThreatKind::Bounded => {
                self.epsilon == 0.0 && (task == Task::Classification || self.nu == 0.0)
            }
            ThreatKind::Substitution => self.grid.is_some() && (task == Task::Classification || self.nu == 0.0),
        }
    }

    /// Whether a poisoned value `(features, label)` is admissible for `clean`.
    fn admits(&self, clean: &Sample, features: &[f64], label: f64, task: Task) -> Vec<(ViolationFamily, String)> {
        let mut out = Vec::new();
        if features.len() != clean.features.len() {
            out.push((ViolationFamily::Dimension, format!("{} features", features.len())));
            return out;
        }
        match self.kind {
            ThreatKind::Bounded => {
                let dist = features
                    .iter()
                    .zip(&clean.features)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if dist > self.epsilon + MEMBERSHIP_TOL {
                    out.push((
                        ViolationFamily::FeatureRadius,
                        format!("∞-distance {dist} exceeds epsilon {}", self.epsilon),
                    ));
                }
            }
            ThreatKind::Substitution => {
                if let Some(grid) = &self.grid {
                    let on_grid = grid
                        .iter()
                        .any(|p| p.features.as_slice() == features && (!self.grid_fixes_label() || p.label == label));
                    if !on_grid {
                        out.push((ViolationFamily::Grid, "value is not a declared grid point".into()));
                    }
                } else if !self.in_domain(features) {
                    out.push((ViolationFamily::FeatureDomain, "features outside the attacker domain".into()));
                }
            }
        }
        match task {
            Task::Classification => {
                if label != 0.0 && label != 1.0 {
                    out.push((ViolationFamily::Label, format!("label {label} is not 0 or 1")));
                } else if label != clean.label && !self.label_flip && !self.grid_fixes_label() {
                    out.push((ViolationFamily::Label, "label change not permitted".into()));
                }
            }
            Task::Regression => {
                if (label - clean.label).abs() > self.nu + MEMBERSHIP_TOL {
                    out.push((
                        ViolationFamily::Label,
                        format!("label moved by {} > nu {}", (label - clean.label).abs(), self.nu),
                    ));
                }
            }
        }
        out
    }

    // Grid points carry their own labels when label flipping is off.
    fn grid_fixes_label(&self) -> bool {
        self.grid.is_some() && !self.label_flip
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationFamily {
    Budget,
    FeatureRadius,
    FeatureDomain,
    Grid,
    Label,
    Dimension,
    Index,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub index: Option<usize>,
    pub family: ViolationFamily,
    pub detail: String,
}

/// Lists every constraint of `tm` that `a` violates. Undecided entries are
/// not violations.
pub fn validate(tm: &ThreatModel, a: &PoisonAssignment, dataset: &Dataset) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if a.len() != dataset.n_train() {
        violations.push(Violation {
            index: None,
            family: ViolationFamily::Index,
            detail: format!("assignment covers {} samples, dataset has {}", a.len(), dataset.n_train()),
        });
        return Err(violations);
    }
    let used = a.budget_used();
    if used > tm.budget {
        violations.push(Violation {
            index: None,
            family: ViolationFamily::Budget,
            detail: format!("{used} poisoned samples exceed budget {}", tm.budget),
        });
    }
    for (i, state) in a.states().iter().enumerate() {
        if let SampleState::Poisoned { features, label } = state {
            for (family, detail) in tm.admits(&dataset.train[i], features, *label, dataset.task) {
                violations.push(Violation {
                    index: Some(i),
                    family,
                    detail,
                });
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize) -> Dataset {
        let train = (0..n)
            .map(|i| Sample::new(vec![0.0, 0.0], (i % 2) as f64))
            .collect();
        Dataset::new(train, vec![], Task::Classification).unwrap()
    }

    #[test]
    fn clean_assignment_is_always_valid() {
        let d = ds(4);
        let a = PoisonAssignment::all_clean(4);
        for tm in [
            ThreatModel::label_flip(0),
            ThreatModel::bounded(2, 0.1, 0.0, false),
            ThreatModel::substitution(1, vec![0.0; 2], vec![1.0; 2], true),
        ] {
            assert!(validate(&tm, &a, &d).is_ok());
        }
    }

    #[test]
    fn feature_radius_violation() {
        let d = ds(2);
        let tm = ThreatModel::bounded(1, 0.1, 0.0, false);
        let mut a = PoisonAssignment::all_clean(2);
        a.set(0, SampleState::poisoned(vec![0.2, 0.0], 0.0));
        let v = validate(&tm, &a, &d).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].family, ViolationFamily::FeatureRadius);
        assert_eq!(v[0].index, Some(0));
    }

    #[test]
    fn budget_violation() {
        let d = ds(10);
        let tm = ThreatModel::label_flip(8);
        let mut a = PoisonAssignment::all_clean(10);
        for i in 0..9 {
            a.set(i, SampleState::poisoned(vec![0.0, 0.0], 1.0 - d.train[i].label));
        }
        let v = validate(&tm, &a, &d).unwrap_err();
        assert!(v.iter().any(|v| v.family == ViolationFamily::Budget));
    }

    #[test]
    fn label_rules() {
        let d = ds(2);
        let mut a = PoisonAssignment::all_clean(2);
        a.set(1, SampleState::poisoned(vec![0.0, 0.0], 0.0));
        assert!(validate(&ThreatModel::label_flip(1), &a, &d).is_ok());
        let clean_label = ThreatModel::bounded(1, 0.5, 0.0, false);
        let v = validate(&clean_label, &a, &d).unwrap_err();
        assert_eq!(v[0].family, ViolationFamily::Label);
    }

    #[test]
    fn substitution_domain() {
        let d = ds(2);
        let tm = ThreatModel::substitution(1, vec![0.0; 2], vec![1.0; 2], true);
        let mut a = PoisonAssignment::all_clean(2);
        a.set(0, SampleState::poisoned(vec![1.0, 0.5], 1.0));
        assert!(validate(&tm, &a, &d).is_ok());
        a.set(0, SampleState::poisoned(vec![1.5, 0.5], 1.0));
        assert_eq!(validate(&tm, &a, &d).unwrap_err()[0].family, ViolationFamily::FeatureDomain);
    }

    #[test]
    fn check_rejects_bad_models() {
        let d = ds(3);
        assert!(ThreatModel::label_flip(4).check(&d).is_err());
        let inverted = ThreatModel::substitution(1, vec![1.0, 0.0], vec![0.0, 1.0], true);
        assert!(inverted.check(&d).is_err());
        assert!(ThreatModel::substitution(1, vec![0.0], vec![1.0], true).check(&d).is_err());
    }

    #[test]
    fn discreteness() {
        assert!(ThreatModel::label_flip(2).is_discrete(Task::Classification));
        assert!(!ThreatModel::bounded(2, 0.1, 0.0, true).is_discrete(Task::Classification));
        assert!(!ThreatModel::bounded(2, 0.0, 0.5, false).is_discrete(Task::Regression));
        let mut sub = ThreatModel::substitution(1, vec![0.0], vec![1.0], true);
        assert!(!sub.is_discrete(Task::Classification));
        sub.grid = Some(vec![Sample::new(vec![0.5], 0.0)]);
        assert!(sub.is_discrete(Task::Classification));
    }
}
