use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};

/// Per-sample poisoning decision. `Undecided` is used by the search for
/// partial assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SampleState {
    Clean,
    Poisoned { features: Vec<f64>, label: f64 },
    Undecided,
}

impl SampleState {
    pub fn poisoned(features: Vec<f64>, label: f64) -> Self {
        SampleState::Poisoned { features, label }
    }

    pub fn is_poisoned(&self) -> bool {
        matches!(self, SampleState::Poisoned { .. })
    }
}

/// One row of `attack.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEntry {
    pub index: usize,
    pub features: Vec<f64>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonAssignment {
    states: Vec<SampleState>,
}

impl PoisonAssignment {
    pub fn all_clean(n: usize) -> Self {
        PoisonAssignment {
            states: vec![SampleState::Clean; n],
        }
    }

    pub fn all_undecided(n: usize) -> Self {
        PoisonAssignment {
            states: vec![SampleState::Undecided; n],
        }
    }

    pub fn from_states(states: Vec<SampleState>) -> Self {
        PoisonAssignment { states }
    }

    /// Rebuilds a complete assignment from `attack.json` rows.
    pub fn from_entries(n: usize, entries: &[AttackEntry]) -> Result<Self> {
        let mut a = Self::all_clean(n);
        for e in entries {
            if e.index >= n {
                return Err(Error::validation(format!("attack index {} out of range", e.index)));
            }
            a.set(e.index, SampleState::poisoned(e.features.clone(), e.label));
        }
        Ok(a)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[SampleState] {
        &self.states
    }

    pub fn get(&self, i: usize) -> &SampleState {
        &self.states[i]
    }

    pub fn set(&mut self, i: usize, state: SampleState) {
        self.states[i] = state;
    }

    pub fn budget_used(&self) -> usize {
        self.states.iter().filter(|s| s.is_poisoned()).count()
    }

    pub fn undecided_count(&self) -> usize {
        self.states
            .iter()
            .filter(|s| matches!(s, SampleState::Undecided))
            .count()
    }

    pub fn is_complete(&self) -> bool {
        self.undecided_count() == 0
    }

    pub fn first_undecided(&self) -> Option<usize> {
        self.states
            .iter()
            .position(|s| matches!(s, SampleState::Undecided))
    }

    /// Poisoned-sample indicator vector.
    pub fn indicator(&self) -> Vec<bool> {
        self.states.iter().map(SampleState::is_poisoned).collect()
    }

    pub fn poisoned_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.states[i].is_poisoned()).collect()
    }

    /// Replaces every `Undecided` entry by `Clean`.
    pub fn completed_clean(&self) -> Self {
        let states = self
            .states
            .iter()
            .map(|s| match s {
                SampleState::Undecided => SampleState::Clean,
                other => other.clone(),
            })
            .collect();
        PoisonAssignment { states }
    }

    /// The training sample as seen by SGD: the clean original or its poisoned value.
    pub fn effective<'a>(&'a self, i: usize, clean: &'a Sample) -> Result<(&'a [f64], f64)> {
        match &self.states[i] {
            SampleState::Clean => Ok((&clean.features, clean.label)),
            SampleState::Poisoned { features, label } => Ok((features, *label)),
            SampleState::Undecided => Err(Error::IncompleteAssignment(i)),
        }
    }

    pub fn attack_entries(&self) -> Vec<AttackEntry> {
        self.states
            .iter()
            .enumerate()
            .filter_map(|(index, s)| match s {
                SampleState::Poisoned { features, label } => Some(AttackEntry {
                    index,
                    features: features.clone(),
                    label: *label,
                }),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completeness_and_budget() {
        let mut a = PoisonAssignment::all_undecided(3);
        assert!(!a.is_complete());
        assert_eq!(a.first_undecided(), Some(0));
        a.set(0, SampleState::Clean);
        a.set(1, SampleState::poisoned(vec![1.0], 0.0));
        assert_eq!(a.budget_used(), 1);
        assert_eq!(a.undecided_count(), 1);
        let c = a.completed_clean();
        assert!(c.is_complete());
        assert_eq!(c.indicator(), vec![false, true, false]);
    }

    #[test]
    fn entries_round_trip() {
        let mut a = PoisonAssignment::all_clean(4);
        a.set(2, SampleState::poisoned(vec![0.5, 0.25], 1.0));
        let e = a.attack_entries();
        assert_eq!(e.len(), 1);
        assert_eq!(PoisonAssignment::from_entries(4, &e).unwrap(), a);
        assert!(PoisonAssignment::from_entries(2, &e).is_err());
    }

    #[test]
    fn effective_rejects_undecided() {
        let a = PoisonAssignment::all_undecided(1);
        let s = Sample::new(vec![0.0], 0.0);
        assert!(matches!(a.effective(0, &s), Err(Error::IncompleteAssignment(0))));
    }
}
