use std::borrow::Cow;

use super::{ActionSpace, PoisonAssignment, ThreatModel};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Hamming-ball enumeration over per-sample action vectors.
///
/// Yields every complete, within-budget assignment whose action vector
/// differs from the center's in `1..=radius` positions, ordered by distance,
/// then by position set (lexicographic), then by action. For label flipping
/// the action vector is exactly the poisoned-sample indicator vector. The
/// center itself is never yielded.
#[derive(Debug, Clone)]
pub struct Neighborhood<'a> {
    space: Cow<'a, ActionSpace>,
    alternatives: Vec<Vec<usize>>,
    center_poisoned: Vec<bool>,
    center: PoisonAssignment,
    used: usize,
    budget: usize,
    radius: usize,
    k: usize,
    combo: Vec<usize>,
    odometer: Vec<usize>,
    state: IterState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum IterState {
    Start,
    InCombo,
    Done,
}

/// Enumerates the exact neighborhood of `center` for a discrete threat model.
pub fn neighborhood(
    center: &PoisonAssignment,
    radius: usize,
    tm: &ThreatModel,
    dataset: &Dataset,
) -> Result<Neighborhood<'static>> {
    let space = ActionSpace::exact(tm, dataset)?;
    Neighborhood::new(center, radius, tm.budget, Cow::Owned(space))
}

/// Enumerates the neighborhood of `center` within a given action space.
pub fn neighborhood_in<'a>(
    center: &PoisonAssignment,
    radius: usize,
    budget: usize,
    space: &'a ActionSpace,
) -> Result<Neighborhood<'a>> {
    Neighborhood::new(center, radius, budget, Cow::Borrowed(space))
}

/// Radius at which the neighborhood of `center` covers every feasible
/// assignment of `space` (center excluded).
pub fn exhaustive_radius(center: &PoisonAssignment, budget: usize, space: &ActionSpace) -> usize {
    let movable = (0..center.len())
        .filter(|&i| space.choices(i) > 1 || center.get(i).is_poisoned())
        .count();
    movable.min(center.budget_used() + budget)
}

impl<'a> Neighborhood<'a> {
    fn new(center: &PoisonAssignment, radius: usize, budget: usize, space: Cow<'a, ActionSpace>) -> Result<Self> {
        if radius == 0 {
            return Err(Error::validation("neighborhood radius must be >= 1"));
        }
        if let Some(i) = center.first_undecided() {
            return Err(Error::IncompleteAssignment(i));
        }
        if center.len() != space.len() {
            return Err(Error::DimensionMismatch {
                context: "neighborhood center",
                expected: space.len(),
                actual: center.len(),
            });
        }
        let alternatives = (0..center.len())
            .map(|i| {
                let current = space.index_of(i, center.get(i));
                (0..space.choices(i)).filter(|&k| Some(k) != current).collect()
            })
            .collect();
        Ok(Neighborhood {
            alternatives,
            center_poisoned: center.indicator(),
            used: center.budget_used(),
            center: center.clone(),
            space,
            budget,
            radius,
            k: 0,
            combo: Vec::new(),
            odometer: Vec::new(),
            state: IterState::Start,
        })
    }

    // Lowest poisoned count reachable by changing exactly the combo positions.
    fn combo_feasible(&self) -> bool {
        let mut count = self.used;
        for &p in &self.combo {
            if self.alternatives[p].is_empty() {
                return false;
            }
            if self.center_poisoned[p] {
                count -= 1;
            } else {
                count += 1;
            }
        }
        count <= self.budget
    }

    fn next_combo(&mut self) -> bool {
        let n = self.center.len();
        loop {
            let advanced = if self.combo.is_empty() {
                false
            } else {
                let k = self.combo.len();
                let mut j = k;
                let mut moved = false;
                while j > 0 {
                    j -= 1;
                    if self.combo[j] < n - k + j {
                        self.combo[j] += 1;
                        for m in j + 1..k {
                            self.combo[m] = self.combo[m - 1] + 1;
                        }
                        moved = true;
                        break;
                    }
                }
                moved
            };
            if !advanced {
                self.k += 1;
                if self.k > self.radius || self.k > n {
                    return false;
                }
                self.combo = (0..self.k).collect();
            }
            if self.combo_feasible() {
                self.odometer = vec![0; self.k];
                return true;
            }
        }
    }

    fn advance_odometer(&mut self) -> bool {
        for j in (0..self.combo.len()).rev() {
            let p = self.combo[j];
            self.odometer[j] += 1;
            if self.odometer[j] < self.alternatives[p].len() {
                return true;
            }
            self.odometer[j] = 0;
        }
        false
    }

    fn current(&self) -> Option<PoisonAssignment> {
        let mut count = self.used;
        for (j, &p) in self.combo.iter().enumerate() {
            let action = self.alternatives[p][self.odometer[j]];
            count = count + usize::from(action != 0) - usize::from(self.center_poisoned[p]);
        }
        if count > self.budget {
            return None;
        }
        let mut a = self.center.clone();
        for (j, &p) in self.combo.iter().enumerate() {
            a.set(p, self.space.state(p, self.alternatives[p][self.odometer[j]]));
        }
        Some(a)
    }
}

impl Iterator for Neighborhood<'_> {
    type Item = PoisonAssignment;

    fn next(&mut self) -> Option<PoisonAssignment> {
        loop {
            match self.state {
                IterState::Done => return None,
                IterState::Start => {
                    if !self.next_combo() {
                        self.state = IterState::Done;
                        return None;
                    }
                    self.state = IterState::InCombo;
                    if let Some(a) = self.current() {
                        return Some(a);
                    }
                }
                IterState::InCombo => {
                    if !self.advance_odometer() {
                        self.state = IterState::Start;
                        continue;
                    }
                    if let Some(a) = self.current() {
                        return Some(a);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::data::{Sample, Task};
    use crate::threat::{validate, SampleState};

    fn ds(n: usize) -> Dataset {
        let train = (0..n)
            .map(|i| Sample::new(vec![i as f64], (i % 2) as f64))
            .collect();
        Dataset::new(train, vec![], Task::Classification).unwrap()
    }

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, j| acc * (n - j) / (j + 1))
    }

    #[test]
    fn radius_one_around_clean() {
        let d = ds(10);
        let tm = ThreatModel::label_flip(3);
        let n: Vec<_> = neighborhood(&PoisonAssignment::all_clean(10), 1, &tm, &d)
            .unwrap()
            .collect();
        assert_eq!(n.len(), 10);
        assert!(n.iter().all(|a| a.budget_used() == 1));
    }

    #[test]
    fn large_radius_is_exhaustive() {
        let d = ds(9);
        for budget in 0..=4 {
            let tm = ThreatModel::label_flip(budget);
            let count = neighborhood(&PoisonAssignment::all_clean(9), 9, &tm, &d)
                .unwrap()
                .count();
            let total: usize = (0..=budget).map(|k| binom(9, k)).sum();
            // the center (all clean) is the only feasible assignment not yielded
            assert_eq!(count + 1, total, "budget {budget}");
        }
    }

    #[test]
    fn matches_brute_force_indicator_filter() {
        let d = ds(4);
        let tm = ThreatModel::label_flip(2);
        let mut center = PoisonAssignment::all_clean(4);
        for i in [0, 1] {
            center.set(i, SampleState::poisoned(d.train[i].features.clone(), 1.0 - d.train[i].label));
        }
        let got: HashSet<Vec<bool>> = neighborhood(&center, 2, &tm, &d)
            .unwrap()
            .map(|a| a.indicator())
            .collect();
        let c = center.indicator();
        let mut expect = HashSet::new();
        for mask in 0u32..16 {
            let v: Vec<bool> = (0..4).map(|j| mask >> j & 1 == 1).collect();
            let dist = v.iter().zip(&c).filter(|(a, b)| a != b).count();
            let weight = v.iter().filter(|b| **b).count();
            if (1..=2).contains(&dist) && weight <= 2 {
                expect.insert(v);
            }
        }
        assert_eq!(got, expect);
    }

    #[test]
    fn rejects_continuous_and_incomplete() {
        let d = ds(3);
        let tm = ThreatModel::bounded(1, 0.5, 0.0, false);
        assert!(matches!(
            neighborhood(&PoisonAssignment::all_clean(3), 1, &tm, &d),
            Err(Error::UnsupportedNeighborhood(_))
        ));
        let tm = ThreatModel::label_flip(1);
        assert!(neighborhood(&PoisonAssignment::all_undecided(3), 1, &tm, &d).is_err());
    }

    #[test]
    fn yields_valid_unique_assignments() {
        let d = ds(7);
        let tm = ThreatModel::label_flip(3);
        let mut center = PoisonAssignment::all_clean(7);
        center.set(3, SampleState::poisoned(vec![3.0], 0.0));
        let all: Vec<_> = neighborhood(&center, 4, &tm, &d).unwrap().collect();
        let unique: HashSet<Vec<bool>> = all.iter().map(|a| a.indicator()).collect();
        assert_eq!(unique.len(), all.len());
        assert!(all.iter().all(|a| validate(&tm, a, &d).is_ok()));
    }
}
