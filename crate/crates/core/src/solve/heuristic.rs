use serde::{Deserialize, Serialize};

use super::ObjectiveSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::threat::{exhaustive_radius, neighborhood_in, validate, ActionSpace, GridOptions, PoisonAssignment, ThreatModel};
use crate::train::{replay_batched, replay_outcome, TrainConfig};

/// Candidates replayed together in one batched call.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum HeuristicOutcome {
    /// First strictly improving neighbor.
    Improved {
        assignment: PoisonAssignment,
        value: f64,
        evaluations: usize,
    },
    /// No improving neighbor was found. `optimal` holds when the whole
    /// (exact) action space was searched.
    Exhausted { optimal: bool, evaluations: usize },
}

impl HeuristicOutcome {
    pub fn evaluations(&self) -> usize {
        match self {
            HeuristicOutcome::Improved { evaluations, .. } | HeuristicOutcome::Exhausted { evaluations, .. } => *evaluations,
        }
    }
}

/// Objective value of a complete assignment.
pub fn assignment_value(
    config: &TrainConfig,
    dataset: &Dataset,
    objective: &ObjectiveSpec,
    a: &PoisonAssignment,
) -> Result<f64> {
    Ok(objective.evaluate_outcome(&replay_outcome(config, dataset, a)?, dataset))
}

/// One round of Hamming-ball local search around `incumbent` over the
/// action space of the threat model, with at most `cap` replays.
pub fn heuristic_search(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    objective: &ObjectiveSpec,
    incumbent: &PoisonAssignment,
    cap: usize,
) -> Result<HeuristicOutcome> {
    let space = ActionSpace::with_grid(tm, dataset, &GridOptions::default())?;
    heuristic_in(config, dataset, tm, objective, &space, incumbent, cap)
}

/// [`heuristic_search`] over a prepared action space.
pub fn heuristic_in(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    objective: &ObjectiveSpec,
    space: &ActionSpace,
    incumbent: &PoisonAssignment,
    cap: usize,
) -> Result<HeuristicOutcome> {
    objective.check(dataset)?;
    if let Some(i) = incumbent.first_undecided() {
        return Err(Error::IncompleteAssignment(i));
    }
    if let Err(v) = validate(tm, incumbent, dataset) {
        return Err(Error::validation(format!("incumbent violates the threat model: {:?}", v[0])));
    }
    let current = assignment_value(config, dataset, objective, incumbent)?;
    let radius = exhaustive_radius(incumbent, tm.budget, space);
    if radius == 0 {
        return Ok(HeuristicOutcome::Exhausted { optimal: space.is_exact(), evaluations: 0 });
    }
    // one iterator at the full radius visits neighbors by increasing distance
    let mut hood = neighborhood_in(incumbent, radius, tm.budget, space)?;
    let scorer = objective.scorer(dataset);
    let mut evaluations = 0usize;
    loop {
        let room = cap.saturating_sub(evaluations);
        if room == 0 {
            return Ok(HeuristicOutcome::Exhausted { optimal: false, evaluations });
        }
        let chunk: Vec<PoisonAssignment> = hood.by_ref().take(room.min(CHUNK)).collect();
        if chunk.is_empty() {
            return Ok(HeuristicOutcome::Exhausted { optimal: space.is_exact(), evaluations });
        }
        let values = replay_batched(config, dataset, &chunk, &scorer)?;
        for (k, (_, v)) in values.iter().enumerate() {
            if *v > current {
                return Ok(HeuristicOutcome::Improved {
                    assignment: chunk[k].clone(),
                    value: *v,
                    evaluations: evaluations + k + 1,
                });
            }
        }
        evaluations += chunk.len();
    }
}

/// Result of running the local search to a fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub assignment: PoisonAssignment,
    pub value: f64,
    /// The search space was exhausted without improvement.
    pub optimal: bool,
    pub evaluations: usize,
    pub improvements: usize,
}

/// Repeats [`heuristic_in`] from `start` until no neighbor improves or
/// `cap` replays have been spent in total.
#[allow(clippy::too_many_arguments)]
pub fn local_search(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    objective: &ObjectiveSpec,
    space: &ActionSpace,
    start: &PoisonAssignment,
    cap: usize,
    mut on_improve: impl FnMut(&PoisonAssignment, f64),
) -> Result<AttackResult> {
    let mut best = start.clone();
    let mut value = assignment_value(config, dataset, objective, &best)?;
    let mut evaluations = 1usize;
    let mut improvements = 0usize;
    loop {
        let room = cap.saturating_sub(evaluations);
        match heuristic_in(config, dataset, tm, objective, space, &best, room)? {
            HeuristicOutcome::Improved { assignment, value: v, evaluations: e } => {
                evaluations += e;
                improvements += 1;
                best = assignment;
                value = v;
                on_improve(&best, value);
            }
            HeuristicOutcome::Exhausted { optimal, evaluations: e } => {
                evaluations += e;
                return Ok(AttackResult { assignment: best, value, optimal, evaluations, improvements });
            }
        }
    }
}

/// Spends leftover budget on modifications that do not lower the objective:
/// while budget remains, the best single extra modification is adopted if
/// its replayed value is at least the current one. Returns the assignment,
/// its value and the number of replays.
#[allow(clippy::too_many_arguments)]
pub fn fill_budget(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    objective: &ObjectiveSpec,
    space: &ActionSpace,
    start: &PoisonAssignment,
    value: f64,
) -> Result<(PoisonAssignment, f64, usize)> {
    let scorer = objective.scorer(dataset);
    let (mut best, mut value, mut evaluations) = (start.clone(), value, 0usize);
    while best.budget_used() < tm.budget {
        let mut candidates = Vec::new();
        for i in 0..best.len() {
            if best.get(i).is_poisoned() {
                continue;
            }
            for k in 1..space.choices(i) {
                let mut a = best.clone();
                a.set(i, space.state(i, k));
                candidates.push(a);
            }
        }
        if candidates.is_empty() {
            break;
        }
        let mut top: Option<(usize, f64)> = None;
        for (c, chunk) in candidates.chunks(CHUNK).enumerate() {
            for (k, (_, v)) in replay_batched(config, dataset, chunk, &scorer)?.into_iter().enumerate() {
                if top.is_none_or(|(_, t)| v > t) {
                    top = Some((c * CHUNK + k, v));
                }
            }
        }
        evaluations += candidates.len();
        match top {
            Some((k, v)) if v >= value => {
                best = candidates.swap_remove(k);
                value = v;
            }
            _ => break,
        }
    }
    Ok((best, value, evaluations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_halfmoons;
    use crate::train::{Loss, Params};

    fn setup() -> (TrainConfig, Dataset) {
        let ds = make_halfmoons(12, 10, 0.2, 4).unwrap().with_schedule(4, 2).unwrap();
        (TrainConfig::new(0.5, Loss::Hinge, Params::seeded(&[2, 1], 7).unwrap()), ds)
    }

    fn brute_force(cfg: &TrainConfig, ds: &Dataset, tm: &ThreatModel, o: &ObjectiveSpec) -> f64 {
        let space = ActionSpace::exact(tm, ds).unwrap();
        space
            .completions(&PoisonAssignment::all_undecided(ds.n_train()), tm.budget)
            .iter()
            .map(|a| assignment_value(cfg, ds, o, a).unwrap())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn zero_budget_is_immediately_optimal() {
        let (cfg, ds) = setup();
        let out = heuristic_search(&cfg, &ds, &ThreatModel::label_flip(0), &ObjectiveSpec::test_error(), &PoisonAssignment::all_clean(12), 100)
            .unwrap();
        assert_eq!(out, HeuristicOutcome::Exhausted { optimal: true, evaluations: 0 });
    }

    #[test]
    fn fixed_point_matches_brute_force() {
        let (cfg, ds) = setup();
        for n in 1..=2 {
            let tm = ThreatModel::label_flip(n);
            for o in [ObjectiveSpec::test_error(), ObjectiveSpec::dos()] {
                let space = ActionSpace::exact(&tm, &ds).unwrap();
                let res = local_search(&cfg, &ds, &tm, &o, &space, &PoisonAssignment::all_clean(12), 100_000, |_, _| {}).unwrap();
                assert!(res.optimal);
                assert_eq!(res.value, brute_force(&cfg, &ds, &tm, &o));
                assert!(validate(&tm, &res.assignment, &ds).is_ok());
            }
        }
    }

    #[test]
    fn cap_stops_the_search() {
        let (cfg, ds) = setup();
        let tm = ThreatModel::label_flip(3);
        let out = heuristic_search(&cfg, &ds, &tm, &ObjectiveSpec::dos(), &PoisonAssignment::all_clean(12), 0).unwrap();
        assert_eq!(out, HeuristicOutcome::Exhausted { optimal: false, evaluations: 0 });
    }

    #[test]
    fn filling_keeps_the_value_and_uses_the_budget() {
        let (cfg, ds) = setup();
        let tm = ThreatModel::label_flip(3);
        let space = ActionSpace::exact(&tm, &ds).unwrap();
        let o = ObjectiveSpec::test_error();
        let clean = PoisonAssignment::all_clean(12);
        let v0 = assignment_value(&cfg, &ds, &o, &clean).unwrap();
        let (a, v, n) = fill_budget(&cfg, &ds, &tm, &o, &space, &clean, v0).unwrap();
        assert!(v >= v0);
        assert_eq!(v, assignment_value(&cfg, &ds, &o, &a).unwrap());
        assert!(validate(&tm, &a, &ds).is_ok());
        assert!(n > 0);
        let full = fill_budget(&cfg, &ds, &tm, &o, &space, &a, v).unwrap();
        if a.budget_used() == 3 {
            assert_eq!(full.2, 0);
        }
    }

    #[test]
    fn first_improvement_is_returned() {
        let (cfg, ds) = setup();
        let tm = ThreatModel::label_flip(1);
        let o = ObjectiveSpec::dos();
        let start = PoisonAssignment::all_clean(12);
        let base = assignment_value(&cfg, &ds, &o, &start).unwrap();
        if let HeuristicOutcome::Improved { assignment, value, evaluations } =
            heuristic_search(&cfg, &ds, &tm, &o, &start, 1000).unwrap()
        {
            assert!(value > base);
            // every earlier neighbor did not improve
            let space = ActionSpace::exact(&tm, &ds).unwrap();
            let earlier: Vec<_> = neighborhood_in(&start, 1, 1, &space).unwrap().take(evaluations - 1).collect();
            for a in &earlier {
                assert!(assignment_value(&cfg, &ds, &o, a).unwrap() <= base);
            }
            assert_eq!(assignment_value(&cfg, &ds, &o, &assignment).unwrap(), value);
        } else {
            panic!("a label flip always changes the hinge loss here");
        }
    }
}
