//! Certification engine: objectives, local search and branch-and-bound.

mod bnb;
mod heuristic;
mod objective;

pub use bnb::{
    branch_and_bound, branch_and_bound_with, heuristic_certificate, incumbent_hash, Branching, Certificate, EventKind,
    ProgressEvent, ProgressLog, Provenance, SolveOptions, Status,
};
pub use heuristic::{assignment_value, fill_budget, heuristic_in, heuristic_search, local_search, AttackResult, HeuristicOutcome};
pub use objective::{evaluate_objective, predict_class, ObjectiveKind, ObjectiveScore, ObjectiveSpec, TargetEntry};
