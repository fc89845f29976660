use serde::{Deserialize, Serialize};

use super::{MiqcpModel, VarKind, Witness, FEASIBILITY_TOL};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Constraint,
    Bound,
    Integrality,
}

/// A constraint (or variable bound) the valuation misses by `amount`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violated {
    pub name: String,
    pub kind: ViolationKind,
    pub amount: f64,
}

/// Model values in variable order; errors on the first missing name.
pub(crate) fn values_of(model: &MiqcpModel, w: &Witness) -> Result<Vec<f64>> {
    model
        .variables
        .iter()
        .map(|v| w.get(&v.name).copied().ok_or_else(|| Error::MissingWitnessValue(v.name.clone())))
        .collect()
}

/// Every bound, integrality and constraint violation above the absolute
/// tolerance. An empty list means the valuation is feasible.
pub fn check_feasible(model: &MiqcpModel, w: &Witness) -> Result<Vec<Violated>> {
    let values = values_of(model, w)?;
    let mut out = Vec::new();
    for (v, &x) in model.variables.iter().zip(&values) {
        let miss = (v.bounds.lo - x).max(x - v.bounds.hi).max(0.0);
        if miss > FEASIBILITY_TOL || x.is_nan() {
            out.push(Violated {
                name: v.name.clone(),
                kind: ViolationKind::Bound,
                amount: miss,
            });
        }
        if v.kind == VarKind::Binary {
            let frac = x.abs().min((x - 1.0).abs());
            if frac > FEASIBILITY_TOL {
                out.push(Violated {
                    name: v.name.clone(),
                    kind: ViolationKind::Integrality,
                    amount: frac,
                });
            }
        }
    }
    for c in &model.constraints {
        let amount = c.violation(&values);
        if amount > FEASIBILITY_TOL || amount.is_nan() {
            out.push(Violated {
                name: c.name.clone(),
                kind: ViolationKind::Constraint,
                amount,
            });
        }
    }
    Ok(out)
}
