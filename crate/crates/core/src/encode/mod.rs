//! Mixed-integer quadratically constrained formulation of the whole
//! poison → train → evaluate pipeline, plus its text format.
//!
//! Variable names are `family_i_j_...`: the family never contains an
//! underscore and every index is a non-negative integer, so names parse back
//! into their meaning. Iterations `t` and layers `k` are 1-based, sample,
//! neuron and feature indices 0-based.

mod build;
mod census;
mod feasibility;
mod lp;
mod witness;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::Interval;

pub use build::{build, BuildOptions};
pub use census::{Census, CensusInputs};
pub use feasibility::{check_feasible, Violated, ViolationKind};
pub use lp::{emit, emit_to_string, parse, parse_str};
pub use witness::{decode_witness, witness, Witness};

/// Margin separating a negative test logit from zero in the prediction constraint.
pub const TIE_BREAK: f64 = 1e-6;

/// Absolute tolerance of [`check_feasible`].
pub const FEASIBILITY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarRef {
    pub name: String,
    pub kind: VarKind,
    pub bounds: Interval,
}

impl VarRef {
    pub fn family(&self) -> &str {
        family_of(&self.name)
    }

    pub fn indices(&self) -> Vec<usize> {
        indices_of(&self.name)
    }
}

pub(crate) fn family_of(name: &str) -> &str {
    name.split('_').next().unwrap_or(name)
}

pub(crate) fn indices_of(name: &str) -> Vec<usize> {
    name.split('_').skip(1).filter_map(|s| s.parse().ok()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
}

impl Sense {
    pub fn symbol(self) -> &'static str {
        match self {
            Sense::Le => "<=",
            Sense::Eq => "=",
            Sense::Ge => ">=",
        }
    }
}

/// `Σ linear + Σ quadratic (sense) rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub linear: Vec<(f64, VarId)>,
    pub quadratic: Vec<(f64, VarId, VarId)>,
    pub sense: Sense,
    pub rhs: f64,
}

impl Constraint {
    pub fn family(&self) -> &str {
        family_of(&self.name)
    }

    pub fn activity(&self, values: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().map(|(c, v)| c * values[v.0]).sum();
        let quad: f64 = self.quadratic.iter().map(|(c, a, b)| c * values[a.0] * values[b.0]).sum();
        lin + quad
    }

    /// Amount by which `values` violate the constraint (0 when satisfied).
    pub fn violation(&self, values: &[f64]) -> f64 {
        let lhs = self.activity(values);
        match self.sense {
            Sense::Le => (lhs - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - lhs).max(0.0),
            Sense::Eq => (lhs - self.rhs).abs(),
        }
    }

    fn var_ids(&self) -> impl Iterator<Item = VarId> + '_ {
        self.linear
            .iter()
            .map(|t| t.1)
            .chain(self.quadratic.iter().flat_map(|t| [t.1, t.2]))
    }
}

/// Objective expression (always maximised).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub constant: f64,
    pub linear: Vec<(f64, VarId)>,
    pub quadratic: Vec<(f64, VarId, VarId)>,
}

impl Expression {
    pub fn value(&self, values: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().map(|(c, v)| c * values[v.0]).sum();
        let quad: f64 = self.quadratic.iter().map(|(c, a, b)| c * values[a.0] * values[b.0]).sum();
        self.constant + lin + quad
    }
}

/// Auxiliary variable standing for the product of two others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub var: VarId,
    pub left: VarId,
    pub right: VarId,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MiqcpModel {
    pub variables: Vec<VarRef>,
    pub constraints: Vec<Constraint>,
    pub objective: Expression,
    /// Linearised binary products (empty unless requested at build time).
    pub products: Vec<Product>,
    /// Free-form settings written to the file header.
    pub meta: BTreeMap<String, String>,
    #[serde(skip)]
    index: HashMap<String, VarId>,
}

impl PartialEq for MiqcpModel {
    fn eq(&self, o: &Self) -> bool {
        self.variables == o.variables
            && self.constraints == o.constraints
            && self.objective == o.objective
            && self.products == o.products
            && self.meta == o.meta
    }
}

impl MiqcpModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&self, name: &str) -> Option<VarId> {
        self.index.get(name).copied()
    }

    pub fn var_ref(&self, id: VarId) -> &VarRef {
        &self.variables[id.0]
    }

    pub fn add_var(&mut self, name: impl Into<String>, kind: VarKind, bounds: Interval) -> Result<VarId> {
        let name = name.into();
        check_name(&name)?;
        if self.index.contains_key(&name) {
            return Err(Error::validation(format!("duplicate variable {name}")));
        }
        if kind == VarKind::Binary && !(bounds.lo >= 0.0 && bounds.hi <= 1.0) {
            return Err(Error::validation(format!("binary {name} has bounds {bounds}")));
        }
        let id = VarId(self.variables.len());
        self.index.insert(name.clone(), id);
        self.variables.push(VarRef { name, kind, bounds });
        Ok(id)
    }

    pub fn add_constraint(&mut self, c: Constraint) -> Result<()> {
        check_name(&c.name)?;
        if let Some(bad) = c.var_ids().find(|v| v.0 >= self.variables.len()) {
            return Err(Error::validation(format!("constraint {} uses undeclared variable #{}", c.name, bad.0)));
        }
        if !c.rhs.is_finite() || c.linear.iter().any(|t| !t.0.is_finite()) || c.quadratic.iter().any(|t| !t.0.is_finite()) {
            return Err(Error::NonFiniteBound(format!("coefficient in constraint {}", c.name)));
        }
        self.constraints.push(c);
        Ok(())
    }

    pub fn num_binaries(&self) -> usize {
        self.variables.iter().filter(|v| v.kind == VarKind::Binary).count()
    }

    /// Number of variables whose family is `family`.
    pub fn family_size(&self, family: &str) -> usize {
        self.variables.iter().filter(|v| v.family() == family).count()
    }

    pub fn tie_break(&self) -> Option<f64> {
        self.meta.get("tiebreak").and_then(|s| s.parse().ok())
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty() && self.constraints.is_empty()
    }

    fn rebuild_index(&mut self) {
        self.index = self.variables.iter().enumerate().map(|(i, v)| (v.name.clone(), VarId(i))).collect();
    }
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if ok {
        Ok(())
    } else {
        Err(Error::validation(format!("invalid identifier {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_split_into_family_and_indices() {
        let v = VarRef {
            name: "dw_3_12_1_0_4".into(),
            kind: VarKind::Continuous,
            bounds: Interval::ZERO,
        };
        assert_eq!(v.family(), "dw");
        assert_eq!(v.indices(), vec![3, 12, 1, 0, 4]);
    }

    #[test]
    fn rejects_duplicates_and_bad_binaries() {
        let mut m = MiqcpModel::new();
        m.add_var("s_0", VarKind::Binary, Interval::UNIT).unwrap();
        assert!(m.add_var("s_0", VarKind::Binary, Interval::UNIT).is_err());
        assert!(m.add_var("s_1", VarKind::Binary, Interval::new(0.0, 2.0).unwrap()).is_err());
        assert!(m.add_var("1x", VarKind::Continuous, Interval::UNIT).is_err());
        let c = Constraint {
            name: "bad_0".into(),
            linear: vec![(1.0, VarId(7))],
            quadratic: vec![],
            sense: Sense::Le,
            rhs: 0.0,
        };
        assert!(m.add_constraint(c).is_err());
    }

    #[test]
    fn violation_by_sense() {
        let c = Constraint {
            name: "c".into(),
            linear: vec![(2.0, VarId(0))],
            quadratic: vec![(1.0, VarId(0), VarId(1))],
            sense: Sense::Le,
            rhs: 3.0,
        };
        assert_eq!(c.activity(&[1.0, 2.0]), 4.0);
        assert_eq!(c.violation(&[1.0, 2.0]), 1.0);
        assert_eq!(c.violation(&[1.0, 0.0]), 0.0);
    }
}
