use std::collections::HashMap;

use super::MiqcpModel;
use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::threat::{validate, PoisonAssignment, SampleState, ThreatModel};
use crate::train::{forward_unchecked, replay, sample_record, Params, SampleRecord, TrainConfig};

/// A value for every variable, keyed by name.
pub type Witness = HashMap<String, f64>;

fn is_aux(model: &MiqcpModel) -> bool {
    model.meta.get("mode").is_some_and(|m| m == "auxiliary")
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Variable values induced by replaying `assignment`. The result satisfies
/// every constraint of `model` when the assignment is admissible.
pub fn witness(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    model: &MiqcpModel,
    assignment: &PoisonAssignment,
) -> Result<Witness> {
    if let Err(v) = validate(tm, assignment, dataset) {
        return Err(Error::validation(format!("assignment violates the threat model: {:?}", v[0])));
    }
    if let Some(i) = assignment.first_undecided() {
        return Err(Error::IncompleteAssignment(i));
    }
    let trace = replay(config, dataset, assignment)?;
    let aux = is_aux(model);
    let n = tm.budget;
    let poisoned = assignment.poisoned_indices();

    // auxiliary sample j carries the j-th poisoned value
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut aux_values: Vec<(Vec<f64>, f64)> = Vec::new();
    if aux {
        for (j, &i) in poisoned.iter().enumerate() {
            let (x, y) = assignment.effective(i, &dataset.train[i])?;
            slot.insert(i, j);
            aux_values.push((x.to_vec(), y));
        }
        while aux_values.len() < n {
            aux_values.push((tm.domain_lo.clone(), 0.0));
        }
    }

    let mut train: HashMap<(usize, usize), SampleRecord> = HashMap::new();
    let mut aux_rec: HashMap<(usize, usize), SampleRecord> = HashMap::new();
    for it in &trace.iterations {
        let theta = &trace.params[it.t - 1];
        for r in &it.samples {
            let rec = if aux {
                let c = &dataset.train[r.index];
                sample_record(theta, r.index, &c.features, c.label, config.loss)
            } else {
                r.clone()
            };
            train.insert((it.t, r.index), rec);
        }
        for (j, (x, y)) in aux_values.iter().enumerate() {
            aux_rec.insert((it.t, j), sample_record(theta, j, x, *y, config.loss));
        }
    }
    let final_params = trace.final_params();
    let test: Vec<_> = dataset.test.iter().map(|s| forward_unchecked(final_params, &s.features)).collect();

    let mut out = Witness::with_capacity(model.variables.len());
    for v in &model.variables {
        let fam = v.family();
        if fam == "m" {
            continue;
        }
        let ix = v.indices();
        let value = lookup(fam, &ix, &Ctx {
            dataset,
            tm,
            assignment,
            trace_params: &trace.params,
            train: &train,
            aux_rec: &aux_rec,
            aux_values: &aux_values,
            slot: &slot,
            test: &test,
        })
        .ok_or_else(|| Error::MissingWitnessValue(v.name.clone()))?;
        out.insert(v.name.clone(), value);
    }
    for p in &model.products {
        let a = out[&model.variables[p.left.0].name];
        let b = out[&model.variables[p.right.0].name];
        out.insert(model.variables[p.var.0].name.clone(), a * b);
    }
    Ok(out)
}

struct Ctx<'a> {
    dataset: &'a Dataset,
    tm: &'a ThreatModel,
    assignment: &'a PoisonAssignment,
    trace_params: &'a [Params],
    train: &'a HashMap<(usize, usize), SampleRecord>,
    aux_rec: &'a HashMap<(usize, usize), SampleRecord>,
    aux_values: &'a [(Vec<f64>, f64)],
    slot: &'a HashMap<usize, usize>,
    test: &'a [crate::train::ForwardCache],
}

fn lookup(fam: &str, ix: &[usize], c: &Ctx) -> Option<f64> {
    let ds = c.dataset;
    let state = |i: usize| c.assignment.states().get(i);
    let effective = |i: usize| c.assignment.effective(i, ds.train.get(i)?).ok();
    let v = match (fam, ix) {
        ("s", [i]) => bit(state(*i)?.is_poisoned()),
        ("st", [i, j]) => bit(c.slot.get(i) == Some(j)),
        ("xt", [i, f]) => *effective(*i)?.0.get(*f)?,
        ("yt", [i]) => effective(*i)?.1,
        ("c", [i, k]) => {
            let grid = c.tm.grid.as_ref()?;
            match state(*i)? {
                SampleState::Poisoned { features, label } => {
                    let fixes = !c.tm.label_flip;
                    let first = grid
                        .iter()
                        .position(|p| p.features == *features && (!fixes || p.label == *label))?;
                    bit(first == *k)
                }
                _ => 0.0,
            }
        }
        ("xa", [j, f]) => *c.aux_values.get(*j)?.0.get(*f)?,
        ("ya", [j]) => c.aux_values.get(*j)?.1,
        ("w", [t, k, r, col]) => c.trace_params.get(*t)?.layers.get(k.checked_sub(1)?)?.w(*r, *col),
        ("b", [t, k, r]) => *c.trace_params.get(*t)?.layers.get(k.checked_sub(1)?)?.bias.get(*r)?,
        ("p", [i]) => bit(c.test.get(*i)?.logit() >= 0.0),
        ("tu", [i, k, r]) => *c.test.get(*i)?.u.get(k.checked_sub(1)?)?.get(*r)?,
        ("tz", [i, k, r]) => *c.test.get(*i)?.z.get(*k)?.get(*r)?,
        ("ta", [i, k, r]) => bit(*c.test.get(*i)?.u.get(k.checked_sub(1)?)?.get(*r)? > 0.0),
        _ => {
            let aux_fam = fam.strip_prefix('a').filter(|r| PASS_FAMILIES.contains(r));
            let (pass_fam, rec, theta) = if let Some(rest) = aux_fam {
                match ix {
                    [t, j, ..] => (rest, c.aux_rec.get(&(*t, *j))?, c.trace_params.get(t.checked_sub(1)?)?),
                    _ => return None,
                }
            } else {
                match ix {
                    [t, i, ..] => (fam, c.train.get(&(*t, *i))?, c.trace_params.get(t.checked_sub(1)?)?),
                    _ => return None,
                }
            };
            pass_value(pass_fam, &ix[2..], rec, theta)?
        }
    };
    Some(v)
}

const PASS_FAMILIES: [&str; 10] = ["u", "z", "a", "r", "loss", "h", "g", "dw", "gu", "q"];

fn pass_value(fam: &str, ix: &[usize], rec: &SampleRecord, theta: &Params) -> Option<f64> {
    let v = match (fam, ix) {
        ("u", [k, r]) => *rec.cache.u.get(k.checked_sub(1)?)?.get(*r)?,
        ("z", [k, r]) => *rec.cache.z.get(*k)?.get(*r)?,
        ("a", [k, r]) => bit(*rec.cache.u.get(k.checked_sub(1)?)?.get(*r)? > 0.0),
        ("r", []) => rec.residual,
        ("loss", []) => rec.loss,
        ("h", []) => bit(rec.residual > 0.0),
        ("g", []) => rec.dloss,
        ("dw", [k, r, col]) => {
            let l = rec.grad.layers.get(k.checked_sub(1)?)?;
            *l.weights.get(r * l.cols + col)?
        }
        ("gu", [k, col]) => *rec.grad.layers.get(k.checked_sub(1)?)?.bias.get(*col)?,
        ("q", [k, col]) => {
            // dL/dz_k before the ReLU mask
            let next = theta.layers.get(*k)?;
            let g = &rec.grad.layers.get(*k)?.bias;
            let mut s = 0.0;
            for (r, gr) in g.iter().enumerate() {
                s += next.w(r, *col) * gr;
            }
            s
        }
        _ => return None,
    };
    Some(v)
}

fn get(w: &Witness, name: &str) -> Result<f64> {
    w.get(name).copied().ok_or_else(|| Error::MissingWitnessValue(name.to_string()))
}

/// Reads the poisoning decisions back out of a variable valuation.
pub fn decode_witness(dataset: &Dataset, model: &MiqcpModel, w: &Witness) -> Result<PoisonAssignment> {
    let aux = is_aux(model);
    let round = |y: f64| match dataset.task {
        Task::Classification => bit(y > 0.5),
        Task::Regression => y,
    };
    let mut states = Vec::with_capacity(dataset.n_train());
    for (i, clean) in dataset.train.iter().enumerate() {
        if get(w, &format!("s_{i}"))? <= 0.5 {
            states.push(SampleState::Clean);
            continue;
        }
        let (features, label) = if aux {
            let j = (0..)
                .map_while(|j| w.get(&format!("st_{i}_{j}")).map(|v| (j, *v)))
                .find(|(_, v)| *v > 0.5)
                .map(|(j, _)| j)
                .ok_or_else(|| Error::validation(format!("sample {i} is poisoned without an auxiliary slot")))?;
            let x = (0..dataset.d)
                .map(|f| get(w, &format!("xa_{j}_{f}")))
                .collect::<Result<Vec<_>>>()?;
            (x, round(get(w, &format!("ya_{j}"))?))
        } else {
            let x = (0..dataset.d)
                .map(|f| w.get(&format!("xt_{i}_{f}")).copied().unwrap_or(clean.features[f]))
                .collect();
            let y = w.get(&format!("yt_{i}")).copied().map(round).unwrap_or(clean.label);
            (x, y)
        };
        states.push(SampleState::poisoned(features, label));
    }
    Ok(PoisonAssignment::from_states(states))
}
