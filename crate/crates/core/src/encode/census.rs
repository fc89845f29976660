use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BuildOptions, MiqcpModel, VarKind};
use crate::data::{Dataset, Task};
use crate::interval::{BigMTable, Interval, Phase};
use crate::solve::{ObjectiveKind, ObjectiveSpec};
use crate::threat::{ThreatKind, ThreatModel};
use crate::train::{Loss, TrainConfig};

/// Variable and constraint counts per name family.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub variables: BTreeMap<String, usize>,
    pub binaries: BTreeMap<String, usize>,
    pub constraints: BTreeMap<String, usize>,
}

impl Census {
    pub fn of(model: &MiqcpModel) -> Census {
        let mut c = Census::default();
        for v in &model.variables {
            *c.variables.entry(v.family().to_string()).or_default() += 1;
            if v.kind == VarKind::Binary {
                *c.binaries.entry(v.family().to_string()).or_default() += 1;
            }
        }
        for k in &model.constraints {
            *c.constraints.entry(k.family().to_string()).or_default() += 1;
        }
        c
    }

    pub fn total_variables(&self) -> usize {
        self.variables.values().sum()
    }

    pub fn total_binaries(&self) -> usize {
        self.binaries.values().sum()
    }

    pub fn total_constraints(&self) -> usize {
        self.constraints.values().sum()
    }

    /// Comment lines written to the model file header.
    pub fn comment_lines(&self) -> Vec<String> {
        let mut out = vec![format!(
            "census totals variables {} binaries {} constraints {}",
            self.total_variables(),
            self.total_binaries(),
            self.total_constraints()
        )];
        for (fam, n) in &self.variables {
            let b = self.binaries.get(fam).copied().unwrap_or(0);
            out.push(format!("census var {fam} {n} binary {b}"));
        }
        for (fam, n) in &self.constraints {
            out.push(format!("census con {fam} {n}"));
        }
        out
    }

    /// Closed-form counts (see `docs/format.md`).
    pub fn predict(x: &CensusInputs) -> Census {
        let mut c = Census::default();
        let var = |c: &mut Census, fam: &str, n: usize, binary: bool| {
            if n > 0 {
                *c.variables.entry(fam.to_string()).or_default() += n;
                if binary {
                    *c.binaries.entry(fam.to_string()).or_default() += n;
                }
            }
        };
        let con = |c: &mut Census, fam: &str, n: usize| {
            if n > 0 {
                *c.constraints.entry(fam.to_string()).or_default() += n;
            }
        };
        let h = x.hidden();
        let w = x.weights();
        let p = x.params();

        // perturbation
        var(&mut c, "s", x.n_train, true);
        con(&mut c, "budget", 1);
        if x.aux {
            var(&mut c, "xa", x.budget * x.d, false);
            var(&mut c, "ya", x.budget, true);
            var(&mut c, "st", x.n_train * x.budget, true);
            con(&mut c, "stsum", x.n_train);
            con(&mut c, "stuse", x.budget);
        } else {
            var(&mut c, "xt", x.n_train * x.feature_vars, false);
            if x.grid > 0 {
                var(&mut c, "c", x.n_train * x.grid, true);
                con(&mut c, "pick", x.n_train);
                con(&mut c, "xgrid", x.n_train * x.feature_vars);
            } else {
                con(&mut c, "dxlo", x.n_train * x.feature_vars);
                con(&mut c, "dxhi", x.n_train * x.feature_vars);
            }
            if x.label_var {
                var(&mut c, "yt", x.n_train, x.label_binary);
            }
            con(&mut c, "ygrid", x.n_train * usize::from(x.label_grid));
            con(&mut c, "dylo", x.n_train * usize::from(x.label_radius));
            con(&mut c, "dyhi", x.n_train * usize::from(x.label_radius));
        }

        // training passes
        let passes = |c: &mut Census, pre: &str, count: usize, relu: usize, hinge: usize| {
            let f = |s: &str| format!("{pre}{s}");
            var(c, &f("u"), count * (h + 1), false);
            var(c, &f("z"), count * h, false);
            var(c, &f("a"), relu, true);
            var(c, &f("r"), count, false);
            var(c, &f("loss"), count, false);
            var(c, &f("g"), count, false);
            var(c, &f("dw"), count * w, false);
            var(c, &f("q"), count * h, false);
            var(c, &f("gu"), relu, false);
            con(c, &f("fwd"), count * (h + 1));
            con(c, &f("relu"), count * h - relu);
            for fam in ["relua", "relub", "reluc"] {
                con(c, &f(fam), relu);
            }
            con(c, &f("res"), count);
            con(c, &f("dl"), count);
            con(c, &f("bw"), count * w);
            con(c, &f("bq"), count * h);
            con(c, &f("bgu"), relu);
            match x.loss {
                Loss::Hinge => {
                    var(c, &f("h"), hinge, true);
                    con(c, &f("hinge"), count - hinge);
                    for fam in ["hingea", "hingeb", "hingec"] {
                        con(c, &f(fam), hinge);
                    }
                }
                Loss::SquaredError => con(c, &f("sq"), count),
            }
        };
        passes(&mut c, "", x.sample_passes, x.unstable_relu, x.unstable_hinge);
        if x.aux {
            passes(&mut c, "a", x.iterations * x.budget, x.aux_unstable_relu, x.aux_unstable_hinge);
        }

        // parameter updates
        var(&mut c, "w", x.iterations * w, false);
        var(&mut c, "b", x.iterations * (p - w), false);
        con(&mut c, "updw", x.iterations * w);
        con(&mut c, "updb", x.iterations * (p - w));

        // evaluation
        if x.test_block {
            let nt = x.n_test;
            var(&mut c, "tu", nt * (h + 1), false);
            var(&mut c, "tz", nt * h, false);
            var(&mut c, "ta", x.test_unstable_relu, true);
            var(&mut c, "p", nt, true);
            con(&mut c, "tfwd", nt * (h + 1));
            con(&mut c, "trelu", nt * h - x.test_unstable_relu);
            for fam in ["trelua", "trelub", "treluc"] {
                con(&mut c, fam, x.test_unstable_relu);
            }
            con(&mut c, "plo", nt);
            con(&mut c, "phi", nt);
        }

        var(&mut c, "m", x.products, false);
        for fam in ["mca", "mcb", "mcc", "mcd"] {
            con(&mut c, fam, x.products);
        }
        c
    }
}

/// Everything the closed-form census depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusInputs {
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
    /// `(rows, cols)` per layer.
    pub layers: Vec<(usize, usize)>,
    pub iterations: usize,
    /// Σ_t |B_t|.
    pub sample_passes: usize,
    pub budget: usize,
    pub loss: Loss,
    pub aux: bool,
    /// Perturbed feature variables per sample (0 or d).
    pub feature_vars: usize,
    /// Grid points when the substitution set is finite, else 0.
    pub grid: usize,
    pub label_var: bool,
    pub label_binary: bool,
    pub label_grid: bool,
    pub label_radius: bool,
    pub test_block: bool,
    pub unstable_relu: usize,
    pub unstable_hinge: usize,
    pub aux_unstable_relu: usize,
    pub aux_unstable_hinge: usize,
    pub test_unstable_relu: usize,
    /// Linearised products (0 unless requested).
    pub products: usize,
}

impl CensusInputs {
    fn hidden(&self) -> usize {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.0).sum()
    }

    fn weights(&self) -> usize {
        self.layers.iter().map(|l| l.0 * l.1).sum()
    }

    fn params(&self) -> usize {
        self.layers.iter().map(|l| l.0 * l.1 + l.0).sum()
    }

    /// Reads the problem shape and the stability counts of `table`.
    pub fn new(
        config: &TrainConfig,
        dataset: &Dataset,
        tm: &ThreatModel,
        objective: &ObjectiveSpec,
        table: &BigMTable,
        opts: &BuildOptions,
        products: usize,
    ) -> CensusInputs {
        let unstable = |v: &[Vec<Interval>]| -> usize {
            v[..v.len() - 1]
                .iter()
                .flatten()
                .filter(|b| b.phase() == Phase::Unstable)
                .count()
        };
        let hinge = |b: &Interval| usize::from(config.loss == Loss::Hinge && b.phase() == Phase::Unstable);
        let mut relu = 0;
        let mut hin = 0;
        for s in table.samples.iter().flatten() {
            let p = if opts.aux { &s.base } else { &s.any };
            relu += unstable(&p.u);
            hin += hinge(&p.residual);
        }
        let (mut arelu, mut ahin) = (0, 0);
        if opts.aux {
            for p in table.aux.iter().flatten() {
                arelu += unstable(&p.u) * tm.budget;
                ahin += hinge(&p.residual) * tm.budget;
            }
        }
        let test_block = objective.kind != ObjectiveKind::Dos;
        let test_unstable_relu = if test_block {
            table
                .test_hidden
                .iter()
                .flatten()
                .flatten()
                .filter(|b| b.phase() == Phase::Unstable)
                .count()
        } else {
            0
        };
        let cls = dataset.task == Task::Classification;
        let grid_fixes = tm.kind == ThreatKind::Substitution && tm.grid.is_some() && !tm.label_flip;
        let feature_vars = match tm.kind {
            ThreatKind::Bounded if tm.epsilon == 0.0 => 0,
            _ => dataset.d,
        };
        let label_radius = (cls && tm.label_flip) || (!cls && tm.nu > 0.0) || (!cls && grid_fixes);
        CensusInputs {
            n_train: dataset.n_train(),
            n_test: dataset.n_test(),
            d: dataset.d,
            layers: config.init.layers.iter().map(|l| (l.rows, l.cols)).collect(),
            iterations: dataset.iterations(),
            sample_passes: table.samples.iter().map(Vec::len).sum(),
            budget: tm.budget,
            loss: config.loss,
            aux: opts.aux,
            feature_vars,
            grid: if tm.kind == ThreatKind::Substitution { tm.grid.as_ref().map_or(0, Vec::len) } else { 0 },
            label_var: (cls && tm.label_flip) || grid_fixes || (!cls && tm.nu > 0.0),
            label_binary: cls,
            label_grid: grid_fixes,
            label_radius,
            test_block,
            unstable_relu: relu,
            unstable_hinge: hin,
            aux_unstable_relu: arelu,
            aux_unstable_hinge: ahin,
            test_unstable_relu,
            products,
        }
    }
}
