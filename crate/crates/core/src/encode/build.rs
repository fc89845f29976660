use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Constraint, Expression, MiqcpModel, Product, Sense, VarId, VarKind, TIE_BREAK};
use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::interval::{BigMTable, Interval, PassBigM, Phase};
use crate::solve::{ObjectiveKind, ObjectiveSpec};
use crate::threat::{ThreatKind, ThreatModel};
use crate::train::{Loss, Params, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Gradient-level substitution with `n` shared auxiliary samples per
    /// iteration instead of per-sample perturbation variables.
    pub aux: bool,
    /// Replace every product involving a binary by an exact McCormick envelope.
    pub linearize: bool,
    pub tie_break: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            aux: false,
            linearize: false,
            tie_break: TIE_BREAK,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Term {
    Const(f64),
    Var(VarId),
}

#[derive(Debug, Default)]
struct Expr {
    constant: f64,
    lin: Vec<(f64, VarId)>,
    quad: Vec<(f64, VarId, VarId)>,
}

impl Expr {
    fn of(v: VarId) -> Self {
        Expr {
            lin: vec![(1.0, v)],
            ..Expr::default()
        }
    }

    fn term(&mut self, c: f64, t: Term) {
        match t {
            Term::Const(v) => self.constant += c * v,
            Term::Var(id) => self.lin.push((c, id)),
        }
    }

    fn into_parts(self) -> (f64, Vec<(f64, VarId)>, Vec<(f64, VarId, VarId)>) {
        let mut lin: Vec<(f64, VarId)> = Vec::with_capacity(self.lin.len());
        let mut seen: HashMap<VarId, usize> = HashMap::new();
        for (c, v) in self.lin {
            match seen.get(&v) {
                Some(&k) => lin[k].0 += c,
                None => {
                    seen.insert(v, lin.len());
                    lin.push((c, v));
                }
            }
        }
        lin.retain(|t| t.0 != 0.0);
        let mut quad: Vec<(f64, VarId, VarId)> = Vec::with_capacity(self.quad.len());
        let mut seenq: HashMap<(VarId, VarId), usize> = HashMap::new();
        for (c, a, b) in self.quad {
            let key = if a <= b { (a, b) } else { (b, a) };
            match seenq.get(&key) {
                Some(&k) => quad[k].0 += c,
                None => {
                    seenq.insert(key, quad.len());
                    quad.push((c, key.0, key.1));
                }
            }
        }
        quad.retain(|t| t.0 != 0.0);
        (self.constant, lin, quad)
    }
}

/// Index arithmetic over the layer-major flat parameter vector.
struct Shapes {
    layers: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    len: usize,
}

impl Shapes {
    fn of(p: &Params) -> Self {
        let mut offsets = Vec::new();
        let mut pos = 0;
        for l in &p.layers {
            offsets.push(pos);
            pos += l.rows * l.cols + l.rows;
        }
        Shapes {
            layers: p.layers.iter().map(|l| (l.rows, l.cols)).collect(),
            offsets,
            len: pos,
        }
    }

    fn depth(&self) -> usize {
        self.layers.len()
    }

    fn w(&self, k: usize, r: usize, c: usize) -> usize {
        self.offsets[k] + r * self.layers[k].1 + c
    }

    fn b(&self, k: usize, r: usize) -> usize {
        self.offsets[k] + self.layers[k].0 * self.layers[k].1 + r
    }

    /// `(name suffix, family)` of flat entry `e` at iteration `t`.
    fn param_name(&self, t: usize, e: usize) -> (String, &'static str) {
        let k = self.offsets.iter().rposition(|&o| o <= e).expect("offset 0 present");
        let (rows, cols) = self.layers[k];
        let off = e - self.offsets[k];
        if off < rows * cols {
            (format!("w_{t}_{}_{}_{}", k + 1, off / cols, off % cols), "updw")
        } else {
            (format!("b_{t}_{}_{}", k + 1, off - rows * cols), "updb")
        }
    }
}

struct Pass {
    loss: Term,
    grad: Vec<Term>,
}

struct Builder {
    m: MiqcpModel,
    linearize: bool,
    products: HashMap<(VarId, VarId), VarId>,
}

impl Builder {
    fn var(&mut self, name: String, bounds: Interval) -> Result<VarId> {
        if !bounds.is_finite() {
            return Err(Error::NonFiniteBound(name));
        }
        self.m.add_var(name, VarKind::Continuous, bounds)
    }

    fn bin(&mut self, name: String) -> Result<VarId> {
        self.m.add_var(name, VarKind::Binary, Interval::UNIT)
    }

    fn is_binary(&self, v: VarId) -> bool {
        self.m.variables[v.0].kind == VarKind::Binary
    }

    fn prod(&mut self, e: &mut Expr, c: f64, a: Term, b: Term) -> Result<()> {
        match (a, b) {
            (Term::Const(x), Term::Const(y)) => e.constant += c * (x * y),
            (Term::Const(x), Term::Var(v)) | (Term::Var(v), Term::Const(x)) => {
                if x != 0.0 {
                    e.lin.push((c * x, v));
                }
            }
            (Term::Var(x), Term::Var(y)) => {
                if self.linearize && (self.is_binary(x) || self.is_binary(y)) {
                    let p = self.product(x, y)?;
                    e.lin.push((c, p));
                } else {
                    e.quad.push((c, x, y));
                }
            }
        }
        Ok(())
    }

    /// McCormick envelope of `a·b`; exact when one factor is binary.
    fn product(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let key = if a <= b { (a, b) } else { (b, a) };
        if let Some(&p) = self.products.get(&key) {
            return Ok(p);
        }
        let (a, b) = if self.is_binary(key.1) && !self.is_binary(key.0) {
            (key.1, key.0)
        } else {
            key
        };
        let n = self.m.products.len();
        let ab = self.m.variables[a.0].bounds;
        let bb = self.m.variables[b.0].bounds;
        let p = self.var(format!("m_{n}"), ab.mul(&bb))?;
        let rows = [
            ("mca", ab.lo, bb.lo, Sense::Ge),
            ("mcb", ab.hi, bb.hi, Sense::Ge),
            ("mcc", ab.hi, bb.lo, Sense::Le),
            ("mcd", ab.lo, bb.hi, Sense::Le),
        ];
        for (fam, ca, cb, sense) in rows {
            // p - ca·b - cb·a (sense) -ca·cb
            let e = Expr {
                constant: ca * cb,
                lin: vec![(1.0, p), (-ca, b), (-cb, a)],
                quad: Vec::new(),
            };
            self.constrain(format!("{fam}_{n}"), e, sense)?;
        }
        self.m.products.push(Product { var: p, left: a, right: b });
        self.products.insert(key, p);
        Ok(p)
    }

    fn constrain(&mut self, name: String, e: Expr, sense: Sense) -> Result<()> {
        let (constant, linear, quadratic) = e.into_parts();
        let rhs = if constant == 0.0 { 0.0 } else { -constant };
        self.m.add_constraint(Constraint {
            name,
            linear,
            quadratic,
            sense,
            rhs,
        })
    }

    /// Forward pass; returns pre-activation terms per layer, hidden
    /// activations and ReLU indicators.
    #[allow(clippy::type_complexity)]
    fn forward(
        &mut self,
        sh: &Shapes,
        pre: &str,
        idx: &str,
        theta: &[Term],
        x: &[Term],
        ub: &[Vec<Interval>],
    ) -> Result<(Vec<Vec<Term>>, Vec<Vec<Term>>, Vec<Vec<Term>>)> {
        let depth = sh.depth();
        let mut inputs: Vec<Vec<Term>> = vec![x.to_vec()];
        let mut acts = Vec::new();
        let mut us = Vec::new();
        for k in 0..depth {
            let (rows, cols) = sh.layers[k];
            let mut u = Vec::with_capacity(rows);
            for r in 0..rows {
                let name = format!("{pre}u_{idx}_{}_{r}", k + 1);
                let bound = *ub
                    .get(k)
                    .and_then(|l| l.get(r))
                    .ok_or_else(|| Error::MissingBound(name.clone()))?;
                let v = self.var(name, bound)?;
                let mut e = Expr::of(v);
                for c in 0..cols {
                    self.prod(&mut e, -1.0, theta[sh.w(k, r, c)], inputs[k][c])?;
                }
                e.term(-1.0, theta[sh.b(k, r)]);
                self.constrain(format!("{pre}fwd_{idx}_{}_{r}", k + 1), e, Sense::Eq)?;
                u.push(v);
            }
            if k + 1 < depth {
                let mut z = Vec::with_capacity(rows);
                let mut a = Vec::with_capacity(rows);
                for (r, &uv) in u.iter().enumerate() {
                    let tag = format!("{idx}_{}_{r}", k + 1);
                    let bound = ub[k][r];
                    let zv = self.var(format!("{pre}z_{tag}"), bound.relu())?;
                    match bound.phase() {
                        Phase::On => {
                            let mut e = Expr::of(zv);
                            e.lin.push((-1.0, uv));
                            self.constrain(format!("{pre}relu_{tag}"), e, Sense::Eq)?;
                            a.push(Term::Const(1.0));
                        }
                        Phase::Off => {
                            self.constrain(format!("{pre}relu_{tag}"), Expr::of(zv), Sense::Eq)?;
                            a.push(Term::Const(0.0));
                        }
                        Phase::Unstable => {
                            let av = self.bin(format!("{pre}a_{tag}"))?;
                            // z >= u
                            let mut e = Expr::of(zv);
                            e.lin.push((-1.0, uv));
                            self.constrain(format!("{pre}relua_{tag}"), e, Sense::Ge)?;
                            // z <= u - L(1 - a)
                            let mut e = Expr::of(zv);
                            e.lin.push((-1.0, uv));
                            e.lin.push((-bound.lo, av));
                            e.constant = bound.lo;
                            self.constrain(format!("{pre}relub_{tag}"), e, Sense::Le)?;
                            // z <= U a
                            let mut e = Expr::of(zv);
                            e.lin.push((-bound.hi, av));
                            self.constrain(format!("{pre}reluc_{tag}"), e, Sense::Le)?;
                            a.push(Term::Var(av));
                        }
                    }
                    z.push(Term::Var(zv));
                }
                inputs.push(z);
                acts.push(a);
            }
            us.push(u.into_iter().map(Term::Var).collect());
        }
        Ok((us, inputs, acts))
    }

    /// Loss value and dL/dŷ for a training pass.
    fn loss_block(&mut self, pre: &str, idx: &str, loss: Loss, logit: Term, y: Term, b: &PassBigM) -> Result<(Term, Term)> {
        let r = self.var(format!("{pre}r_{idx}"), b.residual)?;
        let l = self.var(format!("{pre}loss_{idx}"), b.loss)?;
        let g = self.var(format!("{pre}g_{idx}"), b.dloss)?;
        match loss {
            Loss::Hinge => {
                // r = 1 - (2y - 1) ŷ
                let mut e = Expr::of(r);
                self.prod(&mut e, 2.0, y, logit)?;
                e.term(-1.0, logit);
                e.constant = -1.0;
                self.constrain(format!("{pre}res_{idx}"), e, Sense::Eq)?;
                let h = match b.residual.phase() {
                    Phase::On => {
                        let mut e = Expr::of(l);
                        e.lin.push((-1.0, r));
                        self.constrain(format!("{pre}hinge_{idx}"), e, Sense::Eq)?;
                        Term::Const(1.0)
                    }
                    Phase::Off => {
                        self.constrain(format!("{pre}hinge_{idx}"), Expr::of(l), Sense::Eq)?;
                        Term::Const(0.0)
                    }
                    Phase::Unstable => {
                        let h = self.bin(format!("{pre}h_{idx}"))?;
                        let lo = b.residual.lo;
                        let hi = b.residual.hi;
                        let mut e = Expr::of(l);
                        e.lin.push((-1.0, r));
                        self.constrain(format!("{pre}hingea_{idx}"), e, Sense::Ge)?;
                        let mut e = Expr::of(l);
                        e.lin.push((-1.0, r));
                        e.lin.push((-lo, h));
                        e.constant = lo;
                        self.constrain(format!("{pre}hingeb_{idx}"), e, Sense::Le)?;
                        let mut e = Expr::of(l);
                        e.lin.push((-hi, h));
                        self.constrain(format!("{pre}hingec_{idx}"), e, Sense::Le)?;
                        Term::Var(h)
                    }
                };
                // g = -(2y - 1) h
                let mut e = Expr::of(g);
                e.term(-1.0, h);
                self.prod(&mut e, 2.0, y, h)?;
                self.constrain(format!("{pre}dl_{idx}"), e, Sense::Eq)?;
            }
            Loss::SquaredError => {
                let mut e = Expr::of(r);
                e.term(-1.0, logit);
                e.term(1.0, y);
                self.constrain(format!("{pre}res_{idx}"), e, Sense::Eq)?;
                let mut e = Expr::of(l);
                e.quad.push((-1.0, r, r));
                self.constrain(format!("{pre}sq_{idx}"), e, Sense::Eq)?;
                let mut e = Expr::of(g);
                e.lin.push((-2.0, r));
                self.constrain(format!("{pre}dl_{idx}"), e, Sense::Eq)?;
            }
        }
        Ok((Term::Var(l), Term::Var(g)))
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &mut self,
        sh: &Shapes,
        pre: &str,
        idx: &str,
        theta: &[Term],
        theta_b: &[Interval],
        inputs: &[Vec<Term>],
        acts: &[Vec<Term>],
        g: Term,
        b: &PassBigM,
    ) -> Result<Vec<Term>> {
        let depth = sh.depth();
        let mut grad = vec![Term::Const(0.0); sh.len];
        let mut gu = vec![g];
        let mut gu_b = vec![b.dloss];
        for k in (0..depth).rev() {
            let (rows, cols) = sh.layers[k];
            for r in 0..rows {
                for c in 0..cols {
                    let e_idx = sh.w(k, r, c);
                    let dw = self.var(format!("{pre}dw_{idx}_{}_{r}_{c}", k + 1), b.grad[e_idx])?;
                    let mut e = Expr::of(dw);
                    self.prod(&mut e, -1.0, gu[r], inputs[k][c])?;
                    self.constrain(format!("{pre}bw_{idx}_{}_{r}_{c}", k + 1), e, Sense::Eq)?;
                    grad[e_idx] = Term::Var(dw);
                }
                grad[sh.b(k, r)] = gu[r];
            }
            if k == 0 {
                break;
            }
            let mut next = Vec::with_capacity(cols);
            let mut next_b = Vec::with_capacity(cols);
            for c in 0..cols {
                let tag = format!("{idx}_{k}_{c}");
                let qb = (0..rows).fold(Interval::ZERO, |acc, r| acc.add(&theta_b[sh.w(k, r, c)].mul(&gu_b[r])));
                let q = self.var(format!("{pre}q_{tag}"), qb)?;
                let mut e = Expr::of(q);
                for r in 0..rows {
                    self.prod(&mut e, -1.0, theta[sh.w(k, r, c)], gu[r])?;
                }
                self.constrain(format!("{pre}bq_{tag}"), e, Sense::Eq)?;
                let bias_b = b.grad[sh.b(k - 1, c)];
                let t = match acts[k - 1][c] {
                    Term::Const(a) if a == 0.0 => Term::Const(0.0),
                    Term::Const(_) => Term::Var(q),
                    a @ Term::Var(_) => {
                        let v = self.var(format!("{pre}gu_{tag}"), bias_b)?;
                        let mut e = Expr::of(v);
                        self.prod(&mut e, -1.0, a, Term::Var(q))?;
                        self.constrain(format!("{pre}bgu_{tag}"), e, Sense::Eq)?;
                        Term::Var(v)
                    }
                };
                next.push(t);
                next_b.push(bias_b);
            }
            gu = next;
            gu_b = next_b;
        }
        Ok(grad)
    }

    #[allow(clippy::too_many_arguments)]
    fn train_pass(
        &mut self,
        sh: &Shapes,
        pre: &str,
        idx: &str,
        loss: Loss,
        theta: &[Term],
        theta_b: &[Interval],
        x: &[Term],
        y: Term,
        b: &PassBigM,
    ) -> Result<Pass> {
        let (us, inputs, acts) = self.forward(sh, pre, idx, theta, x, &b.u)?;
        let logit = us[sh.depth() - 1][0];
        let (l, g) = self.loss_block(pre, idx, loss, logit, y, b)?;
        let grad = self.backward(sh, pre, idx, theta, theta_b, &inputs, &acts, g, b)?;
        Ok(Pass { loss: l, grad })
    }
}

fn check_aux(tm: &ThreatModel, dataset: &Dataset) -> Result<()> {
    if tm.kind != ThreatKind::Substitution || dataset.task != Task::Classification || !tm.label_flip || tm.grid.is_some() {
        return Err(Error::Unsupported(
            "the auxiliary formulation needs a gridless substitution threat with free labels on a classification task"
                .into(),
        ));
    }
    Ok(())
}

/// Perturbed input of training sample `i` in the direct formulation.
fn perturbation(b: &mut Builder, tm: &ThreatModel, dataset: &Dataset, i: usize, s: VarId) -> Result<(Vec<Term>, Term)> {
    let clean = &dataset.train[i];
    let d = dataset.d;
    let mut x = Vec::with_capacity(d);
    let mut choice = Vec::new();
    match (&tm.kind, &tm.grid) {
        (ThreatKind::Bounded, _) if tm.epsilon == 0.0 => x.extend(clean.features.iter().map(|&v| Term::Const(v))),
        (ThreatKind::Bounded, _) => {
            let eps = tm.epsilon;
            for (f, &v) in clean.features.iter().enumerate() {
                let xt = b.var(format!("xt_{i}_{f}"), Interval { lo: v - eps, hi: v + eps })?;
                let mut e = Expr::of(xt);
                e.lin.push((eps, s));
                e.constant = -v;
                b.constrain(format!("dxlo_{i}_{f}"), e, Sense::Ge)?;
                let mut e = Expr::of(xt);
                e.lin.push((-eps, s));
                e.constant = -v;
                b.constrain(format!("dxhi_{i}_{f}"), e, Sense::Le)?;
                x.push(Term::Var(xt));
            }
        }
        (ThreatKind::Substitution, None) => {
            for (f, &v) in clean.features.iter().enumerate() {
                let (lo, hi) = (tm.domain_lo[f], tm.domain_hi[f]);
                let xt = b.var(format!("xt_{i}_{f}"), Interval { lo: lo.min(v), hi: hi.max(v) })?;
                // x(1-s) + L s <= x~ <= x(1-s) + U s
                let mut e = Expr::of(xt);
                e.lin.push((v - lo, s));
                e.constant = -v;
                b.constrain(format!("dxlo_{i}_{f}"), e, Sense::Ge)?;
                let mut e = Expr::of(xt);
                e.lin.push((v - hi, s));
                e.constant = -v;
                b.constrain(format!("dxhi_{i}_{f}"), e, Sense::Le)?;
                x.push(Term::Var(xt));
            }
        }
        (ThreatKind::Substitution, Some(grid)) => {
            for k in 0..grid.len() {
                choice.push(b.bin(format!("c_{i}_{k}"))?);
            }
            let mut e = Expr::default();
            for &c in &choice {
                e.lin.push((1.0, c));
            }
            e.lin.push((-1.0, s));
            b.constrain(format!("pick_{i}"), e, Sense::Eq)?;
            for (f, &v) in clean.features.iter().enumerate() {
                let bound = grid
                    .iter()
                    .fold(Interval::point(v), |acc, p| acc.hull(&Interval::point(p.features[f])));
                let xt = b.var(format!("xt_{i}_{f}"), bound)?;
                let mut e = Expr::of(xt);
                e.lin.push((v, s));
                for (k, &c) in choice.iter().enumerate() {
                    e.lin.push((-grid[k].features[f], c));
                }
                e.constant = -v;
                b.constrain(format!("xgrid_{i}_{f}"), e, Sense::Eq)?;
                x.push(Term::Var(xt));
            }
        }
    }
    let y0 = clean.label;
    let grid_label = tm.grid.as_ref().filter(|_| !tm.label_flip && tm.kind == ThreatKind::Substitution);
    let y = match dataset.task {
        Task::Classification if tm.label_flip => {
            let yt = b.bin(format!("yt_{i}"))?;
            // y(1-s) <= y~ <= y(1-s) + s
            let mut e = Expr::of(yt);
            e.lin.push((y0, s));
            e.constant = -y0;
            b.constrain(format!("dylo_{i}"), e, Sense::Ge)?;
            let mut e = Expr::of(yt);
            e.lin.push((y0 - 1.0, s));
            e.constant = -y0;
            b.constrain(format!("dyhi_{i}"), e, Sense::Le)?;
            Term::Var(yt)
        }
        _ if grid_label.is_some() => {
            let grid = grid_label.expect("checked");
            let bound = grid.iter().fold(Interval::point(y0), |acc, p| acc.hull(&Interval::point(p.label)));
            let yt = match dataset.task {
                Task::Classification => b.bin(format!("yt_{i}"))?,
                Task::Regression => b.var(format!("yt_{i}"), bound)?,
            };
            let mut e = Expr::of(yt);
            e.lin.push((y0, s));
            for (k, &c) in choice.iter().enumerate() {
                e.lin.push((-grid[k].label, c));
            }
            e.constant = -y0;
            b.constrain(format!("ygrid_{i}"), e, Sense::Eq)?;
            if dataset.task == Task::Regression {
                label_radius(b, i, yt, y0, tm.nu, s)?;
            }
            Term::Var(yt)
        }
        Task::Regression if tm.nu > 0.0 => {
            let yt = b.var(format!("yt_{i}"), Interval { lo: y0 - tm.nu, hi: y0 + tm.nu })?;
            label_radius(b, i, yt, y0, tm.nu, s)?;
            Term::Var(yt)
        }
        _ => Term::Const(y0),
    };
    Ok((x, y))
}

fn label_radius(b: &mut Builder, i: usize, yt: VarId, y0: f64, nu: f64, s: VarId) -> Result<()> {
    let mut e = Expr::of(yt);
    e.lin.push((nu, s));
    e.constant = -y0;
    b.constrain(format!("dylo_{i}"), e, Sense::Ge)?;
    let mut e = Expr::of(yt);
    e.lin.push((-nu, s));
    e.constant = -y0;
    b.constrain(format!("dyhi_{i}"), e, Sense::Le)
}

/// Compiles the attack problem into an explicit model. Every big-M constant
/// comes from `table`, which must describe all trajectories the threat
/// model allows (i.e. be computed from the all-undecided assignment).
pub fn build(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    objective: &ObjectiveSpec,
    table: &BigMTable,
    opts: &BuildOptions,
) -> Result<MiqcpModel> {
    config.check(dataset)?;
    tm.check(dataset)?;
    objective.check(dataset)?;
    if !(opts.tie_break > 0.0 && opts.tie_break.is_finite()) {
        return Err(Error::validation("tie-break constant must be positive"));
    }
    if opts.aux {
        check_aux(tm, dataset)?;
    }
    let iters = dataset.iterations();
    if table.iterations() != iters || table.params.len() != iters + 1 {
        return Err(Error::DimensionMismatch {
            context: "big-M table iterations",
            expected: iters,
            actual: table.iterations(),
        });
    }
    let sh = Shapes::of(&config.init);
    let n = tm.budget;
    let n_train = dataset.n_train();
    let mut b = Builder {
        m: MiqcpModel::new(),
        linearize: opts.linearize,
        products: HashMap::new(),
    };
    let meta = &mut b.m.meta;
    meta.insert("mode".into(), if opts.aux { "auxiliary" } else { "direct" }.into());
    meta.insert("linearized".into(), opts.linearize.to_string());
    meta.insert("loss".into(), format!("{:?}", config.loss).to_lowercase());
    meta.insert("iterations".into(), iters.to_string());
    meta.insert("budget".into(), n.to_string());

    let s: Vec<VarId> = (0..n_train)
        .map(|i| {
            let bound = if n == 0 { Interval::ZERO } else { Interval::UNIT };
            b.m.add_var(format!("s_{i}"), VarKind::Binary, bound)
        })
        .collect::<Result<_>>()?;
    let mut e = Expr::default();
    for &v in &s {
        e.lin.push((1.0, v));
    }
    e.constant = -(n as f64);
    b.constrain("budget".into(), e, Sense::Le)?;

    let mut inputs: Vec<(Vec<Term>, Term)> = Vec::new();
    let mut aux_in: Vec<(Vec<Term>, Term)> = Vec::new();
    let mut st: Vec<Vec<VarId>> = Vec::new();
    if opts.aux {
        for j in 0..n {
            let x = (0..dataset.d)
                .map(|f| {
                    b.var(format!("xa_{j}_{f}"), Interval { lo: tm.domain_lo[f], hi: tm.domain_hi[f] })
                        .map(Term::Var)
                })
                .collect::<Result<Vec<_>>>()?;
            let y = b.bin(format!("ya_{j}"))?;
            aux_in.push((x, Term::Var(y)));
        }
        for (i, &si) in s.iter().enumerate() {
            let row = (0..n).map(|j| b.bin(format!("st_{i}_{j}"))).collect::<Result<Vec<_>>>()?;
            let mut e = Expr::default();
            for &v in &row {
                e.lin.push((1.0, v));
            }
            e.lin.push((-1.0, si));
            b.constrain(format!("stsum_{i}"), e, Sense::Eq)?;
            st.push(row);
        }
        for j in 0..n {
            let mut e = Expr::default();
            for row in &st {
                e.lin.push((1.0, row[j]));
            }
            e.constant = -1.0;
            b.constrain(format!("stuse_{j}"), e, Sense::Le)?;
        }
        for c in &dataset.train {
            inputs.push((c.features.iter().map(|&v| Term::Const(v)).collect(), Term::Const(c.label)));
        }
    } else {
        for (i, &si) in s.iter().enumerate() {
            inputs.push(perturbation(&mut b, tm, dataset, i, si)?);
        }
    }

    let mut theta: Vec<Term> = config.init.flat().into_iter().map(Term::Const).collect();
    let mut objective_expr = Expr::default();
    let dos = objective.kind == ObjectiveKind::Dos;
    for t in 1..=iters {
        let batch = dataset.batch_range(t);
        let row = &table.samples[t - 1];
        if row.len() != batch.len() {
            return Err(Error::MissingBound(format!("samples of iteration {t}")));
        }
        let theta_b = &table.params[t - 1];
        let scale = config.lr_at(t) / batch.len() as f64;
        let mut upd: Vec<Expr> = (0..sh.len).map(|_| Expr::default()).collect();

        let mut aux_passes = Vec::new();
        if opts.aux && n > 0 {
            let ab = table.aux[t - 1]
                .as_ref()
                .ok_or_else(|| Error::MissingBound(format!("auxiliary pass at iteration {t}")))?;
            for (j, (x, y)) in aux_in.iter().enumerate() {
                aux_passes.push(b.train_pass(&sh, "a", &format!("{t}_{j}"), config.loss, &theta, theta_b, x, *y, ab)?);
            }
        }
        for (sb, i) in row.iter().zip(batch.clone()) {
            if sb.i != i {
                return Err(Error::MissingBound(format!("sample {i} at iteration {t}")));
            }
            let bounds = if opts.aux {
                &sb.base
            } else {
                if n > 0 && sb.adversarial.is_none() {
                    return Err(Error::MissingBound(format!("perturbed pass of sample {i} at iteration {t}")));
                }
                &sb.any
            };
            let (x, y) = &inputs[i];
            let p = b.train_pass(&sh, "", &format!("{t}_{i}"), config.loss, &theta, theta_b, x, *y, bounds)?;
            for (e, g) in upd.iter_mut().zip(&p.grad) {
                e.term(scale, *g);
            }
            if dos {
                objective_expr.term(1.0, p.loss);
            }
            if opts.aux {
                let si = Term::Var(s[i]);
                for (e, g) in upd.iter_mut().zip(&p.grad) {
                    b.prod(e, -scale, si, *g)?;
                }
                if dos {
                    b.prod(&mut objective_expr, -1.0, si, p.loss)?;
                }
                for (j, ap) in aux_passes.iter().enumerate() {
                    let sij = Term::Var(st[i][j]);
                    for (e, g) in upd.iter_mut().zip(&ap.grad) {
                        b.prod(e, scale, sij, *g)?;
                    }
                    if dos {
                        b.prod(&mut objective_expr, 1.0, sij, ap.loss)?;
                    }
                }
            }
        }
        let next_b = &table.params[t];
        let mut next = Vec::with_capacity(sh.len);
        for (e_idx, mut e) in upd.into_iter().enumerate() {
            let (name, fam) = sh.param_name(t, e_idx);
            let suffix = name.split_once('_').map(|x| x.1).unwrap_or_default().to_string();
            let v = b.var(name, next_b[e_idx])?;
            e.lin.insert(0, (1.0, v));
            e.term(-1.0, theta[e_idx]);
            b.constrain(format!("{fam}_{suffix}"), e, Sense::Eq)?;
            next.push(Term::Var(v));
        }
        theta = next;
    }

    if !dos {
        if table.test.len() != dataset.n_test() || table.test_hidden.len() != dataset.n_test() {
            return Err(Error::MissingBound("test-logit constants".into()));
        }
        b.m.meta.insert("tiebreak".into(), format!("{:?}", opts.tie_break));
        let eps = opts.tie_break;
        for (i, sample) in dataset.test.iter().enumerate() {
            let x: Vec<Term> = sample.features.iter().map(|&v| Term::Const(v)).collect();
            let mut ub = table.test_hidden[i].clone();
            ub.push(vec![table.test[i]]);
            let (us, _, _) = b.forward(&sh, "t", &i.to_string(), &theta, &x, &ub)?;
            let logit = match us[sh.depth() - 1][0] {
                Term::Var(v) => v,
                Term::Const(_) => unreachable!("logits are variables"),
            };
            let (lo, hi) = (table.test[i].lo, table.test[i].hi);
            let p = b.bin(format!("p_{i}"))?;
            // L(1-p) <= ŷ
            let mut e = Expr::of(logit);
            e.lin.push((lo, p));
            e.constant = -lo;
            b.constrain(format!("plo_{i}"), e, Sense::Ge)?;
            // ŷ <= U p - ε(1-p)
            let mut e = Expr::of(logit);
            e.lin.push((-(hi + eps), p));
            e.constant = eps;
            b.constrain(format!("phi_{i}"), e, Sense::Le)?;
            match objective.kind {
                ObjectiveKind::TestError => {
                    if sample.label == 1.0 {
                        objective_expr.constant += 1.0;
                        objective_expr.lin.push((-1.0, p));
                    } else {
                        objective_expr.lin.push((1.0, p));
                    }
                }
                ObjectiveKind::Targeted => {
                    for target in objective.targets.iter().filter(|g| g.index == i) {
                        if target.label == 1.0 {
                            objective_expr.lin.push((1.0, p));
                        } else {
                            objective_expr.constant += 1.0;
                            objective_expr.lin.push((-1.0, p));
                        }
                    }
                }
                ObjectiveKind::Dos => unreachable!(),
            }
        }
    }
    let (constant, linear, quadratic) = objective_expr.into_parts();
    b.m.objective = Expression { constant, linear, quadratic };
    Ok(b.m)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{make_halfmoons, Sample};
    use crate::encode::{check_feasible, decode_witness, witness, Census, CensusInputs, ViolationKind};
    use crate::interval::{big_m_tables, propagate, Mode};
    use crate::solve::evaluate_objective;
    use crate::threat::{validate, ActionSpace, GridOptions, PoisonAssignment, SampleState};
    use crate::train::replay;

    struct Case {
        cfg: TrainConfig,
        ds: Dataset,
        tm: ThreatModel,
        obj: ObjectiveSpec,
    }

    fn moons(dims: &[usize], tm: ThreatModel) -> Case {
        let ds = make_halfmoons(8, 4, 0.1, 3).unwrap().with_schedule(4, 2).unwrap();
        let cfg = TrainConfig::new(0.3, Loss::Hinge, Params::seeded(dims, 5).unwrap());
        Case { cfg, ds, tm, obj: ObjectiveSpec::test_error() }
    }

    fn regression(tm: ThreatModel) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mk = |n: usize| -> Vec<Sample> {
            (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let y = 0.5 * x[0] - x[1] + 0.1;
                    Sample::new(x, y)
                })
                .collect()
        };
        let train = mk(6);
        let test = mk(2);
        let ds = Dataset::new(train, test, Task::Regression).unwrap().with_schedule(3, 2).unwrap();
        let cfg = TrainConfig::new(0.1, Loss::SquaredError, Params::seeded(&[2, 2, 1], 1).unwrap());
        Case { cfg, ds, tm, obj: ObjectiveSpec::dos() }
    }

    fn model_for(c: &Case, opts: &BuildOptions) -> (MiqcpModel, BigMTable) {
        let mode = if opts.aux { Mode::Auxiliary } else { Mode::Direct };
        let bs = propagate(&c.cfg, &c.ds, &c.tm, &PoisonAssignment::all_undecided(c.ds.n_train()), mode).unwrap();
        let table = big_m_tables(&bs).unwrap();
        (build(&c.cfg, &c.ds, &c.tm, &c.obj, &table, opts).unwrap(), table)
    }

    fn random_assignment(space: &ActionSpace, budget: usize, rng: &mut ChaCha8Rng) -> PoisonAssignment {
        let n = space.len();
        let k = rng.random_range(0..=budget);
        let mut a = PoisonAssignment::all_clean(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for j in 0..k {
            let pick = rng.random_range(j..n);
            idx.swap(j, pick);
            let i = idx[j];
            if space.choices(i) > 1 {
                let act = rng.random_range(1..space.choices(i));
                a.set(i, space.state(i, act));
            }
        }
        a
    }

    fn assert_exact(c: &Case, opts: &BuildOptions, trials: usize) {
        let (m, _) = model_for(c, opts);
        let space = ActionSpace::with_grid(&c.tm, &c.ds, &GridOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..trials {
            let a = random_assignment(&space, c.tm.budget, &mut rng);
            assert!(validate(&c.tm, &a, &c.ds).is_ok());
            let w = witness(&c.cfg, &c.ds, &c.tm, &m, &a).unwrap();
            let bad = check_feasible(&m, &w).unwrap();
            assert!(bad.is_empty(), "{:?}", &bad[..bad.len().min(5)]);
            let values: Vec<f64> = m.variables.iter().map(|v| w[&v.name]).collect();
            let got = m.objective.value(&values);
            let want = evaluate_objective(&replay(&c.cfg, &c.ds, &a).unwrap(), &c.obj, &c.ds);
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
            let back = decode_witness(&c.ds, &m, &w).unwrap();
            let t1 = replay(&c.cfg, &c.ds, &back).unwrap();
            let t0 = replay(&c.cfg, &c.ds, &a).unwrap();
            for (p, q) in t1.final_params().flat().iter().zip(t0.final_params().flat()) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn label_flip_witnesses_are_feasible() {
        assert_exact(&moons(&[2, 3, 1], ThreatModel::label_flip(2)), &BuildOptions::default(), 15);
        assert_exact(&moons(&[2, 1], ThreatModel::label_flip(3)), &BuildOptions::default(), 15);
    }

    #[test]
    fn bounded_and_substitution_witnesses_are_feasible() {
        let bounded = moons(&[2, 2, 1], ThreatModel::bounded(2, 0.05, 0.0, true));
        assert_exact(&bounded, &BuildOptions::default(), 10);
        let sub = moons(&[2, 2, 1], ThreatModel::substitution(2, vec![-1.0, -0.5], vec![2.0, 1.0], true));
        assert_exact(&sub, &BuildOptions::default(), 10);
        assert_exact(&sub, &BuildOptions { aux: true, ..BuildOptions::default() }, 10);
        assert_exact(&sub, &BuildOptions { aux: true, linearize: true, ..BuildOptions::default() }, 10);
        let mut grid = ThreatModel::substitution(1, vec![-1.0, -0.5], vec![2.0, 1.0], false);
        grid.grid = Some(vec![Sample::new(vec![0.0, 1.0], 1.0), Sample::new(vec![2.0, -0.5], 0.0)]);
        assert_exact(&moons(&[2, 2, 1], grid), &BuildOptions { linearize: true, ..BuildOptions::default() }, 10);
    }

    #[test]
    fn regression_witnesses_are_feasible() {
        let c = regression(ThreatModel::bounded(2, 0.1, 0.3, false));
        assert_exact(&c, &BuildOptions::default(), 10);
        assert_exact(&c, &BuildOptions { linearize: true, ..BuildOptions::default() }, 5);
    }

    #[test]
    fn zero_budget_fixes_every_indicator() {
        let c = moons(&[2, 1], ThreatModel::label_flip(0));
        let (m, _) = model_for(&c, &BuildOptions::default());
        for v in m.variables.iter().filter(|v| v.family() == "s") {
            assert_eq!(v.bounds, Interval::ZERO);
        }
        // with nothing undecided every training bound is a point
        for v in m.variables.iter().filter(|v| v.family() == "w") {
            assert!(v.bounds.width() < 1e-9);
        }
    }

    #[test]
    fn flipped_relu_indicator_breaks_its_row() {
        let c = moons(&[2, 4, 1], ThreatModel::label_flip(2));
        let (m, _) = model_for(&c, &BuildOptions::default());
        let a = PoisonAssignment::all_clean(c.ds.n_train());
        let mut w = witness(&c.cfg, &c.ds, &c.tm, &m, &a).unwrap();
        let target = m.variables.iter().find(|v| v.family() == "a").expect("an unstable neuron").name.clone();
        let flipped = 1.0 - w[&target];
        w.insert(target.clone(), flipped);
        let bad = check_feasible(&m, &w).unwrap();
        let rows: Vec<&str> = bad.iter().filter(|v| v.kind == ViolationKind::Constraint).map(|v| v.name.as_str()).collect();
        let tag = target.trim_start_matches("a_");
        assert!(
            rows.iter().any(|r| *r == format!("relub_{tag}") || *r == format!("reluc_{tag}")),
            "{rows:?}"
        );
    }

    #[test]
    fn single_sample_model_has_two_feasible_points() {
        let train = vec![Sample::new(vec![0.5, -1.0], 1.0)];
        let test = vec![Sample::new(vec![0.4, -0.8], 1.0), Sample::new(vec![-0.3, 0.2], 0.0)];
        let ds = Dataset::new(train, test, Task::Classification).unwrap();
        let cfg = TrainConfig::new(1.0, Loss::Hinge, Params::linear(vec![0.1, 0.2], -0.1));
        let c = Case { cfg, ds, tm: ThreatModel::label_flip(1), obj: ObjectiveSpec::test_error() };
        let (m, _) = model_for(&c, &BuildOptions::default());
        let mut objectives = Vec::new();
        for s in [SampleState::Clean, SampleState::poisoned(vec![0.5, -1.0], 0.0)] {
            let a = PoisonAssignment::from_states(vec![s]);
            let w = witness(&c.cfg, &c.ds, &c.tm, &m, &a).unwrap();
            assert!(check_feasible(&m, &w).unwrap().is_empty());
            let values: Vec<f64> = m.variables.iter().map(|v| w[&v.name]).collect();
            objectives.push(m.objective.value(&values));
            assert_eq!(decode_witness(&c.ds, &m, &w).unwrap(), a);
            let want = evaluate_objective(&replay(&c.cfg, &c.ds, &a).unwrap(), &c.obj, &c.ds);
            assert_eq!(m.objective.value(&values), want);
        }
        // a label other than clean-or-flipped is not representable
        let a = PoisonAssignment::from_states(vec![SampleState::Clean]);
        let mut w = witness(&c.cfg, &c.ds, &c.tm, &m, &a).unwrap();
        w.insert("yt_0".into(), 0.0);
        assert!(!check_feasible(&m, &w).unwrap().is_empty());
    }

    #[test]
    fn census_formula_matches_models() {
        let cases = [
            (moons(&[2, 3, 1], ThreatModel::label_flip(2)), BuildOptions::default()),
            (moons(&[2, 2, 1], ThreatModel::bounded(1, 0.05, 0.0, true)), BuildOptions::default()),
            (
                moons(&[2, 2, 1], ThreatModel::substitution(2, vec![-1.0, -0.5], vec![2.0, 1.0], true)),
                BuildOptions { aux: true, ..BuildOptions::default() },
            ),
            (regression(ThreatModel::bounded(2, 0.1, 0.3, false)), BuildOptions::default()),
        ];
        for (c, opts) in &cases {
            let (m, table) = model_for(c, opts);
            let inputs = CensusInputs::new(&c.cfg, &c.ds, &c.tm, &c.obj, &table, opts, m.products.len());
            assert_eq!(Census::of(&m), Census::predict(&inputs));
            let relu_bins = m.variables.iter().filter(|v| matches!(v.family(), "a" | "ta")).count();
            if !opts.aux {
                let expected = match c.obj.kind {
                    ObjectiveKind::Dos => table.unstable_train_neurons(),
                    _ => table.unstable_neurons(),
                };
                assert_eq!(relu_bins, expected);
            }
            if c.obj.kind != ObjectiveKind::Dos {
                assert_eq!(m.family_size("p"), c.ds.n_test());
            }
            assert_eq!(m.family_size("s"), c.ds.n_train());
            if opts.aux {
                assert_eq!(m.family_size("st"), c.ds.n_train() * c.tm.budget);
            }
        }
    }

    #[test]
    fn aux_mode_needs_free_substitution() {
        let c = moons(&[2, 1], ThreatModel::label_flip(1));
        let bs = propagate(&c.cfg, &c.ds, &c.tm, &PoisonAssignment::all_undecided(8), Mode::Direct).unwrap();
        let table = big_m_tables(&bs).unwrap();
        let opts = BuildOptions { aux: true, ..BuildOptions::default() };
        assert!(matches!(build(&c.cfg, &c.ds, &c.tm, &c.obj, &table, &opts), Err(Error::Unsupported(_))));
    }

    #[test]
    fn partial_tables_are_rejected() {
        let c = moons(&[2, 1], ThreatModel::label_flip(1));
        let bs = propagate(&c.cfg, &c.ds, &c.tm, &PoisonAssignment::all_clean(8), Mode::Direct).unwrap();
        let table = big_m_tables(&bs).unwrap();
        assert!(matches!(
            build(&c.cfg, &c.ds, &c.tm, &c.obj, &table, &BuildOptions::default()),
            Err(Error::MissingBound(_))
        ));
    }
}
