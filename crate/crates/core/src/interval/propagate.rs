use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{affine_rows, Interval, IntervalLayer, IntervalParams, Phase};
use crate::data::{Dataset, Sample, Task};
use crate::error::{Error, Result};
use crate::threat::{validate, PoisonAssignment, SampleState, ThreatKind, ThreatModel, MEMBERSHIP_TOL};
use crate::train::{predict_logit, Loss, TrainConfig, Trace};

/// How undecided samples enter the parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Each undecided sample contributes the hull of its clean and perturbed
    /// gradient enclosures.
    #[default]
    Direct,
    /// Clean gradients are summed exactly; perturbed gradients enter only as
    /// deviations, at most `remaining budget` of them per batch.
    Auxiliary,
}

/// Enclosures of one forward/backward pass over an input box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassBounds {
    pub features: Vec<Interval>,
    pub label: Interval,
    /// Pre-activations u_1..u_K.
    pub u: Vec<Vec<Interval>>,
    /// Layer inputs z_0..z_{K-1}.
    pub z: Vec<Vec<Interval>>,
    pub residual: Interval,
    pub loss: Interval,
    pub dloss: Interval,
    pub grad: IntervalParams,
}

impl PassBounds {
    pub fn logit(&self) -> Interval {
        self.u.last().map(|u| u[0]).unwrap_or(Interval::ZERO)
    }
}

/// Bounds for training sample `index` at one iteration. `base` is the pass
/// over the sample's fixed value (its clean value when undecided);
/// `adversarial` is present for undecided samples while budget remains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBounds {
    pub index: usize,
    pub base: Arc<PassBounds>,
    pub adversarial: Option<Arc<PassBounds>>,
}

impl SampleBounds {
    fn pick(&self, f: impl Fn(&PassBounds) -> Interval) -> Interval {
        match &self.adversarial {
            Some(a) => f(&self.base).hull(&f(a)),
            None => f(&self.base),
        }
    }

    pub fn u(&self, layer: usize, j: usize) -> Interval {
        self.pick(|p| p.u[layer][j])
    }

    pub fn z(&self, layer: usize, j: usize) -> Interval {
        self.pick(|p| p.z[layer][j])
    }

    pub fn feature(&self, j: usize) -> Interval {
        self.pick(|p| p.features[j])
    }

    pub fn label(&self) -> Interval {
        self.pick(|p| p.label)
    }

    pub fn logit(&self) -> Interval {
        self.pick(PassBounds::logit)
    }

    pub fn residual(&self) -> Interval {
        self.pick(|p| p.residual)
    }

    pub fn loss(&self) -> Interval {
        self.pick(|p| p.loss)
    }

    pub fn dloss(&self) -> Interval {
        self.pick(|p| p.dloss)
    }

    /// Flat gradient enclosure (layer-major, like `Params::flat`).
    pub fn grad(&self) -> Vec<Interval> {
        match &self.adversarial {
            Some(a) => self.base.grad.iter().zip(a.grad.iter()).map(|(x, y)| x.hull(y)).collect(),
            None => self.base.grad.flat(),
        }
    }

    pub fn is_undecided(&self) -> bool {
        self.adversarial.is_some()
    }
}

/// Interval enclosure of every training trajectory consistent with a partial
/// assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundState {
    pub mode: Mode,
    pub loss: Loss,
    /// Θ^(0..T).
    pub params: Vec<IntervalParams>,
    pub batches: Vec<Range<usize>>,
    /// `samples[t-1][i - batch.start]`.
    pub samples: Vec<Vec<SampleBounds>>,
    /// Logit enclosures of the final model on each test sample.
    pub test_logits: Vec<Interval>,
    /// Hidden pre-activations of the final model on each test sample.
    pub test_hidden: Vec<Vec<Vec<Interval>>>,
    /// Budget left for undecided samples.
    pub remaining: usize,
    /// Sample indices whose state is undecided.
    pub undecided: Vec<usize>,
}

impl BoundState {
    pub fn iterations(&self) -> usize {
        self.batches.len()
    }

    pub fn final_params(&self) -> &IntervalParams {
        self.params.last().expect("bound state holds Θ^(0)")
    }

    pub fn sample(&self, t: usize, i: usize) -> Option<&SampleBounds> {
        let b = self.batches.get(t.checked_sub(1)?)?;
        self.samples[t - 1].get(i.checked_sub(b.start)?)
    }

    /// True when no undecided sample can deviate, i.e. all bounds are exact.
    pub fn is_exact(&self) -> bool {
        self.undecided.is_empty() || self.remaining == 0
    }

    /// First component of `trace` that escapes the enclosure, if any.
    pub fn find_escape(&self, trace: &Trace, test_inputs: &[Vec<f64>]) -> Option<String> {
        if trace.params.len() != self.params.len() {
            return Some("iteration count differs".into());
        }
        for (t, (iv, p)) in self.params.iter().zip(&trace.params).enumerate() {
            if !iv.contains(p) {
                return Some(format!("parameters at t={t}"));
            }
        }
        for it in &trace.iterations {
            for r in &it.samples {
                let Some(sb) = self.sample(it.t, r.index) else {
                    return Some(format!("no bounds for t={} i={}", it.t, r.index));
                };
                let at = |what: &str| Some(format!("{what} at t={} i={}", it.t, r.index));
                for (j, x) in r.features.iter().enumerate() {
                    if !sb.feature(j).contains(*x) {
                        return at("feature");
                    }
                }
                if !sb.label().contains(r.label) {
                    return at("label");
                }
                for (k, layer) in r.cache.u.iter().enumerate() {
                    for (j, v) in layer.iter().enumerate() {
                        if !sb.u(k, j).contains(*v) {
                            return at(&format!("u[{k}][{j}]"));
                        }
                    }
                }
                for (k, layer) in r.cache.z.iter().enumerate().skip(1) {
                    for (j, v) in layer.iter().enumerate() {
                        if !sb.z(k, j).contains(*v) {
                            return at(&format!("z[{k}][{j}]"));
                        }
                    }
                }
                if !sb.residual().contains(r.residual) {
                    return at("residual");
                }
                if !sb.loss().contains(r.loss) {
                    return at("loss");
                }
                if !sb.dloss().contains(r.dloss) {
                    return at("dloss");
                }
                if !sb.grad().iter().zip(r.grad.flat()).all(|(iv, g)| iv.contains(g)) {
                    return at("gradient");
                }
            }
        }
        for (i, x) in test_inputs.iter().enumerate() {
            if !self.test_logits[i].contains(predict_logit(trace.final_params(), x)) {
                return Some(format!("test logit {i}"));
            }
        }
        None
    }

    pub fn test_widths(&self) -> Vec<f64> {
        self.test_logits.iter().map(Interval::width).collect()
    }
}

/// Input box of a perturbed sample under `tm`.
pub(crate) fn adversarial_box(tm: &ThreatModel, clean: &Sample, task: Task) -> (Vec<Interval>, Interval) {
    let widen = |v: f64, r: f64| {
        if r > 0.0 {
            Interval { lo: v - r - MEMBERSHIP_TOL, hi: v + r + MEMBERSHIP_TOL }
        } else {
            Interval::point(v)
        }
    };
    let features = match tm.kind {
        ThreatKind::Bounded => clean.features.iter().map(|&x| widen(x, tm.epsilon)).collect(),
        ThreatKind::Substitution => match &tm.grid {
            Some(grid) => (0..clean.features.len())
                .map(|j| {
                    grid.iter()
                        .map(|p| Interval::point(p.features[j]))
                        .reduce(|a, b| a.hull(&b))
                        .unwrap_or(Interval::point(clean.features[j]))
                })
                .collect(),
            None => tm
                .domain_lo
                .iter()
                .zip(&tm.domain_hi)
                .map(|(&lo, &hi)| Interval { lo: lo - MEMBERSHIP_TOL, hi: hi + MEMBERSHIP_TOL })
                .collect(),
        },
    };
    let label = match task {
        Task::Classification => {
            let grid_fixed = tm.kind == ThreatKind::Substitution && tm.grid.is_some() && !tm.label_flip;
            if grid_fixed {
                tm.grid
                    .iter()
                    .flatten()
                    .map(|p| Interval::point(p.label))
                    .reduce(|a, b| a.hull(&b))
                    .unwrap_or(Interval::point(clean.label))
            } else if tm.label_flip {
                if tm.kind == ThreatKind::Bounded && tm.epsilon == 0.0 {
                    // the only non-trivial change is the flip itself
                    Interval::point(1.0 - clean.label)
                } else {
                    Interval::UNIT
                }
            } else {
                Interval::point(clean.label)
            }
        }
        Task::Regression => widen(clean.label, tm.nu),
    };
    (features, label)
}

pub(crate) fn forward_bounds(theta: &IntervalParams, x: &[Interval]) -> (Vec<Vec<Interval>>, Vec<Vec<Interval>>) {
    let k = theta.layers.len();
    let mut u = Vec::with_capacity(k);
    let mut z = Vec::with_capacity(k);
    z.push(x.to_vec());
    for (idx, layer) in theta.layers.iter().enumerate() {
        let out = affine_rows(&layer.weights, layer.cols, &z[idx], &layer.bias);
        if idx + 1 < k {
            z.push(out.iter().map(Interval::relu).collect());
        }
        u.push(out);
    }
    (u, z)
}

fn masked(s: Interval, u: &Interval) -> Interval {
    match u.phase() {
        Phase::On => s,
        Phase::Off => Interval::ZERO,
        Phase::Unstable => s.hull(&Interval::ZERO),
    }
}

/// Forward pass, loss and backpropagation over an input box, mirroring the
/// concrete operation order of the replay.
pub(crate) fn pass(theta: &IntervalParams, x: Vec<Interval>, y: Interval, loss: Loss) -> PassBounds {
    let (u, z) = forward_bounds(theta, &x);
    let logit = u.last().expect("at least one layer")[0];
    let one = Interval::point(1.0);
    let two = Interval::point(2.0);
    let (residual, value, dloss) = match loss {
        Loss::Hinge => {
            let sign = two.mul(&y).sub(&one);
            let r = one.sub(&sign.mul(&logit));
            (r, r.relu(), masked(sign.neg(), &r))
        }
        Loss::SquaredError => {
            let r = logit.sub(&y);
            (r, r.sqr(), two.mul(&r))
        }
    };

    let k = theta.layers.len();
    let mut layers: Vec<IntervalLayer> = Vec::with_capacity(k);
    let mut g = vec![dloss];
    for idx in (0..k).rev() {
        let layer = &theta.layers[idx];
        let input = &z[idx];
        let mut weights = Vec::with_capacity(layer.weights.len());
        for gr in &g {
            for xc in input {
                weights.push(gr.mul(xc));
            }
        }
        layers.push(IntervalLayer { rows: layer.rows, cols: layer.cols, weights, bias: g.clone() });
        if idx > 0 {
            let prev_u = &u[idx - 1];
            g = (0..layer.cols)
                .map(|c| {
                    let mut s = Interval::ZERO;
                    for (r, gr) in g.iter().enumerate() {
                        s = s.add(&layer.weights[r * layer.cols + c].mul(gr));
                    }
                    masked(s, &prev_u[c])
                })
                .collect();
        }
    }
    layers.reverse();
    PassBounds {
        features: x,
        label: y,
        u,
        z,
        residual,
        loss: value,
        dloss,
        grad: IntervalParams { layers },
    }
}

/// Sum of the `r` largest positive entries of `v` (reordered in place).
pub(crate) fn top_r_positive(v: &mut Vec<f64>, r: usize) -> f64 {
    v.retain(|x| *x > 0.0);
    if v.len() > r {
        v.select_nth_unstable_by(r, |a, b| b.total_cmp(a));
        v.truncate(r);
    }
    v.iter().sum()
}

fn batch_update(batch: &[SampleBounds], theta: &IntervalParams, mode: Mode, r: usize) -> IntervalParams {
    let n = theta.iter().count();
    let mut acc = vec![Interval::ZERO; n];
    let mut undecided = 0usize;
    for s in batch {
        match &s.adversarial {
            Some(a) => {
                undecided += 1;
                for ((slot, c), d) in acc.iter_mut().zip(s.base.grad.iter()).zip(a.grad.iter()) {
                    *slot = slot.add(&c.hull(d));
                }
            }
            None => {
                for (slot, c) in acc.iter_mut().zip(s.base.grad.iter()) {
                    *slot = slot.add(c);
                }
            }
        }
    }
    if mode == Mode::Auxiliary && undecided > r {
        // Σ_{i∉S} C_i + Σ_{i∈S} A_i  =  Σ_i C_i + Σ_{i∈S} (A_i - C_i), |S| ≤ r
        let mut clean = vec![Interval::ZERO; n];
        let mut mags = vec![0.0; n];
        for s in batch {
            for ((slot, mag), c) in clean.iter_mut().zip(mags.iter_mut()).zip(s.base.grad.iter()) {
                *slot = slot.add(c);
                *mag += c.mag();
            }
        }
        let pairs: Vec<(Vec<Interval>, Vec<Interval>)> = batch
            .iter()
            .filter_map(|s| s.adversarial.as_ref().map(|a| (s.base.grad.flat(), a.grad.flat())))
            .collect();
        let (mut up, mut down) = (Vec::with_capacity(pairs.len()), Vec::with_capacity(pairs.len()));
        for e in 0..n {
            up.clear();
            down.clear();
            let mut mag = mags[e];
            for (c, a) in &pairs {
                up.push(a[e].hi - c[e].hi);
                down.push(c[e].lo - a[e].lo);
                mag += a[e].mag();
            }
            let dhi = top_r_positive(&mut up, r);
            let dlo = top_r_positive(&mut down, r);
            let c = clean[e];
            let m = 4.0 * super::REL_EPS * (mag + dhi + dlo) + 1e-300;
            let bound = Interval { lo: c.lo - dlo - m, hi: c.hi + dhi + m };
            acc[e] = acc[e].tighten(&bound);
        }
    }
    acc_to_params(theta, &acc)
}

fn acc_to_params(theta: &IntervalParams, acc: &[Interval]) -> IntervalParams {
    theta.with_flat(acc)
}

/// Propagates interval bounds through the whole training run.
pub fn propagate(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    partial: &PoisonAssignment,
    mode: Mode,
) -> Result<BoundState> {
    config.check(dataset)?;
    tm.check(dataset)?;
    if let Err(v) = validate(tm, partial, dataset) {
        let detail: Vec<String> = v.iter().map(|v| format!("{:?}: {}", v.family, v.detail)).collect();
        return Err(Error::validation(format!("inconsistent partial assignment: {}", detail.join("; "))));
    }
    let remaining = tm.budget - partial.budget_used();
    let undecided: Vec<usize> = (0..partial.len())
        .filter(|&i| matches!(partial.get(i), SampleState::Undecided))
        .collect();
    let boxes: Vec<Option<(Vec<Interval>, Interval)>> = (0..partial.len())
        .map(|i| {
            (remaining > 0 && matches!(partial.get(i), SampleState::Undecided))
                .then(|| adversarial_box(tm, &dataset.train[i], dataset.task))
        })
        .collect();
    let share = tm.kind == ThreatKind::Substitution;

    let t_max = dataset.iterations();
    let mut params = Vec::with_capacity(t_max + 1);
    params.push(IntervalParams::point(&config.init));
    let mut batches = Vec::with_capacity(t_max);
    let mut samples = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let theta = params.last().expect("Θ^(0) present");
        let batch = dataset.batch_range(t);
        let mut shared: Vec<((Vec<Interval>, Interval), Arc<PassBounds>)> = Vec::new();
        let mut records = Vec::with_capacity(batch.len());
        for i in batch.clone() {
            let clean = &dataset.train[i];
            let (x, y) = match partial.get(i) {
                SampleState::Poisoned { features, label } => (features.as_slice(), *label),
                _ => (clean.features.as_slice(), clean.label),
            };
            let base = Arc::new(pass(theta, x.iter().copied().map(Interval::point).collect(), Interval::point(y), config.loss));
            let adversarial = boxes[i].as_ref().map(|(bx, by)| {
                if share {
                    if let Some((_, p)) = shared.iter().find(|((sx, sy), _)| sx == bx && sy == by) {
                        return Arc::clone(p);
                    }
                }
                let p = Arc::new(pass(theta, bx.clone(), *by, config.loss));
                if share {
                    shared.push(((bx.clone(), *by), Arc::clone(&p)));
                }
                p
            });
            records.push(SampleBounds { index: i, base, adversarial });
        }
        let acc = batch_update(&records, theta, mode, remaining);
        let scale = Interval::point(config.lr_at(t) / batch.len() as f64);
        let flat: Vec<Interval> = theta.iter().zip(acc.iter()).map(|(p, g)| p.sub(&scale.mul(g))).collect();
        let next = theta.with_flat(&flat);
        params.push(next);
        batches.push(batch);
        samples.push(records);
    }
    let last = params.last().expect("Θ^(T) present");
    let (test_hidden, test_logits): (Vec<_>, Vec<_>) = dataset
        .test
        .iter()
        .map(|s| {
            let x: Vec<Interval> = s.features.iter().copied().map(Interval::point).collect();
            let mut u = forward_bounds(last, &x).0;
            let logit = u.pop().expect("output layer")[0];
            (u, logit)
        })
        .unzip();
    Ok(BoundState {
        mode,
        loss: config.loss,
        params,
        batches,
        samples,
        test_logits,
        test_hidden,
        remaining,
        undecided,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_halfmoons;
    use crate::threat::ActionSpace;
    use crate::train::{replay, Params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_extensions_are_contained() {
        let (cfg, ds) = setup();
        let inputs: Vec<Vec<f64>> = ds.test.iter().map(|s| s.features.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let threats = [
            ThreatModel::label_flip(3),
            ThreatModel::bounded(2, 0.2, 0.0, true),
            ThreatModel::substitution(2, vec![-1.5, -1.0], vec![2.5, 1.5], true),
        ];
        for tm in &threats {
            for mode in [Mode::Direct, Mode::Auxiliary] {
                for _ in 0..20 {
                    let mut partial = PoisonAssignment::all_undecided(12);
                    let space = crate::threat::ActionSpace::with_grid(tm, &ds, &Default::default()).unwrap();
                    for i in 0..12 {
                        if rng.random_bool(0.3) {
                            partial.set(i, SampleState::Clean);
                        }
                    }
                    let bs = propagate(&cfg, &ds, tm, &partial, mode).unwrap();
                    let mut full = partial.clone();
                    let mut used = 0;
                    for i in 0..12 {
                        if matches!(full.get(i), SampleState::Undecided) {
                            if used < tm.budget && rng.random_bool(0.4) {
                                let k = rng.random_range(1..space.choices(i));
                                full.set(i, perturb(tm, &ds.train[i], &space, i, k, &mut rng));
                                used += 1;
                            } else {
                                full.set(i, SampleState::Clean);
                            }
                        }
                    }
                    let tr = replay(&cfg, &ds, &full).unwrap();
                    assert_eq!(bs.find_escape(&tr, &inputs), None, "{tm:?} {mode:?}");
                }
            }
        }
    }

    // grid action, jittered inside the threat set for continuous threats
    fn perturb(tm: &ThreatModel, clean: &Sample, space: &ActionSpace, i: usize, k: usize, rng: &mut ChaCha8Rng) -> SampleState {
        let mut s = space.state(i, k);
        if let SampleState::Poisoned { features, .. } = &mut s {
            if tm.kind == ThreatKind::Bounded && tm.epsilon > 0.0 {
                for (f, x) in features.iter_mut().zip(&clean.features) {
                    if rng.random_bool(0.5) {
                        *f = x + rng.random_range(-tm.epsilon..=tm.epsilon);
                    }
                }
            }
        }
        s
    }

    fn setup() -> (TrainConfig, Dataset) {
        let ds = make_halfmoons(12, 6, 0.1, 3).unwrap().with_schedule(4, 2).unwrap();
        let cfg = TrainConfig::new(0.5, Loss::Hinge, Params::seeded(&[2, 3, 1], 1).unwrap());
        (cfg, ds)
    }

    #[test]
    fn complete_assignment_is_exact() {
        let (cfg, ds) = setup();
        let tm = ThreatModel::label_flip(2);
        let mut a = PoisonAssignment::all_clean(12);
        a.set(5, SampleState::poisoned(ds.train[5].features.clone(), 1.0 - ds.train[5].label));
        for mode in [Mode::Direct, Mode::Auxiliary] {
            let bs = propagate(&cfg, &ds, &tm, &a, mode).unwrap();
            let tr = replay(&cfg, &ds, &a).unwrap();
            for (iv, p) in bs.params.iter().zip(&tr.params) {
                assert!(iv.is_degenerate());
                assert_eq!(iv.midpoint(), *p);
            }
            for (iv, s) in bs.test_logits.iter().zip(&ds.test) {
                assert_eq!(*iv, Interval::point(predict_logit(tr.final_params(), &s.features)));
            }
        }
    }

    #[test]
    fn zero_budget_is_clean_trace() {
        let (cfg, ds) = setup();
        let tm = ThreatModel::label_flip(0);
        let bs = propagate(&cfg, &ds, &tm, &PoisonAssignment::all_undecided(12), Mode::Direct).unwrap();
        let tr = replay(&cfg, &ds, &PoisonAssignment::all_clean(12)).unwrap();
        assert!(bs.params.iter().zip(&tr.params).all(|(iv, p)| iv.is_degenerate() && iv.midpoint() == *p));
    }

    #[test]
    fn rejects_over_budget_partial() {
        let (cfg, ds) = setup();
        let tm = ThreatModel::label_flip(0);
        let mut a = PoisonAssignment::all_undecided(12);
        a.set(0, SampleState::poisoned(ds.train[0].features.clone(), 1.0 - ds.train[0].label));
        assert!(propagate(&cfg, &ds, &tm, &a, Mode::Direct).is_err());
    }

    #[test]
    fn auxiliary_is_never_wider() {
        let (cfg, ds) = setup();
        let tm = ThreatModel::label_flip(1);
        let a = PoisonAssignment::all_undecided(12);
        let d = propagate(&cfg, &ds, &tm, &a, Mode::Direct).unwrap();
        let x = propagate(&cfg, &ds, &tm, &a, Mode::Auxiliary).unwrap();
        for (dw, xw) in d.test_widths().iter().zip(x.test_widths()) {
            assert!(xw <= dw + 1e-12);
        }
        assert!(x.test_widths().iter().sum::<f64>() < d.test_widths().iter().sum::<f64>());
    }
}
