use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::heuristic::{assignment_value, fill_budget, local_search};
use super::ObjectiveSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interval::{dual_with_logits, obbt_from_state, propagate, BoundState, Mode};
use crate::threat::{validate, ActionSpace, GridOptions, PoisonAssignment, SampleState, ThreatModel};
use crate::train::{replay_batched, TrainConfig};

/// How the next sample to branch on is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    /// Re-propagate with each of the most influential samples fixed to clean
    /// and keep the one that lowers the bound most.
    #[default]
    BatchProbe,
    /// Widest gradient enclosure only.
    MaxImpact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    /// Wall-clock limit in seconds.
    pub time_limit: Option<f64>,
    pub node_limit: Option<usize>,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Single-threaded and free of wall-clock data in the certificate.
    pub deterministic: bool,
    pub mode: Mode,
    /// Test-set groups for OBBT of the test logits, off when `None`.
    pub obbt_groups: Option<usize>,
    pub branching: Branching,
    pub probe_candidates: usize,
    /// Replays allowed for the local search before the tree starts.
    pub root_heuristic_cap: usize,
    /// Replays allowed per local search triggered by a new incumbent.
    pub heuristic_cap: usize,
    /// Nodes with at most this many completions are enumerated.
    pub enumerate_below: u64,
    /// Candidate values for continuous threat models.
    pub grid: GridOptions,
    /// After the search, spend unused budget on modifications that keep the
    /// objective at least as high.
    pub fill_budget: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            time_limit: None,
            node_limit: None,
            threads: 0,
            deterministic: false,
            mode: Mode::Auxiliary,
            obbt_groups: None,
            branching: Branching::BatchProbe,
            probe_candidates: 8,
            root_heuristic_cap: 200_000,
            heuristic_cap: 20_000,
            enumerate_below: 256,
            grid: GridOptions::default(),
            fill_budget: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// The incumbent is a worst-case attack (within tolerance).
    Optimal,
    /// Sound bound without completeness (continuous threat models).
    Bounded,
    /// Stopped by a limit; primal and bound are still valid.
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the training config, data, threat model, objective and options.
    pub config_hash: String,
    pub seed: u64,
    pub init_seed: Option<u64>,
    /// Seconds; omitted in deterministic mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
    pub nodes: usize,
    pub evaluations: usize,
    pub root_bound: f64,
    /// Whether the action space covers the full threat model.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub status: Status,
    /// Objective value of the incumbent attack.
    pub primal: f64,
    /// Upper bound on the objective of every admissible attack.
    pub bound: f64,
    pub gap: f64,
    pub incumbent: PoisonAssignment,
    pub provenance: Provenance,
}

impl Certificate {
    /// Re-checks the incumbent against the threat model and replays it.
    pub fn verify(&self, config: &TrainConfig, dataset: &Dataset, tm: &ThreatModel, objective: &ObjectiveSpec) -> Result<()> {
        if let Err(v) = validate(tm, &self.incumbent, dataset) {
            return Err(Error::validation(format!("incumbent violates the threat model: {:?}", v[0])));
        }
        let value = assignment_value(config, dataset, objective, &self.incumbent)?;
        if value != self.primal {
            return Err(Error::validation(format!("replayed objective {value} differs from primal {}", self.primal)));
        }
        if self.primal > self.bound {
            return Err(Error::validation(format!("primal {} exceeds bound {}", self.primal, self.bound)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Start,
    Root,
    Incumbent,
    Node,
    Done,
}

/// One line of the progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub elapsed: f64,
    pub event: EventKind,
    pub primal: f64,
    pub dual: f64,
    pub nodes: usize,
    pub open: usize,
    pub incumbent_hash: String,
}

/// Appends events as JSON lines.
pub struct ProgressLog<W: Write> {
    out: W,
}

impl<W: Write> ProgressLog<W> {
    pub fn new(out: W) -> Self {
        ProgressLog { out }
    }

    pub fn write(&mut self, e: &ProgressEvent) -> Result<()> {
        serde_json::to_writer(&mut self.out, e)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short SHA-256 fingerprint of the poisoned entries of an assignment.
pub fn incumbent_hash(a: &PoisonAssignment) -> String {
    let bytes = serde_json::to_vec(&a.attack_entries()).expect("attack entries serialize");
    hex(&Sha256::digest(&bytes))[..16].to_string()
}

fn config_hash(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    objective: &ObjectiveSpec,
    opts: &SolveOptions,
) -> Result<String> {
    let mut h = Sha256::new();
    for part in [
        serde_json::to_vec(config)?,
        serde_json::to_vec(dataset)?,
        serde_json::to_vec(tm)?,
        serde_json::to_vec(objective)?,
        serde_json::to_vec(opts)?,
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(&part);
    }
    Ok(hex(&h.finalize()))
}

struct Node {
    dual: f64,
    depth: usize,
    seq: u64,
    branch: usize,
    partial: PoisonAssignment,
}

impl PartialEq for Node {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Node {
    // best bound first, then deeper, then older
    fn cmp(&self, o: &Self) -> Ordering {
        self.dual
            .total_cmp(&o.dual)
            .then(self.depth.cmp(&o.depth))
            .then(o.seq.cmp(&self.seq))
    }
}

enum Evaluated {
    /// Every completion was replayed; carries the best one.
    Closed(Option<(PoisonAssignment, f64)>, usize),
    Open { dual: f64, branch: usize },
}

struct Solver<'a> {
    config: &'a TrainConfig,
    dataset: &'a Dataset,
    tm: &'a ThreatModel,
    objective: &'a ObjectiveSpec,
    opts: &'a SolveOptions,
    space: ActionSpace,
    start: Instant,
    incumbent: PoisonAssignment,
    primal: f64,
    dual: f64,
    pruned_max: f64,
    nodes: usize,
    evaluations: usize,
    proven: bool,
    stopped: bool,
}

impl Solver<'_> {
    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn out_of_time(&self) -> bool {
        self.opts.time_limit.is_some_and(|l| self.elapsed() >= l)
            || self.opts.node_limit.is_some_and(|l| self.nodes >= l)
    }

    fn emit(&mut self, kind: EventKind, open: usize, observer: &mut (dyn FnMut(&ProgressEvent) -> bool + Send)) {
        let e = ProgressEvent {
            elapsed: self.elapsed(),
            event: kind,
            primal: self.primal,
            dual: self.dual,
            nodes: self.nodes,
            open,
            incumbent_hash: incumbent_hash(&self.incumbent),
        };
        if !observer(&e) {
            self.stopped = true;
        }
    }

    fn prunable(&self, dual: f64) -> bool {
        dual <= self.primal || self.objective.gap_closed(self.primal, dual)
    }

    fn logits_dual(&self, bs: &BoundState) -> Result<f64> {
        let logits = match self.opts.obbt_groups {
            Some(p) if self.objective.kind != super::ObjectiveKind::Dos => {
                obbt_from_state(bs, self.config, self.dataset, p.min(self.dataset.n_test()))?
            }
            _ => bs.test_logits.clone(),
        };
        dual_with_logits(bs, &logits, self.objective, self.dataset)
    }

    fn bound_of(&self, partial: &PoisonAssignment) -> Result<(BoundState, f64)> {
        let bs = propagate(self.config, self.dataset, self.tm, partial, self.opts.mode)?;
        let d = self.logits_dual(&bs)?;
        Ok((bs, d))
    }

    /// Gradient-enclosure width each undecided sample adds to the updates.
    fn impact(&self, bs: &BoundState) -> Vec<(usize, f64)> {
        let mut score = vec![0.0; self.dataset.n_train()];
        for (t, it) in bs.samples.iter().enumerate() {
            let eta = self.config.lr_at(t + 1) / it.len() as f64;
            for s in it {
                if let Some(a) = &s.adversarial {
                    let w: f64 = s.base.grad.iter().zip(a.grad.iter()).map(|(c, d)| c.hull(d).width()).sum();
                    score[s.index] += eta * w;
                }
            }
        }
        bs.undecided.iter().map(|&i| (i, score[i])).collect()
    }

    fn choose_branch(&self, partial: &PoisonAssignment, bs: &BoundState) -> Result<usize> {
        let mut ranked = self.impact(bs);
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let first = ranked
            .first()
            .map(|r| r.0)
            .or_else(|| partial.first_undecided())
            .ok_or_else(|| Error::validation("no undecided sample to branch on"))?;
        if self.opts.branching == Branching::MaxImpact || ranked.len() < 2 {
            return Ok(first);
        }
        let probes: Vec<usize> = ranked.iter().take(self.opts.probe_candidates.max(1)).map(|r| r.0).collect();
        let scored = probes
            .par_iter()
            .map(|&i| {
                let mut p = partial.clone();
                p.set(i, SampleState::Clean);
                let (bs, d) = self.bound_of(&p)?;
                let width: f64 = bs.test_widths().iter().sum::<f64>()
                    + bs.samples.iter().flatten().map(|s| s.loss().width()).sum::<f64>();
                Ok((i, d, width))
            })
            .collect::<Result<Vec<_>>>()?;
        let best = scored
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)))
            .expect("at least one probe");
        Ok(best.0)
    }

    fn evaluate(&self, partial: &PoisonAssignment) -> Result<Evaluated> {
        let remaining = self.tm.budget - partial.budget_used();
        let count = self.space.completion_count(partial, remaining);
        if count <= u128::from(self.opts.enumerate_below) {
            let all = self.space.completions(partial, remaining);
            let values = replay_batched(self.config, self.dataset, &all, &self.objective.scorer(self.dataset))?;
            let best = values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                .map(|(k, v)| (all[k].clone(), v.1));
            return Ok(Evaluated::Closed(best, all.len()));
        }
        let (bs, dual) = self.bound_of(partial)?;
        let branch = self.choose_branch(partial, &bs)?;
        Ok(Evaluated::Open { dual, branch })
    }

    fn offer(&mut self, a: &PoisonAssignment, v: f64) -> bool {
        if v > self.primal {
            self.incumbent = a.clone();
            self.primal = v;
            true
        } else {
            false
        }
    }

    fn polish(&mut self, cap: usize, observer: &mut (dyn FnMut(&ProgressEvent) -> bool + Send), open: usize) -> Result<()> {
        if cap == 0 {
            return Ok(());
        }
        let mut found = Vec::new();
        let res = local_search(
            self.config,
            self.dataset,
            self.tm,
            self.objective,
            &self.space,
            &self.incumbent,
            cap,
            |a, v| found.push((a.clone(), v)),
        )?;
        self.evaluations += res.evaluations;
        for (a, v) in found {
            if self.offer(&a, v) {
                self.dual = self.dual.max(self.primal);
                self.emit(EventKind::Incumbent, open, observer);
            }
        }
        if res.optimal {
            self.proven = true;
        }
        Ok(())
    }
}

/// Certifies the worst-case attack. Equivalent to [`branch_and_bound_with`]
/// without an observer.
pub fn branch_and_bound(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    objective: &ObjectiveSpec,
    opts: &SolveOptions,
) -> Result<Certificate> {
    branch_and_bound_with(config, dataset, tm, objective, opts, &mut |_| true)
}

/// Best-first branch-and-bound over per-sample poisoning actions. The
/// observer sees every progress event and stops the search by returning
/// `false`; the certificate built so far is returned with status timeout.
pub fn branch_and_bound_with(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    objective: &ObjectiveSpec,
    opts: &SolveOptions,
    observer: &mut (dyn FnMut(&ProgressEvent) -> bool + Send),
) -> Result<Certificate> {
    let threads = if opts.deterministic { 1 } else { opts.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| solve(config, dataset, tm, objective, opts, observer))
}

fn solve(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    objective: &ObjectiveSpec,
    opts: &SolveOptions,
    observer: &mut (dyn FnMut(&ProgressEvent) -> bool + Send),
) -> Result<Certificate> {
    config.check(dataset)?;
    tm.check(dataset)?;
    objective.check(dataset)?;
    let start = Instant::now();
    let space = ActionSpace::with_grid(tm, dataset, &opts.grid)?;
    let clean = PoisonAssignment::all_clean(dataset.n_train());
    let primal = assignment_value(config, dataset, objective, &clean)?;
    let mut s = Solver {
        config,
        dataset,
        tm,
        objective,
        opts,
        space,
        start,
        incumbent: clean,
        primal,
        dual: f64::INFINITY,
        pruned_max: f64::NEG_INFINITY,
        nodes: 0,
        evaluations: 1,
        proven: false,
        stopped: false,
    };
    s.emit(EventKind::Start, 0, observer);

    // samples without an alternative value are clean in every attack
    let mut root = PoisonAssignment::all_undecided(dataset.n_train());
    for i in 0..dataset.n_train() {
        if s.space.choices(i) == 1 {
            root.set(i, SampleState::Clean);
        }
    }
    let (_, root_bound) = s.bound_of(&root)?;
    s.dual = root_bound.max(s.primal);
    s.emit(EventKind::Root, 1, observer);

    if !s.stopped {
        s.polish(opts.root_heuristic_cap, observer, 1)?;
    }

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    if !s.space.is_exact() {
        // no finite branching covers a continuous threat set
    } else if !s.proven && !s.stopped && !s.prunable(s.dual) {
        match s.evaluate(&root)? {
            Evaluated::Closed(best, n) => {
                s.evaluations += n;
                if let Some((a, v)) = best {
                    s.offer(&a, v);
                }
            }
            Evaluated::Open { dual, branch } => heap.push(Node {
                dual: dual.min(s.dual),
                depth: 0,
                seq,
                branch,
                partial: root.clone(),
            }),
        }
    } else if s.prunable(s.dual) && s.dual > s.primal {
        s.pruned_max = s.dual;
    }

    let mut timed_out = false;
    while !s.proven && !s.stopped {
        let Some(node) = heap.pop() else { break };
        if s.prunable(node.dual) {
            if node.dual > s.primal {
                s.pruned_max = s.pruned_max.max(node.dual);
            }
            continue;
        }
        if s.out_of_time() {
            heap.push(node);
            timed_out = true;
            break;
        }
        s.nodes += 1;
        let i = node.branch;
        let remaining = tm.budget - node.partial.budget_used();
        let mut improved = false;
        for k in 0..s.space.choices(i) {
            if k > 0 && remaining == 0 {
                break;
            }
            let mut child = node.partial.clone();
            child.set(i, s.space.state(i, k));
            match s.evaluate(&child)? {
                Evaluated::Closed(best, n) => {
                    s.evaluations += n;
                    if let Some((a, v)) = best {
                        improved |= s.offer(&a, v);
                    }
                }
                Evaluated::Open { dual, branch } => {
                    let dual = dual.min(node.dual);
                    if s.prunable(dual) {
                        if dual > s.primal {
                            s.pruned_max = s.pruned_max.max(dual);
                        }
                        continue;
                    }
                    seq += 1;
                    heap.push(Node { dual, depth: node.depth + 1, seq, branch, partial: child });
                }
            }
        }
        let open_max = heap.peek().map_or(f64::NEG_INFINITY, |n| n.dual);
        s.dual = s.dual.min(open_max.max(s.pruned_max).max(s.primal));
        if improved {
            s.emit(EventKind::Incumbent, heap.len(), observer);
            if !s.stopped {
                s.polish(opts.heuristic_cap, observer, heap.len())?;
            }
        } else {
            s.emit(EventKind::Node, heap.len(), observer);
        }
    }

    if opts.fill_budget && !s.stopped {
        let (a, v, n) = fill_budget(config, dataset, tm, objective, &s.space, &s.incumbent, s.primal)?;
        s.evaluations += n;
        if a != s.incumbent {
            s.incumbent = a;
            s.primal = v;
            s.emit(EventKind::Incumbent, heap.len(), observer);
        }
    }

    let open_max = heap.peek().map_or(f64::NEG_INFINITY, |n| n.dual);
    let bound = if s.proven {
        s.primal
    } else if !s.space.is_exact() {
        s.dual
    } else {
        s.dual.min(open_max.max(s.pruned_max).max(s.primal))
    };
    s.dual = bound.max(s.primal);
    let status = if s.objective.gap_closed(s.primal, s.dual) {
        Status::Optimal
    } else if s.stopped || timed_out {
        Status::Timeout
    } else {
        Status::Bounded
    };
    let elapsed = s.elapsed();
    let _ = observer(&ProgressEvent {
        elapsed,
        event: EventKind::Done,
        primal: s.primal,
        dual: s.dual,
        nodes: s.nodes,
        open: heap.len(),
        incumbent_hash: incumbent_hash(&s.incumbent),
    });
    Ok(Certificate {
        status,
        primal: s.primal,
        bound: s.dual,
        gap: s.dual - s.primal,
        incumbent: s.incumbent,
        provenance: Provenance {
            config_hash: config_hash(config, dataset, tm, objective, opts)?,
            seed: opts.grid.seed,
            init_seed: None,
            wall_time: (!opts.deterministic).then_some(elapsed),
            nodes: s.nodes,
            evaluations: s.evaluations,
            root_bound,
            complete: s.space.is_exact(),
        },
    })
}

/// Certificate from the local search plus the root bound, without a tree.
pub fn heuristic_certificate(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    objective: &ObjectiveSpec,
    opts: &SolveOptions,
) -> Result<Certificate> {
    let o = opts;
    let start = Instant::now();
    let space = ActionSpace::with_grid(tm, dataset, &o.grid)?;
    let clean = PoisonAssignment::all_clean(dataset.n_train());
    let mut res = local_search(config, dataset, tm, objective, &space, &clean, o.root_heuristic_cap, |_, _| {})?;
    if o.fill_budget {
        let (a, v, n) = fill_budget(config, dataset, tm, objective, &space, &res.assignment, res.value)?;
        res.evaluations += n;
        res.assignment = a;
        res.value = v;
    }
    let root = PoisonAssignment::all_undecided(dataset.n_train());
    let bs = propagate(config, dataset, tm, &root, o.mode)?;
    let root_bound = dual_with_logits(&bs, &bs.test_logits, objective, dataset)?.max(res.value);
    let bound = if res.optimal { res.value } else { root_bound };
    let status = if res.optimal || objective.gap_closed(res.value, bound) {
        Status::Optimal
    } else {
        Status::Bounded
    };
    Ok(Certificate {
        status,
        primal: res.value,
        bound,
        gap: bound - res.value,
        incumbent: res.assignment,
        provenance: Provenance {
            config_hash: config_hash(config, dataset, tm, objective, o)?,
            seed: o.grid.seed,
            init_seed: None,
            wall_time: (!o.deterministic).then(|| start.elapsed().as_secs_f64()),
            nodes: 0,
            evaluations: res.evaluations,
            root_bound,
            complete: space.is_exact(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_halfmoons;
    use crate::train::{Loss, Params};

    fn setup(seed: u64) -> (TrainConfig, Dataset) {
        let ds = make_halfmoons(14, 12, 0.25, seed).unwrap().with_schedule(5, 2).unwrap();
        (TrainConfig::new(0.5, Loss::Hinge, Params::seeded(&[2, 1], seed).unwrap()), ds)
    }

    fn brute_force(cfg: &TrainConfig, ds: &Dataset, tm: &ThreatModel, o: &ObjectiveSpec) -> f64 {
        let space = ActionSpace::exact(tm, ds).unwrap();
        space
            .completions(&PoisonAssignment::all_undecided(ds.n_train()), tm.budget)
            .iter()
            .map(|a| assignment_value(cfg, ds, o, a).unwrap())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn tree_only() -> SolveOptions {
        SolveOptions {
            root_heuristic_cap: 0,
            heuristic_cap: 0,
            enumerate_below: 8,
            deterministic: true,
            ..SolveOptions::default()
        }
    }

    #[test]
    fn tree_alone_is_complete() {
        let mut nodes = 0;
        for seed in 0..4 {
            let (cfg, ds) = setup(seed);
            for n in 1..=3 {
                let tm = ThreatModel::label_flip(n);
                for (o, branching) in [
                    (ObjectiveSpec::test_error(), Branching::BatchProbe),
                    (ObjectiveSpec::test_error(), Branching::MaxImpact),
                    (ObjectiveSpec::dos(), Branching::MaxImpact),
                ] {
                    let opts = SolveOptions { branching, ..tree_only() };
                    let c = branch_and_bound(&cfg, &ds, &tm, &o, &opts).unwrap();
                    assert_eq!(c.status, Status::Optimal);
                    let want = brute_force(&cfg, &ds, &tm, &o);
                    if o.is_integral() {
                        assert_eq!(c.primal, want, "seed {seed} n {n}");
                    } else {
                        assert!(o.gap_closed(c.primal, want) && c.primal <= want);
                    }
                    c.verify(&cfg, &ds, &tm, &o).unwrap();
                    nodes += c.provenance.nodes;
                }
            }
        }
        assert!(nodes > 0);
    }

    #[test]
    fn stopping_at_any_event_leaves_a_valid_certificate() {
        let (cfg, ds) = setup(1);
        let tm = ThreatModel::label_flip(3);
        let o = ObjectiveSpec::test_error();
        let mut total = 0;
        branch_and_bound_with(&cfg, &ds, &tm, &o, &tree_only(), &mut |_| {
            total += 1;
            true
        })
        .unwrap();
        for stop in 1..total {
            let mut seen = 0;
            let mut last_dual = f64::INFINITY;
            let mut last_primal = f64::NEG_INFINITY;
            let c = branch_and_bound_with(&cfg, &ds, &tm, &o, &tree_only(), &mut |e| {
                assert!(e.primal <= e.dual && e.dual <= last_dual && e.primal >= last_primal);
                last_dual = e.dual;
                last_primal = e.primal;
                seen += 1;
                seen < stop
            })
            .unwrap();
            c.verify(&cfg, &ds, &tm, &o).unwrap();
        }
    }

    #[test]
    fn deterministic_runs_are_identical() {
        let (cfg, ds) = setup(2);
        let tm = ThreatModel::label_flip(2);
        let o = ObjectiveSpec::test_error();
        let a = branch_and_bound(&cfg, &ds, &tm, &o, &tree_only()).unwrap();
        let b = branch_and_bound(&cfg, &ds, &tm, &o, &tree_only()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.provenance.wall_time.is_none());
    }

    #[test]
    fn certified_root_needs_no_branching() {
        let (mut cfg, ds) = setup(3);
        cfg.lr = 0.0;
        let c = branch_and_bound(&cfg, &ds, &ThreatModel::label_flip(2), &ObjectiveSpec::test_error(), &tree_only()).unwrap();
        assert_eq!(c.status, Status::Optimal);
        assert_eq!(c.provenance.nodes, 0);
        assert_eq!(c.primal, c.bound);
    }

    #[test]
    fn continuous_threats_are_bounded() {
        let (cfg, ds) = setup(0);
        let tm = ThreatModel::bounded(2, 0.3, 0.0, true);
        let o = ObjectiveSpec::test_error();
        let c = branch_and_bound(&cfg, &ds, &tm, &o, &SolveOptions { deterministic: true, ..SolveOptions::default() })
            .unwrap();
        assert!(!c.provenance.complete);
        assert!(matches!(c.status, Status::Bounded | Status::Optimal));
        c.verify(&cfg, &ds, &tm, &o).unwrap();
    }
}
