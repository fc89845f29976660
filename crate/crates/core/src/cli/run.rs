use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Prepared, RunConfig};
use crate::data::{Dataset, Task};
use crate::encode::{build, emit, Census, MiqcpModel};
use crate::error::{Error, Result};
use crate::interval::{big_m_tables, dual_with_logits, obbt_from_state, propagate, BigMTable, BoundState, Interval, Mode};
use crate::solve::{
    branch_and_bound_with, heuristic_certificate, predict_class, Certificate, ObjectiveKind, ProgressEvent, ProgressLog,
};
use crate::threat::{AttackEntry, PoisonAssignment, ThreatModel};
use crate::train::{predict_logit, replay_outcome, Params, ReplayOutcome};

/// Resolution of the decision-boundary grid per axis.
const GRID_STEPS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: Option<u64>,
    pub init: Option<u64>,
    pub grid: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prepare: f64,
    pub solve: f64,
    pub total: f64,
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub clean_objective: f64,
    pub attack_objective: f64,
    pub bound: f64,
    pub n_test: usize,
    pub poisoned: usize,
    /// Test accuracy of the clean model (classification only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean_accuracy: Option<f64>,
    /// Test accuracy of the model trained on the incumbent attack.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attacked_accuracy: Option<f64>,
    /// Accuracy guaranteed under every admissible attack.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certified_accuracy: Option<f64>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    /// The configuration with every default filled in; feeding it back
    /// reproduces the run.
    pub config: RunConfig,
    pub certificate: Certificate,
    pub summary: Summary,
    pub seeds: Seeds,
    /// Omitted in deterministic mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

/// Contents of `attack.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackFile {
    pub poisoned: Vec<usize>,
    pub entries: Vec<AttackEntry>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestBound {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

/// Contents of `bounds.json`: big-M constants of the test logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub mode: Mode,
    pub obbt: bool,
    pub groups: Option<usize>,
    pub mean_width: f64,
    pub max_width: f64,
    pub unstable_train_neurons: usize,
    pub unstable_test_neurons: usize,
    /// Interval bound on the objective at the root.
    pub root_bound: f64,
    pub test: Vec<TestBound>,
}

impl RunConfig {
    /// Echo of the configuration as actually run.
    fn resolved(&self, p: &Prepared) -> RunConfig {
        RunConfig {
            threat: p.threat.clone(),
            solver: p.solve.clone(),
            ..self.clone()
        }
    }
}

/// Root bound state and big-M table, with OBBT-tightened test logits when enabled.
pub fn root_bounds(p: &Prepared) -> Result<(BoundState, BigMTable)> {
    let root = PoisonAssignment::all_undecided(p.dataset.n_train());
    let bs = propagate(&p.train, &p.dataset, &p.threat, &root, p.solve.mode)?;
    let mut table = big_m_tables(&bs)?;
    if let Some(g) = p.solve.obbt_groups {
        table = table.with_test_logits(obbt_from_state(&bs, &p.train, &p.dataset, g)?)?;
    }
    Ok((bs, table))
}

pub fn bounds_report(p: &Prepared) -> Result<(BoundsReport, BigMTable)> {
    let (bs, table) = root_bounds(p)?;
    let widths: Vec<f64> = table.test.iter().map(Interval::width).collect();
    let n = widths.len().max(1) as f64;
    let report = BoundsReport {
        mode: p.solve.mode,
        obbt: p.solve.obbt_groups.is_some(),
        groups: p.solve.obbt_groups,
        mean_width: widths.iter().sum::<f64>() / n,
        max_width: widths.iter().cloned().fold(0.0, f64::max),
        unstable_train_neurons: table.unstable_train_neurons(),
        unstable_test_neurons: table.unstable_test_neurons(),
        root_bound: dual_with_logits(&bs, &table.test, &p.objective, &p.dataset)?,
        test: table
            .test
            .iter()
            .enumerate()
            .map(|(index, iv)| TestBound { index, lo: iv.lo, hi: iv.hi, width: iv.width() })
            .collect(),
    };
    Ok((report, table))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes the nested big-M table (`t -> i -> k -> {lo, hi}`).
pub fn dump_bounds(table: &BigMTable, path: &Path) -> Result<()> {
    write_json(path, &table.nested_json())
}

/// Interval pipeline only: writes `bounds.json` into the output directory.
pub fn run_bounds(cfg: &RunConfig, out: &Path, dump: Option<&Path>) -> Result<BoundsReport> {
    let p = cfg.prepare()?;
    let (report, table) = bounds_report(&p)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("bounds.json"), &report)?;
    if let Some(d) = dump {
        dump_bounds(&table, d)?;
    }
    Ok(report)
}

/// Builds the attack model and writes it to `path`. The returned census
/// equals the comments at the top of the file.
pub fn run_export(cfg: &RunConfig, path: &Path, dump: Option<&Path>) -> Result<(MiqcpModel, Census)> {
    let p = cfg.prepare()?;
    let (_, table) = root_bounds(&p)?;
    let model = build(&p.train, &p.dataset, &p.threat, &p.objective, &table, &p.build)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    emit(&model, path)?;
    if let Some(d) = dump {
        dump_bounds(&table, d)?;
    }
    let census = Census::of(&model);
    Ok((model, census))
}

fn accuracy(params: &Params, ds: &Dataset) -> f64 {
    let right = ds
        .test
        .iter()
        .filter(|s| predict_class(predict_logit(params, &s.features)) == s.label)
        .count();
    right as f64 / ds.n_test().max(1) as f64
}

fn summarize(p: &Prepared, cert: &Certificate, clean: &ReplayOutcome, attacked: &ReplayOutcome) -> Summary {
    let ds = &p.dataset;
    let classification = ds.task == Task::Classification;
    let certified = (p.objective.kind == ObjectiveKind::TestError).then(|| {
        // the objective counts errors, so the worst case is at most floor(bound)
        let errors = (cert.bound + 1e-9).floor().clamp(0.0, ds.n_test() as f64);
        (ds.n_test() as f64 - errors) / ds.n_test() as f64
    });
    Summary {
        clean_objective: p.objective.evaluate_outcome(clean, ds),
        attack_objective: cert.primal,
        bound: cert.bound,
        n_test: ds.n_test(),
        poisoned: cert.incumbent.budget_used(),
        clean_accuracy: classification.then(|| accuracy(&clean.params, ds)),
        attacked_accuracy: classification.then(|| accuracy(&attacked.params, ds)),
        certified_accuracy: certified,
    }
}

fn thread_pool(p: &Prepared) -> Result<rayon::ThreadPool> {
    let threads = if p.solve.deterministic { 1 } else { p.solve.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Complete certification: writes `report.json`, `bounds.json`,
/// `progress.jsonl`, `attack.json` and `plotdata/`.
pub fn run_certify(cfg: &RunConfig, out: &Path, dump: Option<&Path>) -> Result<Report> {
    let t0 = Instant::now();
    let p = cfg.prepare()?;
    fs::create_dir_all(out)?;
    let (bounds, table) = bounds_report(&p)?;
    write_json(&out.join("bounds.json"), &bounds)?;
    if let Some(d) = dump {
        dump_bounds(&table, d)?;
    }
    let prepare = t0.elapsed().as_secs_f64();

    let mut log = ProgressLog::new(BufWriter::new(File::create(out.join("progress.jsonl"))?));
    let mut failed: Option<Error> = None;
    let deterministic = p.solve.deterministic;
    let t1 = Instant::now();
    let mut cert = branch_and_bound_with(
        &p.train,
        &p.dataset,
        &p.threat,
        &p.objective,
        &p.solve,
        &mut |e: &ProgressEvent| {
            let mut e = e.clone();
            if deterministic {
                e.elapsed = 0.0;
            }
            match log.write(&e) {
                Ok(()) => true,
                Err(err) => {
                    failed.get_or_insert(err);
                    false
                }
            }
        },
    )?;
    if let Some(e) = failed {
        return Err(e);
    }
    log.into_inner().flush()?;
    let solve = t1.elapsed().as_secs_f64();
    finish(cfg, &p, &mut cert, out, "certify", prepare, solve, t0)
}

/// Heuristic attack only: the certificate carries the root bound.
pub fn run_attack(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let t0 = Instant::now();
    let p = cfg.prepare()?;
    fs::create_dir_all(out)?;
    let prepare = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let mut cert = thread_pool(&p)?.install(|| heuristic_certificate(&p.train, &p.dataset, &p.threat, &p.objective, &p.solve))?;
    let solve = t1.elapsed().as_secs_f64();
    finish(cfg, &p, &mut cert, out, "attack", prepare, solve, t0)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &RunConfig,
    p: &Prepared,
    cert: &mut Certificate,
    out: &Path,
    command: &str,
    prepare: f64,
    solve: f64,
    t0: Instant,
) -> Result<Report> {
    cert.provenance.init_seed = cfg.train.init.seed();
    let clean = replay_outcome(&p.train, &p.dataset, &PoisonAssignment::all_clean(p.dataset.n_train()))?;
    let attacked = replay_outcome(&p.train, &p.dataset, &cert.incumbent)?;
    let attack = AttackFile {
        poisoned: cert.incumbent.poisoned_indices(),
        entries: cert.incumbent.attack_entries(),
        objective: cert.primal,
    };
    write_json(&out.join("attack.json"), &attack)?;
    write_plotdata(p, &cert.incumbent, &clean, &attacked, &out.join("plotdata"))?;
    let report = Report {
        command: command.into(),
        config: cfg.resolved(p),
        summary: summarize(p, cert, &clean, &attacked),
        certificate: cert.clone(),
        seeds: Seeds {
            data: cfg.dataset.source.seed(),
            init: cfg.train.init.seed(),
            grid: p.solve.grid.seed,
        },
        timings: (!p.solve.deterministic).then(|| Timings { prepare, solve, total: t0.elapsed().as_secs_f64() }),
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct Column {
    name: &'static str,
    description: &'static str,
}

#[derive(Serialize)]
struct PlotFile {
    file: &'static str,
    kind: &'static str,
    x: &'static str,
    columns: Vec<Column>,
}

fn col(name: &'static str, description: &'static str) -> Column {
    Column { name, description }
}

/// Loss curves, sample scatter and (for 2-d inputs) a decision grid, plus
/// `schema.json` describing every column.
pub fn write_plotdata(
    p: &Prepared,
    attack: &PoisonAssignment,
    clean: &ReplayOutcome,
    attacked: &ReplayOutcome,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ds = &p.dataset;
    let bpe = ds.batches_per_epoch();
    let mut schema = Vec::new();

    let mut w = csv::Writer::from_path(dir.join("loss_iterations.csv")).map_err(csv_err)?;
    w.write_record(["iteration", "epoch", "clean", "poisoned"]).map_err(csv_err)?;
    for (k, (c, a)) in clean.iteration_losses.iter().zip(&attacked.iteration_losses).enumerate() {
        let row = [(k + 1).to_string(), (k / bpe + 1).to_string(), c.to_string(), a.to_string()];
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    schema.push(PlotFile {
        file: "loss_iterations.csv",
        kind: "line",
        x: "iteration",
        columns: vec![
            col("iteration", "SGD iteration, from 1"),
            col("epoch", "epoch of the iteration, from 1"),
            col("clean", "batch training loss without poisoning"),
            col("poisoned", "batch training loss under the attack"),
        ],
    });

    let mut w = csv::Writer::from_path(dir.join("loss_epochs.csv")).map_err(csv_err)?;
    w.write_record(["epoch", "clean", "poisoned", "clean_cumulative", "poisoned_cumulative"]).map_err(csv_err)?;
    let (mut cc, mut pc) = (0.0, 0.0);
    for (k, (c, a)) in clean.epoch_losses(bpe).iter().zip(attacked.epoch_losses(bpe)).enumerate() {
        cc += c;
        pc += a;
        let row = [(k + 1).to_string(), c.to_string(), a.to_string(), cc.to_string(), pc.to_string()];
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    schema.push(PlotFile {
        file: "loss_epochs.csv",
        kind: "line",
        x: "epoch",
        columns: vec![
            col("epoch", "epoch, from 1"),
            col("clean", "summed batch loss of the epoch without poisoning"),
            col("poisoned", "summed batch loss of the epoch under the attack"),
            col("clean_cumulative", "running sum of clean"),
            col("poisoned_cumulative", "running sum of poisoned"),
        ],
    });

    let raw = &p.raw;
    let mut w = csv::Writer::from_path(dir.join("points.csv")).map_err(csv_err)?;
    let mut header: Vec<String> = ["split", "index", "label", "poisoned", "poisoned_label"].map(String::from).to_vec();
    header.extend((0..raw.d).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_err)?;
    let entries = attack.attack_entries();
    for (i, s) in raw.train.iter().enumerate() {
        let hit = entries.iter().find(|e| e.index == i);
        let mut row = vec![
            "train".to_string(),
            i.to_string(),
            s.label.to_string(),
            u8::from(hit.is_some()).to_string(),
            hit.map_or(s.label, |e| e.label).to_string(),
        ];
        row.extend(s.features.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    for (i, s) in raw.test.iter().enumerate() {
        let mut row = vec!["test".to_string(), i.to_string(), s.label.to_string(), "0".into(), s.label.to_string()];
        row.extend(s.features.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    schema.push(PlotFile {
        file: "points.csv",
        kind: "scatter",
        x: "x0",
        columns: vec![
            col("split", "train or test"),
            col("index", "sample index within the split, from 0"),
            col("label", "clean label"),
            col("poisoned", "1 when the attack modifies the sample"),
            col("poisoned_label", "label after the attack"),
            col("x0..", "raw input features before scaling and the feature map"),
        ],
    });

    if raw.d == 2 {
        let (lo, hi) = bounding_box(raw);
        let mut w = csv::Writer::from_path(dir.join("decision_grid.csv")).map_err(csv_err)?;
        w.write_record(["x0", "x1", "clean_logit", "poisoned_logit"]).map_err(csv_err)?;
        for a in 0..=GRID_STEPS {
            for b in 0..=GRID_STEPS {
                let x = [
                    lo[0] + (hi[0] - lo[0]) * a as f64 / GRID_STEPS as f64,
                    lo[1] + (hi[1] - lo[1]) * b as f64 / GRID_STEPS as f64,
                ];
                let z = p.transform(&x);
                let row = [
                    x[0].to_string(),
                    x[1].to_string(),
                    predict_logit(&clean.params, &z).to_string(),
                    predict_logit(&attacked.params, &z).to_string(),
                ];
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        schema.push(PlotFile {
            file: "decision_grid.csv",
            kind: "heatmap",
            x: "x0",
            columns: vec![
                col("x0", "first raw input coordinate"),
                col("x1", "second raw input coordinate"),
                col("clean_logit", "logit of the clean model; the boundary is the zero level set"),
                col("poisoned_logit", "logit of the model trained under the attack"),
            ],
        });
    }
    write_json(&dir.join("schema.json"), &schema)
}

/// Data range padded by 10% on each side.
fn bounding_box(ds: &Dataset) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for s in ds.train.iter().chain(&ds.test) {
        for j in 0..2 {
            lo[j] = lo[j].min(s.features[j]);
            hi[j] = hi[j].max(s.features[j]);
        }
    }
    for j in 0..2 {
        let pad = 0.1 * (hi[j] - lo[j]).max(1e-6);
        lo[j] -= pad;
        hi[j] += pad;
    }
    (lo, hi)
}

/// Writes `train.csv` and `test.csv` (features then label, with a header).
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, rows) in [("train.csv", &ds.train), ("test.csv", &ds.test)] {
        let mut w = csv::Writer::from_path(dir.join(name)).map_err(csv_err)?;
        let mut header: Vec<String> = (0..ds.d).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header).map_err(csv_err)?;
        for s in rows {
            let mut row: Vec<String> = s.features.iter().map(f64::to_string).collect();
            row.push(s.label.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Re-checks a written report against a fresh replay of its own config.
pub fn verify_report(report: &Report) -> Result<()> {
    let p = report.config.prepare()?;
    let tm: &ThreatModel = &p.threat;
    report.certificate.verify(&p.train, &p.dataset, tm, &p.objective)
}
