#![allow(dead_code)]

use std::path::PathBuf;

use poisoncert::data::{Dataset, Sample, Task};
use poisoncert::encode::{build, BuildOptions, MiqcpModel};
use poisoncert::interval::{big_m_tables, propagate, Mode};
use poisoncert::solve::ObjectiveSpec;
use poisoncert::threat::{PoisonAssignment, ThreatModel};
use poisoncert::train::{Loss, Params, TrainConfig};

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/one_sample.lp")
}

/// One training sample, one iteration, a linear model and a single label flip.
pub fn one_sample_model() -> MiqcpModel {
    let train = vec![Sample::new(vec![0.5, -1.0], 1.0)];
    let test = vec![Sample::new(vec![0.4, -0.8], 1.0), Sample::new(vec![-0.3, 0.2], 0.0)];
    let ds = Dataset::new(train, test, Task::Classification).unwrap();
    let cfg = TrainConfig::new(1.0, Loss::Hinge, Params::linear(vec![0.1, 0.2], -0.1));
    let tm = ThreatModel::label_flip(1);
    let bs = propagate(&cfg, &ds, &tm, &PoisonAssignment::all_undecided(1), Mode::Direct).unwrap();
    let table = big_m_tables(&bs).unwrap();
    build(&cfg, &ds, &tm, &ObjectiveSpec::test_error(), &table, &BuildOptions::default()).unwrap()
}

/// Directory of the bundled run configurations.
pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}
