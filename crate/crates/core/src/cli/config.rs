use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{diabetes, expand, iris, load_csv, make_halfmoons, CsvSchema, Dataset, FeatureMap, MinMaxScaler, Task};
use crate::encode::BuildOptions;
use crate::error::{Error, Result};
use crate::interval::Mode;
use crate::solve::{ObjectiveSpec, SolveOptions};
use crate::threat::{ThreatKind, ThreatModel};
use crate::train::{Init, Loss, TrainConfig};

/// Where the raw samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Source {
    Halfmoons {
        #[serde(default = "default_hm_train")]
        n_train: usize,
        #[serde(default = "default_hm_test")]
        n_test: usize,
        #[serde(default = "default_hm_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Iris {
        #[serde(default)]
        seed: u64,
    },
    Diabetes {
        #[serde(default)]
        seed: u64,
    },
    Csv {
        train: PathBuf,
        /// Separate test file; otherwise rows after `n_train` form the test split.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_train: Option<usize>,
        #[serde(default = "yes")]
        header: bool,
        task: Task,
    },
}

fn default_hm_train() -> usize {
    100
}
fn default_hm_test() -> usize {
    40
}
fn default_hm_noise() -> f64 {
    0.1
}
fn yes() -> bool {
    true
}

impl Source {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Source::Halfmoons { seed, .. } | Source::Iris { seed } | Source::Diabetes { seed } => Some(*seed),
            Source::Csv { .. } => None,
        }
    }
}

// no deny_unknown_fields here: serde does not support it next to `flatten`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: Source,
    pub batch_size: usize,
    pub epochs: usize,
    /// Min-max scale features to `[0, 1]` (fitted on the training split)
    /// before the feature map.
    #[serde(default)]
    pub scale: bool,
    #[serde(default = "identity")]
    pub features: FeatureMap,
}

fn identity() -> FeatureMap {
    FeatureMap::Identity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<Vec<f64>>,
    pub loss: Loss,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tightening {
    pub obbt: bool,
    /// Number of test-sample groups P used by OBBT.
    pub groups: usize,
    pub aux: bool,
}

impl Default for Tightening {
    fn default() -> Self {
        Tightening { obbt: false, groups: 4, aux: false }
    }
}

/// One experiment: data, model, adversary, objective and search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainSpec,
    pub threat: ThreatModel,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub tightening: Tightening,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A configuration turned into the objects the library works with.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    /// Training split before scaling and the feature map, kept for plots.
    pub raw: Dataset,
    pub scaler: Option<MinMaxScaler>,
    pub features: FeatureMap,
    pub train: TrainConfig,
    pub threat: ThreatModel,
    pub objective: ObjectiveSpec,
    pub solve: SolveOptions,
    pub build: BuildOptions,
}

impl Prepared {
    /// Model input for a raw sample.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let scaled = match &self.scaler {
            Some(s) => s.transform(x),
            None => x.to_vec(),
        };
        self.features.apply(&scaled)
    }
}

impl RunConfig {
    /// Reads TOML, or JSON when the file ends in `.json`. Relative CSV
    /// paths are resolved against the directory of the config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_str_ext(&text, path.extension().and_then(|e| e.to_str()) == Some("json"))
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_str_ext(text, false)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_str_ext(text, true)
    }

    fn from_str_ext(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    fn rebase(&mut self, dir: &Path) {
        if let Source::Csv { train, test, .. } = &mut self.dataset.source {
            if train.is_relative() {
                *train = dir.join(&*train);
            }
            if let Some(t) = test {
                if t.is_relative() {
                    *t = dir.join(&*t);
                }
            }
        }
    }

    /// Checks referenced files and builds everything a run needs.
    pub fn prepare(&self) -> Result<Prepared> {
        let raw = self.load_dataset()?;
        let scaler = self.dataset.scale.then(|| MinMaxScaler::fit(&raw));
        let scaled = match &scaler {
            Some(s) => s.apply(&raw),
            None => raw.clone(),
        };
        let dataset = expand(&self.dataset.features, &scaled)?;
        let t = &self.train;
        if t.loss.task() != dataset.task {
            return Err(Error::config(format!("{:?} loss does not fit a {:?} dataset", t.loss, dataset.task)));
        }
        let mut train = TrainConfig::new(t.lr, t.loss, t.init.build(dataset.d)?);
        train.lr_schedule = t.lr_schedule.clone();
        train.check(&dataset)?;

        let mut threat = self.threat.clone();
        if threat.kind == ThreatKind::Substitution && threat.domain_lo.is_empty() && threat.domain_hi.is_empty() {
            // unbounded attack: anything inside the observed feature range
            let (lo, hi) = feature_range(&dataset);
            threat.domain_lo = lo;
            threat.domain_hi = hi;
        }
        threat.check(&dataset)?;
        self.objective.check(&dataset)?;

        let tight = self.tightening;
        if tight.obbt && (tight.groups == 0 || tight.groups > dataset.n_test()) {
            return Err(Error::config(format!(
                "obbt groups must lie in 1..={}, got {}",
                dataset.n_test(),
                tight.groups
            )));
        }
        let solve = SolveOptions {
            mode: if tight.aux { Mode::Auxiliary } else { Mode::Direct },
            obbt_groups: tight.obbt.then_some(tight.groups),
            ..self.solver.clone()
        };
        let build = BuildOptions { aux: tight.aux, ..BuildOptions::default() };
        Ok(Prepared {
            dataset,
            raw,
            scaler,
            features: self.dataset.features.clone(),
            train,
            threat,
            objective: self.objective.clone(),
            solve,
            build,
        })
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let spec = &self.dataset;
        let ds = match &spec.source {
            Source::Halfmoons { n_train, n_test, noise, seed } => make_halfmoons(*n_train, *n_test, *noise, *seed)?,
            Source::Iris { seed } => iris(*seed)?,
            Source::Diabetes { seed } => diabetes(*seed)?,
            Source::Csv { train, test, n_train, header, task } => {
                for p in std::iter::once(train).chain(test) {
                    if !p.is_file() {
                        return Err(Error::config(format!("data file {} does not exist", p.display())));
                    }
                }
                let schema = CsvSchema { has_header: *header, n_features: None };
                let mut ds = load_csv(train, schema, *task)?;
                match (test, n_train) {
                    (Some(t), None) => {
                        let schema = CsvSchema { has_header: *header, n_features: Some(ds.d) };
                        ds.test = load_csv(t, schema, *task)?.train;
                        ds
                    }
                    (None, Some(n)) => ds.split_off_test(*n)?,
                    _ => return Err(Error::config("csv data needs exactly one of `test` and `n_train`")),
                }
            }
        };
        ds.with_schedule(spec.batch_size, spec.epochs)
    }
}

fn feature_range(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; ds.d];
    let mut hi = vec![f64::NEG_INFINITY; ds.d];
    for s in &ds.train {
        for (j, &v) in s.features.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HALFMOONS: &str = r#"
        output = "runs/hm"

        [dataset]
        source = "halfmoons"
        seed = 3
        batch_size = 20
        epochs = 2
        features = { kind = "polynomial", degree = 3 }

        [train]
        lr = 0.1
        loss = "hinge"
        init = { kind = "zeros", hidden = [] }

        [threat]
        kind = "bounded"
        budget = 2
        label_flip = true

        [objective]
        kind = "test_error"
    "#;

    #[test]
    fn toml_defaults_are_filled_in() {
        let cfg = RunConfig::from_toml(HALFMOONS).unwrap();
        assert_eq!(
            cfg.dataset.source,
            Source::Halfmoons { n_train: 100, n_test: 40, noise: 0.1, seed: 3 }
        );
        assert_eq!(cfg.solver, SolveOptions::default());
        assert_eq!(cfg.tightening, Tightening::default());
        let p = cfg.prepare().unwrap();
        assert_eq!(p.dataset.d, 9);
        assert_eq!(p.dataset.iterations(), 10);
        assert_eq!(p.solve.mode, Mode::Direct);
        assert_eq!(p.solve.obbt_groups, None);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_toml(HALFMOONS).unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = HALFMOONS.replace("lr = 0.1", "lr = 0.1\nrate = 3");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn missing_csv_is_a_config_error() {
        let text = HALFMOONS.replace(
            "source = \"halfmoons\"\n        seed = 3",
            "source = \"csv\"\n        train = \"/nonexistent/train.csv\"\n        n_train = 10\n        task = \"classification\"",
        );
        let err = RunConfig::from_toml(&text).unwrap().prepare().unwrap_err();
        assert!(err.is_config_error(), "{err}");
    }

    #[test]
    fn unbounded_substitution_uses_the_feature_range() {
        let text = HALFMOONS
            .replace("kind = \"bounded\"", "kind = \"substitution\"")
            .replace("features = { kind = \"polynomial\", degree = 3 }", "");
        let p = RunConfig::from_toml(&text).unwrap().prepare().unwrap();
        let xs = |j: usize| p.dataset.train.iter().map(move |s| s.features[j]);
        assert_eq!(p.threat.domain_lo[0], xs(0).fold(f64::INFINITY, f64::min));
        assert_eq!(p.threat.domain_hi[1], xs(1).fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn loss_must_match_the_task() {
        let text = HALFMOONS.replace("loss = \"hinge\"", "loss = \"squared_error\"");
        assert!(RunConfig::from_toml(&text).unwrap().prepare().unwrap_err().is_config_error());
    }
}
