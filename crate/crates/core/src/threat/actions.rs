use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PoisonAssignment, SampleState, ThreatKind, ThreatModel};
use crate::data::{Dataset, Sample, Task};
use crate::error::{Error, Result};

/// Candidate grid used when the threat model is continuous.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Box corners (or ε-ball sign patterns) kept; all corners when `2^d` fits.
    pub max_corners: usize,
    /// Uniform interior points of the attacker box (substitution only).
    pub interior_points: usize,
    pub seed: u64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            max_corners: 16,
            interior_points: 2,
            seed: 0,
        }
    }
}

/// Finite set of poisoned values per training sample. Action `0` means
/// clean, action `k >= 1` means "poisoned with candidate `k - 1`".
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    actions: Vec<Vec<Sample>>,
    exact: bool,
}

impl ActionSpace {
    /// The complete action space of a discrete threat model.
    pub fn exact(tm: &ThreatModel, dataset: &Dataset) -> Result<Self> {
        if !tm.is_discrete(dataset.task) {
            return Err(Error::UnsupportedNeighborhood(
                "continuous perturbations need a candidate grid".into(),
            ));
        }
        Self::with_grid(tm, dataset, &GridOptions::default())
    }

    /// Exact actions for discrete threat models, otherwise a seeded grid of
    /// vertices and interior points.
    pub fn with_grid(tm: &ThreatModel, dataset: &Dataset, grid: &GridOptions) -> Result<Self> {
        tm.check(dataset)?;
        let exact = tm.is_discrete(dataset.task);
        let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
        let d = dataset.d;
        let signs = sign_patterns(d, grid.max_corners, &mut rng);

        let label_options = |clean: &Sample| -> Vec<f64> {
            match dataset.task {
                Task::Classification if tm.label_flip => vec![clean.label, 1.0 - clean.label],
                Task::Classification => vec![clean.label],
                Task::Regression if tm.nu > 0.0 => vec![clean.label, clean.label + tm.nu, clean.label - tm.nu],
                Task::Regression => vec![clean.label],
            }
        };

        let shared_points: Vec<Vec<f64>> = match tm.kind {
            ThreatKind::Substitution => match &tm.grid {
                Some(points) => points.iter().map(|p| p.features.clone()).collect(),
                None => {
                    let mut pts: Vec<Vec<f64>> = signs
                        .iter()
                        .map(|s| {
                            (0..d)
                                .map(|j| if s[j] > 0.0 { tm.domain_hi[j] } else { tm.domain_lo[j] })
                                .collect()
                        })
                        .collect();
                    for _ in 0..grid.interior_points {
                        pts.push(
                            (0..d)
                                .map(|j| tm.domain_lo[j] + rng.random::<f64>() * (tm.domain_hi[j] - tm.domain_lo[j]))
                                .collect(),
                        );
                    }
                    pts
                }
            },
            ThreatKind::Bounded => Vec::new(),
        };

        let mut actions = Vec::with_capacity(dataset.n_train());
        for clean in &dataset.train {
            let mut cands: Vec<Sample> = Vec::new();
            let mut push = |features: Vec<f64>, label: f64| {
                let s = Sample::new(features, label);
                if s != *clean && !cands.contains(&s) {
                    cands.push(s);
                }
            };
            match tm.kind {
                ThreatKind::Bounded => {
                    let mut feature_opts = vec![clean.features.clone()];
                    if tm.epsilon > 0.0 {
                        for s in &signs {
                            feature_opts.push(
                                clean.features.iter().zip(s).map(|(x, s)| x + s * tm.epsilon).collect(),
                            );
                        }
                    }
                    for f in &feature_opts {
                        for &y in &label_options(clean) {
                            push(f.clone(), y);
                        }
                    }
                }
                ThreatKind::Substitution => match (&tm.grid, tm.label_flip) {
                    (Some(points), false) => {
                        for p in points {
                            push(p.features.clone(), p.label);
                        }
                    }
                    _ => {
                        for f in &shared_points {
                            let labels = if dataset.task == Task::Classification && tm.label_flip {
                                vec![0.0, 1.0]
                            } else {
                                label_options(clean)
                            };
                            for y in labels {
                                push(f.clone(), y);
                            }
                        }
                    }
                },
            }
            actions.push(cands);
        }
        Ok(ActionSpace { actions, exact })
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self, i: usize) -> &[Sample] {
        &self.actions[i]
    }

    /// Number of choices for sample `i`, counting "clean".
    pub fn choices(&self, i: usize) -> usize {
        self.actions[i].len() + 1
    }

    pub fn state(&self, i: usize, action: usize) -> SampleState {
        if action == 0 {
            SampleState::Clean
        } else {
            let s = &self.actions[i][action - 1];
            SampleState::poisoned(s.features.clone(), s.label)
        }
    }

    /// Action index of a decided state, `None` if it is off-grid or undecided.
    pub fn index_of(&self, i: usize, state: &SampleState) -> Option<usize> {
        match state {
            SampleState::Clean => Some(0),
            SampleState::Poisoned { features, label } => self.actions[i]
                .iter()
                .position(|s| s.features == *features && s.label == *label)
                .map(|k| k + 1),
            SampleState::Undecided => None,
        }
    }

    /// Number of complete assignments extending `partial` with at most
    /// `remaining` further poisoned samples (saturating).
    pub fn completion_count(&self, partial: &PoisonAssignment, remaining: usize) -> u128 {
        let mut ways = vec![0u128; remaining + 1];
        ways[0] = 1;
        for i in 0..partial.len() {
            if !matches!(partial.get(i), SampleState::Undecided) {
                continue;
            }
            let m = self.actions[i].len() as u128;
            for k in (1..=remaining).rev() {
                ways[k] = ways[k].saturating_add(ways[k - 1].saturating_mul(m));
            }
        }
        ways.iter().fold(0u128, |acc, w| acc.saturating_add(*w))
    }

    /// Every complete assignment extending `partial` with at most `remaining`
    /// further poisoned samples, in lexicographic action order.
    pub fn completions(&self, partial: &PoisonAssignment, remaining: usize) -> Vec<PoisonAssignment> {
        let free: Vec<usize> = (0..partial.len())
            .filter(|&i| matches!(partial.get(i), SampleState::Undecided))
            .collect();
        let mut out = Vec::new();
        let mut current = partial.completed_clean();
        self.fill(&free, 0, remaining, &mut current, &mut out);
        out
    }

    fn fill(
        &self,
        free: &[usize],
        pos: usize,
        remaining: usize,
        current: &mut PoisonAssignment,
        out: &mut Vec<PoisonAssignment>,
    ) {
        if pos == free.len() || remaining == 0 {
            out.push(current.clone());
            return;
        }
        let i = free[pos];
        self.fill(free, pos + 1, remaining, current, out);
        for k in 1..self.choices(i) {
            current.set(i, self.state(i, k));
            self.fill(free, pos + 1, remaining - 1, current, out);
        }
        current.set(i, SampleState::Clean);
    }
}

fn sign_patterns(d: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let all = d < usize::BITS as usize && (1usize << d) <= max;
    if all {
        (0..1usize << d)
            .map(|mask| (0..d).map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 }).collect())
            .collect()
    } else {
        (0..max)
            .map(|_| (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
            .collect()
    }
}
