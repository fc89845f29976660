use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::propagate::{forward_bounds, top_r_positive};
use super::{propagate, BoundState, Interval, Mode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::threat::{PoisonAssignment, ThreatModel};
use crate::train::TrainConfig;

const GROUP_SEED: u64 = 0x5eed;

/// Partitions the test set into `groups` clusters: by label for two groups,
/// singletons for `N_test` groups, otherwise seeded farthest-point clustering.
pub fn group_test_samples(dataset: &Dataset, groups: usize) -> Result<Vec<Vec<usize>>> {
    let n = dataset.n_test();
    if groups == 0 || groups > n {
        return Err(Error::validation(format!("cannot split {n} test samples into {groups} groups")));
    }
    if groups == n {
        return Ok((0..n).map(|i| vec![i]).collect());
    }
    if groups == 2 {
        let ones: Vec<usize> = (0..n).filter(|&i| dataset.test[i].label == 1.0).collect();
        let zeros: Vec<usize> = (0..n).filter(|&i| dataset.test[i].label != 1.0).collect();
        if !ones.is_empty() && !zeros.is_empty() {
            return Ok(vec![zeros, ones]);
        }
    }
    let dist = |a: usize, b: usize| -> f64 {
        dataset.test[a]
            .features
            .iter()
            .zip(&dataset.test[b].features)
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(GROUP_SEED);
    let mut centers = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(i, centers[0])).collect();
    while centers.len() < groups {
        let far = (0..n)
            .filter(|i| !centers.contains(i))
            .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a)))
            .expect("fewer centers than samples");
        centers.push(far);
        for i in 0..n {
            nearest[i] = nearest[i].min(dist(i, far));
        }
    }
    let mut out = vec![Vec::new(); groups];
    for i in 0..n {
        let g = (0..groups)
            .min_by(|&a, &b| dist(i, centers[a]).total_cmp(&dist(i, centers[b])))
            .expect("groups > 0");
        out[g].push(i);
    }
    out.retain(|g| !g.is_empty());
    Ok(out)
}

/// Logit enclosure valid for every input in `xbox` (features only).
///
/// For a single linear layer the final logit is θ^(0)·x̂ − Σ_t η_t Σ_i δ^(t,i)·x̂,
/// so each gradient term can be bounded on its own and at most `remaining`
/// undecided samples (across the whole run) contribute their perturbed
/// enclosure instead of the clean one. Deeper models fall back to
/// propagating the box through Θ^(T).
pub fn box_logit_bound(bs: &BoundState, lrs: &[f64], xbox: &[Interval]) -> Interval {
    let theta0 = &bs.params[0];
    if theta0.layers.len() != 1 {
        return forward_bounds(bs.final_params(), xbox).0.last().expect("output layer")[0];
    }
    let mut xh: Vec<Interval> = xbox.to_vec();
    xh.push(Interval::point(1.0));
    let dotp = |w: &mut dyn Iterator<Item = &Interval>| -> Interval {
        let mut s = Interval::ZERO;
        for (a, b) in w.zip(&xh) {
            s = s.add(&a.mul(b));
        }
        s
    };
    let absdot = |w: &mut dyn Iterator<Item = &Interval>| -> f64 { w.zip(&xh).map(|(a, b)| a.mag() * b.mag()).sum() };
    let base0 = dotp(&mut theta0.iter());
    let mut lo = base0.lo;
    let mut hi = base0.hi;
    let mut mag = absdot(&mut theta0.iter());
    let mut count = xh.len();
    let n = bs.samples.iter().flatten().map(|s| s.index + 1).max().unwrap_or(0);
    let mut up = vec![0.0; n];
    let mut down = vec![0.0; n];
    for (t, it) in bs.samples.iter().enumerate() {
        let eta = lrs[t] / it.len() as f64;
        for s in it {
            let c = dotp(&mut s.base.grad.iter());
            // logit picks up -eta * contribution
            lo -= eta * c.hi;
            hi -= eta * c.lo;
            mag += eta * absdot(&mut s.base.grad.iter());
            count += 2;
            if let Some(a) = &s.adversarial {
                let av = dotp(&mut a.grad.iter());
                up[s.index] += eta * (c.lo - av.lo);
                down[s.index] += eta * (av.hi - c.hi);
                mag += eta * absdot(&mut a.grad.iter());
                count += 2;
            }
        }
    }
    let r = bs.remaining;
    let extra_up = top_r_positive(&mut up, r);
    let extra_down = top_r_positive(&mut down, r);
    let m = 4.0 * (count as f64 + 16.0) * f64::EPSILON * (mag + extra_up + extra_down) + 1e-300;
    Interval { lo: lo - extra_down - m, hi: hi + extra_up + m }
}

/// Per-iteration learning rates of `config` over the run.
pub(crate) fn learning_rates(config: &TrainConfig, iterations: usize) -> Vec<f64> {
    (1..=iterations).map(|t| config.lr_at(t)).collect()
}

/// Tightened test logits from an existing bound state.
pub fn obbt_from_state(bs: &BoundState, config: &TrainConfig, dataset: &Dataset, groups: usize) -> Result<Vec<Interval>> {
    let partition = group_test_samples(dataset, groups)?;
    let lrs = learning_rates(config, bs.iterations());
    let mut out = bs.test_logits.clone();
    for g in &partition {
        let d = dataset.d;
        let xbox: Vec<Interval> = (0..d)
            .map(|j| {
                g.iter()
                    .map(|&i| Interval::point(dataset.test[i].features[j]))
                    .reduce(|a, b| a.hull(&b))
                    .expect("non-empty group")
            })
            .collect();
        let shared = box_logit_bound(bs, &lrs, &xbox);
        for &i in g {
            out[i] = out[i].tighten(&shared);
        }
    }
    Ok(out)
}

/// Propagates bounds for `partial` and tightens the test logits group-wise.
pub fn obbt_test_hull(
    config: &TrainConfig,
    dataset: &Dataset,
    tm: &ThreatModel,
    partial: &PoisonAssignment,
    groups: usize,
    mode: Mode,
) -> Result<Vec<Interval>> {
    if groups == 0 || groups > dataset.n_test() {
        return Err(Error::validation(format!(
            "cannot split {} test samples into {groups} groups",
            dataset.n_test()
        )));
    }
    let bs = propagate(config, dataset, tm, partial, mode)?;
    obbt_from_state(&bs, config, dataset, groups)
}
