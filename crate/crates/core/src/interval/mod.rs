//! Sound interval relaxation of the poisoned training trajectory.

mod bigm;
mod dual;
mod obbt;
mod propagate;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{Layer, Params};

pub use bigm::{big_m_tables, BigMTable, NeuronBound, PassBigM, SampleBigM};
pub use dual::{dual_bound, dual_with_logits, test_logit_bounds};
pub use obbt::{box_logit_bound, group_test_samples, obbt_from_state, obbt_test_hull};
pub use propagate::{propagate, BoundState, Mode, PassBounds, SampleBounds};

/// Relative outward inflation applied by every non-exact operation.
pub const REL_EPS: f64 = 1e-12;
const ABS_EPS: f64 = 1e-300;

/// Closed real interval `[lo, hi]`.
///
/// Operations on two degenerate intervals evaluate the same floating-point
/// expression as the concrete replay and stay degenerate; everything else is
/// inflated outward by [`REL_EPS`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

impl Interval {
    pub const ZERO: Interval = Interval { lo: 0.0, hi: 0.0 };
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::validation(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    /// `[min(a, b), max(a, b)]`.
    pub fn spanning(a: f64, b: f64) -> Self {
        Interval { lo: a.min(b), hi: a.max(b) }
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    pub fn is_zero(&self) -> bool {
        self.lo == 0.0 && self.hi == 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_interval(&self, o: &Interval) -> bool {
        self.lo <= o.lo && o.hi <= self.hi
    }

    pub fn hull(&self, o: &Interval) -> Interval {
        Interval { lo: self.lo.min(o.lo), hi: self.hi.max(o.hi) }
    }

    /// Intersection; `None` when disjoint.
    pub fn intersect(&self, o: &Interval) -> Option<Interval> {
        let lo = self.lo.max(o.lo);
        let hi = self.hi.min(o.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    /// Intersection that falls back to `self` if the two are disjoint, which
    /// can only happen through rounding noise between two sound enclosures.
    pub fn tighten(&self, o: &Interval) -> Interval {
        self.intersect(o).unwrap_or(*self)
    }

    fn inflate(lo: f64, hi: f64, mag: f64) -> Interval {
        let m = REL_EPS * mag + ABS_EPS;
        Interval { lo: lo - m, hi: hi + m }
    }

    pub fn add(&self, o: &Interval) -> Interval {
        if self.is_point() && o.is_point() {
            return Interval::point(self.lo + o.lo);
        }
        if o.is_zero() {
            return *self;
        }
        if self.is_zero() {
            return *o;
        }
        Self::inflate(self.lo + o.lo, self.hi + o.hi, self.mag() + o.mag())
    }

    pub fn neg(&self) -> Interval {
        Interval { lo: -self.hi, hi: -self.lo }
    }

    pub fn sub(&self, o: &Interval) -> Interval {
        if self.is_point() && o.is_point() {
            return Interval::point(self.lo - o.lo);
        }
        self.add(&o.neg())
    }

    pub fn mul(&self, o: &Interval) -> Interval {
        if self.is_point() && o.is_point() {
            return Interval::point(self.lo * o.lo);
        }
        if self.is_zero() || o.is_zero() {
            return Interval::ZERO;
        }
        let p = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::inflate(lo, hi, lo.abs().max(hi.abs()))
    }

    pub fn scale(&self, c: f64) -> Interval {
        self.mul(&Interval::point(c))
    }

    /// `x * x` over a single variable (tighter than `mul(self, self)`).
    pub fn sqr(&self) -> Interval {
        if self.is_point() {
            return Interval::point(self.lo * self.lo);
        }
        let (lo, hi) = if self.lo >= 0.0 {
            (self.lo * self.lo, self.hi * self.hi)
        } else if self.hi <= 0.0 {
            (self.hi * self.hi, self.lo * self.lo)
        } else {
            (0.0, self.mag() * self.mag())
        };
        let r = Self::inflate(lo, hi, hi);
        Interval { lo: r.lo.max(0.0), hi: r.hi }
    }

    pub fn relu(&self) -> Interval {
        Interval { lo: self.lo.max(0.0), hi: self.hi.max(0.0) }
    }

    pub fn phase(&self) -> Phase {
        if self.hi <= 0.0 {
            Phase::Off
        } else if self.lo > 0.0 {
            Phase::On
        } else {
            Phase::Unstable
        }
    }

    /// Sum of a sequence, accumulated left to right from zero.
    pub fn sum<'a>(items: impl IntoIterator<Item = &'a Interval>) -> Interval {
        items.into_iter().fold(Interval::ZERO, |acc, x| acc.add(x))
    }
}

/// ReLU phase of a pre-activation interval. A neuron is active iff `u > 0`,
/// so `[0, hi]` with `hi > 0` is unstable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    On,
    Off,
    Unstable,
}

/// Elementwise interval bounds on a row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalTensor {
    pub shape: Vec<usize>,
    pub data: Vec<Interval>,
}

impl IntervalTensor {
    pub fn new(shape: Vec<usize>, data: Vec<Interval>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                context: "interval tensor storage",
                expected: n,
                actual: data.len(),
            });
        }
        Ok(IntervalTensor { shape, data })
    }

    pub fn from_bounds(shape: Vec<usize>, lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                context: "interval tensor bounds",
                expected: lo.len(),
                actual: hi.len(),
            });
        }
        let data = lo.iter().zip(hi).map(|(&l, &h)| Interval::new(l, h)).collect::<Result<_>>()?;
        Self::new(shape, data)
    }

    pub fn point(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().copied().map(Interval::point).collect())
    }

    pub fn vector(data: Vec<Interval>) -> Self {
        IntervalTensor { shape: vec![data.len()], data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn lo(&self) -> Vec<f64> {
        self.data.iter().map(|i| i.lo).collect()
    }

    pub fn hi(&self) -> Vec<f64> {
        self.data.iter().map(|i| i.hi).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.data.iter().map(Interval::width).collect()
    }

    pub fn is_degenerate(&self) -> bool {
        self.data.iter().all(Interval::is_point)
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.data.len() && self.data.iter().zip(values).all(|(i, v)| i.contains(*v))
    }
}

/// Interval hull of `{W x + b}`; `W` has shape `[m, n]`, `x` `[n]`, `b` `[m]`.
pub fn iv_affine(w: &IntervalTensor, x: &IntervalTensor, b: &IntervalTensor) -> Result<IntervalTensor> {
    if w.shape.len() != 2 {
        return Err(Error::validation("iv_affine expects a matrix"));
    }
    let (m, n) = (w.shape[0], w.shape[1]);
    if x.len() != n {
        return Err(Error::DimensionMismatch { context: "iv_affine input", expected: n, actual: x.len() });
    }
    if b.len() != m {
        return Err(Error::DimensionMismatch { context: "iv_affine bias", expected: m, actual: b.len() });
    }
    Ok(IntervalTensor::vector(affine_rows(&w.data, n, &x.data, &b.data)))
}

pub(crate) fn affine_rows(w: &[Interval], cols: usize, x: &[Interval], b: &[Interval]) -> Vec<Interval> {
    b.iter()
        .enumerate()
        .map(|(r, bias)| {
            let mut s = Interval::ZERO;
            for (wv, xv) in w[r * cols..(r + 1) * cols].iter().zip(x) {
                s = s.add(&wv.mul(xv));
            }
            s.add(bias)
        })
        .collect()
}

pub fn iv_relu(u: &IntervalTensor) -> (IntervalTensor, Vec<Phase>) {
    let z = IntervalTensor { shape: u.shape.clone(), data: u.data.iter().map(Interval::relu).collect() };
    (z, u.data.iter().map(Interval::phase).collect())
}

/// Interval parameters Θ, laid out like [`Params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<Interval>,
    pub bias: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalParams {
    pub layers: Vec<IntervalLayer>,
}

impl IntervalParams {
    pub fn point(p: &Params) -> Self {
        IntervalParams {
            layers: p
                .layers
                .iter()
                .map(|l| IntervalLayer {
                    rows: l.rows,
                    cols: l.cols,
                    weights: l.weights.iter().copied().map(Interval::point).collect(),
                    bias: l.bias.iter().copied().map(Interval::point).collect(),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        IntervalParams {
            layers: self
                .layers
                .iter()
                .map(|l| IntervalLayer {
                    rows: l.rows,
                    cols: l.cols,
                    weights: vec![Interval::ZERO; l.weights.len()],
                    bias: vec![Interval::ZERO; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Layer-major flattening matching [`Params::flat`].
    pub fn flat(&self) -> Vec<Interval> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut Interval> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Interval> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn with_flat(&self, flat: &[Interval]) -> Self {
        let mut out = self.clone();
        for (slot, v) in out.flat_mut().zip(flat) {
            *slot = *v;
        }
        out
    }

    pub fn contains(&self, p: &Params) -> bool {
        self.layers.len() == p.layers.len()
            && self.iter().zip(p.flat()).all(|(i, v)| i.contains(v))
    }

    pub fn is_degenerate(&self) -> bool {
        self.iter().all(Interval::is_point)
    }

    /// Midpoint parameters, used for reporting.
    pub fn midpoint(&self) -> Params {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    rows: l.rows,
                    cols: l.cols,
                    weights: l.weights.iter().map(Interval::mid).collect(),
                    bias: l.bias.iter().map(Interval::mid).collect(),
                })
                .collect(),
        }
    }

    pub fn max_width(&self) -> f64 {
        self.iter().map(Interval::width).fold(0.0, f64::max)
    }

    pub fn hull(&self, o: &IntervalParams) -> IntervalParams {
        let flat: Vec<Interval> = self.iter().zip(o.iter()).map(|(a, b)| a.hull(b)).collect();
        self.with_flat(&flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::new(lo, hi).unwrap()
    }

    #[test]
    fn affine_examples() {
        let t = |v: Vec<Interval>, shape: Vec<usize>| IntervalTensor::new(shape, v).unwrap();
        let r = iv_affine(
            &t(vec![Interval::point(2.0)], vec![1, 1]),
            &t(vec![Interval::point(3.0)], vec![1]),
            &t(vec![Interval::point(1.0)], vec![1]),
        )
        .unwrap();
        assert_eq!(r.data[0], Interval::point(7.0));

        let r = iv_affine(
            &t(vec![iv(-1.0, 1.0)], vec![1, 1]),
            &t(vec![iv(-1.0, 1.0)], vec![1]),
            &t(vec![Interval::ZERO], vec![1]),
        )
        .unwrap();
        assert!(r.data[0].contains_interval(&iv(-1.0, 1.0)) && r.data[0].width() < 2.0 + 1e-9);

        let w = t(vec![iv(1.0, 2.0), iv(-1.0, 0.0)], vec![1, 2]);
        let x = t(vec![iv(0.0, 1.0), iv(2.0, 3.0)], vec![2]);
        let r = iv_affine(&w, &x, &t(vec![Interval::ZERO], vec![1])).unwrap().data[0];
        assert!((r.lo + 3.0).abs() < 1e-9 && (r.hi - 2.0).abs() < 1e-9);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for a in 0..10 {
            for b in 0..10 {
                for c in 0..10 {
                    for d in 0..10 {
                        let v = (1.0 + a as f64 / 9.0) * (c as f64 / 9.0) + (-1.0 + b as f64 / 9.0) * (2.0 + d as f64 / 9.0);
                        assert!(r.contains(v));
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
        }
        assert!((lo - r.lo).abs() < 1e-9 && (hi - r.hi).abs() < 1e-9);
        assert!(iv_affine(&w, &t(vec![Interval::ZERO], vec![1]), &t(vec![Interval::ZERO], vec![1])).is_err());
    }

    #[test]
    fn relu_phases() {
        let u = IntervalTensor::vector(vec![iv(2.0, 3.0), iv(-3.0, -1.0), iv(-1.0, 2.0), iv(0.0, 1.0), Interval::ZERO]);
        let (z, ph) = iv_relu(&u);
        assert_eq!(z.data[0], iv(2.0, 3.0));
        assert_eq!(z.data[1], Interval::ZERO);
        assert_eq!(z.data[2], iv(0.0, 2.0));
        assert_eq!(ph, vec![Phase::On, Phase::Off, Phase::Unstable, Phase::Unstable, Phase::Off]);
    }

    #[test]
    fn points_stay_exact() {
        let a = Interval::point(0.1);
        let b = Interval::point(0.2);
        assert_eq!(a.add(&b), Interval::point(0.1 + 0.2));
        assert_eq!(a.mul(&b), Interval::point(0.1 * 0.2));
        assert_eq!(iv(-1.0, 5.0).mul(&Interval::ZERO), Interval::ZERO);
        assert_eq!(iv(-1.0, 5.0).add(&Interval::ZERO), iv(-1.0, 5.0));
        assert!(Interval::new(1.0, 0.0).is_err());
    }

    fn arb_iv() -> impl Strategy<Value = (Interval, f64)> {
        (-1e3f64..1e3, 0f64..1e3, 0f64..=1.0).prop_map(|(lo, w, t)| {
            let i = Interval { lo, hi: lo + w };
            (i, lo + t * w)
        })
    }

    proptest! {
        #[test]
        fn ops_contain_samples((a, x) in arb_iv(), (b, y) in arb_iv()) {
            prop_assert!(a.add(&b).contains(x + y));
            prop_assert!(a.sub(&b).contains(x - y));
            prop_assert!(a.mul(&b).contains(x * y));
            prop_assert!(a.sqr().contains(x * x));
            prop_assert!(a.relu().contains(x.max(0.0)));
            prop_assert!(a.scale(0.37).contains(x * 0.37));
        }

        #[test]
        fn hull_and_intersection((a, x) in arb_iv(), (b, _y) in arb_iv()) {
            let h = a.hull(&b);
            prop_assert!(h.contains_interval(&a) && h.contains_interval(&b));
            if let Some(i) = a.intersect(&b) {
                prop_assert!(a.contains_interval(&i) && b.contains_interval(&i));
            }
            prop_assert!(a.tighten(&h).width() <= a.width());
            prop_assert!(a.contains(x));
        }
    }
}
