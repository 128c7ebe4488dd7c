//! Cell-wise confusion counts between piano rolls and the rates derived from
//! them. Counts pool across rolls by addition.

use std::fmt;
use std::ops::{Add, AddAssign};

use crate::midi_io::PianoRoll;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("roll shapes differ: {pred:?} vs {truth:?}")]
pub struct ShapeMismatch {
    pub pred: (usize, usize),
    pub truth: (usize, usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn rates(&self) -> Rates {
        rates(self)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Rates are `None` when their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub ppv: Option<f64>,
    pub tpr: Option<f64>,
    pub npv: Option<f64>,
    pub tnr: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion(pred: &PianoRoll, truth: &PianoRoll) -> Result<ConfusionCounts, ShapeMismatch> {
    let (ps, ts) = ((pred.steps(), pred.pitches()), (truth.steps(), truth.pitches()));
    if ps != ts {
        return Err(ShapeMismatch { pred: ps, truth: ts });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.grid().iter().zip(truth.grid()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn rates(c: &ConfusionCounts) -> Rates {
    Rates {
        ppv: ratio(c.tp, c.tp + c.fp),
        tpr: ratio(c.tp, c.tp + c.fn_),
        npv: ratio(c.tn, c.tn + c.fn_),
        tnr: ratio(c.tn, c.tn + c.fp),
    }
}

fn show(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

impl fmt::Display for Rates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ppv={} tpr={} npv={} tnr={}", show(self.ppv), show(self.tpr), show(self.npv), show(self.tnr))
    }
}
