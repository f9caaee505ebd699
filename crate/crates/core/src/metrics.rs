//! Pixel confusion counts, IoU / F1 / precision / recall, and the
//! `0.5 - |0.5 - sigmoid|` uncertainty raster.
//!
//! A pixel is predicted positive iff its logit is `>= 0` (sigmoid `>= 0.5`).
//! When a ratio has an empty denominator the result is 1 if prediction and
//! truth agree on being empty and 0 otherwise.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::ops::sigmoid_scalar;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn iou(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        self.ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn ratio(&self, num: u64, den: u64) -> f64 {
        match den {
            0 if self.tp + self.fp + self.fn_ == 0 => 1.0,
            0 => 0.0,
            _ => num as f64 / den as f64,
        }
    }

    pub fn scores(&self) -> Scores {
        Scores {
            iou: self.iou(),
            f1: self.f1(),
            precision: self.precision(),
            recall: self.recall(),
        }
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Confusion {
        iter.fold(Confusion::default(), Add::add)
    }
}

pub fn confusion<T: Element>(logits: &Tensor<T>, gt: &Tensor<T>) -> Result<Confusion> {
    if logits.shape() != gt.shape() {
        return Err(TensorError::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in extent",
            logits.shape(),
            gt.shape()
        )));
    }
    let half = T::from_f64_lossy(0.5);
    let mut c = Confusion::default();
    for (&x, &t) in logits.data().iter().zip(gt.data()) {
        match (x >= T::zero(), t > half) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Per-pixel `0.5 - |0.5 - sigmoid(x)|` and its mean. Evaluated as
/// `sigmoid(-|x|)`, which is the same value without the cancellation.
pub fn uncertainty_visual<T: Element>(logits: &Tensor<T>) -> (Tensor<T>, f64) {
    let u = logits.map(|x| sigmoid_scalar(-x.abs()));
    let n = u.numel().max(1) as f64;
    let mean = u.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / n;
    (u, mean)
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub scores: Scores,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("label,iou,f1,precision,recall\n");
    for r in rows {
        let s = &r.scores;
        writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2}",
            r.label,
            100.0 * s.iou,
            100.0 * s.f1,
            100.0 * s.precision,
            100.0 * s.recall
        )
        .unwrap();
    }
    out
}

/// Aligned table, percentages with two decimals.
pub fn report_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "", "IoU", "F1", "Pre", "Recall"
    );
    for r in rows {
        let s = &r.scores;
        writeln!(
            out,
            "{:<width$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6.2}",
            r.label,
            100.0 * s.iou,
            100.0 * s.f1,
            100.0 * s.precision,
            100.0 * s.recall
        )
        .unwrap();
    }
    out
}
