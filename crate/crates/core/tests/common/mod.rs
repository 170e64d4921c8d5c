//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use slicewise::data::TumorClass;

/// Straight transcription of the biased estimator as three double loops.
pub fn mmd_oracle(xs: &Array2<f64>, xt: &Array2<f64>, sigma: f64) -> f64 {
    let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        let d2: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p - q).powi(2)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let (ns, nt) = (xs.nrows() as f64, xt.nrows() as f64);
    let mut ss = 0.0;
    for a in xs.rows() {
        for b in xs.rows() {
            ss += k(a, b);
        }
    }
    let mut tt = 0.0;
    for a in xt.rows() {
        for b in xt.rows() {
            tt += k(a, b);
        }
    }
    let mut st = 0.0;
    for a in xs.rows() {
        for b in xt.rows() {
            st += k(a, b);
        }
    }
    ss / (ns * ns) + tt / (nt * nt) - 2.0 * st / (ns * nt)
}

/// Per-class (precision, recall, f1, support), accuracy and macro F1 by
/// counting over the label vectors directly.
pub struct MetricsOracle {
    pub per_class: Vec<(f64, f64, f64, u64)>,
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn metrics_oracle(truth: &[TumorClass], pred: &[TumorClass]) -> MetricsOracle {
    let mut per_class = Vec::new();
    for c in TumorClass::ALL {
        let tp = truth
            .iter()
            .zip(pred)
            .filter(|(t, p)| **t == c && **p == c)
            .count() as u64;
        let fp = truth
            .iter()
            .zip(pred)
            .filter(|(t, p)| **t != c && **p == c)
            .count() as u64;
        let fn_ = truth
            .iter()
            .zip(pred)
            .filter(|(t, p)| **t == c && **p != c)
            .count() as u64;
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push((precision, recall, f1, tp + fn_));
    }
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    MetricsOracle {
        accuracy: correct as f64 / truth.len() as f64,
        macro_f1: per_class.iter().map(|c| c.2).sum::<f64>() / 3.0,
        per_class,
    }
}
