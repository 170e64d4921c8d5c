//! Classification metrics over the three tumor classes and the 2-D embedding
//! export used for domain-gap plots.

mod embedding;

pub use embedding::{embed_2d, embedding_to_csv, export_embedding_2d, EMBEDDING_HEADER};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Domain, Orientation, TumorClass, NUM_CLASSES};
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes, in glioma, meningioma,
/// pituitary order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[TumorClass], predicted: &[TumorClass]) -> Self {
        let mut cm = Self::default();
        for (t, p) in truth.iter().zip(predicted) {
            cm.counts[t.index()][p.index()] += 1;
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self
            .counts
            .iter_mut()
            .flatten()
            .zip(other.counts.iter().flatten())
        {
            *a += b;
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true_class");
        for c in TumorClass::ALL {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for c in TumorClass::ALL {
            out.push_str(c.as_str());
            for v in self.counts[c.index()] {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: TumorClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Where a report came from; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportContext {
    pub orientation: Option<Orientation>,
    pub domain: Option<Domain>,
    pub phase: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
    pub n: u64,
    pub context: ReportContext,
    /// Unweighted mean of the per-orientation macro F1 values; only set on
    /// aggregated reports.
    pub mean_orientation_macro_f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Recomputes every score from a confusion matrix. F1 is 0 when
    /// precision + recall is 0.
    pub fn from_confusion(confusion: ConfusionMatrix, context: ReportContext) -> Self {
        let per_class: Vec<ClassScores> = TumorClass::ALL
            .iter()
            .map(|&class| {
                let i = class.index();
                let tp = confusion.counts[i][i];
                let precision = ratio(tp, confusion.col_sum(i));
                let recall = ratio(tp, confusion.row_sum(i));
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassScores {
                    class,
                    precision,
                    recall,
                    f1,
                    support: confusion.row_sum(i),
                }
            })
            .collect();
        let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / NUM_CLASSES as f64;
        Self {
            accuracy: ratio(confusion.trace(), confusion.total()),
            macro_f1,
            per_class,
            confusion,
            n: confusion.total(),
            context,
            mean_orientation_macro_f1: None,
        }
    }

    pub fn with_context(mut self, context: ReportContext) -> Self {
        self.context = context;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("metrics report: {e}")))
    }

    pub fn save(&self, json_path: &Path, confusion_csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json() + "\n").map_err(|e| Error::io(json_path, e))?;
        std::fs::write(confusion_csv_path, self.confusion.to_csv())
            .map_err(|e| Error::io(confusion_csv_path, e))
    }
}

pub fn compute_metrics(truth: &[TumorClass], predicted: &[TumorClass]) -> Result<MetricsReport> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("no labels to evaluate".into()));
    }
    Ok(MetricsReport::from_confusion(
        ConfusionMatrix::from_labels(truth, predicted),
        ReportContext::default(),
    ))
}

/// Pools the three per-orientation confusion matrices and also records the
/// simple mean of their macro F1 values.
pub fn aggregate_orientation_reports(
    reports: &BTreeMap<Orientation, MetricsReport>,
) -> Result<MetricsReport> {
    let mut pooled = ConfusionMatrix::default();
    let mut macro_sum = 0.0;
    for o in Orientation::ALL {
        let r = reports
            .get(&o)
            .ok_or_else(|| Error::InvalidInput(format!("no report for orientation {o}")))?;
        pooled.add(&r.confusion);
        macro_sum += r.macro_f1;
    }
    let first = &reports[&Orientation::Axial].context;
    let context = ReportContext {
        orientation: None,
        domain: first.domain,
        phase: first.phase.clone(),
    };
    let mut report = MetricsReport::from_confusion(pooled, context);
    report.mean_orientation_macro_f1 = Some(macro_sum / Orientation::ALL.len() as f64);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use TumorClass::{Glioma as G, Meningioma as M, Pituitary as P};

    #[test]
    fn perfect_prediction() {
        let truth = [G, M, P, P, G];
        let r = compute_metrics(&truth, &truth).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.n, 5);
    }

    #[test]
    fn hand_evaluated_case() {
        let r = compute_metrics(&[G, G, M, P], &[G, M, M, P]).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_abs_diff_eq!(r.per_class[0].f1, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_class[1].f1, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_class[2].f1, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.macro_f1, 7.0 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn constant_predictor_on_balanced_truth() {
        let truth: Vec<_> = (0..30)
            .map(|i| TumorClass::from_index(i % 3).unwrap())
            .collect();
        let r = compute_metrics(&truth, &[P; 30]).unwrap();
        assert_abs_diff_eq!(r.accuracy, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.macro_f1, 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            compute_metrics(&[], &[]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            compute_metrics(&[G], &[G, M]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn matrix_margins() {
        let truth = [G, G, M, P, P, P];
        let pred = [M, G, M, G, P, P];
        let cm = compute_metrics(&truth, &pred).unwrap().confusion;
        assert_eq!([cm.row_sum(0), cm.row_sum(1), cm.row_sum(2)], [2, 1, 3]);
        assert_eq!([cm.col_sum(0), cm.col_sum(1), cm.col_sum(2)], [2, 2, 2]);
        assert_eq!(
            cm.to_csv(),
            "true_class,glioma,meningioma,pituitary\nglioma,1,1,0\nmeningioma,0,1,0\npituitary,1,0,2\n"
        );
    }

    fn with_orientation(r: &MetricsReport, o: Orientation) -> MetricsReport {
        r.clone().with_context(ReportContext {
            orientation: Some(o),
            ..Default::default()
        })
    }

    #[test]
    fn aggregation() {
        let r = compute_metrics(&[G, G, M, P], &[G, M, M, P]).unwrap();
        let reports: BTreeMap<_, _> = Orientation::ALL
            .iter()
            .map(|&o| (o, with_orientation(&r, o)))
            .collect();
        let pooled = aggregate_orientation_reports(&reports).unwrap();
        assert_eq!(pooled.accuracy, r.accuracy);
        assert_abs_diff_eq!(pooled.macro_f1, r.macro_f1, epsilon = 1e-15);
        assert_abs_diff_eq!(
            pooled.mean_orientation_macro_f1.unwrap(),
            r.macro_f1,
            epsilon = 1e-15
        );
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(pooled.confusion.counts[i][j], 3 * r.confusion.counts[i][j]);
            }
        }

        let mut partial = reports.clone();
        partial.remove(&Orientation::Coronal);
        assert!(aggregate_orientation_reports(&partial).is_err());
    }

    #[test]
    fn json_has_fixed_keys() {
        let r = compute_metrics(&[G, M], &[G, P]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            [
                "accuracy",
                "confusion",
                "context",
                "macro_f1",
                "mean_orientation_macro_f1",
                "n",
                "per_class"
            ]
        );
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
    }
}
