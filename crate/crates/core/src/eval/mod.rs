//! Confusion matrices, metrics, fold aggregation and report files.

mod cv;
mod report;

pub use cv::{
    features_of, fold_partition, run_cv, run_fold, train_network, CvConfig, FoldOutcome, FoldPredictions,
    PipelineKind,
};
pub use report::{
    format_metrics, history_file, parse_metrics, predictions_file, write_report, MetricsFile, MetricsRow,
    CONFUSION_FILE, METRICS_FILE,
};

use crate::error::{Error, Result};
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::models::TrainHistory;

/// Square count matrix; rows are true labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Validation("confusion matrix needs at least one class".into()));
        }
        let mut counts = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::shape("confusion", "row length", n, r.len()));
            }
            counts.extend_from_slice(r);
        }
        Ok(ConfusionMatrix { n, counts })
    }

    /// Tallies `(truth, pred)` pairs over `n_classes` classes.
    pub fn from_labels(n_classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion", "label count", truth.len(), pred.len()));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::Validation(format!(
                    "label pair ({t}, {p}) out of range for {n_classes} classes"
                )));
            }
            cm.counts[t * n_classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.n..(truth + 1) * self.n]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }

    pub fn accumulate(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape("confusion", "classes", self.n, other.n));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Four-class confusion matrix over the fixed label order.
pub fn confusion(truth: &[usize], pred: &[usize]) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_labels(NUM_CLASSES, truth, pred)
}

/// Display name of class `c`: the label name for the four standard classes.
pub fn class_name(c: usize, n_classes: usize) -> String {
    match ClassLabel::from_index(c) {
        Some(l) if n_classes == NUM_CLASSES => l.name().to_string(),
        _ => format!("class{c}"),
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean `2PR / (P + R)`, zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub matrix: ConfusionMatrix,
}

/// One-vs-rest precision, recall and F1 per class plus their unweighted
/// means. 0/0 is taken as 0.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Validation("metrics of an empty confusion matrix".into()));
    }
    let n = cm.n;
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let predicted: u64 = (0..n).map(|t| cm.get(t, c)).sum();
            let actual: u64 = cm.row(c).iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            ClassMetrics {
                precision,
                recall,
                f1: f1_score(precision, recall),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        matrix: cm.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std }
}

/// Which number of a [`ClassMetrics`] to aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Precision,
    Recall,
    F1,
}

impl Metric {
    fn of(self, m: &ClassMetrics) -> f64 {
        match self {
            Metric::Precision => m.precision,
            Metric::Recall => m.recall,
            Metric::F1 => m.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvSummary {
    pub pipeline: PipelineKind,
    pub folds: Vec<MetricsReport>,
    /// Training history per fold, for pipelines that train a network.
    pub histories: Vec<Option<TrainHistory>>,
    pub summed: ConfusionMatrix,
}

impl CvSummary {
    pub fn from_folds(pipeline: PipelineKind, folds: Vec<MetricsReport>, histories: Vec<Option<TrainHistory>>) -> Result<Self> {
        let first = folds.first().ok_or_else(|| Error::Validation("no folds to summarise".into()))?;
        let mut summed = ConfusionMatrix::new(first.matrix.n_classes());
        for f in &folds {
            summed.accumulate(&f.matrix)?;
        }
        Ok(CvSummary {
            pipeline,
            folds,
            histories,
            summed,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.summed.n_classes()
    }

    pub fn accuracy(&self) -> MeanStd {
        mean_std(&self.folds.iter().map(|f| f.accuracy).collect::<Vec<_>>())
    }

    /// Accuracy of the summed matrix, which weights folds by size.
    pub fn summed_accuracy(&self) -> f64 {
        ratio(self.summed.trace(), self.summed.total())
    }

    pub fn class_metric(&self, class: usize, metric: Metric) -> MeanStd {
        mean_std(&self.folds.iter().map(|f| metric.of(&f.per_class[class])).collect::<Vec<_>>())
    }

    pub fn macro_metric(&self, metric: Metric) -> MeanStd {
        let v: Vec<f64> = self
            .folds
            .iter()
            .map(|f| match metric {
                Metric::Precision => f.macro_precision,
                Metric::Recall => f.macro_recall,
                Metric::F1 => f.macro_f1,
            })
            .collect();
        mean_std(&v)
    }
}
