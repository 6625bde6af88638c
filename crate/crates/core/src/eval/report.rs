//! Text report files: `metrics.txt`, `confusion.csv`, per-fold histories
//! and predictions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{class_name, ConfusionMatrix, CvSummary, FoldPredictions, MeanStd, Metric};
use crate::archive::write_atomic;
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.txt";
pub const CONFUSION_FILE: &str = "confusion.csv";
const METRICS_MAGIC: &str = "# rdx-metrics 1";
const MACRO_ROW: &str = "macro";

pub fn history_file(fold: usize) -> String {
    format!("history_fold{fold}.csv")
}

pub fn predictions_file(fold: usize) -> String {
    format!("predictions_fold{fold}.csv")
}

impl ConfusionMatrix {
    /// `true\pred,<class>...` header, then one row per true class.
    pub fn to_csv(&self) -> String {
        let n = self.n_classes();
        let mut s = String::from("true\\pred");
        for c in 0..n {
            write!(s, ",{}", class_name(c, n)).expect("string write");
        }
        s.push('\n');
        for t in 0..n {
            s.push_str(&class_name(t, n));
            for v in self.row(t) {
                write!(s, ",{v}").expect("string write");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty confusion file".into()))?;
        let names: Vec<&str> = header.trim().split(',').skip(1).collect();
        let n = names.len();
        let mut rows = Vec::with_capacity(n);
        for (i, line) in lines {
            let cols: Vec<&str> = line.trim().split(',').collect();
            if cols.len() != n + 1 {
                return Err(err(i + 1, format!("expected {} columns, found {}", n + 1, cols.len())));
            }
            if cols[0] != names.get(rows.len()).copied().unwrap_or("") {
                return Err(err(i + 1, format!("row {:?} out of order", cols[0])));
            }
            let row = cols[1..]
                .iter()
                .map(|v| v.trim().parse::<u64>().map_err(|_| err(i + 1, format!("bad count {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.len() != n {
            return Err(err(0, format!("expected {n} rows, found {}", rows.len())));
        }
        ConfusionMatrix::from_rows(&rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Class name or `macro`.
    pub name: String,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

/// Parsed `metrics.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub pipeline: String,
    pub folds: usize,
    pub samples: u64,
    /// Per-class rows followed by the macro row.
    pub rows: Vec<MetricsRow>,
    pub accuracy: MeanStd,
    pub accuracy_summed: f64,
}

impl MetricsFile {
    pub fn row(&self, name: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn ms(v: MeanStd) -> String {
    format!("{:.6}±{:.6}", v.mean, v.std)
}

/// Fold means and sample standard deviations, six decimals.
pub fn format_metrics(summary: &CvSummary) -> String {
    let n = summary.n_classes();
    let mut s = String::new();
    let mut line = |l: String| {
        s.push_str(&l);
        s.push('\n');
    };
    line(METRICS_MAGIC.into());
    line(format!("pipeline {}", summary.pipeline));
    line(format!("folds {}", summary.folds.len()));
    line(format!("samples {}", summary.summed.total()));
    line("columns precision recall f1".into());
    for c in 0..n {
        line(format!(
            "{} {} {} {}",
            class_name(c, n),
            ms(summary.class_metric(c, Metric::Precision)),
            ms(summary.class_metric(c, Metric::Recall)),
            ms(summary.class_metric(c, Metric::F1)),
        ));
    }
    line(format!(
        "{MACRO_ROW} {} {} {}",
        ms(summary.macro_metric(Metric::Precision)),
        ms(summary.macro_metric(Metric::Recall)),
        ms(summary.macro_metric(Metric::F1)),
    ));
    line(format!("accuracy_fold_mean {}", ms(summary.accuracy())));
    line(format!("accuracy_summed {:.6}", summary.summed_accuracy()));
    s
}

pub fn parse_metrics(text: &str, origin: &Path) -> Result<MetricsFile> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let parse_ms = |line: usize, tok: &str| -> Result<MeanStd> {
        let (m, s) = tok.split_once('±').ok_or_else(|| err(line, format!("expected mean±std, got {tok:?}")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| err(line, format!("bad number {v:?}")));
        Ok(MeanStd { mean: num(m)?, std: num(s)? })
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == METRICS_MAGIC => {}
        _ => return Err(err(1, format!("missing {METRICS_MAGIC:?} header"))),
    }
    let (mut pipeline, mut folds, mut samples, mut accuracy, mut summed) = (None, None, None, None, None);
    let mut rows = Vec::new();
    for (i, raw) in lines {
        let ln = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            [] | ["columns", ..] => {}
            ["pipeline", p] => pipeline = Some(p.to_string()),
            ["folds", v] => folds = Some(v.parse().map_err(|_| err(ln, format!("bad fold count {v:?}")))?),
            ["samples", v] => samples = Some(v.parse().map_err(|_| err(ln, format!("bad sample count {v:?}")))?),
            ["accuracy_fold_mean", v] => accuracy = Some(parse_ms(ln, v)?),
            ["accuracy_summed", v] => summed = Some(v.parse().map_err(|_| err(ln, format!("bad accuracy {v:?}")))?),
            [name, p, r, f] => rows.push(MetricsRow {
                name: name.to_string(),
                precision: parse_ms(ln, p)?,
                recall: parse_ms(ln, r)?,
                f1: parse_ms(ln, f)?,
            }),
            _ => return Err(err(ln, format!("unrecognised line {raw:?}"))),
        }
    }
    let missing = |what: &str| err(0, format!("missing {what} line"));
    if rows.last().map(|r| r.name.as_str()) != Some(MACRO_ROW) {
        return Err(missing(MACRO_ROW));
    }
    Ok(MetricsFile {
        pipeline: pipeline.ok_or_else(|| missing("pipeline"))?,
        folds: folds.ok_or_else(|| missing("folds"))?,
        samples: samples.ok_or_else(|| missing("samples"))?,
        rows,
        accuracy: accuracy.ok_or_else(|| missing("accuracy_fold_mean"))?,
        accuracy_summed: summed.ok_or_else(|| missing("accuracy_summed"))?,
    })
}

/// Writes `metrics.txt`, `confusion.csv` (summed over folds), one
/// `history_fold<k>.csv` per trained fold and one `predictions_fold<k>.csv`
/// per entry of `predictions`. Fold numbers are 0-based.
pub fn write_report(summary: &CvSummary, predictions: &[FoldPredictions], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = out_dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
        Ok(())
    };
    put(METRICS_FILE.into(), format_metrics(summary))?;
    put(CONFUSION_FILE.into(), summary.summed.to_csv())?;
    for (k, h) in summary.histories.iter().enumerate() {
        if let Some(h) = h {
            put(history_file(k), h.to_csv())?;
        }
    }
    for p in predictions {
        put(predictions_file(p.fold), p.to_csv())?;
    }
    Ok(written)
}
