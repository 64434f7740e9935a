//! Overall and per-keyword accuracy, confusion matrices and reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::audio_io::DatasetIndex;
use crate::dsp::{DspConfig, Featurizer};
use crate::error::{KwsError, Result};
use crate::models::{predict, Model};
use crate::par;

/// Rows are true labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.n_classes..(truth + 1) * self.n_classes]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Elementwise sum of two matrices of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n_classes, other.n_classes, "confusion matrix sizes differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(KwsError::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::new(n_classes);
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= n_classes || t >= n_classes {
            return Err(KwsError::Data(format!(
                "pair (true {t}, predicted {p}) outside [0, {n_classes})"
            )));
        }
        m.counts[t * n_classes + p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub overall_accuracy: f64,
    /// Row recall per label; `None` for labels with no samples.
    pub per_keyword: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_confusion(labels: Vec<String>, confusion: ConfusionMatrix) -> Result<Self> {
        if labels.len() != confusion.n_classes() {
            return Err(KwsError::Data(format!(
                "{} labels for a {}-class confusion matrix",
                labels.len(),
                confusion.n_classes()
            )));
        }
        let n = confusion.total();
        let overall_accuracy = if n == 0 {
            0.0
        } else {
            confusion.trace() as f64 / n as f64
        };
        let per_keyword = (0..labels.len())
            .map(|i| match confusion.row_sum(i) {
                0 => None,
                s => Some(confusion.get(i, i) as f64 / s as f64),
            })
            .collect();
        Ok(Self {
            labels,
            overall_accuracy,
            per_keyword,
            n_samples: n as usize,
            confusion,
        })
    }

    pub fn accuracy_of(&self, label: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == label)?;
        self.per_keyword[i]
    }

    /// What the CSV form carries: accuracies rounded to 4 decimals.
    pub fn summary(&self) -> ReportSummary {
        // same rounding as the rendered text
        let round = |v: f64| format!("{v:.4}").parse::<f64>().unwrap_or(v);
        ReportSummary {
            rows: self
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    (
                        l.clone(),
                        self.per_keyword[i].map(round),
                        self.confusion.row_sum(i) as usize,
                    )
                })
                .collect(),
            overall: round(self.overall_accuracy),
            n_samples: self.n_samples,
        }
    }
}

/// Per-label (label, accuracy, n) rows and the overall line of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub rows: Vec<(String, Option<f64>, usize)>,
    pub overall: f64,
    pub n_samples: usize,
}

pub fn report_from_predictions(labels: &[String], predictions: &[usize], truth: &[usize]) -> Result<EvalReport> {
    let confusion = confusion_matrix(predictions, truth, labels.len())?;
    EvalReport::from_confusion(labels.to_vec(), confusion)
}

/// Featurizes and classifies every entry of `dataset`. `labels` is the
/// model's class set in index order.
pub fn evaluate(model: &Model, labels: &[String], dataset: &DatasetIndex, dsp: &DspConfig) -> Result<EvalReport> {
    if labels.len() != model.config.n_classes {
        return Err(KwsError::Data(format!(
            "{} labels for a {}-class model",
            labels.len(),
            model.config.n_classes
        )));
    }
    let truth = dataset
        .entries
        .iter()
        .map(|e| {
            labels
                .iter()
                .position(|l| *l == e.label)
                .ok_or_else(|| KwsError::Data(format!("label '{}' is not one of the model's classes", e.label)))
        })
        .collect::<Result<Vec<_>>>()?;
    let featurizer = Featurizer::new(dsp.clone())?;
    let predictions = par::map(&dataset.entries, |e| {
        let features = featurizer.compute(&e.load()?)?;
        predict(model, &features).map(|(label, _)| label)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    report_from_predictions(labels, &predictions, &truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(ReportFormat::Csv),
            "text" | "txt" => Some(ReportFormat::Text),
            _ => None,
        }
    }

    /// `.csv` files get CSV, anything else text.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Text,
        }
    }
}

pub const OVERALL_ROW: &str = "__overall__";

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    let mut out = String::new();
    let fmt_acc = |a: Option<f64>| a.map_or(String::new(), |v| format!("{v:.4}"));
    match format {
        ReportFormat::Csv => {
            out.push_str("label,accuracy,n\n");
            for (i, l) in report.labels.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{l},{},{}",
                    fmt_acc(report.per_keyword[i]),
                    report.confusion.row_sum(i)
                );
            }
            let _ = writeln!(out, "{OVERALL_ROW},{:.4},{}", report.overall_accuracy, report.n_samples);
        }
        ReportFormat::Text => {
            let width = report
                .labels
                .iter()
                .map(String::len)
                .chain([OVERALL_ROW.len(), 5])
                .max()
                .unwrap_or(5);
            let _ = writeln!(out, "{:<width$}  {:>8}  {:>7}", "label", "accuracy", "n");
            for (i, l) in report.labels.iter().enumerate() {
                let acc = report.per_keyword[i].map_or("-".to_string(), |v| format!("{v:.4}"));
                let _ = writeln!(out, "{l:<width$}  {acc:>8}  {:>7}", report.confusion.row_sum(i));
            }
            let _ = writeln!(
                out,
                "{OVERALL_ROW:<width$}  {:>8.4}  {:>7}",
                report.overall_accuracy, report.n_samples
            );
            out.push_str("\nconfusion (rows: true, columns: predicted)\n");
            let cell = report
                .confusion
                .counts
                .iter()
                .map(|c| c.to_string().len())
                .chain([1])
                .max()
                .unwrap_or(1)
                .max(3);
            let _ = write!(out, "{:<width$}", "");
            for i in 0..report.labels.len() {
                let _ = write!(out, " {:>cell$}", i);
            }
            out.push('\n');
            for (i, l) in report.labels.iter().enumerate() {
                let _ = write!(out, "{:<width$}", format!("{i} {l}"));
                for c in report.confusion.row(i) {
                    let _ = write!(out, " {c:>cell$}");
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_report(report, format)).map_err(|e| KwsError::io(path, e))
}

/// Parses the CSV form back into its summary.
pub fn parse_csv_report(text: &str) -> Result<ReportSummary> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("label,accuracy,n") {
        return Err(KwsError::Data("report must start with 'label,accuracy,n'".into()));
    }
    let mut rows = Vec::new();
    let mut overall = None;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let bad = || KwsError::Data(format!("malformed report row '{line}'"));
        let mut f = line.rsplitn(3, ',');
        let (n, acc, label) = match (f.next(), f.next(), f.next()) {
            (Some(n), Some(a), Some(l)) => (n, a, l),
            _ => return Err(bad()),
        };
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        let acc = match acc.trim() {
            "" => None,
            a => Some(a.parse::<f64>().map_err(|_| bad())?),
        };
        if label == OVERALL_ROW {
            overall = Some((acc.ok_or_else(bad)?, n));
        } else if overall.is_some() {
            return Err(bad());
        } else {
            rows.push((label.to_string(), acc, n));
        }
    }
    let (overall, n_samples) = overall.ok_or_else(|| KwsError::Data(format!("report has no {OVERALL_ROW} row")))?;
    Ok(ReportSummary {
        rows,
        overall,
        n_samples,
    })
}
