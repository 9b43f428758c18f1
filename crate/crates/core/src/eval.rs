//! Classification metrics, the NA (no-improvement) rule, and comparison
//! reports.
//!
//! The vulnerable class is the positive class throughout, so recall measures
//! missed vulnerabilities. Zero denominators yield zero metrics rather than
//! NaN. Reports render percentages to one decimal place and sort rows by
//! accuracy, best first, with NA rows at the bottom.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }

    /// Tallies (predicted, actual) pairs; `true` means vulnerable.
    pub fn from_predictions(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut cm = Self::default();
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (true, true) => cm.true_positives += 1,
                (true, false) => cm.false_positives += 1,
                (false, false) => cm.true_negatives += 1,
                (false, true) => cm.false_negatives += 1,
            }
        }
        cm
    }
}

/// Per-epoch evaluation results for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("empty evaluation: confusion matrix has no samples")]
    EmptyEvaluation,
    #[error("malformed external report row: {0}")]
    MalformedExternalRow(String),
    #[error("io: {0}")]
    Io(String),
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Accuracy, precision, recall, and F1 from a confusion matrix, packaged
/// with the epoch and loss of the evaluation.
pub fn metrics(cm: &ConfusionMatrix, epoch: usize, loss: f64) -> Result<MetricsRecord, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    let accuracy = (cm.true_positives + cm.true_negatives) as f64 / total as f64;
    let predicted_positive = cm.true_positives + cm.false_positives;
    let actual_positive = cm.true_positives + cm.false_negatives;
    let precision = if predicted_positive == 0 {
        0.0
    } else {
        cm.true_positives as f64 / predicted_positive as f64
    };
    let recall = if actual_positive == 0 {
        0.0
    } else {
        cm.true_positives as f64 / actual_positive as f64
    };
    Ok(MetricsRecord {
        epoch,
        loss,
        accuracy,
        precision,
        recall,
        f1: f1_from_pr(precision, recall),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Improved,
    Na,
}

/// A run counts as NA when its best validation accuracy never exceeds the
/// majority-class fraction (within 1e-9): it did no better than putting all
/// samples in a single category.
pub fn na_verdict(max_val_accuracy: f64, majority_fraction: f64) -> Verdict {
    if max_val_accuracy <= majority_fraction + 1e-9 {
        Verdict::Na
    } else {
        Verdict::Improved
    }
}

/// One row of the comparison report: either an internal training run or an
/// externally reported result (never recomputed, tagged with its source).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// Provenance tag for external rows; `None` marks a run from this
    /// pipeline.
    pub source: Option<String>,
    /// `None` in every metric field renders as an NA row.
    pub epoch: Option<usize>,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl ReportRow {
    pub fn na(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            source: None,
            epoch: None,
            loss: None,
            accuracy: None,
            precision: None,
            recall: None,
            f1: None,
        }
    }

    pub fn from_best(label: impl Into<String>, best: &MetricsRecord) -> Self {
        Self {
            label: label.into(),
            source: None,
            epoch: Some(best.epoch),
            loss: Some(best.loss),
            accuracy: Some(best.accuracy),
            precision: Some(best.precision),
            recall: Some(best.recall),
            f1: Some(best.f1),
        }
    }
}

/// A rendered comparison of best-performing runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// Builds the comparison report: internal runs and external rows together,
/// sorted by accuracy descending (ties by label; NA rows last).
pub fn comparison_report(runs: Vec<ReportRow>, external: Vec<ReportRow>) -> Report {
    let mut rows: Vec<ReportRow> = runs.into_iter().chain(external).collect();
    rows.sort_by(|a, b| {
        match (a.accuracy, b.accuracy) {
            (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Equal),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then_with(|| a.label.cmp(&b.label))
    });
    Report { rows }
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.1}%", v * 100.0),
        None => "NA".to_string(),
    }
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "NA".to_string(),
    }
}

fn epoch_cell(v: Option<usize>) -> String {
    match v {
        Some(e) => e.to_string(),
        None => "NA".to_string(),
    }
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Model | Epoch | Loss | Accuracy | Precision | Recall | F1-Score | Source |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                row.label,
                epoch_cell(row.epoch),
                num(row.loss),
                pct(row.accuracy),
                pct(row.precision),
                pct(row.recall),
                pct(row.f1),
                row.source.as_deref().unwrap_or("this work"),
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,source,epoch,loss,accuracy,precision,recall,f1\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.label.replace(',', ";"),
                row.source.as_deref().unwrap_or("this work").replace(',', ";"),
                epoch_cell(row.epoch),
                num(row.loss),
                pct(row.accuracy),
                pct(row.precision),
                pct(row.recall),
                pct(row.f1),
            ));
        }
        out
    }
}

/// Reads externally reported rows from a CSV with header
/// `label,source,epoch,loss,accuracy,precision,recall,f1`. Metric columns
/// accept fractions (`0.925`), percentages (`92.5%`), or `NA`. Fields must
/// not contain commas.
pub fn read_external_rows(path: &Path) -> Result<Vec<ReportRow>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 8 {
            return Err(EvalError::MalformedExternalRow(format!(
                "line {}: expected 8 fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let parse_metric = |s: &str| -> Result<Option<f64>, EvalError> {
            if s.eq_ignore_ascii_case("na") {
                return Ok(None);
            }
            let (text, scale) = match s.strip_suffix('%') {
                Some(t) => (t, 0.01),
                None => (s, 1.0),
            };
            text.parse::<f64>()
                .map(|v| Some(v * scale))
                .map_err(|_| EvalError::MalformedExternalRow(format!("bad metric `{s}`")))
        };
        let epoch = if fields[2].eq_ignore_ascii_case("na") {
            None
        } else {
            Some(fields[2].parse::<usize>().map_err(|_| {
                EvalError::MalformedExternalRow(format!("bad epoch `{}`", fields[2]))
            })?)
        };
        rows.push(ReportRow {
            label: fields[0].to_string(),
            source: Some(fields[1].to_string()),
            epoch,
            loss: parse_metric(fields[3])?,
            accuracy: parse_metric(fields[4])?,
            precision: parse_metric(fields[5])?,
            recall: parse_metric(fields[6])?,
            f1: parse_metric(fields[7])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f1_harmonic_consistency_with_reported_best_row() {
        let f1 = f1_from_pr(0.902, 0.892);
        assert!((f1 - 0.897).abs() < 0.0005, "got {f1}");
    }

    #[test]
    fn hand_enumerated_confusion_matrix() {
        let cm = ConfusionMatrix {
            true_positives: 3,
            false_positives: 1,
            true_negatives: 5,
            false_negatives: 1,
        };
        let m = metrics(&cm, 1, 0.5).unwrap();
        assert!((m.accuracy - 0.8).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.75).abs() < 1e-12);
        assert!((m.f1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_scores_one_everywhere() {
        let cm = ConfusionMatrix {
            true_positives: 4,
            false_positives: 0,
            true_negatives: 6,
            false_negatives: 0,
        };
        let m = metrics(&cm, 1, 0.0).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_denominators_give_zero_not_nan() {
        let cm = ConfusionMatrix {
            true_positives: 0,
            false_positives: 0,
            true_negatives: 5,
            false_negatives: 5,
        };
        let m = metrics(&cm, 1, 0.0).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        assert_eq!(
            metrics(&ConfusionMatrix::default(), 1, 0.0),
            Err(EvalError::EmptyEvaluation)
        );
    }

    #[test]
    fn metric_bounds_hold_over_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let cm = ConfusionMatrix {
                true_positives: rng.random_range(0..50),
                false_positives: rng.random_range(0..50),
                true_negatives: rng.random_range(0..50),
                false_negatives: rng.random_range(0..50),
            };
            if cm.total() == 0 {
                continue;
            }
            let m = metrics(&cm, 1, 0.0).unwrap();
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                assert!((0.0..=1.0).contains(&v));
            }
            if m.precision + m.recall > 0.0 {
                let harmonic = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                assert!((m.f1 - harmonic).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_majority_predictor_accuracy_equals_majority_fraction() {
        // Predicting clean for everything on a 2386/1416 split.
        let cm = ConfusionMatrix {
            true_positives: 0,
            false_positives: 0,
            true_negatives: 2386,
            false_negatives: 1416,
        };
        let m = metrics(&cm, 1, 0.0).unwrap();
        let majority = 2386.0 / 3802.0;
        assert_eq!(m.accuracy, majority);
        assert_eq!(na_verdict(m.accuracy, majority), Verdict::Na);
    }

    #[test]
    fn one_extra_correct_sample_flips_to_improved() {
        let n = 10u64;
        let majority = 7.0 / n as f64;
        assert_eq!(na_verdict(7.0 / 10.0, majority), Verdict::Na);
        assert_eq!(na_verdict(8.0 / 10.0, majority), Verdict::Improved);
        assert_eq!(na_verdict(1.0, majority), Verdict::Improved);
    }

    #[test]
    fn report_sorts_by_accuracy_descending_with_na_last() {
        let a = ReportRow::from_best(
            "run a",
            &MetricsRecord { epoch: 44, loss: 0.1588, accuracy: 0.925, precision: 0.902, recall: 0.892, f1: 0.897 },
        );
        let b = ReportRow::from_best(
            "run b",
            &MetricsRecord { epoch: 10, loss: 0.3, accuracy: 0.879, precision: 0.8, recall: 0.8, f1: 0.8 },
        );
        let na = ReportRow::na("run c");
        let report = comparison_report(vec![b, na, a], vec![]);
        assert_eq!(report.rows[0].label, "run a");
        assert_eq!(report.rows[1].label, "run b");
        assert_eq!(report.rows[2].label, "run c");
        let md = report.to_markdown();
        assert!(md.contains("| run a | 44 | 0.1588 | 92.5% | 90.2% | 89.2% | 89.7% |"));
        assert!(md.contains("| run c | NA | NA | NA | NA | NA | NA |"));
    }

    #[test]
    fn external_rows_render_verbatim_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("external.csv");
        std::fs::write(
            &path,
            "label,source,epoch,loss,accuracy,precision,recall,f1\n\
             BERT SGD -LR: 0.0001 -Mom: 0.001,prior work,29,0.2625,88.8%,80.1%,92.5%,85.9%\n\
             RoBERTa SGD -LR: 0.0001 -Mom: 0.001,prior work,45,0.2708,88.8%,87.6%,81.0%,84.2%\n",
        )
        .unwrap();
        let external = read_external_rows(&path).unwrap();
        assert_eq!(external.len(), 2);
        assert_eq!(external[0].source.as_deref(), Some("prior work"));
        assert!((external[0].accuracy.unwrap() - 0.888).abs() < 1e-9);
        let report = comparison_report(vec![], external);
        assert_eq!(report.rows.len(), 2);
        let md = report.to_markdown();
        assert!(md.contains("| 88.8% | 80.1% | 92.5% | 85.9% | prior work |"));
    }

    #[test]
    fn report_bytes_are_deterministic() {
        let rows = vec![
            ReportRow::from_best(
                "x",
                &MetricsRecord { epoch: 1, loss: 0.5, accuracy: 0.7, precision: 0.6, recall: 0.5, f1: 0.54 },
            ),
            ReportRow::na("y"),
        ];
        let r1 = comparison_report(rows.clone(), vec![]);
        let r2 = comparison_report(rows, vec![]);
        assert_eq!(r1.to_markdown(), r2.to_markdown());
        assert_eq!(r1.to_csv(), r2.to_csv());
    }
}
