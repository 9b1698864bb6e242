//! Accuracy, support-weighted precision / recall / F1 and the confusion
//! matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EmotionLabelSet;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({preds}) and gold labels ({golds}) differ in length")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("nothing to score")]
    Empty,
    #[error("label index {0} outside the label set")]
    UnknownLabel(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[gold][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub scored: usize,
    /// Utterances left out because they had no gold label.
    pub unscored: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_matrix(
    preds: &[usize],
    golds: &[usize],
    classes: usize,
) -> Result<Vec<Vec<usize>>, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p >= classes {
            return Err(MetricsError::UnknownLabel(p));
        }
        if g >= classes {
            return Err(MetricsError::UnknownLabel(g));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

/// Scores class-index predictions against gold labels.
pub fn evaluate(
    preds: &[usize],
    golds: &[usize],
    labels: &EmotionLabelSet,
) -> Result<EvalReport, MetricsError> {
    if preds.is_empty() && golds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = labels.len();
    let confusion = confusion_matrix(preds, golds, k)?;
    let n = preds.len();

    // Weighted terms are support·metric with the integer product formed
    // first, so e.g. support·(tp/support) is exactly tp.
    let mut per_class = Vec::with_capacity(k);
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    let mut correct = 0;
    for c in 0..k {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        // 2TP / (2TP + FP + FN) is the harmonic mean of precision and recall.
        let f1_den = support + predicted;
        correct += tp;
        wp += ratio(support * tp, predicted);
        wr += ratio(support * tp, support);
        wf += ratio(2 * support * tp, f1_den);
        per_class.push(ClassMetrics {
            label: labels.name(c).to_string(),
            precision: ratio(tp, predicted),
            recall: ratio(tp, support),
            f1: ratio(2 * tp, f1_den),
            support,
        });
    }
    Ok(EvalReport {
        accuracy: ratio(correct, n),
        weighted_precision: wp / n as f64,
        weighted_recall: wr / n as f64,
        weighted_f1: wf / n as f64,
        per_class,
        confusion,
        scored: n,
        unscored: 0,
    })
}

/// Like [`evaluate`], skipping pairs whose gold label is absent.
pub fn evaluate_partial(
    preds: &[usize],
    golds: &[Option<usize>],
    labels: &EmotionLabelSet,
) -> Result<EvalReport, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let (p, g): (Vec<usize>, Vec<usize>) = preds
        .iter()
        .zip(golds)
        .filter_map(|(&p, g)| g.map(|g| (p, g)))
        .unzip();
    let mut report = evaluate(&p, &g, labels)?;
    report.unscored = preds.len() - p.len();
    Ok(report)
}

pub const TABLE_COLUMNS: [&str; 4] = [
    "Weighted F1",
    "Accuracy",
    "Weighted Precision",
    "Weighted Recall",
];

/// Fixed-width comparison table, four decimals per cell.
pub fn render_table(reports: &[(String, EvalReport)]) -> String {
    let name_w = reports
        .iter()
        .map(|(n, _)| n.chars().count())
        .chain(std::iter::once("Model".len()))
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Model");
    for col in TABLE_COLUMNS {
        let _ = write!(out, " | {col:>w$}", w = col.len());
    }
    out.push('\n');
    let total = name_w + TABLE_COLUMNS.iter().map(|c| c.len() + 3).sum::<usize>();
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for (name, r) in reports {
        let pad = name_w - name.chars().count();
        out.push_str(name);
        out.push_str(&" ".repeat(pad));
        let cells = [r.weighted_f1, r.accuracy, r.weighted_precision, r.weighted_recall];
        for (col, v) in TABLE_COLUMNS.iter().zip(cells) {
            let _ = write!(out, " | {:>w$}", format!("{v:.4}"), w = col.len());
        }
        out.push('\n');
    }
    out
}
