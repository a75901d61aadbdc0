//! Training loss and evaluation artifacts: sparse categorical cross-entropy,
//! accuracy, confusion matrices, and the classification report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const NUM_CLASSES: usize = 10;

/// `-ln(max(probs[label], 1e-12))`. The clamp keeps the loss finite under a
/// degenerate confident-wrong prediction.
pub fn sparse_ce_loss<T: Real>(probs: &Tensor<T>, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-probs[label].to_f64().max(1e-12).ln())
}

/// Combined softmax + cross-entropy gradient w.r.t. the pre-softmax logits:
/// `probs - onehot(label)`.
pub fn softmax_ce_logit_grad<T: Real>(probs: &Tensor<T>, label: usize) -> Result<Tensor<T>> {
    if label >= probs.len() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let mut g = probs.clone();
    g[label] = g[label] - T::one();
    Ok(g)
}

/// Argmax with ties broken to the lowest class index.
pub fn argmax<T: Real>(probs: &Tensor<T>) -> usize {
    let mut best = 0;
    for i in 1..probs.len() {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of matching prediction/label pairs.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Config(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Row-major confusion counts; rows are the true class, columns the prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(classes: usize, predictions: &[usize], labels: &[usize]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Config("prediction/label length mismatch".into()));
        }
        let mut m = Self::new(classes);
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= classes || l >= classes {
                return Err(Error::Config(format!(
                    "class index out of range: pred {p}, label {l}"
                )));
            }
            m.counts[l * classes + p] += 1;
        }
        Ok(m)
    }

    pub fn at(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.classes).map(|c| format!("pred_{c}")).collect();
        out.push_str("true_class,");
        out.push_str(&header.join(","));
        out.push('\n');
        for r in 0..self.classes {
            out.push_str(&r.to_string());
            for c in 0..self.classes {
                out.push(',');
                out.push_str(&self.at(r, c).to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced a metric to 0.00.
    pub degenerate: bool,
}

/// Per-class precision/recall/F1/support plus macro and weighted averages,
/// mirroring the layout of a standard classification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub total_support: u64,
    pub macro_avg: (f64, f64, f64),
    pub weighted_avg: (f64, f64, f64),
}

/// Builds the report from a confusion matrix. Precision is diagonal over
/// column sum, recall diagonal over row sum; zero denominators report 0 with
/// the `degenerate` flag set.
pub fn classification_report(confusion: &ConfusionMatrix) -> ClassificationReport {
    let k = confusion.classes;
    let total = confusion.total();
    let mut per_class = Vec::with_capacity(k);
    let mut correct = 0u64;

    for c in 0..k {
        let diag = confusion.at(c, c);
        correct += diag;
        let col_sum: u64 = (0..k).map(|r| confusion.at(r, c)).sum();
        let row_sum: u64 = (0..k).map(|p| confusion.at(c, p)).sum();
        let mut degenerate = false;
        let precision = if col_sum == 0 {
            degenerate = true;
            0.0
        } else {
            diag as f64 / col_sum as f64
        };
        let recall = if row_sum == 0 {
            degenerate = true;
            0.0
        } else {
            diag as f64 / row_sum as f64
        };
        let f1 = if precision + recall == 0.0 {
            degenerate = degenerate || row_sum != 0 || col_sum != 0;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: row_sum,
            degenerate,
        });
    }

    let accuracy = if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    };
    let kf = k as f64;
    let macro_avg = (
        per_class.iter().map(|m| m.precision).sum::<f64>() / kf,
        per_class.iter().map(|m| m.recall).sum::<f64>() / kf,
        per_class.iter().map(|m| m.f1).sum::<f64>() / kf,
    );
    let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
        if total == 0 {
            return 0.0;
        }
        per_class
            .iter()
            .map(|m| f(m) * m.support as f64)
            .sum::<f64>()
            / total as f64
    };
    let weighted_avg = (
        weighted(|m| m.precision),
        weighted(|m| m.recall),
        weighted(|m| m.f1),
    );

    ClassificationReport {
        per_class,
        accuracy,
        total_support: total,
        macro_avg,
        weighted_avg,
    }
}

fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl ClassificationReport {
    /// Aligned plain-text rendering: per-class rows, an accuracy line, then
    /// macro and weighted averages, all to two decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14}{:>10}{:>10}{:>10}{:>10}\n",
            "Class", "Precision", "Recall", "F1-Score", "Support"
        ));
        let mut any_degenerate = false;
        for (c, m) in self.per_class.iter().enumerate() {
            any_degenerate |= m.degenerate;
            let flag = if m.degenerate { "*" } else { "" };
            out.push_str(&format!(
                "{:<14}{:>10.2}{:>10.2}{:>10.2}{:>10}\n",
                format!("{c}{flag}"),
                m.precision,
                m.recall,
                m.f1,
                m.support
            ));
        }
        out.push_str(&format!(
            "{:<14}{:.2} ({} samples)\n",
            "Accuracy",
            self.accuracy,
            group_thousands(self.total_support)
        ));
        out.push_str(&format!(
            "{:<14}{:>10.2}{:>10.2}{:>10.2}{:>10}\n",
            "Macro Avg",
            self.macro_avg.0,
            self.macro_avg.1,
            self.macro_avg.2,
            group_thousands(self.total_support)
        ));
        out.push_str(&format!(
            "{:<14}{:>10.2}{:>10.2}{:>10.2}{:>10}\n",
            "Weighted Avg",
            self.weighted_avg.0,
            self.weighted_avg.1,
            self.weighted_avg.2,
            group_thousands(self.total_support)
        ));
        if any_degenerate {
            out.push_str("* metric forced to 0.00 by an empty class\n");
        }
        out
    }
}
