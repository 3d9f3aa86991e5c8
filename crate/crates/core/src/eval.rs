//! (N+1)-class metrics: accuracy and macro F1 over all classes, the open
//! class's F1, and macro F1 over the known classes alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major confusion counts: `matrix[gold][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

/// Count (gold, pred) pairs into a `num_classes`-square matrix. The last
/// class id is the open class by convention.
pub fn confusion(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p >= num_classes {
            return Err(Error::Label {
                label: p,
                num_classes,
            });
        }
        if g >= num_classes {
            return Err(Error::Label {
                label: g,
                num_classes,
            });
        }
        counts[g][p] += 1;
    }
    Ok(ConfusionMatrix {
        num_classes,
        counts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold count for the class.
    pub support: usize,
}

/// Metrics in the published reporting convention. All values lie in [0, 1];
/// serialization order is fixed for byte-stable reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub open_f1: f64,
    pub known_macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
}

/// Compute the report from a confusion matrix whose last class is the open
/// class. Per-class F1 = 2PR/(P+R), defined as 0 when P + R = 0; macro F1 is
/// the unweighted mean including absent classes.
pub fn compute_metrics(matrix: &ConfusionMatrix) -> Result<MetricsReport> {
    let k = matrix.num_classes;
    if k == 0 || matrix.counts.len() != k || matrix.counts.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension("confusion matrix must be square".into()));
    }
    let total = matrix.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }

    let mut per_class = Vec::with_capacity(k);
    for class in 0..k {
        let tp = matrix.counts[class][class];
        let gold: usize = matrix.counts[class].iter().sum();
        let predicted: usize = (0..k).map(|g| matrix.counts[g][class]).sum();
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if gold > 0 { tp as f64 / gold as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: gold,
        });
    }

    let trace: usize = (0..k).map(|c| matrix.counts[c][c]).sum();
    let accuracy = trace as f64 / total as f64;
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / k as f64;
    let open_f1 = per_class[k - 1].f1;
    let known_macro_f1 = if k > 1 {
        per_class[..k - 1].iter().map(|m| m.f1).sum::<f64>() / (k - 1) as f64
    } else {
        0.0
    };

    Ok(MetricsReport {
        accuracy,
        macro_f1,
        open_f1,
        known_macro_f1,
        per_class,
        confusion: matrix.counts.clone(),
    })
}

/// Convenience: confusion + metrics in one step.
pub fn evaluate(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<MetricsReport> {
    compute_metrics(&confusion(preds, golds, num_classes)?)
}
