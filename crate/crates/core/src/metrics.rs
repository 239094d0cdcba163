//! Binary-classification metrics.
//!
//! Accuracy, sensitivity, specificity and F-measure come straight off the
//! confusion counts; AUC uses the average-rank Mann-Whitney statistic, which
//! equals the probability that a random positive outscores a random
//! negative with ties counted 1/2. Degenerate denominators produce an
//! explicit undefined marker (`None`), never NaN.
//!
//! Threshold convention, used everywhere: a score >= threshold predicts
//! positive (the boundary counts as positive).

use crate::error::{Error, Result};

/// The four fundamental tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Derived metric record; `None` marks an undefined value (rendered as
/// an em dash in text output and null in machine-readable output).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub f: Option<f64>,
    pub counts: ConfusionCounts,
    pub threshold: f64,
}

/// Tally predictions (score >= threshold -> positive) against labels.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if scores.is_empty() {
        return Err(Error::usage("confusion: empty input".to_string()));
    }
    if scores.len() != labels.len() {
        return Err(Error::usage(format!(
            "confusion: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&s, &l)) in scores.iter().zip(labels).enumerate() {
        if l > 1 {
            return Err(Error::data(format!("label {l} at index {i} outside {{0,1}}")));
        }
        if !s.is_finite() {
            return Err(Error::data(format!("non-finite score {s} at index {i}")));
        }
        let pred_pos = s >= threshold;
        match (pred_pos, l) {
            (true, 1) => c.tp += 1,
            (true, 0) => c.fp += 1,
            (false, 1) => c.fn_ += 1,
            (false, 0) => c.tn += 1,
            _ => unreachable!(),
        }
    }
    Ok(c)
}

/// Derive ACC/SEN/SPE/F from counts, attaching a separately computed AUC.
pub fn report(counts: ConfusionCounts, auc: Option<f64>, threshold: f64) -> MetricReport {
    let (tp, tn, fp, fn_) = (
        counts.tp as f64,
        counts.tn as f64,
        counts.fp as f64,
        counts.fn_ as f64,
    );
    let ratio = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
    MetricReport {
        acc: ratio(tp + tn, tp + fp + tn + fn_),
        sen: ratio(tp, tp + fn_),
        spe: ratio(tn, tn + fp),
        // F undefined exactly when there are no actual positives.
        f: if counts.tp + counts.fn_ == 0 {
            None
        } else {
            ratio(2.0 * tp, 2.0 * tp + fn_ + fp)
        },
        auc,
        counts,
        threshold,
    }
}

/// Rank-based AUC: (sum of positive ranks, ties averaged, minus
/// n+(n+1)/2) / (n+ * n-). Errors when only one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::usage(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut n_pos = 0u64;
    let mut n_neg = 0u64;
    for (i, (&s, &l)) in scores.iter().zip(labels).enumerate() {
        if l > 1 {
            return Err(Error::data(format!("label {l} at index {i} outside {{0,1}}")));
        }
        if !s.is_finite() {
            return Err(Error::data(format!("non-finite score {s} at index {i}")));
        }
        if l == 1 {
            n_pos += 1;
        } else {
            n_neg += 1;
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data(format!(
            "AUC undefined: needs both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups; ranks are 1-based.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // positions i..=j share the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let np = n_pos as f64;
    let nn = n_neg as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}
