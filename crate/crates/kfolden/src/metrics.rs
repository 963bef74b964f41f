//! Detection and classification metrics over scored examples.
//!
//! Out-of-distribution examples are the positive class for every detection
//! metric (AUROC, AUPR, TNR@95TPR), and every detector emits scores where
//! higher means more OOD, so one metric suite serves all methods.

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// A classifier's verdict on one example: a label, or a refusal to assign
/// one. Serializes as the label index or the string `"rejected"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Label(usize),
    Rejected,
}

impl Serialize for Prediction {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Prediction::Label(i) => serializer.serialize_u64(*i as u64),
            Prediction::Rejected => serializer.serialize_str("rejected"),
        }
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct PredictionVisitor;
        impl<'de> Visitor<'de> for PredictionVisitor {
            type Value = Prediction;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a label index or the string \"rejected\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Prediction, E> {
                Ok(Prediction::Label(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Prediction, E> {
                if v < 0 {
                    return Err(E::custom("negative label index"));
                }
                Ok(Prediction::Label(v as usize))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Prediction, E> {
                if v == "rejected" {
                    Ok(Prediction::Rejected)
                } else {
                    Err(E::custom(format!("unexpected prediction {v:?}")))
                }
            }
        }
        deserializer.deserialize_any(PredictionVisitor)
    }
}

/// One evaluated example: detector output plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    /// Detector score; higher means more out-of-distribution.
    pub ood_score: f64,
    pub max_prob: f64,
    pub predicted_label: Prediction,
    pub is_ood_truth: bool,
    /// Ground-truth label; only meaningful for in-distribution examples.
    pub true_label: Option<usize>,
}

fn validate_finite(scored: &[ScoredExample]) -> Result<()> {
    if scored.iter().any(|s| !s.ood_score.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    Ok(())
}

fn split_counts(scored: &[ScoredExample]) -> (usize, usize) {
    let ood = scored.iter().filter(|s| s.is_ood_truth).count();
    (ood, scored.len() - ood)
}

/// Area under the ROC curve via the rank-sum (Mann-Whitney) estimator with
/// midrank tie handling: the probability that a random OOD example outscores
/// a random ID example, ties counting half.
pub fn auroc(scored: &[ScoredExample]) -> Result<f64> {
    validate_finite(scored)?;
    auroc_from_scores(scored.iter().map(|s| (s.ood_score, s.is_ood_truth)))
}

/// Rank-based AUROC over raw `(score, is_positive)` pairs.
pub fn auroc_from_scores(scores: impl IntoIterator<Item = (f64, bool)>) -> Result<f64> {
    let mut items: Vec<(f64, bool)> = scores.into_iter().collect();
    let pos = items.iter().filter(|(_, p)| *p).count();
    let neg = items.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "auroc needs both classes (got {pos} positive, {neg} negative)"
        )));
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Midrank sums are multiples of 1/2 at this scale, so the numerator is
    // computed exactly and a single final division matches the pairwise
    // counting definition bit for bit.
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i + 1;
        while j < items.len() && items[j].0 == items[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &items[i..j] {
            if item.1 {
                positive_rank_sum += midrank;
            }
        }
        i = j;
    }
    let u = positive_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Area under the precision-recall curve with OOD as the positive class:
/// step-wise average precision summed over descending unique thresholds.
pub fn aupr_out(scored: &[ScoredExample]) -> Result<f64> {
    validate_finite(scored)?;
    let (pos, _) = split_counts(scored);
    if pos == 0 {
        return Err(Error::Metric("aupr_out needs at least one OOD example".into()));
    }
    let mut items: Vec<(f64, bool)> = scored
        .iter()
        .map(|s| (s.ood_score, s.is_ood_truth))
        .collect();
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = pos as f64;
    let mut area = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i + 1;
        while j < items.len() && items[j].0 == items[i].0 {
            j += 1;
        }
        for item in &items[i..j] {
            if item.1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += precision * (recall - prev_recall);
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// True-negative rate at the least-strict threshold reaching 95% true
/// positive rate: take the largest τ with `#(OOD >= τ) / #OOD >= 0.95` and
/// report `#(ID < τ) / #ID`.
pub fn tnr_at_95_tpr(scored: &[ScoredExample]) -> Result<f64> {
    validate_finite(scored)?;
    let (pos, neg) = split_counts(scored);
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "tnr@95tpr needs both classes (got {pos} OOD, {neg} ID)"
        )));
    }
    let mut ood_scores: Vec<f64> = scored
        .iter()
        .filter(|s| s.is_ood_truth)
        .map(|s| s.ood_score)
        .collect();
    ood_scores.sort_by(|a, b| b.total_cmp(a));
    ood_scores.dedup();
    // Candidate thresholds are the distinct OOD scores, visited from the
    // largest (strictest) down; the first that admits >= 95% of OOD wins.
    let mut tau = None;
    for &candidate in &ood_scores {
        let tpr = scored
            .iter()
            .filter(|s| s.is_ood_truth && s.ood_score >= candidate)
            .count() as f64
            / pos as f64;
        if tpr >= 0.95 {
            tau = Some(candidate);
            break;
        }
    }
    let tau = tau.expect("the smallest OOD score always reaches TPR 1.0");
    let tn = scored
        .iter()
        .filter(|s| !s.is_ood_truth && s.ood_score < tau)
        .count();
    Ok(tn as f64 / neg as f64)
}

/// Fraction of examples whose prediction equals the true label; a rejection
/// counts as wrong. Call with in-distribution examples.
pub fn id_accuracy(scored: &[ScoredExample]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::Metric("id_accuracy over an empty set".into()));
    }
    let correct = scored
        .iter()
        .filter(|s| match (s.predicted_label, s.true_label) {
            (Prediction::Label(p), Some(t)) => p == t,
            _ => false,
        })
        .count();
    Ok(correct as f64 / scored.len() as f64)
}

/// Fraction of (out-of-distribution) examples confidently accepted as
/// in-distribution: `max_prob >= phi`.
pub fn ood_error_rate(scored: &[ScoredExample], phi: f64) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::Metric("ood_error_rate over an empty set".into()));
    }
    let accepted = scored.iter().filter(|s| s.max_prob >= phi).count();
    Ok(accepted as f64 / scored.len() as f64)
}

/// The full benchmark readout for one detector on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub aupr_out: f64,
    pub tnr_at_95tpr: f64,
    pub id_accuracy: f64,
    pub ood_error_rate: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

/// Header for [`MetricReport::csv_row`].
pub const CSV_HEADER: &str = "dataset,method,backbone,auroc,aupr_out,tnr_at_95tpr,id_acc,ood_err";

impl MetricReport {
    /// One comparison-table row; numbers fixed to six decimals so rows diff
    /// cleanly across runs.
    pub fn csv_row(&self, dataset: &str, method: &str, backbone: &str) -> String {
        format!(
            "{dataset},{method},{backbone},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.auroc, self.aupr_out, self.tnr_at_95tpr, self.id_accuracy, self.ood_error_rate
        )
    }
}

/// Compute every metric over a mixed scored set (ID and OOD examples
/// together). The OOD error rate is the fraction of OOD examples the
/// detector failed to reject — for probability-thresholded detectors this
/// equals [`ood_error_rate`] at the tuned threshold.
pub fn evaluate(scored: &[ScoredExample]) -> Result<MetricReport> {
    validate_finite(scored)?;
    let id: Vec<ScoredExample> = scored.iter().filter(|s| !s.is_ood_truth).cloned().collect();
    let ood: Vec<ScoredExample> = scored.iter().filter(|s| s.is_ood_truth).cloned().collect();
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Metric(format!(
            "evaluation needs both classes (got {} ID, {} OOD)",
            id.len(),
            ood.len()
        )));
    }
    let accepted = ood
        .iter()
        .filter(|s| s.predicted_label != Prediction::Rejected)
        .count();
    Ok(MetricReport {
        auroc: auroc(scored)?,
        aupr_out: aupr_out(scored)?,
        tnr_at_95tpr: tnr_at_95_tpr(scored)?,
        id_accuracy: id_accuracy(&id)?,
        ood_error_rate: accepted as f64 / ood.len() as f64,
        id_count: id.len(),
        ood_count: ood.len(),
    })
}
