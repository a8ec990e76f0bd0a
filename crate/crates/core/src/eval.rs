//! The evaluation metrics: VRA and its RTK/affinity variants, rejection
//! rate, clean accuracy, top-k accuracy, and affinity accuracy.

use serde::{Deserialize, Serialize};

use crate::certify::{AffinityCollection, CertificationResult, GuaranteeKind};
use crate::error::{GloroError, Result};
use crate::net::rank_classes;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub guarantee: GuaranteeKind,
    pub eps: f64,
    pub vra: f64,
    pub rejection_rate: f64,
    pub clean_accuracy: f64,
    pub n: usize,
    pub accepted: usize,
    pub correct: usize,
}

/// Fraction of points that are accepted with the label inside F^{kstar}.
pub fn rtk_vra(results: &[CertificationResult], labels: &[usize]) -> Result<f64> {
    check_lengths(results, labels)?;
    for r in results {
        if r.guarantee == GuaranteeKind::Affinity {
            return Err(GloroError::InvalidArgument(
                "rtk_vra expects standard or RTK results".into(),
            ));
        }
    }
    Ok(count_vra(results, labels) as f64 / results.len() as f64)
}

/// Fraction of points accepted with the label inside the (affinity-contained)
/// safe set.
pub fn affinity_vra(results: &[CertificationResult], labels: &[usize]) -> Result<f64> {
    check_lengths(results, labels)?;
    Ok(count_vra(results, labels) as f64 / results.len() as f64)
}

fn count_vra(results: &[CertificationResult], labels: &[usize]) -> usize {
    results
        .iter()
        .zip(labels)
        .filter(|(r, y)| {
            r.accepted && r.safe_set.as_ref().is_some_and(|s| s.contains(y))
        })
        .count()
}

fn check_lengths(results: &[CertificationResult], labels: &[usize]) -> Result<()> {
    if results.len() != labels.len() || results.is_empty() {
        return Err(GloroError::InvalidArgument(format!(
            "got {} results and {} labels",
            results.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// True iff every class scored above the ground truth shares a single
/// affinity set with the ground truth.
pub fn affinity_accuracy(logits: &[f64], label: usize, s: &AffinityCollection) -> bool {
    let above: Vec<usize> =
        (0..logits.len()).filter(|&i| logits[i] > logits[label]).collect();
    s.sets.iter().zip(&s.bitmaps).any(|(set, bitmap)| {
        set.contains(&label) && above.iter().all(|&i| bitmap.test(i))
    })
}

/// True iff the label is among the k highest logits (lower index wins ties).
pub fn topk_accuracy(logits: &[f64], label: usize, k: usize) -> bool {
    rank_classes(logits)[..k.min(logits.len())].contains(&label)
}

pub fn rejection_rate(results: &[CertificationResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| !r.accepted).count() as f64 / results.len() as f64
}

/// Fraction of points whose argmax equals the label.
pub fn clean_accuracy(all_logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    all_logits
        .iter()
        .zip(labels)
        .filter(|(l, y)| topk_accuracy(l, **y, 1))
        .count() as f64
        / labels.len() as f64
}

/// Clean accuracy in the guarantee-matched notion: top-K for RTK, affinity
/// accuracy for affinity, top-1 for standard.
pub fn guarantee_clean_accuracy(
    all_logits: &[Vec<f64>],
    labels: &[usize],
    guarantee: &crate::certify::Guarantee,
) -> f64 {
    use crate::certify::Guarantee;
    if labels.is_empty() {
        return 0.0;
    }
    let hits = all_logits
        .iter()
        .zip(labels)
        .filter(|(l, y)| match guarantee {
            Guarantee::Standard => topk_accuracy(l, **y, 1),
            Guarantee::Rtk { k } => topk_accuracy(l, **y, *k),
            Guarantee::Affinity(s) => affinity_accuracy(l, **y, s),
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub fn report(
    results: &[CertificationResult],
    labels: &[usize],
    all_logits: &[Vec<f64>],
    guarantee: &crate::certify::Guarantee,
    eps: f64,
) -> Result<MetricsReport> {
    check_lengths(results, labels)?;
    let correct = count_vra(results, labels);
    Ok(MetricsReport {
        guarantee: guarantee.kind(),
        eps,
        vra: correct as f64 / results.len() as f64,
        rejection_rate: rejection_rate(results),
        clean_accuracy: guarantee_clean_accuracy(all_logits, labels, guarantee),
        n: results.len(),
        accepted: results.iter().filter(|r| r.accepted).count(),
        correct,
    })
}
