//! Certification heads: the standard bottom logit, RTK margins, and
//! affinity-masked margins, plus per-point certificate extraction.
//!
//! All operations are pure functions of a frozen network, converged bounds,
//! and a point; they are safe to run in parallel across points.

use serde::{Deserialize, Serialize};

use crate::error::{GloroError, Result};
use crate::lipschitz::LipschitzBounds;
use crate::net::{predict_topk, rank_classes, Network};

/// Stand-in for the -infinity margin when no admissible k exists. Finite so
/// gradients stay finite during training.
pub const NEG_SENTINEL: f64 = -1e30;

/// Fixed-width bitset over class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitset {
    words: Vec<u64>,
    nbits: usize,
}

impl Bitset {
    pub fn new(nbits: usize) -> Self {
        Bitset { words: vec![0; nbits.div_ceil(64)], nbits }
    }

    pub fn from_indices(nbits: usize, indices: &[usize]) -> Self {
        let mut b = Bitset::new(nbits);
        for &i in indices {
            b.set(i);
        }
        b
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.nbits);
        self.words[i / 64] |= 1u64 << (i % 64);
    }

    pub fn test(&self, i: usize) -> bool {
        i < self.nbits && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// True if every bit of `other` is also set in `self`.
    pub fn contains(&self, other: &Bitset) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & b == *b)
    }
}

/// The family of class-label sets S that may share a robust prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityCollection {
    pub sets: Vec<Vec<usize>>,
    pub bitmaps: Vec<Bitset>,
    pub kmax: usize,
    pub num_classes: usize,
    /// True if every class appears in at least one set. A violation is a
    /// config warning, not an error.
    pub covers_all_classes: bool,
}

impl AffinityCollection {
    pub fn new(num_classes: usize, sets: Vec<Vec<usize>>) -> Result<Self> {
        if sets.is_empty() {
            return Err(GloroError::Config("affinity collection must be nonempty".into()));
        }
        let mut bitmaps = Vec::with_capacity(sets.len());
        let mut kmax = 0;
        for set in &sets {
            if set.is_empty() {
                return Err(GloroError::Config("empty affinity set".into()));
            }
            for &c in set {
                if c >= num_classes {
                    return Err(GloroError::Config(format!(
                        "affinity set references class {c}, but there are only {num_classes} classes"
                    )));
                }
            }
            bitmaps.push(Bitset::from_indices(num_classes, set));
            kmax = kmax.max(set.len());
        }
        let covers_all_classes =
            (0..num_classes).all(|c| bitmaps.iter().any(|b| b.test(c)));
        Ok(AffinityCollection { sets, bitmaps, kmax, num_classes, covers_all_classes })
    }

    pub fn singletons(num_classes: usize) -> Self {
        AffinityCollection::new(num_classes, (0..num_classes).map(|c| vec![c]).collect()).unwrap()
    }

    pub fn full_set(num_classes: usize) -> Self {
        AffinityCollection::new(num_classes, vec![(0..num_classes).collect()]).unwrap()
    }

    /// True if some affinity set contains the given class set.
    pub fn admits(&self, classes: &Bitset) -> bool {
        self.bitmaps.iter().any(|s| s.contains(classes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Guarantee {
    Standard,
    Rtk { k: usize },
    Affinity(AffinityCollection),
}

impl Guarantee {
    pub fn kind(&self) -> GuaranteeKind {
        match self {
            Guarantee::Standard => GuaranteeKind::Standard,
            Guarantee::Rtk { .. } => GuaranteeKind::Rtk,
            Guarantee::Affinity(_) => GuaranteeKind::Affinity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuaranteeKind {
    Standard,
    Rtk,
    Affinity,
}

impl std::fmt::Display for GuaranteeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GuaranteeKind::Standard => write!(f, "standard"),
            GuaranteeKind::Rtk => write!(f, "rtk"),
            GuaranteeKind::Affinity => write!(f, "affinity"),
        }
    }
}

/// Per-point accept/reject decision with its witnessing guarantee.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationResult {
    pub accepted: bool,
    pub guarantee: GuaranteeKind,
    /// Maximum certified k within the admissible range.
    pub kstar: Option<usize>,
    /// F^{kstar}(x), in rank order.
    pub safe_set: Option<Vec<usize>>,
    /// Minimum certified k, for decision-surface coloring.
    pub smallest_k: Option<usize>,
    pub smallest_safe_set: Option<Vec<usize>>,
    /// The head margin: m(x) for RTK, m(S, x) for affinity.
    pub margin: f64,
    /// m^k(x) for k = 1..=C-1 (index 0 holds m^1).
    pub per_k_margins: Vec<f64>,
    /// Largest epsilon at which the certificate would still be issued.
    pub radius: Option<f64>,
    /// Set when the requested K exceeded C-1 and was clamped.
    pub clamped: bool,
}

fn kmat_pair(kmat: &[f64], c: usize, j: usize, i: usize) -> f64 {
    kmat[j * c + i]
}

/// Margins m^k_j(x) = f_j(x) - max_{i not in F^k(x)} (f_i(x) + eps * K_ji)
/// for every j in F^k(x).
pub fn margins_mkj(
    logits: &[f64],
    kmat: &[f64],
    eps: f64,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let c = logits.len();
    if k < 1 || k >= c {
        return Err(GloroError::InvalidArgument(format!(
            "k = {k} out of range 1..={} (k = C has an empty complement)",
            c - 1
        )));
    }
    let ranking = rank_classes(logits);
    let (top, rest) = ranking.split_at(k);
    let mut out = Vec::with_capacity(k);
    for &j in top {
        let worst = rest
            .iter()
            .map(|&i| logits[i] + eps * kmat_pair(kmat, c, j, i))
            .fold(f64::NEG_INFINITY, f64::max);
        out.push((j, logits[j] - worst));
    }
    Ok(out)
}

/// m^k(x) = min over j in F^k of m^k_j(x). Positive iff x is certifiably
/// top-k eps-robust.
pub fn margin_mk(logits: &[f64], kmat: &[f64], eps: f64, k: usize) -> Result<f64> {
    Ok(margins_mkj(logits, kmat, eps, k)?
        .into_iter()
        .map(|(_, m)| m)
        .fold(f64::INFINITY, f64::min))
}

fn clamp_kparam(kparam: usize, c: usize) -> (usize, bool) {
    if kparam > c - 1 {
        (c - 1, true)
    } else {
        (kparam, false)
    }
}

/// m(x) = max over k <= K of m^k(x). Positive iff x is certifiably RTK
/// eps-robust.
pub fn margin_rtk(logits: &[f64], kmat: &[f64], eps: f64, kparam: usize) -> Result<f64> {
    let c = logits.len();
    if kparam < 1 {
        return Err(GloroError::InvalidArgument("K must be at least 1".into()));
    }
    let (kmax, _) = clamp_kparam(kparam, c);
    let mut best = f64::NEG_INFINITY;
    for k in 1..=kmax {
        best = best.max(margin_mk(logits, kmat, eps, k)?);
    }
    Ok(best)
}

/// m(S, x): max of m^k over exactly those k whose F^k(x) is contained in
/// some affinity set. Returns the finite -infinity sentinel when no k
/// qualifies.
pub fn margin_affinity(
    logits: &[f64],
    kmat: &[f64],
    eps: f64,
    s: &AffinityCollection,
) -> Result<f64> {
    let c = logits.len();
    let ranking = rank_classes(logits);
    let mut best = NEG_SENTINEL;
    let mut fk = Bitset::new(c);
    for k in 1..c.min(s.kmax + 1) {
        fk.set(ranking[k - 1]);
        if s.admits(&fk) {
            best = best.max(margin_mk(logits, kmat, eps, k)?);
        }
    }
    Ok(best)
}

/// Admissible values of k for a guarantee, in increasing order.
pub fn admissible_ks(logits: &[f64], guarantee: &Guarantee) -> (Vec<usize>, bool) {
    let c = logits.len();
    match guarantee {
        Guarantee::Standard => (vec![1], false),
        Guarantee::Rtk { k } => {
            let (kmax, clamped) = clamp_kparam(*k, c);
            ((1..=kmax).collect(), clamped)
        }
        Guarantee::Affinity(s) => {
            let ranking = rank_classes(logits);
            let mut fk = Bitset::new(c);
            let mut ks = Vec::new();
            for k in 1..c.min(s.kmax + 1) {
                fk.set(ranking[k - 1]);
                if s.admits(&fk) {
                    ks.push(k);
                }
            }
            (ks, false)
        }
    }
}

/// The head margin for a guarantee: m^1 for standard, m(x) for RTK,
/// m(S, x) for affinity.
pub fn guarantee_margin(logits: &[f64], kmat: &[f64], eps: f64, guarantee: &Guarantee) -> Result<f64> {
    match guarantee {
        Guarantee::Standard => margin_mk(logits, kmat, eps, 1),
        Guarantee::Rtk { k } => margin_rtk(logits, kmat, eps, *k),
        Guarantee::Affinity(s) => margin_affinity(logits, kmat, eps, s),
    }
}

/// Augmented logit vector g: g_i = f_i, g_bot = max_i f_i - m(x).
/// A maximal output other than the final (bottom) entry certifies the
/// point; an exact tie resolves to bottom (reject), keeping the
/// certificate strict.
pub fn rtk_head(logits: &[f64], kmat: &[f64], eps: f64, kparam: usize) -> Result<Vec<f64>> {
    let m = margin_rtk(logits, kmat, eps, kparam)?;
    Ok(augment(logits, m))
}

/// As `rtk_head` with the affinity-masked margin. The sentinel margin makes
/// the bottom logit dominate unconditionally.
pub fn affinity_head(
    logits: &[f64],
    kmat: &[f64],
    eps: f64,
    s: &AffinityCollection,
) -> Result<Vec<f64>> {
    let m = margin_affinity(logits, kmat, eps, s)?;
    Ok(augment(logits, m))
}

/// The standard GloRo head: f_bot = max_{i != j} (f_i + eps K_ji) with j
/// the predicted class.
pub fn standard_head(logits: &[f64], kmat: &[f64], eps: f64) -> Vec<f64> {
    let c = logits.len();
    let j = rank_classes(logits)[0];
    let bot = (0..c)
        .filter(|&i| i != j)
        .map(|i| logits[i] + eps * kmat_pair(kmat, c, j, i))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.to_vec();
    out.push(bot);
    out
}

pub fn augment(logits: &[f64], margin: f64) -> Vec<f64> {
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.to_vec();
    out.push(top - margin);
    out
}

/// True when the maximal entry of an augmented logit vector is not the
/// bottom logit; ties go to bottom.
pub fn head_accepts(aug: &[f64]) -> bool {
    let bot = aug[aug.len() - 1];
    aug[..aug.len() - 1].iter().any(|&g| g > bot)
}

/// Certificate extraction on precomputed logits.
pub fn certify_logits(
    logits: &[f64],
    bounds: &LipschitzBounds,
    eps: f64,
    guarantee: &Guarantee,
) -> Result<CertificationResult> {
    let c = logits.len();
    let kmat = &bounds.k;
    let margin = guarantee_margin(logits, kmat, eps, guarantee)?;
    let (ks, clamped) = admissible_ks(logits, guarantee);
    let mut per_k_margins = Vec::with_capacity(c - 1);
    for k in 1..c {
        per_k_margins.push(margin_mk(logits, kmat, eps, k)?);
    }
    let accepted = margin > 0.0;
    let (kstar, smallest_k) = if accepted {
        let certified: Vec<usize> =
            ks.iter().copied().filter(|&k| per_k_margins[k - 1] > 0.0).collect();
        (certified.last().copied(), certified.first().copied())
    } else {
        (None, None)
    };
    let safe_set = kstar.map(|k| predict_topk(logits, k).unwrap());
    let smallest_safe_set = smallest_k.map(|k| predict_topk(logits, k).unwrap());
    let radius = if ks.is_empty() {
        None
    } else {
        Some(radius_over_ks(logits, kmat, &ks))
    };
    Ok(CertificationResult {
        accepted,
        guarantee: guarantee.kind(),
        kstar,
        safe_set,
        smallest_k,
        smallest_safe_set,
        margin,
        per_k_margins,
        radius,
        clamped,
    })
}

/// Per-point certification through the network. Refuses unconverged bounds:
/// an unconverged spectral estimate can under-approximate, so it is not a
/// certificate.
pub fn certify_point(
    net: &Network,
    bounds: &LipschitzBounds,
    eps: f64,
    guarantee: &Guarantee,
    x: &[f64],
) -> Result<CertificationResult> {
    if !bounds.converged {
        return Err(GloroError::CertificationRefused(
            "Lipschitz bounds have not converged; rerun the power method to convergence".into(),
        ));
    }
    let logits = net.forward(x)?;
    certify_logits(&logits, bounds, eps, guarantee)
}

fn radius_for_k(logits: &[f64], kmat: &[f64], k: usize) -> f64 {
    let c = logits.len();
    let ranking = rank_classes(logits);
    let (top, rest) = ranking.split_at(k);
    let mut r = f64::INFINITY;
    for &j in top {
        for &i in rest {
            let kji = kmat_pair(kmat, c, j, i);
            let gap = logits[j] - logits[i];
            let pair_r = if kji == 0.0 {
                if gap > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            } else {
                gap / kji
            };
            r = r.min(pair_r);
        }
    }
    r
}

fn radius_over_ks(logits: &[f64], kmat: &[f64], ks: &[usize]) -> f64 {
    ks.iter().map(|&k| radius_for_k(logits, kmat, k)).fold(f64::NEG_INFINITY, f64::max)
}

/// r = max over k <= K of min over j in F^k, i not in F^k of
/// (f_j - f_i) / K_ji: the largest eps at which RTK certification accepts.
pub fn certified_radius(logits: &[f64], kmat: &[f64], kparam: usize) -> Result<f64> {
    let c = logits.len();
    if kparam < 1 {
        return Err(GloroError::InvalidArgument("K must be at least 1".into()));
    }
    let (kmax, _) = clamp_kparam(kparam, c);
    let ks: Vec<usize> = (1..=kmax).collect();
    Ok(radius_over_ks(logits, kmat, &ks))
}
