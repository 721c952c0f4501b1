//! Split-conformal p-values and prediction sets, for the marginal case and
//! for calibration restricted to a fixed group, plus the batch rank fast
//! path used by the selection loop.
//!
//! All p-values use the inclusive rank rule (1 + #{calib score <= test
//! score}) / (1 + |calib|). An empty calibration pool yields p-value 1 for
//! everything: maximally conservative, never an error.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::data_model::{phi, restrict_by_group, Dataset, GroupKey};
use crate::scores::ScoreTensor;
use crate::{Error, Result};

/// Cost-model instrumentation: structured operations (sorts, binary
/// searches, linear scans) report how many score comparisons they imply.
/// Deterministic for a given workload, independent of thread count.
static COMPARISONS: AtomicU64 = AtomicU64::new(0);

pub fn reset_comparison_count() {
    COMPARISONS.store(0, Ordering::Relaxed);
}

pub fn comparison_count() -> u64 {
    COMPARISONS.load(Ordering::Relaxed)
}

pub(crate) fn add_comparisons(k: u64) {
    COMPARISONS.fetch_add(k, Ordering::Relaxed);
}

/// Comparisons implied by a length-n sort, charged as n * ceil(log2 n).
pub(crate) fn sort_cost(n: usize) -> u64 {
    let n = n as u64;
    if n < 2 {
        return 0;
    }
    n * (u64::BITS - (n - 1).leading_zeros()) as u64
}

/// Comparisons implied by one binary search over n elements.
pub(crate) fn search_cost(n: usize) -> u64 {
    let n = n as u64;
    (u64::BITS - n.leading_zeros()) as u64
}

/// Per-label conformal p-values for one test point.
#[derive(Debug, Clone, PartialEq)]
pub struct PValueVector {
    values: Vec<f64>,
    calib_size: usize,
}

impl PValueVector {
    pub fn new(values: Vec<f64>, calib_size: usize) -> Self {
        Self { values, calib_size }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, y: usize) -> f64 {
        self.values[y]
    }

    pub fn label_count(&self) -> usize {
        self.values.len()
    }

    /// Size of the calibration subset the p-values were computed on.
    pub fn calib_size(&self) -> usize {
        self.calib_size
    }
}

/// Where a prediction set came from: which calibration pool produced it, or
/// which component sets were unioned.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    /// Calibrated on the full pool (no protected attributes).
    Marginal,
    /// Calibrated on the subset matching a group key.
    Group(GroupKey),
    /// Calibrated on the records of one label class.
    LabelMarginal { label: usize },
    /// Calibrated on one label class restricted to a group.
    LabelGroup { label: usize, key: GroupKey },
    /// Union of component sets.
    Union(Vec<Provenance>),
}

/// A set of candidate labels with a record of how it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    labels: Vec<usize>,
    provenance: Provenance,
}

impl PredictionSet {
    pub fn new(mut labels: Vec<usize>, provenance: Provenance) -> Self {
        labels.sort_unstable();
        labels.dedup();
        Self { labels, provenance }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn contains(&self, y: usize) -> bool {
        self.labels.binary_search(&y).is_ok()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Union of several sets, keeping every component's provenance.
    pub fn union(components: Vec<PredictionSet>) -> PredictionSet {
        let mut labels = Vec::new();
        let mut sources = Vec::with_capacity(components.len());
        for c in components {
            labels.extend_from_slice(&c.labels);
            sources.push(c.provenance);
        }
        PredictionSet::new(labels, Provenance::Union(sources))
    }
}

/// The inclusive conformal p-value given the calibration scores of one pool.
fn pvalue_from_pool(pool: &[f64], test_score: f64) -> f64 {
    add_comparisons(pool.len() as u64);
    let le = pool.iter().filter(|&&s| s <= test_score).count();
    (1 + le) as f64 / (1 + pool.len()) as f64
}

/// Conformal p-values for every candidate label of a test point, calibrated
/// on the records whose protected attributes match the test point's.
///
/// Calibration records contribute their score at their own label. An empty
/// matching subset gives p-value 1 for every label.
pub fn classify_pvalues(
    calib: &Dataset,
    calib_scores: &ScoreTensor,
    test_scores: &[f64],
    protected: &[usize],
    test_attrs: &[u32],
) -> Result<PValueVector> {
    let Some(labels) = calib.labels() else {
        return Err(Error::Invalid("classification calibration needs labels".into()));
    };
    if calib_scores.rows() != calib.n() {
        return Err(Error::Shape(format!(
            "score tensor has {} rows for a {}-row calibration set",
            calib_scores.rows(),
            calib.n()
        )));
    }
    if test_scores.len() != calib_scores.label_count() {
        return Err(Error::Shape(format!(
            "test point scores {} labels, calibration tensor {}",
            test_scores.len(),
            calib_scores.label_count()
        )));
    }
    let key = phi(test_attrs, protected)?;
    let subset = restrict_by_group(calib, &key)?;
    let pool: Vec<f64> = subset
        .iter()
        .map(|&i| calib_scores.score(i, labels[i]))
        .collect();
    let values = test_scores
        .iter()
        .map(|&s| pvalue_from_pool(&pool, s))
        .collect();
    Ok(PValueVector::new(values, pool.len()))
}

/// Keeps every label whose p-value is at least alpha (inclusive).
pub fn set_from_pvalues(
    p: &PValueVector,
    alpha: f64,
    provenance: Provenance,
) -> Result<PredictionSet> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    let labels = p
        .values()
        .iter()
        .enumerate()
        .filter(|&(_, &u)| u >= alpha)
        .map(|(y, _)| y)
        .collect();
    Ok(PredictionSet::new(labels, provenance))
}

/// Conformal p-value for an outlier-detection test point, calibrated on the
/// inliers whose protected attributes match. Small scores (outlier-like)
/// give small p-values.
pub fn outlier_pvalue(
    calib: &Dataset,
    calib_scores: &[f64],
    test_score: f64,
    protected: &[usize],
    test_attrs: &[u32],
) -> Result<f64> {
    if calib_scores.len() != calib.n() {
        return Err(Error::Shape(format!(
            "{} scores for a {}-row calibration set",
            calib_scores.len(),
            calib.n()
        )));
    }
    let key = phi(test_attrs, protected)?;
    let subset = restrict_by_group(calib, &key)?;
    let pool: Vec<f64> = subset.iter().map(|&i| calib_scores[i]).collect();
    Ok(pvalue_from_pool(&pool, test_score))
}

/// All leave-one-out p-values for a batch of probes against one calibration
/// pool, computed from ranks so that each probe costs O(log n) after one
/// shared sort.
///
/// For probe t, the pool augmented with the probe has n+1 members. Member
/// j's p-value treats the remaining n as calibration:
/// calib j: (#{i in pool : S_i <= S_j} + 1{S_probe <= S_j}) / (1 + n)
/// probe:   (1 + #{i in pool : S_i <= S_probe}) / (1 + n)
#[derive(Debug, Clone)]
pub struct BatchPValues {
    ranks: Vec<usize>,
    probe_scores: Vec<f64>,
    probe_le: Vec<usize>,
    n: usize,
}

impl BatchPValues {
    /// p-value of calibration member j when probe t is appended.
    pub fn calib_value(&self, t: usize, j: usize, calib_scores: &[f64]) -> f64 {
        let ind = usize::from(self.probe_scores[t] <= calib_scores[j]);
        (self.ranks[j] + ind) as f64 / (1 + self.n) as f64
    }

    /// p-value of probe t itself.
    pub fn probe_value(&self, t: usize) -> f64 {
        (1 + self.probe_le[t]) as f64 / (1 + self.n) as f64
    }

    /// #{i in pool : S_i <= S_j}, with j's own score included.
    pub fn rank(&self, j: usize) -> usize {
        self.ranks[j]
    }

    /// #{i in pool : S_i <= probe_t}.
    pub fn probe_le(&self, t: usize) -> usize {
        self.probe_le[t]
    }

    pub fn pool_size(&self) -> usize {
        self.n
    }
}

pub fn batch_rank_pvalues(calib_scores: &[f64], probe_scores: &[f64]) -> BatchPValues {
    let n = calib_scores.len();
    let mut sorted = calib_scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    add_comparisons(sort_cost(n));
    let ranks = calib_scores
        .iter()
        .map(|&s| sorted.partition_point(|&v| v <= s))
        .collect();
    add_comparisons(n as u64 * search_cost(n));
    let probe_le = probe_scores
        .iter()
        .map(|&s| sorted.partition_point(|&v| v <= s))
        .collect();
    add_comparisons(probe_scores.len() as u64 * search_cost(n));
    BatchPValues {
        ranks,
        probe_scores: probe_scores.to_vec(),
        probe_le,
        n,
    }
}
