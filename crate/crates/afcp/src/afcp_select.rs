//! Automatic sensitive-attribute selection via leave-one-out miscoverage
//! (classification) or leave-one-out false-positive (outlier) simulation.
//!
//! The hot path never materializes per-record indicator vectors. After one
//! sort of the calibration scores, each record's indicator is a threshold
//! test on its rank, so per-group counts come from binary searches over
//! per-group sorted rank lists. The results are bit-identical to the
//! literal leave-one-out recomputation because the p-value comparison is
//! reduced to an integer rank threshold derived from the same float
//! predicate.

use ndarray::Array2;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::conformal_core::{add_comparisons, batch_rank_pvalues, search_cost, sort_cost};
use crate::data_model::{AttributeSpec, Dataset};
use crate::scores::ScoreTensor;
use crate::{Error, Result};

/// Outcome of the one-sided one-sample t-test against the nominal level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub statistic: f64,
    pub df: usize,
    pub rejected: bool,
}

/// One selection sweep over a set of candidate attributes.
#[derive(Debug, Clone)]
pub struct SelectionPass {
    /// Attribute indices the pass searched over.
    pub candidates: Vec<usize>,
    /// Worst-group indicator rate per candidate, aligned with `candidates`.
    pub delta: Vec<f64>,
    /// Level achieving each candidate's delta, aligned with `candidates`.
    pub argmax_level: Vec<u32>,
    /// Largest delta over the candidates (0 when there are none).
    pub qhat: f64,
    /// (attribute, level) achieving qhat; ties go to the smallest attribute
    /// index, then the smallest level.
    pub argmax: Option<(usize, u32)>,
    /// The significance test on the argmax group, absent when the pass had
    /// no candidates or was told to skip the test.
    pub ttest: Option<TTest>,
    /// The attribute this pass picked, if any.
    pub selected: Option<usize>,
}

/// Selection outcome for one placeholder label (or for one outlier test
/// point, which needs no placeholder).
#[derive(Debug, Clone)]
pub struct PlaceholderSelection {
    /// Union of the attributes picked by the executed passes.
    pub subset: Vec<usize>,
    pub passes: Vec<SelectionPass>,
}

/// Full classification selection: one entry per placeholder label plus the
/// intersection that defines the final selected subset.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub per_placeholder: Vec<PlaceholderSelection>,
    pub final_subset: Vec<usize>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_level(test_level: f64) -> Result<()> {
    if !(test_level > 0.0 && test_level < 1.0) {
        return Err(Error::Invalid(format!(
            "test_level must be in (0, 1), got {test_level}"
        )));
    }
    Ok(())
}

/// Leave-one-out miscoverage indicators for the calibration set augmented
/// with (test point, placeholder label). Entry i < n is record i's
/// indicator; the last entry is the test point's own. A record is flagged
/// when its leave-one-out p-value falls strictly below alpha.
pub fn loo_miscoverage(
    calib: &Dataset,
    calib_scores: &ScoreTensor,
    test_scores: &[f64],
    placeholder_y: usize,
    alpha: f64,
) -> Result<Vec<u8>> {
    check_alpha(alpha)?;
    let Some(labels) = calib.labels() else {
        return Err(Error::Invalid("leave-one-out needs calibration labels".into()));
    };
    if calib_scores.rows() != calib.n() {
        return Err(Error::Shape(format!(
            "score tensor has {} rows for a {}-row calibration set",
            calib_scores.rows(),
            calib.n()
        )));
    }
    if placeholder_y >= test_scores.len() {
        return Err(Error::Invalid(format!(
            "placeholder label {placeholder_y} out of range for {} scores",
            test_scores.len()
        )));
    }
    let own = calib_scores.own_scores(labels)?;
    let probe = test_scores[placeholder_y];
    let batch = batch_rank_pvalues(&own, &[probe]);
    let mut e = Vec::with_capacity(own.len() + 1);
    for j in 0..own.len() {
        e.push(u8::from(batch.calib_value(0, j, &own) < alpha));
    }
    e.push(u8::from(batch.probe_value(0) < alpha));
    Ok(e)
}

/// Outlier-detection analog of [`loo_miscoverage`]: one scalar score per
/// record, and a record is flagged when its leave-one-out p-value is at most
/// alpha (inclusive, unlike classification).
pub fn loo_rejections(calib_scores: &[f64], test_score: f64, alpha: f64) -> Vec<u8> {
    let batch = batch_rank_pvalues(calib_scores, &[test_score]);
    let mut e = Vec::with_capacity(calib_scores.len() + 1);
    for j in 0..calib_scores.len() {
        e.push(u8::from(batch.calib_value(0, j, calib_scores) <= alpha));
    }
    e.push(u8::from(batch.probe_value(0) <= alpha));
    e
}

/// Worst-group indicator rates: for each attribute, the largest mean of `e`
/// over the records of any nonempty level, along with the level achieving
/// it (smallest level on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct WorstRates {
    pub delta: Vec<f64>,
    pub argmax_level: Vec<u32>,
}

pub fn worst_group_rates(
    e: &[u8],
    attrs: &Array2<u32>,
    spec: &AttributeSpec,
) -> Result<WorstRates> {
    if e.is_empty() {
        return Err(Error::Invalid("indicator vector is empty".into()));
    }
    if e.len() != attrs.nrows() {
        return Err(Error::Shape(format!(
            "{} indicators but {} attribute rows",
            e.len(),
            attrs.nrows()
        )));
    }
    if attrs.ncols() != spec.len() {
        return Err(Error::Shape(format!(
            "{} attribute columns but spec declares {}",
            attrs.ncols(),
            spec.len()
        )));
    }
    if e.iter().any(|&v| v > 1) {
        return Err(Error::Invalid("indicators must be 0 or 1".into()));
    }
    let mut delta = Vec::with_capacity(spec.len());
    let mut argmax_level = Vec::with_capacity(spec.len());
    for k in 0..spec.len() {
        let levels = spec.level_count(k)?;
        let mut ones = vec![0usize; levels];
        let mut sizes = vec![0usize; levels];
        for (i, &flag) in e.iter().enumerate() {
            let lvl = attrs[[i, k]] as usize;
            if lvl >= levels {
                return Err(Error::AttributeLevel {
                    name: spec.def(k)?.name.clone(),
                    value: attrs[[i, k]],
                    levels,
                });
            }
            sizes[lvl] += 1;
            ones[lvl] += flag as usize;
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_lvl = 0u32;
        for lvl in 0..levels {
            if sizes[lvl] == 0 {
                continue;
            }
            let mean = ones[lvl] as f64 / sizes[lvl] as f64;
            if mean > best {
                best = mean;
                best_lvl = lvl as u32;
            }
        }
        delta.push(best);
        argmax_level.push(best_lvl);
    }
    Ok(WorstRates { delta, argmax_level })
}

/// One-sided one-sample t-test of the indicator mean against alpha,
/// computed from the count of ones so the fast path and the literal path
/// agree bit-for-bit. A degenerate sample (size < 2 or zero spread) rejects
/// exactly when the mean exceeds alpha.
pub(crate) fn significance_test_from_counts(
    ones: usize,
    size: usize,
    alpha: f64,
    test_level: f64,
) -> TTest {
    let m = size as f64;
    let mean = ones as f64 / m;
    let df = size.saturating_sub(1);
    if size < 2 || ones == 0 || ones == size {
        let statistic = if mean > alpha {
            f64::INFINITY
        } else if mean < alpha {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        return TTest {
            statistic,
            df,
            rejected: mean > alpha,
        };
    }
    let var =
        (ones as f64 * (1.0 - mean) * (1.0 - mean) + (size - ones) as f64 * mean * mean) / (m - 1.0);
    let statistic = (mean - alpha) / (var.sqrt() / m.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let critical = dist.inverse_cdf(1.0 - test_level);
    TTest {
        statistic,
        df,
        rejected: statistic > critical,
    }
}

/// Tests whether the worst group's indicator mean significantly exceeds
/// alpha. `e_worst` is the indicator sample of that group.
pub fn significance_test(e_worst: &[u8], alpha: f64, test_level: f64) -> Result<TTest> {
    check_alpha(alpha)?;
    check_level(test_level)?;
    if e_worst.is_empty() {
        return Err(Error::Invalid("significance test needs a nonempty sample".into()));
    }
    if e_worst.iter().any(|&v| v > 1) {
        return Err(Error::Invalid("indicators must be 0 or 1".into()));
    }
    let ones = e_worst.iter().map(|&v| v as usize).sum();
    Ok(significance_test_from_counts(
        ones,
        e_worst.len(),
        alpha,
        test_level,
    ))
}

/// Intersection of per-placeholder selections.
pub fn select_final(per_placeholder: &[Vec<usize>]) -> Vec<usize> {
    let Some(first) = per_placeholder.first() else {
        return Vec::new();
    };
    let mut out: Vec<usize> = first.clone();
    out.sort_unstable();
    out.dedup();
    for subset in &per_placeholder[1..] {
        out.retain(|k| subset.contains(k));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Flag when the p-value is strictly below alpha (set miscoverage).
    Classification,
    /// Flag when the p-value is at most alpha (outlier rejection).
    Outlier,
}

/// Shared per-calibration-set state for running many selections cheaply:
/// sorted scores, per-record ranks bucketed by (attribute, level), and the
/// integer rank threshold equivalent to the p-value comparison.
pub struct SelectionContext {
    spec: AttributeSpec,
    sorted: Vec<f64>,
    group_ranks: Vec<Vec<Vec<usize>>>,
    group_sizes: Vec<Vec<usize>>,
    n: usize,
    alpha: f64,
    test_level: f64,
    nstar: usize,
    label_count: usize,
}

impl SelectionContext {
    pub fn new_classification(
        calib: &Dataset,
        calib_scores: &ScoreTensor,
        alpha: f64,
        test_level: f64,
    ) -> Result<Self> {
        let Some(labels) = calib.labels() else {
            return Err(Error::Invalid("selection needs calibration labels".into()));
        };
        if calib_scores.rows() != calib.n() {
            return Err(Error::Shape(format!(
                "score tensor has {} rows for a {}-row calibration set",
                calib_scores.rows(),
                calib.n()
            )));
        }
        let own = calib_scores.own_scores(labels)?;
        Self::build(
            calib,
            own,
            alpha,
            test_level,
            Mode::Classification,
            calib_scores.label_count(),
        )
    }

    pub fn new_outlier(
        calib: &Dataset,
        calib_scores: &[f64],
        alpha: f64,
        test_level: f64,
    ) -> Result<Self> {
        if calib_scores.len() != calib.n() {
            return Err(Error::Shape(format!(
                "{} scores for a {}-row calibration set",
                calib_scores.len(),
                calib.n()
            )));
        }
        Self::build(calib, calib_scores.to_vec(), alpha, test_level, Mode::Outlier, 1)
    }

    fn build(
        calib: &Dataset,
        own: Vec<f64>,
        alpha: f64,
        test_level: f64,
        mode: Mode,
        label_count: usize,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        check_level(test_level)?;
        let n = own.len();
        let mut sorted = own.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        add_comparisons(sort_cost(n));

        let ranks: Vec<usize> = own
            .iter()
            .map(|&s| sorted.partition_point(|&v| v <= s))
            .collect();
        add_comparisons(n as u64 * search_cost(n));

        let spec = calib.spec();
        let mut group_ranks = Vec::with_capacity(spec.len());
        let mut group_sizes = Vec::with_capacity(spec.len());
        for k in 0..spec.len() {
            let levels = spec.level_count(k)?;
            let mut per_level: Vec<Vec<usize>> = vec![Vec::new(); levels];
            for i in 0..n {
                per_level[calib.attr_row(i)[k] as usize].push(ranks[i]);
            }
            add_comparisons(n as u64);
            let mut sizes = Vec::with_capacity(levels);
            for lvl in per_level.iter_mut() {
                lvl.sort_unstable();
                add_comparisons(sort_cost(lvl.len()));
                sizes.push(lvl.len());
            }
            group_ranks.push(per_level);
            group_sizes.push(sizes);
        }

        // Largest augmented rank whose p-value num/(n+1) still triggers the
        // indicator, under the exact float division the literal path uses.
        let denom = (n + 1) as f64;
        let trigger = |num: usize| match mode {
            Mode::Classification => (num as f64 / denom) < alpha,
            Mode::Outlier => (num as f64 / denom) <= alpha,
        };
        let mut lo = 0usize;
        let mut hi = n + 1;
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if trigger(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let nstar = lo;

        Ok(Self {
            spec: calib.spec().clone(),
            sorted,
            group_ranks,
            group_sizes,
            n,
            alpha,
            test_level,
            nstar,
            label_count,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// One selection sweep for a single probe score over the given candidate
    /// attributes. `skip_test` takes the argmax attribute unconditionally.
    pub fn select_pass(
        &self,
        probe_score: f64,
        test_attrs: &[u32],
        candidates: &[usize],
        skip_test: bool,
    ) -> Result<SelectionPass> {
        self.spec.validate_row(test_attrs)?;

        let c_lt = self.sorted.partition_point(|&v| v < probe_score);
        let c_le = self.sorted.partition_point(|&v| v <= probe_score);
        add_comparisons(2 * search_cost(self.n));

        // A calibration record's augmented p-value numerator is its rank
        // plus one exactly when its score is at least the probe's, i.e. when
        // its rank exceeds c_lt. Folding that into the threshold turns the
        // indicator into a single rank comparison.
        let e_probe = c_le < self.nstar;
        let rank_cut = if c_lt >= self.nstar {
            self.nstar
        } else {
            self.nstar - 1
        };

        let mut delta = Vec::with_capacity(candidates.len());
        let mut argmax_level = Vec::with_capacity(candidates.len());
        let mut best: Option<(f64, usize, u32, usize, usize)> = None;
        for &k in candidates {
            let probe_level = test_attrs[k] as usize;
            let mut k_best: Option<(f64, u32, usize, usize)> = None;
            for lvl in 0..self.group_sizes[k].len() {
                let ranks = &self.group_ranks[k][lvl];
                let mut ones = ranks.partition_point(|&r| r <= rank_cut);
                add_comparisons(search_cost(ranks.len()));
                let mut size = self.group_sizes[k][lvl];
                if lvl == probe_level {
                    size += 1;
                    ones += usize::from(e_probe);
                }
                if size == 0 {
                    continue;
                }
                let mean = ones as f64 / size as f64;
                if k_best.is_none() || mean > k_best.unwrap().0 {
                    k_best = Some((mean, lvl as u32, ones, size));
                }
            }
            let (mean, lvl, ones, size) = k_best.expect("the probe's level is never empty");
            delta.push(mean);
            argmax_level.push(lvl);
            if best.is_none() || mean > best.unwrap().0 {
                best = Some((mean, k, lvl, ones, size));
            }
        }

        let (qhat, argmax, ttest, selected) = match best {
            None => (0.0, None, None, None),
            Some((mean, k, lvl, ones, size)) => {
                if skip_test {
                    (mean, Some((k, lvl)), None, Some(k))
                } else {
                    let t = significance_test_from_counts(ones, size, self.alpha, self.test_level);
                    let picked = t.rejected.then_some(k);
                    (mean, Some((k, lvl)), Some(t), picked)
                }
            }
        };

        Ok(SelectionPass {
            candidates: candidates.to_vec(),
            delta,
            argmax_level,
            qhat,
            argmax,
            ttest,
            selected,
        })
    }

    /// Selection for one placeholder label: a first pass over every
    /// attribute, and optionally (when `two_attributes`) a second pass over
    /// the rest if the first picked one.
    pub fn select_placeholder(
        &self,
        probe_score: f64,
        test_attrs: &[u32],
        two_attributes: bool,
        skip_test: bool,
    ) -> Result<PlaceholderSelection> {
        let all: Vec<usize> = (0..self.spec.len()).collect();
        let first = self.select_pass(probe_score, test_attrs, &all, skip_test)?;
        let mut subset = Vec::new();
        let mut passes = vec![first];
        if let Some(k1) = passes[0].selected {
            subset.push(k1);
            if two_attributes {
                let rest: Vec<usize> = all.iter().copied().filter(|&k| k != k1).collect();
                if !rest.is_empty() {
                    let second = self.select_pass(probe_score, test_attrs, &rest, skip_test)?;
                    if let Some(k2) = second.selected {
                        subset.push(k2);
                    }
                    passes.push(second);
                }
            }
        }
        subset.sort_unstable();
        Ok(PlaceholderSelection { subset, passes })
    }

    /// Runs the placeholder loop over every label and intersects.
    pub fn select_classification(
        &self,
        test_scores: &[f64],
        test_attrs: &[u32],
        two_attributes: bool,
        skip_test: bool,
    ) -> Result<SelectionResult> {
        if test_scores.len() != self.label_count {
            return Err(Error::Shape(format!(
                "test point scores {} labels, calibration tensor {}",
                test_scores.len(),
                self.label_count
            )));
        }
        let mut per_placeholder = Vec::with_capacity(test_scores.len());
        for &probe in test_scores {
            per_placeholder.push(self.select_placeholder(
                probe,
                test_attrs,
                two_attributes,
                skip_test,
            )?);
        }
        let subsets: Vec<Vec<usize>> = per_placeholder
            .iter()
            .map(|p| p.subset.clone())
            .collect();
        let final_subset = select_final(&subsets);
        Ok(SelectionResult {
            per_placeholder,
            final_subset,
        })
    }

    /// Iterated outlier-detection selection: up to `j_max` passes, each
    /// excluding the attributes already picked, stopping early at the first
    /// empty pass. With `skip_test` the significance gate is bypassed and the
    /// argmax attribute of every pass is taken unconditionally.
    pub fn select_outlier(
        &self,
        test_score: f64,
        test_attrs: &[u32],
        j_max: usize,
        skip_test: bool,
    ) -> Result<PlaceholderSelection> {
        let mut remaining: Vec<usize> = (0..self.spec.len()).collect();
        let mut subset = Vec::new();
        let mut passes = Vec::new();
        for _ in 0..j_max {
            if remaining.is_empty() {
                break;
            }
            let pass = self.select_pass(test_score, test_attrs, &remaining, skip_test)?;
            let picked = pass.selected;
            passes.push(pass);
            match picked {
                Some(k) => {
                    subset.push(k);
                    remaining.retain(|&r| r != k);
                }
                None => break,
            }
        }
        subset.sort_unstable();
        Ok(PlaceholderSelection { subset, passes })
    }
}

/// One-shot single-attribute selection for one placeholder label.
pub fn select_attribute(
    calib: &Dataset,
    calib_scores: &ScoreTensor,
    test_scores: &[f64],
    test_attrs: &[u32],
    placeholder_y: usize,
    alpha: f64,
    test_level: f64,
) -> Result<PlaceholderSelection> {
    if placeholder_y >= test_scores.len() {
        return Err(Error::Invalid(format!(
            "placeholder label {placeholder_y} out of range for {} scores",
            test_scores.len()
        )));
    }
    let ctx = SelectionContext::new_classification(calib, calib_scores, alpha, test_level)?;
    ctx.select_placeholder(test_scores[placeholder_y], test_attrs, false, false)
}

/// One-shot two-attribute selection for one placeholder label.
pub fn select_two_attributes(
    calib: &Dataset,
    calib_scores: &ScoreTensor,
    test_scores: &[f64],
    test_attrs: &[u32],
    placeholder_y: usize,
    alpha: f64,
    test_level: f64,
) -> Result<PlaceholderSelection> {
    if placeholder_y >= test_scores.len() {
        return Err(Error::Invalid(format!(
            "placeholder label {placeholder_y} out of range for {} scores",
            test_scores.len()
        )));
    }
    let ctx = SelectionContext::new_classification(calib, calib_scores, alpha, test_level)?;
    ctx.select_placeholder(test_scores[placeholder_y], test_attrs, true, false)
}

/// One-shot outlier-detection selection with up to `j_max` picks.
pub fn select_attribute_od(
    calib: &Dataset,
    calib_scores: &[f64],
    test_score: f64,
    test_attrs: &[u32],
    alpha: f64,
    test_level: f64,
    j_max: usize,
) -> Result<PlaceholderSelection> {
    let ctx = SelectionContext::new_outlier(calib, calib_scores, alpha, test_level)?;
    ctx.select_outlier(test_score, test_attrs, j_max, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::AttributeDef;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn dataset_with(own_scores_len: usize, attrs: Vec<Vec<u32>>, levels: Vec<usize>) -> Dataset {
        let n = own_scores_len;
        let k = levels.len();
        let mut matrix = Array2::zeros((n, k));
        for (i, row) in attrs.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                matrix[[i, j]] = v;
            }
        }
        let spec = AttributeSpec::new(
            levels
                .iter()
                .enumerate()
                .map(|(j, &m)| AttributeDef::new(format!("A{j}"), m, j))
                .collect(),
        )
        .unwrap();
        Dataset::new(
            Array2::zeros((n, 1)),
            matrix,
            Some(vec![0; n]),
            2,
            spec,
        )
        .unwrap()
    }

    fn tensor_of(own: &[f64]) -> ScoreTensor {
        let mut values = Array2::zeros((own.len(), 2));
        for (i, &s) in own.iter().enumerate() {
            values[[i, 0]] = s;
        }
        ScoreTensor::from_values(values, vec![0.5; own.len()]).unwrap()
    }

    #[test]
    fn ttest_matches_hand_computation() {
        let t = significance_test(&[1, 0, 0, 1], 0.1, 0.05).unwrap();
        assert!((t.statistic - 1.3856406460551018).abs() < 1e-9, "{}", t.statistic);
        assert_eq!(t.df, 3);
        assert!(!t.rejected, "t = {} below the critical value 2.3534", t.statistic);

        let all_ones = significance_test(&[1, 1, 1], 0.1, 0.05).unwrap();
        assert!(all_ones.rejected);
        assert!(all_ones.statistic.is_infinite());

        let all_zeros = significance_test(&[0, 0, 0], 0.1, 0.05).unwrap();
        assert!(!all_zeros.rejected);

        assert!(significance_test(&[], 0.1, 0.05).is_err());
    }

    #[test]
    fn worst_rates_example() {
        // level 0: E = (1,0,0,1); level 1: E = (0,0,0,0,0,1)
        let e = [1u8, 0, 0, 1, 0, 0, 0, 0, 0, 1];
        let mut attrs = Array2::zeros((10, 1));
        for i in 4..10 {
            attrs[[i, 0]] = 1;
        }
        let spec = AttributeSpec::new(vec![AttributeDef::new("G", 2, 0)]).unwrap();
        let rates = worst_group_rates(&e, &attrs, &spec).unwrap();
        assert_eq!(rates.delta, vec![0.5]);
        assert_eq!(rates.argmax_level, vec![0]);

        let all_zero = worst_group_rates(&[0, 0, 0], &Array2::zeros((3, 1)), &spec).unwrap();
        assert_eq!(all_zero.delta, vec![0.0]);

        // a single-member level with E=1 dominates
        let e = [0u8, 0, 1];
        let mut attrs = Array2::zeros((3, 1));
        attrs[[2, 0]] = 1;
        let rates = worst_group_rates(&e, &attrs, &spec).unwrap();
        assert_eq!(rates.delta, vec![1.0]);
        assert_eq!(rates.argmax_level, vec![1]);
    }

    #[test]
    fn loo_degenerate_and_boundary() {
        // no calibration data: the probe's p-value is 1, never flagged
        let empty = dataset_with(0, vec![], vec![2]);
        let tensor = tensor_of(&[]);
        let e = loo_miscoverage(&empty, &tensor, &[0.5, 0.5], 0, 0.1).unwrap();
        assert_eq!(e, vec![0]);

        // lowest of ten augmented scores sits exactly at p = 0.1: covered
        let own: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let data = dataset_with(9, vec![vec![0]; 9], vec![2]);
        let e = loo_miscoverage(&data, &tensor_of(&own), &[0.95, 0.95], 0, 0.1).unwrap();
        assert_eq!(e, vec![0; 10]);
    }

    /// Literal reimplementation of one selection pass used as an oracle:
    /// builds every leave-one-out pool explicitly.
    #[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
    fn oracle_pass(
        calib: &Dataset,
        tensor: &ScoreTensor,
        probe: f64,
        test_attrs: &[u32],
        candidates: &[usize],
        alpha: f64,
        test_level: f64,
        outlier: bool,
    ) -> (Vec<u8>, Vec<f64>, f64, Option<usize>) {
        let labels = calib.labels().unwrap();
        let n = calib.n();
        let own: Vec<f64> = (0..n).map(|i| tensor.score(i, labels[i])).collect();
        let mut e = Vec::with_capacity(n + 1);
        for i in 0..n {
            let mut pool: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| own[j]).collect();
            pool.push(probe);
            let le = pool.iter().filter(|&&s| s <= own[i]).count();
            let u = (1 + le) as f64 / (1 + pool.len()) as f64;
            e.push(u8::from(if outlier { u <= alpha } else { u < alpha }));
        }
        let le = own.iter().filter(|&&s| s <= probe).count();
        let u = (1 + le) as f64 / (1 + n) as f64;
        e.push(u8::from(if outlier { u <= alpha } else { u < alpha }));

        let mut delta = Vec::new();
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for &k in candidates {
            let levels = calib.spec().level_count(k).unwrap();
            let mut k_best: Option<(f64, usize, usize)> = None;
            for lvl in 0..levels {
                let mut ones = 0usize;
                let mut size = 0usize;
                for i in 0..n {
                    if calib.attr_row(i)[k] as usize == lvl {
                        size += 1;
                        ones += e[i] as usize;
                    }
                }
                if test_attrs[k] as usize == lvl {
                    size += 1;
                    ones += e[n] as usize;
                }
                if size == 0 {
                    continue;
                }
                let mean = ones as f64 / size as f64;
                if k_best.is_none() || mean > k_best.unwrap().0 {
                    k_best = Some((mean, ones, size));
                }
            }
            let (mean, ones, size) = k_best.unwrap();
            delta.push(mean);
            if best.is_none() || mean > best.unwrap().0 {
                best = Some((mean, k, ones, size));
            }
        }
        match best {
            None => (e, delta, 0.0, None),
            Some((qhat, k, ones, size)) => {
                let t = significance_test_from_counts(ones, size, alpha, test_level);
                (e, delta, qhat, t.rejected.then_some(k))
            }
        }
    }

    #[test]
    fn biased_group_is_selected() {
        // group 0 records rank lowest, so their leave-one-out p-values all
        // fall below alpha and the attribute is flagged
        let mut own = vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.06];
        let mut attrs = vec![vec![0u32]; 6];
        for i in 0..14 {
            own.push(0.1 + 0.06 * i as f64);
            attrs.push(vec![1]);
        }
        let data = dataset_with(20, attrs, vec![2]);
        let tensor = tensor_of(&own);
        let sel = select_attribute(&data, &tensor, &[0.5, 0.5], &[1], 0, 0.3, 0.05).unwrap();
        assert_eq!(sel.subset, vec![0]);
        let pass = &sel.passes[0];
        assert_eq!(pass.delta[0], 1.0);
        assert_eq!(pass.argmax, Some((0, 0)));
        assert!(pass.ttest.unwrap().rejected);
    }

    #[test]
    fn k_zero_selects_nothing() {
        let data = Dataset::new(
            Array2::zeros((5, 1)),
            Array2::zeros((5, 0)),
            Some(vec![0; 5]),
            2,
            AttributeSpec::empty(),
        )
        .unwrap();
        let tensor = tensor_of(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let sel = select_attribute(&data, &tensor, &[0.05, 0.05], &[], 0, 0.1, 0.05).unwrap();
        assert!(sel.subset.is_empty());
        assert!(sel.passes[0].ttest.is_none());
        assert_eq!(sel.passes[0].qhat, 0.0);
    }

    #[test]
    fn two_attribute_selection_composes() {
        // both attributes carry the same bias, so the second pass picks the
        // other one
        let mut own = vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.06];
        let mut attrs = vec![vec![0u32, 0]; 6];
        for i in 0..14 {
            own.push(0.1 + 0.06 * i as f64);
            attrs.push(vec![1, 1]);
        }
        let data = dataset_with(20, attrs, vec![2, 2]);
        let tensor = tensor_of(&own);
        let sel =
            select_two_attributes(&data, &tensor, &[0.5, 0.5], &[1, 1], 0, 0.3, 0.05).unwrap();
        assert_eq!(sel.subset, vec![0, 1]);
        assert_eq!(sel.passes.len(), 2);
        assert_eq!(sel.passes[1].candidates, vec![1]);

        // an unbiased instance stops after the first pass
        let own: Vec<f64> = (1..=20).map(|i| i as f64 / 21.0).collect();
        let attrs: Vec<Vec<u32>> = (0..20).map(|i| vec![(i % 2) as u32, 0]).collect();
        let data = dataset_with(20, attrs, vec![2, 2]);
        let sel = select_two_attributes(&data, &tensor_of(&own), &[0.5, 0.5], &[0, 0], 0, 0.1, 0.05)
            .unwrap();
        assert!(sel.subset.is_empty());
        assert_eq!(sel.passes.len(), 1);
    }

    #[test]
    fn outlier_selection_multi_pick() {
        let mut scores = vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.06];
        let mut attrs = vec![vec![0u32, 0]; 6];
        for i in 0..14 {
            scores.push(0.1 + 0.06 * i as f64);
            attrs.push(vec![1, 1]);
        }
        let data = dataset_with(20, attrs, vec![2, 2]);
        let sel = select_attribute_od(&data, &scores, 0.5, &[1, 1], 0.3, 0.05, 2).unwrap();
        assert_eq!(sel.subset, vec![0, 1]);

        // uniform spread with small alpha: nothing flagged, nothing picked
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 11.0).collect();
        let attrs: Vec<Vec<u32>> = (0..10).map(|i| vec![(i % 2) as u32, 0]).collect();
        let data = dataset_with(10, attrs, vec![2, 2]);
        let sel = select_attribute_od(&data, &scores, 0.99, &[0, 0], 0.05, 0.05, 2).unwrap();
        assert!(sel.subset.is_empty());
        assert_eq!(sel.passes.len(), 1);
    }

    #[test]
    fn loo_rejections_use_inclusive_alpha() {
        // ten calibration scores, probe above all: every p-value is a lattice
        // point k/11; at alpha = 1/11 the smallest is flagged only by <=
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let e = loo_rejections(&scores, 0.99, 1.0 / 11.0);
        assert_eq!(e[0], 1);
        assert_eq!(e[1..].iter().map(|&v| v as usize).sum::<usize>(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]
        #[test]
        fn fast_path_equals_literal_oracle(
            raw_scores in proptest::collection::vec(0u8..10, 1..28),
            attr_seed in proptest::collection::vec(0u8..6, 1..28),
            levels in proptest::collection::vec(2usize..4, 1..3),
            probe_raw in 0u8..10,
            alpha_pick in 0usize..4,
            outlier in proptest::bool::ANY
        ) {
            let n = raw_scores.len().min(attr_seed.len());
            let own: Vec<f64> = raw_scores[..n].iter().map(|&v| v as f64 / 9.0).collect();
            let k = levels.len();
            let attrs: Vec<Vec<u32>> = (0..n)
                .map(|i| {
                    (0..k)
                        .map(|j| (attr_seed[i] as usize + j) as u32 % levels[j] as u32)
                        .collect()
                })
                .collect();
            let data = dataset_with(n, attrs, levels.clone());
            let tensor = tensor_of(&own);
            let probe = probe_raw as f64 / 9.0;
            let test_attrs: Vec<u32> = levels.iter().map(|&m| (m - 1) as u32).collect();
            let alpha = [0.05, 0.1, 0.25, 0.4][alpha_pick];
            let candidates: Vec<usize> = (0..k).collect();

            let (oracle_e, oracle_delta, oracle_qhat, oracle_pick) = oracle_pass(
                &data, &tensor, probe, &test_attrs, &candidates, alpha, 0.05, outlier,
            );

            if outlier {
                let e = loo_rejections(&own, probe, alpha);
                prop_assert_eq!(&e, &oracle_e);
                let ctx = SelectionContext::new_outlier(&data, &own, alpha, 0.05).unwrap();
                let pass = ctx.select_pass(probe, &test_attrs, &candidates, false).unwrap();
                prop_assert_eq!(&pass.delta, &oracle_delta);
                prop_assert_eq!(pass.qhat, oracle_qhat);
                prop_assert_eq!(pass.selected, oracle_pick);
            } else {
                let e = loo_miscoverage(&data, &tensor, &[probe, probe], 0, alpha).unwrap();
                prop_assert_eq!(&e, &oracle_e);
                let ctx = SelectionContext::new_classification(&data, &tensor, alpha, 0.05).unwrap();
                let pass = ctx.select_pass(probe, &test_attrs, &candidates, false).unwrap();
                prop_assert_eq!(&pass.delta, &oracle_delta);
                prop_assert_eq!(pass.qhat, oracle_qhat);
                prop_assert_eq!(pass.selected, oracle_pick);
            }
        }

        #[test]
        fn selection_is_permutation_invariant(
            raw_scores in proptest::collection::vec(0u32..1000, 5..25),
            seed in 0u64..100
        ) {
            let n = raw_scores.len();
            let own: Vec<f64> = raw_scores.iter().map(|&v| v as f64 / 999.0).collect();
            let attrs: Vec<Vec<u32>> = (0..n).map(|i| vec![(i % 2) as u32, (i % 3) as u32]).collect();
            let data = dataset_with(n, attrs, vec![2, 3]);
            let tensor = tensor_of(&own);
            let sel = select_attribute(&data, &tensor, &[0.3, 0.3], &[0, 1], 0, 0.2, 0.05).unwrap();

            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut crate::rng::stream(seed, "perm", 0));
            let pdata = data.subset(&perm);
            let pown: Vec<f64> = perm.iter().map(|&i| own[i]).collect();
            let psel = select_attribute(&pdata, &tensor_of(&pown), &[0.3, 0.3], &[0, 1], 0, 0.2, 0.05)
                .unwrap();

            prop_assert_eq!(&sel.subset, &psel.subset);
            prop_assert_eq!(&sel.passes[0].delta, &psel.passes[0].delta);
            prop_assert_eq!(sel.passes[0].qhat, psel.passes[0].qhat);
        }

        #[test]
        fn duplication_moves_rates_slowly(
            raw_scores in proptest::collection::vec(0u32..100_000, 30..60),
        ) {
            // distinct, well-spread scores on balanced groups: doubling the
            // calibration set must move each worst-group rate by O(1/n)
            let mut seen = std::collections::HashSet::new();
            let own: Vec<f64> = raw_scores
                .iter()
                .enumerate()
                .map(|(i, &v)| (v as f64 + (i as f64) / 64.0) / 100_000.0)
                .filter(|v| seen.insert(v.to_bits()))
                .collect();
            let n = own.len();
            prop_assume!(n >= 30);
            let attrs: Vec<Vec<u32>> = (0..n).map(|i| vec![(i % 2) as u32]).collect();
            let data = dataset_with(n, attrs.clone(), vec![2]);
            let tensor = tensor_of(&own);
            let sel = select_attribute(&data, &tensor, &[0.5, 0.5], &[0], 0, 0.1, 0.05).unwrap();

            let mut own2 = own.clone();
            own2.extend_from_slice(&own);
            let mut attrs2 = attrs.clone();
            attrs2.extend_from_slice(&attrs);
            let data2 = dataset_with(2 * n, attrs2, vec![2]);
            let sel2 = select_attribute(&data2, &tensor_of(&own2), &[0.5, 0.5], &[0], 0, 0.1, 0.05)
                .unwrap();

            let tol = 10.0 / (n as f64 + 1.0);
            prop_assert!((sel.passes[0].delta[0] - sel2.passes[0].delta[0]).abs() <= tol,
                "delta moved from {} to {}", sel.passes[0].delta[0], sel2.passes[0].delta[0]);
        }
    }

    #[test]
    fn final_selection_is_an_intersection() {
        assert_eq!(select_final(&[vec![0], vec![0], vec![0]]), vec![0]);
        assert_eq!(select_final(&[vec![0], vec![]]), Vec::<usize>::new());
        assert_eq!(select_final(&[vec![0], vec![1]]), Vec::<usize>::new());
        assert_eq!(select_final(&[vec![0, 1], vec![1, 0]]), vec![0, 1]);
        assert_eq!(select_final(&[]), Vec::<usize>::new());
    }
}
