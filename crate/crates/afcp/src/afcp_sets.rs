//! Final prediction-set and p-value constructions: the adaptive method, its
//! variants (always-select, two-attribute, label-conditional, outlier), and
//! the marginal / exhaustive / partial benchmarks.
//!
//! [`Evaluator`] and [`OutlierEvaluator`] front-load the per-calibration-set
//! work (selection state plus sorted score pools per group) so that many
//! test points can be evaluated cheaply and in parallel. The one-shot free
//! functions build a throwaway evaluator and are convenient for single
//! predictions.

use std::collections::HashMap;

use crate::afcp_select::{PlaceholderSelection, SelectionContext, SelectionResult};
use crate::conformal_core::{add_comparisons, search_cost, sort_cost, PredictionSet, Provenance};
use crate::data_model::{phi, AttributeSpec, Dataset};
use crate::scores::ScoreTensor;
use crate::{Error, Result};

/// Result of an adaptive classification method: the final selected subset,
/// the prediction set, the unioned components (each carrying its
/// provenance), and the full selection diagnostics.
#[derive(Debug, Clone)]
pub struct AfcpOutput {
    pub selected: Vec<usize>,
    pub set: PredictionSet,
    pub components: Vec<PredictionSet>,
    pub selection: SelectionResult,
}

/// Result of the adaptive outlier method: the selected subset and the
/// conformal p-value computed on the matching group pool.
#[derive(Debug, Clone)]
pub struct AfcpOutlierOutput {
    pub selected: Vec<usize>,
    pub pvalue: f64,
    pub selection: PlaceholderSelection,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct PoolKey {
    subset: Vec<usize>,
    values: Vec<u32>,
    label: Option<usize>,
}

/// Which constructions an [`Evaluator`] should prepare pools for.
#[derive(Debug, Clone)]
pub struct EvaluatorOptions {
    pub test_level: f64,
    /// Prepare the all-attributes pools for the exhaustive benchmark.
    pub exhaustive: bool,
    /// Prepare attribute-pair pools for the two-attribute variant.
    pub two_attributes: bool,
    /// Prepare label-restricted state for the label-conditional variant.
    pub label_conditional: bool,
}

impl Default for EvaluatorOptions {
    fn default() -> Self {
        Self {
            test_level: 0.05,
            exhaustive: true,
            two_attributes: false,
            label_conditional: false,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn singletons(k: usize) -> Vec<Vec<usize>> {
    (0..k).map(|i| vec![i]).collect()
}

fn pairs(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 0..k {
        for b in (a + 1)..k {
            out.push(vec![a, b]);
        }
    }
    out
}

/// All subsets of [k] with 1..=max_size elements.
fn subsets_up_to(k: usize, max_size: usize) -> Result<Vec<Vec<usize>>> {
    if k > 20 {
        return Err(Error::Invalid(format!(
            "{k} attributes is too many to enumerate protected subsets for"
        )));
    }
    let mut out = Vec::new();
    for mask in 1u32..(1 << k) {
        if (mask.count_ones() as usize) <= max_size {
            out.push((0..k).filter(|&i| mask >> i & 1 == 1).collect());
        }
    }
    Ok(out)
}

/// Sorted own-score pools keyed by (protected subset, group values, optional
/// label restriction), plus the partition bookkeeping to build them.
fn build_pools(
    calib: &Dataset,
    own: &[f64],
    subsets: &[Vec<usize>],
    labels: Option<&[usize]>,
    pools: &mut HashMap<PoolKey, Vec<f64>>,
) -> Result<()> {
    for subset in subsets {
        let mut by_key: HashMap<PoolKey, Vec<f64>> = HashMap::new();
        for i in 0..calib.n() {
            let key = phi(calib.attr_row(i), subset)?;
            let label = labels.map(|l| l[i]);
            by_key
                .entry(PoolKey {
                    subset: key.subset().to_vec(),
                    values: key.values().to_vec(),
                    label,
                })
                .or_default()
                .push(own[i]);
        }
        add_comparisons(calib.n() as u64);
        for (key, mut pool) in by_key {
            pool.sort_unstable_by(f64::total_cmp);
            add_comparisons(sort_cost(pool.len()));
            pools.insert(key, pool);
        }
    }
    Ok(())
}

static EMPTY_POOL: &[f64] = &[];

fn pool_pvalue(pool: &[f64], score: f64) -> f64 {
    let le = pool.partition_point(|&v| v <= score);
    add_comparisons(search_cost(pool.len()));
    (1 + le) as f64 / (1 + pool.len()) as f64
}

/// Per-calibration-set classification evaluator. Owns everything it needs,
/// so it can be shared read-only across threads.
pub struct Evaluator {
    spec: AttributeSpec,
    label_count: usize,
    alpha: f64,
    ctx: SelectionContext,
    lc_ctx: Vec<SelectionContext>,
    pools: HashMap<PoolKey, Vec<f64>>,
    options: EvaluatorOptions,
}

impl Evaluator {
    pub fn new(
        calib: &Dataset,
        calib_scores: &ScoreTensor,
        alpha: f64,
        options: EvaluatorOptions,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let Some(labels) = calib.labels() else {
            return Err(Error::Invalid("classification needs calibration labels".into()));
        };
        let ctx = SelectionContext::new_classification(calib, calib_scores, alpha, options.test_level)?;
        let own = calib_scores.own_scores(labels)?;
        let k = calib.attribute_count();

        let mut subsets = vec![Vec::new()];
        subsets.extend(singletons(k));
        if options.two_attributes {
            subsets.extend(pairs(k));
        }
        if options.exhaustive && k > 1 {
            subsets.push((0..k).collect());
        }
        let mut pools = HashMap::new();
        build_pools(calib, &own, &subsets, None, &mut pools)?;

        let mut lc_ctx = Vec::new();
        if options.label_conditional {
            let mut lc_subsets = vec![Vec::new()];
            lc_subsets.extend(singletons(k));
            for y in 0..calib.label_count() {
                let idx: Vec<usize> = (0..calib.n()).filter(|&i| labels[i] == y).collect();
                let sub = calib.subset(&idx);
                let sub_values = calib_scores.values().select(ndarray::Axis(0), &idx);
                let sub_draws: Vec<f64> = idx.iter().map(|&i| calib_scores.draws()[i]).collect();
                let sub_tensor = ScoreTensor::from_values(sub_values, sub_draws)?;
                lc_ctx.push(SelectionContext::new_classification(
                    &sub,
                    &sub_tensor,
                    alpha,
                    options.test_level,
                )?);
                let sub_labels = vec![y; idx.len()];
                let sub_own = sub_tensor.own_scores(&sub_labels)?;
                build_pools(&sub, &sub_own, &lc_subsets, Some(&sub_labels), &mut pools)?;
            }
        }

        Ok(Self {
            spec: calib.spec().clone(),
            label_count: calib.label_count(),
            alpha,
            ctx,
            lc_ctx,
            pools,
            options,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn check_test(&self, test_scores: &[f64], test_attrs: &[u32]) -> Result<()> {
        if test_scores.len() != self.label_count {
            return Err(Error::Shape(format!(
                "test point has {} scores but the calibration tensor has {} labels",
                test_scores.len(),
                self.label_count
            )));
        }
        self.spec.validate_row(test_attrs)
    }

    /// Conformal set calibrated on the group (and optionally label)
    /// restricted pool matching the test point.
    fn set_for(
        &self,
        test_scores: &[f64],
        test_attrs: &[u32],
        subset: &[usize],
        label: Option<usize>,
    ) -> Result<PredictionSet> {
        let key = phi(test_attrs, subset)?;
        let pool = self
            .pools
            .get(&PoolKey {
                subset: key.subset().to_vec(),
                values: key.values().to_vec(),
                label,
            })
            .map(Vec::as_slice)
            .unwrap_or(EMPTY_POOL);
        let labels: Vec<usize> = (0..test_scores.len())
            .filter(|&y| pool_pvalue(pool, test_scores[y]) >= self.alpha)
            .collect();
        let provenance = match (key.is_marginal(), label) {
            (true, None) => Provenance::Marginal,
            (false, None) => Provenance::Group(key),
            (true, Some(y)) => Provenance::LabelMarginal { label: y },
            (false, Some(y)) => Provenance::LabelGroup { label: y, key },
        };
        Ok(PredictionSet::new(labels, provenance))
    }

    pub fn marginal(&self, test_scores: &[f64]) -> Result<PredictionSet> {
        if test_scores.len() != self.label_count {
            return Err(Error::Shape(format!(
                "test point has {} scores but the calibration tensor has {} labels",
                test_scores.len(),
                self.label_count
            )));
        }
        self.set_for(test_scores, &vec![0; self.spec.len()], &[], None)
    }

    pub fn exhaustive(&self, test_scores: &[f64], test_attrs: &[u32]) -> Result<PredictionSet> {
        self.check_test(test_scores, test_attrs)?;
        let all: Vec<usize> = (0..self.spec.len()).collect();
        self.set_for(test_scores, test_attrs, &all, None)
    }

    pub fn partial(&self, test_scores: &[f64], test_attrs: &[u32]) -> Result<PredictionSet> {
        self.check_test(test_scores, test_attrs)?;
        if self.spec.is_empty() {
            return self.set_for(test_scores, test_attrs, &[], None);
        }
        let mut components = Vec::with_capacity(self.spec.len());
        for k in 0..self.spec.len() {
            components.push(self.set_for(test_scores, test_attrs, &[k], None)?);
        }
        Ok(PredictionSet::union(components))
    }

    /// The adaptive method: per-placeholder selection, group-calibrated
    /// component sets, marginal fallback, and their union. With
    /// `always_select`, the significance test is skipped and the argmax
    /// attribute is taken directly.
    pub fn afcp(
        &self,
        test_scores: &[f64],
        test_attrs: &[u32],
        always_select: bool,
    ) -> Result<AfcpOutput> {
        self.check_test(test_scores, test_attrs)?;
        let selection =
            self.ctx
                .select_classification(test_scores, test_attrs, false, always_select)?;
        self.union_output(test_scores, test_attrs, selection, false)
    }

    /// The two-attribute variant: selection may pick a second attribute, the
    /// union adds single-attribute equalized sets for every picked one.
    pub fn afcp_plus(&self, test_scores: &[f64], test_attrs: &[u32]) -> Result<AfcpOutput> {
        if !self.options.two_attributes {
            return Err(Error::Config(
                "evaluator was built without two_attributes support".into(),
            ));
        }
        self.check_test(test_scores, test_attrs)?;
        let selection = self.ctx.select_classification(test_scores, test_attrs, true, false)?;
        self.union_output(test_scores, test_attrs, selection, true)
    }

    fn union_output(
        &self,
        test_scores: &[f64],
        test_attrs: &[u32],
        selection: SelectionResult,
        add_equalized: bool,
    ) -> Result<AfcpOutput> {
        let marginal = self.set_for(test_scores, test_attrs, &[], None)?;
        let mut components = vec![marginal];
        let mut seen: Vec<Vec<usize>> = vec![Vec::new()];
        for placeholder in &selection.per_placeholder {
            if placeholder.subset.is_empty() || seen.contains(&placeholder.subset) {
                continue;
            }
            seen.push(placeholder.subset.clone());
            components.push(self.set_for(test_scores, test_attrs, &placeholder.subset, None)?);
        }
        if add_equalized {
            let mut picked: Vec<usize> = selection
                .per_placeholder
                .iter()
                .flat_map(|p| p.subset.iter().copied())
                .collect();
            picked.sort_unstable();
            picked.dedup();
            for l in picked {
                if !seen.contains(&vec![l]) {
                    seen.push(vec![l]);
                    components.push(self.set_for(test_scores, test_attrs, &[l], None)?);
                }
            }
        }
        let set = if components.len() == 1 {
            components[0].clone()
        } else {
            PredictionSet::union(components.clone())
        };
        Ok(AfcpOutput {
            selected: selection.final_subset.clone(),
            set,
            components,
            selection,
        })
    }

    /// The label-conditional variant: selection and both component sets are
    /// calibrated on the label-restricted subsets.
    pub fn afcp_label_conditional(
        &self,
        test_scores: &[f64],
        test_attrs: &[u32],
    ) -> Result<AfcpOutput> {
        if !self.options.label_conditional {
            return Err(Error::Config(
                "evaluator was built without label_conditional support".into(),
            ));
        }
        self.check_test(test_scores, test_attrs)?;
        let mut per_placeholder = Vec::with_capacity(self.label_count);
        let mut components = Vec::new();
        let mut seen: Vec<(Vec<usize>, usize)> = Vec::new();
        for y in 0..self.label_count {
            let placeholder =
                self.lc_ctx[y].select_placeholder(test_scores[y], test_attrs, false, false)?;
            components.push(self.set_for(test_scores, test_attrs, &[], Some(y))?);
            if !placeholder.subset.is_empty() {
                let entry = (placeholder.subset.clone(), y);
                if !seen.contains(&entry) {
                    seen.push(entry);
                    components.push(self.set_for(
                        test_scores,
                        test_attrs,
                        &placeholder.subset,
                        Some(y),
                    )?);
                }
            }
            per_placeholder.push(placeholder);
        }
        let subsets: Vec<Vec<usize>> = per_placeholder.iter().map(|p| p.subset.clone()).collect();
        let final_subset = crate::afcp_select::select_final(&subsets);
        let set = PredictionSet::union(components.clone());
        Ok(AfcpOutput {
            selected: final_subset.clone(),
            set,
            components,
            selection: SelectionResult {
                per_placeholder,
                final_subset,
            },
        })
    }
}

/// Per-calibration-set outlier evaluator; the calibration pool must contain
/// inliers only, which is the caller's responsibility.
pub struct OutlierEvaluator {
    spec: AttributeSpec,
    alpha: f64,
    ctx: SelectionContext,
    pools: HashMap<PoolKey, Vec<f64>>,
    j_max: usize,
}

impl OutlierEvaluator {
    pub fn new(
        calib_inliers: &Dataset,
        calib_scores: &[f64],
        alpha: f64,
        test_level: f64,
        j_max: usize,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        if j_max == 0 {
            return Err(Error::Invalid("j_max must be at least 1".into()));
        }
        let ctx = SelectionContext::new_outlier(calib_inliers, calib_scores, alpha, test_level)?;
        let k = calib_inliers.attribute_count();
        let mut subsets = vec![Vec::new()];
        subsets.extend(subsets_up_to(k, j_max.max(1))?);
        if k > 1 {
            subsets.push((0..k).collect());
        }
        subsets.sort();
        subsets.dedup();
        let mut pools = HashMap::new();
        build_pools(calib_inliers, calib_scores, &subsets, None, &mut pools)?;
        Ok(Self {
            spec: calib_inliers.spec().clone(),
            alpha,
            ctx,
            pools,
            j_max,
        })
    }

    fn pvalue_for(&self, test_score: f64, test_attrs: &[u32], subset: &[usize]) -> Result<f64> {
        let key = phi(test_attrs, subset)?;
        let pool = self
            .pools
            .get(&PoolKey {
                subset: key.subset().to_vec(),
                values: key.values().to_vec(),
                label: None,
            })
            .map(Vec::as_slice)
            .unwrap_or(EMPTY_POOL);
        Ok(pool_pvalue(pool, test_score))
    }

    pub fn marginal_pvalue(&self, test_score: f64) -> f64 {
        self.pvalue_for(test_score, &vec![0; self.spec.len()], &[])
            .expect("the marginal pool always exists")
    }

    pub fn exhaustive_pvalue(&self, test_score: f64, test_attrs: &[u32]) -> Result<f64> {
        self.spec.validate_row(test_attrs)?;
        let all: Vec<usize> = (0..self.spec.len()).collect();
        self.pvalue_for(test_score, test_attrs, &all)
    }

    /// Maximum of the per-attribute equalized p-values (the marginal
    /// p-value when there are no attributes).
    pub fn partial_pvalue(&self, test_score: f64, test_attrs: &[u32]) -> Result<f64> {
        self.spec.validate_row(test_attrs)?;
        if self.spec.is_empty() {
            return self.pvalue_for(test_score, test_attrs, &[]);
        }
        let mut best = f64::NEG_INFINITY;
        for k in 0..self.spec.len() {
            best = best.max(self.pvalue_for(test_score, test_attrs, &[k])?);
        }
        Ok(best)
    }

    /// The adaptive method: iterated selection of up to the configured
    /// number of attributes, then the conformal p-value on their group pool.
    pub fn afcp(&self, test_score: f64, test_attrs: &[u32]) -> Result<AfcpOutlierOutput> {
        self.afcp_with(test_score, test_attrs, false)
    }

    /// Always-select variant: each selection pass takes its argmax attribute
    /// without the significance gate.
    pub fn afcp_always(&self, test_score: f64, test_attrs: &[u32]) -> Result<AfcpOutlierOutput> {
        self.afcp_with(test_score, test_attrs, true)
    }

    fn afcp_with(
        &self,
        test_score: f64,
        test_attrs: &[u32],
        skip_test: bool,
    ) -> Result<AfcpOutlierOutput> {
        self.spec.validate_row(test_attrs)?;
        let selection = self
            .ctx
            .select_outlier(test_score, test_attrs, self.j_max, skip_test)?;
        let pvalue = self.pvalue_for(test_score, test_attrs, &selection.subset)?;
        Ok(AfcpOutlierOutput {
            selected: selection.subset.clone(),
            pvalue,
            selection,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Marginal conformal prediction set (no protected attributes).
pub fn marginal_set(
    calib: &Dataset,
    calib_scores: &ScoreTensor,
    test_scores: &[f64],
    alpha: f64,
) -> Result<PredictionSet> {
    let eval = Evaluator::new(
        calib,
        calib_scores,
        alpha,
        EvaluatorOptions {
            exhaustive: false,
            ..EvaluatorOptions::default()
        },
    )?;
    eval.marginal(test_scores)
}

/// Conformal set calibrated on the full crossing of every attribute.
pub fn exhaustive_set(
    calib: &Dataset,
    calib_scores: &ScoreTensor,
    test_scores: &[f64],
    test_attrs: &[u32],
    alpha: f64,
) -> Result<PredictionSet> {
    let eval = Evaluator::new(calib, calib_scores, alpha, EvaluatorOptions::default())?;
    eval.exhaustive(test_scores, test_attrs)
}

/// Union of the per-attribute equalized sets.
pub fn partial_set(
    calib: &Dataset,
    calib_scores: &ScoreTensor,
    test_scores: &[f64],
    test_attrs: &[u32],
    alpha: f64,
) -> Result<PredictionSet> {
    let eval = Evaluator::new(
        calib,
        calib_scores,
        alpha,
        EvaluatorOptions {
            exhaustive: false,
            ..EvaluatorOptions::default()
        },
    )?;
    eval.partial(test_scores, test_attrs)
}

/// One-shot adaptive classification.
pub fn afcp_classify(
    calib: &Dataset,
    calib_scores: &ScoreTensor,
    test_scores: &[f64],
    test_attrs: &[u32],
    alpha: f64,
    test_level: f64,
    always_select: bool,
) -> Result<AfcpOutput> {
    let eval = Evaluator::new(
        calib,
        calib_scores,
        alpha,
        EvaluatorOptions {
            test_level,
            exhaustive: false,
            ..EvaluatorOptions::default()
        },
    )?;
    eval.afcp(test_scores, test_attrs, always_select)
}

/// One-shot two-attribute adaptive classification.
pub fn afcp_plus_classify(
    calib: &Dataset,
    calib_scores: &ScoreTensor,
    test_scores: &[f64],
    test_attrs: &[u32],
    alpha: f64,
    test_level: f64,
) -> Result<AfcpOutput> {
    let eval = Evaluator::new(
        calib,
        calib_scores,
        alpha,
        EvaluatorOptions {
            test_level,
            exhaustive: false,
            two_attributes: true,
            ..EvaluatorOptions::default()
        },
    )?;
    eval.afcp_plus(test_scores, test_attrs)
}

/// One-shot label-conditional adaptive classification.
pub fn afcp_label_conditional(
    calib: &Dataset,
    calib_scores: &ScoreTensor,
    test_scores: &[f64],
    test_attrs: &[u32],
    alpha: f64,
    test_level: f64,
) -> Result<AfcpOutput> {
    let eval = Evaluator::new(
        calib,
        calib_scores,
        alpha,
        EvaluatorOptions {
            test_level,
            exhaustive: false,
            label_conditional: true,
            ..EvaluatorOptions::default()
        },
    )?;
    eval.afcp_label_conditional(test_scores, test_attrs)
}

/// One-shot adaptive outlier p-value with up to `j_max` selected attributes.
pub fn afcp_outlier(
    calib_inliers: &Dataset,
    calib_scores: &[f64],
    test_score: f64,
    test_attrs: &[u32],
    alpha: f64,
    test_level: f64,
    j_max: usize,
) -> Result<AfcpOutlierOutput> {
    let eval = OutlierEvaluator::new(calib_inliers, calib_scores, alpha, test_level, j_max)?;
    eval.afcp(test_score, test_attrs)
}

/// One-shot partial (max over single-attribute) outlier p-value.
pub fn partial_outlier_pvalue(
    calib_inliers: &Dataset,
    calib_scores: &[f64],
    test_score: f64,
    test_attrs: &[u32],
    alpha: f64,
) -> Result<f64> {
    let eval = OutlierEvaluator::new(calib_inliers, calib_scores, alpha, 0.05, 1)?;
    eval.partial_pvalue(test_score, test_attrs)
}
