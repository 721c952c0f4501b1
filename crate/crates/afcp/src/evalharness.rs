//! Monte Carlo experiment harness: repeated generate / split / fit /
//! calibrate / evaluate cycles with per-group metrics, selection
//! frequencies, and standard errors over repetitions.
//!
//! Repetitions run in parallel on the rayon pool, but every repetition
//! derives its own RNG substream from the master seed by counter, so the
//! resulting table is a pure function of the configuration and seed no
//! matter how many workers participate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::afcp_sets::{Evaluator, EvaluatorOptions, OutlierEvaluator};
use crate::conformal_core::PredictionSet;
use crate::data_model::{split_train_calib, AttributeSpec, Dataset, GroupKey};
use crate::model::{fit_oneclass, fit_softmax_mlp, MlpConfig, OneClassModel};
use crate::rng::stream;
use crate::scores::score_tensor;
use crate::synthgen::{
    self, downsample_group, gen_medical, gen_outlier, inject_label_noise, MedicalSynthConfig,
    OutlierSynthConfig,
};
use crate::{Error, Result};

/// The prediction-set (or p-value) constructions the harness can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Single pooled calibration set, no attribute protection.
    Marginal,
    /// Calibration restricted to the full crossing of all attributes.
    Exhaustive,
    /// Union of the single-attribute equalized sets.
    Partial,
    /// Adaptive selection with the significance gate.
    Afcp,
    /// Adaptive selection that always takes the argmax attribute.
    Afcp1,
    /// Adaptive selection allowing up to two attributes.
    AfcpPlus,
    /// Adaptive selection calibrated per class label.
    AfcpLc,
}

impl Method {
    /// The name used in result tables and config files.
    pub fn label(self) -> &'static str {
        match self {
            Method::Marginal => "marginal",
            Method::Exhaustive => "exhaustive",
            Method::Partial => "partial",
            Method::Afcp => "afcp",
            Method::Afcp1 => "afcp1",
            Method::AfcpPlus => "afcp_plus",
            Method::AfcpLc => "afcp_lc",
        }
    }

    /// Whether the method is defined for outlier detection.
    pub fn supports_outlier(self) -> bool {
        !matches!(self, Method::AfcpPlus | Method::AfcpLc)
    }

    fn is_adaptive(self) -> bool {
        matches!(
            self,
            Method::Afcp | Method::Afcp1 | Method::AfcpPlus | Method::AfcpLc
        )
    }
}

/// A perturbation applied to the train+calibration pool of every repetition
/// before splitting. Levels may be given by name (when the attribute declares
/// level names) or as the numeric code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PreprocessStep {
    /// Rounds uniform noise of the given total width into the labels of one
    /// attribute level's rows.
    LabelNoise {
        attribute: String,
        level: String,
        width: f64,
    },
    /// Keeps each row of one attribute level with the given probability.
    Downsample {
        attribute: String,
        level: String,
        fraction: f64,
    },
}

fn resolve_group(spec: &AttributeSpec, attribute: &str, level: &str) -> Result<GroupKey> {
    let k = spec.index_of(attribute).ok_or_else(|| {
        Error::Config(format!("unknown attribute '{attribute}' in preprocess step"))
    })?;
    let levels = spec.level_count(k)?;
    let by_name = (0..levels as u32).find(|&v| spec.level_label(k, v) == level);
    let v = by_name
        .or_else(|| {
            level
                .parse::<u32>()
                .ok()
                .filter(|&v| (v as usize) < levels)
        })
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown level '{level}' for attribute '{attribute}'"
            ))
        })?;
    GroupKey::new(vec![k], vec![v])
}

/// Controls for one experiment: which methods, sample sizes, repetition
/// counts, model settings, and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    /// Pool sizes (train + calibration together) to sweep.
    pub sample_sizes: Vec<usize>,
    pub n_test: usize,
    pub n_reps: usize,
    pub alpha: f64,
    /// Level of the one-sided significance gate inside adaptive selection.
    pub test_level: f64,
    /// Fraction of each pool used for model training.
    pub train_fraction: f64,
    /// Maximum attributes an outlier-detection selection may pick.
    pub j_max: usize,
    pub seed: u64,
    pub model: MlpConfig,
    pub preprocess: Vec<PreprocessStep>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Marginal, Method::Afcp],
            sample_sizes: vec![2000],
            n_test: 500,
            n_reps: 100,
            alpha: 0.1,
            test_level: 0.05,
            train_fraction: 0.5,
            j_max: 1,
            seed: 0,
            model: MlpConfig::default(),
            preprocess: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Like [`Default`] but with the customary 30 repetitions for
    /// outlier-detection runs.
    pub fn outlier_defaults() -> Self {
        Self {
            n_reps: 30,
            ..Self::default()
        }
    }

    /// Rejects inconsistent settings before any work happens.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods list is empty".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!(
                    "method '{}' listed more than once",
                    m.label()
                )));
            }
        }
        if self.sample_sizes.is_empty() {
            return Err(Error::Config("sample_sizes list is empty".into()));
        }
        if let Some(&bad) = self.sample_sizes.iter().find(|&&s| s < 4) {
            return Err(Error::Config(format!(
                "sample size {bad} is too small to split and calibrate"
            )));
        }
        if self.n_test == 0 {
            return Err(Error::Config("n_test must be at least 1".into()));
        }
        if self.n_reps == 0 {
            return Err(Error::Config("n_reps must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.test_level > 0.0 && self.test_level < 1.0) {
            return Err(Error::Config(format!(
                "test_level must be in (0, 1), got {}",
                self.test_level
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.j_max == 0 {
            return Err(Error::Config("j_max must be at least 1".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Where each repetition's pool and test points come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// The six-class generator; fresh pool and test draw per repetition.
    SyntheticMedical { blue_prob: f64 },
    /// The inlier/outlier generator; fresh pool and test draw per repetition.
    SyntheticOutlier { blue_prob: f64 },
    /// A fixed dataset; each repetition samples pool and test rows from it
    /// without replacement.
    Fixed(Dataset),
}

impl DataSource {
    pub fn synthetic_medical() -> Self {
        DataSource::SyntheticMedical { blue_prob: 0.1 }
    }

    pub fn synthetic_outlier() -> Self {
        DataSource::SyntheticOutlier { blue_prob: 0.1 }
    }

    fn spec(&self) -> AttributeSpec {
        match self {
            DataSource::Fixed(d) => d.spec().clone(),
            _ => synthgen::covariate_spec(),
        }
    }
}

/// One aggregated cell of the result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub sample_size: usize,
    /// Attribute name, "overall", or a "+"-joined subset for selection rows.
    pub attribute: String,
    /// Level label within the attribute, or "overall".
    pub level: String,
    /// "coverage", "size", "fpr", "tpr", or "selection_freq".
    pub metric: String,
    /// Mean over contributing repetitions.
    pub value: f64,
    /// Standard error over repetitions; absent with fewer than two
    /// contributing repetitions.
    pub se: Option<f64>,
}

/// The harness output: one row per (method, sample size, scope, metric).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    /// Renders the table as CSV with a fixed header. Empty SE cells stay
    /// empty rather than printing a placeholder.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("method,sample_size,attribute,level,metric,value,se\n");
        for r in &self.rows {
            let se = r.se.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method, r.sample_size, r.attribute, r.level, r.metric, r.value, se
            ));
        }
        out
    }

    /// Renders the table as a pipe-delimited Markdown table.
    pub fn to_markdown_string(&self) -> String {
        let mut out = String::from(
            "| method | sample_size | attribute | level | metric | value | se |\n\
             | --- | --- | --- | --- | --- | --- | --- |\n",
        );
        for r in &self.rows {
            let se = r.se.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                r.method, r.sample_size, r.attribute, r.level, r.metric, r.value, se
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn write_markdown(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_markdown_string())?;
        Ok(())
    }

    /// Looks up a single cell.
    pub fn find(
        &self,
        method: Method,
        sample_size: usize,
        attribute: &str,
        level: &str,
        metric: &str,
    ) -> Option<&MetricRow> {
        self.rows.iter().find(|r| {
            r.method == method.label()
                && r.sample_size == sample_size
                && r.attribute == attribute
                && r.level == level
                && r.metric == metric
        })
    }

    /// The value of a single cell, if present.
    pub fn value(
        &self,
        method: Method,
        sample_size: usize,
        attribute: &str,
        level: &str,
        metric: &str,
    ) -> Option<f64> {
        self.find(method, sample_size, attribute, level, metric)
            .map(|r| r.value)
    }
}

/// Extracts the per-subset selection frequencies of one method at one sample
/// size. Each entry pairs the subset label ("none", an attribute name, or a
/// "+"-joined pair) with its mean frequency; the frequencies sum to one.
pub fn selection_frequency(
    table: &MetricTable,
    method: Method,
    sample_size: usize,
) -> Vec<(String, f64)> {
    table
        .rows
        .iter()
        .filter(|r| {
            r.metric == "selection_freq"
                && r.method == method.label()
                && r.sample_size == sample_size
        })
        .map(|r| (r.attribute.clone(), r.value))
        .collect()
}

// Which table cell a raw value belongs to: None is the overall cell,
// Some((k, v)) the attribute-k level-v cell.
type Scope = Option<(usize, u32)>;

// Per-repetition, per-method raw results before aggregation.
#[derive(Debug, Clone)]
struct MethodRep {
    // (metric, scope, value). Group cells appear only when the level
    // occurred among the relevant test points.
    cells: Vec<(&'static str, Scope, f64)>,
    // Fraction of test points whose final selected subset was each subset;
    // None for the non-adaptive benchmarks.
    selection: Option<BTreeMap<Vec<usize>, f64>>,
}

fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, Some((var / m).sqrt()))
}

fn subset_label(spec: &AttributeSpec, subset: &[usize]) -> String {
    if subset.is_empty() {
        return "none".to_string();
    }
    subset
        .iter()
        .map(|&k| spec.def(k).map(|d| d.name.clone()).unwrap_or_default())
        .collect::<Vec<_>>()
        .join("+")
}

// Folds one method's repetition results into table rows. Repetitions arrive
// tagged with their index and are re-sorted, so the emitted rows do not
// depend on the order the workers finished in.
fn aggregate_method(
    spec: &AttributeSpec,
    method: Method,
    sample_size: usize,
    metric_order: &[&'static str],
    reps: &[&MethodRep],
    rows: &mut Vec<MetricRow>,
) {
    let mut cells: BTreeMap<(usize, Scope), Vec<f64>> = BTreeMap::new();
    for rep in reps {
        for &(name, scope, v) in &rep.cells {
            let mi = metric_order
                .iter()
                .position(|m| *m == name)
                .expect("metric name is registered");
            cells.entry((mi, scope)).or_default().push(v);
        }
    }
    for ((mi, scope), values) in &cells {
        let (value, se) = mean_se(values);
        let (attribute, level) = match scope {
            None => ("overall".to_string(), "overall".to_string()),
            Some((k, v)) => (
                spec.def(*k).map(|d| d.name.clone()).unwrap_or_default(),
                spec.level_label(*k, *v),
            ),
        };
        rows.push(MetricRow {
            method: method.label().to_string(),
            sample_size,
            attribute,
            level,
            metric: metric_order[*mi].to_string(),
            value,
            se,
        });
    }
    let selecting: Vec<&BTreeMap<Vec<usize>, f64>> =
        reps.iter().filter_map(|r| r.selection.as_ref()).collect();
    if selecting.is_empty() {
        return;
    }
    let keys: BTreeSet<&Vec<usize>> = selecting.iter().flat_map(|m| m.keys()).collect();
    for key in keys {
        let values: Vec<f64> = selecting
            .iter()
            .map(|m| m.get(key).copied().unwrap_or(0.0))
            .collect();
        let (value, se) = mean_se(&values);
        rows.push(MetricRow {
            method: method.label().to_string(),
            sample_size,
            attribute: subset_label(spec, key),
            level: "overall".to_string(),
            metric: "selection_freq".to_string(),
            value,
            se,
        });
    }
}

fn aggregate_size(
    spec: &AttributeSpec,
    methods: &[Method],
    sample_size: usize,
    metric_order: &[&'static str],
    mut reps: Vec<(usize, Vec<MethodRep>)>,
    rows: &mut Vec<MetricRow>,
) {
    reps.sort_by_key(|(i, _)| *i);
    for (mi, &method) in methods.iter().enumerate() {
        let column: Vec<&MethodRep> = reps.iter().map(|(_, r)| &r[mi]).collect();
        aggregate_method(spec, method, sample_size, metric_order, &column, rows);
    }
}

fn sub_seed(seed: u64, tag: &str) -> u64 {
    stream(seed, tag, 0).next_u64()
}

fn sub_seed_at(seed: u64, tag: &str, counter: u64) -> u64 {
    stream(seed, tag, counter).next_u64()
}

fn draw_data(
    source: &DataSource,
    cfg: &ExperimentConfig,
    size: usize,
    rep_seed: u64,
) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::SyntheticMedical { blue_prob } => {
            let mut pool_cfg = MedicalSynthConfig::new(size, sub_seed(rep_seed, "gen-pool"));
            pool_cfg.blue_prob = *blue_prob;
            let mut test_cfg = MedicalSynthConfig::new(cfg.n_test, sub_seed(rep_seed, "gen-test"));
            test_cfg.blue_prob = *blue_prob;
            Ok((gen_medical(&pool_cfg)?, gen_medical(&test_cfg)?))
        }
        DataSource::SyntheticOutlier { blue_prob } => {
            let mut pool_cfg = OutlierSynthConfig::new(size, sub_seed(rep_seed, "gen-pool"));
            pool_cfg.blue_prob = *blue_prob;
            let mut test_cfg = OutlierSynthConfig::new(cfg.n_test, sub_seed(rep_seed, "gen-test"));
            test_cfg.blue_prob = *blue_prob;
            Ok((gen_outlier(&pool_cfg)?, gen_outlier(&test_cfg)?))
        }
        DataSource::Fixed(data) => {
            let need = size + cfg.n_test;
            if need > data.n() {
                return Err(Error::Config(format!(
                    "fixed dataset has {} rows but one repetition needs {} (pool {} + test {})",
                    data.n(),
                    need,
                    size,
                    cfg.n_test
                )));
            }
            let mut order: Vec<usize> = (0..data.n()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut stream(rep_seed, "resample", 0));
            let pool = data.subset(&order[..size]);
            let test = data.subset(&order[size..need]);
            Ok((pool, test))
        }
    }
}

fn apply_preprocess(
    steps: &[PreprocessStep],
    mut data: Dataset,
    rep_seed: u64,
) -> Result<Dataset> {
    for (i, step) in steps.iter().enumerate() {
        let seed = sub_seed_at(rep_seed, "prep", i as u64);
        match step {
            PreprocessStep::LabelNoise {
                attribute,
                level,
                width,
            } => {
                let key = resolve_group(data.spec(), attribute, level)?;
                data = inject_label_noise(&data, &key, *width, seed)?;
            }
            PreprocessStep::Downsample {
                attribute,
                level,
                fraction,
            } => {
                let key = resolve_group(data.spec(), attribute, level)?;
                data = downsample_group(&data, &key, *fraction, seed)?;
            }
        }
    }
    Ok(data)
}

fn model_config(cfg: &ExperimentConfig, rep_seed: u64) -> MlpConfig {
    let mut m = cfg.model.clone();
    m.seed = sub_seed_at(rep_seed, "model", cfg.model.seed);
    m
}

/// Evaluates one classification method on one test record, returning the
/// prediction set and, for the adaptive methods, the selected subset.
pub fn classify_with(
    evaluator: &Evaluator,
    method: Method,
    scores: &[f64],
    attrs: &[u32],
) -> Result<(PredictionSet, Option<Vec<usize>>)> {
    Ok(match method {
        Method::Marginal => (evaluator.marginal(scores)?, None),
        Method::Exhaustive => (evaluator.exhaustive(scores, attrs)?, None),
        Method::Partial => (evaluator.partial(scores, attrs)?, None),
        Method::Afcp => {
            let o = evaluator.afcp(scores, attrs, false)?;
            (o.set, Some(o.selected))
        }
        Method::Afcp1 => {
            let o = evaluator.afcp(scores, attrs, true)?;
            (o.set, Some(o.selected))
        }
        Method::AfcpPlus => {
            let o = evaluator.afcp_plus(scores, attrs)?;
            (o.set, Some(o.selected))
        }
        Method::AfcpLc => {
            let o = evaluator.afcp_label_conditional(scores, attrs)?;
            (o.set, Some(o.selected))
        }
    })
}

/// Evaluates one outlier-detection method on one test record, returning the
/// conformal p-value and, for the adaptive methods, the selected subset.
pub fn outlier_with(
    evaluator: &OutlierEvaluator,
    method: Method,
    score: f64,
    attrs: &[u32],
) -> Result<(f64, Option<Vec<usize>>)> {
    Ok(match method {
        Method::Marginal => (evaluator.marginal_pvalue(score), None),
        Method::Exhaustive => (evaluator.exhaustive_pvalue(score, attrs)?, None),
        Method::Partial => (evaluator.partial_pvalue(score, attrs)?, None),
        Method::Afcp => {
            let o = evaluator.afcp(score, attrs)?;
            (o.pvalue, Some(o.selected))
        }
        Method::Afcp1 => {
            let o = evaluator.afcp_always(score, attrs)?;
            (o.pvalue, Some(o.selected))
        }
        Method::AfcpPlus | Method::AfcpLc => {
            return Err(Error::Config(format!(
                "method '{}' is not defined for outlier detection",
                method.label()
            )))
        }
    })
}

// Tallies for one method over the test points of a single repetition.
struct GroupTally {
    hits: usize,
    total: usize,
    size_sum: usize,
}

impl GroupTally {
    fn new() -> Self {
        Self {
            hits: 0,
            total: 0,
            size_sum: 0,
        }
    }
}

fn classification_rep(
    cfg: &ExperimentConfig,
    source: &DataSource,
    size: usize,
    rep_seed: u64,
) -> Result<Vec<MethodRep>> {
    let (pool, test) = draw_data(source, cfg, size, rep_seed)?;
    let pool = apply_preprocess(&cfg.preprocess, pool, rep_seed)?;
    let (train, calib) = split_train_calib(&pool, cfg.train_fraction, sub_seed(rep_seed, "split"))?;
    let model = fit_softmax_mlp(&train, &model_config(cfg, rep_seed))?;
    let calib_scores = score_tensor(&model, &calib, sub_seed(rep_seed, "calib-u"))?;
    let test_scores = score_tensor(&model, &test, sub_seed(rep_seed, "test-u"))?;
    let Some(test_labels) = test.labels() else {
        return Err(Error::Invalid("classification test data needs labels".into()));
    };
    let options = EvaluatorOptions {
        test_level: cfg.test_level,
        exhaustive: cfg.methods.contains(&Method::Exhaustive),
        two_attributes: cfg.methods.contains(&Method::AfcpPlus),
        label_conditional: cfg.methods.contains(&Method::AfcpLc),
    };
    let evaluator = Evaluator::new(&calib, &calib_scores, cfg.alpha, options)?;
    let spec = test.spec().clone();
    let n_test = test.n();

    let mut out = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let mut overall = GroupTally::new();
        let mut groups: Vec<Vec<GroupTally>> = (0..spec.len())
            .map(|k| (0..spec.level_count(k).unwrap_or(0)).map(|_| GroupTally::new()).collect())
            .collect();
        let mut selection_counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for (t, &label) in test_labels.iter().enumerate() {
            let scores = test_scores.row(t);
            let attrs = test.attr_row(t);
            let (set, selected) = classify_with(&evaluator, method, scores, attrs)?;
            let hit = usize::from(set.contains(label));
            let sz = set.len();
            overall.hits += hit;
            overall.total += 1;
            overall.size_sum += sz;
            for (k, row) in groups.iter_mut().enumerate() {
                let tally = &mut row[attrs[k] as usize];
                tally.hits += hit;
                tally.total += 1;
                tally.size_sum += sz;
            }
            if let Some(sub) = selected {
                *selection_counts.entry(sub).or_insert(0) += 1;
            }
        }
        let mut cells = Vec::new();
        cells.push((
            "coverage",
            None,
            overall.hits as f64 / overall.total as f64,
        ));
        cells.push(("size", None, overall.size_sum as f64 / overall.total as f64));
        for (k, row) in groups.iter().enumerate() {
            for (v, tally) in row.iter().enumerate() {
                if tally.total == 0 {
                    continue;
                }
                let scope = Some((k, v as u32));
                cells.push(("coverage", scope, tally.hits as f64 / tally.total as f64));
                cells.push(("size", scope, tally.size_sum as f64 / tally.total as f64));
            }
        }
        let selection = method.is_adaptive().then(|| {
            selection_counts
                .into_iter()
                .map(|(k, c)| (k, c as f64 / n_test as f64))
                .collect()
        });
        out.push(MethodRep { cells, selection });
    }
    Ok(out)
}

fn outlier_rep(
    cfg: &ExperimentConfig,
    source: &DataSource,
    size: usize,
    rep_seed: u64,
) -> Result<Vec<MethodRep>> {
    let (pool, test) = draw_data(source, cfg, size, rep_seed)?;
    if pool.label_count() != 2 {
        return Err(Error::Config(format!(
            "outlier detection needs binary labels, got {} classes",
            pool.label_count()
        )));
    }
    let pool = apply_preprocess(&cfg.preprocess, pool, rep_seed)?;
    let (train, calib_all) =
        split_train_calib(&pool, cfg.train_fraction, sub_seed(rep_seed, "split"))?;
    // The scorer trains on the mixed pool half; calibration keeps inliers only.
    let inlier_idx: Vec<usize> = (0..calib_all.n())
        .filter(|&i| calib_all.label(i) == Some(0))
        .collect();
    if inlier_idx.len() < 2 {
        return Err(Error::Invalid(
            "calibration half has fewer than 2 inliers".into(),
        ));
    }
    let calib = calib_all.subset(&inlier_idx);
    let model = fit_oneclass(&train, &model_config(cfg, rep_seed))?;
    let calib_scores = model.score(&calib)?;
    let test_scores = model.score(&test)?;
    let Some(test_labels) = test.labels() else {
        return Err(Error::Invalid("outlier test data needs labels".into()));
    };
    let evaluator = OutlierEvaluator::new(&calib, &calib_scores, cfg.alpha, cfg.test_level, cfg.j_max)?;
    let spec = test.spec().clone();
    let n_test = test.n();

    let mut out = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        // Reuse GroupTally: hits counts flagged inliers (false positives) and
        // size_sum counts flagged outliers (true positives); total splits are
        // tracked separately below.
        let mut fp = GroupTally::new();
        let mut tp = GroupTally::new();
        let mut group_fp: Vec<Vec<GroupTally>> = (0..spec.len())
            .map(|k| (0..spec.level_count(k).unwrap_or(0)).map(|_| GroupTally::new()).collect())
            .collect();
        let mut group_tp: Vec<Vec<GroupTally>> = (0..spec.len())
            .map(|k| (0..spec.level_count(k).unwrap_or(0)).map(|_| GroupTally::new()).collect())
            .collect();
        let mut selection_counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for t in 0..n_test {
            let score = test_scores[t];
            let attrs = test.attr_row(t);
            let (pvalue, selected) = outlier_with(&evaluator, method, score, attrs)?;
            let flagged = usize::from(pvalue <= cfg.alpha);
            let is_outlier = test_labels[t] == 1;
            let (overall, per_group) = if is_outlier {
                (&mut tp, &mut group_tp)
            } else {
                (&mut fp, &mut group_fp)
            };
            overall.hits += flagged;
            overall.total += 1;
            for (k, row) in per_group.iter_mut().enumerate() {
                let tally = &mut row[attrs[k] as usize];
                tally.hits += flagged;
                tally.total += 1;
            }
            if let Some(sub) = selected {
                *selection_counts.entry(sub).or_insert(0) += 1;
            }
        }
        let mut cells = Vec::new();
        if fp.total > 0 {
            cells.push(("fpr", None, fp.hits as f64 / fp.total as f64));
        }
        if tp.total > 0 {
            cells.push(("tpr", None, tp.hits as f64 / tp.total as f64));
        }
        for (name, per_group) in [("fpr", &group_fp), ("tpr", &group_tp)] {
            for (k, row) in per_group.iter().enumerate() {
                for (v, tally) in row.iter().enumerate() {
                    if tally.total == 0 {
                        continue;
                    }
                    cells.push((name, Some((k, v as u32)), tally.hits as f64 / tally.total as f64));
                }
            }
        }
        let selection = method.is_adaptive().then(|| {
            selection_counts
                .into_iter()
                .map(|(k, c)| (k, c as f64 / n_test as f64))
                .collect()
        });
        out.push(MethodRep { cells, selection });
    }
    Ok(out)
}

fn run_generic(
    cfg: &ExperimentConfig,
    source: &DataSource,
    rep_tag: &str,
    metric_order: &[&'static str],
    rep_fn: impl Fn(&ExperimentConfig, &DataSource, usize, u64) -> Result<Vec<MethodRep>> + Sync,
) -> Result<MetricTable> {
    let spec = source.spec();
    let mut rows = Vec::new();
    for (si, &size) in cfg.sample_sizes.iter().enumerate() {
        let reps: Result<Vec<(usize, Vec<MethodRep>)>> = (0..cfg.n_reps)
            .into_par_iter()
            .map(|rep| {
                let rep_seed =
                    sub_seed_at(cfg.seed, rep_tag, ((si as u64) << 32) | rep as u64);
                rep_fn(cfg, source, size, rep_seed).map(|m| (rep, m))
            })
            .collect();
        aggregate_size(&spec, &cfg.methods, size, metric_order, reps?, &mut rows);
    }
    Ok(MetricTable { rows })
}

/// Runs the classification experiment: per repetition, draw a pool and test
/// points, split, fit the softmax model, calibrate, and evaluate every
/// configured method on the fresh test points. Returns coverage and set-size
/// cells (overall and per attribute level) plus selection frequencies, each
/// averaged over repetitions with its standard error.
pub fn run_classification(cfg: &ExperimentConfig, source: &DataSource) -> Result<MetricTable> {
    cfg.validate()?;
    if matches!(source, DataSource::Fixed(d) if d.labels().is_none()) {
        return Err(Error::Config(
            "classification needs a labeled dataset".into(),
        ));
    }
    run_generic(cfg, source, "rep-cl", &["coverage", "size"], classification_rep)
}

/// Runs the outlier-detection experiment: the scorer trains on a mixed pool
/// half, calibration uses only that half's inliers, and evaluation flags test
/// points whose conformal p-value is at most alpha. Returns false-positive
/// rates over inlier test points and true-positive rates over outliers,
/// overall and per attribute level, plus selection frequencies.
pub fn run_outlier(cfg: &ExperimentConfig, source: &DataSource) -> Result<MetricTable> {
    cfg.validate()?;
    if let Some(bad) = cfg.methods.iter().find(|m| !m.supports_outlier()) {
        return Err(Error::Config(format!(
            "method '{}' is not defined for outlier detection",
            bad.label()
        )));
    }
    if matches!(source, DataSource::SyntheticMedical { .. }) {
        return Err(Error::Config(
            "the six-class generator does not produce inlier/outlier labels".into(),
        ));
    }
    if matches!(source, DataSource::Fixed(d) if d.labels().is_none()) {
        return Err(Error::Config(
            "outlier detection needs inlier/outlier labels".into(),
        ));
    }
    run_generic(cfg, source, "rep-od", &["fpr", "tpr"], outlier_rep)
}
