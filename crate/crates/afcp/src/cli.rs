//! Command-line plumbing: the JSON run configuration, CSV dataset ingestion
//! and export, and the `run` / `gen` / `predict` subcommands.
//!
//! Categorical columns are coded densely in first-appearance order unless
//! the column roles carry an explicit level dictionary, in which case the
//! dictionary fixes both the code order and the admissible values. `gen`
//! always writes such a dictionary next to the CSV, which is what makes an
//! export-then-ingest round trip reproduce the dataset exactly.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::afcp_sets::{Evaluator, EvaluatorOptions, OutlierEvaluator};
use crate::data_model::{split_train_calib, AttributeDef, AttributeSpec, Dataset};
use crate::evalharness::{
    classify_with, outlier_with, run_classification, run_outlier, DataSource, ExperimentConfig,
    Method,
};
use crate::model::{fit_oneclass, fit_softmax_mlp, OneClassModel};
use crate::rng::stream;
use crate::scores::score_tensor;
use crate::synthgen::{gen_medical, gen_outlier, MedicalSynthConfig, OutlierSynthConfig};
use crate::{Error, Result};

/// Which CSV columns play which role during ingestion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnRoles {
    /// Column holding the class (or inlier/outlier) label, if any.
    pub label_column: Option<String>,
    /// Columns treated as sensitive attributes, in attribute order.
    pub attribute_columns: Vec<String>,
    /// Columns treated as numeric model features, in feature order.
    pub feature_columns: Vec<String>,
    /// Optional fixed level dictionaries per attribute column: the vector
    /// position is the integer code. Values outside a dictionary are
    /// rejected.
    pub attribute_levels: BTreeMap<String, Vec<String>>,
    /// Optional fixed dictionary for the label column.
    pub label_levels: Option<Vec<String>>,
}

/// An ingested dataset together with the dictionaries that decode its
/// integer attribute and label codes back to the original strings.
#[derive(Debug, Clone)]
pub struct IngestResult {
    pub data: Dataset,
    pub attribute_levels: BTreeMap<String, Vec<String>>,
    pub label_levels: Option<Vec<String>>,
}

// String-to-code mapping for one categorical column. A fixed coder comes
// from a declared dictionary and rejects unseen values; a free coder assigns
// codes in first-appearance order.
struct Coder {
    names: Vec<String>,
    lookup: HashMap<String, u32>,
    fixed: bool,
}

impl Coder {
    fn new(dict: Option<&Vec<String>>, column: &str) -> Result<Self> {
        match dict {
            Some(d) => {
                if d.is_empty() {
                    return Err(Error::Config(format!(
                        "level dictionary for column '{column}' is empty"
                    )));
                }
                let mut lookup = HashMap::new();
                for (i, name) in d.iter().enumerate() {
                    if lookup.insert(name.clone(), i as u32).is_some() {
                        return Err(Error::Config(format!(
                            "level dictionary for column '{column}' repeats '{name}'"
                        )));
                    }
                }
                Ok(Self {
                    names: d.clone(),
                    lookup,
                    fixed: true,
                })
            }
            None => Ok(Self {
                names: Vec::new(),
                lookup: HashMap::new(),
                fixed: false,
            }),
        }
    }

    fn code(&mut self, value: &str) -> Option<u32> {
        if let Some(&c) = self.lookup.get(value) {
            return Some(c);
        }
        if self.fixed {
            return None;
        }
        let c = self.names.len() as u32;
        self.names.push(value.to_string());
        self.lookup.insert(value.to_string(), c);
        Some(c)
    }
}

/// Reads a headed CSV file into a [`Dataset`] according to the column roles.
/// Rows are numbered from 1, header excluded, and every row-level problem
/// (missing value, unparsable number, value outside a fixed dictionary) is
/// reported with its row number.
pub fn ingest_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<IngestResult> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    if roles.feature_columns.is_empty() {
        return Err(Error::Config(
            "column roles declare no feature columns".into(),
        ));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::Config(format!("{shown}: {e}")))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{shown}: missing column '{name}'")))
    };
    let label_idx = match &roles.label_column {
        Some(name) => Some(col(name)?),
        None => None,
    };
    let attr_idx: Vec<usize> = roles
        .attribute_columns
        .iter()
        .map(|n| col(n))
        .collect::<Result<_>>()?;
    let feat_idx: Vec<usize> = roles
        .feature_columns
        .iter()
        .map(|n| col(n))
        .collect::<Result<_>>()?;

    let mut attr_coders: Vec<Coder> = roles
        .attribute_columns
        .iter()
        .map(|n| Coder::new(roles.attribute_levels.get(n), n))
        .collect::<Result<_>>()?;
    let mut label_coder = match &roles.label_column {
        Some(n) => Some(Coder::new(roles.label_levels.as_ref(), n)?),
        None => None,
    };

    let mut features: Vec<f64> = Vec::new();
    let mut attributes: Vec<u32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut n = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            let raw = record.get(idx).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(Error::Ingest {
                    path: shown.clone(),
                    row,
                    reason: format!("missing value in column '{name}'"),
                });
            }
            Ok(raw)
        };
        for (j, (&idx, name)) in feat_idx.iter().zip(&roles.feature_columns).enumerate() {
            let raw = cell(idx, name)?;
            let v: f64 = raw.parse().map_err(|_| Error::Ingest {
                path: shown.clone(),
                row,
                reason: format!("column '{name}': invalid number '{raw}'"),
            })?;
            let _ = j;
            features.push(v);
        }
        for ((&idx, name), coder) in attr_idx
            .iter()
            .zip(&roles.attribute_columns)
            .zip(&mut attr_coders)
        {
            let raw = cell(idx, name)?;
            let code = coder.code(raw).ok_or_else(|| Error::Ingest {
                path: shown.clone(),
                row,
                reason: format!("column '{name}': value '{raw}' is not in the level dictionary"),
            })?;
            attributes.push(code);
        }
        if let (Some(idx), Some(coder)) = (label_idx, label_coder.as_mut()) {
            let name = roles.label_column.as_deref().unwrap_or("label");
            let raw = cell(idx, name)?;
            let code = coder.code(raw).ok_or_else(|| Error::Ingest {
                path: shown.clone(),
                row,
                reason: format!("column '{name}': label '{raw}' is not in the label dictionary"),
            })?;
            labels.push(code as usize);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(format!("{shown}: empty dataset")));
    }

    let features = Array2::from_shape_vec((n, feat_idx.len()), features)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let attributes = Array2::from_shape_vec((n, attr_idx.len()), attributes)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let defs: Vec<AttributeDef> = roles
        .attribute_columns
        .iter()
        .zip(&attr_coders)
        .enumerate()
        .map(|(k, (name, coder))| {
            AttributeDef::new(name.clone(), coder.names.len(), k)
                .with_level_names(coder.names.clone())
        })
        .collect();
    let spec = AttributeSpec::new(defs)?;
    let label_levels = label_coder.as_ref().map(|c| c.names.clone());
    let label_count = match (&label_levels, &roles.label_levels) {
        (Some(d), _) => d.len(),
        (None, Some(d)) => d.len().max(1),
        (None, None) => 1,
    };
    let data = Dataset::new(
        features,
        attributes,
        (!labels.is_empty()).then_some(labels),
        label_count,
        spec,
    )?;
    let attribute_levels = roles
        .attribute_columns
        .iter()
        .zip(&attr_coders)
        .map(|(name, coder)| (name.clone(), coder.names.clone()))
        .collect();
    Ok(IngestResult {
        data,
        attribute_levels,
        label_levels,
    })
}

/// Writes a dataset as a headed CSV file plus a JSON sidecar of column roles
/// whose level dictionaries make [`ingest_csv`] rebuild the dataset exactly.
/// Returns the roles that were written.
pub fn write_dataset_csv(
    data: &Dataset,
    csv_path: impl AsRef<Path>,
    roles_path: impl AsRef<Path>,
) -> Result<ColumnRoles> {
    let spec = data.spec();
    let attr_names: Vec<String> = spec.defs().iter().map(|a| a.name.clone()).collect();
    let feature_names: Vec<String> = (1..=data.feature_dim()).map(|j| format!("x{j}")).collect();
    let has_labels = data.labels().is_some();

    let mut header: Vec<String> = attr_names.clone();
    if has_labels {
        header.push("label".into());
    }
    header.extend(feature_names.iter().cloned());

    let mut writer = csv::Writer::from_path(csv_path.as_ref())?;
    writer.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..data.n() {
        record.clear();
        for (k, &v) in data.attr_row(i).iter().enumerate() {
            record.push(spec.level_label(k, v));
        }
        if let Some(y) = data.label(i) {
            record.push(y.to_string());
        }
        for v in data.features().row(i) {
            record.push(v.to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;

    let attribute_levels: BTreeMap<String, Vec<String>> = spec
        .defs()
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let levels = (0..a.levels as u32).map(|v| spec.level_label(k, v)).collect();
            (a.name.clone(), levels)
        })
        .collect();
    let roles = ColumnRoles {
        label_column: has_labels.then(|| "label".to_string()),
        attribute_columns: attr_names,
        feature_columns: feature_names,
        attribute_levels,
        label_levels: has_labels.then(|| (0..data.label_count()).map(|y| y.to_string()).collect()),
    };
    std::fs::write(roles_path, serde_json::to_string_pretty(&roles)?)?;
    Ok(roles)
}

/// Whether an experiment classifies or detects outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Classify,
    Outlier,
}

/// Where the run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    SyntheticMedical {
        #[serde(default = "default_blue_prob")]
        blue_prob: f64,
    },
    SyntheticOutlier {
        #[serde(default = "default_blue_prob")]
        blue_prob: f64,
    },
    Csv { path: PathBuf, roles: ColumnRoles },
}

fn default_blue_prob() -> f64 {
    0.1
}

/// The file-backed configuration consumed by `run` and `predict`. Every
/// field has a default, unknown fields are rejected, and a parse /
/// serialize / parse cycle reproduces the config exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub source: SourceConfig,
    pub out_dir: PathBuf,
    pub experiment: ExperimentConfig,
    /// Column roles for the calibration and test files given to `predict`.
    /// Falls back to the roles of a CSV source when absent.
    pub roles: Option<ColumnRoles>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Classify,
            source: SourceConfig::SyntheticMedical { blue_prob: 0.1 },
            out_dir: PathBuf::from("results"),
            experiment: ExperimentConfig::default(),
            roles: None,
        }
    }
}

/// Loads and parses a JSON run configuration.
pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Conformal prediction experiments with adaptive protected-attribute
/// selection.
#[derive(Debug, Parser)]
#[command(name = "afcp", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Path to a JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed override (environment: AFCP_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory override (environment: AFCP_OUT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for repetition-level parallelism (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute the configured experiment and write CSV and Markdown tables.
    Run,
    /// Write a synthetic dataset as CSV plus a column-roles sidecar.
    Gen {
        /// Which generator: "medical" or "outlier".
        #[arg(long, default_value = "medical")]
        generator: String,
        /// Number of rows.
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Calibrate on one CSV file and print a JSON line per test record.
    Predict {
        /// Calibration data (labeled).
        #[arg(long)]
        calib: PathBuf,
        /// Records to evaluate.
        #[arg(long)]
        test: PathBuf,
    },
}

/// Runs one parsed command line, writing human or JSON-lines output to
/// stdout. Returns an error for the caller to print and convert into a
/// nonzero exit code.
pub fn execute(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    execute_to(cli, &mut lock)
}

/// Like [`execute`] but with an explicit output sink.
pub fn execute_to(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Run => run_cmd(&cli, out),
        Command::Gen { generator, n } => gen_cmd(&cli, generator, *n, out),
        Command::Predict { calib, test } => predict_cmd(&cli, calib, test, out),
    }
}

fn resolved_seed(cli: &Cli) -> Result<Option<u64>> {
    if cli.seed.is_some() {
        return Ok(cli.seed);
    }
    match std::env::var("AFCP_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("AFCP_SEED must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn resolved_out(cli: &Cli) -> Option<PathBuf> {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("AFCP_OUT").map(PathBuf::from))
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(f),
    }
}

fn build_source(cfg: &RunConfig) -> Result<DataSource> {
    Ok(match &cfg.source {
        SourceConfig::SyntheticMedical { blue_prob } => DataSource::SyntheticMedical {
            blue_prob: *blue_prob,
        },
        SourceConfig::SyntheticOutlier { blue_prob } => DataSource::SyntheticOutlier {
            blue_prob: *blue_prob,
        },
        SourceConfig::Csv { path, roles } => DataSource::Fixed(ingest_csv(path, roles)?.data),
    })
}

fn run_cmd(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("run needs --config <file>".into()))?;
    let mut cfg = load_run_config(path)?;
    if let Some(seed) = resolved_seed(cli)? {
        cfg.experiment.seed = seed;
    }
    if let Some(dir) = resolved_out(cli) {
        cfg.out_dir = dir;
    }
    cfg.experiment.validate()?;
    let source = build_source(&cfg)?;
    let table = with_pool(cli.jobs, || match cfg.kind {
        ExperimentKind::Classify => run_classification(&cfg.experiment, &source),
        ExperimentKind::Outlier => run_outlier(&cfg.experiment, &source),
    })?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join("results.csv");
    let md_path = cfg.out_dir.join("results.md");
    table.write_csv(&csv_path)?;
    table.write_markdown(&md_path)?;
    writeln!(
        out,
        "wrote {} and {} ({} rows)",
        csv_path.display(),
        md_path.display(),
        table.rows.len()
    )?;
    Ok(())
}

fn gen_cmd(cli: &Cli, generator: &str, n: usize, out: &mut dyn Write) -> Result<()> {
    let seed = resolved_seed(cli)?.unwrap_or(0);
    let dir = resolved_out(cli).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let (data, stem) = match generator {
        "medical" => (
            gen_medical(&MedicalSynthConfig::new(n, seed))?,
            "synthetic_medical",
        ),
        "outlier" => (
            gen_outlier(&OutlierSynthConfig::new(n, seed))?,
            "synthetic_outlier",
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown generator '{other}' (expected 'medical' or 'outlier')"
            )))
        }
    };
    let csv_path = dir.join(format!("{stem}.csv"));
    let roles_path = dir.join(format!("{stem}.roles.json"));
    write_dataset_csv(&data, &csv_path, &roles_path)?;
    writeln!(out, "wrote {} and {}", csv_path.display(), roles_path.display())?;
    Ok(())
}

fn predict_roles(cfg: &RunConfig) -> Result<ColumnRoles> {
    let roles = cfg
        .roles
        .clone()
        .or_else(|| match &cfg.source {
            SourceConfig::Csv { roles, .. } => Some(roles.clone()),
            _ => None,
        })
        .ok_or_else(|| Error::Config("predict needs column roles (config field 'roles')".into()))?;
    for name in &roles.attribute_columns {
        if !roles.attribute_levels.contains_key(name) {
            return Err(Error::Config(format!(
                "predict needs an attribute_levels dictionary for '{name}' so calibration \
                 and test files share level codes"
            )));
        }
    }
    Ok(roles)
}

fn predict_cmd(cli: &Cli, calib_path: &Path, test_path: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    cfg.experiment.validate()?;
    let roles = predict_roles(&cfg)?;
    let seed = resolved_seed(cli)?.unwrap_or(cfg.experiment.seed);

    let mut test_roles = roles.clone();
    test_roles.label_column = None;
    let test = ingest_csv(test_path, &test_roles)?;

    // A calibration file with no data rows is the degenerate case where
    // every conformal p-value is 1: classification keeps every label and
    // outlier detection never flags. No model is fit.
    let calib = match ingest_csv(calib_path, &roles) {
        Ok(r) => Some(r),
        Err(Error::Config(msg)) if msg.contains("empty dataset") => None,
        Err(e) => return Err(e),
    };

    match cfg.kind {
        ExperimentKind::Classify => {
            predict_classify(&cfg.experiment, &roles, calib, &test, seed, out)
        }
        ExperimentKind::Outlier => predict_outlier(&cfg.experiment, calib, &test, seed, out),
    }
}

fn selected_names(spec: &AttributeSpec, selected: Option<Vec<usize>>) -> Vec<String> {
    selected
        .unwrap_or_default()
        .iter()
        .map(|&k| spec.def(k).map(|d| d.name.clone()).unwrap_or_default())
        .collect()
}

fn predict_classify(
    ex: &ExperimentConfig,
    roles: &ColumnRoles,
    calib: Option<IngestResult>,
    test: &IngestResult,
    seed: u64,
    out: &mut dyn Write,
) -> Result<()> {
    let Some(calib) = calib else {
        let Some(dict) = roles.label_levels.clone() else {
            return Err(Error::Config(
                "empty calibration and no label_levels dictionary: cannot size the label space"
                    .into(),
            ));
        };
        let full: Vec<usize> = (0..dict.len()).collect();
        for t in 0..test.data.n() {
            for &method in &ex.methods {
                let line = serde_json::json!({
                    "row": t,
                    "method": method.label(),
                    "set": full,
                    "set_labels": dict,
                    "selected": Vec::<String>::new(),
                });
                writeln!(out, "{line}")?;
            }
        }
        return Ok(());
    };
    if calib.data.labels().is_none() {
        return Err(Error::Config(
            "calibration file needs a label column for classification".into(),
        ));
    }
    let (train, calib_data) =
        split_train_calib(&calib.data, ex.train_fraction, sub_seed(seed, "split"))?;
    let mut model_cfg = ex.model.clone();
    model_cfg.seed = stream(seed, "model", ex.model.seed).next_u64();
    let model = fit_softmax_mlp(&train, &model_cfg)?;
    let calib_scores = score_tensor(&model, &calib_data, sub_seed(seed, "calib-u"))?;
    let test_scores = score_tensor(&model, &test.data, sub_seed(seed, "test-u"))?;
    let options = EvaluatorOptions {
        test_level: ex.test_level,
        exhaustive: ex.methods.contains(&Method::Exhaustive),
        two_attributes: ex.methods.contains(&Method::AfcpPlus),
        label_conditional: ex.methods.contains(&Method::AfcpLc),
    };
    let evaluator = Evaluator::new(&calib_data, &calib_scores, ex.alpha, options)?;
    let spec = calib.data.spec();
    for t in 0..test.data.n() {
        let scores = test_scores.row(t);
        let attrs = test.data.attr_row(t);
        for &method in &ex.methods {
            let (set, selected) = classify_with(&evaluator, method, scores, attrs)?;
            let labels: Vec<usize> = set.labels().to_vec();
            let set_labels: Option<Vec<String>> = calib.label_levels.as_ref().map(|d| {
                labels
                    .iter()
                    .map(|&y| d.get(y).cloned().unwrap_or_else(|| y.to_string()))
                    .collect()
            });
            let line = serde_json::json!({
                "row": t,
                "method": method.label(),
                "set": labels,
                "set_labels": set_labels,
                "selected": selected_names(spec, selected),
            });
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

fn predict_outlier(
    ex: &ExperimentConfig,
    calib: Option<IngestResult>,
    test: &IngestResult,
    seed: u64,
    out: &mut dyn Write,
) -> Result<()> {
    if let Some(bad) = ex.methods.iter().find(|m| !m.supports_outlier()) {
        return Err(Error::Config(format!(
            "method '{}' is not defined for outlier detection",
            bad.label()
        )));
    }
    let Some(calib) = calib else {
        for t in 0..test.data.n() {
            for &method in &ex.methods {
                let line = serde_json::json!({
                    "row": t,
                    "method": method.label(),
                    "pvalue": 1.0,
                    "flagged": false,
                    "selected": Vec::<String>::new(),
                });
                writeln!(out, "{line}")?;
            }
        }
        return Ok(());
    };
    if calib.data.labels().is_none() {
        return Err(Error::Config(
            "outlier calibration file needs a 0/1 label column".into(),
        ));
    }
    if calib.data.label_count() != 2 {
        return Err(Error::Config(format!(
            "outlier detection needs binary labels, got {} classes",
            calib.data.label_count()
        )));
    }
    let (train, calib_all) =
        split_train_calib(&calib.data, ex.train_fraction, sub_seed(seed, "split"))?;
    let inliers: Vec<usize> = (0..calib_all.n())
        .filter(|&i| calib_all.label(i) == Some(0))
        .collect();
    if inliers.len() < 2 {
        return Err(Error::Invalid(
            "calibration half has fewer than 2 inliers".into(),
        ));
    }
    let calib_data = calib_all.subset(&inliers);
    let mut model_cfg = ex.model.clone();
    model_cfg.seed = stream(seed, "model", ex.model.seed).next_u64();
    let model = fit_oneclass(&train, &model_cfg)?;
    let calib_scores = model.score(&calib_data)?;
    let test_scores = model.score(&test.data)?;
    let evaluator = OutlierEvaluator::new(&calib_data, &calib_scores, ex.alpha, ex.test_level, ex.j_max)?;
    let spec = calib.data.spec();
    for (t, &test_score) in test_scores.iter().enumerate() {
        let attrs = test.data.attr_row(t);
        for &method in &ex.methods {
            let (pvalue, selected) = outlier_with(&evaluator, method, test_score, attrs)?;
            let line = serde_json::json!({
                "row": t,
                "method": method.label(),
                "pvalue": pvalue,
                "flagged": pvalue <= ex.alpha,
                "selected": selected_names(spec, selected),
            });
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

fn sub_seed(seed: u64, tag: &str) -> u64 {
    stream(seed, tag, 0).next_u64()
}
