//! Encoded tabular data, sensitive-attribute bookkeeping, and the group
//! projection function `phi`.
//!
//! Attribute levels and labels are dense integer codes; raw strings are
//! resolved at ingestion time (see [`crate::cli`]). All types are immutable
//! after construction and safe to share across threads.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::{Error, Result};

/// One sensitive attribute: its display name, number of levels, the source
/// column it came from, and optional human-readable level names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeDef {
    pub name: String,
    pub levels: usize,
    pub column_index: usize,
    pub level_names: Option<Vec<String>>,
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, levels: usize, column_index: usize) -> Self {
        Self {
            name: name.into(),
            levels,
            column_index,
            level_names: None,
        }
    }

    pub fn with_level_names(mut self, names: Vec<String>) -> Self {
        self.level_names = Some(names);
        self
    }
}

/// Ordered list of sensitive attributes. `K = len()`, and attribute `k`
/// takes values in `[0, level_count(k))`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttributeSpec {
    defs: Vec<AttributeDef>,
}

impl AttributeSpec {
    pub fn new(defs: Vec<AttributeDef>) -> Result<Self> {
        for def in &defs {
            if def.levels == 0 {
                return Err(Error::Invalid(format!(
                    "attribute '{}' must have at least one level",
                    def.name
                )));
            }
            if let Some(names) = &def.level_names {
                if names.len() != def.levels {
                    return Err(Error::Shape(format!(
                        "attribute '{}' declares {} levels but {} level names",
                        def.name,
                        def.levels,
                        names.len()
                    )));
                }
            }
        }
        Ok(Self { defs })
    }

    /// A spec with no sensitive attributes (K = 0).
    pub fn empty() -> Self {
        Self::default()
    }

    /// Number of attributes K.
    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn defs(&self) -> &[AttributeDef] {
        &self.defs
    }

    pub fn def(&self, k: usize) -> Result<&AttributeDef> {
        self.defs.get(k).ok_or(Error::AttributeIndex {
            index: k,
            count: self.defs.len(),
        })
    }

    pub fn level_count(&self, k: usize) -> Result<usize> {
        Ok(self.def(k)?.levels)
    }

    /// Printable name for a level: the declared name if present, otherwise
    /// the integer code.
    pub fn level_label(&self, k: usize, level: u32) -> String {
        match self.defs.get(k).and_then(|d| d.level_names.as_ref()) {
            Some(names) => names
                .get(level as usize)
                .cloned()
                .unwrap_or_else(|| level.to_string()),
            None => level.to_string(),
        }
    }

    /// Index of the attribute with the given display name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.defs.iter().position(|d| d.name == name)
    }

    /// Checks one record's attribute values against the declared level counts.
    pub fn validate_row(&self, row: &[u32]) -> Result<()> {
        if row.len() != self.defs.len() {
            return Err(Error::Shape(format!(
                "attribute row has {} entries, spec has {}",
                row.len(),
                self.defs.len()
            )));
        }
        for (def, &v) in self.defs.iter().zip(row) {
            if (v as usize) >= def.levels {
                return Err(Error::AttributeLevel {
                    name: def.name.clone(),
                    value: v,
                    levels: def.levels,
                });
            }
        }
        Ok(())
    }
}

/// The value vector `phi(x, A)` for a subset `A` of attribute indices.
/// The empty subset maps every record to the same canonical key, so all
/// empty keys compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroupKey {
    subset: Vec<usize>,
    values: Vec<u32>,
}

impl GroupKey {
    /// The canonical constant key for the empty subset.
    pub fn marginal() -> Self {
        Self {
            subset: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a key from parallel attribute indices and level values. The
    /// pairs are brought into canonical (sorted, deduplicated) order.
    pub fn new(subset: Vec<usize>, values: Vec<u32>) -> Result<Self> {
        if subset.len() != values.len() {
            return Err(Error::Shape(format!(
                "group key has {} attribute indices but {} values",
                subset.len(),
                values.len()
            )));
        }
        let mut pairs: Vec<(usize, u32)> = subset.into_iter().zip(values).collect();
        pairs.sort_unstable();
        pairs.dedup();
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Invalid(format!(
                    "group key lists attribute {} twice with different values",
                    w[0].0
                )));
            }
        }
        let (subset, values) = pairs.into_iter().unzip();
        Ok(Self { subset, values })
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn is_marginal(&self) -> bool {
        self.subset.is_empty()
    }
}

/// Projects a record's attribute vector onto a subset of attributes.
/// Duplicate indices are collapsed and the subset is kept sorted so that
/// logically equal keys always compare equal.
pub fn phi(record_attributes: &[u32], subset: &[usize]) -> Result<GroupKey> {
    let mut sorted: Vec<usize> = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut values = Vec::with_capacity(sorted.len());
    for &k in &sorted {
        let v = record_attributes.get(k).ok_or(Error::AttributeIndex {
            index: k,
            count: record_attributes.len(),
        })?;
        values.push(*v);
    }
    Ok(GroupKey {
        subset: sorted,
        values,
    })
}

/// Encoded tabular records: an n x d feature matrix, an n x K matrix of
/// attribute codes, and optional labels in `[0, L)`. Each row also carries a
/// stable identity used to key its score randomization draw, so shuffling or
/// subsetting rows never changes per-record randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    attributes: Array2<u32>,
    labels: Option<Vec<usize>>,
    label_count: usize,
    spec: AttributeSpec,
    row_ids: Vec<u64>,
}

impl Dataset {
    /// Builds a dataset with row identities `0..n`.
    pub fn new(
        features: Array2<f64>,
        attributes: Array2<u32>,
        labels: Option<Vec<usize>>,
        label_count: usize,
        spec: AttributeSpec,
    ) -> Result<Self> {
        let n = features.nrows();
        let ids = (0..n as u64).collect();
        Self::with_row_ids(features, attributes, labels, label_count, spec, ids)
    }

    /// Builds a dataset with explicit row identities.
    pub fn with_row_ids(
        features: Array2<f64>,
        attributes: Array2<u32>,
        labels: Option<Vec<usize>>,
        label_count: usize,
        spec: AttributeSpec,
        row_ids: Vec<u64>,
    ) -> Result<Self> {
        let n = features.nrows();
        if attributes.nrows() != n {
            return Err(Error::Shape(format!(
                "{} feature rows but {} attribute rows",
                n,
                attributes.nrows()
            )));
        }
        if attributes.ncols() != spec.len() {
            return Err(Error::Shape(format!(
                "{} attribute columns but spec declares {}",
                attributes.ncols(),
                spec.len()
            )));
        }
        if row_ids.len() != n {
            return Err(Error::Shape(format!(
                "{} rows but {} row ids",
                n,
                row_ids.len()
            )));
        }
        if label_count == 0 {
            return Err(Error::Invalid("label_count must be positive".into()));
        }
        if let Some(ls) = &labels {
            if ls.len() != n {
                return Err(Error::Shape(format!("{} rows but {} labels", n, ls.len())));
            }
            if let Some(&bad) = ls.iter().find(|&&y| y >= label_count) {
                return Err(Error::Invalid(format!(
                    "label {bad} outside [0, {label_count})"
                )));
            }
        }
        for i in 0..n {
            let row = attributes.row(i);
            spec.validate_row(row.as_slice().expect("attribute rows are contiguous"))?;
        }
        Ok(Self {
            features,
            attributes,
            labels,
            label_count,
            spec,
            row_ids,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of sensitive attributes K.
    pub fn attribute_count(&self) -> usize {
        self.spec.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn attributes(&self) -> &Array2<u32> {
        &self.attributes
    }

    pub fn attr_row(&self, i: usize) -> &[u32] {
        self.attributes
            .row(i)
            .to_slice()
            .expect("attribute rows are contiguous")
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|ls| ls[i])
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn spec(&self) -> &AttributeSpec {
        &self.spec
    }

    pub fn row_ids(&self) -> &[u64] {
        &self.row_ids
    }

    /// New dataset holding the given rows (in the given order), keeping their
    /// identities.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = self.features.select(Axis(0), indices);
        let attributes = self.attributes.select(Axis(0), indices);
        let labels = self
            .labels
            .as_ref()
            .map(|ls| indices.iter().map(|&i| ls[i]).collect());
        let row_ids = indices.iter().map(|&i| self.row_ids[i]).collect();
        Dataset {
            features,
            attributes,
            labels,
            label_count: self.label_count,
            spec: self.spec.clone(),
            row_ids,
        }
    }
}

/// Indices of all records whose attribute projection matches `key`.
/// The empty key selects every record.
pub fn restrict_by_group(data: &Dataset, key: &GroupKey) -> Result<Vec<usize>> {
    for &k in key.subset() {
        if k >= data.attribute_count() {
            return Err(Error::AttributeIndex {
                index: k,
                count: data.attribute_count(),
            });
        }
    }
    let mut out = Vec::new();
    'rows: for i in 0..data.n() {
        let row = data.attr_row(i);
        for (&k, &v) in key.subset().iter().zip(key.values()) {
            if row[k] != v {
                continue 'rows;
            }
        }
        out.push(i);
    }
    Ok(out)
}

/// Random disjoint split into train and calibration parts. The train part
/// gets `floor(n * train_fraction)` rows; the split is a deterministic
/// function of the seed.
pub fn split_train_calib(
    data: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if data.n() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 rows to split, got {}",
            data.n()
        )));
    }
    let n = data.n();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream(seed, "split", 0);
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * train_fraction).floor() as usize;
    let (train_idx, calib_idx) = order.split_at(n_train);
    Ok((data.subset(train_idx), data.subset(calib_idx)))
}
