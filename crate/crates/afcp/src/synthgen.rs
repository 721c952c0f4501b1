//! Synthetic data generators and dataset perturbations used by the
//! experiment harness.
//!
//! Both generators share the same covariate layout: a binary Color attribute
//! (Blue is rare), a five-level Age Group assigned cyclically by row index, a
//! four-level Region drawn uniformly, and i.i.d. Uniform[0,1] features of
//! which the first drives the label.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, RngExt};

use crate::data_model::{restrict_by_group, AttributeDef, AttributeSpec, Dataset, GroupKey};
use crate::{Error, Result};

pub const MEDICAL_LABELS: usize = 6;
pub const AGE_LEVELS: usize = 5;
pub const REGION_LEVELS: usize = 4;

/// Configuration for the multi-class generator.
#[derive(Debug, Clone, PartialEq)]
pub struct MedicalSynthConfig {
    pub n: usize,
    pub blue_prob: f64,
    pub num_noise_features: usize,
    pub seed: u64,
}

impl MedicalSynthConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            blue_prob: 0.1,
            num_noise_features: 6,
            seed,
        }
    }
}

/// Configuration for the outlier-detection generator.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSynthConfig {
    pub n: usize,
    pub blue_prob: f64,
    pub seed: u64,
}

impl OutlierSynthConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            blue_prob: 0.1,
            seed,
        }
    }
}

/// The shared attribute layout of both generators. Every attribute carries
/// explicit level names so a round trip through CSV export and ingestion
/// rebuilds an identical spec.
pub fn covariate_spec() -> AttributeSpec {
    let numbered = |n: usize| (0..n).map(|v| v.to_string()).collect();
    AttributeSpec::new(vec![
        AttributeDef::new("Color", 2, 0).with_level_names(vec!["Blue".into(), "Grey".into()]),
        AttributeDef::new("Age Group", AGE_LEVELS, 1).with_level_names(numbered(AGE_LEVELS)),
        AttributeDef::new("Region", REGION_LEVELS, 2).with_level_names(numbered(REGION_LEVELS)),
    ])
    .expect("static spec is valid")
}

fn check_common(n: usize, blue_prob: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Invalid("generator needs n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&blue_prob) {
        return Err(Error::Invalid(format!(
            "blue_prob must be in [0, 1], got {blue_prob}"
        )));
    }
    Ok(())
}

/// Draws the shared covariates for one row: Color, Region, and the feature
/// vector. Age Group is the caller's row index mod 5.
fn draw_covariates(
    rng: &mut impl Rng,
    blue_prob: f64,
    num_features: usize,
    features: &mut [f64],
) -> (u32, u32) {
    let color = if rng.random::<f64>() < blue_prob { 0 } else { 1 };
    let region = rng.random_range(0..REGION_LEVELS as u32);
    for f in features.iter_mut().take(num_features) {
        *f = rng.random::<f64>();
    }
    (color, region)
}

/// Six-class synthetic classification data. Labels follow a decision tree on
/// (Color, X1): Blue rows get a uniform label from {0,1,2} when X1 < 0.5 and
/// from {3,4,5} otherwise, while Grey rows get the deterministic bin
/// min(floor(6*X1), 5). The rare Blue group is therefore irreducibly noisy.
pub fn gen_medical(cfg: &MedicalSynthConfig) -> Result<Dataset> {
    check_common(cfg.n, cfg.blue_prob)?;
    if cfg.num_noise_features == 0 {
        return Err(Error::Invalid(
            "num_noise_features must be >= 1 (the label depends on X1)".into(),
        ));
    }
    let n = cfg.n;
    let d = cfg.num_noise_features;
    let mut rng = crate::rng::stream(cfg.seed, "gen-medical", 0);
    let mut features = Array2::zeros((n, d));
    let mut attributes = Array2::zeros((n, 3));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = features
            .row_mut(i)
            .into_slice()
            .expect("feature rows are contiguous");
        let (color, region) = draw_covariates(&mut rng, cfg.blue_prob, d, row);
        let x1 = row[0];
        attributes[[i, 0]] = color;
        attributes[[i, 1]] = (i % AGE_LEVELS) as u32;
        attributes[[i, 2]] = region;
        let y = if color == 0 {
            let base = if x1 < 0.5 { 0 } else { 3 };
            base + rng.random_range(0..3usize)
        } else {
            ((6.0 * x1).floor() as usize).min(MEDICAL_LABELS - 1)
        };
        labels.push(y);
    }
    Dataset::new(
        features,
        attributes,
        Some(labels),
        MEDICAL_LABELS,
        covariate_spec(),
    )
}

/// Binary outlier-detection data over the same covariates; label 1 marks an
/// outlier. Blue rows are outliers with probability 1/2 independently of the
/// features, so no score function can separate them; Grey rows are outliers
/// exactly when X1 >= 0.5.
pub fn gen_outlier(cfg: &OutlierSynthConfig) -> Result<Dataset> {
    check_common(cfg.n, cfg.blue_prob)?;
    let n = cfg.n;
    let d = 6;
    let mut rng = crate::rng::stream(cfg.seed, "gen-outlier", 0);
    let mut features = Array2::zeros((n, d));
    let mut attributes = Array2::zeros((n, 3));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = features
            .row_mut(i)
            .into_slice()
            .expect("feature rows are contiguous");
        let (color, region) = draw_covariates(&mut rng, cfg.blue_prob, d, row);
        attributes[[i, 0]] = color;
        attributes[[i, 1]] = (i % AGE_LEVELS) as u32;
        attributes[[i, 2]] = region;
        let y = if color == 0 {
            usize::from(rng.random::<f64>() < 0.5)
        } else {
            usize::from(row[0] >= 0.5)
        };
        labels.push(y);
    }
    Dataset::new(features, attributes, Some(labels), 2, covariate_spec())
}

/// Nearest-integer rounding of a perturbed label, half away from zero,
/// clamped into the valid range.
pub(crate) fn perturb_label(label: usize, delta: f64, label_count: usize) -> usize {
    let noisy = (label as f64 + delta).round();
    let max = (label_count - 1) as f64;
    noisy.clamp(0.0, max) as usize
}

/// Adds uniform noise on (-noise_width/2, +noise_width/2) to the labels of
/// every row in the given group, rounding to the nearest integer and clamping
/// into [0, L). Rows outside the group are untouched.
pub fn inject_label_noise(
    data: &Dataset,
    group: &GroupKey,
    noise_width: f64,
    seed: u64,
) -> Result<Dataset> {
    if noise_width < 0.0 {
        return Err(Error::Invalid(format!(
            "noise_width must be >= 0, got {noise_width}"
        )));
    }
    let Some(labels) = data.labels() else {
        return Err(Error::Invalid("label noise needs a labeled dataset".into()));
    };
    let rows = restrict_by_group(data, group)?;
    let mut new_labels = labels.to_vec();
    let mut rng = crate::rng::stream(seed, "label-noise", 0);
    let half = noise_width / 2.0;
    for &i in &rows {
        let delta = rng.random_range(-half..=half);
        new_labels[i] = perturb_label(labels[i], delta, data.label_count());
    }
    Dataset::with_row_ids(
        data.features().clone(),
        data.attributes().clone(),
        Some(new_labels),
        data.label_count(),
        data.spec().clone(),
        data.row_ids().to_vec(),
    )
}

/// Number of group rows kept by [`downsample_group`]. Ceiling of
/// fraction * m, with a tolerance so that binary-representation error in the
/// product cannot bump the count up by one.
fn kept_count(keep_fraction: f64, m: usize) -> usize {
    let raw = keep_fraction * m as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// Keeps a uniformly chosen ceil(keep_fraction * m) of the rows in the given
/// group and every row outside it, preserving the original row order.
pub fn downsample_group(
    data: &Dataset,
    group: &GroupKey,
    keep_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::Invalid(format!(
            "keep_fraction must be in [0, 1], got {keep_fraction}"
        )));
    }
    let group_rows = restrict_by_group(data, group)?;
    let m = group_rows.len();
    let keep = kept_count(keep_fraction, m);
    let mut rng = crate::rng::stream(seed, "downsample", 0);
    let chosen = sample(&mut rng, m, keep);
    let mut kept_flags = vec![false; data.n()];
    for pos in chosen {
        kept_flags[group_rows[pos]] = true;
    }
    let in_group = {
        let mut f = vec![false; data.n()];
        for &i in &group_rows {
            f[i] = true;
        }
        f
    };
    let indices: Vec<usize> = (0..data.n())
        .filter(|&i| !in_group[i] || kept_flags[i])
        .collect();
    Ok(data.subset(&indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::phi;
    use ndarray::Array2;

    #[test]
    fn medical_label_table_matches_decision_tree() {
        let cfg = MedicalSynthConfig::new(100_000, 11);
        let data = gen_medical(&cfg).unwrap();
        let mut blue_low = [0usize; MEDICAL_LABELS];
        let mut blue_high = [0usize; MEDICAL_LABELS];
        let mut n_low = 0usize;
        let mut n_high = 0usize;
        for i in 0..data.n() {
            let x1 = data.features()[[i, 0]];
            let y = data.label(i).unwrap();
            if data.attr_row(i)[0] == 1 {
                assert_eq!(y, ((6.0 * x1).floor() as usize).min(5));
            } else if x1 < 0.5 {
                blue_low[y] += 1;
                n_low += 1;
            } else {
                blue_high[y] += 1;
                n_high += 1;
            }
        }
        for y in 0..3 {
            let f = blue_low[y] as f64 / n_low as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.03, "blue low label {y}: {f}");
            assert_eq!(blue_high[y], 0);
        }
        for y in 3..6 {
            let f = blue_high[y] as f64 / n_high as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.03, "blue high label {y}: {f}");
            assert_eq!(blue_low[y], 0);
        }
    }

    #[test]
    fn covariate_marginals_are_right() {
        let cfg = MedicalSynthConfig::new(100_000, 3);
        let data = gen_medical(&cfg).unwrap();
        let blue = (0..data.n()).filter(|&i| data.attr_row(i)[0] == 0).count();
        assert!((blue as f64 / data.n() as f64 - 0.1).abs() < 0.01);
        let mut region_counts = [0usize; REGION_LEVELS];
        for i in 0..data.n() {
            region_counts[data.attr_row(i)[2] as usize] += 1;
        }
        for c in region_counts {
            assert!((c as f64 / data.n() as f64 - 0.25).abs() < 0.02);
        }
        for i in 0..data.n() {
            assert_eq!(data.attr_row(i)[1], (i % AGE_LEVELS) as u32);
        }
    }

    #[test]
    fn generators_are_reproducible() {
        let cfg = MedicalSynthConfig::new(500, 42);
        assert_eq!(gen_medical(&cfg).unwrap(), gen_medical(&cfg).unwrap());
        let other = MedicalSynthConfig::new(500, 43);
        assert_ne!(gen_medical(&cfg).unwrap(), gen_medical(&other).unwrap());

        let od = OutlierSynthConfig::new(500, 42);
        assert_eq!(gen_outlier(&od).unwrap(), gen_outlier(&od).unwrap());
    }

    #[test]
    fn zero_blue_prob_means_deterministic_labels() {
        let mut cfg = MedicalSynthConfig::new(2_000, 9);
        cfg.blue_prob = 0.0;
        let data = gen_medical(&cfg).unwrap();
        for i in 0..data.n() {
            assert_eq!(data.attr_row(i)[0], 1);
            let x1 = data.features()[[i, 0]];
            assert_eq!(data.label(i).unwrap(), ((6.0 * x1).floor() as usize).min(5));
        }
    }

    #[test]
    fn outlier_labels_follow_the_mixture() {
        let cfg = OutlierSynthConfig::new(100_000, 5);
        let data = gen_outlier(&cfg).unwrap();
        let mut blue_outliers = 0usize;
        let mut blue_total = 0usize;
        for i in 0..data.n() {
            let y = data.label(i).unwrap();
            if data.attr_row(i)[0] == 1 {
                let x1 = data.features()[[i, 0]];
                assert_eq!(y, usize::from(x1 >= 0.5));
            } else {
                blue_total += 1;
                blue_outliers += y;
            }
        }
        let f = blue_outliers as f64 / blue_total as f64;
        assert!((f - 0.5).abs() < 0.02, "blue outlier rate {f}");
        let overall: usize = (0..data.n()).map(|i| data.label(i).unwrap()).sum();
        assert!((overall as f64 / data.n() as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn generators_reject_bad_configs() {
        assert!(gen_medical(&MedicalSynthConfig::new(0, 1)).is_err());
        let mut cfg = MedicalSynthConfig::new(10, 1);
        cfg.blue_prob = 1.5;
        assert!(gen_medical(&cfg).is_err());
        let mut cfg = MedicalSynthConfig::new(10, 1);
        cfg.num_noise_features = 0;
        assert!(gen_medical(&cfg).is_err());
        assert!(gen_outlier(&OutlierSynthConfig::new(0, 1)).is_err());
    }

    #[test]
    fn perturb_label_rounds_half_away_and_clamps() {
        assert_eq!(perturb_label(2, 0.6, 6), 3);
        assert_eq!(perturb_label(2, 0.5, 6), 3);
        assert_eq!(perturb_label(2, -0.5, 6), 2);
        assert_eq!(perturb_label(5, 0.9, 6), 5);
        assert_eq!(perturb_label(0, -0.9, 6), 0);
        assert_eq!(perturb_label(3, 0.0, 6), 3);
    }

    #[test]
    fn zero_noise_is_identity() {
        let data = gen_medical(&MedicalSynthConfig::new(50, 7)).unwrap();
        let noisy = inject_label_noise(&data, &GroupKey::marginal(), 0.0, 99).unwrap();
        assert_eq!(data, noisy);
        // width below 1 can never move a label either
        let noisy = inject_label_noise(&data, &GroupKey::marginal(), 0.9, 99).unwrap();
        assert_eq!(data, noisy);
    }

    #[test]
    fn noise_touches_only_the_group_and_stays_in_range() {
        let data = gen_medical(&MedicalSynthConfig::new(400, 7)).unwrap();
        let blue = phi(&[0, 0, 0], &[0]).unwrap();
        let noisy = inject_label_noise(&data, &blue, 4.0, 99).unwrap();
        let mut changed = 0usize;
        for i in 0..data.n() {
            let before = data.label(i).unwrap();
            let after = noisy.label(i).unwrap();
            assert!(after < data.label_count());
            if data.attr_row(i)[0] == 1 {
                assert_eq!(before, after);
            } else if before != after {
                changed += 1;
            }
        }
        assert!(changed > 0, "width-4 noise should move some blue labels");
        assert!(inject_label_noise(&data, &blue, -1.0, 0).is_err());
    }

    #[test]
    fn downsample_keeps_ceiling_of_group() {
        let features = Array2::zeros((47, 1));
        let mut attributes = Array2::zeros((47, 1));
        for i in 40..47 {
            attributes[[i, 0]] = 1;
        }
        let spec = AttributeSpec::new(vec![AttributeDef::new("G", 2, 0)]).unwrap();
        let data = Dataset::new(features, attributes, None, 2, spec).unwrap();
        let level0 = phi(&[0], &[0]).unwrap();

        let kept = downsample_group(&data, &level0, 0.1, 3).unwrap();
        assert_eq!(kept.n(), 4 + 7);
        let zeros = (0..kept.n()).filter(|&i| kept.attr_row(i)[0] == 0).count();
        assert_eq!(zeros, 4);

        assert_eq!(downsample_group(&data, &level0, 1.0, 3).unwrap(), data);
        let gone = downsample_group(&data, &level0, 0.0, 3).unwrap();
        assert_eq!(gone.n(), 7);
        assert!(downsample_group(&data, &level0, 1.2, 3).is_err());

        // order is preserved and the result is seed-deterministic
        let again = downsample_group(&data, &level0, 0.1, 3).unwrap();
        assert_eq!(kept, again);
        let mut ids = kept.row_ids().to_vec();
        ids.sort_unstable();
        assert_eq!(ids, kept.row_ids(), "row order preserved");
    }

    #[test]
    fn kept_count_handles_float_edges() {
        assert_eq!(kept_count(0.1, 40), 4);
        assert_eq!(kept_count(0.1, 45), 5);
        assert_eq!(kept_count(0.0, 40), 0);
        assert_eq!(kept_count(1.0, 40), 40);
        assert_eq!(kept_count(0.25, 2), 1);
    }
}
