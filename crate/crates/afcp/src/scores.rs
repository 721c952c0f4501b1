//! Adaptive conformity scores with explicit tie-breaking randomization.
//!
//! Each record draws a single uniform u, keyed to its stable row id, and
//! shares it across all L candidate labels. Because the draw travels with
//! the record, permuting or subsetting rows never changes any score.

use ndarray::Array2;

use crate::data_model::Dataset;
use crate::model::ProbabilityModel;
use crate::{Error, Result};

fn validate_simplex(pi: &[f64]) -> Result<()> {
    if pi.is_empty() {
        return Err(Error::Invalid("probability vector is empty".into()));
    }
    if pi.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Invalid(
            "probability vector has negative or non-finite entries".into(),
        ));
    }
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!(
            "probability vector sums to {sum}, outside 1 +/- 1e-6"
        )));
    }
    Ok(())
}

fn aps_unchecked(pi: &[f64], y: usize, u: f64) -> f64 {
    let py = pi[y];
    let mut higher = 0.0;
    let mut tied = 0.0;
    for &p in pi {
        if p > py {
            higher += p;
        } else if p == py {
            tied += p;
        }
    }
    (1.0 - (higher + u * tied)).clamp(0.0, 1.0)
}

/// Conformity of label y under class probabilities pi with randomization u:
/// one minus the probability mass strictly above pi[y], minus u times the
/// mass exactly tied with it (pi[y]'s own mass included). Higher values mean
/// the label is more plausible.
pub fn aps_conformity(pi: &[f64], y: usize, u: f64) -> Result<f64> {
    validate_simplex(pi)?;
    if y >= pi.len() {
        return Err(Error::Invalid(format!(
            "label {y} out of range for {} classes",
            pi.len()
        )));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Invalid(format!("u must be in [0, 1], got {u}")));
    }
    Ok(aps_unchecked(pi, y, u))
}

/// Conformity scores S_j^y for every (record, candidate label) pair, plus
/// the per-record randomization draws that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    values: Array2<f64>,
    draws: Vec<f64>,
}

impl ScoreTensor {
    pub fn from_values(values: Array2<f64>, draws: Vec<f64>) -> Result<Self> {
        if draws.len() != values.nrows() {
            return Err(Error::Shape(format!(
                "{} score rows but {} randomization draws",
                values.nrows(),
                draws.len()
            )));
        }
        Ok(Self { values, draws })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn label_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn draws(&self) -> &[f64] {
        &self.draws
    }

    pub fn score(&self, j: usize, y: usize) -> f64 {
        self.values[[j, y]]
    }

    /// Row j's full score vector.
    pub fn row(&self, j: usize) -> &[f64] {
        self.values
            .row(j)
            .to_slice()
            .expect("score rows are contiguous")
    }

    /// Each record's score at its own label: S_i^{Y_i}.
    pub fn own_scores(&self, labels: &[usize]) -> Result<Vec<f64>> {
        if labels.len() != self.rows() {
            return Err(Error::Shape(format!(
                "{} labels for a {}-row score tensor",
                labels.len(),
                self.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.label_count()) {
            return Err(Error::Invalid(format!(
                "label {bad} out of range for {} classes",
                self.label_count()
            )));
        }
        Ok(labels
            .iter()
            .enumerate()
            .map(|(i, &y)| self.values[[i, y]])
            .collect())
    }
}

fn build_tensor(probs: &Array2<f64>, draws: Vec<f64>) -> Result<ScoreTensor> {
    let (m, l) = probs.dim();
    let mut values = Array2::zeros((m, l));
    for j in 0..m {
        let row = probs.row(j);
        let pi = row.to_slice().expect("probability rows are contiguous");
        validate_simplex(pi).map_err(|_| Error::Probability {
            row: j,
            reason: "model emitted an invalid probability row".into(),
        })?;
        for y in 0..l {
            values[[j, y]] = aps_unchecked(pi, y, draws[j]);
        }
    }
    ScoreTensor::from_values(values, draws)
}

/// Scores every record of `data` under `model`, drawing one uniform per
/// record keyed to (seed, row id).
pub fn score_tensor(
    model: &dyn ProbabilityModel,
    data: &Dataset,
    seed: u64,
) -> Result<ScoreTensor> {
    let probs = model.predict_proba(data)?;
    let draws: Vec<f64> = data
        .row_ids()
        .iter()
        .map(|&id| crate::rng::record_uniform(seed, id))
        .collect();
    build_tensor(&probs, draws)
}

/// Debugging variant with u fixed to 1 for every record: the score becomes
/// one minus the mass at or above the label's probability, with no
/// randomness.
pub fn score_tensor_deterministic(
    model: &dyn ProbabilityModel,
    data: &Dataset,
) -> Result<ScoreTensor> {
    let probs = model.predict_proba(data)?;
    let draws = vec![1.0; data.n()];
    build_tensor(&probs, draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::AttributeSpec;
    use crate::model::external_scores;
    use proptest::prelude::*;
    use rand::RngExt;

    #[test]
    fn worked_examples() {
        let pi = [0.6, 0.3, 0.1];
        assert!((aps_conformity(&pi, 1, 0.0).unwrap() - 0.4).abs() < 1e-12);
        assert!((aps_conformity(&pi, 0, 1.0).unwrap() - 0.4).abs() < 1e-12);
        let uniform = [0.25; 4];
        for y in 0..4 {
            assert!((aps_conformity(&uniform, y, 0.5).unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(aps_conformity(&[0.5, 0.6], 0, 0.5).is_err());
        assert!(aps_conformity(&[-0.1, 1.1], 0, 0.5).is_err());
        assert!(aps_conformity(&[0.5, 0.5], 2, 0.5).is_err());
        assert!(aps_conformity(&[0.5, 0.5], 0, 1.5).is_err());
    }

    fn unlabeled(n: usize) -> Dataset {
        Dataset::new(
            Array2::zeros((n, 1)),
            Array2::zeros((n, 0)),
            None,
            3,
            AttributeSpec::empty(),
        )
        .unwrap()
    }

    #[test]
    fn degenerate_row_scores() {
        let model = external_scores(ndarray::array![[1.0, 0.0, 0.0]]).unwrap();
        let data = unlabeled(1);
        let t = score_tensor(&model, &data, 3).unwrap();
        let u = t.draws()[0];
        assert!((t.score(0, 0) - (1.0 - u)).abs() < 1e-12);
        assert_eq!(t.score(0, 1), 0.0);
        assert_eq!(t.score(0, 2), 0.0);

        let d = score_tensor_deterministic(&model, &data).unwrap();
        assert_eq!(d.score(0, 0), 0.0);
    }

    #[test]
    fn tensors_are_deterministic_and_permutation_stable() {
        let probs = ndarray::array![
            [0.7, 0.2, 0.1],
            [0.1, 0.8, 0.1],
            [0.3, 0.3, 0.4],
            [0.25, 0.5, 0.25],
            [0.05, 0.05, 0.9]
        ];
        let model = external_scores(probs).unwrap();
        let data = unlabeled(5);
        let a = score_tensor(&model, &data, 17).unwrap();
        let b = score_tensor(&model, &data, 17).unwrap();
        assert_eq!(a, b);

        let perm = [3usize, 1, 4, 0, 2];
        let shuffled = data.subset(&perm);
        let c = score_tensor(&model, &shuffled, 17).unwrap();
        for (pos, &orig) in perm.iter().enumerate() {
            assert_eq!(c.row(pos), a.row(orig));
            assert_eq!(c.draws()[pos], a.draws()[orig]);
        }
    }

    #[test]
    fn scores_are_uniform_for_labels_drawn_from_pi() {
        let pi = [0.3, 0.25, 0.2, 0.15, 0.1];
        let mut rng = crate::rng::stream(23, "unit", 0);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut target: f64 = rng.random();
            let mut y = 0;
            for (k, &p) in pi.iter().enumerate() {
                if target < p {
                    y = k;
                    break;
                }
                target -= p;
                y = k;
            }
            let u: f64 = rng.random();
            let s = aps_conformity(&pi, y, u).unwrap();
            sum += s;
            sumsq += s * s;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.005, "var {var}");
    }

    proptest! {
        #[test]
        fn monotone_in_probability_rank(
            raw in proptest::collection::vec(0.01f64..1.0, 2..6),
            u in 0.0f64..1.0
        ) {
            let sum: f64 = raw.iter().sum();
            let pi: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            for a in 0..pi.len() {
                for b in 0..pi.len() {
                    if pi[a] > pi[b] {
                        let sa = aps_conformity(&pi, a, u).unwrap();
                        let sb = aps_conformity(&pi, b, u).unwrap();
                        prop_assert!(sa >= sb);
                    }
                }
            }
        }

        #[test]
        fn scores_stay_in_unit_interval(
            raw in proptest::collection::vec(0.0f64..1.0, 2..6),
            u in 0.0f64..1.0
        ) {
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 1e-9);
            let pi: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            for y in 0..pi.len() {
                let s = aps_conformity(&pi, y, u).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }
}
