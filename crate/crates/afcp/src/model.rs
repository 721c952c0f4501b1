//! Pluggable probability estimators and one-class scorers, including a small
//! from-scratch MLP trained with full-batch Adam.
//!
//! Numeric features are standardized with statistics fit on the training
//! data only; sensitive attributes enter as one-hot columns. Training is
//! fully deterministic per seed.

use ndarray::{Array1, Array2, Axis};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::data_model::Dataset;
use crate::{Error, Result};

/// A fitted classifier exposing per-class probabilities.
pub trait ProbabilityModel: Send + Sync {
    /// Number of classes L.
    fn label_count(&self) -> usize;

    /// Per-row class probabilities; every row is a simplex over L labels.
    fn predict_proba(&self, data: &Dataset) -> Result<Array2<f64>>;
}

/// A fitted one-class scorer. Higher scores mean more inlier-like.
pub trait OneClassModel: Send + Sync {
    fn score(&self, data: &Dataset) -> Result<Vec<f64>>;
}

/// Shape and optimizer settings for the built-in networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![64, 64, 64, 64],
            learning_rate: 1e-4,
            epochs: 100,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers.contains(&0) {
            return Err(Error::Invalid("hidden layer widths must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Standardizes numeric features and one-hot encodes attributes. Statistics
/// come from the training data and are replayed verbatim at prediction time.
#[derive(Debug, Clone)]
struct Encoder {
    means: Vec<f64>,
    sds: Vec<f64>,
    level_counts: Vec<usize>,
}

impl Encoder {
    fn fit(train: &Dataset) -> Self {
        let n = train.n() as f64;
        let d = train.feature_dim();
        let mut means = vec![0.0; d];
        let mut sds = vec![0.0; d];
        for j in 0..d {
            let col = train.features().column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            means[j] = mean;
            sds[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        let level_counts = train
            .spec()
            .defs()
            .iter()
            .map(|def| def.levels)
            .collect();
        Self {
            means,
            sds,
            level_counts,
        }
    }

    fn width(&self) -> usize {
        self.means.len() + self.level_counts.iter().sum::<usize>()
    }

    fn encode(&self, data: &Dataset) -> Result<Array2<f64>> {
        if data.feature_dim() != self.means.len() {
            return Err(Error::Shape(format!(
                "model expects {} features, data has {}",
                self.means.len(),
                data.feature_dim()
            )));
        }
        if data.attribute_count() != self.level_counts.len() {
            return Err(Error::Shape(format!(
                "model expects {} attributes, data has {}",
                self.level_counts.len(),
                data.attribute_count()
            )));
        }
        let n = data.n();
        let mut x = Array2::zeros((n, self.width()));
        for i in 0..n {
            for j in 0..self.means.len() {
                x[[i, j]] = (data.features()[[i, j]] - self.means[j]) / self.sds[j];
            }
            let mut offset = self.means.len();
            for (k, &count) in self.level_counts.iter().enumerate() {
                let level = data.attr_row(i)[k] as usize;
                if level >= count {
                    return Err(Error::Invalid(format!(
                        "attribute {k} level {level} unseen by the model ({count} levels)"
                    )));
                }
                x[[i, offset + level]] = 1.0;
                offset += count;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: Array2<f64>,
    b: Array1<f64>,
}

#[derive(Debug, Clone)]
struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// Xavier-uniform weights, zero biases, one RNG substream per layer.
    fn new(dims: &[usize], seed: u64) -> Self {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = crate::rng::stream(seed, "mlp-init", i as u64);
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a));
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Self { layers }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w) + &layer.b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        h
    }

    /// Forward pass that keeps each layer's input for backprop.
    /// Returns (inputs per layer, logits).
    fn forward_collect(&self, x: &Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            acts.push(h.clone());
            let mut z = h.dot(&layer.w) + &layer.b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        (acts, h)
    }

    /// Gradients of the loss with respect to every weight and bias, given the
    /// gradient with respect to the logits.
    fn backward(
        &self,
        acts: &[Array2<f64>],
        mut delta: Array2<f64>,
    ) -> Vec<(Array2<f64>, Array1<f64>)> {
        let mut grads: Vec<Option<(Array2<f64>, Array1<f64>)>> = vec![None; self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let gw = acts[l].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads[l] = Some((gw, gb));
            if l > 0 {
                delta = delta.dot(&self.layers[l].w.t());
                // acts[l] is the previous layer's post-ReLU output, so the
                // mask is exactly where it is positive
                delta.zip_mut_with(&acts[l], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
        }
        grads.into_iter().map(Option::unwrap).collect()
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        out
    }

    fn set_params(&mut self, v: &[f64]) {
        let mut pos = 0;
        for layer in &mut self.layers {
            for w in layer.w.iter_mut() {
                *w = v[pos];
                pos += 1;
            }
            for b in layer.b.iter_mut() {
                *b = v[pos];
                pos += 1;
            }
        }
        assert_eq!(pos, v.len());
    }
}

struct Adam {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    t: i32,
    lr: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(net: &Network, lr: f64) -> Self {
        let zeros = |net: &Network| {
            net.layers
                .iter()
                .map(|l| (Array2::zeros(l.w.dim()), Array1::zeros(l.b.len())))
                .collect()
        };
        Self {
            m: zeros(net),
            v: zeros(net),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &[(Array2<f64>, Array1<f64>)]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads[l];
            let (mw, mb) = &mut self.m[l];
            let (vw, vb) = &mut self.v[l];
            mw.zip_mut_with(gw, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            mb.zip_mut_with(gb, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            vw.zip_mut_with(gw, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            vb.zip_mut_with(gb, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            ndarray::Zip::from(&mut layer.w)
                .and(&*mw)
                .and(&*vw)
                .for_each(|w, &m, &v| {
                    *w -= self.lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                });
            ndarray::Zip::from(&mut layer.b)
                .and(&*mb)
                .and(&*vb)
                .for_each(|b, &m, &v| {
                    *b -= self.lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                });
        }
    }
}

fn train_full_batch(
    net: &mut Network,
    x: &Array2<f64>,
    cfg: &MlpConfig,
    mut loss_fn: impl FnMut(&Array2<f64>) -> (f64, Array2<f64>),
) -> Vec<f64> {
    let mut adam = Adam::new(net, cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (acts, logits) = net.forward_collect(x);
        let (loss, delta) = loss_fn(&logits);
        losses.push(loss);
        let grads = net.backward(&acts, delta);
        adam.step(net, &grads);
    }
    losses
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Mean cross-entropy (probabilities floored at 1e-12) and its gradient with
/// respect to the logits.
fn ce_loss_delta(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut delta = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= delta[[i, y]].max(1e-12).ln();
        delta[[i, y]] -= 1.0;
    }
    delta.mapv_inplace(|v| v / n);
    (loss / n, delta)
}

/// Mean binary cross-entropy on a single sigmoid output and its gradient
/// with respect to the logit.
fn bce_loss_delta(logits: &Array2<f64>, targets: &[f64]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut delta = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for i in 0..logits.nrows() {
        let s = 1.0 / (1.0 + (-logits[[i, 0]]).exp());
        let sc = s.clamp(1e-12, 1.0 - 1e-12);
        let t = targets[i];
        loss -= t * sc.ln() + (1.0 - t) * (1.0 - sc).ln();
        delta[[i, 0]] = (s - t) / n;
    }
    (loss / n, delta)
}

/// Multi-class MLP with softmax output.
#[derive(Debug, Clone)]
pub struct SoftmaxMlp {
    encoder: Encoder,
    net: Network,
    label_count: usize,
    training_loss: Vec<f64>,
}

impl SoftmaxMlp {
    /// Mean cross-entropy per epoch, in training order.
    pub fn training_loss(&self) -> &[f64] {
        &self.training_loss
    }
}

impl ProbabilityModel for SoftmaxMlp {
    fn label_count(&self) -> usize {
        self.label_count
    }

    fn predict_proba(&self, data: &Dataset) -> Result<Array2<f64>> {
        let x = self.encoder.encode(data)?;
        Ok(softmax_rows(&self.net.forward(&x)))
    }
}

fn dims_for(encoder: &Encoder, cfg: &MlpConfig, out: usize) -> Vec<usize> {
    let mut dims = vec![encoder.width()];
    dims.extend_from_slice(&cfg.hidden_layers);
    dims.push(out);
    dims
}

pub fn fit_softmax_mlp(train: &Dataset, cfg: &MlpConfig) -> Result<SoftmaxMlp> {
    cfg.validate()?;
    let Some(labels) = train.labels() else {
        return Err(Error::Invalid("classifier training needs labels".into()));
    };
    if train.label_count() < 2 {
        return Err(Error::Invalid("need at least 2 classes".into()));
    }
    let encoder = Encoder::fit(train);
    let x = encoder.encode(train)?;
    let mut net = Network::new(&dims_for(&encoder, cfg, train.label_count()), cfg.seed);
    let labels = labels.to_vec();
    let training_loss = train_full_batch(&mut net, &x, cfg, |logits| {
        ce_loss_delta(logits, &labels)
    });
    Ok(SoftmaxMlp {
        encoder,
        net,
        label_count: train.label_count(),
        training_loss,
    })
}

/// Inlier-vs-outlier discriminator; the conformity score is the predicted
/// inlier probability. Label 0 marks an inlier, label 1 an outlier.
#[derive(Debug, Clone)]
pub struct OneClassMlp {
    encoder: Encoder,
    net: Network,
    training_loss: Vec<f64>,
}

impl OneClassMlp {
    pub fn training_loss(&self) -> &[f64] {
        &self.training_loss
    }
}

impl OneClassModel for OneClassMlp {
    fn score(&self, data: &Dataset) -> Result<Vec<f64>> {
        let x = self.encoder.encode(data)?;
        let logits = self.net.forward(&x);
        Ok(logits
            .column(0)
            .iter()
            .map(|&z| 1.0 / (1.0 + (-z).exp()))
            .collect())
    }
}

pub fn fit_oneclass(train: &Dataset, cfg: &MlpConfig) -> Result<OneClassMlp> {
    cfg.validate()?;
    let Some(labels) = train.labels() else {
        return Err(Error::Invalid("one-class training needs inlier/outlier labels".into()));
    };
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Invalid("one-class labels must be 0 (inlier) or 1 (outlier)".into()));
    }
    let inliers = labels.iter().filter(|&&y| y == 0).count();
    if inliers == 0 || inliers == labels.len() {
        return Err(Error::Invalid(
            "one-class training needs both inliers and outliers".into(),
        ));
    }
    let encoder = Encoder::fit(train);
    let x = encoder.encode(train)?;
    let mut net = Network::new(&dims_for(&encoder, cfg, 1), cfg.seed);
    let targets: Vec<f64> = labels.iter().map(|&y| if y == 0 { 1.0 } else { 0.0 }).collect();
    let training_loss = train_full_batch(&mut net, &x, cfg, |logits| {
        bce_loss_delta(logits, &targets)
    });
    Ok(OneClassMlp {
        encoder,
        net,
        training_loss,
    })
}

/// Replays an externally computed probability matrix. Rows are matched to
/// records through their stable row ids, so the matrix must cover the source
/// dataset the records came from (row id i -> matrix row i).
#[derive(Debug, Clone)]
pub struct ExternalScores {
    probs: Array2<f64>,
}

pub fn external_scores(prob_matrix: Array2<f64>) -> Result<ExternalScores> {
    let mut probs = prob_matrix;
    for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
        if let Some(&bad) = row.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::Probability {
                row: r,
                reason: format!("entry {bad} is negative or non-finite"),
            });
        }
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Probability {
                row: r,
                reason: format!("row sums to {sum}, outside 1 +/- 1e-6"),
            });
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(ExternalScores { probs })
}

impl ProbabilityModel for ExternalScores {
    fn label_count(&self) -> usize {
        self.probs.ncols()
    }

    fn predict_proba(&self, data: &Dataset) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((data.n(), self.probs.ncols()));
        for (i, &id) in data.row_ids().iter().enumerate() {
            let r = id as usize;
            if r >= self.probs.nrows() {
                return Err(Error::Invalid(format!(
                    "row id {id} outside the {}-row external probability matrix",
                    self.probs.nrows()
                )));
            }
            out.row_mut(i).assign(&self.probs.row(r));
        }
        Ok(out)
    }
}

/// Maximum relative disagreement between the analytic cross-entropy gradient
/// and a central finite-difference estimate, at the untrained initial
/// weights. Small values certify the backward pass.
pub fn gradient_check(train: &Dataset, cfg: &MlpConfig) -> Result<f64> {
    cfg.validate()?;
    let Some(labels) = train.labels() else {
        return Err(Error::Invalid("gradient check needs labels".into()));
    };
    let labels = labels.to_vec();
    let encoder = Encoder::fit(train);
    let x = encoder.encode(train)?;
    let mut net = Network::new(&dims_for(&encoder, cfg, train.label_count()), cfg.seed);

    let (acts, logits) = net.forward_collect(&x);
    let (_, delta) = ce_loss_delta(&logits, &labels);
    let grads = net.backward(&acts, delta);
    let mut analytic: Vec<f64> = Vec::new();
    for (gw, gb) in &grads {
        analytic.extend(gw.iter().copied());
        analytic.extend(gb.iter().copied());
    }

    let theta = net.params();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let h = 1e-5 * (1.0 + theta[i].abs());
        let mut plus = theta.clone();
        plus[i] += h;
        net.set_params(&plus);
        let (lp, _) = ce_loss_delta(&net.forward(&x), &labels);
        let mut minus = theta.clone();
        minus[i] -= h;
        net.set_params(&minus);
        let (lm, _) = ce_loss_delta(&net.forward(&x), &labels);
        let numeric = (lp - lm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    net.set_params(&theta);
    Ok(worst)
}
