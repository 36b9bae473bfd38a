use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax, ClassifierConfig, ProbMatrix};
use crate::corpus::ClassIndex;
use crate::error::{Error, Result};
use crate::featurizer::FeatureVector;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Feature vectors paired with their labels.
#[derive(Debug, Clone, Copy)]
pub struct Examples<'a> {
    pub features: &'a [FeatureVector],
    pub labels: &'a [ClassIndex],
}

impl<'a> Examples<'a> {
    pub fn new(features: &'a [FeatureVector], labels: &'a [ClassIndex]) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "{} feature vectors but {} labels",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Softmax regression parameters.
///
/// `weights` is a `(dim + 1) x k` row-major matrix; row `dim` holds the
/// biases.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    dim: usize,
    k: usize,
    weights: Vec<f64>,
    best_val_accuracy: Option<f64>,
    best_epoch: usize,
}

impl TrainedModel {
    pub fn zeros(dim: usize, k: usize) -> Self {
        Self {
            dim,
            k,
            weights: vec![0.0; (dim + 1) * k],
            best_val_accuracy: None,
            best_epoch: 0,
        }
    }

    pub fn from_weights(dim: usize, k: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != (dim + 1) * k {
            return Err(Error::DimensionMismatch {
                expected: (dim + 1) * k,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Invalid("non-finite model weight".into()));
        }
        Ok(Self {
            weights,
            ..Self::zeros(dim, k)
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Validation accuracy of the returned checkpoint, when a validation set
    /// was supplied.
    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.best_val_accuracy
    }

    /// 1-based epoch the checkpoint was taken after.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    fn check_dim(&self, x: &FeatureVector) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.dim(),
            });
        }
        Ok(())
    }

    fn logits_into(&self, x: &FeatureVector, out: &mut [f64]) {
        let k = self.k;
        out.copy_from_slice(&self.weights[self.dim * k..]);
        for &(j, v) in x.entries() {
            let row = &self.weights[j * k..(j + 1) * k];
            for (o, w) in out.iter_mut().zip(row) {
                *o += v * w;
            }
        }
    }

    /// Writes softmax probabilities for `x` into `out` and returns the
    /// log-normaliser `ln sum exp(z)` of the logits `z`.
    fn probabilities_into(&self, x: &FeatureVector, out: &mut [f64]) -> f64 {
        self.logits_into(x, out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        max + sum.ln()
    }

    pub fn predict_proba(&self, features: &[FeatureVector]) -> Result<ProbMatrix> {
        let mut data = vec![0.0; features.len() * self.k];
        for (x, row) in features.iter().zip(data.chunks_mut(self.k)) {
            self.check_dim(x)?;
            self.probabilities_into(x, row);
        }
        Ok(ProbMatrix::from_flat(self.k, data))
    }

    pub fn predict(&self, features: &[FeatureVector]) -> Result<Vec<ClassIndex>> {
        Ok(self.predict_proba(features)?.predictions())
    }

    fn accuracy(&self, examples: Examples<'_>) -> Result<f64> {
        let mut row = vec![0.0; self.k];
        let mut hits = 0usize;
        for (x, &y) in examples.features.iter().zip(examples.labels) {
            self.check_dim(x)?;
            self.probabilities_into(x, &mut row);
            if argmax(&row) == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / examples.len() as f64)
    }

    /// Weighted cross-entropy and its gradient over `batch` positions of
    /// `examples`, accumulating the gradient into `grad`.
    fn accumulate(
        &self,
        examples: Examples<'_>,
        batch: impl Iterator<Item = usize>,
        class_weights: &[f64],
        grad: &mut [f64],
    ) -> Result<f64> {
        let k = self.k;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut probs = vec![0.0; k];
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        let bias = self.dim * k;
        for i in batch {
            let (x, y) = (&examples.features[i], examples.labels[i]);
            self.check_dim(x)?;
            if y >= k {
                return Err(Error::Invalid(format!("label {y} out of range for {k} classes")));
            }
            if x.entries().iter().any(|e| !e.1.is_finite()) {
                return Err(Error::Invalid(format!("non-finite feature in example {i}")));
            }
            let w = class_weights[y];
            self.logits_into(x, &mut probs);
            let logit_y = probs[y];
            let log_norm = self.probabilities_into(x, &mut probs);
            loss += w * (log_norm - logit_y);
            total_weight += w;
            probs[y] -= 1.0;
            for c in 0..k {
                grad[bias + c] += w * probs[c];
            }
            for &(j, v) in x.entries() {
                let row = &mut grad[j * k..(j + 1) * k];
                for (g, p) in row.iter_mut().zip(&probs) {
                    *g += w * v * p;
                }
            }
        }
        if total_weight == 0.0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        grad.iter_mut().for_each(|g| *g /= total_weight);
        Ok(loss / total_weight)
    }
}

/// Class-weighted cross-entropy `-sum w_y ln p_y / sum w_y` over `batch` and
/// its gradient with respect to the model's weight matrix.
pub fn loss_and_grad(model: &TrainedModel, batch: Examples<'_>, class_weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if class_weights.len() != model.k {
        return Err(Error::Config(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            model.k
        )));
    }
    let mut grad = vec![0.0; model.weights.len()];
    let loss = model.accumulate(batch, 0..batch.len(), class_weights, &mut grad)?;
    Ok((loss, grad))
}

/// Trains a zero-initialised softmax regression with Adam over seeded,
/// shuffled mini-batches.
///
/// After every epoch the model is scored on `validation` (when nonempty) and
/// the checkpoint with the highest accuracy is kept, the earliest on ties.
/// Without validation data the final epoch's weights are returned.
pub fn train(
    data: Examples<'_>,
    validation: Option<Examples<'_>>,
    dim: usize,
    num_classes: usize,
    class_weights: &[f64],
    config: &ClassifierConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in data.labels {
        if y >= num_classes {
            return Err(Error::Invalid(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Invalid(format!("class {c} is absent from the training data")));
    }
    if class_weights.len() != num_classes {
        return Err(Error::Config(format!(
            "{} class weights for {num_classes} classes",
            class_weights.len()
        )));
    }
    let validation = validation.filter(|v| !v.is_empty());

    let mut model = TrainedModel::zeros(dim, num_classes);
    let n_params = model.weights.len();
    let mut grad = vec![0.0; n_params];
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            model.accumulate(data, batch.iter().copied(), class_weights, &mut grad)?;
            step += 1;
            let bias1 = 1.0 - BETA1.powi(step);
            let bias2 = 1.0 - BETA2.powi(step);
            for p in 0..n_params {
                let g = grad[p];
                m[p] = BETA1 * m[p] + (1.0 - BETA1) * g;
                v[p] = BETA2 * v[p] + (1.0 - BETA2) * g * g;
                let m_hat = m[p] / bias1;
                let v_hat = v[p] / bias2;
                model.weights[p] -= config.learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        if let Some(val) = validation {
            let acc = model.accuracy(val)?;
            if best.as_ref().is_none_or(|b| acc > b.0) {
                best = Some((acc, epoch, model.weights.clone()));
            }
        }
    }

    match best {
        Some((acc, epoch, weights)) => {
            model.weights = weights;
            model.best_val_accuracy = Some(acc);
            model.best_epoch = epoch;
        }
        None => model.best_epoch = config.epochs,
    }
    if model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Invalid("training diverged to non-finite weights".into()));
    }
    Ok(model)
}
