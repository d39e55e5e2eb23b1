//! Linear-softmax baseline: model, cross-entropy trainer and LSW1 weight files.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;

use super::{ClassDistribution, Classifier, ClassifierKind, Corruption};
use crate::dataset::{ClassCatalog, LabeledDataset};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::substream;

/// Row-major `K x D` weight matrix plus a length-`K` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxWeights {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearSoftmaxWeights {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn new(classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != classes * dim || bias.len() != classes {
            return Err(Error::InvalidArgument(format!(
                "weights {}x{} need {} + {} values, got {} + {}",
                classes,
                dim,
                classes * dim,
                classes,
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite weight".into()));
        }
        Ok(Self {
            classes,
            dim,
            weights,
            bias,
        })
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| self.bias[k] + dot(self.row(k), x))
            .collect()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically safe softmax (max-subtracted).
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone)]
pub struct LinearSoftmax {
    catalog: ClassCatalog,
    weights: LinearSoftmaxWeights,
    dims: (usize, usize, usize),
}

impl LinearSoftmax {
    pub fn new(
        catalog: ClassCatalog,
        weights: LinearSoftmaxWeights,
        dims: (usize, usize, usize),
    ) -> Result<Self> {
        if weights.classes != catalog.len() {
            return Err(Error::InvalidArgument(format!(
                "weights have {} classes, catalog has {}",
                weights.classes,
                catalog.len()
            )));
        }
        if weights.dim != dims.0 * dims.1 * dims.2 {
            return Err(Error::InvalidArgument(format!(
                "weights expect {} inputs, {}x{}x{} images have {}",
                weights.dim,
                dims.0,
                dims.1,
                dims.2,
                dims.0 * dims.1 * dims.2
            )));
        }
        Ok(Self {
            catalog,
            weights,
            dims,
        })
    }

    pub fn weights(&self) -> &LinearSoftmaxWeights {
        &self.weights
    }

    fn distribution(mut logits: Vec<f64>) -> ClassDistribution {
        softmax_in_place(&mut logits);
        ClassDistribution::from_normalized(logits)
    }
}

impl Classifier for LinearSoftmax {
    fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    fn input_dims(&self) -> Option<(usize, usize, usize)> {
        Some(self.dims)
    }

    fn kind(&self) -> ClassifierKind {
        ClassifierKind::LinearSoftmax
    }

    fn classify_batch(&self, images: &[Image]) -> Result<Vec<ClassDistribution>> {
        images
            .iter()
            .map(|img| {
                self.check_dims(img)?;
                Ok(Self::distribution(self.weights.logits(img.pixels())))
            })
            .collect()
    }

    /// Updates the base logits by the weighted pixel deltas inside each rect
    /// instead of re-evaluating the whole image.
    fn classify_corrupted(&self, base: &Image, batch: &[Corruption]) -> Result<Vec<ClassDistribution>> {
        self.check_dims(base)?;
        let base_logits = self.weights.logits(base.pixels());
        let c = base.channels();
        batch
            .iter()
            .map(|corr| {
                base.check_rect(corr.rect)?;
                if corr.values.len() != corr.rect.area() * c {
                    return Err(Error::InvalidArgument(format!(
                        "corruption of {} carries {} values",
                        corr.rect,
                        corr.values.len()
                    )));
                }
                let mut logits = base_logits.clone();
                let row_len = corr.rect.w * c;
                for (ry, vals) in corr.values.chunks_exact(row_len).enumerate() {
                    let start = base.index(corr.rect.x, corr.rect.y + ry, 0);
                    let old = &base.pixels()[start..start + row_len];
                    for (k, logit) in logits.iter_mut().enumerate() {
                        let w = &self.weights.row(k)[start..start + row_len];
                        *logit += w
                            .iter()
                            .zip(vals.iter().zip(old))
                            .map(|(w, (&new, &old))| w * (crate::imaging::clamp_unit(new) - old))
                            .sum::<f64>();
                    }
                }
                Ok(Self::distribution(logits))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    /// `None` trains full-batch; otherwise seeded shuffled mini-batches.
    pub batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.5,
            l2: 1e-3,
            seed: 0,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: LinearSoftmaxWeights,
    /// Full-set objective before each epoch, plus the final value.
    pub loss_history: Vec<f64>,
}

/// Mean cross-entropy plus `l2 * |W|^2 / 2` (bias unregularized) and its
/// gradient with respect to weights and bias.
pub fn loss_and_gradient(
    model: &LinearSoftmaxWeights,
    inputs: &[&[f64]],
    labels: &[usize],
    l2: f64,
) -> (f64, LinearSoftmaxWeights) {
    let n = inputs.len().max(1) as f64;
    let mut grad = LinearSoftmaxWeights::zeros(model.classes, model.dim);
    let mut loss = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let mut p = model.logits(x);
        let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = p.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - p[y];
        softmax_in_place(&mut p);
        for (k, pk) in p.iter().enumerate() {
            let err = (pk - if k == y { 1.0 } else { 0.0 }) / n;
            grad.bias[k] += err;
            let row = &mut grad.weights[k * model.dim..(k + 1) * model.dim];
            for (g, xi) in row.iter_mut().zip(x.iter()) {
                *g += err * xi;
            }
        }
    }
    loss /= n;
    let sq: f64 = model.weights.iter().map(|w| w * w).sum();
    loss += 0.5 * l2 * sq;
    for (g, w) in grad.weights.iter_mut().zip(&model.weights) {
        *g += l2 * w;
    }
    (loss, grad)
}

/// Gradient descent on cross-entropy from zero weights.
pub fn train_on_samples(
    samples: &[(Image, usize)],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let dims = first.0.dims();
    if let Some((img, _)) = samples.iter().find(|(img, _)| img.dims() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            found: img.dims(),
        });
    }
    if let Some((_, y)) = samples.iter().find(|(_, y)| *y >= classes) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    let dim = dims.0 * dims.1 * dims.2;
    let inputs: Vec<&[f64]> = samples.iter().map(|(img, _)| img.pixels()).collect();
    let labels: Vec<usize> = samples.iter().map(|(_, y)| *y).collect();
    let mut model = LinearSoftmaxWeights::zeros(classes, dim);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    let step = |model: &mut LinearSoftmaxWeights, grad: &LinearSoftmaxWeights| {
        for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
            *w -= cfg.learning_rate * g;
        }
        for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
            *b -= cfg.learning_rate * g;
        }
    };

    for epoch in 0..cfg.epochs {
        let (loss, grad) = loss_and_gradient(&model, &inputs, &labels, cfg.l2);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.push(loss);
        match cfg.batch_size {
            None => step(&mut model, &grad),
            Some(bs) => {
                order.shuffle(&mut substream(cfg.seed, epoch as u64));
                for chunk in order.chunks(bs.max(1)) {
                    let xs: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i]).collect();
                    let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    let (_, g) = loss_and_gradient(&model, &xs, &ys, cfg.l2);
                    step(&mut model, &g);
                }
            }
        }
    }
    let (loss, _) = loss_and_gradient(&model, &inputs, &labels, cfg.l2);
    if !loss.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFiniteLoss { epoch: cfg.epochs });
    }
    history.push(loss);
    Ok(TrainOutcome {
        weights: model,
        loss_history: history,
    })
}

pub fn train_linear_softmax(train: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let samples = train.load_all()?;
    train_on_samples(&samples, train.catalog().len(), cfg)
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// `LSW1 K D` header, then one row per class: D weights followed by the bias.
pub fn write_lsw<W: Write>(mut out: W, w: &LinearSoftmaxWeights) -> Result<()> {
    writeln!(out, "LSW1 {} {}", w.classes, w.dim)?;
    for k in 0..w.classes {
        let row: Vec<String> = w
            .row(k)
            .iter()
            .chain(std::iter::once(&w.bias[k]))
            .map(|&v| fmt_real(v))
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn read_lsw<R: BufRead>(input: R) -> Result<LinearSoftmaxWeights> {
    let mut tokens = Vec::new();
    for line in input.lines() {
        let line = line?;
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    let mut it = tokens.into_iter();
    if it.next().as_deref() != Some("LSW1") {
        return Err(Error::format("LSW1", "missing magic"));
    }
    let mut header = |what: &str| -> Result<usize> {
        it.next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format("LSW1", format!("bad {what}")))
    };
    let classes = header("K")?;
    let dim = header("D")?;
    let values: Vec<f64> = it
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("LSW1", e.to_string()))?;
    if values.len() != classes * (dim + 1) {
        return Err(Error::format(
            "LSW1",
            format!("expected {} values, found {}", classes * (dim + 1), values.len()),
        ));
    }
    let mut weights = Vec::with_capacity(classes * dim);
    let mut bias = Vec::with_capacity(classes);
    for row in values.chunks_exact(dim + 1) {
        weights.extend_from_slice(&row[..dim]);
        bias.push(row[dim]);
    }
    LinearSoftmaxWeights::new(classes, dim, weights, bias)
}
