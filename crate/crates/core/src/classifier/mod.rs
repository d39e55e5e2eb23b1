//! Black-box classifier abstraction.
//!
//! The engine only sees [`Classifier`]: images in, class distributions out.
//! Built-ins are a constant model and a linear-softmax baseline; real deep
//! models attach through the line-delimited JSON protocol in [`external`].

pub mod external;
mod linear;

pub use external::{conformance_check, ConformanceReport, ExternalClassifier, ExternalOptions};
pub use linear::{
    loss_and_gradient, read_lsw, softmax_in_place, train_linear_softmax, write_lsw,
    LinearSoftmax, LinearSoftmaxWeights, TrainConfig, TrainOutcome,
};

use std::sync::Arc;

use crate::dataset::ClassCatalog;
use crate::error::{Error, Result};
use crate::imaging::{Image, Rect};

/// Tolerance on the total mass of built-in distributions.
pub const BUILTIN_SUM_TOL: f64 = 1e-9;
/// Tolerance on replies from external processes; within it replies are renormalized.
pub const EXTERNAL_SUM_TOL: f64 = 1e-6;

/// Probability vector over the catalog's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::validate(&probs, BUILTIN_SUM_TOL)?;
        Ok(Self { probs })
    }

    /// Validates an externally produced vector and renormalizes it.
    pub fn from_external(mut probs: Vec<f64>) -> Result<Self> {
        Self::validate(&probs, EXTERNAL_SUM_TOL)?;
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p = (*p / sum).min(1.0);
        }
        Ok(Self { probs })
    }

    fn validate(probs: &[f64], tol: f64) -> Result<()> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::InvalidDistribution(format!("entry {p} outside [0,1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    /// Trusted constructor for vectors produced by softmax or convex combination.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Self { probs }
    }

    /// Weighted average of distributions; weights must sum to 1.
    pub fn mixture<'a>(parts: impl IntoIterator<Item = (f64, &'a ClassDistribution)>) -> Self {
        let mut acc: Vec<f64> = Vec::new();
        for (w, d) in parts {
            if acc.is_empty() {
                acc = vec![0.0; d.len()];
            }
            for (a, p) in acc.iter_mut().zip(&d.probs) {
                *a += w * p;
            }
        }
        for a in &mut acc {
            *a = a.clamp(0.0, 1.0);
        }
        Self { probs: acc }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, class: usize) -> f64 {
        self.probs[class]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Constant,
    LinearSoftmax,
    External,
    Custom,
}

/// One corrupted copy of a base image: `values` replace the pixels of `rect`
/// (row-major, channel-interleaved).
#[derive(Debug, Clone)]
pub struct Corruption {
    pub rect: Rect,
    pub values: Vec<f64>,
}

pub trait Classifier: Send + Sync {
    fn catalog(&self) -> &ClassCatalog;

    /// `(width, height, channels)` the model accepts; `None` accepts any size.
    fn input_dims(&self) -> Option<(usize, usize, usize)>;

    fn kind(&self) -> ClassifierKind {
        ClassifierKind::Custom
    }

    /// Whether concurrent calls are allowed. Serial handles are driven from a
    /// single thread by the engine.
    fn concurrent(&self) -> bool {
        true
    }

    fn classify_batch(&self, images: &[Image]) -> Result<Vec<ClassDistribution>>;

    fn classify(&self, image: &Image) -> Result<ClassDistribution> {
        let mut out = self.classify_batch(std::slice::from_ref(image))?;
        out.pop()
            .ok_or_else(|| Error::External("empty reply to a single classification".into()))
    }

    /// Classifies every corruption of `base`, in order. The default
    /// materializes each corrupted image and calls [`Classifier::classify_batch`].
    fn classify_corrupted(&self, base: &Image, batch: &[Corruption]) -> Result<Vec<ClassDistribution>> {
        let images = batch
            .iter()
            .map(|c| {
                let mut img = base.clone();
                img.write_region(c.rect, &c.values)?;
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        self.classify_batch(&images)
    }

    fn check_dims(&self, image: &Image) -> Result<()> {
        match self.input_dims() {
            Some(expected) if expected != image.dims() => Err(Error::DimensionMismatch {
                expected,
                found: image.dims(),
            }),
            _ => Ok(()),
        }
    }
}

pub type ClassifierHandle = Arc<dyn Classifier>;

/// Returns the same distribution for every input.
#[derive(Debug, Clone)]
pub struct ConstantClassifier {
    catalog: ClassCatalog,
    dist: ClassDistribution,
    dims: Option<(usize, usize, usize)>,
}

impl ConstantClassifier {
    pub fn new(catalog: ClassCatalog, dist: ClassDistribution) -> Result<Self> {
        if dist.len() != catalog.len() {
            return Err(Error::InvalidArgument(format!(
                "distribution has {} entries, catalog has {} classes",
                dist.len(),
                catalog.len()
            )));
        }
        Ok(Self {
            catalog,
            dist,
            dims: None,
        })
    }

    pub fn uniform(catalog: ClassCatalog) -> Self {
        let dist = ClassDistribution::uniform(catalog.len());
        Self {
            catalog,
            dist,
            dims: None,
        }
    }

    pub fn with_dims(mut self, dims: (usize, usize, usize)) -> Self {
        self.dims = Some(dims);
        self
    }
}

impl Classifier for ConstantClassifier {
    fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    fn input_dims(&self) -> Option<(usize, usize, usize)> {
        self.dims
    }

    fn kind(&self) -> ClassifierKind {
        ClassifierKind::Constant
    }

    fn classify_batch(&self, images: &[Image]) -> Result<Vec<ClassDistribution>> {
        images
            .iter()
            .map(|img| {
                self.check_dims(img)?;
                Ok(self.dist.clone())
            })
            .collect()
    }

    fn classify_corrupted(&self, base: &Image, batch: &[Corruption]) -> Result<Vec<ClassDistribution>> {
        self.check_dims(base)?;
        Ok(vec![self.dist.clone(); batch.len()])
    }
}
