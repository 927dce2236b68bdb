//! Black-box access to the victim classifier.
//!
//! Nothing outside this module sees anything about the victim beyond the
//! [`ProbabilityVector`]s returned by [`ClassifierHandle::predict`].

mod remote;
mod server;
mod toy;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{ImageTensor, Shape};

pub use remote::RemoteClassifier;
pub use server::{serve, spawn_server, ServerHandle};
pub use toy::{read_toy_weights, toy_linear_predict, write_toy_weights, ConstantClassifier, ToyLinear};

/// Default number of images per forward call.
pub const DEFAULT_MAX_BATCH: usize = 128;

/// Normalization slack accepted without touching the values.
pub const NORM_TOLERANCE: f64 = 1e-5;
/// Normalization slack beyond which a response is rejected outright.
pub const NORM_REJECT: f64 = 1e-3;

/// Per-class output probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Accepts a row that is non-negative and sums to one within 1e-5.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("probability vector is empty");
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("probabilities must be finite and non-negative");
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > NORM_TOLERANCE {
            return invalid(format!("probabilities sum to {sum}"));
        }
        Ok(Self(values))
    }

    /// Validates a row produced outside the engine's control: slack up to
    /// 1e-3 is renormalized with a warning, anything more is a protocol error.
    pub fn from_untrusted(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Protocol("probability row is empty, negative or non-finite".into()));
        }
        let sum: f64 = values.iter().sum();
        let slack = (sum - 1.0).abs();
        if slack > NORM_REJECT {
            return Err(Error::Protocol(format!("probability row sums to {sum}")));
        }
        if slack > NORM_TOLERANCE {
            log::warn!("renormalizing probability row with sum {sum}");
            return Ok(Self(values.into_iter().map(|v| v / sum).collect()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Top-1 class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    fn quantized(&self) -> Vec<f64> {
        self.0.iter().map(|&p| f64::from(p as f32)).collect()
    }
}

/// Snapshot of a [`QueryCounter`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCount {
    /// Individual image evaluations.
    pub evaluations: u64,
    /// Forward calls.
    pub batches: u64,
}

impl std::ops::Sub for QueryCount {
    type Output = QueryCount;

    fn sub(self, rhs: Self) -> Self {
        QueryCount { evaluations: self.evaluations - rhs.evaluations, batches: self.batches - rhs.batches }
    }
}

/// Counts classifier usage under both conventions.
#[derive(Debug, Default)]
pub struct QueryCounter {
    evaluations: AtomicU64,
    batches: AtomicU64,
}

impl QueryCounter {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, evaluations: u64, batches: u64) {
        self.evaluations.fetch_add(evaluations, Ordering::Relaxed);
        self.batches.fetch_add(batches, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> QueryCount {
        QueryCount {
            evaluations: self.evaluations.load(Ordering::Relaxed),
            batches: self.batches.load(Ordering::Relaxed),
        }
    }
}

/// A victim model reachable by query only.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Expected input shape, when the backend knows it.
    fn input_shape(&self) -> Option<Shape> {
        None
    }

    /// One forward call over `images` (at most the handle's batch limit).
    fn predict_batch(&self, images: &[ImageTensor]) -> Result<Vec<ProbabilityVector>>;
}

/// Shared, counted access to a [`Classifier`].
///
/// Inputs are rounded to `f32` before they reach the backend and outputs are
/// rounded to `f32` on the way back, so an in-process backend sees exactly
/// what a remote one would receive over the wire.
#[derive(Clone)]
pub struct ClassifierHandle {
    id: String,
    backend: Arc<dyn Classifier>,
    max_batch: usize,
    counter: Arc<QueryCounter>,
}

impl std::fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("id", &self.id)
            .field("max_batch", &self.max_batch)
            .field("queries", &self.counter.snapshot())
            .finish()
    }
}

impl ClassifierHandle {
    pub fn new(id: impl Into<String>, backend: Arc<dyn Classifier>) -> Self {
        Self { id: id.into(), backend, max_batch: DEFAULT_MAX_BATCH, counter: Arc::new(QueryCounter::new()) }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn num_classes(&self) -> usize {
        self.backend.num_classes()
    }

    pub fn input_shape(&self) -> Option<Shape> {
        self.backend.input_shape()
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    pub fn queries(&self) -> QueryCount {
        self.counter.snapshot()
    }

    pub fn predict(&self, images: &[ImageTensor]) -> Result<Vec<ProbabilityVector>> {
        self.predict_tracked(images, None)
    }

    pub fn predict_one(&self, image: &ImageTensor) -> Result<ProbabilityVector> {
        Ok(self.predict(std::slice::from_ref(image))?.remove(0))
    }

    /// Like [`predict`](Self::predict), additionally charging `local`.
    pub fn predict_tracked(
        &self,
        images: &[ImageTensor],
        local: Option<&QueryCounter>,
    ) -> Result<Vec<ProbabilityVector>> {
        if images.is_empty() {
            return invalid("predict needs at least one image");
        }
        let shape = self.backend.input_shape().unwrap_or_else(|| images[0].shape());
        if let Some(bad) = images.iter().position(|img| img.shape() != shape) {
            return invalid(format!(
                "image {bad} has shape {} but the classifier expects {shape}",
                images[bad].shape()
            ));
        }
        let k = self.backend.num_classes();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.max_batch) {
            let quantized: Vec<ImageTensor> = chunk.iter().map(ImageTensor::quantized).collect();
            let rows = self.backend.predict_batch(&quantized)?;
            self.counter.record(chunk.len() as u64, 1);
            if let Some(local) = local {
                local.record(chunk.len() as u64, 1);
            }
            if rows.len() != chunk.len() {
                return Err(Error::Protocol(format!(
                    "backend returned {} rows for {} images",
                    rows.len(),
                    chunk.len()
                )));
            }
            for row in rows {
                if row.len() != k {
                    return Err(Error::Protocol(format!("row of {} classes, expected {k}", row.len())));
                }
                out.push(ProbabilityVector::from_untrusted(row.quantized())?);
            }
        }
        Ok(out)
    }
}
