//! Self-contained victims for tests and demos.

use std::io::{Read, Write};
use std::path::Path;

use super::{Classifier, ProbabilityVector};
use crate::error::{invalid, Error, Result};
use crate::tensor::{ImageTensor, Shape};

const TOY_MAGIC: &[u8; 6] = b"DBTOY1";

/// `softmax(W * flatten(x) + b)` with `W` stored row-major as `K x D`.
pub fn toy_linear_predict(weights: &[f64], bias: &[f64], image: &ImageTensor) -> Result<ProbabilityVector> {
    let k = bias.len();
    let d = image.shape().len();
    if k == 0 || weights.len() != k * d {
        return invalid(format!("weights hold {} values, expected {k} x {d}", weights.len()));
    }
    if weights.iter().chain(bias).any(|v| !v.is_finite()) {
        return invalid("non-finite toy weights");
    }
    let x = image.data();
    let logits: Vec<f64> = weights
        .chunks_exact(d)
        .zip(bias)
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> ProbabilityVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    ProbabilityVector(exps.into_iter().map(|e| e / total).collect())
}

/// Linear-softmax classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLinear {
    num_classes: usize,
    input_len: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    shape: Option<Shape>,
}

impl ToyLinear {
    pub fn new(weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let k = bias.len();
        if k == 0 || weights.is_empty() || !weights.len().is_multiple_of(k) {
            return invalid(format!("{} weights do not split into {k} classes", weights.len()));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return invalid("non-finite toy weights");
        }
        Ok(Self { num_classes: k, input_len: weights.len() / k, weights, bias, shape: None })
    }

    pub fn zeros(num_classes: usize, input_len: usize) -> Result<Self> {
        Self::new(vec![0.0; num_classes * input_len], vec![0.0; num_classes])
    }

    /// Pins the expected image shape (must flatten to the weight width).
    pub fn with_shape(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.input_len {
            return invalid(format!("shape {shape} does not flatten to {}", self.input_len));
        }
        self.shape = Some(shape);
        Ok(self)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<ProbabilityVector> {
        toy_linear_predict(&self.weights, &self.bias, image)
    }
}

impl Classifier for ToyLinear {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> Option<Shape> {
        self.shape
    }

    fn predict_batch(&self, images: &[ImageTensor]) -> Result<Vec<ProbabilityVector>> {
        images.iter().map(|img| self.predict(img)).collect()
    }
}

/// Returns the same probabilities for every input.
#[derive(Debug, Clone)]
pub struct ConstantClassifier {
    probs: ProbabilityVector,
}

impl ConstantClassifier {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Ok(Self { probs: ProbabilityVector::new(probs)? })
    }

    /// Probability one on `class`.
    pub fn certain(num_classes: usize, class: usize) -> Result<Self> {
        if class >= num_classes {
            return invalid(format!("class {class} out of range for {num_classes} classes"));
        }
        let mut p = vec![0.0; num_classes];
        p[class] = 1.0;
        Self::new(p)
    }
}

impl Classifier for ConstantClassifier {
    fn num_classes(&self) -> usize {
        self.probs.len()
    }

    fn predict_batch(&self, images: &[ImageTensor]) -> Result<Vec<ProbabilityVector>> {
        Ok(vec![self.probs.clone(); images.len()])
    }
}

/// Writes `DBTOY1 | u32 K | u32 D | K*D f64 weights | K f64 biases`, little-endian.
pub fn write_toy_weights(path: &Path, model: &ToyLinear) -> Result<()> {
    let mut buf = Vec::with_capacity(14 + 8 * (model.weights.len() + model.bias.len()));
    buf.extend_from_slice(TOY_MAGIC);
    buf.extend_from_slice(&(model.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(model.input_len as u32).to_le_bytes());
    for v in model.weights.iter().chain(&model.bias) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_toy_weights(path: &Path) -> Result<ToyLinear> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 14 || &bytes[..6] != TOY_MAGIC {
        return Err(Error::Format(format!("{} is not a toy weight file", path.display())));
    }
    let k = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = 14 + 8 * (k * d + k);
    if bytes.len() != expected {
        return Err(Error::Format(format!("toy weight file has {} bytes, header implies {expected}", bytes.len())));
    }
    let values: Vec<f64> = bytes[14..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let (w, b) = values.split_at(k * d);
    ToyLinear::new(w.to_vec(), b.to_vec())
}
