//! Small linear-softmax victims with known attackable margins.
//!
//! A brightness application shifts every pixel of a patch by `delta`, so
//! against a linear victim each application on patch `p` moves the logit gap
//! between the label and class `c` by a fixed amount `g[c][p]`. That makes
//! the reachable margins easy to control.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::classifier::ToyLinear;
use crate::error::{invalid, Result};
use crate::generator::{Dataset, Sample};
use crate::tensor::{partition_patches, ImageTensor, PatchGrid, Shape};

/// Knobs for generating toy instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub shape: Shape,
    pub patch_size: usize,
    pub num_classes: usize,
    pub brightness_delta: f64,
    /// Most applications per patch the margin is sized against.
    pub max_count: u32,
    /// Range of the clean margin as a fraction of the reachable margin.
    pub margin_fraction: (f64, f64),
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            shape: Shape::new(1, 4, 4),
            patch_size: 2,
            num_classes: 3,
            brightness_delta: -0.1,
            max_count: 3,
            margin_fraction: (0.15, 0.85),
        }
    }
}

/// One image, its label, and a victim it can be attacked against.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub image: Arc<ImageTensor>,
    pub label: usize,
    pub model: ToyLinear,
}

fn logits(model: &ToyLinear, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    model
        .bias()
        .iter()
        .enumerate()
        .map(|(c, b)| b + model.weights()[c * d..(c + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Per-application gap change `g[c][p]` between the label and class `c`.
fn gap_per_application(spec: &ToySpec, grid: &PatchGrid, weights: &[f64], label: usize) -> Vec<Vec<f64>> {
    let d = spec.shape.len();
    (0..spec.num_classes)
        .map(|c| {
            grid.windows()
                .map(|win| {
                    let mut g = 0.0;
                    for ch in 0..spec.shape.channels {
                        for y in win.rows() {
                            for x in win.cols() {
                                let i = spec.shape.index(ch, y, x);
                                g += -spec.brightness_delta * (weights[label * d + i] - weights[c * d + i]);
                            }
                        }
                    }
                    g
                })
                .collect()
        })
        .collect()
}

/// Largest gap reduction toward `c` with at most `max_count` applications per patch.
fn reachable(spec: &ToySpec, g: &[f64]) -> f64 {
    spec.max_count as f64 * g.iter().map(|v| v.max(0.0)).sum::<f64>()
}

fn random_image(spec: &ToySpec, rng: &mut impl Rng) -> Result<ImageTensor> {
    let data = (0..spec.shape.len()).map(|_| rng.random_range(0.3..0.7)).collect();
    ImageTensor::new(spec.shape, data)
}

/// An instance whose clean margin to the most reachable competitor is a
/// random fraction of what `max_count` applications per patch can remove.
pub fn attackable_instance(spec: &ToySpec, seed: u64) -> Result<ToyInstance> {
    let grid = partition_patches(spec.shape, spec.patch_size)?;
    if spec.num_classes < 2 {
        return invalid("toy victims need at least two classes");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.shape.len();
    for _ in 0..10_000 {
        let weights: Vec<f64> = (0..spec.num_classes * d).map(|_| rng.sample(StandardNormal)).collect();
        let image = random_image(spec, &mut rng)?.quantized();
        let base = ToyLinear::new(weights.clone(), vec![0.0; spec.num_classes])?;
        let z = logits(&base, image.data());
        let label = (0..spec.num_classes).fold(0, |b, c| if z[c] > z[b] { c } else { b });
        let g = gap_per_application(spec, &grid, &weights, label);
        let (target, reach) = (0..spec.num_classes)
            .filter(|&c| c != label)
            .map(|c| (c, reachable(spec, &g[c])))
            .fold((usize::MAX, 0.0), |best, (c, r)| if r > best.1 { (c, r) } else { best });
        if target == usize::MAX || reach <= 0.0 {
            continue;
        }
        let u = rng.random_range(spec.margin_fraction.0..spec.margin_fraction.1);
        let mut bias = vec![0.0; spec.num_classes];
        bias[label] = u * reach - (z[label] - z[target]);
        let model = ToyLinear::new(weights, bias)?.with_shape(spec.shape)?;
        let z = logits(&model, image.data());
        let competitor_wins = (0..spec.num_classes).any(|c| c != label && z[c] >= z[label]);
        if competitor_wins {
            continue;
        }
        return Ok(ToyInstance { image: Arc::new(image), label, model });
    }
    invalid("could not construct an attackable toy instance")
}

pub fn toy_suite(spec: &ToySpec, n: usize, seed: u64) -> Result<Vec<ToyInstance>> {
    (0..n)
        .map(|i| attackable_instance(spec, seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))))
        .collect()
}

/// A random victim with shape-checked input.
pub fn toy_model(spec: &ToySpec, seed: u64) -> Result<ToyLinear> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.shape.len();
    let weights: Vec<f64> = (0..spec.num_classes * d).map(|_| rng.sample(StandardNormal)).collect();
    // Centre the logits on mid-gray so that no class wins on bias alone.
    let bias: Vec<f64> = (0..spec.num_classes)
        .map(|c| -0.5 * weights[c * d..(c + 1) * d].iter().sum::<f64>() + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ToyLinear::new(weights, bias)?.with_shape(spec.shape)
}

/// `n` images that `model` classifies as their label with a margin that
/// `max_count` applications per patch can overcome. Quantized to `f32` so
/// that the on-disk form is exact.
pub fn toy_dataset(spec: &ToySpec, model: &ToyLinear, n: usize, seed: u64) -> Result<Dataset> {
    let grid = partition_patches(spec.shape, spec.patch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut tries = 0;
    while samples.len() < n {
        tries += 1;
        if tries > 1000 * n.max(1) {
            return invalid("victim leaves too few attackable images");
        }
        let image = random_image(spec, &mut rng)?.quantized();
        let z = logits(model, image.data());
        let label = (0..spec.num_classes).fold(0, |b, c| if z[c] > z[b] { c } else { b });
        let g = gap_per_application(spec, &grid, model.weights(), label);
        let attackable = (0..spec.num_classes)
            .filter(|&c| c != label)
            .any(|c| z[label] - z[c] <= spec.margin_fraction.1 * reachable(spec, &g[c]));
        if attackable {
            samples.push(Sample { index: samples.len(), label, image: Arc::new(image) });
        }
    }
    Dataset::new(samples)
}
