//! Image tensors, patch grids and the distance used for distortion accounting.
//!
//! Images are channel-major `f64` buffers with every element in `[0, 1]`.
//! Conversion to `f32` happens only at I/O boundaries (files, the wire).

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Image dimensions: channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A float image with all intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image, rejecting non-finite or out-of-range values.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return invalid("image shape has a zero dimension");
        }
        if data.len() != shape.len() {
            return invalid(format!("buffer of {} values does not match shape {shape}", data.len()));
        }
        if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return invalid(format!("value {} at {pos} is outside [0, 1]", data[pos]));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    /// Builds an image from `f32` values, the on-disk and on-wire precision.
    pub fn from_f32(shape: Shape, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Rounds every value through `f32`, the precision images have once they
    /// leave the process.
    pub fn quantized(&self) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f64::from(v as f32)).collect() }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(c, y, x)]
    }

    /// Copies the pixels under `window` into a `C x n x n` buffer.
    pub fn read_window(&self, window: &PatchWindow) -> Vec<f64> {
        let n = window.size;
        let mut out = Vec::with_capacity(self.shape.channels * n * n);
        for c in 0..self.shape.channels {
            for y in window.rows() {
                let start = self.shape.index(c, y, window.col0);
                out.extend_from_slice(&self.data[start..start + n]);
            }
        }
        out
    }

    /// Returns a copy with `window` replaced by `patch` (a `C x n x n` buffer
    /// already in `[0, 1]`).
    pub(crate) fn with_window(&self, window: &PatchWindow, patch: &[f64]) -> Self {
        let mut data = self.data.clone();
        write_window(self.shape, &mut data, window, patch);
        Self { shape: self.shape, data }
    }
}

pub(crate) fn write_window(shape: Shape, data: &mut [f64], window: &PatchWindow, patch: &[f64]) {
    let n = window.size;
    debug_assert_eq!(patch.len(), shape.channels * n * n);
    let mut src = patch.chunks_exact(n);
    for c in 0..shape.channels {
        for y in window.rows() {
            let start = shape.index(c, y, window.col0);
            data[start..start + n].copy_from_slice(src.next().expect("patch length checked"));
        }
    }
}

/// Euclidean norm of the elementwise difference over all `C*H*W` values.
pub fn l2_distance(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape != b.shape {
        return invalid(format!("shape mismatch: {} vs {}", a.shape, b.shape));
    }
    Ok(squared_distance(&a.data, &b.data).sqrt())
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clamps every value into `[0, 1]`. NaN is rejected; infinities clamp.
pub fn clip_unit(shape: Shape, mut data: Vec<f64>) -> Result<ImageTensor> {
    if data.iter().any(|v| v.is_nan()) {
        return invalid("NaN intensity");
    }
    clamp_in_place(&mut data);
    ImageTensor::new(shape, data)
}

#[inline]
pub(crate) fn clamp_in_place(data: &mut [f64]) {
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Pixel window of one square patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchWindow {
    pub row: usize,
    pub col: usize,
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
}

impl PatchWindow {
    pub fn rows(&self) -> Range<usize> {
        self.row0..self.row0 + self.size
    }

    pub fn cols(&self) -> Range<usize> {
        self.col0..self.col0 + self.size
    }
}

/// Non-overlapping tiling of an image into `n x n` patches, row-major ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    shape: Shape,
    patch_size: usize,
    rows: usize,
    cols: usize,
}

impl PatchGrid {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Number of values in one patch across all channels.
    pub fn patch_len(&self) -> usize {
        self.shape.channels * self.patch_size * self.patch_size
    }

    pub fn window(&self, patch_id: usize) -> PatchWindow {
        assert!(patch_id < self.num_patches(), "patch id {patch_id} out of range");
        let row = patch_id / self.cols;
        let col = patch_id % self.cols;
        PatchWindow { row, col, row0: row * self.patch_size, col0: col * self.patch_size, size: self.patch_size }
    }

    pub fn windows(&self) -> impl Iterator<Item = PatchWindow> + '_ {
        (0..self.num_patches()).map(|id| self.window(id))
    }
}

/// Tiles `shape` into `n x n` patches. Both spatial dimensions must divide by `n`.
pub fn partition_patches(shape: Shape, n: usize) -> Result<PatchGrid> {
    if n == 0 {
        return invalid("patch size must be at least 1");
    }
    if shape.is_empty() {
        return invalid("image shape has a zero dimension");
    }
    if !shape.height.is_multiple_of(n) || !shape.width.is_multiple_of(n) {
        return invalid(format!("image {}x{} is not divisible into {n}x{n} patches", shape.height, shape.width));
    }
    Ok(PatchGrid { shape, patch_size: n, rows: shape.height / n, cols: shape.width / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, shape: Shape) -> ImageTensor {
        let data = (0..shape.len()).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(shape, data).unwrap()
    }

    #[test]
    fn l2_of_identical_images_is_zero() {
        let img = ImageTensor::filled(Shape::new(3, 4, 4), 0.3).unwrap();
        assert_eq!(l2_distance(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn l2_single_element_difference() {
        let shape = Shape::new(3, 4, 4);
        let a = ImageTensor::filled(shape, 0.5).unwrap();
        let mut data = a.data().to_vec();
        data[17] = 0.6;
        let b = ImageTensor::new(shape, data).unwrap();
        assert!((l2_distance(&a, &b).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn l2_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = Shape::new(3, 32, 32);
        let a = random_image(&mut rng, shape);
        let noisy: Vec<f64> = a.data().iter().map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)).collect();
        let b = ImageTensor::new(shape, noisy).unwrap();

        let mut acc = 0.0f64;
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let d = a.get(c, y, x) - b.get(c, y, x);
                    acc += d * d;
                }
            }
        }
        assert!((l2_distance(&a, &b).unwrap() - acc.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn l2_rejects_shape_mismatch() {
        let a = ImageTensor::filled(Shape::new(1, 4, 4), 0.0).unwrap();
        let b = ImageTensor::filled(Shape::new(1, 2, 8), 0.0).unwrap();
        assert!(l2_distance(&a, &b).is_err());
    }

    #[test]
    fn partition_reference_configs() {
        let cifar = partition_patches(Shape::new(3, 32, 32), 2).unwrap();
        assert_eq!((cifar.rows(), cifar.cols(), cifar.num_patches()), (16, 16, 256));
        let imagenet = partition_patches(Shape::new(3, 224, 224), 8).unwrap();
        assert_eq!((imagenet.rows(), imagenet.cols(), imagenet.num_patches()), (28, 28, 784));
        let single = partition_patches(Shape::new(3, 4, 4), 4).unwrap();
        assert_eq!(single.num_patches(), 1);
        let w = single.window(0);
        assert_eq!((w.row0, w.col0, w.size), (0, 0, 4));
    }

    #[test]
    fn partition_rejects_bad_sizes() {
        assert!(partition_patches(Shape::new(3, 30, 32), 4).is_err());
        assert!(partition_patches(Shape::new(3, 32, 32), 0).is_err());
    }

    #[test]
    fn partition_covers_every_pixel_once() {
        let grid = partition_patches(Shape::new(1, 12, 18), 3).unwrap();
        let mut hits = vec![0u8; 12 * 18];
        for w in grid.windows() {
            for y in w.rows() {
                for x in w.cols() {
                    hits[y * 18 + x] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn clip_unit_clamps_endpoints_and_rejects_nan() {
        let shape = Shape::new(1, 1, 3);
        let img = clip_unit(shape, vec![1.3, -0.2, 0.4]).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.4]);
        assert!(clip_unit(shape, vec![0.1, f64::NAN, 0.2]).is_err());
    }

    #[test]
    fn clip_unit_is_idempotent() {
        let shape = Shape::new(1, 2, 2);
        let once = clip_unit(shape, vec![1.5, -3.0, 0.25, 0.75]).unwrap();
        let twice = clip_unit(shape, once.data().to_vec()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn window_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape::new(2, 6, 6);
        let img = random_image(&mut rng, shape);
        let grid = partition_patches(shape, 3).unwrap();
        let w = grid.window(3);
        let patch = img.read_window(&w);
        assert_eq!(img.with_window(&w, &patch), img);
    }

    proptest! {
        #[test]
        fn l2_is_a_metric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape::new(3, 4, 4);
            let a = random_image(&mut rng, shape);
            let b = random_image(&mut rng, shape);
            let c = random_image(&mut rng, shape);
            let ab = l2_distance(&a, &b).unwrap();
            let ba = l2_distance(&b, &a).unwrap();
            let bc = l2_distance(&b, &c).unwrap();
            let ac = l2_distance(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6);
            prop_assert!(ac <= ab + bc + 1e-6);
            prop_assert!(ab > 0.0);
        }

        #[test]
        fn clip_preserves_order_in_range(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let img = clip_unit(Shape::new(1, 1, 2), vec![a, b]).unwrap();
            prop_assert_eq!(img.data()[0] <= img.data()[1], a <= b);
        }
    }
}
