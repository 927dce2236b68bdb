//! Patch-local distortion filters.
//!
//! Every filter is described by a deterministic per-application mask. The
//! mask for application `i` of filter `f` on patch `p` depends only on
//! `(episode_seed, p, f, i)`, so the perturbed image is a pure function of
//! the per-(patch, filter) application counts kept in a [`DistortionLedger`].

mod calibrate;
mod ledger;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::PatchWindow;

pub use calibrate::{calibrate, mean_application_l2};
pub use ledger::DistortionLedger;

/// Identifies a distortion filter.
///
/// The declaration order is the canonical composition order used when
/// several filters touch the same patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterId {
    GaussianNoise,
    Brightness,
    GaussianBlur,
    DeadPixel,
    /// Index into the [`FilterBank`]'s registered custom filters.
    Custom(u8),
}

impl FilterId {
    pub const BUILTIN: [FilterId; 4] =
        [FilterId::GaussianNoise, FilterId::GaussianBlur, FilterId::Brightness, FilterId::DeadPixel];

    fn seed_code(self) -> u64 {
        match self {
            FilterId::GaussianNoise => 1,
            FilterId::Brightness => 2,
            FilterId::GaussianBlur => 3,
            FilterId::DeadPixel => 4,
            FilterId::Custom(i) => 16 + u64::from(i),
        }
    }

    pub fn name(self) -> String {
        match self {
            FilterId::GaussianNoise => "gaussian_noise".into(),
            FilterId::Brightness => "brightness".into(),
            FilterId::GaussianBlur => "gaussian_blur".into(),
            FilterId::DeadPixel => "dead_pixel".into(),
            FilterId::Custom(i) => format!("custom{i}"),
        }
    }
}

impl fmt::Display for FilterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for FilterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "gaussian_noise" | "noise" => Ok(FilterId::GaussianNoise),
            "brightness" | "illumination" => Ok(FilterId::Brightness),
            "gaussian_blur" | "blur" => Ok(FilterId::GaussianBlur),
            "dead_pixel" | "deadpixel" => Ok(FilterId::DeadPixel),
            other => match other.strip_prefix("custom").map(str::parse::<u8>) {
                Some(Ok(i)) => Ok(FilterId::Custom(i)),
                _ => invalid(format!("unknown filter `{s}`")),
            },
        }
    }
}

/// Filter intensities and the per-application L2 target they were fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Standard deviation of the additive noise field.
    pub noise_sigma: f64,
    /// Standard deviation, in pixels, of the blur kernel.
    pub blur_sigma: f64,
    /// Additive intensity shift, in `(-1, 1)`.
    pub brightness_delta: f64,
    /// Fraction of a patch's pixels zeroed per application, in `(0, 1]`.
    pub deadpixel_fraction: f64,
    /// Target L2 change of one application on one patch.
    pub epsilon0: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self { noise_sigma: 0.05, blur_sigma: 1.0, brightness_delta: -0.1, deadpixel_fraction: 0.5, epsilon0: 0.1 }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.noise_sigma, self.blur_sigma, self.brightness_delta, self.deadpixel_fraction, self.epsilon0]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return invalid("filter parameters must be finite");
        }
        if self.noise_sigma < 0.0 {
            return invalid("noise_sigma must be non-negative");
        }
        if self.blur_sigma <= 0.0 {
            return invalid("blur_sigma must be positive");
        }
        if !(self.brightness_delta > -1.0 && self.brightness_delta < 1.0) {
            return invalid("brightness_delta must lie in (-1, 1)");
        }
        if !(self.deadpixel_fraction > 0.0 && self.deadpixel_fraction <= 1.0) {
            return invalid("deadpixel_fraction must lie in (0, 1]");
        }
        if self.epsilon0 <= 0.0 {
            return invalid("epsilon0 must be positive");
        }
        Ok(())
    }
}

/// Inputs that pin down one mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedContext {
    pub episode_seed: u64,
    pub patch_id: usize,
    pub filter: FilterId,
    pub application: u32,
}

impl SeedContext {
    /// Mixes the context into a single 64-bit stream seed.
    pub fn stream_seed(&self) -> u64 {
        let mut h = splitmix64(self.episode_seed);
        h = splitmix64(h ^ self.patch_id as u64);
        h = splitmix64(h ^ self.filter.seed_code());
        splitmix64(h ^ u64::from(self.application))
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// One application of a filter to one patch.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// Field added to the `C x n x n` patch values.
    Additive(Vec<f64>),
    /// Normalized 1-D Gaussian kernel, applied separably with edge
    /// replication inside the patch.
    Blur(Vec<f64>),
    /// Pixel offsets (`y * n + x`) zeroed in every channel.
    Zero(Vec<usize>),
}

/// Builds the mask of one application of a built-in filter.
pub fn make_mask(
    filter: FilterId,
    params: &FilterParams,
    channels: usize,
    window: &PatchWindow,
    ctx: SeedContext,
) -> Result<Mask> {
    let n = window.size;
    let len = channels * n * n;
    match filter {
        FilterId::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.stream_seed());
            let field = (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * params.noise_sigma
                })
                .collect();
            Ok(Mask::Additive(field))
        }
        FilterId::Brightness => Ok(Mask::Additive(vec![params.brightness_delta; len])),
        FilterId::GaussianBlur => Ok(Mask::Blur(gaussian_kernel(params.blur_sigma))),
        FilterId::DeadPixel => {
            let count = dead_pixel_count(params.deadpixel_fraction, n);
            let mut order: Vec<usize> = (0..n * n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.stream_seed());
            order.shuffle(&mut rng);
            order.truncate(count);
            order.sort_unstable();
            Ok(Mask::Zero(order))
        }
        FilterId::Custom(i) => invalid(format!("custom filter {i} has no built-in mask")),
    }
}

pub(crate) fn dead_pixel_count(fraction: f64, n: usize) -> usize {
    let total = n * n;
    ((fraction * total as f64).round() as usize).min(total)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let weights: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Separable convolution of each channel of a `C x n x n` patch, clamping
/// taps to the patch border.
fn blur_patch(patch: &mut [f64], channels: usize, n: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as i64;
    let last = n as i64 - 1;
    let mut tmp = vec![0.0; n * n];
    for c in 0..channels {
        let plane = &mut patch[c * n * n..(c + 1) * n * n];
        for y in 0..n {
            for x in 0..n {
                tmp[y * n + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let xx = (x as i64 + k as i64 - radius).clamp(0, last) as usize;
                        w * plane[y * n + xx]
                    })
                    .sum();
            }
        }
        for y in 0..n {
            for x in 0..n {
                plane[y * n + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let yy = (y as i64 + k as i64 - radius).clamp(0, last) as usize;
                        w * tmp[yy * n + x]
                    })
                    .sum();
            }
        }
    }
}

/// A user-supplied patch distortion with the same contract as the built-ins:
/// one application is a deterministic function of the patch and `seed`.
pub trait CustomFilter: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Applies one application in place to a `C x n x n` patch. Values may
    /// leave `[0, 1]`; clipping happens after all filters are composed.
    fn apply(&self, patch: &mut [f64], channels: usize, n: usize, seed: u64);
}

/// Filter parameters plus any registered custom filters.
#[derive(Debug, Clone, Default)]
pub struct FilterBank {
    params: FilterParams,
    custom: Vec<Arc<dyn CustomFilter>>,
}

impl FilterBank {
    pub fn new(params: FilterParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, custom: Vec::new() })
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn with_params(&self, params: FilterParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, custom: self.custom.clone() })
    }

    /// Registers a custom filter and returns its id.
    pub fn register(&mut self, filter: Arc<dyn CustomFilter>) -> Result<FilterId> {
        let idx =
            u8::try_from(self.custom.len()).map_err(|_| Error::InvalidArgument("too many custom filters".into()))?;
        self.custom.push(filter);
        Ok(FilterId::Custom(idx))
    }

    pub fn resolve(&self, name: &str) -> Result<FilterId> {
        if let Some(i) = self.custom.iter().position(|f| f.name() == name) {
            return Ok(FilterId::Custom(i as u8));
        }
        let id = name.parse::<FilterId>()?;
        self.check(id)?;
        Ok(id)
    }

    pub fn check(&self, filter: FilterId) -> Result<()> {
        match filter {
            FilterId::Custom(i) if usize::from(i) >= self.custom.len() => {
                invalid(format!("custom filter {i} is not registered"))
            }
            _ => Ok(()),
        }
    }

    pub fn display_name(&self, filter: FilterId) -> String {
        match filter {
            FilterId::Custom(i) => {
                self.custom.get(usize::from(i)).map(|f| f.name().to_string()).unwrap_or_else(|| filter.name())
            }
            _ => filter.name(),
        }
    }

    /// Renders one patch: starting from the original values, applies
    /// `counts` (sorted by filter in canonical order) and clips to `[0, 1]`.
    pub(crate) fn render_patch(
        &self,
        original: &[f64],
        channels: usize,
        window: &PatchWindow,
        patch_id: usize,
        episode_seed: u64,
        counts: &[(FilterId, u32)],
    ) -> Result<Vec<f64>> {
        let n = window.size;
        let mut patch = original.to_vec();
        for &(filter, k) in counts {
            if k == 0 {
                continue;
            }
            let ctx = |application| SeedContext { episode_seed, patch_id, filter, application };
            match filter {
                FilterId::Custom(i) => {
                    let custom = self
                        .custom
                        .get(usize::from(i))
                        .ok_or_else(|| Error::InvalidArgument(format!("custom filter {i} is not registered")))?;
                    for a in 0..k {
                        custom.apply(&mut patch, channels, n, ctx(a).stream_seed());
                    }
                }
                FilterId::GaussianBlur => {
                    // The kernel does not depend on the application index.
                    let Mask::Blur(kernel) = make_mask(filter, &self.params, channels, window, ctx(0))? else {
                        unreachable!()
                    };
                    for _ in 0..k {
                        blur_patch(&mut patch, channels, n, &kernel);
                    }
                }
                FilterId::DeadPixel => {
                    let mut dead = vec![false; n * n];
                    for a in 0..k {
                        if let Mask::Zero(pixels) = make_mask(filter, &self.params, channels, window, ctx(a))? {
                            for p in pixels {
                                dead[p] = true;
                            }
                        }
                    }
                    for (offset, _) in dead.iter().enumerate().filter(|(_, d)| **d) {
                        for c in 0..channels {
                            patch[c * n * n + offset] = 0.0;
                        }
                    }
                }
                FilterId::GaussianNoise | FilterId::Brightness => {
                    for a in 0..k {
                        if let Mask::Additive(field) = make_mask(filter, &self.params, channels, window, ctx(a))? {
                            for (v, d) in patch.iter_mut().zip(field) {
                                *v += d;
                            }
                        }
                    }
                }
            }
        }
        crate::tensor::clamp_in_place(&mut patch);
        Ok(patch)
    }
}
