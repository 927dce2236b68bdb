use super::{FilterBank, FilterId, FilterParams};
use crate::error::{invalid, Error, Result};
use crate::tensor::{squared_distance, ImageTensor, PatchGrid};

const BISECTION_STEPS: usize = 60;
const TOLERANCE: f64 = 0.10;

/// Mean L2 change caused by one application of `filter`, averaged over every
/// patch of every sample.
pub fn mean_application_l2(
    bank: &FilterBank,
    filter: FilterId,
    samples: &[ImageTensor],
    grid: &PatchGrid,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return invalid("at least one sample image is required");
    }
    let channels = grid.shape().channels;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, img) in samples.iter().enumerate() {
        if img.shape() != grid.shape() {
            return invalid(format!("sample {i} is {} but grid expects {}", img.shape(), grid.shape()));
        }
        let sample_seed = super::splitmix64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
        for (patch_id, window) in grid.windows().enumerate() {
            let original = img.read_window(&window);
            let patch = bank.render_patch(&original, channels, &window, patch_id, sample_seed, &[(filter, 1)])?;
            total += squared_distance(&patch, &original).sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fits the intensity parameter of `filter` so that one application changes
/// a patch by `target` in L2 on average over `samples`.
///
/// Every built-in's per-application L2 is monotone in its intensity
/// parameter, so the fit is a bisection. The returned params carry `target`
/// as their `epsilon0`.
pub fn calibrate(
    filter: FilterId,
    base: &FilterParams,
    samples: &[ImageTensor],
    grid: &PatchGrid,
    target: f64,
    seed: u64,
) -> Result<FilterParams> {
    if !(target.is_finite() && target > 0.0) {
        return invalid(format!("calibration target must be positive, got {target}"));
    }
    if samples.is_empty() {
        return invalid("at least one sample image is required");
    }

    let sign = if base.brightness_delta > 0.0 { 1.0 } else { -1.0 };
    let (lo, hi) = match filter {
        FilterId::GaussianNoise => (0.0, 1.0),
        FilterId::Brightness => (0.0, 0.999),
        FilterId::GaussianBlur => (0.01, 20.0),
        FilterId::DeadPixel => (1e-6, 1.0),
        FilterId::Custom(_) => return invalid("custom filters cannot be calibrated"),
    };
    let with = |x: f64| -> FilterParams {
        let mut p = FilterParams { epsilon0: target, ..*base };
        match filter {
            FilterId::GaussianNoise => p.noise_sigma = x,
            FilterId::Brightness => p.brightness_delta = sign * x,
            FilterId::GaussianBlur => p.blur_sigma = x,
            FilterId::DeadPixel => p.deadpixel_fraction = x,
            FilterId::Custom(_) => unreachable!(),
        }
        p
    };
    let eval = |x: f64| -> Result<f64> {
        let bank = FilterBank::new(with(x))?;
        mean_application_l2(&bank, filter, samples, grid, seed)
    };

    let (mut lo, mut hi) = (lo, hi);
    let (mut f_lo, mut f_hi) = (eval(lo)?, eval(hi)?);
    if f_hi < target * (1.0 - TOLERANCE) {
        return Err(Error::CalibrationInfeasible(format!(
            "{filter} reaches at most {f_hi:.6} per application, below target {target}"
        )));
    }
    if f_lo > target * (1.0 + TOLERANCE) {
        return Err(Error::CalibrationInfeasible(format!(
            "{filter} already exceeds target {target} at its weakest setting ({f_lo:.6})"
        )));
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let f_mid = eval(mid)?;
        if f_mid < target {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
            f_hi = f_mid;
        }
        if ((f_hi - target) / target).abs() < 1e-3 {
            break;
        }
    }
    let (x, f) = if (f_lo - target).abs() < (f_hi - target).abs() { (lo, f_lo) } else { (hi, f_hi) };
    if ((f - target) / target).abs() > TOLERANCE {
        return Err(Error::CalibrationInfeasible(format!(
            "{filter} cannot get within {:.0}% of {target}: closest is {f:.6}",
            TOLERANCE * 100.0
        )));
    }
    let fitted = with(x);
    fitted.validate()?;
    Ok(fitted)
}
