//! Training-time augmentation of (template, printed) pairs.
//!
//! Geometry (one random crop, then horizontal/vertical flips) is shared by
//! both images of a pair so they stay aligned. Photometric transforms —
//! Gaussian blur, Gaussian noise, brightness/contrast — only ever touch the
//! printed image; templates stay strictly binary.

use ndarray::s;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Pixels;
use crate::rng;
use crate::synthcdp::gaussian_blur;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub n_copies: usize,
    pub crop_side: usize,
    pub flip_prob: f64,
    /// Probability that a copy receives photometric transforms (two are
    /// drawn when it fires).
    pub photometric_prob: f64,
    /// Odd Gaussian-blur kernel sizes, inclusive range.
    pub blur_kernel: (usize, usize),
    /// Additive Gaussian noise variance range.
    pub noise_var: (f64, f64),
    /// Brightness shift and contrast deviation bound.
    pub brightness_contrast: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            n_copies: 4,
            crop_side: 24,
            flip_prob: 0.8,
            photometric_prob: 0.7,
            blur_kernel: (3, 5),
            noise_var: (0.001, 0.005),
            brightness_contrast: 0.2,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self, image_side: usize) -> Result<()> {
        if self.n_copies == 0 {
            return Err(Error::invalid_argument("n_copies must be >= 1"));
        }
        if self.crop_side == 0 || self.crop_side > image_side {
            return Err(Error::invalid_argument(format!(
                "crop_side must be in [1, {image_side}]"
            )));
        }
        for p in [self.flip_prob, self.photometric_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid_argument("probabilities must be in [0, 1]"));
            }
        }
        if self.blur_kernel.0 % 2 == 0
            || self.blur_kernel.1 % 2 == 0
            || self.blur_kernel.0 > self.blur_kernel.1
        {
            return Err(Error::invalid_argument(
                "blur kernel range must be odd and ordered",
            ));
        }
        if self.noise_var.0 < 0.0 || self.noise_var.0 > self.noise_var.1 {
            return Err(Error::invalid_argument("noise variance range is invalid"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Photometric {
    Blur,
    Noise,
    BrightnessContrast,
}

/// Produces `n_copies` augmented pairs. Copy `k` depends only on
/// `(seed, k)`, so reruns are bit-identical.
pub fn augment(
    template: &Pixels,
    printed: &Pixels,
    params: &AugmentParams,
    seed: u64,
) -> Result<Vec<(Pixels, Pixels)>> {
    if template.dim() != printed.dim() {
        return Err(Error::invalid_argument("pair images must share a shape"));
    }
    let side = template.nrows();
    params.validate(side)?;

    let mut out = Vec::with_capacity(params.n_copies);
    for k in 0..params.n_copies as u64 {
        let mut rng = rng::derived_stream(seed, "augment", &[k]);
        let max0 = side - params.crop_side;
        let r0 = rng.gen_range(0..=max0);
        let c0 = rng.gen_range(0..=max0);
        let crop = s![r0..r0 + params.crop_side, c0..c0 + params.crop_side];
        let mut t_img = template.slice(crop).to_owned();
        let mut p_img = printed.slice(crop).to_owned();

        if rng.gen::<f64>() < params.flip_prob {
            t_img.invert_axis(ndarray::Axis(1));
            p_img.invert_axis(ndarray::Axis(1));
        }
        if rng.gen::<f64>() < params.flip_prob {
            t_img.invert_axis(ndarray::Axis(0));
            p_img.invert_axis(ndarray::Axis(0));
        }

        if rng.gen::<f64>() < params.photometric_prob {
            let mut kinds = [
                Photometric::Blur,
                Photometric::Noise,
                Photometric::BrightnessContrast,
            ];
            kinds.shuffle(&mut rng);
            for kind in kinds.iter().take(2) {
                p_img = apply_photometric(&p_img, *kind, params, &mut rng);
            }
        }
        out.push((t_img, p_img));
    }
    Ok(out)
}

fn apply_photometric<R: Rng>(
    img: &Pixels,
    kind: Photometric,
    params: &AugmentParams,
    rng: &mut R,
) -> Pixels {
    match kind {
        Photometric::Blur => {
            let lo = params.blur_kernel.0 / 2;
            let hi = params.blur_kernel.1 / 2;
            let kernel = 2 * rng.gen_range(lo..=hi) + 1;
            gaussian_blur(img, kernel as f64 / 6.0)
        }
        Photometric::Noise => {
            let var = rng.gen_range(params.noise_var.0..=params.noise_var.1);
            let std = var.sqrt();
            let mut out = img.clone();
            for v in out.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v + std * n).clamp(0.0, 1.0);
            }
            out
        }
        Photometric::BrightnessContrast => {
            let b = params.brightness_contrast;
            let brightness = rng.gen_range(-b..=b);
            let contrast = 1.0 + rng.gen_range(-b..=b);
            img.mapv(|v| ((v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0))
        }
    }
}
