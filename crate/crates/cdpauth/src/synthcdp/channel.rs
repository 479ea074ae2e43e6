//! The simulated printing-and-digitization channel.
//!
//! A print applies, in order: dot gain (stochastic morphological grow/shrink
//! of the ink mask), sub-pixel misregistration, Gaussian blur, a gamma tone
//! curve, additive Gaussian noise, and a clamp to `[0, 1]`. Ink renders dark:
//! bit 1 maps to pixel 0.0 before the distortions. Each stage that consumes
//! randomness draws from one seeded stream in a fixed order, so a print is a
//! pure function of `(template, channel, seed)`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Pixels;
use crate::rng;

use super::template::BinaryTemplate;

/// Parameters of one printer's P&D channel.
///
/// `shift` is the per-axis bound of the sub-pixel misregistration: each print
/// draws its actual offset uniformly from `[-shift.0, shift.0] x
/// [-shift.1, shift.1]`, so registration varies per sample while the channel
/// itself stays a single fixed signature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Probability of ink growth (positive) or shrink (negative), in [-0.3, 0.3].
    pub dot_gain: f64,
    /// Gaussian blur width in pixels, >= 0.
    pub blur_sigma: f64,
    /// Additive Gaussian noise std, pre-clamp, >= 0.
    pub noise_std: f64,
    /// Tone curve exponent, > 0.
    pub gamma: f64,
    /// Sub-pixel misregistration bound per axis, each in [0, 0.5].
    pub shift: (f64, f64),
    /// RNG stream id folded into every print's seed derivation.
    pub stream_id: u64,
}

impl ChannelParams {
    /// The distortion-free channel: printing is exact bit-to-intensity rendering.
    pub fn identity() -> Self {
        ChannelParams {
            dot_gain: 0.0,
            blur_sigma: 0.0,
            noise_std: 0.0,
            gamma: 1.0,
            shift: (0.0, 0.0),
            stream_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-0.3..=0.3).contains(&self.dot_gain) {
            return Err(Error::invalid_argument(format!(
                "dot_gain must be in [-0.3, 0.3], got {}",
                self.dot_gain
            )));
        }
        if !self.blur_sigma.is_finite() || self.blur_sigma < 0.0 {
            return Err(Error::invalid_argument("blur_sigma must be >= 0"));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::invalid_argument("noise_std must be >= 0"));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::invalid_argument("gamma must be > 0"));
        }
        for s in [self.shift.0, self.shift.1] {
            if !(0.0..=0.5).contains(&s) {
                return Err(Error::invalid_argument(
                    "shift bounds must be in [0, 0.5] per axis",
                ));
            }
        }
        Ok(())
    }
}

/// A physical-channel rendering of a template (authentic print, counterfeit,
/// or probe). Values live in `[0, 1]`, dark ink at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PrintedCdp {
    pub pixels: Pixels,
    pub template_id: u64,
    /// Dataset class this print belongs to; `None` for ad-hoc prints.
    pub class_id: Option<u32>,
}

/// Prints a template through a channel. Deterministic for fixed seed.
pub fn print_cdp(template: &BinaryTemplate, channel: &ChannelParams, seed: u64) -> PrintedCdp {
    let mut rng = rng::derived_stream(seed, "print", &[channel.stream_id]);
    let side = template.side();

    // Dot gain operates on the ink mask before rendering to intensities.
    let mut ink = template.bits.clone();
    if channel.dot_gain != 0.0 {
        let p = channel.dot_gain.abs();
        let grow = channel.dot_gain > 0.0;
        let src = ink.clone();
        for r in 0..side {
            for c in 0..side {
                let is_ink = src[[r, c]] == 1;
                if is_ink == grow {
                    continue;
                }
                if has_neighbor(&src, r, c, if grow { 1 } else { 0 }) && rng.gen::<f64>() < p {
                    ink[[r, c]] = if grow { 1 } else { 0 };
                }
            }
        }
    }

    // Ink is dark: bit 1 -> 0.0, bit 0 -> 1.0.
    let mut img: Pixels = ink.mapv(|b| 1.0 - b as f64);

    if channel.shift.0 > 0.0 || channel.shift.1 > 0.0 {
        let dy = rng.gen_range(-channel.shift.0..=channel.shift.0);
        let dx = rng.gen_range(-channel.shift.1..=channel.shift.1);
        img = bilinear_shift(&img, dy, dx);
    }

    if channel.blur_sigma > 0.0 {
        img = gaussian_blur(&img, channel.blur_sigma);
    }

    if channel.gamma != 1.0 {
        img.mapv_inplace(|v| v.powf(channel.gamma));
    }

    if channel.noise_std > 0.0 {
        for v in img.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += channel.noise_std * n;
        }
    }

    img.mapv_inplace(|v| v.clamp(0.0, 1.0));

    PrintedCdp {
        pixels: img,
        template_id: template.template_id,
        class_id: None,
    }
}

fn has_neighbor(mask: &Array2<u8>, r: usize, c: usize, value: u8) -> bool {
    let (h, w) = mask.dim();
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr >= 0 && nr < h as i64 && nc >= 0 && nc < w as i64 {
                if mask[[nr as usize, nc as usize]] == value {
                    return true;
                }
            }
        }
    }
    false
}

/// Resamples `img` at `(r - dy, c - dx)` with bilinear weights, clamping
/// coordinates at the border.
fn bilinear_shift(img: &Pixels, dy: f64, dx: f64) -> Pixels {
    let (h, w) = img.dim();
    let at = |r: i64, c: i64| -> f64 {
        img[[
            r.clamp(0, h as i64 - 1) as usize,
            c.clamp(0, w as i64 - 1) as usize,
        ]]
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let sr = r as f64 - dy;
        let sc = c as f64 - dx;
        let r0 = sr.floor();
        let c0 = sc.floor();
        let fr = sr - r0;
        let fc = sc - c0;
        let (r0, c0) = (r0 as i64, c0 as i64);
        (1.0 - fr) * (1.0 - fc) * at(r0, c0)
            + (1.0 - fr) * fc * at(r0, c0 + 1)
            + fr * (1.0 - fc) * at(r0 + 1, c0)
            + fr * fc * at(r0 + 1, c0 + 1)
    })
}

/// Separable Gaussian blur with kernel radius `ceil(3 sigma)` and clamped
/// borders.
pub fn gaussian_blur(img: &Pixels, sigma: f64) -> Pixels {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (h, w) = img.dim();
    let mut tmp = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let cc = (c as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += k * img[[r, cc]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let rr = (r as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += k * tmp[[rr, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}
