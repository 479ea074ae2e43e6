//! Template estimation by Otsu thresholding.
//!
//! This is the attack a counterfeiter mounts on an authentic print: binarize
//! it and treat the result as the design. The threshold maximizes the
//! between-class variance over a 256-bin histogram; ties break toward the
//! lower bin. Dark pixels (at or below the threshold bin) map back to ink
//! bits.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::img::Pixels;

use super::channel::PrintedCdp;
use super::template::BinaryTemplate;

pub const HIST_BINS: usize = 256;

fn histogram(img: &Pixels) -> [u64; HIST_BINS] {
    let mut hist = [0u64; HIST_BINS];
    for &v in img.iter() {
        hist[bin_of(v)] += 1;
    }
    hist
}

#[inline]
pub fn bin_of(v: f64) -> usize {
    ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

/// Otsu's threshold as a bin index `k`: class 0 is bins `0..=k`, class 1 the
/// rest. Errors if the histogram is concentrated in a single bin (no split
/// can separate anything).
pub fn otsu_threshold(img: &Pixels) -> Result<usize> {
    let hist = histogram(img);
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|&&h| h > 0).count() < 2 {
        return Err(Error::DegenerateInput(
            "image histogram occupies a single bin".into(),
        ));
    }

    let total_f = total as f64;
    let mut sum_all = 0.0;
    for (i, &h) in hist.iter().enumerate() {
        sum_all += i as f64 * h as f64;
    }

    let mut best_k = 0usize;
    let mut best_var = -1.0f64;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for k in 0..HIST_BINS - 1 {
        w0 += hist[k] as f64;
        sum0 += k as f64 * hist[k] as f64;
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        // Strict > keeps the lowest bin on ties.
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    Ok(best_k)
}

/// Recovers an approximate binary template from a print: pixels at or below
/// the Otsu threshold are ink.
pub fn estimate_template(printed: &PrintedCdp) -> Result<BinaryTemplate> {
    let k = otsu_threshold(&printed.pixels)?;
    let bits: Array2<u8> = printed
        .pixels
        .mapv(|v| if bin_of(v) <= k { 1u8 } else { 0u8 });
    BinaryTemplate::new(bits, printed.template_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcdp::channel::{print_cdp, ChannelParams};
    use crate::synthcdp::template::gen_template;
    use ndarray::Array2;
    use rand::Rng;

    /// Brute-force oracle: evaluate the between-class variance for every
    /// split directly from per-class means, independent of the cumulative
    /// formulation above.
    fn naive_otsu(img: &Pixels) -> usize {
        let hist = super::histogram(img);
        let mut best = (0usize, -1.0f64);
        for k in 0..HIST_BINS - 1 {
            let (mut w0, mut s0) = (0.0, 0.0);
            for i in 0..=k {
                w0 += hist[i] as f64;
                s0 += (i * hist[i] as usize) as f64;
            }
            let (mut w1, mut s1) = (0.0, 0.0);
            for i in k + 1..HIST_BINS {
                w1 += hist[i] as f64;
                s1 += (i * hist[i] as usize) as f64;
            }
            if w0 == 0.0 || w1 == 0.0 {
                continue;
            }
            let d = s0 / w0 - s1 / w1;
            let var = w0 * w1 * d * d;
            if var > best.1 {
                best = (k, var);
            }
        }
        best.0
    }

    #[test]
    fn matches_brute_force_oracle_on_random_images() {
        let mut rng = crate::rng::stream(99);
        for _ in 0..20 {
            let img = Array2::from_shape_fn((24, 24), |_| rng.gen::<f64>());
            assert_eq!(otsu_threshold(&img).unwrap(), naive_otsu(&img));
        }
    }

    #[test]
    fn two_level_image_recovers_membership_exactly() {
        let img = Array2::from_shape_fn((16, 16), |(r, c)| if (r + c) % 3 == 0 { 0.1 } else { 0.9 });
        let printed = PrintedCdp {
            pixels: img.clone(),
            template_id: 0,
            class_id: None,
        };
        let est = estimate_template(&printed).unwrap();
        for ((r, c), &b) in est.bits.indexed_iter() {
            assert_eq!(b == 1, img[[r, c]] < 0.5);
        }
    }

    #[test]
    fn identity_print_round_trips_template() {
        let t = gen_template(5, 32).unwrap();
        let p = print_cdp(&t, &ChannelParams::identity(), 0);
        let est = estimate_template(&p).unwrap();
        assert_eq!(est.bits, t.bits);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let printed = PrintedCdp {
            pixels: Array2::from_elem((16, 16), 0.5),
            template_id: 0,
            class_id: None,
        };
        assert!(matches!(
            estimate_template(&printed),
            Err(Error::DegenerateInput(_))
        ));
    }
}
