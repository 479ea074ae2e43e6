//! Classical template-similarity authenticators: NCC and SSIM against the
//! template's ideal-print rendering, thresholded per authentic class.
//!
//! Thresholds come from the validation split by the equal-error rule: the
//! observed score that best balances the empirical miss and false-accept
//! rates. A probe is authentic iff its similarity score is at or above the
//! threshold of the printer it claims to come from.

use serde::{Deserialize, Serialize};

use crate::classify::Verdict;
use crate::error::{Error, Result};
use crate::img::Pixels;

/// Zero-mean, unit-norm cross-correlation in `[-1, 1]`. Symmetric, and
/// invariant to positive affine rescaling of either argument.
pub fn ncc(a: &Pixels, b: &Pixels) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid_argument(format!(
            "shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    for img in [a, b] {
        let first = img[[0, 0]];
        if img.iter().all(|&v| v == first) {
            return Err(Error::DegenerateInput(
                "constant image has no correlation structure".into(),
            ));
        }
    }
    let ma = a.mean().unwrap();
    let mb = b.mean().unwrap();
    let mut num = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        num += dx * dy;
        na += dx * dx;
        nb += dy * dy;
    }
    Ok(num / (na.sqrt() * nb.sqrt()))
}

/// SSIM window side on 32x32-scale images.
pub const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean SSIM over all 8x8 sliding windows (stride 1, uniform weights,
/// dynamic range 1.0, population variance normalization).
pub fn ssim(a: &Pixels, b: &Pixels) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid_argument(format!(
            "shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid_argument(format!(
            "images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM"
        )));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;

    let mut total = 0.0;
    let mut windows = 0usize;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let (x, y) = (a[[r, c]], b[[r, c]]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (mu_a, mu_b) = (sa / n, sb / n);
            let var_a = saa / n - mu_a * mu_a;
            let var_b = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Ncc,
    Ssim,
}

impl MetricKind {
    pub fn compute(&self, a: &Pixels, b: &Pixels) -> Result<f64> {
        match self {
            MetricKind::Ncc => ncc(a, b),
            MetricKind::Ssim => ssim(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibrationRule {
    EqualError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub class_id: u32,
    pub label: String,
    pub threshold: f64,
}

/// Per-authentic-class thresholds for one similarity metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub metric: MetricKind,
    pub rule: CalibrationRule,
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdTable {
    pub fn threshold_for(&self, class_id: u32) -> Result<f64> {
        self.entries
            .iter()
            .find(|e| e.class_id == class_id)
            .map(|e| e.threshold)
            .ok_or_else(|| {
                Error::invalid_argument(format!("class {class_id} has no calibrated threshold"))
            })
    }
}

/// Validation scores for one authentic class: similarity of genuine probes
/// and of counterfeit probes claiming this printer.
#[derive(Debug, Clone)]
pub struct ClassScoreSets {
    pub class_id: u32,
    pub label: String,
    pub authentic: Vec<f64>,
    pub counterfeit: Vec<f64>,
}

fn rates_at(threshold: f64, authentic: &[f64], counterfeit: &[f64]) -> (f64, f64) {
    let miss = authentic.iter().filter(|&&s| s < threshold).count() as f64 / authentic.len() as f64;
    let fa =
        counterfeit.iter().filter(|&&s| s >= threshold).count() as f64 / counterfeit.len() as f64;
    (miss, fa)
}

/// Equal-error calibration: sweep every observed score as a candidate
/// threshold and keep the one minimizing `|P_miss - P_fa|`, ties toward the
/// lower threshold.
pub fn calibrate(sets: &[ClassScoreSets], metric: MetricKind) -> Result<ThresholdTable> {
    let mut entries = Vec::with_capacity(sets.len());
    for set in sets {
        if set.authentic.is_empty() || set.counterfeit.is_empty() {
            return Err(Error::InsufficientData(format!(
                "class {} needs both authentic and counterfeit validation scores",
                set.label
            )));
        }
        let mut candidates: Vec<f64> = set
            .authentic
            .iter()
            .chain(set.counterfeit.iter())
            .copied()
            .collect();
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        candidates.dedup();

        let mut best = (f64::INFINITY, f64::INFINITY);
        for &cand in &candidates {
            let (miss, fa) = rates_at(cand, &set.authentic, &set.counterfeit);
            let gap = (miss - fa).abs();
            // Strict < keeps the lowest threshold among ties.
            if gap < best.1 {
                best = (cand, gap);
            }
        }
        entries.push(ThresholdEntry {
            class_id: set.class_id,
            label: set.label.clone(),
            threshold: best.0,
        });
    }
    Ok(ThresholdTable {
        metric,
        rule: CalibrationRule::EqualError,
        entries,
    })
}

/// A similarity-based authentication outcome. There is no predicted class;
/// the probe is only checked against the claimed printer's threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDecision {
    pub expected_class: u32,
    pub score: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

/// Authentic iff `metric(probe, template) >= threshold` for the claimed
/// printer (boundary accepts).
pub fn authenticate_similarity(
    probe: &Pixels,
    template: &Pixels,
    expected_class: u32,
    table: &ThresholdTable,
) -> Result<SimilarityDecision> {
    let threshold = table.threshold_for(expected_class)?;
    let score = table.metric.compute(probe, template)?;
    Ok(SimilarityDecision {
        expected_class,
        score,
        threshold,
        verdict: if score >= threshold {
            Verdict::Authentic
        } else {
            Verdict::Counterfeit
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcdp::{gen_template, print_cdp, ChannelParams};
    use ndarray::Array2;
    use rand::Rng;

    fn random_image(seed: u64, side: usize) -> Pixels {
        let mut rng = crate::rng::stream(seed);
        Array2::from_shape_fn((side, side), |_| rng.gen::<f64>())
    }

    #[test]
    fn ncc_self_similarity_is_one() {
        let x = random_image(1, 16);
        assert!((ncc(&x, &x).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ncc_anti_correlation_is_minus_one() {
        let x = random_image(2, 16);
        let y = x.mapv(|v| -v + 0.75);
        assert!((ncc(&x, &y).unwrap() + 1.0).abs() < 1e-10);
    }

    #[test]
    fn ncc_of_identity_print_is_one() {
        let t = gen_template(3, 16).unwrap();
        let p = print_cdp(&t, &ChannelParams::identity(), 0);
        let score = ncc(&t.to_ideal_print(), &p.pixels).unwrap();
        assert!((score - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ncc_rejects_constant_images() {
        let x = random_image(4, 16);
        let flat = Array2::from_elem((16, 16), 0.3);
        assert!(matches!(
            ncc(&x, &flat),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn ncc_is_affine_invariant() {
        let a = random_image(5, 16);
        let b = random_image(6, 16);
        let base = ncc(&a, &b).unwrap();
        for (alpha, beta) in [(2.0, 0.1), (0.5, -0.3), (10.0, 5.0)] {
            let scaled = b.mapv(|v| alpha * v + beta);
            assert!((ncc(&a, &scaled).unwrap() - base).abs() < 1e-8);
        }
    }

    #[test]
    fn ssim_self_similarity_is_one() {
        let x = random_image(7, 16);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(8, 16);
        let b = random_image(9, 16);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn ssim_degrades_monotonically_with_noise() {
        let t = gen_template(10, 32).unwrap();
        let base = t.to_ideal_print();
        let light = print_cdp(
            &t,
            &ChannelParams {
                noise_std: 0.05,
                ..ChannelParams::identity()
            },
            1,
        );
        let heavy = print_cdp(
            &t,
            &ChannelParams {
                noise_std: 0.3,
                ..ChannelParams::identity()
            },
            1,
        );
        let s_light = ssim(&base, &light.pixels).unwrap();
        let s_heavy = ssim(&base, &heavy.pixels).unwrap();
        assert!(s_heavy < s_light, "{s_heavy} !< {s_light}");
    }

    /// Closed-form check on constant images: variances vanish, so SSIM
    /// reduces to the luminance term (2 mu_a mu_b + C1)/(mu_a^2 + mu_b^2 + C1).
    #[test]
    fn ssim_matches_closed_form_on_constant_images() {
        let a = Array2::from_elem((16, 16), 0.6);
        let b = Array2::from_elem((16, 16), 0.4);
        let expected = (2.0 * 0.6 * 0.4 + 1e-4) / (0.6f64.powi(2) + 0.4f64.powi(2) + 1e-4);
        // Window variances only vanish to ~1e-15 against C2 = 9e-4.
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn calibration_separable_populations_reach_zero_error() {
        let sets = [ClassScoreSets {
            class_id: 0,
            label: "HP55".into(),
            authentic: vec![0.9, 0.92, 0.95, 0.99],
            counterfeit: vec![0.1, 0.2, 0.3, 0.4],
        }];
        let table = calibrate(&sets, MetricKind::Ncc).unwrap();
        let th = table.threshold_for(0).unwrap();
        let (miss, fa) = rates_at(th, &sets[0].authentic, &sets[0].counterfeit);
        assert_eq!((miss, fa), (0.0, 0.0));
    }

    #[test]
    fn calibration_identical_populations_stay_at_half() {
        let scores = vec![0.5, 0.6, 0.7, 0.8];
        let sets = [ClassScoreSets {
            class_id: 0,
            label: "HP55".into(),
            authentic: scores.clone(),
            counterfeit: scores,
        }];
        let table = calibrate(&sets, MetricKind::Ncc).unwrap();
        let th = table.threshold_for(0).unwrap();
        let (miss, fa) = rates_at(th, &sets[0].authentic, &sets[0].counterfeit);
        assert!(((miss + fa) / 2.0 - 0.5).abs() < 1e-12);
    }

    /// No other observed-score threshold beats the calibrated one on the
    /// calibration data itself.
    #[test]
    fn calibration_is_optimal_over_observed_scores() {
        let mut rng = crate::rng::stream(11);
        let authentic: Vec<f64> = (0..40).map(|_| 0.5 + 0.5 * rng.gen::<f64>()).collect();
        let counterfeit: Vec<f64> = (0..40).map(|_| 0.7 * rng.gen::<f64>()).collect();
        let sets = [ClassScoreSets {
            class_id: 0,
            label: "HP55".into(),
            authentic: authentic.clone(),
            counterfeit: counterfeit.clone(),
        }];
        let table = calibrate(&sets, MetricKind::Ssim).unwrap();
        let th = table.threshold_for(0).unwrap();
        let (miss, fa) = rates_at(th, &authentic, &counterfeit);
        let best_gap = (miss - fa).abs();
        for cand in authentic.iter().chain(counterfeit.iter()) {
            let (m, f) = rates_at(*cand, &authentic, &counterfeit);
            assert!(
                (m - f).abs() >= best_gap - 1e-12,
                "threshold {cand} beats calibrated {th}"
            );
        }
    }

    #[test]
    fn calibration_requires_both_populations() {
        let sets = [ClassScoreSets {
            class_id: 0,
            label: "HP55".into(),
            authentic: vec![0.9],
            counterfeit: vec![],
        }];
        assert!(matches!(
            calibrate(&sets, MetricKind::Ncc),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn boundary_score_is_accepted() {
        let table = ThresholdTable {
            metric: MetricKind::Ncc,
            rule: CalibrationRule::EqualError,
            entries: vec![ThresholdEntry {
                class_id: 0,
                label: "HP55".into(),
                threshold: 1.0,
            }],
        };
        let t = gen_template(12, 16).unwrap();
        let p = print_cdp(&t, &ChannelParams::identity(), 0);
        let d = authenticate_similarity(&p.pixels, &t.to_ideal_print(), 0, &table).unwrap();
        // Identity print scores exactly 1.0, right at the threshold.
        assert_eq!(d.verdict, Verdict::Authentic);
    }

    #[test]
    fn missing_class_in_table_is_an_error() {
        let table = ThresholdTable {
            metric: MetricKind::Ncc,
            rule: CalibrationRule::EqualError,
            entries: vec![],
        };
        let x = random_image(13, 16);
        assert!(authenticate_similarity(&x, &x, 0, &table).is_err());
    }
}
