//! Classification by minimum noise-prediction error, and the authentication
//! rule on top of it.
//!
//! A probe is scored against every candidate printer class: noise the
//! template, ask the denoiser for the noise under each class hypothesis, and
//! accumulate the squared prediction error. The same `(t, eps)` draws are
//! reused for every class at a fixed seed (paired trials), so score
//! differences are not washed out by trial-to-trial variance. The predicted
//! class is the argmin; authentication passes only when it equals the
//! expected authentic printer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Pixels;
use crate::rng;
use crate::schedule::{q_sample, to_signal, NoiseSchedule};
use crate::synthcdp::PrinterClass;

/// Anything that predicts the injected noise from `(x_t, t, z, class)`.
/// Inputs are in diffusion signal space `[-1, 1]`.
pub trait NoisePredictor: Sync {
    fn predict(&self, x_t: &Pixels, t: usize, z: &Pixels, class_id: u32) -> Result<Pixels>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Authentic,
    Counterfeit,
}

/// Per-class aggregated noise-prediction errors for one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    /// class_id -> mean over trials of the per-trial squared error
    /// (summed over pixels).
    pub scores: BTreeMap<u32, f64>,
    pub n_trials: usize,
    pub seed: u64,
}

/// The Eq.-4-style decision: a probe is authentic iff the classifier
/// attributes it to the expected printer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthDecision {
    pub predicted_class: u32,
    pub expected_class: u32,
    pub verdict: Verdict,
    pub scores: ClassScores,
}

/// One probe's classification record, one JSON line per probe in batch runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub template_id: u64,
    pub true_class: u32,
    pub expected_class: u32,
    pub predicted_class: u32,
    pub verdict: Verdict,
    pub scores: BTreeMap<u32, f64>,
}

/// The shared trial sequence: `(t_j, eps_j)` with t uniform on `[1, T]` and
/// eps standard normal, drawn from the seeded stream. Every class scored at
/// the same seed sees this exact sequence.
pub fn draw_trials(
    schedule: &NoiseSchedule,
    n_trials: usize,
    seed: u64,
    shape: (usize, usize),
) -> Vec<(usize, Pixels)> {
    let mut rng = rng::derived_stream(seed, "trials", &[]);
    (0..n_trials)
        .map(|_| {
            let t = rng.gen_range(1..=schedule.steps());
            let eps = Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
            (t, eps)
        })
        .collect()
}

/// Per-trial squared error, summed over pixels, f64 accumulation in
/// row-major order. Both the reference and the batched scoring paths use
/// this so their results are bit-identical.
pub fn trial_sq_error(eps: &Pixels, predicted: &Pixels) -> f64 {
    let mut acc = 0.0;
    for (e, p) in eps.iter().zip(predicted.iter()) {
        let d = e - p;
        acc += d * d;
    }
    acc
}

/// Mean over `n_trials` paired trials of the squared noise-prediction error
/// for one class hypothesis. `template` and `probe` are `[0, 1]` images;
/// they are remapped to signal space internally.
pub fn class_error<M: NoisePredictor>(
    model: &M,
    schedule: &NoiseSchedule,
    template: &Pixels,
    probe: &Pixels,
    class_id: u32,
    n_trials: usize,
    seed: u64,
) -> Result<f64> {
    if n_trials < 1 {
        return Err(Error::invalid_argument("n_trials must be >= 1"));
    }
    let x0 = to_signal(template);
    let z = to_signal(probe);
    let trials = draw_trials(schedule, n_trials, seed, x0.dim());
    let mut total = 0.0;
    for (t, eps) in &trials {
        let x_t = q_sample(&x0, *t, eps, schedule)?;
        let predicted = model.predict(&x_t, *t, &z, class_id)?;
        total += trial_sq_error(eps, &predicted);
    }
    Ok(total / n_trials as f64)
}

/// Argmin over candidate classes with ties broken toward the lowest id.
pub fn argmin_class(scores: &BTreeMap<u32, f64>) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (&c, &s) in scores {
        match best {
            None => best = Some((c, s)),
            Some((_, bs)) if s < bs => best = Some((c, s)),
            _ => {}
        }
    }
    best.map(|(c, _)| c)
}

/// Scores the probe under every candidate class and picks the argmin.
pub fn classify<M: NoisePredictor>(
    model: &M,
    schedule: &NoiseSchedule,
    template: &Pixels,
    probe: &Pixels,
    classes: &[u32],
    n_trials: usize,
    seed: u64,
) -> Result<(u32, ClassScores)> {
    if classes.is_empty() {
        return Err(Error::invalid_argument("candidate class set is empty"));
    }
    let mut ordered: Vec<u32> = classes.to_vec();
    ordered.sort_unstable();
    ordered.dedup();

    let mut scores = BTreeMap::new();
    for &c in &ordered {
        scores.insert(
            c,
            class_error(model, schedule, template, probe, c, n_trials, seed)?,
        );
    }
    let predicted = argmin_class(&scores).expect("nonempty scores");
    Ok((
        predicted,
        ClassScores {
            scores,
            n_trials,
            seed,
        },
    ))
}

/// The authentication decision rule: authentic iff the predicted class equals
/// the expected authentic printer. A mismatch is a counterfeit verdict even
/// when the predicted class is itself a legitimate printer.
pub fn authenticate(
    classes: &[PrinterClass],
    predicted: u32,
    expected: u32,
    scores: ClassScores,
) -> Result<AuthDecision> {
    let lookup = |id: u32| {
        classes
            .iter()
            .find(|c| c.class_id == id)
            .ok_or_else(|| Error::invalid_argument(format!("unknown class_id {id}")))
    };
    lookup(predicted)?;
    let expected_class = lookup(expected)?;
    if !expected_class.is_authentic {
        return Err(Error::invalid_argument(format!(
            "expected class {} is not an authentic printer",
            expected_class.label
        )));
    }
    Ok(AuthDecision {
        predicted_class: predicted,
        expected_class: expected,
        verdict: if predicted == expected {
            Verdict::Authentic
        } else {
            Verdict::Counterfeit
        },
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::default_schedule;
    use crate::synthcdp::default_classes;

    /// Test oracle: reconstructs the exact injected noise from `x_t` and the
    /// known clean signal, then corrupts it by a constant under wrong class
    /// hypotheses.
    struct OracleDenoiser {
        x0: Pixels,
        schedule: NoiseSchedule,
        true_class: u32,
        bias: f64,
    }

    impl NoisePredictor for OracleDenoiser {
        fn predict(&self, x_t: &Pixels, t: usize, _z: &Pixels, class_id: u32) -> Result<Pixels> {
            // eps = (x_t - sqrt(abar) x0) / sqrt(1 - abar), exact because the
            // oracle knows the clean signal.
            let ab = self.schedule.alpha_bar_at(t);
            let mut out = ndarray::Zip::from(x_t)
                .and(&self.x0)
                .map_collect(|&xt, &x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt());
            if class_id != self.true_class {
                out.mapv_inplace(|v| v + self.bias);
            }
            Ok(out)
        }
    }

    fn oracle_for(template: &Pixels, true_class: u32) -> OracleDenoiser {
        OracleDenoiser {
            x0: to_signal(template),
            schedule: default_schedule(),
            true_class,
            bias: 0.5,
        }
    }

    fn test_template(seed: u64) -> Pixels {
        crate::synthcdp::gen_template(seed, 16).unwrap().to_ideal_print()
    }

    #[test]
    fn oracle_scores_match_plugin_values() {
        let template = test_template(1);
        let probe = template.clone();
        let schedule = default_schedule();
        let model = oracle_for(&template, 2);
        let n_pixels = 16.0 * 16.0;

        let right = class_error(&model, &schedule, &template, &probe, 2, 8, 7).unwrap();
        let wrong = class_error(&model, &schedule, &template, &probe, 0, 8, 7).unwrap();
        assert!(right.abs() < 1e-16, "true-class error {right}");
        assert!(
            (wrong - 0.25 * n_pixels).abs() < 1e-9,
            "wrong-class error {wrong} vs {}",
            0.25 * n_pixels
        );
    }

    #[test]
    fn scores_are_deterministic_per_seed() {
        let template = test_template(2);
        let schedule = default_schedule();
        let model = oracle_for(&template, 1);
        let a = class_error(&model, &schedule, &template, &template, 0, 5, 11).unwrap();
        let b = class_error(&model, &schedule, &template, &template, 0, 5, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn n_trials_below_one_is_rejected() {
        let template = test_template(3);
        let schedule = default_schedule();
        let model = oracle_for(&template, 0);
        assert!(class_error(&model, &schedule, &template, &template, 0, 0, 1).is_err());
    }

    /// A 50-trial score has strictly smaller variance across reseeds than a
    /// single-trial score. The oracle's error is made t-dependent so scores
    /// actually fluctuate.
    #[test]
    fn trial_averaging_reduces_variance() {
        struct TimeBiased {
            inner: OracleDenoiser,
        }
        impl NoisePredictor for TimeBiased {
            fn predict(&self, x_t: &Pixels, t: usize, z: &Pixels, c: u32) -> Result<Pixels> {
                let mut out = self.inner.predict(x_t, t, z, c)?;
                let steps = self.inner.schedule.steps() as f64;
                out.mapv_inplace(|v| v + 0.3 * t as f64 / steps);
                Ok(out)
            }
        }
        let template = test_template(4);
        let schedule = default_schedule();
        let model = TimeBiased {
            inner: oracle_for(&template, 0),
        };
        let variance = |n_trials: usize| {
            let scores: Vec<f64> = (0..30)
                .map(|s| {
                    class_error(&model, &schedule, &template, &template, 0, n_trials, s).unwrap()
                })
                .collect();
            let m = scores.iter().sum::<f64>() / scores.len() as f64;
            scores.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (scores.len() - 1) as f64
        };
        assert!(variance(50) < variance(1));
    }

    #[test]
    fn oracle_classification_is_perfect() {
        let schedule = default_schedule();
        for class in 0..6u32 {
            for probe_idx in 0..4u64 {
                let template = test_template(100 + probe_idx);
                let model = oracle_for(&template, class);
                let (predicted, _) = classify(
                    &model,
                    &schedule,
                    &template,
                    &template,
                    &[0, 1, 2, 3, 4, 5],
                    10,
                    probe_idx,
                )
                .unwrap();
                assert_eq!(predicted, class);
            }
        }
    }

    /// With a class-independent predictor every class sees the exact same
    /// (t, eps) sequence, so scores are identical across classes. This is
    /// the paired-trials discipline made observable.
    #[test]
    fn paired_trials_share_draws_across_classes() {
        let template = test_template(5);
        let schedule = default_schedule();
        let model = oracle_for(&template, 0);
        // bias applies to classes != 0; compare two wrong classes.
        let a = class_error(&model, &schedule, &template, &template, 1, 6, 13).unwrap();
        let b = class_error(&model, &schedule, &template, &template, 2, 6, 13).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmin_breaks_ties_toward_lowest_id() {
        let mut scores = BTreeMap::new();
        scores.insert(3u32, 1.0);
        scores.insert(1u32, 1.0);
        scores.insert(2u32, 2.0);
        assert_eq!(argmin_class(&scores), Some(1));
    }

    #[test]
    fn argmin_is_shift_invariant() {
        let mut scores = BTreeMap::new();
        for (c, s) in [(0u32, 3.0), (1, 1.5), (2, 2.0)] {
            scores.insert(c, s);
        }
        let base = argmin_class(&scores).unwrap();
        let shifted: BTreeMap<u32, f64> = scores.iter().map(|(&c, &s)| (c, s + 10.0)).collect();
        assert_eq!(argmin_class(&shifted), Some(base));
    }

    #[test]
    fn single_class_is_returned_directly() {
        let template = test_template(6);
        let schedule = default_schedule();
        let model = oracle_for(&template, 0);
        let (predicted, scores) =
            classify(&model, &schedule, &template, &template, &[4], 3, 1).unwrap();
        assert_eq!(predicted, 4);
        assert_eq!(scores.scores.len(), 1);
    }

    #[test]
    fn empty_class_set_is_rejected() {
        let template = test_template(7);
        let schedule = default_schedule();
        let model = oracle_for(&template, 0);
        assert!(classify(&model, &schedule, &template, &template, &[], 3, 1).is_err());
    }

    #[test]
    fn authentication_rule() {
        let classes = default_classes();
        let scores = ClassScores {
            scores: BTreeMap::new(),
            n_trials: 0,
            seed: 0,
        };
        // HP55 predicted, HP55 expected -> authentic.
        let d = authenticate(&classes, 0, 0, scores.clone()).unwrap();
        assert_eq!(d.verdict, Verdict::Authentic);
        // HP76 predicted, HP55 expected -> counterfeit even though HP76 is
        // itself a legitimate printer.
        let d = authenticate(&classes, 1, 0, scores.clone()).unwrap();
        assert_eq!(d.verdict, Verdict::Counterfeit);
        // HP55_76 predicted, HP55 expected -> counterfeit.
        let d = authenticate(&classes, 3, 0, scores.clone()).unwrap();
        assert_eq!(d.verdict, Verdict::Counterfeit);
        // Expecting a counterfeit class is a caller error.
        assert!(authenticate(&classes, 0, 2, scores).is_err());
    }
}
