//! Batched per-probe class scoring.
//!
//! The reference implementation in [`crate::classify`] runs one forward pass
//! per (class, trial). This path computes the same paired-trial scores but
//! batches (class, trial) pairs through the trunk and reuses the
//! conditioning-branch features across all of them — the branch only ever
//! sees the probe image, which is fixed for a probe.

use ndarray::Array4;

use crate::classify::{argmin_class, draw_trials, ClassScores};
use crate::error::{Error, Result};
use crate::img::Pixels;
use crate::schedule::{q_sample, to_signal, NoiseSchedule};

use super::model::{pixels_to_batch, CondSource, Denoiser};

/// Upper bound on the batch rows per trunk pass.
const MAX_BATCH_ROWS: usize = 36;

/// Scores every candidate class against the probe with shared `(t, eps)`
/// draws and returns the argmin class. Matches
/// [`crate::classify::classify`] up to f32 batching round-off.
pub fn score_classes(
    model: &Denoiser,
    params: &[f32],
    schedule: &NoiseSchedule,
    template: &Pixels,
    probe: &Pixels,
    class_ids: &[u32],
    n_trials: usize,
    seed: u64,
) -> Result<(u32, ClassScores)> {
    if class_ids.is_empty() {
        return Err(Error::invalid_argument("candidate class set is empty"));
    }
    if n_trials < 1 {
        return Err(Error::invalid_argument("n_trials must be >= 1"));
    }
    let mut ordered: Vec<u32> = class_ids.to_vec();
    ordered.sort_unstable();
    ordered.dedup();
    let k = ordered.len();

    let x0 = to_signal(template);
    let z = to_signal(probe);
    let trials = draw_trials(schedule, n_trials, seed, x0.dim());

    let cond = model
        .config
        .cond_branch
        .then(|| model.cond_features::<f32>(params, &pixels_to_batch(&z)));

    let (h, w) = x0.dim();
    let mut errors = vec![vec![0.0f64; n_trials]; k];

    let trials_per_chunk = (MAX_BATCH_ROWS / k).max(1);
    let mut j0 = 0usize;
    while j0 < n_trials {
        let j1 = (j0 + trials_per_chunk).min(n_trials);
        let rows = (j1 - j0) * k;
        let mut x_batch = Array4::<f32>::zeros((rows, 1, h, w));
        let mut ts = Vec::with_capacity(rows);
        let mut classes = Vec::with_capacity(rows);
        for (jj, (t, eps)) in trials[j0..j1].iter().enumerate() {
            let x_t = q_sample(&x0, *t, eps, schedule)?;
            for (ci, &class) in ordered.iter().enumerate() {
                let row = jj * k + ci;
                for ((r, c), &v) in x_t.indexed_iter() {
                    x_batch[[row, 0, r, c]] = v as f32;
                }
                ts.push(*t);
                classes.push(class);
            }
        }
        let cond_src = cond.as_ref().map(CondSource::Cached);
        let out = model.forward_infer(params, &x_batch, &ts, &classes, cond_src)?;
        for (jj, (_, eps)) in trials[j0..j1].iter().enumerate() {
            for ci in 0..k {
                let row = jj * k + ci;
                let mut acc = 0.0f64;
                for ((r, c), &e) in eps.indexed_iter() {
                    let d = e - out[[row, 0, r, c]] as f64;
                    acc += d * d;
                }
                errors[ci][j0 + jj] = acc;
            }
        }
        j0 = j1;
    }

    let mut scores = std::collections::BTreeMap::new();
    for (ci, &class) in ordered.iter().enumerate() {
        let total: f64 = errors[ci].iter().sum();
        scores.insert(class, total / n_trials as f64);
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
