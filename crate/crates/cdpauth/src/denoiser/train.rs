//! Denoiser training: per-step noise-prediction MSE over augmented
//! (template, print) pairs, AdamW with warmup + cosine decay.
//!
//! Determinism contract: every random draw derives from `hp.seed` through
//! fixed domains (augmentation, shuffling, noise), and gradient accumulation
//! uses fixed-size chunks reduced in order, so the result is independent of
//! the worker count.

use ndarray::Array4;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::augment::{augment, AugmentParams};
use crate::eval::split::{Partition, SplitSpec};
use crate::nn::{lr_at, AdamW, Scalar};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::synthcdp::Dataset;

use super::model::{CondSource, Denoiser};

/// Gradient-accumulation chunk size; fixed so results do not depend on the
/// number of worker threads.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentParams,
    /// Ablation: feed the printed probe as the diffusion input instead of
    /// the binary template.
    pub no_template: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 30,
            batch_size: 32,
            lr: 2e-4,
            warmup_steps: 200,
            weight_decay: 0.0,
            seed: 0,
            augment: AugmentParams::default(),
            no_template: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Running minimum of the validation losses: the monotone-smoothed
    /// curve recorded alongside the raw values.
    pub smoothed_val: Vec<f64>,
    pub val_loss_init: f64,
    pub val_loss_final: f64,
    pub steps: usize,
}

/// One training micro-batch in signal space.
pub struct TrainBatch<T: Scalar> {
    pub x_t: Array4<T>,
    pub z: Array4<T>,
    pub eps: Array4<T>,
    pub ts: Vec<usize>,
    pub classes: Vec<u32>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    fn slice(&self, range: std::ops::Range<usize>) -> TrainBatch<T> {
        use ndarray::s;
        TrainBatch {
            x_t: self.x_t.slice(s![range.clone(), .., .., ..]).to_owned(),
            z: self.z.slice(s![range.clone(), .., .., ..]).to_owned(),
            eps: self.eps.slice(s![range.clone(), .., .., ..]).to_owned(),
            ts: self.ts[range.clone()].to_vec(),
            classes: self.classes[range].to_vec(),
        }
    }
}

/// Noise-prediction loss and parameter gradient for one batch.
///
/// `norm` divides the squared error (pass the total element count of the
/// enclosing logical batch so chunked evaluation matches unchunked). Returns
/// the raw squared-error sum so callers can renormalize.
pub fn loss_and_grad<T: Scalar>(
    model: &Denoiser,
    params: &[T],
    batch: &TrainBatch<T>,
    norm: f64,
) -> Result<(f64, Vec<T>)> {
    let z = model.config.cond_branch.then_some(&batch.z);
    let (out, cache) = model.forward_train(params, &batch.x_t, &batch.ts, &batch.classes, z)?;
    let mut sq_sum = 0.0f64;
    let mut dout = Array4::zeros(out.dim());
    let scale = T::from_f64(2.0 / norm);
    ndarray::Zip::from(&mut dout)
        .and(&out)
        .and(&batch.eps)
        .for_each(|d, &o, &e| {
            let diff = o - e;
            sq_sum += diff.to_f64() * diff.to_f64();
            *d = scale * diff;
        });
    let mut grads = vec![T::zero(); model.n_params()];
    model.backward(params, &cache, &dout, &mut grads);
    Ok((sq_sum, grads))
}

/// Mean squared noise-prediction error of a batch without gradients.
pub fn batch_loss(model: &Denoiser, params: &[f32], batch: &TrainBatch<f32>) -> Result<f64> {
    let mut sq_sum = 0.0f64;
    let chunks = chunk_ranges(batch.len());
    let results: Vec<Result<f64>> = chunks
        .par_iter()
        .map(|r| {
            let c = batch.slice(r.clone());
            let cond = model
                .config
                .cond_branch
                .then_some(CondSource::Image(&c.z));
            let out = model.forward_infer(params, &c.x_t, &c.ts, &c.classes, cond)?;
            let mut s = 0.0f64;
            ndarray::Zip::from(&out).and(&c.eps).for_each(|&o, &e| {
                let d = (o - e) as f64;
                s += d * d;
            });
            Ok(s)
        })
        .collect();
    for r in results {
        sq_sum += r?;
    }
    let elems = batch.len() * batch.x_t.dim().2 * batch.x_t.dim().3;
    Ok(sq_sum / elems as f64)
}

fn chunk_ranges(len: usize) -> Vec<std::ops::Range<usize>> {
    (0..len)
        .step_by(GRAD_CHUNK)
        .map(|s| s..(s + GRAD_CHUNK).min(len))
        .collect()
}

/// A (template image, printed image, class) training example in `[0, 1]`
/// pixel space, pre-augmentation.
struct SourcePair<'a> {
    template: crate::img::Pixels,
    printed: &'a crate::img::Pixels,
    class_id: u32,
}

fn signal_batch(
    pairs: &[(crate::img::Pixels, crate::img::Pixels, u32)],
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> TrainBatch<f32> {
    let bsz = pairs.len();
    let side = pairs[0].0.nrows();
    let mut x_t = Array4::zeros((bsz, 1, side, side));
    let mut z = Array4::zeros((bsz, 1, side, side));
    let mut eps = Array4::zeros((bsz, 1, side, side));
    let mut ts = Vec::with_capacity(bsz);
    let mut classes = Vec::with_capacity(bsz);
    for (b, (t_img, p_img, class)) in pairs.iter().enumerate() {
        let t = rng.gen_range(1..=schedule.steps());
        ts.push(t);
        classes.push(*class);
        for ((r, c), &v) in t_img.indexed_iter() {
            x_t[[b, 0, r, c]] = (2.0 * v - 1.0) as f32;
        }
        for ((r, c), &v) in p_img.indexed_iter() {
            z[[b, 0, r, c]] = (2.0 * v - 1.0) as f32;
        }
        let ab = schedule.alpha_bar_at(t);
        let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        for r in 0..side {
            for c in 0..side {
                let e: f64 = rng.sample(StandardNormal);
                let e = e as f32;
                eps[[b, 0, r, c]] = e;
                x_t[[b, 0, r, c]] = sa * x_t[[b, 0, r, c]] + sn * e;
            }
        }
    }
    TrainBatch {
        x_t,
        z,
        eps,
        ts,
        classes,
    }
}

/// Builds the fixed validation batch: up to 64 samples from the validation
/// partition (falling back to train templates when validation is empty),
/// full-size images, fixed noise draws.
fn validation_batch(
    model: &Denoiser,
    dataset: &Dataset,
    split: &SplitSpec,
    schedule: &NoiseSchedule,
    hp: &Hyperparams,
) -> Result<TrainBatch<f32>> {
    let mut pairs = Vec::new();
    for partition in [Partition::Val, Partition::Train] {
        for (rec, img) in dataset.manifest.samples.iter().zip(&dataset.images) {
            if split.partition_of(rec.template_id) != Some(partition) {
                continue;
            }
            if !model.classes.iter().any(|c| c.class_id == rec.class_id) {
                continue;
            }
            let template = if hp.no_template {
                img.clone()
            } else {
                dataset.templates[rec.template_id as usize].to_ideal_print()
            };
            pairs.push((template, img.clone(), rec.class_id));
            if pairs.len() >= 64 {
                break;
            }
        }
        if !pairs.is_empty() {
            break;
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid_argument(
            "no validation samples available for the model's classes",
        ));
    }
    let mut stream = rng::derived_stream(hp.seed, "val-batch", &[]);
    Ok(signal_batch(&pairs, schedule, &mut stream))
}

/// Trains the model in place and reports the loss curve.
pub fn train(
    model: &Denoiser,
    params: &mut Vec<f32>,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    split: &SplitSpec,
    hp: &Hyperparams,
) -> Result<TrainReport> {
    hp.augment.validate(dataset.manifest.image_side)?;
    let train_samples: Vec<usize> = dataset
        .manifest
        .samples
        .iter()
        .enumerate()
        .filter(|(_, rec)| {
            split.partition_of(rec.template_id) == Some(Partition::Train)
                && model.classes.iter().any(|c| c.class_id == rec.class_id)
        })
        .map(|(i, _)| i)
        .collect();
    if train_samples.is_empty() {
        return Err(Error::invalid_argument("train partition is empty"));
    }

    let val_batch = validation_batch(model, dataset, split, schedule, hp)?;
    let val_loss_init = batch_loss(model, params, &val_batch)?;

    let examples_per_epoch = train_samples.len() * hp.augment.n_copies;
    let steps_per_epoch = examples_per_epoch.div_ceil(hp.batch_size);
    let total_steps = steps_per_epoch * hp.epochs;
    let mut opt = AdamW::<f32>::new(params.len(), hp.weight_decay);
    let mut epochs = Vec::with_capacity(hp.epochs);
    let mut smoothed_val = Vec::with_capacity(hp.epochs);
    let mut global_step = 0usize;

    for epoch in 0..hp.epochs {
        // Fresh augmented copies each epoch, deterministically.
        let sources: Vec<SourcePair<'_>> = train_samples
            .iter()
            .map(|&i| {
                let rec = &dataset.manifest.samples[i];
                let template = if hp.no_template {
                    dataset.images[i].clone()
                } else {
                    dataset.templates[rec.template_id as usize].to_ideal_print()
                };
                SourcePair {
                    template,
                    printed: &dataset.images[i],
                    class_id: rec.class_id,
                }
            })
            .collect();

        let augmented: Vec<Vec<(crate::img::Pixels, crate::img::Pixels, u32)>> = sources
            .par_iter()
            .enumerate()
            .map(|(i, src)| {
                let seed = rng::derive_seed(hp.seed, "augment", &[epoch as u64, i as u64]);
                augment(&src.template, src.printed, &hp.augment, seed).map(|copies| {
                    copies
                        .into_iter()
                        .map(|(t, p)| (t, p, src.class_id))
                        .collect()
                })
            })
            .collect::<Result<_>>()?;
        let mut examples: Vec<(crate::img::Pixels, crate::img::Pixels, u32)> =
            augmented.into_iter().flatten().collect();

        let mut shuffle_rng = rng::derived_stream(hp.seed, "shuffle", &[epoch as u64]);
        use rand::seq::SliceRandom;
        examples.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in examples.chunks(hp.batch_size).enumerate() {
            let mut noise_rng =
                rng::derived_stream(hp.seed, "noise", &[epoch as u64, batch_idx as u64]);
            let batch = signal_batch(chunk, schedule, &mut noise_rng);
            let elems = (batch.len() * batch.x_t.dim().2 * batch.x_t.dim().3) as f64;

            let ranges = chunk_ranges(batch.len());
            let partials: Vec<Result<(f64, Vec<f32>)>> = ranges
                .par_iter()
                .map(|r| loss_and_grad(model, params, &batch.slice(r.clone()), elems))
                .collect();
            let mut grads = vec![0.0f32; params.len()];
            let mut sq_sum = 0.0f64;
            for partial in partials {
                let (s, g) = partial?;
                sq_sum += s;
                for (acc, v) in grads.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            let loss = sq_sum / elems;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite loss at epoch {epoch}, step {batch_idx}"
                )));
            }
            let lr = lr_at(global_step, total_steps, hp.lr, hp.warmup_steps);
            opt.step(params, &grads, lr);
            global_step += 1;
            epoch_loss += loss;
            n_batches += 1;
        }

        let val_loss = batch_loss(model, params, &val_batch)?;
        let train_loss = epoch_loss / n_batches as f64;
        smoothed_val.push(match smoothed_val.last() {
            Some(&prev) if prev < val_loss => prev,
            _ => val_loss,
        });
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }

    let val_loss_final = batch_loss(model, params, &val_batch)?;
    Ok(TrainReport {
        epochs,
        smoothed_val,
        val_loss_init,
        val_loss_final,
        steps: global_step,
    })
}
