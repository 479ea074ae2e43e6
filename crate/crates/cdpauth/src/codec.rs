//! Template autoencoder study.
//!
//! Direction under test: a codec trained on the binary-template distribution
//! reconstructs held-out templates far better than one trained on unrelated
//! (smooth) images. The codec is a standalone study and is not wired into
//! the classification path. Reference numbers from the original latent-space
//! setting are 0.581 (generic pretraining) vs 0.075 (template fine-tuning)
//! mean squared error; only the direction carries over to this scale.

use std::path::Path;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::img::Pixels;
use crate::nn::{lr_at, AdamW, ArenaBuilder, Conv2d};
use crate::rng;
use crate::synthcdp::gaussian_blur;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusTag {
    Templates,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub width: usize,
    pub latent_channels: usize,
    pub image_side: usize,
    /// Linear toy mode: 1x1 convolutions, no activations, no downsampling.
    /// Exists so an analytically invertible codec can be constructed.
    pub linear: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            width: 24,
            latent_channels: 16,
            image_side: 32,
            linear: false,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.latent_channels < 1 {
            return Err(Error::invalid_argument("codec widths must be >= 1"));
        }
        if !self.linear && self.image_side % 4 != 0 {
            return Err(Error::invalid_argument(
                "image side must be divisible by 4 for the strided codec",
            ));
        }
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        if self.linear {
            self.image_side
        } else {
            self.image_side / 4
        }
    }
}

/// Encoder/decoder layer handles over a flat parameter arena.
#[derive(Debug, Clone)]
pub struct Codec {
    pub config: CodecConfig,
    pub corpus: CorpusTag,
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
    n_params: usize,
}

impl Codec {
    pub fn new(config: CodecConfig, corpus: CorpusTag) -> Result<Self> {
        config.validate()?;
        let mut b = ArenaBuilder::new();
        let (enc1, enc2, dec1, dec2, dec3) = if config.linear {
            (
                Conv2d::new(&mut b, 1, config.latent_channels, 1, 1, 0),
                Conv2d::new(&mut b, config.latent_channels, config.latent_channels, 1, 1, 0),
                Conv2d::new(&mut b, config.latent_channels, config.latent_channels, 1, 1, 0),
                Conv2d::new(&mut b, config.latent_channels, config.latent_channels, 1, 1, 0),
                Conv2d::new(&mut b, config.latent_channels, 1, 1, 1, 0),
            )
        } else {
            (
                Conv2d::new(&mut b, 1, config.width, 3, 2, 1),
                Conv2d::new(&mut b, config.width, config.latent_channels, 3, 2, 1),
                Conv2d::new(&mut b, config.latent_channels, config.width, 3, 1, 1),
                Conv2d::new(&mut b, config.width, config.width, 3, 1, 1),
                Conv2d::new(&mut b, config.width, 1, 3, 1, 1),
            )
        };
        Ok(Codec {
            config,
            corpus,
            enc1,
            enc2,
            dec1,
            dec2,
            dec3,
            n_params: b.total_len(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut params = vec![0.0f32; self.n_params];
        let mut rng = rng::derived_stream(seed, "codec-init", &[]);
        for conv in [&self.enc1, &self.enc2, &self.dec1, &self.dec2, &self.dec3] {
            conv.init(&mut params, &mut rng, 1.0);
        }
        params
    }

    /// The analytically invertible toy: identity 1x1 convolutions, so
    /// decode(encode(x)) == x exactly.
    pub fn identity(image_side: usize) -> (Codec, Vec<f32>) {
        let codec = Codec::new(
            CodecConfig {
                width: 1,
                latent_channels: 1,
                image_side,
                linear: true,
            },
            CorpusTag::Templates,
        )
        .expect("identity codec config is valid");
        let mut params = vec![0.0f32; codec.n_params];
        for conv in [&codec.enc1, &codec.enc2, &codec.dec1, &codec.dec2, &codec.dec3] {
            params[conv.w.offset] = 1.0;
        }
        (codec, params)
    }

    pub fn encode(&self, params: &[f32], x: &Array4<f32>) -> Array4<f32> {
        if self.config.linear {
            let h = self.enc1.forward(params, x);
            self.enc2.forward(params, &h)
        } else {
            let h = silu(&self.enc1.forward(params, x));
            self.enc2.forward(params, &h)
        }
    }

    pub fn decode(&self, params: &[f32], latent: &Array4<f32>) -> Array4<f32> {
        if self.config.linear {
            let h = self.dec1.forward(params, latent);
            let h = self.dec2.forward(params, &h);
            self.dec3.forward(params, &h)
        } else {
            let h = crate::nn::ops::upsample2(latent);
            let h = silu(&self.dec1.forward(params, &h));
            let h = crate::nn::ops::upsample2(&h);
            let h = silu(&self.dec2.forward(params, &h));
            self.dec3.forward(params, &h)
        }
    }

    pub fn reconstruct(&self, params: &[f32], x: &Array4<f32>) -> Array4<f32> {
        self.decode(params, &self.encode(params, x))
    }

    /// Squared-error sum and gradient for one batch, reconstruction target =
    /// input.
    fn loss_and_grad(&self, params: &[f32], x: &Array4<f32>, norm: f64) -> (f64, Vec<f32>) {
        use crate::nn::ops::{silu_backward, upsample2, upsample2_backward};
        let linear = self.config.linear;
        let act = |v: &Array4<f32>| if linear { v.clone() } else { silu(v) };
        let up = |v: &Array4<f32>| if linear { v.clone() } else { upsample2(v) };
        let up_bw = |v: &Array4<f32>| {
            if linear {
                v.clone()
            } else {
                upsample2_backward(v)
            }
        };

        // Forward, caching layer inputs and pre-activations.
        let e1_pre = self.enc1.forward(params, x);
        let e1_act = act(&e1_pre);
        let latent = self.enc2.forward(params, &e1_act);
        let d1_in = up(&latent);
        let d1_pre = self.dec1.forward(params, &d1_in);
        let d1_act = act(&d1_pre);
        let d2_in = up(&d1_act);
        let d2_pre = self.dec2.forward(params, &d2_in);
        let d2_act = act(&d2_pre);
        let recon = self.dec3.forward(params, &d2_act);

        let mut sq_sum = 0.0f64;
        let mut dout = Array4::zeros(recon.dim());
        let scale = (2.0 / norm) as f32;
        ndarray::Zip::from(&mut dout)
            .and(&recon)
            .and(x)
            .for_each(|d, &r, &t| {
                let diff = r - t;
                sq_sum += (diff as f64) * (diff as f64);
                *d = scale * diff;
            });

        let mut grads = vec![0.0f32; self.n_params];
        let dd2_act = self.dec3.backward(params, &d2_act, &dout, &mut grads);
        let dd2_pre = if linear {
            dd2_act
        } else {
            silu_backward(&d2_pre, &dd2_act)
        };
        let dd2_in = self.dec2.backward(params, &d2_in, &dd2_pre, &mut grads);
        let dd1_act = up_bw(&dd2_in);
        let dd1_pre = if linear {
            dd1_act
        } else {
            silu_backward(&d1_pre, &dd1_act)
        };
        let dd1_in = self.dec1.backward(params, &d1_in, &dd1_pre, &mut grads);
        let dlatent = up_bw(&dd1_in);
        let de1_act = self.enc2.backward(params, &e1_act, &dlatent, &mut grads);
        let de1_pre = if linear {
            de1_act
        } else {
            silu_backward(&e1_pre, &de1_act)
        };
        let _ = self.enc1.backward(params, x, &de1_pre, &mut grads);
        (sq_sum, grads)
    }

    pub fn save(&self, params: &[f32], path: &Path) -> Result<()> {
        let meta = CodecCheckpointMeta {
            format_version: crate::denoiser::CHECKPOINT_FORMAT_VERSION,
            kind: "codec".into(),
            dtype: "f32".into(),
            config: self.config.clone(),
            corpus: self.corpus,
            n_params: params.len(),
        };
        let meta =
            serde_json::to_vec(&meta).map_err(|e| Error::format("codec meta", e.to_string()))?;
        write_container(path, &meta, params)
    }

    pub fn load(path: &Path) -> Result<(Codec, Vec<f32>)> {
        let (meta_bytes, params) = read_container(path)?;
        let meta: CodecCheckpointMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::format("codec meta", e.to_string()))?;
        if meta.kind != "codec" {
            return Err(Error::Incompatible(format!(
                "expected a codec checkpoint, found kind {:?}",
                meta.kind
            )));
        }
        if meta.format_version != crate::denoiser::CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "codec checkpoint format {} unsupported",
                meta.format_version
            )));
        }
        let codec = Codec::new(meta.config, meta.corpus)?;
        if codec.n_params() != params.len() {
            return Err(Error::format("codec checkpoint", "parameter count mismatch"));
        }
        Ok((codec, params))
    }
}

fn silu(x: &Array4<f32>) -> Array4<f32> {
    crate::nn::ops::silu(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodecCheckpointMeta {
    format_version: u32,
    kind: String,
    dtype: String,
    config: CodecConfig,
    corpus: CorpusTag,
    n_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecHyperparams {
    fn default() -> Self {
        CodecHyperparams {
            epochs: 400,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub loss_init: f64,
    pub loss_final: f64,
    pub per_epoch: Vec<f64>,
}

fn corpus_batch(images: &[&Pixels]) -> Array4<f32> {
    let side = images[0].nrows();
    let mut out = Array4::zeros((images.len(), 1, side, side));
    for (b, img) in images.iter().enumerate() {
        for ((r, c), &v) in img.indexed_iter() {
            out[[b, 0, r, c]] = v as f32;
        }
    }
    out
}

/// Mean per-pixel squared reconstruction error over an image set. Invariant
/// under permutation of the set.
pub fn recon_mse(codec: &Codec, params: &[f32], images: &[Pixels]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid_argument("image set is empty"));
    }
    let side = codec.config.image_side;
    for img in images {
        if img.dim() != (side, side) {
            return Err(Error::invalid_argument(format!(
                "image shape {:?} does not match codec side {side}",
                img.dim()
            )));
        }
    }
    let errs: Vec<f64> = images
        .par_iter()
        .map(|img| {
            let x = corpus_batch(&[img]);
            let recon = codec.reconstruct(params, &x);
            let mut acc = 0.0f64;
            ndarray::Zip::from(&recon).and(&x).for_each(|&r, &t| {
                let d = (r - t) as f64;
                acc += d * d;
            });
            acc / (side * side) as f64
        })
        .collect();
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Trains a codec on a corpus by plain reconstruction MSE.
pub fn train_codec(
    corpus: &[Pixels],
    tag: CorpusTag,
    config: CodecConfig,
    hp: &CodecHyperparams,
) -> Result<(Codec, Vec<f32>, CodecTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid_argument("training corpus is empty"));
    }
    let codec = Codec::new(config, tag)?;
    let mut params = codec.init_params(hp.seed);
    let loss_init = recon_mse(&codec, &params, corpus)?;

    let n = corpus.len();
    let steps_per_epoch = n.div_ceil(hp.batch_size);
    let total_steps = steps_per_epoch * hp.epochs;
    let mut opt = AdamW::<f32>::new(params.len(), 0.0);
    let mut per_epoch = Vec::with_capacity(hp.epochs);
    let mut step = 0usize;
    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::derived_stream(hp.seed, "codec-shuffle", &[epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hp.batch_size) {
            let images: Vec<&Pixels> = chunk.iter().map(|&i| &corpus[i]).collect();
            let x = corpus_batch(&images);
            let norm = (x.len_of(Axis(0)) * x.len_of(Axis(2)) * x.len_of(Axis(3))) as f64;
            let (sq_sum, grads) = codec.loss_and_grad(&params, &x, norm);
            let loss = sq_sum / norm;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "codec loss non-finite at epoch {epoch}"
                )));
            }
            opt.step(&mut params, &grads, lr_at(step, total_steps, hp.lr, 50));
            step += 1;
            epoch_loss += loss;
            batches += 1;
        }
        per_epoch.push(epoch_loss / batches as f64);
    }
    let loss_final = recon_mse(&codec, &params, corpus)?;
    Ok((
        codec,
        params,
        CodecTrainReport {
            loss_init,
            loss_final,
            per_epoch,
        },
    ))
}

/// The "generic" pretraining stand-in: smoothed random noise stretched to
/// full dynamic range.
pub fn generic_corpus(n: usize, side: usize, seed: u64) -> Vec<Pixels> {
    (0..n as u64)
        .map(|i| {
            let mut stream = rng::derived_stream(seed, "generic-corpus", &[i]);
            let raw = Pixels::from_shape_fn((side, side), |_| stream.gen::<f64>());
            let smooth = gaussian_blur(&raw, 1.5);
            let min = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (max - min).max(1e-9);
            smooth.mapv(|v| (v - min) / span)
        })
        .collect()
}
