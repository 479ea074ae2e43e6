//! The conditional noise predictor: a small U-Net over the noised template
//! with additive timestep and printer-identity embeddings at every residual
//! block, plus a parallel encoder of the printed CDP whose per-level outputs
//! enter the trunk through zero-initialized 1x1 projections. At
//! initialization the projections are exactly zero, so the conditioning
//! image cannot perturb the trunk until training opens the taps.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Pixels;
use crate::nn::{ops, ArenaBuilder, Conv2d, Embedding, GroupNorm, Linear, Scalar};
use crate::synthcdp::PrinterClass;

/// How printer identity enters the model (the identity-representation
/// ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityMode {
    /// One opaque vector per class id.
    Index,
    /// Factored vocabulary: a source-printer vector plus a reprint-printer
    /// vector (with a learned "none" entry for authentic classes), summed.
    Structured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    pub identity_mode: IdentityMode,
    pub cond_branch: bool,
    pub image_side: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_width: 32,
            depth: 3,
            time_embed_dim: 64,
            class_embed_dim: 64,
            identity_mode: IdentityMode::Structured,
            cond_branch: true,
            image_side: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::invalid_argument("depth must be >= 2"));
        }
        if self.base_width < 8 {
            return Err(Error::invalid_argument("base_width must be >= 8"));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid_argument(
                "time_embed_dim must be even and >= 4",
            ));
        }
        if self.class_embed_dim < 2 {
            return Err(Error::invalid_argument("class_embed_dim must be >= 2"));
        }
        let factor = 1usize << (self.depth - 1);
        if self.image_side < 8 || self.image_side % factor != 0 {
            return Err(Error::invalid_argument(format!(
                "image_side must be >= 8 and divisible by {factor}"
            )));
        }
        Ok(())
    }

    /// Channel width per resolution level: doubles once then stays flat, to
    /// keep the bottleneck affordable on CPU.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|l| self.base_width * if l == 0 { 1 } else { 2 })
            .collect()
    }
}

// ── Embedding pipeline ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum ClassVectors {
    Index {
        table: Embedding,
    },
    Structured {
        source: Embedding,
        reprint: Embedding,
        /// Per model-internal class index: (source row, reprint row).
        pairs: Vec<(usize, usize)>,
    },
}

// ── Building blocks ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Option<Linear>,
    gn2: GroupNorm,
    conv2: Conv2d,
}

struct ResBlockCache<T: Scalar> {
    a1: Array4<T>,
    gn1c: crate::nn::norm::GroupNormCache<T>,
    a2: Array4<T>,
    a3: Array4<T>,
    gn2c: crate::nn::norm::GroupNormCache<T>,
    a4: Array4<T>,
}

impl ResBlock {
    fn new(builder: &mut ArenaBuilder, channels: usize, embed_dim: Option<usize>) -> Self {
        ResBlock {
            gn1: GroupNorm::new(builder, channels),
            conv1: Conv2d::new(builder, channels, channels, 3, 1, 1),
            emb_proj: embed_dim.map(|e| Linear::new(builder, e, channels)),
            gn2: GroupNorm::new(builder, channels),
            conv2: Conv2d::new(builder, channels, channels, 3, 1, 1),
        }
    }

    fn init<T: Scalar, R: Rng>(&self, params: &mut [T], rng: &mut R) {
        self.gn1.init(params, rng);
        self.conv1.init(params, rng, 1.0);
        if let Some(l) = &self.emb_proj {
            l.init(params, rng);
        }
        self.gn2.init(params, rng);
        self.conv2.init(params, rng, 1.0);
    }

    fn forward<T: Scalar>(
        &self,
        params: &[T],
        x: &Array4<T>,
        emb_s: Option<&Array2<T>>,
    ) -> (Array4<T>, ResBlockCache<T>) {
        let (a1, gn1c) = self.gn1.forward(params, x);
        let a2 = ops::silu(&a1);
        let mut h = self.conv1.forward(params, &a2);
        if let (Some(proj), Some(emb)) = (&self.emb_proj, emb_s) {
            let bias = proj.forward(params, emb);
            ops::add_channel_bias(&mut h, &bias);
        }
        let (a3, gn2c) = self.gn2.forward(params, &h);
        let a4 = ops::silu(&a3);
        let h2 = self.conv2.forward(params, &a4);
        (
            x + &h2,
            ResBlockCache {
                a1,
                gn1c,
                a2,
                a3,
                gn2c,
                a4,
            },
        )
    }

    fn forward_infer<T: Scalar>(
        &self,
        params: &[T],
        x: &Array4<T>,
        emb_s: Option<&Array2<T>>,
    ) -> Array4<T> {
        let (a1, _) = self.gn1.forward(params, x);
        let a2 = ops::silu(&a1);
        let mut h = self.conv1.forward(params, &a2);
        if let (Some(proj), Some(emb)) = (&self.emb_proj, emb_s) {
            let bias = proj.forward(params, emb);
            ops::add_channel_bias(&mut h, &bias);
        }
        let (a3, _) = self.gn2.forward(params, &h);
        let a4 = ops::silu(&a3);
        x + &self.conv2.forward(params, &a4)
    }

    /// Returns `dx`; accumulates the embedding gradient into `demb_s`.
    fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &ResBlockCache<T>,
        emb_s: Option<&Array2<T>>,
        dout: &Array4<T>,
        grads: &mut [T],
        demb_s: Option<&mut Array2<T>>,
    ) -> Array4<T> {
        let da4 = self.conv2.backward(params, &cache.a4, dout, grads);
        let da3 = ops::silu_backward(&cache.a3, &da4);
        let dh = self.gn2.backward(params, &cache.gn2c, &da3, grads);
        if let (Some(proj), Some(emb), Some(demb)) = (&self.emb_proj, emb_s, demb_s) {
            let dbias = ops::channel_bias_grad(&dh);
            let d = proj.backward(params, emb, &dbias, grads);
            *demb += &d;
        }
        let da2 = self.conv1.backward(params, &cache.a2, &dh, grads);
        let da1 = ops::silu_backward(&cache.a1, &da2);
        let dx = self.gn1.backward(params, &cache.gn1c, &da1, grads);
        dx + dout
    }
}

// ── The model ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub classes: Vec<PrinterClass>,
    class_index: BTreeMap<u32, usize>,
    vectors: ClassVectors,
    time_lin1: Linear,
    time_lin2: Linear,
    class_proj: Linear,
    stem: Conv2d,
    enc: Vec<ResBlock>,
    down: Vec<Conv2d>,
    bottom: ResBlock,
    up: Vec<Conv2d>,
    merge: Vec<Conv2d>,
    dec: Vec<ResBlock>,
    head_norm: GroupNorm,
    head: Conv2d,
    cond_stem: Option<Conv2d>,
    cond_blocks: Vec<ResBlock>,
    cond_down: Vec<Conv2d>,
    cond_proj: Vec<Conv2d>,
    n_params: usize,
}

/// Conditioning-branch outputs per resolution level, computed once per probe
/// and broadcast across classification batches.
pub struct CondFeatures<T: Scalar> {
    pub per_level: Vec<Array4<T>>,
}

/// What the trunk should use as spatial conditioning.
pub enum CondSource<'a, T: Scalar> {
    /// Run the branch on this conditioning image.
    Image(&'a Array4<T>),
    /// Reuse precomputed branch outputs.
    Cached(&'a CondFeatures<T>),
}

struct EmbCache<T: Scalar> {
    t_sin: Array2<T>,
    e1: Array2<T>,
    e1s: Array2<T>,
    cvec: Array2<T>,
    emb: Array2<T>,
    emb_s: Array2<T>,
    idxs: Vec<usize>,
}

struct CondCache<T: Scalar> {
    z: Array4<T>,
    blocks: Vec<ResBlockCache<T>>,
    block_outs: Vec<Array4<T>>,
    down_ins: Vec<Array4<T>>,
}

pub struct ForwardCache<T: Scalar> {
    x: Array4<T>,
    emb: EmbCache<T>,
    enc_caches: Vec<ResBlockCache<T>>,
    down_ins: Vec<Array4<T>>,
    bottom_cache: ResBlockCache<T>,
    up_ins: Vec<Array4<T>>,
    merge_ins: Vec<Array4<T>>,
    dec_caches: Vec<ResBlockCache<T>>,
    head_gnc: crate::nn::norm::GroupNormCache<T>,
    head_a1: Array4<T>,
    head_a2: Array4<T>,
    cond: Option<CondCache<T>>,
}

impl Denoiser {
    /// Builds the layer graph and returns the model with its parameter count.
    /// Parameters are allocated by [`Denoiser::init_params`].
    pub fn new(config: DenoiserConfig, classes: &[PrinterClass]) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            return Err(Error::invalid_argument("class table is empty"));
        }
        let mut class_index = BTreeMap::new();
        for (i, c) in classes.iter().enumerate() {
            if class_index.insert(c.class_id, i).is_some() {
                return Err(Error::invalid_argument(format!(
                    "duplicate class_id {}",
                    c.class_id
                )));
            }
        }

        let mut b = ArenaBuilder::new();
        let e = config.time_embed_dim;
        let ch = config.channels();
        let depth = config.depth;

        let vectors = match config.identity_mode {
            IdentityMode::Index => ClassVectors::Index {
                table: Embedding::new(&mut b, classes.len(), config.class_embed_dim),
            },
            IdentityMode::Structured => {
                // Printer vocabulary from the class labels: sources plus
                // reprints, sorted for stable indexing.
                let mut printers: Vec<String> = Vec::new();
                for c in classes {
                    let (src, rep) = c.printer_names();
                    for name in std::iter::once(src).chain(rep) {
                        if !printers.contains(&name) {
                            printers.push(name);
                        }
                    }
                }
                printers.sort();
                let pairs: Vec<(usize, usize)> = classes
                    .iter()
                    .map(|c| {
                        let (src, rep) = c.printer_names();
                        let si = printers.iter().position(|p| *p == src).unwrap();
                        // Reprint row 0 is the learned "none" vector.
                        let ri = rep
                            .map(|r| printers.iter().position(|p| *p == r).unwrap() + 1)
                            .unwrap_or(0);
                        (si, ri)
                    })
                    .collect();
                ClassVectors::Structured {
                    source: Embedding::new(&mut b, printers.len(), config.class_embed_dim),
                    reprint: Embedding::new(&mut b, printers.len() + 1, config.class_embed_dim),
                    pairs,
                }
            }
        };

        let time_lin1 = Linear::new(&mut b, config.time_embed_dim, e);
        let time_lin2 = Linear::new(&mut b, e, e);
        let class_proj = Linear::new(&mut b, config.class_embed_dim, e);

        let stem = Conv2d::new(&mut b, 1, ch[0], 3, 1, 1);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..depth {
            enc.push(ResBlock::new(&mut b, ch[l], Some(e)));
            if l < depth - 1 {
                down.push(Conv2d::new(&mut b, ch[l], ch[l + 1], 3, 2, 1));
            }
        }
        let bottom = ResBlock::new(&mut b, ch[depth - 1], Some(e));
        let mut up = Vec::new();
        let mut merge = Vec::new();
        let mut dec = Vec::new();
        for l in (0..depth - 1).rev() {
            up.push(Conv2d::new(&mut b, ch[l + 1], ch[l], 3, 1, 1));
            merge.push(Conv2d::new(&mut b, 2 * ch[l], ch[l], 3, 1, 1));
            dec.push(ResBlock::new(&mut b, ch[l], Some(e)));
        }
        let head_norm = GroupNorm::new(&mut b, ch[0]);
        let head = Conv2d::new(&mut b, ch[0], 1, 3, 1, 1);

        let (cond_stem, cond_blocks, cond_down, cond_proj) = if config.cond_branch {
            let stem_z = Conv2d::new(&mut b, 1, ch[0], 3, 1, 1);
            let mut blocks = Vec::new();
            let mut downs = Vec::new();
            let mut projs = Vec::new();
            for l in 0..depth {
                blocks.push(ResBlock::new(&mut b, ch[l], None));
                projs.push(Conv2d::new(&mut b, ch[l], ch[l], 1, 1, 0));
                if l < depth - 1 {
                    downs.push(Conv2d::new(&mut b, ch[l], ch[l + 1], 3, 2, 1));
                }
            }
            (Some(stem_z), blocks, downs, projs)
        } else {
            (None, Vec::new(), Vec::new(), Vec::new())
        };

        Ok(Denoiser {
            config,
            classes: classes.to_vec(),
            class_index,
            vectors,
            time_lin1,
            time_lin2,
            class_proj,
            stem,
            enc,
            down,
            bottom,
            up,
            merge,
            dec,
            head_norm,
            head,
            cond_stem,
            cond_blocks,
            cond_down,
            cond_proj,
            n_params: b.total_len(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Deterministic initialization for the given seed. The conditioning
    /// projections start at exactly zero; the output head starts small.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut params = vec![T::zero(); self.n_params];
        let mut rng = crate::rng::derived_stream(seed, "model-init", &[]);
        match &self.vectors {
            ClassVectors::Index { table } => table.init(&mut params, &mut rng),
            ClassVectors::Structured {
                source, reprint, ..
            } => {
                source.init(&mut params, &mut rng);
                reprint.init(&mut params, &mut rng);
            }
        }
        self.time_lin1.init(&mut params, &mut rng);
        self.time_lin2.init(&mut params, &mut rng);
        self.class_proj.init(&mut params, &mut rng);
        self.stem.init(&mut params, &mut rng, 1.0);
        for rb in &self.enc {
            rb.init(&mut params, &mut rng);
        }
        for c in &self.down {
            c.init(&mut params, &mut rng, 1.0);
        }
        self.bottom.init(&mut params, &mut rng);
        for ((u, m), d) in self.up.iter().zip(&self.merge).zip(&self.dec) {
            u.init(&mut params, &mut rng, 1.0);
            m.init(&mut params, &mut rng, 1.0);
            d.init(&mut params, &mut rng);
        }
        self.head_norm.init(&mut params, &mut rng);
        self.head.init(&mut params, &mut rng, 0.1);
        if let Some(cs) = &self.cond_stem {
            cs.init(&mut params, &mut rng, 1.0);
            for rb in &self.cond_blocks {
                rb.init(&mut params, &mut rng);
            }
            for c in &self.cond_down {
                c.init(&mut params, &mut rng, 1.0);
            }
            for p in &self.cond_proj {
                p.init(&mut params, &mut rng, 0.0);
            }
        }
        params
    }

    fn class_pos(&self, class_id: u32) -> Result<usize> {
        self.class_index.get(&class_id).copied().ok_or_else(|| {
            Error::invalid_argument(format!("unknown class_id {class_id} for this model"))
        })
    }

    /// The learned identity vector for a class (both modes).
    pub fn class_vector<T: Scalar>(&self, params: &[T], class_id: u32) -> Result<Array1<T>> {
        let pos = self.class_pos(class_id)?;
        Ok(match &self.vectors {
            ClassVectors::Index { table } => table.row(params, pos),
            ClassVectors::Structured {
                source,
                reprint,
                pairs,
            } => {
                let (si, ri) = pairs[pos];
                source.row(params, si) + reprint.row(params, ri)
            }
        })
    }

    /// Structured-mode factor rows for a class: (source row, reprint row).
    pub fn structured_rows<T: Scalar>(
        &self,
        params: &[T],
        class_id: u32,
    ) -> Result<(Array1<T>, Array1<T>)> {
        let pos = self.class_pos(class_id)?;
        match &self.vectors {
            ClassVectors::Structured {
                source,
                reprint,
                pairs,
            } => {
                let (si, ri) = pairs[pos];
                Ok((source.row(params, si), reprint.row(params, ri)))
            }
            ClassVectors::Index { .. } => Err(Error::invalid_argument(
                "structured rows only exist in structured identity mode",
            )),
        }
    }

    fn embed<T: Scalar>(&self, params: &[T], ts: &[usize], class_ids: &[u32]) -> Result<EmbCache<T>> {
        let bsz = ts.len();
        let mut t_sin = Array2::zeros((bsz, self.config.time_embed_dim));
        for (r, &t) in ts.iter().enumerate() {
            t_sin
                .row_mut(r)
                .assign(&ops::sinusoidal_embedding(t, self.config.time_embed_dim));
        }
        let e1 = self.time_lin1.forward(params, &t_sin);
        let e1s = ops::silu2(&e1);
        let e2 = self.time_lin2.forward(params, &e1s);

        let idxs: Vec<usize> = class_ids
            .iter()
            .map(|&c| self.class_pos(c))
            .collect::<Result<_>>()?;
        let cvec = match &self.vectors {
            ClassVectors::Index { table } => table.lookup(params, &idxs),
            ClassVectors::Structured {
                source,
                reprint,
                pairs,
            } => {
                let srcs: Vec<usize> = idxs.iter().map(|&i| pairs[i].0).collect();
                let reps: Vec<usize> = idxs.iter().map(|&i| pairs[i].1).collect();
                source.lookup(params, &srcs) + reprint.lookup(params, &reps)
            }
        };
        let ce = self.class_proj.forward(params, &cvec);
        let emb = e2 + ce;
        let emb_s = ops::silu2(&emb);
        Ok(EmbCache {
            t_sin,
            e1,
            e1s,
            cvec,
            emb,
            emb_s,
            idxs,
        })
    }

    fn embed_backward<T: Scalar>(&self, params: &[T], cache: &EmbCache<T>, demb_s: &Array2<T>, grads: &mut [T]) {
        let demb = ops::silu2_backward(&cache.emb, demb_s);
        // emb = time branch + class branch; gradient flows into both.
        let dcvec = self.class_proj.backward(params, &cache.cvec, &demb, grads);
        match &self.vectors {
            ClassVectors::Index { table } => table.backward(&cache.idxs, &dcvec, grads),
            ClassVectors::Structured {
                source,
                reprint,
                pairs,
            } => {
                let srcs: Vec<usize> = cache.idxs.iter().map(|&i| pairs[i].0).collect();
                let reps: Vec<usize> = cache.idxs.iter().map(|&i| pairs[i].1).collect();
                source.backward(&srcs, &dcvec, grads);
                reprint.backward(&reps, &dcvec, grads);
            }
        }
        let de1s = self.time_lin2.backward(params, &cache.e1s, &demb, grads);
        let de1 = ops::silu2_backward(&cache.e1, &de1s);
        let _ = self.time_lin1.backward(params, &cache.t_sin, &de1, grads);
    }

    /// Runs the conditioning branch on `z`, producing the per-level
    /// injection maps (after the zero projections).
    pub fn cond_features<T: Scalar>(&self, params: &[T], z: &Array4<T>) -> CondFeatures<T> {
        let stem = self.cond_stem.as_ref().expect("cond branch enabled");
        let mut g = stem.forward(params, z);
        let mut per_level = Vec::with_capacity(self.config.depth);
        for l in 0..self.config.depth {
            g = self.cond_blocks[l].forward_infer(params, &g, None);
            per_level.push(self.cond_proj[l].forward(params, &g));
            if l < self.config.depth - 1 {
                g = self.cond_down[l].forward(params, &g);
            }
        }
        CondFeatures { per_level }
    }

    fn cond_forward_train<T: Scalar>(&self, params: &[T], z: &Array4<T>) -> (CondFeatures<T>, CondCache<T>) {
        let stem = self.cond_stem.as_ref().expect("cond branch enabled");
        let mut g = stem.forward(params, z);
        let mut per_level = Vec::new();
        let mut blocks = Vec::new();
        let mut block_outs = Vec::new();
        let mut down_ins = Vec::new();
        for l in 0..self.config.depth {
            let (out, cache) = self.cond_blocks[l].forward(params, &g, None);
            blocks.push(cache);
            per_level.push(self.cond_proj[l].forward(params, &out));
            block_outs.push(out.clone());
            if l < self.config.depth - 1 {
                down_ins.push(out.clone());
                g = self.cond_down[l].forward(params, &out);
            } else {
                g = out;
            }
        }
        (
            CondFeatures { per_level },
            CondCache {
                z: z.clone(),
                blocks,
                block_outs,
                down_ins,
            },
        )
    }

    /// Inference forward pass (no gradient caches).
    pub fn forward_infer<T: Scalar>(
        &self,
        params: &[T],
        x_t: &Array4<T>,
        ts: &[usize],
        class_ids: &[u32],
        cond: Option<CondSource<'_, T>>,
    ) -> Result<Array4<T>> {
        self.check_input(x_t, ts, class_ids)?;
        let emb = self.embed(params, ts, class_ids)?;
        let computed;
        let feats: Option<&CondFeatures<T>> = if self.config.cond_branch {
            match cond {
                Some(CondSource::Cached(f)) => Some(f),
                Some(CondSource::Image(z)) => {
                    computed = self.cond_features(params, z);
                    Some(&computed)
                }
                None => {
                    return Err(Error::invalid_argument(
                        "model has a conditioning branch but no conditioning was supplied",
                    ))
                }
            }
        } else {
            None
        };

        let emb_s = Some(&emb.emb_s);
        let mut h = self.stem.forward(params, x_t);
        let mut skips = Vec::new();
        for l in 0..self.config.depth {
            h = self.enc[l].forward_infer(params, &h, emb_s);
            if let Some(f) = feats {
                h = add_broadcast(&h, &f.per_level[l]);
            }
            if l < self.config.depth - 1 {
                skips.push(h.clone());
                h = self.down[l].forward(params, &h);
            }
        }
        h = self.bottom.forward_infer(params, &h, emb_s);
        for (i, l) in (0..self.config.depth - 1).rev().enumerate() {
            h = ops::upsample2(&h);
            h = self.up[i].forward(params, &h);
            h = ops::concat_channels(&h, &skips[l]);
            h = self.merge[i].forward(params, &h);
            h = self.dec[i].forward_infer(params, &h, emb_s);
        }
        let (hn, _) = self.head_norm.forward(params, &h);
        let hs = ops::silu(&hn);
        Ok(self.head.forward(params, &hs))
    }

    /// Training forward pass, caching everything backward needs.
    pub fn forward_train<T: Scalar>(
        &self,
        params: &[T],
        x_t: &Array4<T>,
        ts: &[usize],
        class_ids: &[u32],
        z: Option<&Array4<T>>,
    ) -> Result<(Array4<T>, ForwardCache<T>)> {
        self.check_input(x_t, ts, class_ids)?;
        let emb = self.embed(params, ts, class_ids)?;
        let (feats, cond_cache) = if self.config.cond_branch {
            let z = z.ok_or_else(|| {
                Error::invalid_argument("conditioning image required for training forward")
            })?;
            let (f, c) = self.cond_forward_train(params, z);
            (Some(f), Some(c))
        } else {
            (None, None)
        };

        let emb_s_arr = emb.emb_s.clone();
        let emb_s = Some(&emb_s_arr);
        let mut h = self.stem.forward(params, x_t);
        let mut enc_caches = Vec::new();
        let mut down_ins = Vec::new();
        let mut skips = Vec::new();
        for l in 0..self.config.depth {
            let (out, cache) = self.enc[l].forward(params, &h, emb_s);
            enc_caches.push(cache);
            let mut out = out;
            if let Some(f) = &feats {
                out = add_broadcast(&out, &f.per_level[l]);
            }
            if l < self.config.depth - 1 {
                skips.push(out.clone());
                down_ins.push(out.clone());
                h = self.down[l].forward(params, &out);
            } else {
                h = out;
            }
        }
        let (bout, bottom_cache) = self.bottom.forward(params, &h, emb_s);
        h = bout;
        let mut up_ins = Vec::new();
        let mut merge_ins = Vec::new();
        let mut dec_caches = Vec::new();
        for (i, l) in (0..self.config.depth - 1).rev().enumerate() {
            let upsampled = ops::upsample2(&h);
            up_ins.push(upsampled.clone());
            let u = self.up[i].forward(params, &upsampled);
            let cat = ops::concat_channels(&u, &skips[l]);
            merge_ins.push(cat.clone());
            let m = self.merge[i].forward(params, &cat);
            let (out, cache) = self.dec[i].forward(params, &m, emb_s);
            dec_caches.push(cache);
            h = out;
        }
        let (hn, head_gnc) = self.head_norm.forward(params, &h);
        let hs = ops::silu(&hn);
        let out = self.head.forward(params, &hs);
        Ok((
            out,
            ForwardCache {
                x: x_t.clone(),
                emb,
                enc_caches,
                down_ins,
                bottom_cache,
                up_ins,
                merge_ins,
                dec_caches,
                head_gnc,
                head_a1: hn,
                head_a2: hs,
                cond: cond_cache,
            },
        ))
    }

    /// Backpropagates `dout` through the cached forward pass, accumulating
    /// parameter gradients into `grads`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &ForwardCache<T>,
        dout: &Array4<T>,
        grads: &mut [T],
    ) {
        let depth = self.config.depth;
        let emb_s = &cache.emb.emb_s;
        let mut demb_s: Array2<T> = Array2::zeros(emb_s.dim());

        let dhs = self.head.backward(params, &cache.head_a2, dout, grads);
        let dhn = ops::silu_backward(&cache.head_a1, &dhs);
        let mut dh = self
            .head_norm
            .backward(params, &cache.head_gnc, &dhn, grads);

        // Decoder, reversed: dec block -> merge -> up conv -> upsample.
        let mut dskips: Vec<Option<Array4<T>>> = vec![None; depth.saturating_sub(1)];
        for (i, l) in (0..depth - 1).rev().enumerate().rev() {
            let d = self.dec[i].backward(
                params,
                &cache.dec_caches[i],
                Some(emb_s),
                &dh,
                grads,
                Some(&mut demb_s),
            );
            let dcat = self.merge[i].backward(params, &cache.merge_ins[i], &d, grads);
            let c_first = self.up[i].cout;
            let (du, dskip) = ops::split_channels(&dcat, c_first);
            dskips[l] = Some(dskip);
            let dup = self.up[i].backward(params, &cache.up_ins[i], &du, grads);
            dh = ops::upsample2_backward(&dup);
        }

        // Bottom block.
        dh = self.bottom.backward(
            params,
            &cache.bottom_cache,
            Some(emb_s),
            &dh,
            grads,
            Some(&mut demb_s),
        );

        // Encoder, reversed, collecting conditioning-injection gradients.
        let mut dfeats: Vec<Array4<T>> = Vec::new();
        for l in (0..depth).rev() {
            if l < depth - 1 {
                let ddown = self.down[l].backward(params, &cache.down_ins[l], &dh, grads);
                dh = ddown + dskips[l].take().expect("skip gradient present");
            }
            if self.config.cond_branch {
                // The injection was an add: gradient passes through to both
                // the trunk and the branch feature.
                dfeats.push(dh.clone());
            }
            dh = self.enc[l].backward(
                params,
                &cache.enc_caches[l],
                Some(emb_s),
                &dh,
                grads,
                Some(&mut demb_s),
            );
        }
        dfeats.reverse();

        let _ = self.stem.backward(params, &cache.x, &dh, grads);
        self.embed_backward(params, &cache.emb, &demb_s, grads);

        // Conditioning branch, reversed.
        if let Some(cond) = &cache.cond {
            let mut dg: Option<Array4<T>> = None;
            for l in (0..depth).rev() {
                let mut db = self.cond_proj[l].backward(params, &cond.block_outs[l], &dfeats[l], grads);
                if let Some(d) = dg.take() {
                    // Gradient arriving from the deeper level's down conv.
                    db = db + self.cond_down[l].backward(params, &cond.down_ins[l], &d, grads);
                }
                dg = Some(self.cond_blocks[l].backward(
                    params,
                    &cond.blocks[l],
                    None,
                    &db,
                    grads,
                    None,
                ));
            }
            let stem = self.cond_stem.as_ref().unwrap();
            let _ = stem.backward(params, &cond.z, &dg.unwrap(), grads);
        }
    }

    fn check_input<T: Scalar>(&self, x_t: &Array4<T>, ts: &[usize], class_ids: &[u32]) -> Result<()> {
        let (bsz, c, h, w) = x_t.dim();
        if c != 1 || h != w {
            return Err(Error::invalid_argument(format!(
                "expected square single-channel input, got {:?}",
                x_t.dim()
            )));
        }
        let factor = 1usize << (self.config.depth - 1);
        if h % factor != 0 {
            return Err(Error::invalid_argument(format!(
                "input side {h} not divisible by {factor}"
            )));
        }
        if ts.len() != bsz || class_ids.len() != bsz {
            return Err(Error::invalid_argument(
                "per-sample timestep/class lists must match the batch size",
            ));
        }
        for &c in class_ids {
            self.class_pos(c)?;
        }
        Ok(())
    }

    /// Single-image noise prediction on f64 pixels (the [`NoisePredictor`]
    /// entry point). `x_t` and `z` are in signal space.
    pub fn predict_pixels<T: Scalar>(
        &self,
        params: &[T],
        x_t: &Pixels,
        t: usize,
        z: &Pixels,
        class_id: u32,
    ) -> Result<Pixels> {
        let xb = pixels_to_batch::<T>(x_t);
        let out = if self.config.cond_branch {
            let zb = pixels_to_batch::<T>(z);
            self.forward_infer(params, &xb, &[t], &[class_id], Some(CondSource::Image(&zb)))?
        } else {
            self.forward_infer(params, &xb, &[t], &[class_id], None)?
        };
        Ok(batch_to_pixels(&out))
    }
}

fn add_broadcast<T: Scalar>(h: &Array4<T>, f: &Array4<T>) -> Array4<T> {
    if h.dim().0 == f.dim().0 {
        h + f
    } else {
        // Branch features computed once per probe (batch 1) broadcast over
        // the classification batch.
        debug_assert_eq!(f.dim().0, 1);
        h + &f.broadcast(h.dim()).expect("broadcastable cond features")
    }
}

pub fn pixels_to_batch<T: Scalar>(img: &Pixels) -> Array4<T> {
    let (h, w) = img.dim();
    let mut out = Array4::zeros((1, 1, h, w));
    for ((r, c), &v) in img.indexed_iter() {
        out[[0, 0, r, c]] = T::from_f64(v);
    }
    out
}

pub fn batch_to_pixels<T: Scalar>(batch: &Array4<T>) -> Pixels {
    let (_, _, h, w) = batch.dim();
    Pixels::from_shape_fn((h, w), |(r, c)| batch[[0, 0, r, c]].to_f64())
}

/// A denoiser paired with its parameters, implementing the generic
/// [`crate::classify::NoisePredictor`] contract on f64 pixels.
pub struct DenoiserPredictor<'a> {
    pub model: &'a Denoiser,
    pub params: &'a [f32],
}

impl crate::classify::NoisePredictor for DenoiserPredictor<'_> {
    fn predict(&self, x_t: &Pixels, t: usize, z: &Pixels, class_id: u32) -> Result<Pixels> {
        self.model
            .predict_pixels::<f32>(self.params, x_t, t, z, class_id)
    }
}
