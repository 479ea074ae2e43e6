//! Group normalization with affine parameters.

use ndarray::Array4;
use rand::Rng;

use super::arena::{self, ArenaBuilder, Segment};
use super::dtype::Scalar;

pub const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: Segment,
    pub beta: Segment,
    pub channels: usize,
    pub groups: usize,
}

pub struct GroupNormCache<T: Scalar> {
    pub xhat: Array4<T>,
    /// inv_std per (batch, group).
    pub inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn new(builder: &mut ArenaBuilder, channels: usize) -> Self {
        // 8 groups unless the channel count is smaller.
        let groups = if channels % 8 == 0 { 8 } else { 1 };
        GroupNorm {
            gamma: builder.alloc(channels),
            beta: builder.alloc(channels),
            channels,
            groups,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, params: &mut [T], _rng: &mut R) {
        for v in arena::slice_mut(params, self.gamma) {
            *v = T::one();
        }
        for v in arena::slice_mut(params, self.beta) {
            *v = T::zero();
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Array4<T>) -> (Array4<T>, GroupNormCache<T>) {
        let (bsz, c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let hw = h * w;
        let group_len = cg * hw;
        let m = T::from_f64(group_len as f64);
        let eps = T::from_f64(GN_EPS);
        let gamma = arena::slice(params, self.gamma);
        let beta = arena::slice(params, self.beta);

        let mut xhat = Array4::zeros(x.dim());
        let mut y = Array4::zeros(x.dim());
        let xs = x.as_slice().expect("standard layout");
        let hs = xhat.as_slice_mut().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        let mut inv_std = Vec::with_capacity(bsz * self.groups);
        for b in 0..bsz {
            for g in 0..self.groups {
                let base = (b * c + g * cg) * hw;
                let group = &xs[base..base + group_len];
                let mut mean = T::zero();
                for &v in group {
                    mean += v;
                }
                mean = mean / m;
                let mut var = T::zero();
                for &v in group {
                    let d = v - mean;
                    var += d * d;
                }
                var = var / m;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for local in 0..cg {
                    let ci = g * cg + local;
                    let (ga, be) = (gamma[ci], beta[ci]);
                    let off = base + local * hw;
                    for i in off..off + hw {
                        let xh = (xs[i] - mean) * inv;
                        hs[i] = xh;
                        ys[i] = ga * xh + be;
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &GroupNormCache<T>,
        dy: &Array4<T>,
        grads: &mut [T],
    ) -> Array4<T> {
        let (bsz, c, h, w) = dy.dim();
        let cg = c / self.groups;
        let hw = h * w;
        let m = T::from_f64((cg * hw) as f64);
        let gamma = arena::slice(params, self.gamma);
        let dys = dy.as_slice().expect("standard layout");
        let hs = cache.xhat.as_slice().expect("standard layout");

        // Parameter gradients.
        for ci in 0..c {
            let mut dg = T::zero();
            let mut db = T::zero();
            for b in 0..bsz {
                let off = (b * c + ci) * hw;
                for i in off..off + hw {
                    dg += dys[i] * hs[i];
                    db += dys[i];
                }
            }
            grads[self.gamma.offset + ci] += dg;
            grads[self.beta.offset + ci] += db;
        }

        let mut dx = Array4::zeros(dy.dim());
        let dxs = dx.as_slice_mut().expect("standard layout");
        for b in 0..bsz {
            for g in 0..self.groups {
                let base = (b * c + g * cg) * hw;
                let inv = cache.inv_std[b * self.groups + g];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for local in 0..cg {
                    let ga = gamma[g * cg + local];
                    let off = base + local * hw;
                    for i in off..off + hw {
                        let dxh = dys[i] * ga;
                        s1 += dxh;
                        s2 += dxh * hs[i];
                    }
                }
                let scale = inv / m;
                for local in 0..cg {
                    let ga = gamma[g * cg + local];
                    let off = base + local * hw;
                    for i in off..off + hw {
                        let dxh = dys[i] * ga;
                        dxs[i] = scale * (m * dxh - s1 - hs[i] * s2);
                    }
                }
            }
        }
        dx
    }
}
