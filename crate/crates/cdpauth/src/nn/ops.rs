//! Parameter-free operations: activations, resampling, channel
//! concatenation, and the sinusoidal timestep encoding.

use ndarray::{Array1, Array2, Array4, Axis};

use super::dtype::Scalar;

pub fn silu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (T::one() + v * (T::one() - s)));
    });
    dx
}

pub fn silu2<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu2_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (T::one() + v * (T::one() - s)));
    });
    dx
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::zeros((b, c, 2 * h, 2 * w));
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for plane in 0..b * c {
        let src_base = plane * h * w;
        let dst_base = plane * 4 * h * w;
        for r in 0..2 * h {
            let src_row = src_base + (r / 2) * w;
            let dst_row = dst_base + r * 2 * w;
            for q in 0..w {
                let v = xs[src_row + q];
                os[dst_row + 2 * q] = v;
                os[dst_row + 2 * q + 1] = v;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((b, c, h, w));
    let dys = dy.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("standard layout");
    for plane in 0..b * c {
        let src_base = plane * h2 * w2;
        let dst_base = plane * h * w;
        for r in 0..h2 {
            let src_row = src_base + r * w2;
            let dst_row = dst_base + (r / 2) * w;
            for q in 0..w {
                dxs[dst_row + q] += dys[src_row + 2 * q] + dys[src_row + 2 * q + 1];
            }
        }
    }
    dx
}

/// Channel concatenation, materialized in standard layout (ndarray's
/// `concatenate` interleaves batches in memory, which would break the
/// slice-based kernels downstream).
pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    let (bsz, ca, h, w) = a.dim();
    let (bsz_b, cb, hb, wb) = b.dim();
    debug_assert_eq!((bsz, h, w), (bsz_b, hb, wb));
    let hw = h * w;
    let mut out = Array4::zeros((bsz, ca + cb, h, w));
    let os = out.as_slice_mut().expect("standard layout");
    let as_ = a.as_slice().expect("standard layout");
    let bs_ = b.as_slice().expect("standard layout");
    for bi in 0..bsz {
        let dst = bi * (ca + cb) * hw;
        os[dst..dst + ca * hw].copy_from_slice(&as_[bi * ca * hw..(bi + 1) * ca * hw]);
        os[dst + ca * hw..dst + (ca + cb) * hw]
            .copy_from_slice(&bs_[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    out
}

/// Splits a channel-concatenation gradient back into its two parts.
pub fn split_channels<T: Scalar>(dy: &Array4<T>, c_first: usize) -> (Array4<T>, Array4<T>) {
    let (da, db) = dy.view().split_at(Axis(1), c_first);
    (da.to_owned(), db.to_owned())
}

/// Adds a per-(batch, channel) bias onto a feature map.
pub fn add_channel_bias<T: Scalar>(x: &mut Array4<T>, bias: &Array2<T>) {
    let (b, c, h, w) = x.dim();
    debug_assert_eq!(bias.dim(), (b, c));
    let hw = h * w;
    let xs = x.as_slice_mut().expect("standard layout");
    for (plane, &add) in bias.iter().enumerate() {
        let off = plane * hw;
        for v in &mut xs[off..off + hw] {
            *v += add;
        }
    }
}

/// Gradient of [`add_channel_bias`] w.r.t. the bias: spatial sum per
/// (batch, channel).
pub fn channel_bias_grad<T: Scalar>(dy: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = dy.dim();
    let hw = h * w;
    let dys = dy.as_slice().expect("standard layout");
    let mut out = Array2::zeros((b, c));
    for (plane, slot) in out.iter_mut().enumerate() {
        let off = plane * hw;
        let mut acc = T::zero();
        for &v in &dys[off..off + hw] {
            acc += v;
        }
        *slot = acc;
    }
    out
}

/// Transformer-style sinusoidal encoding of a timestep. `dim` must be even.
pub fn sinusoidal_embedding<T: Scalar>(t: usize, dim: usize) -> Array1<T> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = (-(10_000.0f64).ln() * exponent).exp();
        let angle = t as f64 * freq;
        out[i] = T::from_f64(angle.sin());
        out[half + i] = T::from_f64(angle.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn upsample_round_trip_shapes() {
        let x = Array4::<f64>::zeros((2, 3, 4, 4));
        let up = upsample2(&x);
        assert_eq!(up.dim(), (2, 3, 8, 8));
        assert_eq!(upsample2_backward(&up).dim(), x.dim());
    }

    #[test]
    fn upsample_adjoint_identity() {
        let mut rng = crate::rng::stream(4);
        let x = Array4::from_shape_fn((1, 2, 3, 3), |_| rng.gen::<f64>());
        let y = Array4::from_shape_fn((1, 2, 6, 6), |_| rng.gen::<f64>());
        let lhs: f64 = upsample2(&x).iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .iter()
            .zip(upsample2_backward(&y).iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding::<f64>(1, 16);
        let b = sinusoidal_embedding::<f64>(100, 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}
