//! 2-D convolution as im2col + GEMM.
//!
//! The GEMM path is what makes CPU training viable: ndarray dispatches f32/f64
//! matrix products to matrixmultiply. Backward recomputes the column matrix
//! from the cached input instead of caching it (inputs are an order of
//! magnitude smaller).

use ndarray::{Array2, Array4, ArrayView4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::arena::{self, ArenaBuilder, Segment};
use super::dtype::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: Segment,
    pub b: Segment,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        builder: &mut ArenaBuilder,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            w: builder.alloc(cout * cin * k * k),
            b: builder.alloc(cout),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    /// He-normal weights scaled by `scale`, zero bias. `scale = 0` gives the
    /// zero-initialized projections of the conditioning branch.
    pub fn init<T: Scalar, R: Rng>(&self, params: &mut [T], rng: &mut R, scale: f64) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let std = scale * (2.0 / fan_in).sqrt();
        for v in arena::slice_mut(params, self.w) {
            let n: f64 = rng.sample(StandardNormal);
            *v = T::from_f64(n * std);
        }
        for v in arena::slice_mut(params, self.b) {
            *v = T::zero();
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Array4<T>) -> Array4<T> {
        let (bsz, cin, h, w) = x.dim();
        debug_assert_eq!(cin, self.cin);
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(&x.view(), self.k, self.stride, self.pad);
        let w2 = arena::view2(params, self.w, (self.cout, self.cin * self.k * self.k));
        let mut y2 = cols.dot(&w2.t()); // (B*OH*OW, Cout)
        let bias = arena::view1(params, self.b);
        for mut row in y2.rows_mut() {
            row += &bias;
        }
        y2.into_shape_with_order((bsz, oh, ow, self.cout))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
    }

    /// Accumulates `dW`, `db` into `grads` and returns `dx`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &Array4<T>,
        dy: &Array4<T>,
        grads: &mut [T],
    ) -> Array4<T> {
        let (bsz, _, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(&x.view(), self.k, self.stride, self.pad);

        let dy2 = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((bsz * oh * ow, self.cout))
            .unwrap();

        let dw = dy2.t().dot(&cols); // (Cout, Cin*k*k)
        let mut gw = arena::view2_mut(grads, self.w, (self.cout, self.cin * self.k * self.k));
        gw += &dw;
        let db = dy2.sum_axis(Axis(0));
        let mut gb = arena::view1_mut(grads, self.b);
        gb += &db;

        let w2 = arena::view2(params, self.w, (self.cout, self.cin * self.k * self.k));
        let dcols = dy2.dot(&w2); // (B*OH*OW, Cin*k*k)
        col2im(
            &dcols,
            (bsz, self.cin, h, w),
            self.k,
            self.stride,
            self.pad,
        )
    }
}

/// Unfolds `x` into a `(B*OH*OW, C*k*k)` matrix, zero-padding borders.
/// Slice-based: this runs once per conv call and has to keep up with the
/// GEMM it feeds.
pub fn im2col<T: Scalar>(x: &ArrayView4<'_, T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (bsz, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((bsz * oh * ow, c * k * k));
    let contiguous;
    let xs = match x.as_slice() {
        Some(s) => s,
        None => {
            contiguous = x.to_owned();
            contiguous.as_slice().expect("owned arrays are standard layout")
        }
    };
    let cs = cols.as_slice_mut().expect("standard layout cols");
    let row_len = c * k * k;
    for b in 0..bsz {
        for r in 0..oh {
            for q in 0..ow {
                let row_off = ((b * oh + r) * ow + q) * row_len;
                let iw0 = (q * stride) as isize - pad as isize;
                for ci in 0..c {
                    let plane = ((b * c) + ci) * h * w;
                    for kh in 0..k {
                        let ih = (r * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_row = plane + ih as usize * w;
                        let dst = row_off + (ci * k + kh) * k;
                        if iw0 >= 0 && iw0 + k as isize <= w as isize {
                            let src = src_row + iw0 as usize;
                            cs[dst..dst + k].copy_from_slice(&xs[src..src + k]);
                        } else {
                            for kw in 0..k {
                                let iw = iw0 + kw as isize;
                                if iw >= 0 && iw < w as isize {
                                    cs[dst + kw] = xs[src_row + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto the input shape (adjoint of
/// [`im2col`]).
pub fn col2im<T: Scalar>(
    cols: &Array2<T>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (bsz, c, h, w) = shape;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = Array4::zeros(shape);
    let xs = x.as_slice_mut().expect("standard layout output");
    let cs = cols.as_slice().expect("standard layout cols");
    let row_len = c * k * k;
    for b in 0..bsz {
        for r in 0..oh {
            for q in 0..ow {
                let row_off = ((b * oh + r) * ow + q) * row_len;
                let iw0 = (q * stride) as isize - pad as isize;
                for ci in 0..c {
                    let plane = ((b * c) + ci) * h * w;
                    for kh in 0..k {
                        let ih = (r * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_row = plane + ih as usize * w;
                        let src = row_off + (ci * k + kh) * k;
                        if iw0 >= 0 && iw0 + k as isize <= w as isize {
                            let dst = dst_row + iw0 as usize;
                            for kw in 0..k {
                                xs[dst + kw] += cs[src + kw];
                            }
                        } else {
                            for kw in 0..k {
                                let iw = iw0 + kw as isize;
                                if iw >= 0 && iw < w as isize {
                                    xs[dst_row + iw as usize] += cs[src + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn naive_conv(
        x: &Array4<f64>,
        w: &ndarray::ArrayView2<'_, f64>,
        b: &ndarray::ArrayView1<'_, f64>,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (bsz, cin, h, wd) = x.dim();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut y = Array4::zeros((bsz, cout, oh, ow));
        for bi in 0..bsz {
            for co in 0..cout {
                for r in 0..oh {
                    for q in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (r * stride + kh) as isize - pad as isize;
                                    let iw = (q * stride + kw) as isize - pad as isize;
                                    if ih >= 0 && ih < h as isize && iw >= 0 && iw < wd as isize {
                                        acc += x[[bi, ci, ih as usize, iw as usize]]
                                            * w[[co, (ci * k + kh) * k + kw]];
                                    }
                                }
                            }
                        }
                        y[[bi, co, r, q]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gemm_conv_matches_direct_convolution() {
        let mut rng = crate::rng::stream(1);
        for (stride, pad) in [(1, 1), (2, 1)] {
            let mut builder = ArenaBuilder::new();
            let conv = Conv2d::new(&mut builder, 3, 5, 3, stride, pad);
            let mut params = vec![0.0f64; builder.total_len()];
            conv.init(&mut params, &mut rng, 1.0);

            let x = Array4::from_shape_fn((2, 3, 8, 8), |_| {
                use rand::Rng;
                rng.gen::<f64>() - 0.5
            });
            let fast = conv.forward(&params, &x);
            let w2 = arena::view2(&params, conv.w, (5, 27));
            let bias = arena::view1(&params, conv.b);
            let slow = naive_conv(&x, &w2, &bias, 5, 3, stride, pad);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = crate::rng::stream(2);
        use rand::Rng;
        let x = Array4::from_shape_fn((1, 2, 6, 6), |_| rng.gen::<f64>());
        let cols = im2col(&x.view(), 3, 2, 1);
        let y = Array2::from_shape_fn(cols.dim(), |_| rng.gen::<f64>());
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, x.dim(), 3, 2, 1);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
