//! Dense layers and lookup embeddings.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::arena::{self, ArenaBuilder, Segment};
use super::dtype::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Segment,
    pub b: Segment,
    pub infeat: usize,
    pub outfeat: usize,
}

impl Linear {
    pub fn new(builder: &mut ArenaBuilder, infeat: usize, outfeat: usize) -> Self {
        Linear {
            w: builder.alloc(outfeat * infeat),
            b: builder.alloc(outfeat),
            infeat,
            outfeat,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, params: &mut [T], rng: &mut R) {
        let std = (1.0 / self.infeat as f64).sqrt();
        for v in arena::slice_mut(params, self.w) {
            let n: f64 = rng.sample(StandardNormal);
            *v = T::from_f64(n * std);
        }
        for v in arena::slice_mut(params, self.b) {
            *v = T::zero();
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Array2<T>) -> Array2<T> {
        let w = arena::view2(params, self.w, (self.outfeat, self.infeat));
        let mut y = x.dot(&w.t());
        let bias = arena::view1(params, self.b);
        for mut row in y.rows_mut() {
            row += &bias;
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &Array2<T>,
        dy: &Array2<T>,
        grads: &mut [T],
    ) -> Array2<T> {
        let dw = dy.t().dot(x);
        let mut gw = arena::view2_mut(grads, self.w, (self.outfeat, self.infeat));
        gw += &dw;
        let db = dy.sum_axis(ndarray::Axis(0));
        let mut gb = arena::view1_mut(grads, self.b);
        gb += &db;
        let w = arena::view2(params, self.w, (self.outfeat, self.infeat));
        dy.dot(&w)
    }
}

/// A learned lookup table: one row per vocabulary entry.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: Segment,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(builder: &mut ArenaBuilder, vocab: usize, dim: usize) -> Self {
        Embedding {
            table: builder.alloc(vocab * dim),
            vocab,
            dim,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, params: &mut [T], rng: &mut R) {
        for v in arena::slice_mut(params, self.table) {
            let n: f64 = rng.sample(StandardNormal);
            *v = T::from_f64(n * 0.1);
        }
    }

    pub fn row<T: Scalar>(&self, params: &[T], idx: usize) -> Array1<T> {
        debug_assert!(idx < self.vocab);
        let table = arena::view2(params, self.table, (self.vocab, self.dim));
        table.row(idx).to_owned()
    }

    pub fn lookup<T: Scalar>(&self, params: &[T], idxs: &[usize]) -> Array2<T> {
        let table = arena::view2(params, self.table, (self.vocab, self.dim));
        let mut out = Array2::zeros((idxs.len(), self.dim));
        for (r, &i) in idxs.iter().enumerate() {
            out.row_mut(r).assign(&table.row(i));
        }
        out
    }

    pub fn backward<T: Scalar>(&self, idxs: &[usize], dy: &Array2<T>, grads: &mut [T]) {
        let mut g = arena::view2_mut(grads, self.table, (self.vocab, self.dim));
        for (r, &i) in idxs.iter().enumerate() {
            let mut row = g.row_mut(i);
            row += &dy.row(r);
        }
    }
}
