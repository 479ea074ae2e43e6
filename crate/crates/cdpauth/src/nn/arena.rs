//! Flat parameter storage.
//!
//! All learned parameters of a model live in one `Vec<T>`; layers hold
//! `Segment`s (offset + length) into it. Gradients are a parallel buffer of
//! the same length. This makes the optimizer, checkpoint serialization, and
//! finite-difference probing trivial and keeps layer structs `Copy`-cheap.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use super::dtype::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Default)]
pub struct ArenaBuilder {
    len: usize,
}

impl ArenaBuilder {
    pub fn new() -> Self {
        Self { len: 0 }
    }

    pub fn alloc(&mut self, len: usize) -> Segment {
        let seg = Segment {
            offset: self.len,
            len,
        };
        self.len += len;
        seg
    }

    pub fn total_len(&self) -> usize {
        self.len
    }
}

pub fn slice<T: Scalar>(params: &[T], seg: Segment) -> &[T] {
    &params[seg.offset..seg.offset + seg.len]
}

pub fn slice_mut<T: Scalar>(params: &mut [T], seg: Segment) -> &mut [T] {
    &mut params[seg.offset..seg.offset + seg.len]
}

pub fn view1<T: Scalar>(params: &[T], seg: Segment) -> ArrayView1<'_, T> {
    ArrayView1::from_shape(seg.len, slice(params, seg)).unwrap()
}

pub fn view2<T: Scalar>(params: &[T], seg: Segment, shape: (usize, usize)) -> ArrayView2<'_, T> {
    debug_assert_eq!(seg.len, shape.0 * shape.1);
    ArrayView2::from_shape(shape, slice(params, seg)).unwrap()
}

pub fn view1_mut<T: Scalar>(params: &mut [T], seg: Segment) -> ArrayViewMut1<'_, T> {
    ArrayViewMut1::from_shape(seg.len, slice_mut(params, seg)).unwrap()
}

pub fn view2_mut<T: Scalar>(
    params: &mut [T],
    seg: Segment,
    shape: (usize, usize),
) -> ArrayViewMut2<'_, T> {
    debug_assert_eq!(seg.len, shape.0 * shape.1);
    ArrayViewMut2::from_shape(shape, slice_mut(params, seg)).unwrap()
}
