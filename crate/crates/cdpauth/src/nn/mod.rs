//! Minimal neural-network primitives with hand-written backward passes.
//!
//! Everything is generic over [`Scalar`] so the same code path runs f32 in
//! training and f64 under the finite-difference gradient oracle. Parameters
//! live in a flat arena ([`arena`]); layers are lightweight segment handles.

pub mod adamw;
pub mod arena;
pub mod conv;
pub mod dtype;
pub mod linear;
pub mod norm;
pub mod ops;

pub use adamw::{lr_at, AdamW};
pub use arena::{ArenaBuilder, Segment};
pub use conv::Conv2d;
pub use dtype::Scalar;
pub use linear::{Embedding, Linear};
pub use norm::GroupNorm;
