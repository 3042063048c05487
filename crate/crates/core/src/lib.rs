#![forbid(unsafe_code)]

//! Self-supervised representation learning on point clouds with an
//! occlusion auto-encoder.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — a minimal dense-array engine with tape-based
//!   reverse-mode automatic differentiation,
//! * [`geometry`] — point-cloud kernels: farthest point sampling,
//!   k-nearest-neighbour grouping, occlusion masks, Chamfer distance and
//!   an exact Earth Mover's Distance for small sets,
//! * [`data`] — synthetic shape generation, augmentation, point-cloud
//!   file formats, checkpoints and dataset manifests,
//! * [`transformer`] — the asymmetric encoder/decoder operating on
//!   patch tokens, with a shared occlusion token on the decoder side,
//! * [`pipeline`] — the training loop (AdamW, warmup + cosine schedule),
//!   global feature extraction, a linear probe and ablation sweeps.
//!
//! Training runs in `f32`; all verification oracles and gradient checks
//! run in `f64`. Everything is deterministic given the configured seeds.

pub mod data;
pub mod geometry;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod transformer;

pub use scalar::Scalar;
