//! Desk-scale point-cloud generation stack.
//!
//! The crate covers the full path from raw shape data to evaluated samples:
//!
//! * [`diffusion`] - noise schedules, forward noising, posterior steps, and
//!   the hybrid training loss for epsilon/variance prediction.
//! * [`nn`] - a small CPU transformer toolkit (linear, layer norm, multi-head
//!   attention, Adam) with explicit forward caches and hand-written backward
//!   passes, generic over `f32`/`f64`.
//! * [`denoiser`] - the permutation-equivariant point transformer that backs
//!   both the base model and the upsampler, plus its conditioning encoders.
//! * [`samplers`] - stochastic Heun sampling on a Karras sigma ladder and
//!   ancestral sampling on the discrete schedule.
//! * [`geometry`] - point-cloud types, farthest-point sampling, normalization,
//!   flatness filtering, view rendering, and PLY I/O.
//! * [`meshing`] - a cloud-conditioned SDF model, marching cubes, vertex
//!   coloring, and OBJ export.
//! * [`metrics`] - a point-cloud classifier and the P-FID / P-IS statistics
//!   computed from its features.
//! * [`dataset`] - procedural shape sampling and the on-disk record format.
//! * [`checkpoint`] - a single-file tensor archive for model weights and
//!   optimizer state.
//!
//! Training and sampling are deterministic for a fixed seed: every stochastic
//! step derives its RNG stream from `(seed, step)`, so runs can be resumed
//! mid-stream and byte-identical outputs are reproducible across machines.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod meshing;
pub mod metrics;
pub mod nn;
pub mod samplers;

pub use error::{Error, Result};
