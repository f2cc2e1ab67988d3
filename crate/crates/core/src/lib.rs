//! Weight-sharing neural architecture search over a channel-split / shuffle
//! search space.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense tensors with a recorded-operation tape for
//!   reverse-mode differentiation,
//! * [`nn`] — convolution, pooling, batch norm, channel split/shuffle,
//!   drop-path and the six candidate cell operations,
//! * [`genotype`] — cell encodings, validation, loose-end analysis and the
//!   identity-padding embedding between search-space sizes,
//! * [`model`] — the macro architecture (stem, three stages of normal
//!   layers, two reduction layers, head) as a shared-weight supernet or a
//!   stand-alone model for one fixed genotype,
//! * [`controller`] — the recurrent policy that samples genotypes, trained
//!   with REINFORCE,
//! * [`data`] — CIFAR-10 ingestion, augmentation and synthetic datasets,
//! * [`train`] — optimizers, the warm-restart cosine schedule, the
//!   alternating search loop and final from-scratch training,
//! * [`analysis`] — parameter/FLOP/memory-cost models, latency benchmarks
//!   and DOT graph emission.
//!
//! All numeric code is generic over the element type through [`Scalar`];
//! `f32` is the training default and `f64` is used for verification.

pub mod analysis;
pub mod checkpoint;
pub mod controller;
pub mod data;
pub mod error;
pub mod genotype;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamRegistry};
pub use rng::DetRng;
pub use scalar::{Dtype, Scalar};
pub use tensor::{Tape, Tensor};

/// Default-precision tensor (training).
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Default-precision tape.
pub type Tape32 = Tape<f32>;
/// Verification-precision tape.
pub type Tape64 = Tape<f64>;
