//! Differentiable primitives for training small radiance fields on the CPU.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — a reverse-mode automatic differentiation engine over dense
//!   row-major `f64` matrices, plus the Adam optimizer.
//! * [`wavelet`] — orthogonal 2-D discrete wavelet transforms (Haar and
//!   Daubechies families) with periodic boundary handling.
//! * [`encoding`] — multiresolution hash encoding for positions and a real
//!   spherical-harmonics basis for view directions, combined into the hybrid
//!   input layout consumed by the field network.
//! * [`field`] — the dual-branch density/color MLP with input- and
//!   output-level multi-head self-attention.
//! * [`render`] — differentiable volume rendering along camera rays.
//! * [`losses`] — photometric, wavelet-domain, geometric-regularization and
//!   correspondence losses.
//! * [`warp`] — camera/pose utilities: pose interpolation, point projection
//!   between views, and bilinear warping with validity masks.
//!
//! Everything is `f64` end to end; desk-scale problem sizes make that
//! affordable and the gradient-check tolerances require it.
//!
//! With `--no-default-features` the crate builds without `std` (it still
//! requires `alloc`); the `std` feature only enables runtime CPU-feature
//! detection for the fast matmul kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backend;
pub mod encoding;
pub mod error;
pub mod field;
pub mod losses;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod warp;
pub mod wavelet;

pub use error::CoreError;
pub use tensor::Tensor;
