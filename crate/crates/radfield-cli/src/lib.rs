//! Standard-library companion to `radfield-core`: dataset and image I/O,
//! synthetic scene generation, image-quality metrics, checkpointing, the
//! training loop, micro-benchmarks, and the `radfield` command-line surface.

pub mod bench;
pub mod ckpt;
pub mod commands;
pub mod config;
pub mod fsutil;
pub mod manifest;
pub mod metrics;
pub mod scene;
pub mod trainer;
