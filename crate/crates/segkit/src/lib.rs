//! Deterministic building blocks for an instance-segmentation pipeline.
//!
//! Everything around the network itself: mask algebra ([`mask`]), image
//! primitives ([`imaging`]), COCO-style dataset I/O ([`coco`]), training-time
//! augmentation ([`augment`]), detection post-processing ([`postprocess`]),
//! checkpoint weight averaging ([`swa`]), mask-AP evaluation ([`eval`]), and a
//! pluggable detector harness ([`harness`]) that wires the stages together.
//!
//! All randomized components draw from seeded [`rng::RandomStream`]s, so any
//! two runs with the same inputs and seeds produce byte-identical outputs.

pub mod augment;
pub mod coco;
pub mod eval;
pub mod harness;
pub mod imaging;
pub mod mask;
pub mod postprocess;
pub mod rng;
pub mod selftest;
pub mod swa;

pub use mask::{BBox, BinaryMask, RleMask};
