//! Procedural masks and images.

pub mod masks;
pub mod synth;

pub use masks::{generate_mask, mask_with_ratio, MaskSpec};
pub use synth::synth_dataset;
