//! Unimodal and multimodal response generators.

pub mod decode;
pub mod model;

pub use decode::{nucleus, sample_nucleus, select_conditioning_image, SamplingConfig, Strategy};
pub use model::{shifted_targets, Decoder, Generator, GeneratorConfig, GeneratorMode};
