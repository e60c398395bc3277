//! Image-augmented dialogue engine: PhotoChat-style preprocessing, a
//! dual-encoder image retriever, unimodal and multimodal response
//! generators, automatic metrics and training orchestration.

pub mod corpus;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod numerics;
pub mod retriever;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
