//! PhotoChat-format ingestion, preprocessing, sample expansion,
//! tokenization and batch collation.

pub mod collate;
pub mod format;
pub mod image;
pub mod load;
pub mod preprocess;
pub mod samples;
pub mod types;
pub mod vocab;

pub use collate::{
    collate_generator, collate_retriever, CollateConfig, GeneratorBatch, ImageBatch, RetrieverBatch, TokenBatch,
};
pub use format::{
    format_generation_prompt, format_generator_input, format_retriever_text, HISTORY_WINDOW, RETRIEVER_MAX_LEN,
};
pub use image::{load_image, ImageSource, Manifest, PixelImage, SyntheticSpec};
pub use load::{load_photochat, parse_photochat};
pub use preprocess::{
    filter_unavailable_images, merge_consecutive_turns, preprocess_dialogue, preprocess_split, propagate_images,
    reassign_image_only_turns, PreprocessOutcome,
};
pub use samples::{expand_generator_samples, expand_retriever_samples};
pub use types::{
    DatasetSplit, Dialogue, GeneratorSample, ImageKey, ImageRole, RetrieverSample, Speaker, SplitName, Turn,
};
pub use vocab::{tokenize, Vocabulary};
