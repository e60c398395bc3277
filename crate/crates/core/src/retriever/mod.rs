//! Dual-encoder image retriever with threshold-gated top-1 selection.

pub mod index;
pub mod loss;
pub mod model;

pub use index::{build_index, rank, retrieve_top1, CandidateIndex, RankedList, RetrievalConfig};
pub use loss::{contrastive_loss, contrastive_loss_from_logits};
pub use model::{patchify, DualEncoder, Retriever, RetrieverConfig, TextEncoder, VisionEncoder, VisionShape};
