use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use mmchat_core::corpus::{
    format_generation_prompt, format_retriever_text, ImageKey, Manifest, Speaker, Turn, Vocabulary,
};
use mmchat_core::generator::{select_conditioning_image, Generator, SamplingConfig};
use mmchat_core::retriever::{retrieve_top1, CandidateIndex, Retriever};

use crate::error::{ChatError, Result};

/// The three deployed variants compared by human raters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    /// Text-only generator, no image retrieval.
    Unimodal,
    /// Retrieved images are shown but the generator never sees them.
    UnimodalRetriever,
    MultimodalRetriever,
}

impl ModelTag {
    pub const ALL: [ModelTag; 3] = [
        ModelTag::Unimodal,
        ModelTag::UnimodalRetriever,
        ModelTag::MultimodalRetriever,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelTag::Unimodal => "unimodal",
            ModelTag::UnimodalRetriever => "unimodal_retriever",
            ModelTag::MultimodalRetriever => "multimodal_retriever",
        }
    }

    pub fn uses_retriever(&self) -> bool {
        !matches!(self, ModelTag::Unimodal)
    }

    pub fn multimodal(&self) -> bool {
        matches!(self, ModelTag::MultimodalRetriever)
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelTag {
    type Err = ChatError;

    fn from_str(s: &str) -> Result<Self> {
        ModelTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ChatError::UnknownTag(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Minimum cosine similarity for an image to be shared.
    pub threshold: f32,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Base of the per-turn sampling seeds.
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            threshold: 0.15,
            top_p: 0.1,
            max_new_tokens: 40,
            seed: 0,
        }
    }
}

/// Text encoder plus the precomputed candidate index built from its image
/// tower.
pub struct RetrievalStack {
    pub retriever: Retriever,
    pub index: CandidateIndex,
}

impl RetrievalStack {
    /// Fails when the index was built by a different encoder checkpoint.
    pub fn new(retriever: Retriever, retriever_fingerprint: &str, index: CandidateIndex) -> Result<Self> {
        index.check_encoder(retriever_fingerprint)?;
        Ok(RetrievalStack { retriever, index })
    }
}

/// Outcome of one exchange.
#[derive(Clone, Debug, PartialEq)]
pub struct Reply {
    pub response: String,
    /// Image shared with this response and its similarity score.
    pub image: Option<(String, f32)>,
    /// Image fed to the generator; `None` for text-only variants.
    pub conditioning: Option<ImageKey>,
}

/// Loaded models shared read-only by every session.
pub struct Engine {
    vocab: Vocabulary,
    manifest: Manifest,
    retrieval: Option<RetrievalStack>,
    variants: BTreeMap<ModelTag, Generator>,
    config: EngineConfig,
}

impl Engine {
    pub fn new(vocab: Vocabulary, manifest: Manifest, retrieval: Option<RetrievalStack>, config: EngineConfig) -> Self {
        Engine {
            vocab,
            manifest,
            retrieval,
            variants: BTreeMap::new(),
            config,
        }
    }

    pub fn with_variant(mut self, tag: ModelTag, generator: Generator) -> Result<Self> {
        let mismatch = |msg: &str| ChatError::VariantMismatch {
            tag,
            msg: msg.to_string(),
        };
        if generator.config().vocab_size != self.vocab.len() {
            return Err(mismatch("generator vocabulary size differs from the loaded vocabulary"));
        }
        if tag.multimodal() != generator.net.is_multimodal() {
            return Err(mismatch(if tag.multimodal() {
                "needs a multimodal generator"
            } else {
                "needs a unimodal generator"
            }));
        }
        if tag.uses_retriever() && self.retrieval.is_none() {
            return Err(mismatch("needs a retriever and candidate index"));
        }
        self.variants.insert(tag, generator);
        Ok(self)
    }

    pub fn tags(&self) -> impl Iterator<Item = ModelTag> + '_ {
        self.variants.keys().copied()
    }

    pub fn supports(&self, tag: ModelTag) -> bool {
        self.variants.contains_key(&tag)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Sampling seed for the `exchange`-th message of a session.
    pub fn turn_seed(&self, exchange: usize) -> u64 {
        self.config.seed.wrapping_add(exchange as u64)
    }

    /// Text embedding of the whole dialogue so far.
    pub fn query_embedding(&self, history: &[Turn]) -> Result<Vec<f32>> {
        let stack = self.retrieval.as_ref().ok_or(ChatError::NoRetriever)?;
        let ids = format_retriever_text(history, &self.vocab, stack.retriever.config().max_text_len);
        Ok(stack.retriever.encode_text(&ids)?)
    }

    /// Best candidate for `history` when its cosine similarity clears the
    /// threshold.
    pub fn retrieve(&self, history: &[Turn]) -> Result<Option<(String, f32)>> {
        let Some(stack) = &self.retrieval else {
            return Ok(None);
        };
        let query = self.query_embedding(history)?;
        Ok(retrieve_top1(&stack.index, &query, self.config.threshold)?)
    }

    /// Run one exchange. `history` ends with the new user message and
    /// `queue` lists the images shared so far, oldest first.
    pub fn respond(&self, tag: ModelTag, history: &[Turn], queue: &[String], seed: u64) -> Result<Reply> {
        let generator = self.variants.get(&tag).ok_or(ChatError::VariantNotLoaded(tag))?;
        let image = if tag.uses_retriever() {
            self.retrieve(history)?
        } else {
            None
        };
        let conditioning = tag
            .multimodal()
            .then(|| select_conditioning_image(image.as_ref().map(|(id, _)| id.as_str()), queue));
        let pixels = match &conditioning {
            Some(key) => Some(self.manifest.load_pixels(key, generator.config().image_side)?),
            None => None,
        };
        let max_pos = generator.config().max_positions;
        let budget = max_pos - self.config.max_new_tokens.min(max_pos / 2);
        let prompt = format_generation_prompt(history, Speaker::Bot, &self.vocab, budget);
        let sampling = SamplingConfig {
            max_new_tokens: self.config.max_new_tokens,
            ..SamplingConfig::nucleus(self.config.top_p, seed)
        };
        let ids = generator.generate(&prompt, pixels.as_ref(), &sampling)?;
        Ok(Reply {
            response: self.vocab.decode_text(&ids),
            image,
            conditioning,
        })
    }
}
