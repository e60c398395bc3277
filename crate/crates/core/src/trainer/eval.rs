use log::warn;

use crate::corpus::collate::{CollateConfig, TokenBatch};
use crate::corpus::format::{format_generation_prompt, format_retriever_text};
use crate::corpus::image::Manifest;
use crate::corpus::types::{GeneratorSample, RetrieverSample};
use crate::corpus::vocab::{tokenize, Vocabulary, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::generator::{Generator, SamplingConfig};
use crate::metrics::{bleu_n, distinct_n, perplexity_from_sum, GenerationReport, RetrievalReport};
use crate::numerics::checkpoint::fingerprint;
use crate::retriever::model::ENCODE_CHUNK;
use crate::retriever::{build_index, rank, CandidateIndex, RetrievalConfig, Retriever};

use super::tasks::generator_token_loss;

fn config_fingerprint<C: serde::Serialize>(c: &C) -> Result<String> {
    Ok(fingerprint(serde_json::to_string(c)?.as_bytes()))
}

/// 1-based gold ranks of every sample against `index`.
pub fn gold_ranks(
    model: &Retriever,
    samples: &[RetrieverSample],
    vocab: &Vocabulary,
    index: &CandidateIndex,
) -> Result<Vec<usize>> {
    let max_len = model.config().max_text_len;
    let mut ranks = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ENCODE_CHUNK) {
        let rows: Vec<_> = chunk
            .iter()
            .map(|s| format_retriever_text(&s.history, vocab, max_len))
            .collect();
        let embs = model.encode_texts(&TokenBatch::pad(&rows))?;
        for (s, e) in chunk.iter().zip(embs) {
            let pos = index.position(&s.gold_image).ok_or_else(|| Error::Record {
                dialogue_id: s.dialogue_id.clone(),
                msg: format!("gold image {} is not in the candidate index", s.gold_image),
            })?;
            ranks.push(rank(index, &e)?.rank_of(pos).expect("position is in the index"));
        }
    }
    Ok(ranks)
}

/// Rank every sample against the split's candidate images. Without an
/// index, one is built over the samples' gold images; a supplied index must
/// come from the checkpoint with `model_fingerprint`.
pub fn evaluate_retrieval(
    model: &Retriever,
    model_fingerprint: &str,
    samples: &[RetrieverSample],
    vocab: &Vocabulary,
    manifest: &Manifest,
    index: Option<&CandidateIndex>,
    cfg: &RetrievalConfig,
) -> Result<RetrievalReport> {
    cfg.validate()?;
    let built;
    let index = match index {
        Some(ix) => {
            ix.check_encoder(model_fingerprint)?;
            ix
        }
        None => {
            let gold: Vec<String> = samples.iter().map(|s| s.gold_image.clone()).collect();
            let (ix, failures) = build_index(model, model_fingerprint, manifest, Some(&gold))?;
            if let Some((id, e)) = failures.into_iter().next() {
                return Err(Error::ImageLoad {
                    image_ref: id,
                    msg: e.to_string(),
                });
            }
            built = ix;
            &built
        }
    };
    let ranks = gold_ranks(model, samples, vocab, index)?;
    RetrievalReport::from_ranks(
        &ranks,
        &cfg.ks,
        index.len(),
        config_fingerprint(&(model.config(), cfg, model_fingerprint))?,
    )
}

fn is_special(t: &str) -> bool {
    SPECIAL_TOKENS.contains(&t)
}

/// Teacher-forced perplexity plus greedy-decoding BLEU and Distinct.
pub fn evaluate_generation(
    model: &Generator,
    model_fingerprint: &str,
    samples: &[GeneratorSample],
    vocab: &Vocabulary,
    manifest: Option<&Manifest>,
    eval_batch: usize,
    max_new_tokens: usize,
) -> Result<GenerationReport> {
    let images = if model.net.is_multimodal() {
        Some(manifest.ok_or_else(|| Error::invalid("multimodal evaluation needs an image manifest"))?)
    } else {
        None
    };
    let collate = CollateConfig {
        image_side: model.config().image_side,
        generator_max_len: model.config().max_positions,
        ..CollateConfig::default()
    };
    let (sum, n) = generator_token_loss(model, samples, vocab, images, &collate, eval_batch)?;
    if n == 0 {
        return Err(Error::invalid("no scored tokens in the evaluation set"));
    }
    let sampling = SamplingConfig {
        max_new_tokens,
        ..SamplingConfig::greedy()
    };
    let prompt_len = model.config().max_positions.saturating_sub(max_new_tokens).max(2);
    let (mut b1, mut b2, mut d1, mut d2) = (0.0, 0.0, 0.0, 0.0);
    let mut scored = 0usize;
    let mut empty = 0usize;
    for s in samples {
        let reference: Vec<String> = tokenize(&s.response.text)
            .iter()
            .map(|t| vocab.token(vocab.id(t)).to_string())
            .collect();
        if reference.is_empty() {
            warn!("skipping sample of {} with an empty response", s.dialogue_id);
            continue;
        }
        let prompt = format_generation_prompt(&s.history, s.response.speaker, vocab, prompt_len);
        let image = match images {
            Some(m) => Some(m.load_pixels(&s.conditioning_image, model.config().image_side)?),
            None => None,
        };
        let out = model.generate(&prompt, image.as_ref(), &sampling)?;
        let cand: Vec<String> = out
            .iter()
            .map(|&i| vocab.token(i).to_string())
            .filter(|t| !is_special(t))
            .collect();
        empty += usize::from(cand.is_empty());
        b1 += bleu_n(&cand, &reference, 1);
        b2 += bleu_n(&cand, &reference, 2);
        d1 += distinct_n(&cand, 1);
        d2 += distinct_n(&cand, 2);
        scored += 1;
    }
    if empty > 0 {
        warn!("{empty} of {scored} decoded responses are empty and score 0 on BLEU and Distinct");
    }
    let k = scored.max(1) as f64;
    Ok(GenerationReport {
        ppl: perplexity_from_sum(sum, n),
        bleu1: b1 / k,
        bleu2: b2 / k,
        distinct1: d1 / k,
        distinct2: d2 / k,
        samples: scored,
        config_fingerprint: config_fingerprint(&(model.config(), max_new_tokens, model_fingerprint))?,
    })
}
