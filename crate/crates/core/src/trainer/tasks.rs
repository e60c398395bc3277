use crate::corpus::collate::{collate_generator, collate_retriever, CollateConfig};
use crate::corpus::image::Manifest;
use crate::corpus::types::{GeneratorSample, RetrieverSample};
use crate::corpus::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::numerics::{Checkpoint, Gradients, Graph, ParamStore};
use crate::retriever::Retriever;

/// A model the training loop can drive.
pub trait Trainable {
    type Sample;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn sample_id(&self, s: &Self::Sample) -> String;

    /// Smallest micro-batch the loss is defined on.
    fn min_batch(&self) -> usize {
        1
    }

    /// Loss contribution and gradients of `micro`, one of `n_micro` slices of
    /// `effective`. Contributions sum to the effective-batch loss.
    fn micro_batch(
        &self,
        micro: &[Self::Sample],
        effective: &[Self::Sample],
        n_micro: usize,
    ) -> Result<(f64, Gradients)>;

    /// Mean validation loss over `samples`, evaluated in batches.
    fn eval_loss(&self, samples: &[Self::Sample], batch: usize) -> Result<f64>;

    fn after_step(&mut self) {}

    fn checkpoint(&self) -> Checkpoint;
}

/// Split into chunks of `size`, folding a trailing chunk smaller than `min`
/// into its predecessor.
pub fn chunks_with_min<T>(items: &[T], size: usize, min: usize) -> Vec<&[T]> {
    let mut out: Vec<&[T]> = Vec::new();
    let mut start = 0;
    while start < items.len() {
        let end = (start + size).min(items.len());
        if end - start < min && !out.is_empty() {
            let prev_start = items.len() - (end - start) - out.last().unwrap().len();
            *out.last_mut().unwrap() = &items[prev_start..end];
        } else {
            out.push(&items[start..end]);
        }
        start = end;
    }
    out
}

pub struct RetrieverTask<'a> {
    pub model: Retriever,
    pub vocab: &'a Vocabulary,
    pub manifest: &'a Manifest,
    pub collate: CollateConfig,
}

impl<'a> RetrieverTask<'a> {
    pub fn new(model: Retriever, vocab: &'a Vocabulary, manifest: &'a Manifest) -> Self {
        let collate = CollateConfig {
            image_side: model.config().image_side,
            retriever_max_len: model.config().max_text_len,
            ..CollateConfig::default()
        };
        RetrieverTask {
            model,
            vocab,
            manifest,
            collate,
        }
    }

    fn batch_loss(&self, samples: &[RetrieverSample], grad: bool) -> Result<(f64, Option<Gradients>)> {
        let b = collate_retriever(samples, self.vocab, self.manifest, &self.collate)?;
        let mut g = Graph::new();
        let loss = self.model.net.loss(&mut g, &self.model.params, &b.images, &b.text)?;
        let grads = if grad { Some(g.backward(loss)?) } else { None };
        Ok((g.value(loss).item() as f64, grads))
    }
}

impl Trainable for RetrieverTask<'_> {
    type Sample = RetrieverSample;

    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn sample_id(&self, s: &RetrieverSample) -> String {
        s.dialogue_id.clone()
    }

    fn min_batch(&self) -> usize {
        2
    }

    /// In-batch negatives come from the micro-batch only; micro-batch losses
    /// are averaged.
    fn micro_batch(
        &self,
        micro: &[RetrieverSample],
        _effective: &[RetrieverSample],
        n_micro: usize,
    ) -> Result<(f64, Gradients)> {
        let (loss, grads) = self.batch_loss(micro, true)?;
        let mut grads = grads.expect("requested");
        let w = 1.0 / n_micro as f32;
        grads.scale(w);
        Ok((loss * w as f64, grads))
    }

    fn eval_loss(&self, samples: &[RetrieverSample], batch: usize) -> Result<f64> {
        let chunks = chunks_with_min(samples, batch, 2);
        if chunks.is_empty() || chunks[0].len() < 2 {
            return Err(Error::invalid("retriever evaluation needs at least 2 samples"));
        }
        let mut total = 0.0;
        for c in &chunks {
            total += self.batch_loss(c, false)?.0;
        }
        Ok(total / chunks.len() as f64)
    }

    fn after_step(&mut self) {
        self.model.clamp_logit_scale();
    }

    fn checkpoint(&self) -> Checkpoint {
        self.model.checkpoint()
    }
}

pub struct GeneratorTask<'a> {
    pub model: Generator,
    pub vocab: &'a Vocabulary,
    /// Required for a multimodal generator.
    pub manifest: Option<&'a Manifest>,
    pub collate: CollateConfig,
}

impl<'a> GeneratorTask<'a> {
    pub fn new(model: Generator, vocab: &'a Vocabulary, manifest: Option<&'a Manifest>) -> Self {
        let collate = CollateConfig {
            image_side: model.config().image_side,
            generator_max_len: model.config().max_positions,
            ..CollateConfig::default()
        };
        GeneratorTask {
            model,
            vocab,
            manifest,
            collate,
        }
    }

    fn images(&self) -> Option<&Manifest> {
        if self.model.net.is_multimodal() {
            self.manifest
        } else {
            None
        }
    }

    fn scored_tokens(&self, samples: &[GeneratorSample]) -> Result<usize> {
        Ok(collate_generator(samples, self.vocab, None, &self.collate)?.scored_tokens())
    }
}

impl Trainable for GeneratorTask<'_> {
    type Sample = GeneratorSample;

    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn sample_id(&self, s: &GeneratorSample) -> String {
        s.dialogue_id.clone()
    }

    /// Token losses are summed and divided by the token count of the whole
    /// effective batch, so accumulation reproduces the full-batch gradient.
    fn micro_batch(
        &self,
        micro: &[GeneratorSample],
        effective: &[GeneratorSample],
        _n_micro: usize,
    ) -> Result<(f64, Gradients)> {
        let denom = self.scored_tokens(effective)?;
        if denom == 0 {
            return Err(Error::AllTargetsIgnored);
        }
        let b = collate_generator(micro, self.vocab, self.images(), &self.collate)?;
        if b.scored_tokens() == 0 {
            return Ok((0.0, Gradients::empty(0)));
        }
        let mut g = Graph::new();
        let loss = self.model.net.loss_sum(&mut g, &self.model.params, &b, denom as f32)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item() as f64, grads))
    }

    /// Token-weighted mean cross-entropy.
    fn eval_loss(&self, samples: &[GeneratorSample], batch: usize) -> Result<f64> {
        let (sum, n) = generator_token_loss(&self.model, samples, self.vocab, self.images(), &self.collate, batch)?;
        if n == 0 {
            return Err(Error::AllTargetsIgnored);
        }
        Ok(sum / n as f64)
    }

    fn checkpoint(&self) -> Checkpoint {
        self.model.checkpoint()
    }
}

/// Summed teacher-forced token loss and scored-token count over `samples`.
pub fn generator_token_loss(
    model: &Generator,
    samples: &[GeneratorSample],
    vocab: &Vocabulary,
    manifest: Option<&Manifest>,
    collate: &CollateConfig,
    batch: usize,
) -> Result<(f64, usize)> {
    let (mut sum, mut n) = (0.0, 0);
    for c in samples.chunks(batch.max(1)) {
        let b = collate_generator(c, vocab, manifest, collate)?;
        if b.tokens.batch == 0 {
            continue;
        }
        let (s, k) = model.token_loss(&b)?;
        sum += s;
        n += k;
    }
    Ok((sum, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_tail_chunks_merge() {
        let v: Vec<u8> = (0..9).collect();
        let c = chunks_with_min(&v, 4, 2);
        assert_eq!(c.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 5]);
        let c = chunks_with_min(&v, 3, 2);
        assert_eq!(c.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![3, 3, 3]);
        let c = chunks_with_min(&v[..1], 4, 2);
        assert_eq!(c.len(), 1);
    }
}
