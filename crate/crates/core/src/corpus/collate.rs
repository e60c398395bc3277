//! Batch assembly. Images are decoded here, one batch at a time, never
//! during preprocessing.

use crate::error::Result;

use super::format::{format_generator_input, format_retriever_text};
use super::image::{Manifest, PixelImage};
use super::types::{GeneratorSample, ImageKey, RetrieverSample};
use super::vocab::{Vocabulary, PAD};
use crate::numerics::IGNORE_INDEX;

/// Right-padded token matrix with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    /// Pad every row to the longest row of the batch.
    pub fn pad(rows: &[Vec<usize>]) -> Self {
        let seq_len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        let mut valid = Vec::with_capacity(rows.len() * seq_len);
        for r in rows {
            ids.extend_from_slice(r);
            valid.extend(std::iter::repeat_n(true, r.len()));
            ids.extend(std::iter::repeat_n(PAD, seq_len - r.len()));
            valid.extend(std::iter::repeat_n(false, seq_len - r.len()));
        }
        TokenBatch {
            ids,
            valid,
            batch: rows.len(),
            seq_len,
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.valid[i * self.seq_len..(i + 1) * self.seq_len]
            .iter()
            .filter(|&&v| v)
            .count()
    }
}

/// Stacked `[batch, side, side, 3]` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Vec<f32>,
    pub batch: usize,
    pub side: usize,
}

impl ImageBatch {
    pub fn stack(images: &[PixelImage]) -> Self {
        let side = images.first().map_or(0, PixelImage::side);
        let mut pixels = Vec::with_capacity(images.len() * side * side * 3);
        for im in images {
            assert_eq!(im.side(), side, "mixed image sides in one batch");
            pixels.extend_from_slice(im.data());
        }
        ImageBatch {
            pixels,
            batch: images.len(),
            side,
        }
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.side * self.side * 3;
        &self.pixels[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollateConfig {
    pub image_side: usize,
    pub generator_max_len: usize,
    pub retriever_max_len: usize,
}

impl Default for CollateConfig {
    fn default() -> Self {
        CollateConfig {
            image_side: 32,
            generator_max_len: 256,
            retriever_max_len: super::format::RETRIEVER_MAX_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrieverBatch {
    pub dialogue_ids: Vec<String>,
    pub gold_images: Vec<String>,
    pub text: TokenBatch,
    pub images: ImageBatch,
}

pub fn collate_retriever(
    samples: &[RetrieverSample],
    vocab: &Vocabulary,
    manifest: &Manifest,
    cfg: &CollateConfig,
) -> Result<RetrieverBatch> {
    let rows: Vec<_> = samples
        .iter()
        .map(|s| format_retriever_text(&s.history, vocab, cfg.retriever_max_len))
        .collect();
    let images = samples
        .iter()
        .map(|s| manifest.load_pixels(&ImageKey::Id(s.gold_image.clone()), cfg.image_side))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrieverBatch {
        dialogue_ids: samples.iter().map(|s| s.dialogue_id.clone()).collect(),
        gold_images: samples.iter().map(|s| s.gold_image.clone()).collect(),
        text: TokenBatch::pad(&rows),
        images: ImageBatch::stack(&images),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorBatch {
    pub dialogue_ids: Vec<String>,
    pub tokens: TokenBatch,
    /// Aligned with `tokens.ids`; −100 over history and padding.
    pub labels: Vec<i64>,
    /// Conditioning images, loaded only when a manifest is supplied.
    pub images: Option<ImageBatch>,
}

impl GeneratorBatch {
    pub fn scored_tokens(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

/// Samples whose response has no tokens are left out of the batch.
pub fn collate_generator(
    samples: &[GeneratorSample],
    vocab: &Vocabulary,
    manifest: Option<&Manifest>,
    cfg: &CollateConfig,
) -> Result<GeneratorBatch> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut label_rows = Vec::with_capacity(samples.len());
    let mut kept = Vec::with_capacity(samples.len());
    for s in samples {
        if let Some((ids, labels)) = format_generator_input(&s.history, &s.response, vocab, cfg.generator_max_len) {
            rows.push(ids);
            label_rows.push(labels);
            kept.push(s);
        }
    }
    let tokens = TokenBatch::pad(&rows);
    let mut labels = Vec::with_capacity(tokens.ids.len());
    for l in &label_rows {
        labels.extend_from_slice(l);
        labels.extend(std::iter::repeat_n(IGNORE_INDEX, tokens.seq_len - l.len()));
    }
    let images = match manifest {
        Some(m) => Some(ImageBatch::stack(
            &kept
                .iter()
                .map(|s| m.load_pixels(&s.conditioning_image, cfg.image_side))
                .collect::<Result<Vec<_>>>()?,
        )),
        None => None,
    };
    Ok(GeneratorBatch {
        dialogue_ids: kept.iter().map(|s| s.dialogue_id.clone()).collect(),
        tokens,
        labels,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::super::types::{Speaker, Turn};
    use super::*;

    #[test]
    fn padding_to_batch_max() {
        let b = TokenBatch::pad(&[vec![9; 5], vec![8; 9]]);
        assert_eq!(b.seq_len, 9);
        assert_eq!(b.row(0)[5..], [PAD; 4]);
        assert_eq!(b.row_len(0), 5);
        let single = TokenBatch::pad(&[vec![1, 2, 3]]);
        assert_eq!(single.seq_len, 3);
        assert!(single.valid.iter().all(|&v| v));
    }

    #[test]
    fn generator_labels_mask_history_and_padding() {
        let v = Vocabulary::build(["hi there friend"], 1, 64);
        let mk = |h: &str, r: &str| GeneratorSample {
            dialogue_id: "d".into(),
            history: vec![Turn::text(Speaker::User, h)],
            response: Turn::text(Speaker::Bot, r),
            conditioning_image: ImageKey::Dummy,
        };
        let samples = [mk("hi", "there"), mk("hi there friend hi", "friend")];
        let b = collate_generator(&samples, &v, None, &CollateConfig::default()).unwrap();
        assert_eq!(b.labels.len(), b.tokens.ids.len());
        for (j, &l) in b.labels.iter().enumerate() {
            if l != IGNORE_INDEX {
                assert_eq!(l as usize, b.tokens.ids[j]);
                assert!(b.tokens.valid[j]);
            }
        }
        assert_eq!(b.scored_tokens(), 4);
        assert!(b.images.is_none());
    }
}
