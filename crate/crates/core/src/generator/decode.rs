use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::image::PixelImage;
use crate::corpus::types::ImageKey;
use crate::corpus::vocab::EOS;
use crate::error::{Error, Result};

use super::model::Generator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Nucleus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    pub top_p: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            strategy: Strategy::Greedy,
            top_p: 0.1,
            seed: 0,
            max_new_tokens: 40,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn nucleus(top_p: f64, seed: u64) -> Self {
        SamplingConfig {
            strategy: Strategy::Nucleus,
            top_p,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Smallest probability-sorted prefix whose mass reaches `top_p`; ties in
/// probability keep index order.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut mass = 0.0;
    let mut keep = Vec::new();
    for i in order {
        keep.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    keep
}

pub fn sample_nucleus<R: Rng>(probs: &[f64], top_p: f64, rng: &mut R) -> usize {
    let keep = nucleus(probs, top_p);
    let total: f64 = keep.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * total;
    for &i in &keep {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    *keep.last().expect("nucleus is never empty")
}

impl Generator {
    /// Continue `prompt` (ending with the bot tag) until `<eos>`,
    /// `max_new_tokens`, or the position limit. The `<eos>` is not returned.
    pub fn generate(&self, prompt: &[usize], image: Option<&PixelImage>, cfg: &SamplingConfig) -> Result<Vec<usize>> {
        cfg.validate()?;
        if prompt.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        let memory = self.encode_image(image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < cfg.max_new_tokens && ids.len() < self.config().max_positions {
            let logits = self.next_logits(&ids, memory.as_ref())?;
            let next = match cfg.strategy {
                Strategy::Greedy => argmax(&logits),
                Strategy::Nucleus => sample_nucleus(&softmax_f64(&logits), cfg.top_p, &mut rng),
            };
            if next == EOS {
                break;
            }
            ids.push(next);
            out.push(next);
        }
        Ok(out)
    }

    pub fn generate_greedy(
        &self,
        prompt: &[usize],
        image: Option<&PixelImage>,
        max_new_tokens: usize,
    ) -> Result<Vec<usize>> {
        self.generate(
            prompt,
            image,
            &SamplingConfig {
                max_new_tokens,
                ..SamplingConfig::greedy()
            },
        )
    }
}

/// Image fed to a multimodal generator: this turn's retrieval, else the
/// newest image in the shared queue, else the dummy.
pub fn select_conditioning_image(retrieved: Option<&str>, queue: &[String]) -> ImageKey {
    match retrieved.or(queue.last().map(String::as_str)) {
        Some(id) => ImageKey::Id(id.to_string()),
        None => ImageKey::Dummy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_cumulative_rule() {
        assert_eq!(nucleus(&[0.9, 0.05, 0.05], 0.1), vec![0]);
        assert_eq!(nucleus(&[0.05, 0.9, 0.05], 0.95), vec![1, 0]);
        assert_eq!(nucleus(&[0.2, 0.3, 0.5], 1.0).len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(sample_nucleus(&[0.9, 0.05, 0.05], 0.1, &mut rng), 0);
        }
    }

    #[test]
    fn conditioning_policy() {
        assert_eq!(select_conditioning_image(None, &[]), ImageKey::Dummy);
        let q = vec!["a".to_string(), "b".to_string()];
        assert_eq!(select_conditioning_image(None, &q), ImageKey::Id("b".into()));
        assert_eq!(select_conditioning_image(Some("c"), &q), ImageKey::Id("c".into()));
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
