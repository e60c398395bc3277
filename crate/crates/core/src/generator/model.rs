use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::collate::{GeneratorBatch, ImageBatch, TokenBatch};
use crate::corpus::image::PixelImage;
use crate::error::{Error, Result};
use crate::numerics::layers::{Block, BlockShape, LayerNorm, INIT_STD};
use crate::numerics::params::trunc_normal;
use crate::numerics::{Checkpoint, Graph, Mask, ParamId, ParamStore, Real, Tensor, Var, IGNORE_INDEX};
use crate::retriever::model::{VisionEncoder, VisionShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    Unimodal,
    Multimodal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub mode: GeneratorMode,
    pub vocab_size: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub image_side: usize,
    pub patch: usize,
    pub vision_blocks: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            mode: GeneratorMode::Unimodal,
            vocab_size: 8192,
            d_model: 64,
            blocks: 2,
            heads: 4,
            d_ff: 256,
            max_positions: 256,
            image_side: 32,
            patch: 4,
            vision_blocks: 2,
            seed: 0,
        }
    }
}

/// Decoder-only transformer with tied output embedding. In multimodal mode
/// each block also cross-attends over the patch sequence of an image
/// encoder.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: GeneratorConfig,
    tok: ParamId,
    pos: ParamId,
    pub vision: Option<VisionEncoder>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Decoder {
    pub fn new(config: GeneratorConfig) -> Result<(Self, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let d = config.d_model;
        let tok = ps.add("tok", trunc_normal(&mut rng, &[config.vocab_size, d], INIT_STD), true);
        let pos = ps.add(
            "pos",
            trunc_normal(&mut rng, &[config.max_positions, d], INIT_STD),
            false,
        );
        let vision = match config.mode {
            GeneratorMode::Unimodal => None,
            GeneratorMode::Multimodal => Some(VisionEncoder::new(
                &mut ps,
                &mut rng,
                "vision",
                VisionShape {
                    side: config.image_side,
                    patch: config.patch,
                    d_model: d,
                    blocks: config.vision_blocks,
                    heads: config.heads,
                    d_ff: config.d_ff,
                },
            )?),
        };
        let memory = vision.as_ref().map(|_| d);
        let blocks = (0..config.blocks)
            .map(|i| {
                Block::new(
                    &mut ps,
                    &mut rng,
                    &format!("block{i}"),
                    BlockShape {
                        d_model: d,
                        heads: config.heads,
                        d_ff: config.d_ff,
                        d_memory: memory,
                    },
                )
            })
            .collect();
        let ln_f = LayerNorm::new(&mut ps, "ln_f", d);
        Ok((
            Decoder {
                config,
                tok,
                pos,
                vision,
                blocks,
                ln_f,
            },
            ps,
        ))
    }

    pub fn is_multimodal(&self) -> bool {
        self.vision.is_some()
    }

    /// Image-encoder output used as cross-attention memory; `None` for a
    /// unimodal decoder, which ignores images.
    pub fn memory<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        images: Option<&ImageBatch>,
    ) -> Result<Option<Var>> {
        match (&self.vision, images) {
            (None, _) => Ok(None),
            (Some(v), Some(im)) => Ok(Some(v.forward(g, ps, im)?)),
            (Some(_), None) => Err(Error::invalid("multimodal decoder needs an image (dummy allowed)")),
        }
    }

    /// Next-token logits `[B, L, V]`.
    pub fn forward_logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        tokens: &TokenBatch,
        images: Option<&ImageBatch>,
    ) -> Result<Var> {
        let memory = self.memory(g, ps, images)?;
        self.forward_with_memory(g, ps, tokens, memory)
    }

    pub fn forward_with_memory<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        tokens: &TokenBatch,
        memory: Option<Var>,
    ) -> Result<Var> {
        let (b, l) = (tokens.batch, tokens.seq_len);
        if l == 0 || l > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence length {l} outside 1..={}",
                self.config.max_positions
            )));
        }
        if let Some(m) = memory {
            if g.shape(m)[0] != b {
                return Err(Error::shape(
                    "decoder",
                    format!("{} images for {b} sequences", g.shape(m)[0]),
                ));
            }
        }
        let tok = g.param(ps, self.tok);
        let x = g.embedding(tok, &tokens.ids, &[b, l])?;
        let pos = g.param(ps, self.pos);
        let pos = g.narrow(pos, 0, 0, l)?;
        let mut x = g.add_broadcast(x, pos)?;
        let mask = Mask::causal(b, l, Some(&tokens.valid));
        for blk in &self.blocks {
            x = blk.forward(g, ps, x, Some(&mask), memory)?;
        }
        let x = self.ln_f.forward(g, ps, x)?;
        g.matmul(x, tok, true)
    }

    /// Summed token loss over scored positions divided by `denom`.
    pub fn loss_sum<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        batch: &GeneratorBatch,
        denom: T,
    ) -> Result<Var> {
        let logits = self.forward_logits(g, ps, &batch.tokens, batch.images.as_ref())?;
        let v = self.config.vocab_size;
        let flat = g.reshape(logits, &[batch.tokens.batch * batch.tokens.seq_len, v])?;
        g.cross_entropy_sum(flat, &shifted_targets(batch), denom)
    }

    /// Mean token loss over the batch's scored positions.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, batch: &GeneratorBatch) -> Result<Var> {
        let n = shifted_targets(batch).iter().filter(|&&t| t != IGNORE_INDEX).count();
        if n == 0 {
            return Err(Error::AllTargetsIgnored);
        }
        self.loss_sum(g, ps, batch, T::from_usize(n).unwrap())
    }
}

/// Targets for the logits at each position: the label of the next position,
/// ignored at the end of every row.
pub fn shifted_targets(batch: &GeneratorBatch) -> Vec<i64> {
    let l = batch.tokens.seq_len;
    let mut out = Vec::with_capacity(batch.labels.len());
    for row in batch.labels.chunks(l.max(1)) {
        out.extend_from_slice(&row[1..]);
        out.push(IGNORE_INDEX);
    }
    out
}

/// A decoder together with its parameter values.
#[derive(Clone, Debug)]
pub struct Generator {
    pub net: Decoder,
    pub params: ParamStore,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        let (net, params) = Decoder::new(config)?;
        Ok(Generator { net, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.net.config
    }

    pub fn logits(&self, tokens: &TokenBatch, images: Option<&ImageBatch>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = self.net.forward_logits(&mut g, &self.params, tokens, images)?;
        Ok(g.value(v).clone())
    }

    /// Summed token cross-entropy and the number of scored tokens.
    pub fn token_loss(&self, batch: &GeneratorBatch) -> Result<(f64, usize)> {
        let n = shifted_targets(batch).iter().filter(|&&t| t != IGNORE_INDEX).count();
        if n == 0 {
            return Ok((0.0, 0));
        }
        let mut g = Graph::<f32>::new();
        let l = self.net.loss_sum(&mut g, &self.params, batch, 1.0)?;
        Ok((g.value(l).item() as f64, n))
    }

    /// Image-encoder output for one image, reused across decoding steps.
    pub fn encode_image(&self, image: Option<&PixelImage>) -> Result<Option<Tensor<f32>>> {
        if !self.net.is_multimodal() {
            return Ok(None);
        }
        let dummy;
        let im = match image {
            Some(im) => im,
            None => {
                dummy = PixelImage::dummy(self.config().image_side);
                &dummy
            }
        };
        let mut g = Graph::new();
        let m = self
            .net
            .memory(&mut g, &self.params, Some(&ImageBatch::stack(std::slice::from_ref(im))))?;
        Ok(m.map(|m| g.value(m).clone()))
    }

    /// Logits for the last position of `ids`.
    pub fn next_logits(&self, ids: &[usize], memory: Option<&Tensor<f32>>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let mem = memory.map(|m| g.constant(m.clone()));
        let tb = TokenBatch::pad(&[ids.to_vec()]);
        let v = self.net.forward_with_memory(&mut g, &self.params, &tb, mem)?;
        let vsz = self.config().vocab_size;
        let data = g.value(v).data();
        Ok(data[data.len() - vsz..].to_vec())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            &self.params,
            serde_json::json!({ "kind": "generator", "model": self.net.config }),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config.get("kind").and_then(|k| k.as_str()) != Some("generator") {
            return Err(Error::Checkpoint("not a generator checkpoint".into()));
        }
        let config: GeneratorConfig = serde_json::from_value(ckpt.config["model"].clone())?;
        let mut m = Generator::new(config)?;
        ckpt.load_into(&mut m.params)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (ckpt, fp) = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ckpt)?, fp))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.checkpoint().save(path)
    }
}
