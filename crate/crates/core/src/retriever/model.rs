use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::corpus::collate::{ImageBatch, TokenBatch};
use crate::error::{Error, Result};
use crate::numerics::layers::{Block, BlockShape, LayerNorm, Linear, INIT_STD};
use crate::numerics::params::trunc_normal;
use crate::numerics::{Checkpoint, Graph, Mask, ParamId, ParamStore, Real, Tensor, Var};

/// Split `[B, side, side, 3]` HWC pixels into `[B, P, patch*patch*3]`
/// row-major patches.
pub fn patchify(pixels: &[f32], batch: usize, side: usize, patch: usize) -> Result<Tensor<f32>> {
    if patch == 0 || !side.is_multiple_of(patch) {
        return Err(Error::shape(
            "patchify",
            format!("side {side} not divisible by patch {patch}"),
        ));
    }
    if pixels.len() != batch * side * side * 3 {
        return Err(Error::shape(
            "patchify",
            format!("{} values for {batch} images of side {side}", pixels.len()),
        ));
    }
    let grid = side / patch;
    let pd = patch * patch * 3;
    let mut out = Vec::with_capacity(pixels.len());
    for b in 0..batch {
        let img = &pixels[b * side * side * 3..(b + 1) * side * side * 3];
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..patch {
                    let start = ((gy * patch + y) * side + gx * patch) * 3;
                    out.extend_from_slice(&img[start..start + patch * 3]);
                }
            }
        }
    }
    Tensor::new([batch, grid * grid, pd], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionShape {
    pub side: usize,
    pub patch: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
}

/// Patch-embedding transformer with a prepended pooling token.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub shape: VisionShape,
    patch_embed: Linear,
    pool: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

impl VisionEncoder {
    pub fn new<R: rand::Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, shape: VisionShape) -> Result<Self> {
        if shape.patch == 0 || !shape.side.is_multiple_of(shape.patch) {
            return Err(Error::invalid(format!(
                "image side {} not divisible by patch {}",
                shape.side, shape.patch
            )));
        }
        let n = (shape.side / shape.patch).pow(2) + 1;
        let d = shape.d_model;
        let patch_embed = Linear::new(
            ps,
            rng,
            &format!("{name}.patch_embed"),
            shape.patch * shape.patch * 3,
            d,
            true,
        );
        let pool = ps.add(format!("{name}.pool"), trunc_normal(rng, &[1, d], INIT_STD), false);
        let pos = ps.add(format!("{name}.pos"), trunc_normal(rng, &[n, d], INIT_STD), false);
        let blocks = (0..shape.blocks)
            .map(|i| {
                Block::new(
                    ps,
                    rng,
                    &format!("{name}.block{i}"),
                    BlockShape {
                        d_model: d,
                        heads: shape.heads,
                        d_ff: shape.d_ff,
                        d_memory: None,
                    },
                )
            })
            .collect();
        let ln = LayerNorm::new(ps, &format!("{name}.ln"), d);
        Ok(VisionEncoder {
            shape,
            patch_embed,
            pool,
            pos,
            blocks,
            ln,
        })
    }

    /// `[B, 1 + P, d]`; row 0 of each image is the pooled token.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, images: &ImageBatch) -> Result<Var> {
        if images.side != self.shape.side {
            return Err(Error::shape(
                "vision_encoder",
                format!("image side {} vs configured {}", images.side, self.shape.side),
            ));
        }
        let patches = patchify(&images.pixels, images.batch, self.shape.side, self.shape.patch)?;
        let x = g.constant(patches.cast());
        let x = self.patch_embed.forward(g, ps, x)?;
        let pool = g.param(ps, self.pool);
        let pool = g.repeat_batch(pool, images.batch)?;
        let x = g.concat(&[pool, x], 1)?;
        let pos = g.param(ps, self.pos);
        let mut x = g.add_broadcast(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, ps, x, None, None)?;
        }
        self.ln.forward(g, ps, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextShape {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
}

/// Bidirectional token encoder; position 0 holds the pooling token.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub shape: TextShape,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

impl TextEncoder {
    pub fn new<R: rand::Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, shape: TextShape) -> Self {
        let d = shape.d_model;
        TextEncoder {
            shape,
            tok: ps.add(
                format!("{name}.tok"),
                trunc_normal(rng, &[shape.vocab_size, d], INIT_STD),
                true,
            ),
            pos: ps.add(
                format!("{name}.pos"),
                trunc_normal(rng, &[shape.max_len, d], INIT_STD),
                false,
            ),
            blocks: (0..shape.blocks)
                .map(|i| {
                    Block::new(
                        ps,
                        rng,
                        &format!("{name}.block{i}"),
                        BlockShape {
                            d_model: d,
                            heads: shape.heads,
                            d_ff: shape.d_ff,
                            d_memory: None,
                        },
                    )
                })
                .collect(),
            ln: LayerNorm::new(ps, &format!("{name}.ln"), d),
        }
    }

    /// Pooled `[B, d]` representation.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, tokens: &TokenBatch) -> Result<Var> {
        let (b, l) = (tokens.batch, tokens.seq_len);
        if l > self.shape.max_len {
            return Err(Error::invalid(format!(
                "text of length {l} exceeds the encoder maximum {}",
                self.shape.max_len
            )));
        }
        if l == 0 {
            return Err(Error::invalid("empty token batch"));
        }
        let tok = g.param(ps, self.tok);
        let x = g.embedding(tok, &tokens.ids, &[b, l])?;
        let pos = g.param(ps, self.pos);
        let pos = g.narrow(pos, 0, 0, l)?;
        let mut x = g.add_broadcast(x, pos)?;
        let mask = Mask::keys(b, l, &tokens.valid);
        for blk in &self.blocks {
            x = blk.forward(g, ps, x, Some(&mask), None)?;
        }
        let x = self.ln.forward(g, ps, x)?;
        let first = g.narrow(x, 1, 0, 1)?;
        g.reshape(first, &[b, self.shape.d_model])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    pub vocab_size: usize,
    pub image_side: usize,
    pub patch: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_joint: usize,
    pub max_text_len: usize,
    pub seed: u64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            vocab_size: 8192,
            image_side: 32,
            patch: 4,
            d_model: 64,
            blocks: 2,
            heads: 4,
            d_ff: 256,
            d_joint: 64,
            max_text_len: crate::corpus::format::RETRIEVER_MAX_LEN,
            seed: 0,
        }
    }
}

pub const LOGIT_SCALE_INIT: f64 = 14.29;
pub const LOGIT_SCALE_MAX: f64 = 100.0;

/// Architecture of the dual encoder; parameter values live in a separate
/// [`ParamStore`] so the same forward code runs in f32 and f64.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub config: RetrieverConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    image_proj: Linear,
    text_proj: Linear,
    /// ln of the logit scale, shape `[1]`.
    pub log_scale: ParamId,
}

impl DualEncoder {
    pub fn new(config: RetrieverConfig) -> Result<(Self, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let vision = VisionEncoder::new(
            &mut ps,
            &mut rng,
            "vision",
            VisionShape {
                side: config.image_side,
                patch: config.patch,
                d_model: config.d_model,
                blocks: config.blocks,
                heads: config.heads,
                d_ff: config.d_ff,
            },
        )?;
        let text = TextEncoder::new(
            &mut ps,
            &mut rng,
            "text",
            TextShape {
                vocab_size: config.vocab_size,
                max_len: config.max_text_len,
                d_model: config.d_model,
                blocks: config.blocks,
                heads: config.heads,
                d_ff: config.d_ff,
            },
        );
        let image_proj = Linear::new(&mut ps, &mut rng, "image_proj", config.d_model, config.d_joint, true);
        let text_proj = Linear::new(&mut ps, &mut rng, "text_proj", config.d_model, config.d_joint, true);
        let log_scale = ps.add("log_scale", Tensor::full([1], LOGIT_SCALE_INIT.ln() as f32), false);
        Ok((
            DualEncoder {
                config,
                vision,
                text,
                image_proj,
                text_proj,
                log_scale,
            },
            ps,
        ))
    }

    /// Unit-norm `[B, d_joint]` image embeddings.
    pub fn embed_images<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, images: &ImageBatch) -> Result<Var> {
        let h = self.vision.forward(g, ps, images)?;
        let pooled = g.narrow(h, 1, 0, 1)?;
        let pooled = g.reshape(pooled, &[images.batch, self.config.d_model])?;
        let z = self.image_proj.forward(g, ps, pooled)?;
        g.l2_normalize(z)
    }

    /// Unit-norm `[B, d_joint]` history embeddings.
    pub fn embed_texts<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, tokens: &TokenBatch) -> Result<Var> {
        let h = self.text.forward(g, ps, tokens)?;
        let z = self.text_proj.forward(g, ps, h)?;
        g.l2_normalize(z)
    }

    /// Scaled `[B, B]` image-to-text similarity logits.
    pub fn logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        images: &ImageBatch,
        tokens: &TokenBatch,
    ) -> Result<Var> {
        let zi = self.embed_images(g, ps, images)?;
        let zt = self.embed_texts(g, ps, tokens)?;
        let sim = g.matmul(zi, zt, true)?;
        let ls = g.param(ps, self.log_scale);
        let scale = g.exp(ls)?;
        g.mul_scalar(sim, scale)
    }

    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        images: &ImageBatch,
        tokens: &TokenBatch,
    ) -> Result<Var> {
        let logits = self.logits(g, ps, images, tokens)?;
        super::loss::contrastive_loss_from_logits(g, logits)
    }
}

/// A dual encoder together with its parameter values.
#[derive(Clone, Debug)]
pub struct Retriever {
    pub net: DualEncoder,
    pub params: ParamStore,
}

/// Images and texts are encoded in chunks of this many rows at inference.
pub const ENCODE_CHUNK: usize = 32;

impl Retriever {
    pub fn new(config: RetrieverConfig) -> Result<Self> {
        let (net, params) = DualEncoder::new(config)?;
        Ok(Retriever { net, params })
    }

    pub fn config(&self) -> &RetrieverConfig {
        &self.net.config
    }

    pub fn logit_scale(&self) -> f32 {
        self.params.get(self.net.log_scale).value.data()[0].exp()
    }

    /// Keep the logit scale within [1, 100].
    pub fn clamp_logit_scale(&mut self) {
        let v = &mut self.params.get_mut(self.net.log_scale).value.data_mut()[0];
        *v = v.clamp(0.0, LOGIT_SCALE_MAX.ln() as f32);
    }

    pub fn encode_images(&self, images: &ImageBatch) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let z = self.net.embed_images(&mut g, &self.params, images)?;
        Ok(rows(g.value(z)))
    }

    pub fn encode_texts(&self, tokens: &TokenBatch) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let z = self.net.embed_texts(&mut g, &self.params, tokens)?;
        Ok(rows(g.value(z)))
    }

    pub fn encode_text(&self, ids: &[usize]) -> Result<Vec<f32>> {
        let tb = TokenBatch::pad(&[ids.to_vec()]);
        Ok(self.encode_texts(&tb)?.remove(0))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            &self.params,
            serde_json::json!({ "kind": "retriever", "model": self.net.config }),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config.get("kind").and_then(|k| k.as_str()) != Some("retriever") {
            return Err(Error::Checkpoint("not a retriever checkpoint".into()));
        }
        let config: RetrieverConfig = serde_json::from_value(ckpt.config["model"].clone())?;
        let mut r = Retriever::new(config)?;
        ckpt.load_into(&mut r.params)?;
        Ok(r)
    }

    /// Returns the model and the checkpoint fingerprint.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (ckpt, fp) = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ckpt)?, fp))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.checkpoint().save(path)
    }
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let d = t.last_dim();
    t.data().chunks(d).map(<[f32]>::to_vec).collect()
}
