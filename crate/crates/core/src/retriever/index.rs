use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::collate::ImageBatch;
use crate::corpus::image::Manifest;
use crate::corpus::types::ImageKey;
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Tensor};

use super::model::{Retriever, ENCODE_CHUNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub threshold: f32,
    pub ks: Vec<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            threshold: 0.15,
            ks: vec![1, 5, 10],
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.ks.contains(&0) {
            return Err(Error::invalid("recall K must be at least 1"));
        }
        Ok(())
    }
}

/// Precomputed unit-norm image embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateIndex {
    pub ids: Vec<String>,
    /// Row-major `[n, dim]`.
    pub embeddings: Vec<f32>,
    pub dim: usize,
    /// Fingerprint of the encoder checkpoint that produced the embeddings.
    pub encoder_fingerprint: String,
}

impl CandidateIndex {
    pub fn new(
        ids: Vec<String>,
        embeddings: Vec<f32>,
        dim: usize,
        encoder_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if embeddings.len() != ids.len() * dim {
            return Err(Error::shape(
                "candidate_index",
                format!("{} values for {} ids of dim {dim}", embeddings.len(), ids.len()),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::invalid(format!("duplicate candidate id {dup}")));
        }
        Ok(CandidateIndex {
            ids,
            embeddings,
            dim,
            encoder_fingerprint: encoder_fingerprint.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: serde_json::json!({
                "kind": "candidate_index",
                "ids": self.ids,
                "dim": self.dim,
                "encoder_fingerprint": self.encoder_fingerprint,
            }),
            tensors: vec![(
                "embeddings".into(),
                Tensor::new([self.ids.len(), self.dim], self.embeddings.clone())?,
            )],
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let c = &ckpt.config;
        if c.get("kind").and_then(|k| k.as_str()) != Some("candidate_index") {
            return Err(Error::Checkpoint("not a candidate index".into()));
        }
        let ids: Vec<String> = serde_json::from_value(c["ids"].clone())?;
        let dim: usize = serde_json::from_value(c["dim"].clone())?;
        let fp: String = serde_json::from_value(c["encoder_fingerprint"].clone())?;
        let emb = ckpt
            .tensor("embeddings")
            .ok_or_else(|| Error::Checkpoint("index has no embeddings tensor".into()))?;
        CandidateIndex::new(ids, emb.data().to_vec(), dim, fp)
    }

    /// Returns the file fingerprint.
    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ckpt, _) = Checkpoint::load(path)?;
        Self::from_checkpoint(&ckpt)
    }

    /// Error unless the index was built by the checkpoint with `fingerprint`.
    pub fn check_encoder(&self, fingerprint: &str) -> Result<()> {
        if self.encoder_fingerprint != fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: fingerprint.to_string(),
                found: self.encoder_fingerprint.clone(),
            });
        }
        Ok(())
    }
}

/// Encode every manifest image in id order. Images that fail to load are
/// left out and returned alongside the index.
pub fn build_index(
    model: &Retriever,
    encoder_fingerprint: &str,
    manifest: &Manifest,
    only: Option<&[String]>,
) -> Result<(CandidateIndex, Vec<(String, Error)>)> {
    let side = model.config().image_side;
    let wanted: Vec<String> = match only {
        Some(ids) => {
            let mut v = ids.to_vec();
            v.sort();
            v.dedup();
            v
        }
        None => manifest.ids().map(str::to_string).collect(),
    };
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for id in wanted {
        match manifest.load_pixels(&ImageKey::Id(id.clone()), side) {
            Ok(im) => {
                ids.push(id);
                images.push(im);
            }
            Err(e) => {
                warn!("excluding image {id} from the index: {e}");
                failures.push((id, e));
            }
        }
    }
    let dim = model.config().d_joint;
    let mut embeddings = Vec::with_capacity(ids.len() * dim);
    for chunk in images.chunks(ENCODE_CHUNK) {
        for row in model.encode_images(&ImageBatch::stack(chunk))? {
            embeddings.extend(row);
        }
    }
    Ok((
        CandidateIndex::new(ids, embeddings, dim, encoder_fingerprint)?,
        failures,
    ))
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Candidates sorted by cosine score, highest first; equal scores keep
/// index order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    /// Index positions in ranked order.
    pub order: Vec<usize>,
    /// Scores in ranked order.
    pub scores: Vec<f32>,
}

impl RankedList {
    /// 1-based rank of index position `pos`.
    pub fn rank_of(&self, pos: usize) -> Option<usize> {
        self.order.iter().position(|&p| p == pos).map(|r| r + 1)
    }

    pub fn top(&self) -> Option<(usize, f32)> {
        self.order.first().map(|&p| (p, self.scores[0]))
    }
}

pub fn rank(index: &CandidateIndex, query: &[f32]) -> Result<RankedList> {
    if query.len() != index.dim {
        return Err(Error::shape(
            "rank",
            format!("query dim {} vs index dim {}", query.len(), index.dim),
        ));
    }
    let raw: Vec<f32> = (0..index.len()).map(|i| dot(index.embedding(i), query)).collect();
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));
    let scores = order.iter().map(|&i| raw[i]).collect();
    Ok(RankedList { order, scores })
}

/// The best candidate when its raw cosine exceeds `threshold`.
pub fn retrieve_top1(index: &CandidateIndex, query: &[f32], threshold: f32) -> Result<Option<(String, f32)>> {
    if index.is_empty() {
        warn!("retrieval against an empty index");
        return Ok(None);
    }
    let ranked = rank(index, query)?;
    Ok(ranked
        .top()
        .filter(|&(_, s)| s > threshold)
        .map(|(p, s)| (index.ids[p].clone(), s)))
}
