#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use mmchat_chatd::{Engine, EngineConfig, ModelTag, RetrievalStack, SessionManager};
use mmchat_core::corpus::{ImageSource, Manifest, SyntheticSpec, Turn, Vocabulary};
use mmchat_core::generator::{Generator, GeneratorConfig, GeneratorMode};
use mmchat_core::retriever::{CandidateIndex, Retriever, RetrieverConfig};

pub const WORDS: &str = "hi hello my dog cat is cute look at this photo of a park beach cake nice wow red blue";
pub const FP: &str = "toy-retriever";

pub fn vocab() -> Vocabulary {
    Vocabulary::build([WORDS], 1, 64)
}

pub fn manifest() -> Manifest {
    let entries: BTreeMap<String, ImageSource> = ["img_a", "img_b", "img_c"]
        .iter()
        .enumerate()
        .map(|(i, id)| {
            (
                id.to_string(),
                ImageSource::Synthetic(SyntheticSpec::Blocks {
                    seed: i as u64,
                    grid: 4,
                }),
            )
        })
        .collect();
    Manifest::new(".", entries)
}

pub fn retriever() -> Retriever {
    Retriever::new(RetrieverConfig {
        vocab_size: vocab().len(),
        d_model: 32,
        d_ff: 64,
        d_joint: 16,
        max_text_len: 128,
        seed: 5,
        ..RetrieverConfig::default()
    })
    .unwrap()
}

pub fn generator(mode: GeneratorMode) -> Generator {
    Generator::new(GeneratorConfig {
        mode,
        vocab_size: vocab().len(),
        d_model: 32,
        d_ff: 64,
        max_positions: 96,
        seed: 7,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

pub fn index(ids: &[&str], embeddings: &[Vec<f32>]) -> CandidateIndex {
    let dim = embeddings[0].len();
    CandidateIndex::new(
        ids.iter().map(|s| s.to_string()).collect(),
        embeddings.concat(),
        dim,
        FP,
    )
    .unwrap()
}

pub fn engine_config(threshold: f32) -> EngineConfig {
    EngineConfig {
        threshold,
        max_new_tokens: 6,
        ..EngineConfig::default()
    }
}

/// An engine serving all three variants over `index`.
pub fn engine(index: CandidateIndex, threshold: f32) -> Engine {
    let stack = RetrievalStack::new(retriever(), FP, index).unwrap();
    Engine::new(vocab(), manifest(), Some(stack), engine_config(threshold))
        .with_variant(ModelTag::Unimodal, generator(GeneratorMode::Unimodal))
        .unwrap()
        .with_variant(ModelTag::UnimodalRetriever, generator(GeneratorMode::Unimodal))
        .unwrap()
        .with_variant(ModelTag::MultimodalRetriever, generator(GeneratorMode::Multimodal))
        .unwrap()
}

/// Query embedding for `history` under the toy retriever.
pub fn query(history: &[Turn]) -> Vec<f32> {
    let d = retriever().config().d_joint;
    engine(index(&["img_a"], &[vec![1.0; d]]), 0.15)
        .query_embedding(history)
        .unwrap()
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Unit vector whose cosine with each of `others` is at most `cap` while
/// staying as close to `target` as the cap allows. Untrained encoders give
/// highly correlated queries, so the purely orthogonal residual alone
/// would score too low against `target`.
pub fn separating_direction(target: &[f32], others: &[&[f32]], cap: f32) -> Vec<f32> {
    let mut basis: Vec<Vec<f32>> = Vec::new();
    for o in others {
        let mut v = o.to_vec();
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        basis.push(unit(v));
    }
    let mut inside = vec![0.0; target.len()];
    for b in &basis {
        let c = dot(target, b);
        inside.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
    }
    let resid = unit(target.iter().zip(&inside).map(|(t, i)| t - i).collect());
    let inside = unit(inside);
    let worst = others.iter().map(|o| dot(&inside, o)).fold(f32::MIN, f32::max);
    let b = if worst > 0.0 { (cap / worst).min(1.0) } else { 1.0 };
    let a = (1.0 - b * b).sqrt();
    unit(resid.iter().zip(&inside).map(|(r, i)| a * r + b * i).collect())
}

pub fn manager(dir: &std::path::Path, engine: Engine) -> SessionManager {
    SessionManager::open(dir, Arc::new(engine)).unwrap()
}
