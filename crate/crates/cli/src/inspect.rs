//! Index building and single-history queries against checkpoints.

use anyhow::{bail, Context};

use mmchat_core::corpus::{
    format_generation_prompt, format_retriever_text, ImageKey, Manifest, PixelImage, RetrieverSample, Speaker,
    Vocabulary,
};
use mmchat_core::generator::{Generator, SamplingConfig};
use mmchat_core::retriever::{build_index as embed_candidates, rank as rank_candidates, CandidateIndex, Retriever};

use crate::files::{read_history, read_jsonl, write_json, RunManifest, RUN_MANIFEST};
use crate::{BuildIndexArgs, Ctx, GenerateArgs, RankArgs, StrategyArg};

pub fn build_index(ctx: &Ctx, a: &BuildIndexArgs) -> anyhow::Result<i32> {
    let ckpt = ctx.path(&a.retriever);
    let manifest_path = ctx.path(&a.manifest);
    let out = ctx.path(&a.out);
    let (model, fp) = Retriever::load(&ckpt)?;
    let manifest = Manifest::load(&manifest_path)?;
    let mut run = RunManifest::new("build-index", serde_json::json!({ "only": a.only }));
    run.input(&a.retriever, &ckpt)?;
    run.input(&a.manifest, &manifest_path)?;
    let only = match &a.only {
        Some(p) => {
            let r = ctx.path(p);
            run.input(p, &r)?;
            let samples: Vec<RetrieverSample> = read_jsonl(&r)?;
            let mut ids: Vec<String> = samples.into_iter().map(|s| s.gold_image).collect();
            ids.sort();
            ids.dedup();
            Some(ids)
        }
        None => None,
    };
    let (index, skipped) = embed_candidates(&model, &fp, &manifest, only.as_deref())?;
    for (id, e) in &skipped {
        log::warn!("skipped {id}: {e}");
    }
    if index.is_empty() {
        bail!("no candidate image could be embedded");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    index.save(&out)?;
    run.output(&out);
    // Beside the index, so a training run's manifest in the same directory survives.
    write_json(&out.with_extension(RUN_MANIFEST), &run)?;
    println!(
        "indexed {} images ({} skipped), dim {}",
        index.len(),
        skipped.len(),
        index.dim
    );
    Ok(0)
}

pub fn rank(ctx: &Ctx, a: &RankArgs) -> anyhow::Result<i32> {
    let (model, fp) = Retriever::load(&ctx.path(&a.retriever))?;
    let index = CandidateIndex::load(&ctx.path(&a.index))?;
    index.check_encoder(&fp)?;
    let vocab = Vocabulary::load(&ctx.path(&a.vocab))?;
    let history = read_history(&ctx.path(&a.history))?;
    let ids = format_retriever_text(&history, &vocab, model.config().max_text_len);
    let query = model.encode_text(&ids)?;
    let ranked = rank_candidates(&index, &query)?;
    for (r, (&pos, score)) in ranked.order.iter().zip(&ranked.scores).take(a.topk).enumerate() {
        println!("{}\t{}\t{score:.4}", r + 1, index.ids[pos]);
    }
    Ok(0)
}

pub fn generate(ctx: &Ctx, a: &GenerateArgs) -> anyhow::Result<i32> {
    let (model, _) = Generator::load(&ctx.path(&a.generator))?;
    let vocab = Vocabulary::load(&ctx.path(&a.vocab))?;
    if vocab.len() != model.config().vocab_size {
        bail!(
            "vocabulary has {} tokens but the generator expects {}",
            vocab.len(),
            model.config().vocab_size
        );
    }
    let history = read_history(&ctx.path(&a.history))?;
    let side = model.config().image_side;
    let image = if model.net.is_multimodal() {
        Some(match &a.image {
            Some(id) => {
                let manifest = a.manifest.as_ref().context("--image needs --manifest")?;
                Manifest::load(&ctx.path(manifest))?.load_pixels(&ImageKey::Id(id.clone()), side)?
            }
            None => PixelImage::dummy(side),
        })
    } else {
        if a.image.is_some() {
            log::warn!("unimodal generator: --image ignored");
        }
        None
    };
    let max_pos = model.config().max_positions;
    let budget = max_pos - a.max_new_tokens.min(max_pos / 2);
    let prompt = format_generation_prompt(&history, Speaker::Bot, &vocab, budget);
    let base = match a.strategy {
        StrategyArg::Greedy => SamplingConfig::greedy(),
        StrategyArg::Nucleus => SamplingConfig::nucleus(a.top_p, a.seed),
    };
    let cfg = SamplingConfig {
        max_new_tokens: a.max_new_tokens,
        ..base
    };
    let ids = model.generate(&prompt, image.as_ref(), &cfg)?;
    println!("{}", vocab.decode_text(&ids));
    Ok(0)
}
