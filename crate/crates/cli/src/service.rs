//! The chat service and its evaluation summary.

use std::sync::Arc;

use anyhow::{bail, Context};

use mmchat_chatd::{
    aggregate_eval, router, Engine, EngineConfig, ModelTag, RetrievalStack, ServiceEnv, SessionManager,
};
use mmchat_core::corpus::{Manifest, Vocabulary};
use mmchat_core::generator::Generator;
use mmchat_core::retriever::{CandidateIndex, Retriever};

use crate::{AggregateArgs, Ctx, ServeArgs};

fn build_engine(ctx: &Ctx, a: &ServeArgs) -> anyhow::Result<Engine> {
    if a.generator.len() != a.variant.len() {
        bail!(
            "{} --generator paths for {} --variant tags; give one checkpoint per variant",
            a.generator.len(),
            a.variant.len()
        );
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!("--threshold must lie in [0, 1], got {}", a.threshold);
    }
    let vocab = Vocabulary::load(&ctx.path(&a.vocab))?;
    let manifest = Manifest::load(&ctx.path(&a.manifest))?;
    let retrieval = match (&a.retriever, &a.index) {
        (Some(r), Some(i)) => {
            let (model, fp) = Retriever::load(&ctx.path(r))?;
            let index = CandidateIndex::load(&ctx.path(i))?;
            Some(RetrievalStack::new(model, &fp, index)?)
        }
        (None, None) => None,
        _ => bail!("--retriever and --index go together"),
    };
    let cfg = EngineConfig {
        threshold: a.threshold,
        top_p: a.top_p,
        max_new_tokens: a.max_new_tokens,
        seed: a.seed,
    };
    let mut engine = Engine::new(vocab, manifest, retrieval, cfg);
    for (tag, path) in a.variant.iter().zip(&a.generator) {
        let tag: ModelTag = tag.parse()?;
        let (generator, _) = Generator::load(&ctx.path(path))?;
        engine = engine.with_variant(tag, generator)?;
    }
    Ok(engine)
}

pub fn serve(ctx: &Ctx, a: &ServeArgs) -> anyhow::Result<i32> {
    let mut env = ServiceEnv::from_env().map_err(anyhow::Error::msg)?;
    if let Some(d) = &a.data_dir {
        env.data_dir = d.clone();
    }
    if let Some(p) = a.port {
        env.port = p;
    }
    let engine = build_engine(ctx, a)?;
    let tags: Vec<&str> = engine.tags().map(|t| t.as_str()).collect();
    log::info!("variants: {}", tags.join(", "));
    let manager = SessionManager::open(ctx.path(&env.sessions_dir()), Arc::new(engine))?;
    let static_dir = a.static_dir.as_ref().map(|p| ctx.path(p));
    let app = router(Arc::new(manager), static_dir.as_deref());
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting the async runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(env.addr())
            .await
            .with_context(|| format!("binding {}", env.addr()))?;
        mmchat_chatd::serve(listener, app).await.context("serving")
    })?;
    Ok(0)
}

pub fn aggregate(ctx: &Ctx, a: &AggregateArgs) -> anyhow::Result<i32> {
    let dir = match &a.results {
        Some(p) => ctx.path(p),
        None => ctx.path(&ServiceEnv::from_env().map_err(anyhow::Error::msg)?.sessions_dir()),
    };
    let summary = aggregate_eval(&dir)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print!("{}", summary.to_table());
    }
    Ok(0)
}
