//! Dataset preparation, training and offline evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use mmchat_core::corpus::{
    expand_generator_samples, expand_retriever_samples, load_photochat, preprocess_split, GeneratorSample, Manifest,
    RetrieverSample, SplitName, Vocabulary,
};
use mmchat_core::generator::Generator;
use mmchat_core::metrics::write_report;
use mmchat_core::numerics::checkpoint::fingerprint;
use mmchat_core::retriever::{CandidateIndex, RetrievalConfig, Retriever};
use mmchat_core::trainer::{
    evaluate_generation, evaluate_retrieval, train as run_training, GeneratorTask, RetrieverTask, Task,
    BEST_CHECKPOINT, LAST_CHECKPOINT, RUN_LOG,
};

use crate::config::RunConfig;
use crate::files::{read_jsonl, write_json, write_jsonl, RunManifest};
use crate::{Ctx, EvalArgs, PreprocessArgs, TaskArg, TrainArgs};

pub const VOCAB_FILE: &str = "vocab.json";
pub const STATS_FILE: &str = "stats.json";

/// `<split>.<kind>.jsonl`
pub fn split_file(dir: &Path, split: SplitName, kind: &str) -> PathBuf {
    dir.join(format!("{split}.{kind}.jsonl"))
}

#[derive(Debug, Serialize)]
struct SplitStats {
    loaded: usize,
    excluded_unavailable: usize,
    rejected: usize,
    dialogues: usize,
    retriever_samples: usize,
    generator_samples: usize,
    warnings: usize,
}

#[derive(Debug, Serialize)]
struct Stats {
    splits: BTreeMap<String, SplitStats>,
    vocab_size: usize,
}

#[derive(Debug, Serialize)]
struct Issue {
    level: &'static str,
    message: String,
}

fn find_split(dir: &Path, split: SplitName) -> Option<PathBuf> {
    let names: &[&str] = match split {
        SplitName::Validation => &["validation", "valid", "dev"],
        other => &[other.as_str()],
    };
    names.iter().find_map(|n| {
        let file = dir.join(format!("{n}.json"));
        let sub = dir.join(n);
        if file.is_file() {
            Some(file)
        } else if sub.is_dir() {
            Some(sub)
        } else {
            None
        }
    })
}

pub fn preprocess(ctx: &Ctx, a: &PreprocessArgs) -> anyhow::Result<i32> {
    let input = ctx.path(&a.input);
    let out = ctx.path(&a.out);
    let manifest_path = ctx.path(&a.manifest);
    let manifest = Manifest::load(&manifest_path)?;
    let sources: Vec<(SplitName, PathBuf)> = if input.is_file() {
        vec![(SplitName::Train, input.clone())]
    } else {
        SplitName::ALL
            .into_iter()
            .filter_map(|s| find_split(&input, s).map(|p| (s, p)))
            .collect()
    };
    if !sources.iter().any(|(s, _)| *s == SplitName::Train) {
        bail!("no train split under {}", input.display());
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut run = RunManifest::new(
        "preprocess",
        serde_json::json!({ "min_freq": a.min_freq, "max_vocab": a.max_vocab }),
    );
    run.input(&a.manifest, &manifest_path)?;
    let mut stats = BTreeMap::new();
    let mut vocab = None;
    for (split, path) in sources {
        let raw = load_photochat(&path, split)?;
        if path.is_file() {
            let given = a.input.join(path.file_name().expect("split files have names"));
            run.input(if input.is_file() { &a.input } else { &given }, &path)?;
        }
        let loaded = raw.dialogues.len();
        let outcome = preprocess_split(raw, |id| manifest.is_available(id));
        let (retriever, rw) = expand_retriever_samples(&outcome.split);
        let (generator, gw) = expand_generator_samples(&outcome.split);
        let issues: Vec<Issue> = outcome
            .errors
            .iter()
            .map(|e| Issue {
                level: "error",
                message: e.to_string(),
            })
            .chain(outcome.warnings.iter().chain(&rw).chain(&gw).map(|w| Issue {
                level: "warning",
                message: w.clone(),
            }))
            .collect();
        let files = [
            (
                split_file(&out, split, "dialogues"),
                serde_json::to_value(&outcome.split.dialogues)?,
            ),
            (split_file(&out, split, "retriever"), serde_json::to_value(&retriever)?),
            (split_file(&out, split, "generator"), serde_json::to_value(&generator)?),
            (split_file(&out, split, "issues"), serde_json::to_value(&issues)?),
        ];
        for (p, v) in &files {
            write_jsonl(p, v.as_array().expect("serialized lists"))?;
            run.output(p);
        }
        let s = SplitStats {
            loaded,
            excluded_unavailable: outcome.excluded_unavailable,
            rejected: outcome.errors.len(),
            dialogues: outcome.split.dialogues.len(),
            retriever_samples: retriever.len(),
            generator_samples: generator.len(),
            warnings: issues.len() - outcome.errors.len(),
        };
        println!(
            "{split}: {} loaded, {} without image, {} rejected, {} dialogues, {} retriever / {} generator samples",
            s.loaded, s.excluded_unavailable, s.rejected, s.dialogues, s.retriever_samples, s.generator_samples
        );
        stats.insert(split.to_string(), s);
        if split == SplitName::Train {
            let texts = outcome
                .split
                .dialogues
                .iter()
                .flat_map(|d| d.turns.iter().map(|t| t.text.as_str()));
            vocab = Some(Vocabulary::build(texts, a.min_freq, a.max_vocab));
        }
    }
    let vocab = vocab.expect("train split present");
    let vocab_path = out.join(VOCAB_FILE);
    vocab.save(&vocab_path)?;
    run.output(&vocab_path);
    let stats_path = out.join(STATS_FILE);
    write_json(
        &stats_path,
        &Stats {
            splits: stats,
            vocab_size: vocab.len(),
        },
    )?;
    run.output(&stats_path);
    run.write(&out)?;
    println!("vocabulary: {} tokens", vocab.len());
    Ok(0)
}

fn load_manifest(ctx: &Ctx, p: Option<&PathBuf>) -> anyhow::Result<Option<(Manifest, PathBuf)>> {
    p.map(|p| {
        let r = ctx.path(p);
        Ok((Manifest::load(&r)?, r))
    })
    .transpose()
}

fn read_optional<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    if path.is_file() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

fn file_fingerprint(path: &Path) -> anyhow::Result<String> {
    Ok(fingerprint(
        &std::fs::read(path).with_context(|| format!("reading {}", path.display()))?,
    ))
}

pub fn train(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<i32> {
    let config_path = a.config.as_ref().map(|p| ctx.path(p));
    let cfg = RunConfig::load(config_path.as_deref(), a.task.map(Task::from))?;
    if a.print_config {
        print!("{}", cfg.to_toml());
        return Ok(0);
    }
    let data = ctx.path(a.data.as_ref().expect("required by clap"));
    let out = ctx.path(a.out.as_ref().expect("required by clap"));
    let vocab_path = data.join(VOCAB_FILE);
    let vocab = Vocabulary::load(&vocab_path)?;
    let manifest = load_manifest(ctx, a.manifest.as_ref())?;

    let mut run = RunManifest::new("train", serde_json::to_value(&cfg)?);
    if let Some(p) = &config_path {
        run.input(a.config.as_ref().expect("set"), p)?;
    }
    run.input(&a.data.as_ref().expect("set").join(VOCAB_FILE), &vocab_path)?;
    if let (Some((_, p)), Some(given)) = (&manifest, &a.manifest) {
        run.input(given, p)?;
    }
    let kind = match cfg.train.task {
        Task::Retriever => "retriever",
        Task::Generator => "generator",
    };
    let train_path = split_file(&data, SplitName::Train, kind);
    let eval_path = split_file(&data, SplitName::Validation, kind);
    run.input(
        &split_file(a.data.as_ref().expect("set"), SplitName::Train, kind),
        &train_path,
    )?;
    if eval_path.is_file() {
        run.input(
            &split_file(a.data.as_ref().expect("set"), SplitName::Validation, kind),
            &eval_path,
        )?;
    }

    let steps = match cfg.train.task {
        Task::Retriever => {
            let (manifest, _) = manifest
                .as_ref()
                .context("--manifest is required to train a retriever")?;
            let train_set: Vec<RetrieverSample> = read_jsonl(&train_path)?;
            let eval_set: Vec<RetrieverSample> = read_optional(&eval_path)?;
            let mut rc = cfg.retriever.clone();
            rc.vocab_size = vocab.len();
            let mut task = RetrieverTask::new(Retriever::new(rc)?, &vocab, manifest);
            let outcome = run_training(&mut task, &train_set, &eval_set, &cfg.train, Some(&out))?;
            let best = Retriever::from_checkpoint(&outcome.best)?;
            let fp = file_fingerprint(&out.join(BEST_CHECKPOINT))?;
            let report_set = if eval_set.is_empty() { &train_set } else { &eval_set };
            let report = evaluate_retrieval(
                &best,
                &fp,
                report_set,
                &vocab,
                manifest,
                None,
                &RetrievalConfig::default(),
            )?;
            write_report(&out, &report, &report.csv_header(), &report.csv_row())?;
            println!("{}\n{}", report.csv_header(), report.csv_row());
            (outcome.total_steps, outcome.best_step)
        }
        Task::Generator => {
            let train_set: Vec<GeneratorSample> = read_jsonl(&train_path)?;
            let eval_set: Vec<GeneratorSample> = read_optional(&eval_path)?;
            let mut gc = cfg.generator.clone();
            gc.vocab_size = vocab.len();
            let model = Generator::new(gc)?;
            if model.net.is_multimodal() && manifest.is_none() {
                bail!("--manifest is required to train a multimodal generator");
            }
            let images = manifest.as_ref().map(|(m, _)| m);
            let mut task = GeneratorTask::new(model, &vocab, images);
            let outcome = run_training(&mut task, &train_set, &eval_set, &cfg.train, Some(&out))?;
            let best = Generator::from_checkpoint(&outcome.best)?;
            let fp = file_fingerprint(&out.join(BEST_CHECKPOINT))?;
            let report_set = if eval_set.is_empty() { &train_set } else { &eval_set };
            let report = evaluate_generation(&best, &fp, report_set, &vocab, images, cfg.train.eval_batch, 40)?;
            write_report(&out, &report, report.csv_header(), &report.csv_row())?;
            println!("{}\n{}", report.csv_header(), report.csv_row());
            (outcome.total_steps, outcome.best_step)
        }
    };
    for name in [BEST_CHECKPOINT, LAST_CHECKPOINT, RUN_LOG, "report.json", "report.csv"] {
        run.output(&out.join(name));
    }
    run.write(&out)?;
    println!("{kind}: {} steps, best checkpoint at step {}", steps.0, steps.1);
    Ok(0)
}

pub fn eval(ctx: &Ctx, a: &EvalArgs) -> anyhow::Result<i32> {
    let split: SplitName = a.split.parse().map_err(anyhow::Error::msg)?;
    let data = ctx.path(&a.data);
    let out = ctx.path(&a.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let vocab = Vocabulary::load(&data.join(VOCAB_FILE))?;
    let manifest = load_manifest(ctx, a.manifest.as_ref())?;
    let ckpt = ctx.path(&a.checkpoint);
    let mut run = RunManifest::new(
        "eval",
        serde_json::json!({ "split": split, "ks": a.ks, "eval_batch": a.eval_batch, "max_new_tokens": a.max_new_tokens }),
    );
    run.input(&a.checkpoint, &ckpt)?;
    match a.task {
        TaskArg::Retriever => {
            let (manifest, _) = manifest
                .as_ref()
                .context("--manifest is required to evaluate a retriever")?;
            let path = split_file(&data, split, "retriever");
            run.input(&split_file(&a.data, split, "retriever"), &path)?;
            let samples: Vec<RetrieverSample> = read_jsonl(&path)?;
            let (model, fp) = Retriever::load(&ckpt)?;
            let index = match &a.index {
                Some(p) => {
                    let r = ctx.path(p);
                    run.input(p, &r)?;
                    Some(CandidateIndex::load(&r)?)
                }
                None => None,
            };
            let cfg = RetrievalConfig {
                ks: a.ks.clone(),
                ..RetrievalConfig::default()
            };
            let report = evaluate_retrieval(&model, &fp, &samples, &vocab, manifest, index.as_ref(), &cfg)?;
            write_report(&out, &report, &report.csv_header(), &report.csv_row())?;
            println!("{}\n{}", report.csv_header(), report.csv_row());
        }
        TaskArg::Generator => {
            let path = split_file(&data, split, "generator");
            run.input(&split_file(&a.data, split, "generator"), &path)?;
            let samples: Vec<GeneratorSample> = read_jsonl(&path)?;
            let (model, fp) = Generator::load(&ckpt)?;
            let images = manifest.as_ref().map(|(m, _)| m);
            let report = evaluate_generation(&model, &fp, &samples, &vocab, images, a.eval_batch, a.max_new_tokens)?;
            write_report(&out, &report, report.csv_header(), &report.csv_row())?;
            println!("{}\n{}", report.csv_header(), report.csv_row());
        }
    }
    run.output(&out.join("report.json"));
    run.output(&out.join("report.csv"));
    run.write(&out)?;
    Ok(0)
}
