use std::collections::BTreeMap;

use mmchat_core::corpus::image::{ImageSource, Manifest, SyntheticSpec};
use mmchat_core::corpus::types::{GeneratorSample, ImageKey, RetrieverSample, Speaker, Turn};
use mmchat_core::corpus::vocab::Vocabulary;
use mmchat_core::generator::{Generator, GeneratorConfig, GeneratorMode};
use mmchat_core::numerics::{AdamWConfig, ParamStore};
use mmchat_core::retriever::{RetrievalConfig, Retriever, RetrieverConfig};
use mmchat_core::trainer::{
    evaluate_generation, evaluate_retrieval, select_best_checkpoint, train, GeneratorTask, RetrieverTask, TrainConfig,
    BEST_CHECKPOINT, LAST_CHECKPOINT, RUN_LOG,
};
use mmchat_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] = [
    "dog", "cat", "park", "cake", "beach", "red", "blue", "green", "run", "sit", "big", "small",
];

fn gen_samples(n: usize, offset: usize) -> Vec<GeneratorSample> {
    (0..n)
        .map(|i| {
            let k = i + offset;
            GeneratorSample {
                dialogue_id: format!("g{k}"),
                history: vec![Turn::text(
                    Speaker::User,
                    format!("{} {}", WORDS[k % 12], WORDS[(k * 5 + 1) % 12]),
                )],
                response: Turn::text(
                    Speaker::Bot,
                    format!(
                        "{} {} {}",
                        WORDS[(k * 7 + 3) % 12],
                        WORDS[(k / 3) % 12],
                        WORDS[(k * 11) % 12]
                    ),
                ),
                conditioning_image: ImageKey::Dummy,
            }
        })
        .collect()
}

/// Pairs whose responses are unrelated to their history.
fn random_samples(n: usize, seed: u64) -> Vec<GeneratorSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = |k: usize| -> String {
        (0..k)
            .map(|_| WORDS[rng.random_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    (0..n)
        .map(|i| GeneratorSample {
            dialogue_id: format!("x{seed}_{i}"),
            history: vec![Turn::text(Speaker::User, words(2))],
            response: Turn::text(Speaker::Bot, words(4)),
            conditioning_image: ImageKey::Dummy,
        })
        .collect()
}

fn vocab() -> Vocabulary {
    Vocabulary::build(WORDS, 1, 64)
}

fn small_gen(v: &Vocabulary) -> Generator {
    Generator::new(GeneratorConfig {
        vocab_size: v.len(),
        d_model: 32,
        d_ff: 64,
        max_positions: 32,
        seed: 1,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn gen_cfg(per_device: usize, accumulation: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: per_device * accumulation,
        per_device_batch: per_device,
        accumulation,
        optimizer: AdamWConfig {
            lr: 2e-3,
            ..AdamWConfig::default()
        },
        eval_interval: 4,
        log_interval: 2,
        log_window: 32,
        seed: 3,
        ..TrainConfig::generator()
    }
}

fn max_diff(a: &ParamStore, b: &ParamStore) -> f32 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, p), (_, q))| p.value.data().iter().zip(q.value.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f32::max)
}

#[test]
fn gradient_accumulation_matches_full_batch() {
    let v = vocab();
    let data = gen_samples(48, 0);
    let mut direct = GeneratorTask::new(small_gen(&v), &v, None);
    let mut accum = GeneratorTask::new(small_gen(&v), &v, None);
    let base = |pd, acc| TrainConfig {
        optimizer: AdamWConfig::default(),
        ..gen_cfg(pd, acc, 1)
    };
    for epoch in 1..=3 {
        train(&mut direct, &data, &[], &base(16, 1), None).unwrap();
        train(&mut accum, &data, &[], &base(4, 4), None).unwrap();
        let d = max_diff(&direct.model.params, &accum.model.params);
        assert!(d < 1e-5, "epoch {epoch}: trajectories differ by {d}");
    }
}

#[test]
fn zero_epochs_write_only_the_initial_checkpoint() {
    let v = vocab();
    let mut task = GeneratorTask::new(small_gen(&v), &v, None);
    let before = task.model.params.clone();
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &mut task,
        &gen_samples(8, 0),
        &gen_samples(4, 50),
        &gen_cfg(4, 1, 0),
        Some(dir.path()),
    )
    .unwrap();
    assert!(out.log.rows.is_empty());
    assert_eq!(out.total_steps, 0);
    assert!(dir.path().join(LAST_CHECKPOINT).is_file());
    assert!(dir.path().join(BEST_CHECKPOINT).is_file());
    let (g, _) = Generator::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(max_diff(&g.params, &before), 0.0);
}

#[test]
fn seeded_runs_are_identical_and_rows_follow_intervals() {
    let v = vocab();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut task = GeneratorTask::new(small_gen(&v), &v, None);
        let out = train(
            &mut task,
            &gen_samples(40, 0),
            &gen_samples(8, 100),
            &gen_cfg(8, 1, 3),
            Some(dir.path()),
        )
        .unwrap();
        let ckpt = std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();
        let logged = std::fs::read_to_string(dir.path().join(RUN_LOG)).unwrap();
        (out, ckpt, logged)
    };
    let (a, ca, la) = run();
    let (b, cb, _) = run();
    assert_eq!(a.log.to_jsonl(false).unwrap(), b.log.to_jsonl(false).unwrap());
    assert_eq!(ca, cb);
    assert_eq!(la.lines().count(), a.log.rows.len());
    assert_eq!(a.total_steps, 15);
    let steps: Vec<usize> = a.log.rows.iter().map(|r| r.step).collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    let evals: Vec<usize> = a.log.eval_rows().map(|(s, _)| s).collect();
    assert_eq!(evals, vec![4, 8, 12, 15]);
    assert_eq!(steps, vec![2, 4, 6, 8, 10, 12, 14, 15]);
    assert!(a.log.rows.iter().all(|r| r.train_loss.is_some()));
}

#[test]
fn non_finite_loss_aborts_with_batch_ids() {
    let v = vocab();
    let mut g = small_gen(&v);
    let tok = g.params.id("tok").unwrap();
    g.params.get_mut(tok).value.data_mut()[v.id("dog") * 32] = f32::INFINITY;
    let mut task = GeneratorTask::new(g, &v, None);
    let data = gen_samples(4, 0);
    match train(&mut task, &data, &[], &gen_cfg(4, 1, 1), None) {
        Err(Error::NonFiniteLoss { step, batch_ids }) => {
            assert_eq!(step, 1);
            let mut ids = batch_ids.clone();
            ids.sort();
            assert_eq!(ids, vec!["g0", "g1", "g2", "g3"]);
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn overfitting_is_visible_and_best_checkpoint_precedes_it() {
    let v = vocab();
    let mut task = GeneratorTask::new(small_gen(&v), &v, None);
    let mut cfg = gen_cfg(8, 1, 60);
    cfg.eval_interval = 5;
    cfg.optimizer.lr = 3e-3;
    let train_set = random_samples(16, 0);
    let eval_set = random_samples(16, 1);
    let out = train(&mut task, &train_set, &eval_set, &cfg, None).unwrap();
    let evals: Vec<(usize, f64)> = out.log.eval_rows().collect();
    let best = select_best_checkpoint(&out.log).unwrap();
    assert_eq!(best, out.best_step);
    let (_, best_loss) = evals.iter().copied().find(|&(s, _)| s == best).unwrap();
    let (last_step, last_loss) = *evals.last().unwrap();
    assert!(best < last_step, "validation loss never rose");
    assert!(last_loss > best_loss);
    let first_train = out.log.rows.first().unwrap().train_loss.unwrap();
    let last_train = out.log.rows.last().unwrap().train_loss.unwrap();
    assert!(last_train < first_train * 0.5);
    // The in-memory best checkpoint has the best validation loss.
    let best_model = Generator::from_checkpoint(&out.best).unwrap();
    let check = GeneratorTask::new(best_model, &v, None);
    use mmchat_core::trainer::Trainable;
    let l = check.eval_loss(&eval_set, 4).unwrap();
    assert!((l - best_loss).abs() < 1e-4);
}

#[test]
fn overfitted_generator_scores_full_bleu_on_memorised_pairs() {
    let v = vocab();
    let mut task = GeneratorTask::new(small_gen(&v), &v, None);
    let data = gen_samples(6, 0);
    let mut cfg = gen_cfg(6, 1, 150);
    cfg.optimizer.lr = 3e-3;
    cfg.eval_interval = 1000;
    train(&mut task, &data, &[], &cfg, None).unwrap();
    let r = evaluate_generation(&task.model, "fp", &data, &v, None, 4, 10).unwrap();
    assert_eq!(r.bleu1, 1.0, "{r:?}");
    assert!(r.ppl < 1.2);
    assert_eq!(r.samples, 6);
}

fn blocks_manifest(n: usize) -> Manifest {
    let entries: BTreeMap<String, ImageSource> = (0..n)
        .map(|i| {
            (
                format!("img{i:02}"),
                ImageSource::Synthetic(SyntheticSpec::Blocks {
                    seed: i as u64,
                    grid: 4,
                }),
            )
        })
        .collect();
    Manifest::new(".", entries)
}

fn ret_samples(n: usize) -> Vec<RetrieverSample> {
    (0..n)
        .map(|i| RetrieverSample {
            dialogue_id: format!("r{i}"),
            history: vec![Turn::text(
                Speaker::User,
                format!("{} {}", WORDS[i % 12], WORDS[(i / 12 + 3) % 12]),
            )],
            gold_image: format!("img{i:02}"),
        })
        .collect()
}

#[test]
fn retriever_evaluation_and_fingerprints() {
    let v = vocab();
    let m = blocks_manifest(4);
    let r = Retriever::new(RetrieverConfig {
        vocab_size: v.len(),
        max_text_len: 32,
        ..RetrieverConfig::default()
    })
    .unwrap();
    let one = &ret_samples(1);
    let rep = evaluate_retrieval(&r, "fp", one, &v, &m, None, &RetrievalConfig::default()).unwrap();
    assert_eq!(rep.recall_at(1), Some(1.0));
    assert_eq!(rep.candidates, 1);
    let all = ret_samples(4);
    let rep = evaluate_retrieval(&r, "fp", &all, &v, &m, None, &RetrievalConfig::default()).unwrap();
    assert_eq!(rep.candidates, 4);
    assert!(rep.recall_at(1).unwrap() <= rep.recall_at(5).unwrap());
    assert!(rep.mrr >= rep.recall_at(1).unwrap());
    let (ix, _) = mmchat_core::retriever::build_index(&r, "other", &m, None).unwrap();
    let err = evaluate_retrieval(&r, "fp", &all, &v, &m, Some(&ix), &RetrievalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch { .. }));
}

#[test]
fn retriever_training_lowers_the_loss_and_keeps_scale_in_range() {
    let v = vocab();
    let m = blocks_manifest(8);
    let r = Retriever::new(RetrieverConfig {
        vocab_size: v.len(),
        max_text_len: 32,
        ..RetrieverConfig::default()
    })
    .unwrap();
    let mut task = RetrieverTask::new(r, &v, &m);
    let data = ret_samples(8);
    let cfg = TrainConfig {
        epochs: 120,
        batch_size: 8,
        per_device_batch: 4,
        accumulation: 2,
        eval_batch: 8,
        eval_interval: 40,
        log_interval: 10,
        warmup_steps: 20,
        optimizer: AdamWConfig {
            lr: 5e-4,
            ..AdamWConfig::default()
        },
        ..TrainConfig::retriever()
    };
    let out = train(&mut task, &data, &data, &cfg, None).unwrap();
    let evals: Vec<f64> = out.log.eval_rows().map(|(_, l)| l).collect();
    assert!(evals.last().unwrap() < &(evals[0] * 0.2), "{evals:?}");
    let s = task.model.logit_scale();
    assert!((1.0..=100.0).contains(&s));
}

#[test]
fn config_validation_rejects_inconsistent_batches() {
    let mut c = TrainConfig::retriever();
    c.accumulation = 2;
    assert!(c.validate().is_err());
    assert!(TrainConfig::generator().validate().is_ok());
    assert_eq!(TrainConfig::generator().eval_batch, 4);
    assert_eq!(TrainConfig::retriever().epochs, 10);
    let _ = GeneratorMode::Unimodal;
}
