mod common;

use std::sync::Arc;

use mmchat_chatd::{
    aggregate_eval, ChatError, Engine, ModelTag, RetrievalStack, SessionEval, SessionManager, SessionRecord, TurnEval,
};
use mmchat_core::corpus::{ImageKey, Speaker, Turn};
use mmchat_core::generator::GeneratorMode;

use common::*;

const U: [&str; 6] = [
    "hi my dog is cute",
    "look at this photo of a park",
    "nice cake",
    "wow red",
    "blue beach",
    "hello cat",
];

fn user(t: &str) -> Turn {
    Turn::text(Speaker::User, t)
}

fn bot(t: &str) -> Turn {
    Turn::text(Speaker::Bot, t)
}

/// Index over `img_a` (and its antipode `img_b`) whose similarity clears
/// the threshold for the second exchange of the `U` script only.
fn scripted_index() -> mmchat_core::retriever::CandidateIndex {
    let d = retriever().config().d_joint;
    let any = index(&["img_a"], &[vec![1.0; d]]);
    let tag = ModelTag::MultimodalRetriever;
    let never = engine(any.clone(), 2.0);
    let always = engine(any, -2.0);
    let b1 = never.respond(tag, &[user(U[0])], &[], never.turn_seed(0)).unwrap();
    assert_eq!(b1.conditioning, Some(ImageKey::Dummy));
    let h2 = vec![user(U[0]), bot(&b1.response), user(U[1])];
    let b2 = always.respond(tag, &h2, &[], always.turn_seed(1)).unwrap();
    assert_eq!(b2.conditioning, Some(ImageKey::Id("img_a".into())));
    let mut h3 = h2.clone();
    h3.extend([bot(&b2.response), user(U[2])]);
    let (q1, q2, q3) = (query(&h2[..1]), query(&h2), query(&h3));
    let e = separating_direction(&q2, &[&q1, &q3], 0.12);
    let cos = |q: &[f32]| q.iter().zip(&e).map(|(x, y)| x * y).sum::<f32>();
    assert!(
        cos(&q1) < 0.13 && cos(&q3) < 0.13 && cos(&q2) > 0.17,
        "{} {} {}",
        cos(&q1),
        cos(&q2),
        cos(&q3)
    );
    let neg: Vec<f32> = e.iter().map(|x| -x).collect();
    index(&["img_a", "img_b"], &[e, neg])
}

#[test]
fn scripted_session_exercises_every_conditioning_branch() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), engine(scripted_index(), 0.15));
    let id = m.create(ModelTag::MultimodalRetriever).unwrap();
    let r1 = m.handle_message(&id, U[0]).unwrap();
    assert_eq!(r1.image, None);
    assert_eq!(r1.conditioning, Some(ImageKey::Dummy));
    let r2 = m.handle_message(&id, U[1]).unwrap();
    let (img, score) = r2.image.clone().unwrap();
    assert_eq!(img, "img_a");
    assert!(score > 0.15);
    assert_eq!(r2.conditioning, Some(ImageKey::Id("img_a".into())));
    let r3 = m.handle_message(&id, U[2]).unwrap();
    assert_eq!(r3.image, None);
    assert_eq!(r3.conditioning, Some(ImageKey::Id("img_a".into())));
    for text in &U[3..] {
        let before = m.get(&id).unwrap().queue();
        let r = m.handle_message(&id, text).unwrap();
        let expected = match &r.image {
            Some((i, s)) => {
                assert!(*s > 0.15);
                ImageKey::Id(i.clone())
            }
            None => ImageKey::Id(before.last().unwrap().clone()),
        };
        assert_eq!(r.conditioning, Some(expected));
    }
    let rec = m.get(&id).unwrap();
    assert_eq!(rec.turns.len(), 12);
    assert!(rec.turns.iter().step_by(2).all(|t| t.speaker == Speaker::User));
    assert_eq!(rec.turns[3].image_id.as_deref(), Some("img_a"));
    assert_eq!(rec.queue()[0], "img_a");
    assert_eq!(SessionRecord::load(&m.path_of(&id)).unwrap(), rec);
}

#[test]
fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (id, before) = {
        let m = manager(dir.path(), engine(scripted_index(), 0.15));
        let id = m.create(ModelTag::MultimodalRetriever).unwrap();
        m.handle_message(&id, U[0]).unwrap();
        m.handle_message(&id, U[1]).unwrap();
        m.record_turn_eval(
            &id,
            TurnEval {
                turn: 3,
                fluency: 4,
                coherence: 3,
                image_groundedness: Some(5),
            },
        )
        .unwrap();
        (id.clone(), m.get(&id).unwrap())
    };
    let m = manager(dir.path(), engine(scripted_index(), 0.15));
    assert_eq!(m.len(), 1);
    assert_eq!(m.get(&id).unwrap(), before);
    // The queue is rebuilt from the file, so the fallback still applies.
    let r3 = m.handle_message(&id, U[2]).unwrap();
    assert_eq!(r3.conditioning, Some(ImageKey::Id("img_a".into())));
}

#[test]
fn create_session_validates_tags() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), engine(scripted_index(), 0.15));
    let a = m.create(ModelTag::Unimodal).unwrap();
    let b = m.create(ModelTag::Unimodal).unwrap();
    assert_ne!(a, b);
    assert!(m.path_of(&a).is_file());
    let fresh = SessionRecord::load(&m.path_of(&a)).unwrap();
    assert!(fresh.turns.is_empty() && fresh.closed_at.is_none());
    assert!(matches!("gpt2".parse::<ModelTag>(), Err(ChatError::UnknownTag(_))));
    let text_only = Engine::new(vocab(), manifest(), None, engine_config(0.15))
        .with_variant(ModelTag::Unimodal, generator(GeneratorMode::Unimodal))
        .unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let m2 = manager(dir2.path(), text_only);
    assert!(matches!(
        m2.create(ModelTag::MultimodalRetriever),
        Err(ChatError::VariantNotLoaded(ModelTag::MultimodalRetriever))
    ));
}

#[test]
fn variants_must_match_their_generators() {
    let e = Engine::new(vocab(), manifest(), None, engine_config(0.15));
    let err = e
        .with_variant(ModelTag::UnimodalRetriever, generator(GeneratorMode::Unimodal))
        .err();
    assert!(matches!(err, Some(ChatError::VariantMismatch { .. })));
    let stack = RetrievalStack::new(retriever(), FP, scripted_index()).unwrap();
    let e = Engine::new(vocab(), manifest(), Some(stack), engine_config(0.15));
    let err = e
        .with_variant(ModelTag::MultimodalRetriever, generator(GeneratorMode::Unimodal))
        .err();
    assert!(matches!(err, Some(ChatError::VariantMismatch { .. })));
    let err = RetrievalStack::new(retriever(), "other", scripted_index()).err();
    assert!(matches!(
        err,
        Some(ChatError::Model(mmchat_core::Error::FingerprintMismatch { .. }))
    ));
}

#[test]
fn variant_contracts_hold() {
    let d = retriever().config().d_joint;
    let dir = tempfile::tempdir().unwrap();
    // Threshold -2 shares an image on every turn.
    let m = manager(dir.path(), engine(index(&["img_a"], &[vec![1.0; d]]), -2.0));
    let plain = m.create(ModelTag::Unimodal).unwrap();
    let shown = m.create(ModelTag::UnimodalRetriever).unwrap();
    for t in &U[..3] {
        let a = m.handle_message(&plain, t).unwrap();
        let b = m.handle_message(&shown, t).unwrap();
        assert_eq!(a.image, None);
        assert_eq!(a.conditioning, None);
        assert!(b.image.is_some());
        assert_eq!(b.conditioning, None);
        // Same generator weights and seeds: the image queue makes no difference.
        assert_eq!(a.response, b.response);
    }
    assert!(m.get(&plain).unwrap().queue().is_empty());
    assert_eq!(m.get(&shown).unwrap().queue().len(), 3);
}

#[test]
fn failed_exchanges_leave_no_trace() {
    let d = retriever().config().d_joint;
    let dir = tempfile::tempdir().unwrap();
    // `ghost` is in the index but not the manifest, so loading it fails.
    let m = manager(dir.path(), engine(index(&["ghost"], &[vec![1.0; d]]), -2.0));
    let id = m.create(ModelTag::MultimodalRetriever).unwrap();
    let on_disk = std::fs::read(m.path_of(&id)).unwrap();
    assert!(matches!(m.handle_message(&id, "hi"), Err(ChatError::Model(_))));
    assert!(matches!(m.handle_message(&id, "   "), Err(ChatError::EmptyMessage)));
    assert!(m.get(&id).unwrap().turns.is_empty());
    assert_eq!(std::fs::read(m.path_of(&id)).unwrap(), on_disk);
    assert!(matches!(
        m.handle_message("nope", "hi"),
        Err(ChatError::UnknownSession(_))
    ));
}

#[test]
fn evaluations_are_validated_and_upserted() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), engine(scripted_index(), 0.15));
    let id = m.create(ModelTag::MultimodalRetriever).unwrap();
    m.handle_message(&id, U[0]).unwrap();
    let ev = |turn, f, c, g| TurnEval {
        turn,
        fluency: f,
        coherence: c,
        image_groundedness: g,
    };
    // No image yet: groundedness is absent or rejected.
    m.record_turn_eval(&id, ev(1, 4, 4, None)).unwrap();
    assert!(matches!(
        m.record_turn_eval(&id, ev(1, 4, 4, Some(3))),
        Err(ChatError::GroundednessBeforeImage(1))
    ));
    m.handle_message(&id, U[1]).unwrap();
    m.record_turn_eval(&id, ev(3, 5, 4, Some(3))).unwrap();
    for bad in [0, 6, -1, 100] {
        assert!(matches!(
            m.record_turn_eval(&id, ev(3, bad, 4, None)),
            Err(ChatError::ScoreOutOfRange { field: "fluency", .. })
        ));
    }
    assert!(matches!(
        m.record_turn_eval(&id, ev(3, 3, 3, Some(6))),
        Err(ChatError::ScoreOutOfRange {
            field: "image_groundedness",
            value: 6
        })
    ));
    assert!(matches!(
        m.record_turn_eval(&id, ev(2, 3, 3, None)),
        Err(ChatError::NotBotTurn(2))
    ));
    assert!(matches!(
        m.record_turn_eval(&id, ev(9, 3, 3, None)),
        Err(ChatError::UnknownTurn(9))
    ));
    m.record_turn_eval(&id, ev(1, 2, 2, None)).unwrap();
    let rec = SessionRecord::load(&m.path_of(&id)).unwrap();
    let e1 = rec.turns[1].eval.unwrap();
    assert_eq!((e1.fluency, e1.coherence, e1.image_groundedness), (2, 2, None));
    let e3 = rec.turns[3].eval.unwrap();
    assert_eq!((e3.fluency, e3.coherence, e3.image_groundedness), (5, 4, Some(3)));

    let bad_close = SessionEval {
        engagingness: 4,
        humanness: 7,
    };
    assert!(matches!(
        m.close(&id, bad_close),
        Err(ChatError::ScoreOutOfRange { .. })
    ));
    let closed = m
        .close(
            &id,
            SessionEval {
                engagingness: 4,
                humanness: 3,
            },
        )
        .unwrap();
    assert!(closed.closed_at.unwrap() >= closed.created_at);
    let on_disk = SessionRecord::load(&m.path_of(&id)).unwrap();
    assert_eq!(on_disk, closed);
    assert_eq!(on_disk.session_eval.unwrap().humanness, 3);
    let again = SessionEval {
        engagingness: 1,
        humanness: 1,
    };
    assert!(matches!(m.close(&id, again), Err(ChatError::Closed(_))));
    assert!(matches!(m.handle_message(&id, "hi"), Err(ChatError::Closed(_))));
    assert!(matches!(
        m.record_turn_eval(&id, ev(1, 3, 3, None)),
        Err(ChatError::Closed(_))
    ));
}

#[test]
fn session_file_schema() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), engine(scripted_index(), 0.15));
    let id = m.create(ModelTag::UnimodalRetriever).unwrap();
    m.handle_message(&id, U[0]).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(m.path_of(&id)).unwrap()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["closed_at", "created_at", "model_tag", "session_id", "turns"]);
    assert_eq!(v["model_tag"], "unimodal_retriever");
    assert_eq!(v["closed_at"], serde_json::Value::Null);
    assert_eq!(v["turns"][0]["speaker"], "user");
    assert_eq!(v["turns"][1]["speaker"], "bot");
    assert!(v["turns"][0].get("image_id").is_none());
}

#[test]
fn overlapping_messages_are_rejected() {
    let d = retriever().config().d_joint;
    let mut g = generator(GeneratorMode::Unimodal);
    // Without an <eos> logit every reply runs to the token limit.
    let tok = g.params.id("tok").unwrap();
    let dm = g.config().d_model;
    g.params.get_mut(tok).value.data_mut()[3 * dm..4 * dm].fill(0.0);
    let mut cfg = engine_config(0.15);
    cfg.max_new_tokens = 48;
    let stack = RetrievalStack::new(retriever(), FP, index(&["img_a"], &[vec![1.0; d]])).unwrap();
    let e = Engine::new(vocab(), manifest(), Some(stack), cfg)
        .with_variant(ModelTag::Unimodal, g)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = Arc::new(SessionManager::open(dir.path(), Arc::new(e)).unwrap());
    let id = m.create(ModelTag::Unimodal).unwrap();
    let mut busy = 0;
    for _ in 0..20 {
        let (m2, id2) = (Arc::clone(&m), id.clone());
        let h = std::thread::spawn(move || match m2.handle_message(&id2, "hi my dog") {
            Ok(_) => 0,
            Err(ChatError::Busy(_)) => 1,
            Err(e) => panic!("{e}"),
        });
        while !h.is_finished() {
            match m.handle_message(&id, "hello") {
                Err(ChatError::Busy(_)) => busy += 1,
                Ok(_) => {}
                Err(e) => panic!("{e}"),
            }
        }
        busy += h.join().unwrap();
    }
    assert!(busy > 0, "no overlap was ever observed");
    // Every exchange that ran added exactly two turns.
    let rec = m.get(&id).unwrap();
    assert_eq!(rec.turns.len() % 2, 0);
    assert!(rec
        .turns
        .chunks(2)
        .all(|p| p[0].speaker == Speaker::User && p[1].speaker == Speaker::Bot));
}

#[test]
fn aggregate_reproduces_hand_computed_means() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(aggregate_eval(dir.path()), Err(ChatError::NoResults(_))));
    let m = manager(dir.path(), engine(scripted_index(), 0.15));
    let ev = |turn, f, c| TurnEval {
        turn,
        fluency: f,
        coherence: c,
        image_groundedness: None,
    };
    let a = m.create(ModelTag::Unimodal).unwrap();
    m.handle_message(&a, U[0]).unwrap();
    m.handle_message(&a, U[1]).unwrap();
    m.record_turn_eval(&a, ev(1, 4, 5)).unwrap();
    m.record_turn_eval(&a, ev(3, 4, 2)).unwrap();
    m.close(
        &a,
        SessionEval {
            engagingness: 4,
            humanness: 3,
        },
    )
    .unwrap();
    let b = m.create(ModelTag::Unimodal).unwrap();
    m.handle_message(&b, U[0]).unwrap();
    m.record_turn_eval(&b, ev(1, 1, 2)).unwrap();
    let c = m.create(ModelTag::UnimodalRetriever).unwrap();
    m.handle_message(&c, U[0]).unwrap();
    m.record_turn_eval(&c, ev(1, 5, 5)).unwrap();

    let s = aggregate_eval(dir.path()).unwrap();
    assert_eq!(s.rows.len(), 2);
    let u = s.row(ModelTag::Unimodal).unwrap();
    assert_eq!((u.sessions, u.closed_sessions, u.evaluated_turns), (2, 1, 3));
    assert_eq!(u.fluency, Some(3.0));
    assert_eq!(u.coherence, Some(3.0));
    assert_eq!(u.image_groundedness, None);
    assert_eq!(u.engagingness, Some(4.0));
    assert_eq!(u.humanness, Some(3.0));
    let r = s.row(ModelTag::UnimodalRetriever).unwrap();
    assert_eq!((r.sessions, r.evaluated_turns, r.fluency), (1, 1, Some(5.0)));
    assert_eq!(r.engagingness, None);
    assert!(s.to_table().contains("unimodal_retriever"));
}
