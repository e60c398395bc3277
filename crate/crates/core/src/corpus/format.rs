//! Token-level layouts consumed by the two models.

use crate::numerics::IGNORE_INDEX;

use super::types::{Speaker, Turn};
use super::vocab::{Vocabulary, BOS, BOT, EOS, POOL, SEP, USER};

/// Most recent turns fed to either model.
pub const HISTORY_WINDOW: usize = 12;
/// Text-encoder length limit.
pub const RETRIEVER_MAX_LEN: usize = 512;

pub fn speaker_tag(s: Speaker) -> usize {
    match s {
        Speaker::User => USER,
        Speaker::Bot => BOT,
    }
}

fn window(history: &[Turn]) -> &[Turn] {
    &history[history.len().saturating_sub(HISTORY_WINDOW)..]
}

/// `<bos>`, then each history turn as its speaker tag followed by its tokens.
fn history_ids(history: &[Turn], vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = vec![BOS];
    for t in window(history) {
        ids.push(speaker_tag(t.speaker));
        ids.extend(vocab.encode(&t.text));
    }
    ids
}

/// Teacher-forcing layout: `<bos> (tag tokens)* tag response <eos>`, with
/// labels set to −100 over everything up to and including the response tag.
/// Sequences longer than `max_len` are cut from the right. Returns `None`
/// when the response has no tokens.
pub fn format_generator_input(
    history: &[Turn],
    response: &Turn,
    vocab: &Vocabulary,
    max_len: usize,
) -> Option<(Vec<usize>, Vec<i64>)> {
    let resp = vocab.encode(&response.text);
    if resp.is_empty() {
        log::warn!("response `{}` has no tokens; sample skipped", response.text);
        return None;
    }
    let mut ids = history_ids(history, vocab);
    ids.push(speaker_tag(response.speaker));
    let mut labels = vec![IGNORE_INDEX; ids.len()];
    for &t in resp.iter().chain(std::iter::once(&EOS)) {
        ids.push(t);
        labels.push(t as i64);
    }
    ids.truncate(max_len);
    labels.truncate(max_len);
    Some((ids, labels))
}

/// Prompt for decoding a reply by `speaker`: the history layout followed by
/// the speaker's tag. Oldest turns are dropped until the prompt fits
/// `max_len`.
pub fn format_generation_prompt(history: &[Turn], speaker: Speaker, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut turns = window(history);
    loop {
        let mut ids = history_ids(turns, vocab);
        ids.push(speaker_tag(speaker));
        if ids.len() <= max_len || turns.is_empty() {
            ids.truncate(max_len);
            return ids;
        }
        turns = &turns[1..];
    }
}

/// Retriever text: `<pool> u1 <sep> u2 <sep> ... uk`, cut from the right at
/// `max_len`. Padding is added at collation.
pub fn format_retriever_text(history: &[Turn], vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids = vec![POOL];
    if history.is_empty() {
        log::warn!("empty retrieval history");
    }
    for (i, t) in window(history).iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(vocab.encode(&t.text));
    }
    ids.truncate(max_len);
    ids
}
