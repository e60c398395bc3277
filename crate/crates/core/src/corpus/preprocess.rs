//! The four dataset cleaning steps: unavailable-image filtering, merging of
//! same-speaker runs, reassignment of image-only turns, and image propagation.

use crate::error::{Error, Result};

use super::types::{DatasetSplit, Dialogue, ImageRole, Turn};

/// Drop dialogues whose shared image is unavailable. Returns the kept split
/// and the number of exclusions.
pub fn filter_unavailable_images(split: DatasetSplit, available: impl Fn(&str) -> bool) -> (DatasetSplit, usize) {
    let before = split.dialogues.len();
    let dialogues: Vec<_> = split
        .dialogues
        .into_iter()
        .filter(|d| d.source_image.as_deref().is_none_or(&available))
        .collect();
    let excluded = before - dialogues.len();
    (
        DatasetSplit {
            name: split.name,
            dialogues,
        },
        excluded,
    )
}

/// Collapse maximal runs of same-speaker turns into one turn whose text is
/// the run's non-empty texts joined by single spaces. Empty turns without an
/// image are dropped first.
pub fn merge_consecutive_turns(d: Dialogue) -> Result<Dialogue> {
    let mut merged: Vec<Turn> = Vec::with_capacity(d.turns.len());
    for turn in d.turns {
        if turn.text.is_empty() && turn.image_ref.is_none() {
            continue;
        }
        match merged.last_mut() {
            Some(prev) if prev.speaker == turn.speaker => {
                if !turn.text.is_empty() {
                    if !prev.text.is_empty() {
                        prev.text.push(' ');
                    }
                    prev.text.push_str(&turn.text);
                }
                match (&prev.image_ref, turn.image_ref) {
                    (Some(a), Some(b)) if *a != b => {
                        return Err(Error::Record {
                            dialogue_id: d.id,
                            msg: format!("two images `{a}` and `{b}` in one speaker run"),
                        })
                    }
                    (None, Some(b)) => {
                        prev.image_ref = Some(b);
                        prev.image_role = turn.image_role;
                    }
                    _ => {
                        if turn.image_role == ImageRole::SharedHere {
                            prev.image_role = ImageRole::SharedHere;
                        }
                    }
                }
            }
            _ => merged.push(turn),
        }
    }
    Ok(Dialogue {
        id: d.id,
        turns: merged,
        source_image: d.source_image,
    })
}

/// Delete turns that carry an image but no text, moving the image to the
/// next turn by the same speaker (or the final turn, with a warning, when
/// there is none). Runs created by the deletion are merged again.
pub fn reassign_image_only_turns(d: Dialogue) -> Result<(Dialogue, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut turns = d.turns;
    let mut i = 0;
    let mut changed = false;
    while i < turns.len() {
        if !(turns[i].text.is_empty() && turns[i].image_ref.is_some()) {
            i += 1;
            continue;
        }
        let removed = turns.remove(i);
        changed = true;
        let target = turns[i..]
            .iter()
            .position(|t| t.speaker == removed.speaker)
            .map(|p| p + i);
        let target = match target {
            Some(t) => Some(t),
            None if !turns.is_empty() => {
                warnings.push(format!(
                    "dialogue {}: image-only turn has no later turn by the same speaker; attached to final turn",
                    d.id
                ));
                Some(turns.len() - 1)
            }
            None => None,
        };
        match target {
            Some(t) => {
                turns[t].image_ref = removed.image_ref;
                turns[t].image_role = removed.image_role;
            }
            None => {
                return Err(Error::Record {
                    dialogue_id: d.id,
                    msg: "dialogue consists only of an image-only turn".into(),
                })
            }
        }
    }
    let d = Dialogue {
        id: d.id,
        turns,
        source_image: d.source_image,
    };
    let d = if changed { merge_consecutive_turns(d)? } else { d };
    Ok((d, warnings))
}

/// Pair every turn after the shared turn with the shared image and every turn
/// before it with the dummy image.
pub fn propagate_images(d: Dialogue) -> Result<Dialogue> {
    let shared: Vec<usize> = d
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.image_role == ImageRole::SharedHere)
        .map(|(i, _)| i)
        .collect();
    let [at] = shared[..] else {
        return Err(Error::Record {
            dialogue_id: d.id,
            msg: format!("expected exactly one shared image, found {}", shared.len()),
        });
    };
    let image = d.turns[at].image_ref.clone();
    if image.is_none() {
        return Err(Error::Record {
            dialogue_id: d.id,
            msg: "shared turn has no image reference".into(),
        });
    }
    let mut turns = d.turns;
    for (i, t) in turns.iter_mut().enumerate() {
        if i < at {
            t.image_ref = None;
            t.image_role = ImageRole::Dummy;
        } else if i > at {
            t.image_ref = image.clone();
            t.image_role = ImageRole::Carried;
        }
    }
    Ok(Dialogue {
        id: d.id,
        turns,
        source_image: d.source_image,
    })
}

/// Run merge, reassignment and propagation on one dialogue.
pub fn preprocess_dialogue(d: Dialogue) -> Result<(Dialogue, Vec<String>)> {
    let d = merge_consecutive_turns(d)?;
    let (d, warnings) = reassign_image_only_turns(d)?;
    Ok((propagate_images(d)?, warnings))
}

#[derive(Debug)]
pub struct PreprocessOutcome {
    pub split: DatasetSplit,
    pub excluded_unavailable: usize,
    /// Dialogues dropped because a step rejected them.
    pub errors: Vec<Error>,
    pub warnings: Vec<String>,
}

/// Full pipeline over a split. Failing dialogues are dropped and reported.
pub fn preprocess_split(split: DatasetSplit, available: impl Fn(&str) -> bool) -> PreprocessOutcome {
    let (split, excluded_unavailable) = filter_unavailable_images(split, available);
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut dialogues = Vec::with_capacity(split.dialogues.len());
    for d in split.dialogues {
        match preprocess_dialogue(d) {
            Ok((d, w)) => {
                warnings.extend(w);
                dialogues.push(d);
            }
            Err(e) => errors.push(e),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    PreprocessOutcome {
        split: DatasetSplit {
            name: split.name,
            dialogues,
        },
        excluded_unavailable,
        errors,
        warnings,
    }
}
