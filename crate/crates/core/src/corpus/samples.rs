use super::types::{DatasetSplit, GeneratorSample, ImageKey, ImageRole, RetrieverSample};

/// One retrieval sample per dialogue: the turns strictly before the shared
/// turn paired with the shared image.
pub fn expand_retriever_samples(split: &DatasetSplit) -> (Vec<RetrieverSample>, Vec<String>) {
    let mut samples = Vec::with_capacity(split.dialogues.len());
    let mut warnings = Vec::new();
    for d in &split.dialogues {
        let Some(at) = d.turns.iter().position(|t| t.image_role == ImageRole::SharedHere) else {
            warnings.push(format!("dialogue {}: no shared image, skipped", d.id));
            continue;
        };
        let gold = d.turns[at].image_ref.clone().unwrap_or_default();
        let history = if at == 0 {
            warnings.push(format!(
                "dialogue {}: image shared at the first turn; using that turn as history",
                d.id
            ));
            d.turns[..1].to_vec()
        } else {
            d.turns[..at].to_vec()
        };
        samples.push(RetrieverSample {
            dialogue_id: d.id.clone(),
            history,
            gold_image: gold,
        });
    }
    (samples, warnings)
}

/// `n − 1` samples per dialogue of `n` turns: each turn after the first is a
/// response to all turns before it, conditioned on the image paired with it.
pub fn expand_generator_samples(split: &DatasetSplit) -> (Vec<GeneratorSample>, Vec<String>) {
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for d in &split.dialogues {
        if d.turns.len() < 2 {
            warnings.push(format!("dialogue {}: fewer than two turns, no samples", d.id));
            continue;
        }
        for k in 1..d.turns.len() {
            let response = d.turns[k].clone();
            let conditioning_image = match (&response.image_role, &response.image_ref) {
                (ImageRole::SharedHere | ImageRole::Carried, Some(id)) => ImageKey::Id(id.clone()),
                _ => ImageKey::Dummy,
            };
            samples.push(GeneratorSample {
                dialogue_id: d.id.clone(),
                history: d.turns[..k].to_vec(),
                response,
                conditioning_image,
            });
        }
    }
    (samples, warnings)
}

#[cfg(test)]
mod tests {
    use super::super::types::{Dialogue, Speaker, SplitName, Turn};
    use super::*;

    fn split(n_turns: usize, share_at: usize) -> DatasetSplit {
        let mut turns: Vec<Turn> = (0..n_turns)
            .map(|i| Turn::text(if i % 2 == 0 { Speaker::User } else { Speaker::Bot }, format!("t{i}")))
            .collect();
        turns[share_at].image_ref = Some("img".into());
        turns[share_at].image_role = ImageRole::SharedHere;
        let d = super::super::preprocess::propagate_images(Dialogue {
            id: "d".into(),
            turns,
            source_image: Some("img".into()),
        })
        .unwrap();
        DatasetSplit {
            name: SplitName::Train,
            dialogues: vec![d],
        }
    }

    #[test]
    fn one_retriever_sample_per_dialogue() {
        let (s, w) = expand_retriever_samples(&split(6, 3));
        assert!(w.is_empty());
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].history.len(), 3);
        assert_eq!(s[0].gold_image, "img");
    }

    #[test]
    fn share_at_first_turn_uses_that_turn() {
        let (s, w) = expand_retriever_samples(&split(4, 0));
        assert_eq!(s[0].history.len(), 1);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn twelve_turns_give_eleven_generator_samples() {
        let (s, _) = expand_generator_samples(&split(12, 5));
        assert_eq!(s.len(), 11);
        for (k, sample) in s.iter().enumerate() {
            let turn = k + 1;
            let expected = if turn >= 5 {
                ImageKey::Id("img".into())
            } else {
                ImageKey::Dummy
            };
            assert_eq!(sample.conditioning_image, expected, "response turn {turn}");
            assert_eq!(sample.history.len(), turn);
        }
    }

    #[test]
    fn single_turn_dialogue_gives_no_samples() {
        let (s, w) = expand_generator_samples(&split(1, 0));
        assert!(s.is_empty());
        assert_eq!(w.len(), 1);
    }
}
