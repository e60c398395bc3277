use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::types::{DatasetSplit, Dialogue, ImageRole, Speaker, SplitName, Turn};

#[derive(Deserialize)]
struct RawDialogue {
    dialogue_id: serde_json::Value,
    #[serde(default)]
    photo_url: Option<String>,
    dialogue: Vec<RawTurn>,
}

#[derive(Deserialize)]
struct RawTurn {
    user_id: i64,
    #[serde(default)]
    message: String,
    #[serde(default)]
    share_photo: bool,
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parse one JSON array of PhotoChat records. No preprocessing is applied.
pub fn parse_photochat(text: &str, file: &str) -> Result<Vec<Dialogue>> {
    let raw: Vec<RawDialogue> = serde_json::from_str(text).map_err(|e| Error::Parse {
        file: file.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    raw.into_iter()
        .map(|r| {
            let id = id_string(&r.dialogue_id);
            let turns = r
                .dialogue
                .into_iter()
                .map(|t| {
                    let speaker = Speaker::from_source_id(t.user_id).ok_or_else(|| Error::Record {
                        dialogue_id: id.clone(),
                        msg: format!("unknown speaker id {}", t.user_id),
                    })?;
                    let shared = t.share_photo && r.photo_url.is_some();
                    Ok(Turn {
                        speaker,
                        text: t.message.trim().to_string(),
                        image_ref: shared.then(|| r.photo_url.clone()).flatten(),
                        image_role: if shared { ImageRole::SharedHere } else { ImageRole::None },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dialogue {
                id,
                turns,
                source_image: r.photo_url,
            })
        })
        .collect()
}

/// Load a split from a JSON file, or from every `*.json` file of a
/// directory in lexicographic order.
pub fn load_photochat(path: &Path, name: SplitName) -> Result<DatasetSplit> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if p.extension().is_some_and(|e| e == "json") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut dialogues = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        dialogues.extend(parse_photochat(&text, &f.display().to_string())?);
    }
    Ok(DatasetSplit { name, dialogues })
}
