//! JSON-lines datasets and run manifests.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mmchat_core::corpus::{Speaker, Turn};
use mmchat_core::numerics::checkpoint::fingerprint;

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// A dialogue history: a JSON array of turns, or plain text with one
/// utterance per line, speakers alternating from the user.
pub fn read_history(path: &Path) -> anyhow::Result<Vec<Turn>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| Turn::text(if i % 2 == 0 { Speaker::User } else { Speaker::Bot }, l))
        .collect())
}

/// Provenance of a command's outputs: the configuration used, the SHA-256
/// of every input file and the files written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub const RUN_MANIFEST: &str = "run-manifest.json";

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Record an input under the name the user gave it; `resolved` is
    /// where it was read from.
    pub fn input(&mut self, given: &Path, resolved: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(resolved).with_context(|| format!("reading {}", resolved.display()))?;
        self.inputs.insert(given.display().to_string(), fingerprint(&bytes));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.outputs.push(name);
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let p = dir.join(RUN_MANIFEST);
        write_json(&p, self)?;
        Ok(p)
    }
}
