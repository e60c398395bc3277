//! Session state machine with one JSON file per session.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, TryLockError};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use mmchat_core::corpus::{Speaker, Turn};

use crate::engine::{Engine, ModelTag, Reply};
use crate::error::{ChatError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnScores {
    pub fluency: u8,
    pub coherence: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_groundedness: Option<u8>,
}

/// A rater's scores for one bot turn. Scores arrive as plain integers and
/// are range-checked on submission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnEval {
    /// Position of the bot turn in the session's `turns` array.
    pub turn: usize,
    pub fluency: i64,
    pub coherence: i64,
    #[serde(default)]
    pub image_groundedness: Option<i64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEval {
    pub engagingness: i64,
    pub humanness: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionTurn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<TurnScores>,
}

/// On-disk form of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub model_tag: ModelTag,
    pub turns: Vec<SessionTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_eval: Option<SessionEval>,
    /// Unix milliseconds.
    pub created_at: u64,
    pub closed_at: Option<u64>,
}

impl SessionRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ChatError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ChatError::CorruptSession {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn is_closed(&self) -> bool {
        self.closed_at.is_some()
    }

    /// Images shown so far, oldest first.
    pub fn queue(&self) -> Vec<String> {
        self.turns.iter().filter_map(|t| t.image_id.clone()).collect()
    }

    pub fn history(&self) -> Vec<Turn> {
        self.turns
            .iter()
            .map(|t| Turn::text(t.speaker, t.text.clone()))
            .collect()
    }

    /// Number of completed exchanges.
    pub fn exchanges(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == Speaker::Bot).count()
    }

    fn image_shown_by(&self, turn: usize) -> bool {
        self.turns[..=turn].iter().any(|t| t.image_id.is_some())
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn likert(field: &'static str, value: i64) -> Result<u8> {
    if (1..=5).contains(&value) {
        Ok(value as u8)
    } else {
        Err(ChatError::ScoreOutOfRange { field, value })
    }
}

/// Write via a temporary sibling and rename so a crash never leaves a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("session");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(|e| ChatError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| ChatError::io(&tmp, e))?;
    f.sync_all().map_err(|e| ChatError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| ChatError::io(path, e))
}

type Slot = Arc<Mutex<SessionRecord>>;

/// All sessions of one service instance. Each mutation is written to disk
/// before it becomes visible.
pub struct SessionManager {
    dir: PathBuf,
    engine: Arc<Engine>,
    sessions: RwLock<HashMap<String, Slot>>,
}

impl SessionManager {
    /// Open the spool directory, creating it if needed and reloading every
    /// session file already there.
    pub fn open(dir: impl Into<PathBuf>, engine: Arc<Engine>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| ChatError::io(&dir, e))?;
        let mut sessions = HashMap::new();
        for path in session_files(&dir)? {
            let rec = SessionRecord::load(&path)?;
            sessions.insert(rec.session_id.clone(), Arc::new(Mutex::new(rec)));
        }
        log::info!("{} sessions loaded from {}", sessions.len(), dir.display());
        Ok(SessionManager {
            dir,
            engine,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn persist(&self, rec: &SessionRecord) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(rec).expect("session records serialize");
        write_atomic(&self.path_of(&rec.session_id), &bytes)
    }

    fn slot(&self, id: &str) -> Result<Slot> {
        let map = self.sessions.read().unwrap_or_else(|e| e.into_inner());
        map.get(id)
            .cloned()
            .ok_or_else(|| ChatError::UnknownSession(id.to_string()))
    }

    fn lock(slot: &Slot) -> MutexGuard<'_, SessionRecord> {
        slot.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn create(&self, tag: ModelTag) -> Result<String> {
        if !self.engine.supports(tag) {
            return Err(ChatError::VariantNotLoaded(tag));
        }
        let rec = SessionRecord {
            session_id: uuid::Uuid::new_v4().simple().to_string(),
            model_tag: tag,
            turns: Vec::new(),
            session_eval: None,
            created_at: now_ms(),
            closed_at: None,
        };
        self.persist(&rec)?;
        let id = rec.session_id.clone();
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), Arc::new(Mutex::new(rec)));
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Result<SessionRecord> {
        Ok(Self::lock(&self.slot(id)?).clone())
    }

    /// Append the user message, retrieve, respond and append the reply.
    /// Overlapping calls for one session are rejected; on any failure the
    /// session is left as it was.
    pub fn handle_message(&self, id: &str, text: &str) -> Result<Reply> {
        let text = text.trim();
        if text.is_empty() {
            return Err(ChatError::EmptyMessage);
        }
        let slot = self.slot(id)?;
        let mut rec = match slot.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(ChatError::Busy(id.to_string())),
            Err(TryLockError::Poisoned(e)) => e.into_inner(),
        };
        if rec.is_closed() {
            return Err(ChatError::Closed(id.to_string()));
        }
        let mut history = rec.history();
        history.push(Turn::text(Speaker::User, text));
        let seed = self.engine.turn_seed(rec.exchanges());
        let reply = self.engine.respond(rec.model_tag, &history, &rec.queue(), seed)?;
        let mut next = rec.clone();
        next.turns.push(SessionTurn {
            speaker: Speaker::User,
            text: text.to_string(),
            image_id: None,
            eval: None,
        });
        next.turns.push(SessionTurn {
            speaker: Speaker::Bot,
            text: reply.response.clone(),
            image_id: reply.image.as_ref().map(|(id, _)| id.clone()),
            eval: None,
        });
        self.persist(&next)?;
        *rec = next;
        Ok(reply)
    }

    /// Store or replace the scores of one bot turn.
    pub fn record_turn_eval(&self, id: &str, eval: TurnEval) -> Result<()> {
        let scores = TurnScores {
            fluency: likert("fluency", eval.fluency)?,
            coherence: likert("coherence", eval.coherence)?,
            image_groundedness: eval
                .image_groundedness
                .map(|v| likert("image_groundedness", v))
                .transpose()?,
        };
        let slot = self.slot(id)?;
        let mut rec = Self::lock(&slot);
        if rec.is_closed() {
            return Err(ChatError::Closed(id.to_string()));
        }
        let turn = rec.turns.get(eval.turn).ok_or(ChatError::UnknownTurn(eval.turn))?;
        if turn.speaker != Speaker::Bot {
            return Err(ChatError::NotBotTurn(eval.turn));
        }
        if scores.image_groundedness.is_some() && !rec.image_shown_by(eval.turn) {
            return Err(ChatError::GroundednessBeforeImage(eval.turn));
        }
        let mut next = rec.clone();
        next.turns[eval.turn].eval = Some(scores);
        self.persist(&next)?;
        *rec = next;
        Ok(())
    }

    /// Record the end-of-session scores and freeze the session.
    pub fn close(&self, id: &str, eval: SessionEval) -> Result<SessionRecord> {
        likert("engagingness", eval.engagingness)?;
        likert("humanness", eval.humanness)?;
        let slot = self.slot(id)?;
        let mut rec = Self::lock(&slot);
        if rec.is_closed() {
            return Err(ChatError::Closed(id.to_string()));
        }
        let mut next = rec.clone();
        next.session_eval = Some(eval);
        next.closed_at = Some(now_ms().max(next.created_at));
        self.persist(&next)?;
        *rec = next.clone();
        Ok(next)
    }
}

/// Session files in `dir`, sorted by name. Temporary files are skipped.
pub(crate) fn session_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| ChatError::io(dir, e))? {
        let path = entry.map_err(|e| ChatError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_file() && name.ends_with(".json") && !name.starts_with('.') {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
