use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use seeker_core::eval::TurnAnnotation;
use seeker_core::pipeline::TurnTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub user_message: String,
    pub trace: TurnTrace,
    pub annotation: Option<TurnAnnotation>,
    /// Session rating, reported on the last record only.
    pub final_rating: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub config_ref: String,
    #[serde(default)]
    pub persona: Option<String>,
}

/// One line of a session's append-only log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created(SessionMeta),
    Turn { record: TurnRecord },
    Annotation { turn_index: usize, annotation: TurnAnnotation },
    Rating { value: u8 },
}

/// Everything a session log replays into.
#[derive(Debug, Clone, PartialEq)]
pub struct Replayed {
    pub meta: SessionMeta,
    pub records: Vec<TurnRecord>,
    pub rating: Option<u8>,
}

/// Per-session JSONL files under `<data_dir>/sessions/`.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    write: Mutex<()>,
}

impl Store {
    pub fn open(data_dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = data_dir.as_ref().join("sessions");
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            write: Mutex::new(()),
        })
    }

    fn path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    /// Appends and syncs one event.
    pub fn append(&self, session_id: &str, event: &Event) -> io::Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        let _guard = self.write.lock();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(session_id))?;
        file.write_all(&line)?;
        file.sync_data()
    }

    /// Replays every session file. A torn final line is skipped.
    pub fn load_all(&self) -> io::Result<BTreeMap<String, Replayed>> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            match replay(&path)? {
                Some(r) => {
                    out.insert(r.meta.session_id.clone(), r);
                }
                None => tracing::warn!(path = %path.display(), "session log has no creation event"),
            }
        }
        Ok(out)
    }
}

fn replay(path: &Path) -> io::Result<Option<Replayed>> {
    let mut replayed: Option<Replayed> = None;
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = match serde_json::from_str(&line) {
            Ok(e) => e,
            Err(e) => {
                tracing::warn!(path = %path.display(), line = i + 1, error = %e, "skipping unreadable event");
                continue;
            }
        };
        match (event, replayed.as_mut()) {
            (Event::Created(meta), None) => {
                replayed = Some(Replayed {
                    meta,
                    records: Vec::new(),
                    rating: None,
                })
            }
            (Event::Turn { record }, Some(r)) if record.turn_index == r.records.len() => r.records.push(record),
            (Event::Annotation { turn_index, annotation }, Some(r)) if turn_index < r.records.len() => {
                r.records[turn_index].annotation = Some(annotation)
            }
            (Event::Rating { value }, Some(r)) => r.rating = Some(value),
            (event, _) => {
                tracing::warn!(path = %path.display(), line = i + 1, ?event, "skipping out-of-order event")
            }
        }
    }
    Ok(replayed)
}
