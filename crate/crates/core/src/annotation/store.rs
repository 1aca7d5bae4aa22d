//! Thread-safe session registry backed by an append-only JSON-lines log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::session::{ComparisonSession, Decision, SessionError, SessionSpec, Vote};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created { session_id: String, spec: SessionSpec },
    Vote { session_id: String, vote: Vote },
}

type Shared = Arc<Mutex<ComparisonSession>>;

#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: Mutex<HashMap<String, Shared>>,
    log: Option<(PathBuf, Mutex<File>)>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) an event log and replays every session in it. A
    /// torn final line from an interrupted write is ignored.
    pub fn open(path: &Path) -> Result<Self> {
        let mut store = Self::default();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            let lines: Vec<String> = BufReader::new(f)
                .lines()
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(path, e))?;
            let n = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let event: Event = match serde_json::from_str(line) {
                    Ok(e) => e,
                    Err(e) if i + 1 == n => {
                        log::warn!("dropping torn last line of {}: {e}", path.display());
                        let mut kept = lines[..i].join("\n");
                        if !kept.is_empty() {
                            kept.push('\n');
                        }
                        std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
                        break;
                    }
                    Err(e) => {
                        return Err(SessionError::Log(format!("line {}: {e}", i + 1)).into())
                    }
                };
                store.apply(&event)?;
            }
        } else if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        store.log = Some((path.to_path_buf(), Mutex::new(f)));
        Ok(store)
    }

    fn apply(&self, event: &Event) -> Result<()> {
        match event {
            Event::Created { session_id, spec } => {
                self.insert(ComparisonSession::create(session_id.clone(), spec.clone())?)
            }
            Event::Vote { session_id, vote } => {
                self.get(session_id)?.lock().unwrap().submit_vote(vote)?;
                Ok(())
            }
        }
    }

    fn append(&self, event: &Event) -> Result<()> {
        if let Some((path, f)) = &self.log {
            let mut line = serde_json::to_string(event)?;
            line.push('\n');
            let mut f = f.lock().unwrap();
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    fn insert(&self, session: ComparisonSession) -> Result<()> {
        let mut map = self.sessions.lock().unwrap();
        if map.contains_key(session.id()) {
            return Err(Error::InvalidInput(format!("session {} exists", session.id())));
        }
        map.insert(session.id().to_string(), Arc::new(Mutex::new(session)));
        Ok(())
    }

    fn get(&self, id: &str) -> std::result::Result<Shared, SessionError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    pub fn create(&self, spec: SessionSpec) -> Result<String> {
        self.create_with_id(uuid::Uuid::new_v4().to_string(), spec)
    }

    pub fn create_with_id(&self, id: String, spec: SessionSpec) -> Result<String> {
        let session = ComparisonSession::create(id.clone(), spec.clone())?;
        self.insert(session)?;
        self.append(&Event::Created {
            session_id: id.clone(),
            spec,
        })?;
        Ok(id)
    }

    /// Votes on one session are serialized by its lock; the event is logged
    /// before the lock is released.
    pub fn submit_vote(&self, id: &str, vote: Vote) -> Result<Option<Decision>> {
        let shared = self.get(id)?;
        let mut session = shared.lock().unwrap();
        let decision = session.submit_vote(&vote)?;
        self.append(&Event::Vote {
            session_id: id.to_string(),
            vote,
        })?;
        Ok(decision)
    }

    pub fn with_session<R>(
        &self,
        id: &str,
        f: impl FnOnce(&ComparisonSession) -> R,
    ) -> std::result::Result<R, SessionError> {
        let shared = self.get(id)?;
        let session = shared.lock().unwrap();
        Ok(f(&session))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }
}
