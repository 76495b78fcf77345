//! Event-sourced session store. Every change is one JSON line in an
//! append-only log; replaying the log rebuilds the in-memory sessions.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConversationTurn, ProductId, Session, SessionError, UserContext};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StoreEvent {
    SessionCreated {
        session_id: String,
        user_context: UserContext,
        current_page_product_id: Option<ProductId>,
    },
    TurnAppended {
        session_id: String,
        turn: ConversationTurn,
    },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} already exists")]
    DuplicateSession(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("session log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type SessionHandle = Arc<Mutex<Session>>;

/// Sessions by id. Each session sits behind its own mutex, which callers hold
/// for a whole turn so turns of one session never interleave.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, SessionHandle>>,
    log: Option<(PathBuf, Mutex<File>)>,
}

fn apply(sessions: &mut HashMap<String, Session>, event: StoreEvent) -> Result<(), StoreError> {
    match event {
        StoreEvent::SessionCreated {
            session_id,
            user_context,
            current_page_product_id,
        } => {
            if sessions.contains_key(&session_id) {
                return Err(StoreError::DuplicateSession(session_id));
            }
            let mut s = Session::new(session_id.clone());
            s.user_context = user_context;
            s.current_page_product_id = current_page_product_id;
            sessions.insert(session_id, s);
        }
        StoreEvent::TurnAppended { session_id, turn } => {
            let s = sessions
                .get_mut(&session_id)
                .ok_or_else(|| StoreError::UnknownSession(session_id.clone()))?;
            *s = s.append_turn(turn)?;
        }
    }
    Ok(())
}

/// Rebuilds sessions from log text.
pub fn replay(log: &str) -> Result<HashMap<String, Session>, StoreError> {
    let mut sessions = HashMap::new();
    for (i, line) in log.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| StoreError::CorruptLog {
            line: i + 1,
            message,
        };
        let event: StoreEvent = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        apply(&mut sessions, event).map_err(|e| corrupt(e.to_string()))?;
    }
    Ok(sessions)
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the log at `path` and replays it.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        let existing = match std::fs::read_to_string(path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(e)),
        };
        let sessions = replay(&existing)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            sessions: RwLock::new(
                sessions
                    .into_iter()
                    .map(|(k, v)| (k, Arc::new(Mutex::new(v))))
                    .collect(),
            ),
            log: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    fn write(&self, event: &StoreEvent) -> Result<(), StoreError> {
        if let Some((path, file)) = &self.log {
            let mut line = serde_json::to_string(event).expect("events serialize");
            line.push('\n');
            let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|source| StoreError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
        }
        Ok(())
    }

    /// Registers a session with no turns.
    pub fn create(
        &self,
        session_id: impl Into<String>,
        user_context: UserContext,
        current_page_product_id: Option<ProductId>,
    ) -> Result<Session, StoreError> {
        let session_id = session_id.into();
        let mut sessions = self.sessions.write().unwrap_or_else(|p| p.into_inner());
        if sessions.contains_key(&session_id) {
            return Err(StoreError::DuplicateSession(session_id));
        }
        let event = StoreEvent::SessionCreated {
            session_id: session_id.clone(),
            user_context: user_context.clone(),
            current_page_product_id: current_page_product_id.clone(),
        };
        self.write(&event)?;
        let mut s = Session::new(session_id.clone());
        s.user_context = user_context;
        s.current_page_product_id = current_page_product_id;
        sessions.insert(session_id, Arc::new(Mutex::new(s.clone())));
        Ok(s)
    }

    /// Registers a session together with its existing turns.
    pub fn import(&self, session: &Session) -> Result<(), StoreError> {
        self.create(
            session.session_id.clone(),
            session.user_context.clone(),
            session.current_page_product_id.clone(),
        )?;
        let handle = self.handle(&session.session_id)?;
        let mut guard = handle.lock().unwrap_or_else(|p| p.into_inner());
        for turn in &session.turns {
            self.append_turn(&mut guard, turn.clone())?;
        }
        Ok(())
    }

    pub fn handle(&self, session_id: &str) -> Result<SessionHandle, StoreError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(session_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownSession(session_id.to_string()))
    }

    pub fn get(&self, session_id: &str) -> Result<Session, StoreError> {
        let handle = self.handle(session_id)?;
        let s = handle.lock().unwrap_or_else(|p| p.into_inner()).clone();
        Ok(s)
    }

    /// Validates, logs, then applies the turn. `session` is the locked value
    /// obtained through [`SessionStore::handle`].
    pub fn append_turn(
        &self,
        session: &mut Session,
        turn: ConversationTurn,
    ) -> Result<(), StoreError> {
        let next = session.append_turn(turn.clone())?;
        self.write(&StoreEvent::TurnAppended {
            session_id: session.session_id.clone(),
            turn,
        })?;
        *session = next;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All sessions, sorted by id.
    pub fn snapshot(&self) -> Vec<Session> {
        let handles: Vec<SessionHandle> = self
            .sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .values()
            .cloned()
            .collect();
        let mut out: Vec<Session> = handles
            .iter()
            .map(|h| h.lock().unwrap_or_else(|p| p.into_inner()).clone())
            .collect();
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        out
    }
}
