use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AnnotationError, Result};
use crate::clock::{Clock, SystemClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AuditAction {
    Route,
    Submit,
    Aggregate,
    Adjudicate,
    Override,
    Escalate,
    PolicyUpdate,
    ModelLoad,
    Export,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    /// Starts at 1, no gaps.
    pub seq: u64,
    pub actor: String,
    pub action: AuditAction,
    /// Record, report or artifact the event concerns.
    pub subject: String,
    /// SHA-256 of the JSON payload.
    pub payload_digest: String,
    pub timestamp_ms: i64,
}

struct Inner {
    events: Vec<AuditEvent>,
    sink: Option<File>,
}

/// Append-only audit trail. Sequence numbers are assigned under one lock, so
/// concurrent appends stay gapless and strictly increasing.
#[derive(Clone)]
pub struct AuditLog {
    inner: Arc<Mutex<Inner>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog").field("len", &self.len()).finish()
    }
}

impl Default for AuditLog {
    fn default() -> Self {
        Self::in_memory(Arc::new(SystemClock))
    }
}

pub fn payload_digest<T: Serialize + ?Sized>(payload: &T) -> String {
    let bytes = serde_json::to_vec(payload).expect("audit payload serializes");
    hex::encode(Sha256::digest(bytes))
}

impl AuditLog {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                events: Vec::new(),
                sink: None,
            })),
            clock,
        }
    }

    /// Opens (or creates) a JSONL file, replays existing events and appends
    /// new ones to it.
    pub fn open(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self> {
        let path = path.as_ref();
        let mut events = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: AuditEvent = serde_json::from_str(&line).map_err(|e| AnnotationError::Corrupt {
                    what: format!("{}:{}", path.display(), i + 1),
                    message: e.to_string(),
                })?;
                if ev.seq != events.len() as u64 + 1 {
                    return Err(AnnotationError::Corrupt {
                        what: path.display().to_string(),
                        message: format!("sequence gap at {}", ev.seq),
                    });
                }
                events.push(ev);
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Arc::new(Mutex::new(Inner {
                events,
                sink: Some(sink),
            })),
            clock,
        })
    }

    pub fn append<T: Serialize + ?Sized>(
        &self,
        actor: &str,
        action: AuditAction,
        subject: &str,
        payload: &T,
    ) -> Result<AuditEvent> {
        let digest = payload_digest(payload);
        let mut inner = self.inner.lock().expect("audit lock poisoned");
        let ev = AuditEvent {
            seq: inner.events.len() as u64 + 1,
            actor: actor.to_string(),
            action,
            subject: subject.to_string(),
            payload_digest: digest,
            timestamp_ms: self.clock.now_ms(),
        };
        if let Some(sink) = inner.sink.as_mut() {
            let line = serde_json::to_string(&ev).expect("audit event serializes");
            writeln!(sink, "{line}")?;
            sink.flush()?;
        }
        inner.events.push(ev.clone());
        Ok(ev)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("audit lock poisoned").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.inner.lock().expect("audit lock poisoned").events.clone()
    }

    /// Events with `seq > after`.
    pub fn since(&self, after: u64) -> Vec<AuditEvent> {
        let inner = self.inner.lock().expect("audit lock poisoned");
        inner.events.iter().skip(after as usize).cloned().collect()
    }

    pub fn for_subject(&self, subject: &str) -> Vec<AuditEvent> {
        let inner = self.inner.lock().expect("audit lock poisoned");
        inner.events.iter().filter(|e| e.subject == subject).cloned().collect()
    }
}
