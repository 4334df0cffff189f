use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{EscalationPolicy, RailcarReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ReportCreated,
    ReportUpdated,
    Escalation,
    PolicyUpdated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineEvent {
    /// Cursor; starts at 1 with no gaps.
    pub seq: u64,
    pub kind: EventKind,
    pub timestamp_ms: i64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub report: Option<RailcarReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub policy: Option<EscalationPolicy>,
}

type Listener = Box<dyn Fn(u64) + Send + Sync>;

/// Operator stream. Readers poll with a cursor; listeners are told the new
/// head so push transports can wake up.
#[derive(Default, Clone)]
pub struct EventLog {
    events: Arc<Mutex<Vec<PipelineEvent>>>,
    listeners: Arc<Mutex<Vec<Listener>>>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("head", &self.head()).finish()
    }
}

impl EventLog {
    pub(crate) fn publish(
        &self,
        kind: EventKind,
        timestamp_ms: i64,
        report: Option<RailcarReport>,
        policy: Option<EscalationPolicy>,
    ) -> u64 {
        let seq = {
            let mut ev = self.events.lock().expect("event lock");
            let seq = ev.len() as u64 + 1;
            ev.push(PipelineEvent {
                seq,
                kind,
                timestamp_ms,
                report,
                policy,
            });
            seq
        };
        for l in self.listeners.lock().expect("listener lock").iter() {
            l(seq);
        }
        seq
    }

    pub fn subscribe(&self, listener: impl Fn(u64) + Send + Sync + 'static) {
        self.listeners.lock().expect("listener lock").push(Box::new(listener));
    }

    /// Events with `seq > cursor`, at most `limit`.
    pub fn since(&self, cursor: u64, limit: usize) -> Vec<PipelineEvent> {
        let ev = self.events.lock().expect("event lock");
        let start = (cursor as usize).min(ev.len());
        ev[start..].iter().take(limit).cloned().collect()
    }

    pub fn head(&self) -> u64 {
        self.events.lock().expect("event lock").len() as u64
    }
}
