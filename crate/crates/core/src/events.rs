//! Live event broadcast. Each subscriber gets its own bounded buffer; a
//! subscriber that falls behind loses events instead of stalling the
//! pipeline.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::domain::{FrameVerdict, MesScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Scored,
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEvent {
    pub frame: u64,
    pub ts: u64,
    pub kind: VerdictKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mes: Option<MesScore>,
    /// Whether the current view is good enough to score.
    pub suitable: bool,
}

impl From<&FrameVerdict> for VerdictEvent {
    fn from(v: &FrameVerdict) -> Self {
        let mes = v.scored_frame().map(|s| s.mes());
        Self {
            frame: v.frame_index,
            ts: v.timestamp_ms,
            kind: if mes.is_some() {
                VerdictKind::Scored
            } else {
                VerdictKind::Discarded
            },
            mes,
            suitable: mes.is_some(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleState {
    Idle,
    Running,
    Review,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "evt", rename_all = "snake_case")]
pub enum Event {
    Verdict(VerdictEvent),
    Lifecycle {
        state: LifecycleState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session_id: Option<u64>,
    },
}

impl Event {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events always serialize")
    }
}

/// Default per-subscriber buffer, in events.
pub const SUBSCRIBER_BUFFER: usize = 1024;

#[derive(Debug, Default)]
pub struct EventBus {
    subscribers: Mutex<Vec<SyncSender<Arc<str>>>>,
}

impl EventBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Receives serialized events (one JSON object each, no newline).
    pub fn subscribe(&self, buffer: usize) -> Receiver<Arc<str>> {
        let (tx, rx) = sync_channel(buffer.max(1));
        self.subscribers.lock().expect("event bus lock").push(tx);
        rx
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.lock().expect("event bus lock").len()
    }

    /// Never blocks. Returns how many subscribers missed the event.
    pub fn publish(&self, event: &Event) -> usize {
        let line: Arc<str> = event.to_line().into();
        let mut missed = 0;
        self.subscribers
            .lock()
            .expect("event bus lock")
            .retain(|tx| match tx.try_send(line.clone()) {
                Ok(()) => true,
                Err(TrySendError::Full(_)) => {
                    missed += 1;
                    true
                }
                Err(TrySendError::Disconnected(_)) => false,
            });
        missed
    }
}
