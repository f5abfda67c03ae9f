//! Emulation event trace: totally ordered by the deterministic scheduler,
//! exportable as JSON lines.

use serde::{Deserialize, Serialize};

pub const MPE_CORE: i32 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmuEvent {
    pub cycle: u64,
    /// -1 is the management core, 0..63 are compute cores.
    pub core: i32,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    DispatchWrite { word: u8, value: u64 },
    MailboxPoll { value: u64 },
    Broadcast { to: u8 },
    TaskStart { entry: u64 },
    TaskEnd { entry: u64 },
    CacheFlush { writebacks: u64 },
    Sync { barrier: SyncBarrier, phase: SyncPhase, generation: u64 },
    LockAcquire,
    LockRelease,
    Dma { put: bool, bytes: u64 },
    Rma { to: u8, bytes: u64 },
    ServerStart,
    ServerShutdown,
    Fault { what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncBarrier {
    Task,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncPhase {
    Arrive,
    Release,
}

#[derive(Debug, Default)]
pub struct Trace {
    pub enabled: bool,
    pub events: Vec<EmuEvent>,
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}
