//! Simulation trace: an ordered record of commands, message fates and
//! assertion outcomes, written as JSON lines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{FacilityId, Millis};
use crate::netsim::link::LinkId;
use crate::netsim::script::{Check, Command};
use crate::ussd::pdu::{Direction, PduKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    SyncPush,
    SyncAck,
    PullRequest,
    PullResponse,
    UssdRequest,
    UssdResponse,
    UplinkRequest,
    UplinkResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Fate {
    Delivered,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    Command {
        command: Command,
    },
    Send {
        msg: u64,
        link: LinkId,
        kind: MessageKind,
        fate: Fate,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deliver_at: Option<Millis>,
    },
    Deliver {
        msg: u64,
        kind: MessageKind,
        result: String,
    },
    Write {
        facility: FacilityId,
        result: String,
    },
    Sync {
        facility: FacilityId,
        result: String,
    },
    Ussd {
        msisdn: String,
        session_id: String,
        direction: Direction,
        kind: PduKind,
        text: String,
    },
    Expired {
        sessions: usize,
    },
    Assert {
        check: Check,
        verdict: Verdict,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub at_ms: Millis,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionFailure {
    pub at_ms: Millis,
    pub detail: String,
}

impl Trace {
    pub fn push(&mut self, at_ms: Millis, event: TraceEvent) {
        self.entries.push(TraceEntry { at_ms, event });
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("trace entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Trace { entries })
    }

    pub fn failures(&self) -> Vec<AssertionFailure> {
        self.entries
            .iter()
            .filter_map(|e| match &e.event {
                TraceEvent::Assert {
                    verdict: Verdict::Fail,
                    detail,
                    ..
                } => Some(AssertionFailure {
                    at_ms: e.at_ms,
                    detail: detail.clone(),
                }),
                _ => None,
            })
            .collect()
    }

    pub fn assertions(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.event, TraceEvent::Assert { .. }))
            .count()
    }

    /// Every message sent is exactly one of delivered (with exactly one
    /// arrival record) or dropped (with none).
    pub fn check_conservation(&self) -> Result<usize, String> {
        let mut sent: BTreeMap<u64, Fate> = BTreeMap::new();
        let mut arrived: BTreeMap<u64, usize> = BTreeMap::new();
        for e in &self.entries {
            match &e.event {
                TraceEvent::Send { msg, fate, .. } => {
                    if sent.insert(*msg, *fate).is_some() {
                        return Err(format!("message {msg} sent twice"));
                    }
                }
                TraceEvent::Deliver { msg, .. } => *arrived.entry(*msg).or_default() += 1,
                _ => {}
            }
        }
        for (msg, fate) in &sent {
            let n = arrived.get(msg).copied().unwrap_or(0);
            match (fate, n) {
                (Fate::Delivered, 1) | (Fate::Dropped, 0) => {}
                _ => return Err(format!("message {msg} is {fate:?} with {n} arrivals")),
            }
        }
        if let Some(msg) = arrived.keys().find(|m| !sent.contains_key(m)) {
            return Err(format!("message {msg} arrived without being sent"));
        }
        Ok(sent.len())
    }
}
