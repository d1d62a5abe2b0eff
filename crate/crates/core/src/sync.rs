//! Facility replica ("DB lite") and the cursor-based sync protocol.
//!
//! A replica accepts writes while disconnected, keeping them in its local
//! log. A sync round pushes the unacknowledged suffix of that log to the
//! central store and pulls the suffix of the central log past the replica's
//! pull cursor. Both directions merge with per-field last-writer-wins, so a
//! retried or reordered round can never diverge.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::Entropy;
use crate::event::ChangeEvent;
use crate::hlc::{HlcClock, HlcTimestamp, ReplicaId, DEFAULT_MAX_DRIFT_MS};
use crate::model::Millis;
use crate::store::{plan, stamp, EhrError, Mutation, Outcome, RecordReader};
use crate::view::View;

/// Request/response document exchanged by push and pull.
///
/// * push request: the replica's id, the local-log index of the first
///   event carried, and the events.
/// * push response: `central`, the acknowledged local-log index, no events.
/// * pull response: `central`, the central log length after the delta, and
///   the delta.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncDocument {
    pub replica_id: ReplicaId,
    pub cursor: u64,
    pub events: Vec<ChangeEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("CURSOR_OUT_OF_RANGE: cursor {cursor} beyond log length {len}")]
    CursorOutOfRange { cursor: u64, len: u64 },
    #[error("MALFORMED_EVENT: {0}")]
    Malformed(String),
    #[error("LINK_DOWN")]
    LinkDown,
    #[error("PARTIAL: pushed {pushed} events, pull interrupted")]
    Partial { pushed: usize },
    #[error("REJECTED: {0}")]
    Rejected(String),
    #[error("POWER_OFF")]
    PowerOff,
}

impl SyncError {
    pub fn code(&self) -> &'static str {
        match self {
            SyncError::CursorOutOfRange { .. } => "CURSOR_OUT_OF_RANGE",
            SyncError::Malformed(_) => "MALFORMED_EVENT",
            SyncError::LinkDown => "LINK_DOWN",
            SyncError::Partial { .. } => "PARTIAL",
            SyncError::Rejected(_) => "REJECTED",
            SyncError::PowerOff => "POWER_OFF",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub pushed: usize,
    pub pulled: usize,
    pub new_cursor: u64,
}

/// Events strictly after `cursor`, in log order.
pub fn compute_delta(log: &[ChangeEvent], cursor: u64) -> Result<&[ChangeEvent], SyncError> {
    let len = log.len() as u64;
    if cursor > len {
        return Err(SyncError::CursorOutOfRange { cursor, len });
    }
    Ok(&log[cursor as usize..])
}

/// Merge remote events into a view. All events are checked before any is
/// applied; returns how many were new.
pub fn apply_remote(view: &mut View, events: &[ChangeEvent]) -> Result<usize, SyncError> {
    for e in events {
        e.check_well_formed().map_err(SyncError::Malformed)?;
    }
    Ok(events.iter().filter(|e| view.apply(e)).count())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    LinkDown,
    Rejected(String),
}

/// How a replica reaches the central store.
pub trait SyncTransport {
    fn push(&mut self, doc: SyncDocument) -> Result<SyncDocument, TransportError>;
    fn pull(&mut self, replica: &ReplicaId, cursor: u64) -> Result<SyncDocument, TransportError>;
}

/// Direct in-process transport to a [`CentralStore`](crate::store::CentralStore).
pub struct DirectTransport<'a> {
    pub central: &'a mut crate::store::CentralStore,
    pub now: Millis,
}

impl SyncTransport for DirectTransport<'_> {
    fn push(&mut self, doc: SyncDocument) -> Result<SyncDocument, TransportError> {
        self.central
            .accept_push(&doc, self.now)
            .map_err(|e| TransportError::Rejected(e.to_string()))
    }

    fn pull(&mut self, _replica: &ReplicaId, cursor: u64) -> Result<SyncDocument, TransportError> {
        self.central
            .pull(cursor)
            .map_err(|e| TransportError::Rejected(e.to_string()))
    }
}

/// The part of a replica that survives a power cut.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurableReplica {
    pub local_log: Vec<ChangeEvent>,
    pub remote_log: Vec<ChangeEvent>,
    pub pull_cursor: u64,
    pub push_cursor: u64,
    pub clock: HlcTimestamp,
}

#[derive(Debug, Clone)]
pub struct Replica {
    id: ReplicaId,
    clock: HlcClock,
    view: View,
    durable: DurableReplica,
    powered: bool,
    entropy: Entropy,
}

impl RecordReader for Replica {
    fn view(&self) -> &View {
        &self.view
    }
}

impl Replica {
    pub fn new(id: ReplicaId, entropy: Entropy) -> Self {
        let clock = HlcClock::new(id.clone());
        Self {
            durable: DurableReplica {
                local_log: Vec::new(),
                remote_log: Vec::new(),
                pull_cursor: 0,
                push_cursor: 0,
                clock: clock.last().clone(),
            },
            id,
            clock,
            view: View::new(),
            powered: true,
            entropy,
        }
    }

    pub fn id(&self) -> &ReplicaId {
        &self.id
    }

    pub fn is_powered(&self) -> bool {
        self.powered
    }

    pub fn durable(&self) -> &DurableReplica {
        &self.durable
    }

    pub fn local_log(&self) -> &[ChangeEvent] {
        &self.durable.local_log
    }

    pub fn pull_cursor(&self) -> u64 {
        self.durable.pull_cursor
    }

    pub fn push_cursor(&self) -> u64 {
        self.durable.push_cursor
    }

    pub fn unpushed(&self) -> &[ChangeEvent] {
        &self.durable.local_log[self.durable.push_cursor as usize..]
    }

    /// Validate and commit a mutation against the local view. Needs no
    /// connectivity.
    pub fn local_apply(
        &mut self,
        mutation: &Mutation,
        now: Millis,
    ) -> Result<(ChangeEvent, Outcome), EhrError> {
        if !self.powered {
            return Err(EhrError::Storage("replica is powered off".into()));
        }
        let planned = plan(&self.view, mutation, now, &mut self.entropy)?;
        let event = stamp(&planned, &mut self.clock, now, &mut self.entropy);
        self.view.apply(&event);
        self.durable.local_log.push(event.clone());
        self.durable.clock = self.clock.last().clone();
        Ok((event, planned.outcome))
    }

    pub fn push_document(&self) -> SyncDocument {
        SyncDocument {
            replica_id: self.id.clone(),
            cursor: self.durable.push_cursor,
            events: self.unpushed().to_vec(),
        }
    }

    /// Record a push acknowledgement. Cursors only move forward.
    pub fn ack_push(&mut self, acked: u64) {
        let acked = acked.min(self.durable.local_log.len() as u64);
        self.durable.push_cursor = self.durable.push_cursor.max(acked);
    }

    /// Merge a pull response and advance the pull cursor.
    pub fn apply_pull(&mut self, doc: &SyncDocument, now: Millis) -> Result<usize, SyncError> {
        if !self.powered {
            return Err(SyncError::PowerOff);
        }
        for e in &doc.events {
            e.check_well_formed().map_err(SyncError::Malformed)?;
        }
        let mut applied = 0;
        let mut newest: Option<&HlcTimestamp> = None;
        for e in &doc.events {
            if self.view.apply(e) {
                applied += 1;
                self.durable.remote_log.push(e.clone());
                if newest.is_none_or(|n| &e.hlc > n) {
                    newest = Some(&e.hlc);
                }
            }
        }
        if let Some(hlc) = newest {
            if let Err(err) = self.clock.tick(now, Some(hlc)) {
                tracing::warn!(replica = %self.id, %err, "clock not advanced by pulled events");
            }
            self.durable.clock = self.clock.last().clone();
        }
        self.durable.pull_cursor = self.durable.pull_cursor.max(doc.cursor);
        Ok(applied)
    }

    /// One push-then-pull exchange. A failed push changes nothing; a failed
    /// pull after a successful push reports `PARTIAL` and is completed by
    /// simply running another round.
    pub fn sync_round(
        &mut self,
        transport: &mut dyn SyncTransport,
        now: Millis,
    ) -> Result<SyncReport, SyncError> {
        if !self.powered {
            return Err(SyncError::PowerOff);
        }
        let doc = self.push_document();
        let sent = doc.events.len();
        let ack = transport.push(doc).map_err(|e| match e {
            TransportError::LinkDown => SyncError::LinkDown,
            TransportError::Rejected(m) => SyncError::Rejected(m),
        })?;
        self.ack_push(ack.cursor);
        let pulled = match transport.pull(&self.id, self.durable.pull_cursor) {
            Ok(doc) => doc,
            Err(_) => return Err(SyncError::Partial { pushed: sent }),
        };
        let applied = self.apply_pull(&pulled, now)?;
        Ok(SyncReport {
            pushed: sent,
            pulled: applied,
            new_cursor: self.durable.pull_cursor,
        })
    }

    /// Lose everything not in durable storage.
    pub fn power_cut(&mut self) {
        self.powered = false;
        self.view = View::new();
        self.clock = HlcClock::new(self.id.clone());
    }

    /// Rebuild in-memory state from durable storage.
    pub fn power_restore(&mut self) {
        let mut view = View::new();
        for e in self.durable.local_log.iter().chain(&self.durable.remote_log) {
            view.apply(e);
        }
        self.view = view;
        self.clock = HlcClock::resume(self.durable.clock.clone(), DEFAULT_MAX_DRIFT_MS);
        self.powered = true;
    }
}
