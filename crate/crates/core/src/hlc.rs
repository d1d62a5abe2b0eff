//! Hybrid logical clock.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Millis;

/// Default tolerated gap between local physical time and an observed remote
/// timestamp: 24 hours.
pub const DEFAULT_MAX_DRIFT_MS: Millis = 24 * 60 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub String);

impl ReplicaId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Totally ordered by `(physical_ms, counter, replica_id)`; the derived `Ord`
/// relies on that field order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HlcTimestamp {
    pub physical_ms: Millis,
    pub counter: u32,
    pub replica_id: ReplicaId,
}

impl HlcTimestamp {
    pub fn new(physical_ms: Millis, counter: u32, replica_id: impl Into<String>) -> Self {
        Self {
            physical_ms,
            counter,
            replica_id: ReplicaId::new(replica_id),
        }
    }

    pub fn zero(replica_id: ReplicaId) -> Self {
        Self {
            physical_ms: 0,
            counter: 0,
            replica_id,
        }
    }
}

impl fmt::Display for HlcTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.physical_ms, self.counter, self.replica_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClockError {
    #[error("CLOCK_DRIFT: local {local_ms} ms vs observed {observed_ms} ms exceeds {bound_ms} ms")]
    ClockDrift {
        local_ms: Millis,
        observed_ms: Millis,
        bound_ms: Millis,
    },
}

/// Per-replica clock state. `last` is the most recent timestamp issued.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HlcClock {
    last: HlcTimestamp,
    max_drift_ms: Millis,
}

impl HlcClock {
    pub fn new(replica_id: ReplicaId) -> Self {
        Self::with_drift_bound(replica_id, DEFAULT_MAX_DRIFT_MS)
    }

    pub fn with_drift_bound(replica_id: ReplicaId, max_drift_ms: Millis) -> Self {
        Self {
            last: HlcTimestamp::zero(replica_id),
            max_drift_ms,
        }
    }

    /// Resume from a persisted last timestamp.
    pub fn resume(last: HlcTimestamp, max_drift_ms: Millis) -> Self {
        Self { last, max_drift_ms }
    }

    pub fn last(&self) -> &HlcTimestamp {
        &self.last
    }

    pub fn replica_id(&self) -> &ReplicaId {
        &self.last.replica_id
    }

    /// Issue the next timestamp for a local event or the receipt of `observed`.
    ///
    /// The result is strictly greater than every timestamp previously issued
    /// by this clock and at least `observed`. On `CLOCK_DRIFT` the clock is
    /// left unchanged.
    pub fn tick(
        &mut self,
        physical_now: Millis,
        observed: Option<&HlcTimestamp>,
    ) -> Result<HlcTimestamp, ClockError> {
        let next = hlc_event(&self.last, physical_now, observed, self.max_drift_ms)?;
        self.last = next.clone();
        Ok(next)
    }
}

/// Pure HLC step: send/local event when `observed` is `None`, receive
/// otherwise.
pub fn hlc_event(
    prev: &HlcTimestamp,
    physical_now: Millis,
    observed: Option<&HlcTimestamp>,
    max_drift_ms: Millis,
) -> Result<HlcTimestamp, ClockError> {
    let replica_id = prev.replica_id.clone();
    let Some(obs) = observed else {
        let (physical_ms, counter) = if physical_now > prev.physical_ms {
            (physical_now, 0)
        } else {
            (prev.physical_ms, prev.counter + 1)
        };
        return Ok(HlcTimestamp {
            physical_ms,
            counter,
            replica_id,
        });
    };

    if physical_now.abs_diff(obs.physical_ms) > max_drift_ms {
        return Err(ClockError::ClockDrift {
            local_ms: physical_now,
            observed_ms: obs.physical_ms,
            bound_ms: max_drift_ms,
        });
    }

    let physical_ms = prev.physical_ms.max(obs.physical_ms).max(physical_now);
    let counter = match (physical_ms == prev.physical_ms, physical_ms == obs.physical_ms) {
        (true, true) => prev.counter.max(obs.counter) + 1,
        (true, false) => prev.counter + 1,
        (false, true) => obs.counter + 1,
        (false, false) => 0,
    };
    Ok(HlcTimestamp {
        physical_ms,
        counter,
        replica_id,
    })
}
