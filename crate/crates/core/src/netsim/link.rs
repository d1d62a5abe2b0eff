//! Links and their UP/DOWN schedules.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FacilityId, Millis};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinkId {
    /// A facility's internet connection to the central store.
    Internet(FacilityId),
    /// The radio channel between one phone and the USSD gateway.
    UssdChannel(String),
    /// The gateway's own path to the central store.
    GatewayUplink,
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkId::Internet(fid) => write!(f, "internet:{fid}"),
            LinkId::UssdChannel(m) => write!(f, "ussd:{m}"),
            LinkId::GatewayUplink => f.write_str("gateway-uplink"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("UNKNOWN_LINK: {0}")]
pub struct UnknownLink(pub String);

impl FromStr for LinkId {
    type Err = UnknownLink;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("internet", f)) if !f.is_empty() => Ok(LinkId::Internet(FacilityId::new(f))),
            Some(("ussd", m)) if !m.is_empty() => Ok(LinkId::UssdChannel(m.to_owned())),
            None if s == "gateway-uplink" => Ok(LinkId::GatewayUplink),
            _ => Err(UnknownLink(s.to_owned())),
        }
    }
}

impl Serialize for LinkId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LinkId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LinkState {
    Up,
    Down,
}

/// Half-open interval `[from_ms, to_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub from_ms: Millis,
    pub to_ms: Millis,
    pub state: LinkState,
}

pub const DEFAULT_LATENCY_MS: Millis = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSchedule {
    pub link: LinkId,
    pub intervals: Vec<Interval>,
    #[serde(default = "default_latency")]
    pub base_latency_ms: Millis,
    /// Upper bound of the uniform extra delay; 0 disables jitter.
    #[serde(default)]
    pub jitter_ms: Millis,
    #[serde(default)]
    pub jitter_seed: u64,
}

fn default_latency() -> Millis {
    DEFAULT_LATENCY_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("{link}: intervals must start at 0")]
    NotFromZero { link: String },
    #[error("{link}: interval {index} is empty or reversed")]
    Empty { link: String, index: usize },
    #[error("{link}: interval {index} does not start where the previous one ends")]
    Gap { link: String, index: usize },
    #[error("{link}: intervals end at {end}, before the horizon {horizon}")]
    Short { link: String, end: Millis, horizon: Millis },
}

impl LinkSchedule {
    /// UP for the whole horizon.
    pub fn always_up(link: LinkId, horizon_ms: Millis) -> Self {
        Self::constant(link, horizon_ms, LinkState::Up)
    }

    pub fn constant(link: LinkId, horizon_ms: Millis, state: LinkState) -> Self {
        Self {
            link,
            intervals: vec![Interval {
                from_ms: 0,
                to_ms: horizon_ms.max(1),
                state,
            }],
            base_latency_ms: DEFAULT_LATENCY_MS,
            jitter_ms: 0,
            jitter_seed: 0,
        }
    }

    /// Intervals are contiguous, ascending, start at 0 and reach the horizon.
    pub fn validate(&self, horizon_ms: Millis) -> Result<(), ScheduleError> {
        let link = self.link.to_string();
        let first = self.intervals.first().map_or(1, |i| i.from_ms);
        if first != 0 {
            return Err(ScheduleError::NotFromZero { link });
        }
        for (index, w) in self.intervals.iter().enumerate() {
            if w.to_ms <= w.from_ms {
                return Err(ScheduleError::Empty { link, index });
            }
            if index > 0 && self.intervals[index - 1].to_ms != w.from_ms {
                return Err(ScheduleError::Gap { link, index });
            }
        }
        let end = self.intervals.last().map_or(0, |i| i.to_ms);
        if end < horizon_ms {
            return Err(ScheduleError::Short { link, end, horizon: horizon_ms });
        }
        Ok(())
    }

    /// State at `t`; past the last interval the last state persists.
    pub fn state_at(&self, t: Millis) -> LinkState {
        self.intervals
            .iter()
            .find(|i| i.from_ms <= t && t < i.to_ms)
            .or(self.intervals.last())
            .map_or(LinkState::Up, |i| i.state)
    }

    /// Force `state` from `t` onwards, keeping the schedule contiguous.
    pub fn set_from(&mut self, t: Millis, state: LinkState) {
        let end = self.intervals.last().map_or(t + 1, |i| i.to_ms).max(t + 1);
        self.intervals.retain(|i| i.from_ms < t);
        if let Some(last) = self.intervals.last_mut() {
            last.to_ms = t;
        }
        match self.intervals.last_mut() {
            Some(last) if last.state == state => last.to_ms = end,
            _ => self.intervals.push(Interval {
                from_ms: t,
                to_ms: end,
                state,
            }),
        }
    }
}

/// Outcome of offering a message to a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Delivery {
    Delivered { at_ms: Millis },
    Dropped,
}

/// A link with its schedule and jitter source.
#[derive(Debug, Clone)]
pub struct Link {
    pub schedule: LinkSchedule,
    rng: ChaCha8Rng,
}

impl Link {
    pub fn new(schedule: LinkSchedule, world_seed: u64) -> Self {
        let seed = world_seed ^ schedule.jitter_seed.rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            schedule,
        }
    }

    pub fn state_at(&self, t: Millis) -> LinkState {
        self.schedule.state_at(t)
    }

    /// Delivery time for a message sent at `t`, or `Dropped` when the link
    /// is down at send time.
    pub fn offer(&mut self, t: Millis) -> Delivery {
        match self.state_at(t) {
            LinkState::Down => Delivery::Dropped,
            LinkState::Up => {
                let jitter = if self.schedule.jitter_ms == 0 {
                    0
                } else {
                    self.rng.gen_range(0..=self.schedule.jitter_ms)
                };
                Delivery::Delivered {
                    at_ms: t + self.schedule.base_latency_ms + jitter,
                }
            }
        }
    }
}
