//! Scenario scripts: one header line followed by command lines, each a
//! UTF-8 JSON document.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FacilityId, Millis, PatientId, RxId, RxStatus};
use crate::netsim::link::{LinkId, LinkSchedule, ScheduleError};
use crate::seed::SeedData;
use crate::store::Mutation;

/// 2024-03-01T00:00:00Z; simulated time 0 maps here.
pub const DEFAULT_EPOCH_MS: Millis = 1_709_251_200_000;

fn default_epoch() -> Millis {
    DEFAULT_EPOCH_MS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioHeader {
    pub scenario: String,
    pub seed: u64,
    pub horizon_ms: Millis,
    #[serde(default = "default_epoch")]
    pub epoch_ms: Millis,
    /// Facilities running a replica.
    #[serde(default)]
    pub facilities: Vec<FacilityId>,
    #[serde(default)]
    pub phones: Vec<String>,
    /// Links not listed here are UP for the whole horizon.
    #[serde(default)]
    pub links: Vec<LinkSchedule>,
    /// Periodic sync for every facility, when set.
    #[serde(default)]
    pub sync_interval_ms: Option<Millis>,
    /// Loaded into the central store at time 0.
    #[serde(default)]
    pub setup: SeedData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Presence {
    Present,
    Missing,
}

/// Site name used by read assertions to mean the central store.
pub const CENTRAL_SITE: &str = "central";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    /// A read of the patient's history at `site` ("central" or a facility).
    Encounter {
        site: FacilityId,
        patient_id: PatientId,
        encounter_id: String,
        expect: Presence,
    },
    Patient {
        site: FacilityId,
        patient_id: PatientId,
        expect: Presence,
    },
    RxStatus {
        site: FacilityId,
        rx_id: RxId,
        status: RxStatus,
    },
    /// Every replica's registers equal the central store's.
    Converged,
    /// The phone's most recent session ended with `end_text`, within
    /// `max_exchanges` request/response pairs, every screen in budget.
    UssdCompleted {
        msisdn: String,
        max_exchanges: usize,
        end_text: String,
    },
    /// The most recent screen shown on the phone.
    UssdScreen { msisdn: String, text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    LinkUp { link: LinkId },
    LinkDown { link: LinkId },
    PowerCut { facility: FacilityId },
    PowerRestore { facility: FacilityId },
    /// A clinician's write at a facility, applied to its replica.
    Write {
        facility: FacilityId,
        mutation: Mutation,
    },
    Sync { facility: FacilityId },
    UssdDial { msisdn: String },
    UssdInput { msisdn: String, text: String },
    Assert(Check),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptLine {
    pub at_ms: Millis,
    #[serde(flatten)]
    pub command: Command,
}

#[derive(Debug, Clone)]
pub struct ScenarioScript {
    pub header: ScenarioHeader,
    pub commands: Vec<ScriptLine>,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("script has no header line")]
    MissingHeader,
    #[error("line {line}: at_ms {at} is before the previous command")]
    Unsorted { line: usize, at: Millis },
    #[error("line {line}: at_ms {at} is past the horizon {horizon}")]
    PastHorizon { line: usize, at: Millis, horizon: Millis },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("line {line}: unknown facility {facility}")]
    UnknownFacility { line: usize, facility: FacilityId },
    #[error("line {line}: unknown phone {msisdn}")]
    UnknownPhone { line: usize, msisdn: String },
}

impl ScenarioScript {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, hraw) = lines.next().ok_or(ScriptError::MissingHeader)?;
        let header: ScenarioHeader =
            serde_json::from_str(hraw).map_err(|source| ScriptError::Parse { line: hline, source })?;
        let mut commands = Vec::new();
        let mut line_numbers = Vec::new();
        for (line, raw) in lines {
            let cmd: ScriptLine =
                serde_json::from_str(raw).map_err(|source| ScriptError::Parse { line, source })?;
            commands.push(cmd);
            line_numbers.push(line);
        }
        let script = ScenarioScript { header, commands };
        script.validate_with_lines(&line_numbers)?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), ScriptError> {
        let lines: Vec<usize> = (2..self.commands.len() + 2).collect();
        self.validate_with_lines(&lines)
    }

    fn validate_with_lines(&self, lines: &[usize]) -> Result<(), ScriptError> {
        let h = &self.header;
        for s in &h.links {
            s.validate(h.horizon_ms)?;
        }
        let mut prev = 0;
        for (c, &line) in self.commands.iter().zip(lines) {
            if c.at_ms < prev {
                return Err(ScriptError::Unsorted { line, at: c.at_ms });
            }
            if c.at_ms > h.horizon_ms {
                return Err(ScriptError::PastHorizon {
                    line,
                    at: c.at_ms,
                    horizon: h.horizon_ms,
                });
            }
            prev = c.at_ms;
            let facility = match &c.command {
                Command::PowerCut { facility }
                | Command::PowerRestore { facility }
                | Command::Write { facility, .. }
                | Command::Sync { facility } => Some(facility),
                Command::LinkUp { link: LinkId::Internet(f) } | Command::LinkDown { link: LinkId::Internet(f) } => Some(f),
                _ => None,
            };
            if let Some(f) = facility {
                if !h.facilities.contains(f) {
                    return Err(ScriptError::UnknownFacility {
                        line,
                        facility: f.clone(),
                    });
                }
            }
            let phone = match &c.command {
                Command::UssdDial { msisdn } | Command::UssdInput { msisdn, .. } => Some(msisdn),
                Command::LinkUp { link: LinkId::UssdChannel(m) } | Command::LinkDown { link: LinkId::UssdChannel(m) } => Some(m),
                _ => None,
            };
            if let Some(m) = phone {
                if !h.phones.contains(m) {
                    return Err(ScriptError::UnknownPhone {
                        line,
                        msisdn: m.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Serialize back to JSON lines.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for c in &self.commands {
            out.push_str(&serde_json::to_string(c).expect("command serializes"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"scenario":"t","seed":1,"horizon_ms":1000,"facilities":["H1"],"phones":["+1"]}"#;

    #[test]
    fn parses_commands_and_round_trips() {
        let text = format!(
            "{HEADER}\n{}\n{}\n{}\n",
            r#"{"at_ms":0,"cmd":"link_down","link":"internet:H1"}"#,
            r#"{"at_ms":10,"cmd":"ussd_input","msisdn":"+1","text":"1"}"#,
            r#"{"at_ms":20,"cmd":"assert","check":"patient","site":"H1","patient_id":"P","expect":"MISSING"}"#,
        );
        let s = ScenarioScript::parse(&text).unwrap();
        assert_eq!(s.commands.len(), 3);
        let again = ScenarioScript::parse(&s.to_jsonl()).unwrap();
        assert_eq!(again.commands, s.commands);
    }

    #[test]
    fn rejects_unsorted_and_unknown_targets() {
        let text = format!(
            "{HEADER}\n{}\n{}\n",
            r#"{"at_ms":10,"cmd":"sync","facility":"H1"}"#,
            r#"{"at_ms":5,"cmd":"sync","facility":"H1"}"#,
        );
        assert!(matches!(ScenarioScript::parse(&text), Err(ScriptError::Unsorted { line: 3, .. })));
        let text = format!("{HEADER}\n{}\n", r#"{"at_ms":1,"cmd":"sync","facility":"H9"}"#);
        assert!(matches!(ScenarioScript::parse(&text), Err(ScriptError::UnknownFacility { .. })));
        assert!(matches!(ScenarioScript::parse(""), Err(ScriptError::MissingHeader)));
    }
}
