//! USSD gateway: session lifecycle, PIN authentication and routing of
//! input into the menu state machine.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;

use crate::auth::{Channel, Identity};
use crate::model::Millis;
use crate::service::{EhrService, ServiceError, SharedService};
use crate::ussd::menu::{CommandResult, EhrCommand, Menu, MenuSession, Step, INPUT_TOO_LONG, UNAVAILABLE};
use crate::ussd::pdu::{PduKind, UssdPdu, MAX_PAYLOAD_CHARS};

pub const DEFAULT_SHORTCODE: &str = "*384#";
pub const DEFAULT_SESSION_TIMEOUT_MS: Millis = 90_000;

pub const ENTER_PIN: &str = "Enter PIN:";
pub const WRONG_PIN: &str = "Wrong PIN.";
pub const LOCKED_OUT: &str = "Account locked. Try later.";
pub const NOT_REGISTERED: &str = "This number is not registered.";
pub const SESSION_EXPIRED: &str = "Session expired. Dial again.";
pub const UNKNOWN_CODE: &str = "Unknown service code.";

/// Closed sessions are forgotten after this many timeouts.
const CLOSED_RETENTION_FACTOR: Millis = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    AwaitPin,
    Menu,
    Prompt,
    Closed,
}

#[derive(Debug, Clone)]
pub struct UssdSession {
    pub session_id: String,
    pub msisdn: String,
    pub authenticated: Option<Identity>,
    pub menu: MenuSession,
    pub state: SessionState,
    pub created_at: Millis,
    pub last_activity: Millis,
}

impl UssdSession {
    fn close(&mut self) {
        self.state = SessionState::Closed;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PinCheck {
    Accepted(Identity),
    Wrong,
    Locked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unavailable;

/// What the gateway needs from the record system. `Err(Unavailable)` and
/// [`CommandResult::Unavailable`] mean the gateway cannot reach it.
pub trait UssdBackend {
    fn is_registered(&mut self, msisdn: &str, now: Millis) -> Result<bool, Unavailable>;
    fn check_pin(&mut self, msisdn: &str, pin: &str, now: Millis) -> Result<PinCheck, Unavailable>;
    fn execute(&mut self, identity: &Identity, command: &EhrCommand, now: Millis) -> CommandResult;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayConfig {
    pub shortcode: String,
    pub session_timeout_ms: Millis,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            shortcode: DEFAULT_SHORTCODE.into(),
            session_timeout_ms: DEFAULT_SESSION_TIMEOUT_MS,
        }
    }
}

#[derive(Debug, Default)]
struct Table {
    sessions: HashMap<String, Arc<Mutex<UssdSession>>>,
    live_by_msisdn: HashMap<String, String>,
}

/// Session table plus menu. PDUs for different sessions may be handled
/// concurrently; PDUs of one session are serialized by its lock.
#[derive(Debug)]
pub struct Gateway {
    config: GatewayConfig,
    menu: Arc<Menu>,
    table: Mutex<Table>,
}

fn clamp(text: String) -> String {
    if text.chars().count() <= MAX_PAYLOAD_CHARS {
        return text;
    }
    tracing::warn!(len = text.chars().count(), "response over USSD budget; truncating");
    text.chars().take(MAX_PAYLOAD_CHARS).collect()
}

impl Gateway {
    pub fn new(config: GatewayConfig, menu: Arc<Menu>) -> Self {
        Self {
            config,
            menu,
            table: Mutex::new(Table::default()),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn menu(&self) -> &Menu {
        &self.menu
    }

    pub fn session(&self, session_id: &str) -> Option<UssdSession> {
        let table = self.table.lock();
        table.sessions.get(session_id).map(|s| s.lock().clone())
    }

    pub fn session_state(&self, session_id: &str) -> Option<SessionState> {
        self.session(session_id).map(|s| s.state)
    }

    pub fn live_sessions(&self) -> usize {
        let table = self.table.lock();
        table
            .sessions
            .values()
            .filter(|s| s.lock().state != SessionState::Closed)
            .count()
    }

    /// Process one PDU and produce the reply. Every reply fits the payload
    /// budget.
    pub fn handle_pdu(&self, pdu: &UssdPdu, now: Millis, backend: &mut dyn UssdBackend) -> UssdPdu {
        let mut reply = match pdu.kind {
            PduKind::Begin => self.begin(pdu, now, backend),
            PduKind::Continue => self.input(pdu, now, backend),
            PduKind::End | PduKind::Abort => {
                self.close(&pdu.session_id);
                pdu.reply(PduKind::Abort, "")
            }
        };
        reply.text = clamp(reply.text);
        reply
    }

    fn close(&self, session_id: &str) {
        let mut table = self.table.lock();
        if let Some(s) = table.sessions.get(session_id).cloned() {
            let mut s = s.lock();
            s.close();
            if table.live_by_msisdn.get(&s.msisdn).map(String::as_str) == Some(session_id) {
                table.live_by_msisdn.remove(&s.msisdn);
            }
        }
    }

    fn begin(&self, pdu: &UssdPdu, now: Millis, backend: &mut dyn UssdBackend) -> UssdPdu {
        if pdu.text.trim() != self.config.shortcode {
            return pdu.reply(PduKind::End, UNKNOWN_CODE);
        }
        match backend.is_registered(&pdu.msisdn, now) {
            Err(Unavailable) => return pdu.reply(PduKind::End, UNAVAILABLE),
            Ok(false) => return pdu.reply(PduKind::End, NOT_REGISTERED),
            Ok(true) => {}
        }
        let session = UssdSession {
            session_id: pdu.session_id.clone(),
            msisdn: pdu.msisdn.clone(),
            authenticated: None,
            menu: MenuSession::new(&self.menu),
            state: SessionState::AwaitPin,
            created_at: now,
            last_activity: now,
        };
        let mut table = self.table.lock();
        // One live dialogue per phone: a new BEGIN aborts the previous one.
        if let Some(old) = table.live_by_msisdn.remove(&pdu.msisdn) {
            if let Some(s) = table.sessions.get(&old) {
                s.lock().close();
            }
        }
        if let Some(existing) = table.sessions.get(&pdu.session_id) {
            existing.lock().close();
        }
        table
            .live_by_msisdn
            .insert(pdu.msisdn.clone(), pdu.session_id.clone());
        table
            .sessions
            .insert(pdu.session_id.clone(), Arc::new(Mutex::new(session)));
        pdu.reply(PduKind::Continue, ENTER_PIN)
    }

    fn input(&self, pdu: &UssdPdu, now: Millis, backend: &mut dyn UssdBackend) -> UssdPdu {
        let expired = || pdu.reply(PduKind::End, SESSION_EXPIRED);
        let Some(handle) = self.table.lock().sessions.get(&pdu.session_id).cloned() else {
            return expired();
        };
        let mut session = handle.lock();
        if session.state == SessionState::Closed || session.msisdn != pdu.msisdn {
            return expired();
        }
        if now.saturating_sub(session.last_activity) > self.config.session_timeout_ms {
            drop(session);
            self.close(&pdu.session_id);
            return expired();
        }
        session.last_activity = now.max(session.last_activity);

        if !pdu.within_budget() {
            let screen = match session.state {
                SessionState::AwaitPin => ENTER_PIN.to_owned(),
                _ => session.menu.render(&self.menu, None),
            };
            return pdu.reply(PduKind::Continue, format!("{INPUT_TOO_LONG}\n{screen}"));
        }

        let (kind, text) = match session.state {
            SessionState::AwaitPin => match backend.check_pin(&pdu.msisdn, pdu.text.trim(), now) {
                Ok(PinCheck::Accepted(identity)) => {
                    session.authenticated = Some(identity);
                    session.state = SessionState::Menu;
                    (PduKind::Continue, session.menu.render(&self.menu, None))
                }
                Ok(PinCheck::Wrong) => (PduKind::Continue, format!("{WRONG_PIN}\n{ENTER_PIN}")),
                Ok(PinCheck::Locked) => (PduKind::End, LOCKED_OUT.to_owned()),
                Err(Unavailable) => (PduKind::End, UNAVAILABLE.to_owned()),
            },
            SessionState::Menu | SessionState::Prompt => {
                let identity = session
                    .authenticated
                    .clone()
                    .expect("menu states are authenticated");
                let mut step = session.menu.step(&self.menu, &pdu.text);
                loop {
                    match step {
                        Step::Execute(cmd) => {
                            let result = backend.execute(&identity, &cmd, now);
                            step = session.menu.complete(&self.menu, result);
                        }
                        Step::Screen(text) => break (PduKind::Continue, text),
                        Step::End(text) => break (PduKind::End, text),
                    }
                }
            }
            SessionState::Closed => unreachable!("checked above"),
        };
        if kind == PduKind::End {
            drop(session);
            self.close(&pdu.session_id);
        } else if session.state != SessionState::AwaitPin {
            session.state = if session.menu.is_prompting() {
                SessionState::Prompt
            } else {
                SessionState::Menu
            };
        }
        pdu.reply(kind, text)
    }

    /// Close every live session idle for longer than the timeout; returns
    /// how many were closed.
    pub fn expire_sessions(&self, now: Millis) -> usize {
        let timeout = self.config.session_timeout_ms;
        let mut table = self.table.lock();
        let mut expired = 0;
        let mut forget = Vec::new();
        let mut unbind = Vec::new();
        for (id, s) in &table.sessions {
            let mut s = s.lock();
            let idle = now.saturating_sub(s.last_activity);
            if s.state != SessionState::Closed && idle > timeout {
                s.close();
                unbind.push(s.msisdn.clone());
                expired += 1;
            } else if s.state == SessionState::Closed && idle > timeout * CLOSED_RETENTION_FACTOR {
                forget.push(id.clone());
            }
        }
        for m in unbind {
            table.live_by_msisdn.remove(&m);
        }
        for id in forget {
            table.sessions.remove(&id);
        }
        expired
    }
}

/// Run a menu command against the record service on behalf of `identity`.
pub fn run_command(service: &mut EhrService, identity: &Identity, command: &EhrCommand, now: Millis) -> CommandResult {
    let caller = identity.into();
    let outcome: Result<CommandResult, ServiceError> = match command {
        EhrCommand::SelectPatient { patient_id } => service
            .get_patient(&caller, patient_id, now)
            .map(CommandResult::Patient),
        EhrCommand::PatientHistory { patient_id } => service
            .patient_history(&caller, patient_id, now)
            .map(CommandResult::History),
        EhrCommand::ListPrescriptions { patient_id } | EhrCommand::RefillCandidates { patient_id } => service
            .list_prescriptions(&caller, patient_id, now)
            .map(CommandResult::Prescriptions),
        EhrCommand::RequestRefill { rx_id } => service
            .request_refill(&caller, rx_id, now)
            .map(|_| CommandResult::Done),
        EhrCommand::RecordObservation { patient_id, text } => service
            .record_observation(&caller, patient_id, text, now)
            .map(|_| CommandResult::Done),
        EhrCommand::RecordNote { patient_id, text } => service
            .record_note(&caller, patient_id, text, now)
            .map(|_| CommandResult::Done),
        EhrCommand::FacilityInbox => service
            .facility_inbox(&caller, None, 20, now)
            .map(CommandResult::Inbox),
    };
    outcome.unwrap_or_else(|e| match e.status() {
        404 => CommandResult::NotFound,
        401 | 403 => CommandResult::Denied,
        500 => CommandResult::Unavailable,
        _ => CommandResult::Failed(e.code().to_owned()),
    })
}

/// PIN check through the service (audited as a login).
pub fn check_pin(service: &mut EhrService, msisdn: &str, pin: &str, now: Millis) -> PinCheck {
    let channel = Channel::Ussd {
        msisdn: msisdn.to_owned(),
        pin: pin.to_owned(),
    };
    match service.login(&channel, now) {
        Ok(identity) => PinCheck::Accepted(identity),
        Err(e) if e.code() == "LOCKED" => PinCheck::Locked,
        Err(_) => PinCheck::Wrong,
    }
}

/// Backend talking directly to a shared in-process service.
#[derive(Debug, Clone)]
pub struct ServiceBackend {
    pub service: SharedService,
}

impl UssdBackend for ServiceBackend {
    fn is_registered(&mut self, msisdn: &str, _now: Millis) -> Result<bool, Unavailable> {
        Ok(self.service.lock().is_msisdn_registered(msisdn))
    }

    fn check_pin(&mut self, msisdn: &str, pin: &str, now: Millis) -> Result<PinCheck, Unavailable> {
        Ok(check_pin(&mut self.service.lock(), msisdn, pin, now))
    }

    fn execute(&mut self, identity: &Identity, command: &EhrCommand, now: Millis) -> CommandResult {
        run_command(&mut self.service.lock(), identity, command, now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{AuthPolicy, Enrollment};
    use crate::model::{Clinician, Facility, Modality, Role, Sex, Zone};
    use crate::store::{Mutation, NewPatient, NewPrescription};
    use crate::ussd::pdu::PduKind::*;
    use chrono::NaiveDate;

    const T0: Millis = 1_709_251_200_000;
    const PHONE: &str = "+255700000001";

    fn fixture() -> (Gateway, ServiceBackend) {
        let mut s = EhrService::in_memory(
            AuthPolicy {
                hash_iterations: 1_000,
                ..AuthPolicy::default()
            },
            11,
        );
        let setup = [
            Mutation::RegisterZone(Zone {
                zone_id: "Z1".into(),
                name: "Z".into(),
            }),
            Mutation::RegisterFacility(Facility {
                facility_id: "H1".into(),
                name: "H1".into(),
                zone_id: "Z1".into(),
                modality: Modality::UES,
            }),
            Mutation::RegisterClinician(Clinician {
                clinician_id: "N1".into(),
                name: "Nurse".into(),
                role: Role::Nurse,
                facility_id: Some("H1".into()),
            }),
            Mutation::RegisterPatient(NewPatient {
                patient_id: Some("P-1".into()),
                name: "Amina Diallo".into(),
                birth_date: NaiveDate::from_ymd_opt(1990, 1, 1).unwrap(),
                sex: Sex::F,
                zone_id: "Z1".into(),
                allergies: Default::default(),
            }),
        ];
        for m in &setup {
            s.system_commit(m, T0).unwrap();
        }
        s.enroll(
            &Enrollment {
                clinician_id: "N1".into(),
                role: Role::Nurse,
                msisdn: Some(PHONE.into()),
                pin: Some("2468".into()),
                password: None,
            },
            T0,
        )
        .unwrap();
        let physician = Identity::service("N1", Role::Physician);
        s.add_prescription(
            &physician.into(),
            NewPrescription {
                rx_id: Some("RX-1".into()),
                patient_id: "P-1".into(),
                drug_code: "AMOX".into(),
                dose: "500mg".into(),
                refills: 2,
                prescriber_id: Some("N1".into()),
                prescribed_at: None,
            },
            T0,
        )
        .unwrap();
        let gw = Gateway::new(GatewayConfig::default(), Arc::new(Menu::default_tree()));
        (gw, ServiceBackend { service: s.into_shared() })
    }

    fn send(gw: &Gateway, b: &mut ServiceBackend, sid: &str, kind: PduKind, text: &str, t: Millis) -> UssdPdu {
        let reply = gw.handle_pdu(&UssdPdu::new(sid, PHONE, kind, text), t, b);
        assert!(reply.within_budget());
        reply
    }

    #[test]
    fn begin_prompts_for_pin() {
        let (gw, mut b) = fixture();
        let r = send(&gw, &mut b, "s1", Begin, "*384#", T0);
        assert_eq!((r.kind, r.text.as_str()), (Continue, ENTER_PIN));
        assert_eq!(gw.session_state("s1"), Some(SessionState::AwaitPin));
    }

    #[test]
    fn unregistered_and_unknown_sessions_end() {
        let (gw, mut b) = fixture();
        let r = gw.handle_pdu(&UssdPdu::begin("s", "+1999", "*384#"), T0, &mut b);
        assert_eq!((r.kind, r.text.as_str()), (End, NOT_REGISTERED));
        let r = send(&gw, &mut b, "nope", Continue, "1", T0);
        assert_eq!((r.kind, r.text.as_str()), (End, SESSION_EXPIRED));
    }

    #[test]
    fn refill_walk_completes_in_five_exchanges() {
        let (gw, mut b) = fixture();
        let inputs = [(Begin, "*384#"), (Continue, "2468"), (Continue, "1"), (Continue, "P-1"), (Continue, "3")];
        let mut last = None;
        for (i, (k, text)) in inputs.iter().enumerate() {
            last = Some(send(&gw, &mut b, "s1", *k, text, T0 + i as Millis * 1000));
        }
        let last = last.unwrap();
        assert_eq!((last.kind, last.text.as_str()), (End, "Refill requested."));
        assert_eq!(gw.session_state("s1"), Some(SessionState::Closed));
        let r = send(&gw, &mut b, "s1", Continue, "1", T0 + 6000);
        assert_eq!((r.kind, r.text.as_str()), (End, SESSION_EXPIRED));
    }

    #[test]
    fn wrong_pins_then_lock() {
        let (gw, mut b) = fixture();
        send(&gw, &mut b, "s1", Begin, "*384#", T0);
        for _ in 0..2 {
            let r = send(&gw, &mut b, "s1", Continue, "0000", T0);
            assert_eq!(r.text, "Wrong PIN.\nEnter PIN:");
        }
        let r = send(&gw, &mut b, "s1", Continue, "0000", T0);
        assert_eq!(r.kind, Continue);
        let r = send(&gw, &mut b, "s1", Continue, "2468", T0);
        assert_eq!((r.kind, r.text.as_str()), (End, LOCKED_OUT));
    }

    #[test]
    fn overlong_input_reprompts() {
        let (gw, mut b) = fixture();
        send(&gw, &mut b, "s1", Begin, "*384#", T0);
        let r = send(&gw, &mut b, "s1", Continue, &"9".repeat(183), T0);
        assert_eq!((r.kind, r.text.as_str()), (Continue, "Input too long.\nEnter PIN:"));
    }

    #[test]
    fn expiry_counts_idle_sessions() {
        let (gw, mut b) = fixture();
        assert_eq!(gw.expire_sessions(T0), 0);
        send(&gw, &mut b, "s1", Begin, "*384#", T0);
        assert_eq!(gw.expire_sessions(T0 + 90_000), 0);
        assert_eq!(gw.expire_sessions(T0 + 91_000), 1);
        assert_eq!(gw.session_state("s1"), Some(SessionState::Closed));
    }

    #[test]
    fn second_begin_aborts_first() {
        let (gw, mut b) = fixture();
        send(&gw, &mut b, "s1", Begin, "*384#", T0);
        send(&gw, &mut b, "s2", Begin, "*384#", T0 + 1);
        assert_eq!(gw.session_state("s1"), Some(SessionState::Closed));
        assert_eq!(gw.live_sessions(), 1);
    }
}
