//! Discrete-event world: central store, facility replicas, the USSD gateway
//! and phones, connected by scheduled links.
//!
//! Events are processed in `(time, insertion order)`. Facility sync is a
//! chain of four messages (push, ack, pull request, pull response), each
//! crossing the facility's internet link. Gateway calls to the central
//! store are synchronous round trips over the uplink whose latency delays
//! the reply to the phone.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::Serialize;
use thiserror::Error;

use crate::auth::{AuthPolicy, Identity};
use crate::entropy::Entropy;
use crate::hlc::ReplicaId;
use crate::model::{FacilityId, HistoryEntry, Millis, Role};
use crate::netsim::link::{Delivery, Link, LinkId, LinkSchedule, LinkState, UnknownLink};
use crate::netsim::script::{Check, Command, Presence, ScenarioHeader, ScenarioScript, CENTRAL_SITE};
use crate::netsim::trace::{Fate, MessageKind, Trace, TraceEvent, Verdict};
use crate::service::{Caller, EhrService, ServiceError};
use crate::store::RecordReader;
use crate::sync::{Replica, SyncDocument};
use crate::ussd::gateway::{self, Gateway, GatewayConfig, PinCheck, Unavailable, UssdBackend};
use crate::ussd::menu::{CommandResult, EhrCommand, Menu};
use crate::ussd::pdu::{Direction, PduKind, UssdPdu};
use crate::view::View;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    UnknownLink(#[from] UnknownLink),
    #[error("setup failed: {0}")]
    Setup(ServiceError),
    #[error("cannot move time back from {now} to {to}")]
    TimeReversal { now: Millis, to: Millis },
    #[error("invalid script: {0}")]
    Script(String),
}

#[derive(Debug, Clone)]
enum Payload {
    SyncPush { facility: FacilityId, doc: SyncDocument },
    SyncAck { facility: FacilityId, doc: SyncDocument },
    PullRequest { facility: FacilityId, cursor: u64 },
    PullResponse { facility: FacilityId, doc: SyncDocument },
    UssdRequest(UssdPdu),
    UssdResponse(UssdPdu),
}

impl Payload {
    fn kind(&self) -> MessageKind {
        match self {
            Payload::SyncPush { .. } => MessageKind::SyncPush,
            Payload::SyncAck { .. } => MessageKind::SyncAck,
            Payload::PullRequest { .. } => MessageKind::PullRequest,
            Payload::PullResponse { .. } => MessageKind::PullResponse,
            Payload::UssdRequest(_) => MessageKind::UssdRequest,
            Payload::UssdResponse(_) => MessageKind::UssdResponse,
        }
    }
}

#[derive(Debug, Clone)]
enum Event {
    Command(Command),
    Arrive { msg: u64, payload: Payload },
    SyncTimer,
}

#[derive(Debug)]
struct Queued {
    at: Millis,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// One dialogue as seen from the handset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PhoneSession {
    pub session_id: String,
    /// Completed request/response pairs.
    pub exchanges: usize,
    pub screens: Vec<String>,
    /// Set once the dialogue is over: END text, or ABORT.
    pub ended: Option<(PduKind, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Phone {
    pub msisdn: String,
    pub dials: u32,
    pub session: Option<PhoneSession>,
}

impl Phone {
    fn live(&mut self) -> Option<&mut PhoneSession> {
        self.session.as_mut().filter(|s| s.ended.is_none())
    }
}

/// Mutable pieces a message send needs; split out so the gateway backend
/// can borrow them while the gateway itself is borrowed.
struct Net<'a> {
    links: &'a mut BTreeMap<LinkId, Link>,
    trace: &'a mut Trace,
    next_msg: &'a mut u64,
}

impl Net<'_> {
    fn offer(&mut self, t: Millis, link: &LinkId, kind: MessageKind) -> (u64, Delivery) {
        let msg = *self.next_msg;
        *self.next_msg += 1;
        let delivery = self
            .links
            .get_mut(link)
            .expect("links are registered at construction")
            .offer(t);
        let (fate, deliver_at) = match delivery {
            Delivery::Delivered { at_ms } => (Fate::Delivered, Some(at_ms)),
            Delivery::Dropped => (Fate::Dropped, None),
        };
        self.trace.push(
            t,
            TraceEvent::Send {
                msg,
                link: link.clone(),
                kind,
                fate,
                deliver_at,
            },
        );
        (msg, delivery)
    }
}

struct SimBackend<'a> {
    central: &'a mut EhrService,
    net: Net<'a>,
    t: Millis,
    epoch: Millis,
}

impl SimBackend<'_> {
    /// Request over the uplink, run `f` centrally, response back. `None`
    /// when either leg is dropped.
    fn call<R>(&mut self, label: &str, f: impl FnOnce(&mut EhrService, Millis) -> R) -> Option<R> {
        let link = LinkId::GatewayUplink;
        let (msg, d) = self.net.offer(self.t, &link, MessageKind::UplinkRequest);
        let Delivery::Delivered { at_ms } = d else {
            return None;
        };
        self.t = at_ms;
        let r = f(self.central, self.epoch + self.t);
        self.net.trace.push(
            self.t,
            TraceEvent::Deliver {
                msg,
                kind: MessageKind::UplinkRequest,
                result: label.to_owned(),
            },
        );
        let (msg, d) = self.net.offer(self.t, &link, MessageKind::UplinkResponse);
        let Delivery::Delivered { at_ms } = d else {
            return None;
        };
        self.t = at_ms;
        self.net.trace.push(
            self.t,
            TraceEvent::Deliver {
                msg,
                kind: MessageKind::UplinkResponse,
                result: label.to_owned(),
            },
        );
        Some(r)
    }
}

impl UssdBackend for SimBackend<'_> {
    fn is_registered(&mut self, msisdn: &str, _now: Millis) -> Result<bool, Unavailable> {
        self.call("is_registered", |c, _| c.is_msisdn_registered(msisdn))
            .ok_or(Unavailable)
    }

    fn check_pin(&mut self, msisdn: &str, pin: &str, _now: Millis) -> Result<PinCheck, Unavailable> {
        self.call("check_pin", |c, now| gateway::check_pin(c, msisdn, pin, now))
            .ok_or(Unavailable)
    }

    fn execute(&mut self, identity: &Identity, command: &EhrCommand, _now: Millis) -> CommandResult {
        let label = format!("{command:?}").split([' ', '{']).next().unwrap_or("").to_owned();
        self.call(&label, |c, now| gateway::run_command(c, identity, command, now))
            .unwrap_or(CommandResult::Unavailable)
    }
}

/// The simulated world. All components read time from here.
pub struct World {
    name: String,
    seed: u64,
    epoch: Millis,
    horizon: Millis,
    now: Millis,
    sync_interval: Option<Millis>,
    central: EhrService,
    replicas: BTreeMap<FacilityId, Replica>,
    gateway: Gateway,
    phones: BTreeMap<String, Phone>,
    links: BTreeMap<LinkId, Link>,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    next_msg: u64,
    trace: Trace,
}

fn replica_caller(facility: &FacilityId) -> Caller {
    Caller::Known(Identity::service(format!("replica:{facility}"), Role::Admin))
}

/// Register-level digest of a world, for comparing runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldState {
    pub now: Millis,
    pub central: serde_json::Value,
    pub replicas: BTreeMap<String, serde_json::Value>,
    pub phones: BTreeMap<String, Phone>,
    pub pending_events: usize,
    pub trace: String,
}

impl World {
    pub fn new(header: &ScenarioHeader, seed: u64) -> Result<Self, SimError> {
        let mut central = EhrService::in_memory(AuthPolicy::default(), seed);
        header
            .setup
            .apply(&mut central, header.epoch_ms)
            .map_err(SimError::Setup)?;

        let mut links = BTreeMap::new();
        let mut wanted: Vec<LinkId> = header
            .facilities
            .iter()
            .map(|f| LinkId::Internet(f.clone()))
            .chain(header.phones.iter().map(|m| LinkId::UssdChannel(m.clone())))
            .collect();
        wanted.push(LinkId::GatewayUplink);
        for s in &header.links {
            if !wanted.contains(&s.link) {
                return Err(UnknownLink(s.link.to_string()).into());
            }
        }
        for id in wanted {
            let schedule = header
                .links
                .iter()
                .find(|s| s.link == id)
                .cloned()
                .unwrap_or_else(|| LinkSchedule::always_up(id.clone(), header.horizon_ms));
            links.insert(id, Link::new(schedule, seed));
        }

        let mut ids = Entropy::seeded(seed ^ 0x5eed_f00d);
        let replicas = header
            .facilities
            .iter()
            .map(|f| {
                let entropy = Entropy::seeded(ids.next_u64());
                (f.clone(), Replica::new(ReplicaId::new(f.as_str()), entropy))
            })
            .collect();
        let phones = header
            .phones
            .iter()
            .map(|m| {
                (
                    m.clone(),
                    Phone {
                        msisdn: m.clone(),
                        ..Phone::default()
                    },
                )
            })
            .collect();

        let mut world = World {
            name: header.scenario.clone(),
            seed,
            epoch: header.epoch_ms,
            horizon: header.horizon_ms,
            now: 0,
            sync_interval: header.sync_interval_ms.filter(|&i| i > 0),
            central,
            replicas,
            gateway: Gateway::new(GatewayConfig::default(), std::sync::Arc::new(Menu::default_tree())),
            phones,
            links,
            queue: BinaryHeap::new(),
            seq: 0,
            next_msg: 0,
            trace: Trace::default(),
        };
        if let Some(i) = world.sync_interval {
            world.enqueue(i, Event::SyncTimer);
        }
        Ok(world)
    }

    /// Build a world with every script command queued.
    pub fn from_script(script: &ScenarioScript, seed: Option<u64>) -> Result<Self, SimError> {
        script.validate().map_err(|e| SimError::Script(e.to_string()))?;
        let mut world = World::new(&script.header, seed.unwrap_or(script.header.seed))?;
        for line in &script.commands {
            world.schedule(line.at_ms, line.command.clone());
        }
        Ok(world)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn horizon(&self) -> Millis {
        self.horizon
    }

    pub fn central(&self) -> &EhrService {
        &self.central
    }

    pub fn replica(&self, facility: &FacilityId) -> Option<&Replica> {
        self.replicas.get(facility)
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn phone(&self, msisdn: &str) -> Option<&Phone> {
        self.phones.get(msisdn)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn link_state(&self, link: &LinkId, t: Millis) -> Result<LinkState, UnknownLink> {
        self.links
            .get(link)
            .map(|l| l.state_at(t))
            .ok_or_else(|| UnknownLink(link.to_string()))
    }

    pub fn schedule(&mut self, at_ms: Millis, command: Command) {
        self.enqueue(at_ms, Event::Command(command));
    }

    fn enqueue(&mut self, at: Millis, event: Event) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Queued { at, seq, event }));
    }

    fn net(&mut self) -> Net<'_> {
        Net {
            links: &mut self.links,
            trace: &mut self.trace,
            next_msg: &mut self.next_msg,
        }
    }

    /// Offer a message to a link: delivered after latency and jitter when
    /// UP, dropped when DOWN.
    pub fn deliver(&mut self, link: &LinkId, at_ms: Millis) -> Result<Delivery, UnknownLink> {
        self.links
            .get_mut(link)
            .map(|l| l.offer(at_ms))
            .ok_or_else(|| UnknownLink(link.to_string()))
    }

    fn send(&mut self, t: Millis, link: LinkId, payload: Payload) -> Fate {
        let (msg, delivery) = self.net().offer(t, &link, payload.kind());
        match delivery {
            Delivery::Delivered { at_ms } => {
                self.enqueue(at_ms, Event::Arrive { msg, payload });
                Fate::Delivered
            }
            Delivery::Dropped => Fate::Dropped,
        }
    }

    /// Process every event due at or before `to_ms`, then set the clock.
    pub fn advance(&mut self, to_ms: Millis) -> Result<(), SimError> {
        if to_ms < self.now {
            return Err(SimError::TimeReversal { now: self.now, to: to_ms });
        }
        while self.queue.peek().is_some_and(|Reverse(q)| q.at <= to_ms) {
            let Reverse(q) = self.queue.pop().expect("peeked");
            self.now = q.at;
            self.process(q.at, q.event);
        }
        self.now = to_ms;
        Ok(())
    }

    /// Let every in-flight message land. Timers stop at the horizon, so
    /// this terminates.
    pub fn drain(&mut self) {
        while let Some(Reverse(q)) = self.queue.pop() {
            self.now = self.now.max(q.at);
            self.process(q.at, q.event);
        }
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn process(&mut self, t: Millis, event: Event) {
        match event {
            Event::Command(c) => self.command(t, c),
            Event::Arrive { msg, payload } => self.arrive(t, msg, payload),
            Event::SyncTimer => {
                let facilities: Vec<FacilityId> = self.replicas.keys().cloned().collect();
                for f in facilities {
                    self.start_sync(t, &f);
                }
                if let Some(i) = self.sync_interval {
                    if t + i <= self.horizon {
                        self.enqueue(t + i, Event::SyncTimer);
                    }
                }
            }
        }
        let expired = self.gateway.expire_sessions(self.epoch + t);
        if expired > 0 {
            self.trace.push(t, TraceEvent::Expired { sessions: expired });
        }
    }

    fn set_link(&mut self, t: Millis, link: &LinkId, state: LinkState) {
        if let Some(l) = self.links.get_mut(link) {
            l.schedule.set_from(t, state);
        }
    }

    fn command(&mut self, t: Millis, command: Command) {
        self.trace.push(
            t,
            TraceEvent::Command {
                command: command.clone(),
            },
        );
        match command {
            Command::LinkUp { link } => {
                self.set_link(t, &link, LinkState::Up);
                if let LinkId::Internet(f) = &link {
                    self.start_sync(t, f);
                }
            }
            Command::LinkDown { link } => {
                self.set_link(t, &link, LinkState::Down);
                if let LinkId::UssdChannel(m) = &link {
                    self.abort_phone(t, m);
                }
            }
            Command::PowerCut { facility } => {
                self.set_link(t, &LinkId::Internet(facility.clone()), LinkState::Down);
                if let Some(r) = self.replicas.get_mut(&facility) {
                    r.power_cut();
                }
            }
            Command::PowerRestore { facility } => {
                self.set_link(t, &LinkId::Internet(facility.clone()), LinkState::Up);
                if let Some(r) = self.replicas.get_mut(&facility) {
                    if !r.is_powered() {
                        r.power_restore();
                    }
                }
                self.start_sync(t, &facility);
            }
            Command::Write { facility, mutation } => {
                let now = self.epoch + t;
                let result = match self.replicas.get_mut(&facility) {
                    None => "UNKNOWN_FACILITY".to_owned(),
                    Some(r) => match r.local_apply(&mutation, now) {
                        Ok((_, outcome)) => format!("OK {}", outcome.entity_id()),
                        Err(e) => e.code().to_owned(),
                    },
                };
                self.trace.push(t, TraceEvent::Write { facility, result });
            }
            Command::Sync { facility } => self.start_sync(t, &facility),
            Command::UssdDial { msisdn } => self.dial(t, &msisdn),
            Command::UssdInput { msisdn, text } => self.key_in(t, &msisdn, text),
            Command::Assert(check) => {
                let (verdict, detail) = match self.evaluate(&check) {
                    Ok(d) => (Verdict::Pass, d),
                    Err(d) => (Verdict::Fail, d),
                };
                self.trace.push(t, TraceEvent::Assert { check, verdict, detail });
            }
        }
    }

    fn sync_note(&mut self, t: Millis, facility: &FacilityId, result: impl Into<String>) {
        self.trace.push(
            t,
            TraceEvent::Sync {
                facility: facility.clone(),
                result: result.into(),
            },
        );
    }

    fn start_sync(&mut self, t: Millis, facility: &FacilityId) {
        let Some(replica) = self.replicas.get(facility) else {
            return;
        };
        if !replica.is_powered() {
            self.sync_note(t, facility, "POWER_OFF");
            return;
        }
        let doc = replica.push_document();
        let payload = Payload::SyncPush {
            facility: facility.clone(),
            doc,
        };
        if self.send(t, LinkId::Internet(facility.clone()), payload) == Fate::Dropped {
            self.sync_note(t, facility, "LINK_DOWN");
        }
    }

    fn arrive(&mut self, t: Millis, msg: u64, payload: Payload) {
        let kind = payload.kind();
        let now = self.epoch + t;
        let result = match payload {
            Payload::SyncPush { facility, doc } => {
                match self.central.sync_push(&replica_caller(&facility), &doc, now) {
                    Ok(ack) => {
                        let n = doc.events.len();
                        self.send(t, LinkId::Internet(facility.clone()), Payload::SyncAck { facility, doc: ack });
                        format!("accepted {n}")
                    }
                    Err(e) => e.code().to_owned(),
                }
            }
            Payload::SyncAck { facility, doc } => match self.replicas.get_mut(&facility) {
                Some(r) if r.is_powered() => {
                    r.ack_push(doc.cursor);
                    let cursor = r.pull_cursor();
                    let fate = self.send(
                        t,
                        LinkId::Internet(facility.clone()),
                        Payload::PullRequest {
                            facility: facility.clone(),
                            cursor,
                        },
                    );
                    if fate == Fate::Dropped {
                        self.sync_note(t, &facility, "PARTIAL");
                    }
                    format!("acked {}", doc.cursor)
                }
                _ => "POWER_OFF".to_owned(),
            },
            Payload::PullRequest { facility, cursor } => {
                match self.central.sync_pull(&replica_caller(&facility), cursor, now) {
                    Ok(doc) => {
                        let n = doc.events.len();
                        self.send(t, LinkId::Internet(facility.clone()), Payload::PullResponse { facility, doc });
                        format!("served {n}")
                    }
                    Err(e) => e.code().to_owned(),
                }
            }
            Payload::PullResponse { facility, doc } => match self.replicas.get_mut(&facility) {
                Some(r) if r.is_powered() => match r.apply_pull(&doc, now) {
                    Ok(applied) => {
                        let note = format!("pulled {applied} cursor {}", r.pull_cursor());
                        self.sync_note(t, &facility, note.clone());
                        note
                    }
                    Err(e) => e.code().to_owned(),
                },
                _ => "POWER_OFF".to_owned(),
            },
            Payload::UssdRequest(pdu) => {
                let mut backend = SimBackend {
                    central: &mut self.central,
                    net: Net {
                        links: &mut self.links,
                        trace: &mut self.trace,
                        next_msg: &mut self.next_msg,
                    },
                    t,
                    epoch: self.epoch,
                };
                let reply = self.gateway.handle_pdu(&pdu, now, &mut backend);
                let reply_at = backend.t;
                let link = LinkId::UssdChannel(pdu.msisdn.clone());
                if self.send(reply_at, link, Payload::UssdResponse(reply)) == Fate::Dropped {
                    self.abort_phone(reply_at, &pdu.msisdn);
                }
                format!("{:?}", pdu.kind)
            }
            Payload::UssdResponse(pdu) => {
                self.show(t, &pdu);
                format!("{:?}", pdu.kind)
            }
        };
        self.trace.push(t, TraceEvent::Deliver { msg, kind, result });
    }

    fn ussd_note(&mut self, t: Millis, pdu: &UssdPdu, direction: Direction) {
        self.trace.push(
            t,
            TraceEvent::Ussd {
                msisdn: pdu.msisdn.clone(),
                session_id: pdu.session_id.clone(),
                direction,
                kind: pdu.kind,
                text: pdu.text.clone(),
            },
        );
    }

    fn dial(&mut self, t: Millis, msisdn: &str) {
        let Some(phone) = self.phones.get_mut(msisdn) else {
            return;
        };
        phone.dials += 1;
        let session_id = format!("{msisdn}#{}", phone.dials);
        phone.session = Some(PhoneSession {
            session_id: session_id.clone(),
            ..PhoneSession::default()
        });
        let pdu = UssdPdu::begin(&session_id, msisdn, &self.gateway.config().shortcode.clone());
        self.phone_send(t, pdu);
    }

    fn key_in(&mut self, t: Millis, msisdn: &str, text: String) {
        let Some(session) = self.phones.get_mut(msisdn).and_then(Phone::live) else {
            return;
        };
        let pdu = UssdPdu::input(&session.session_id, msisdn, &text);
        self.phone_send(t, pdu);
    }

    fn phone_send(&mut self, t: Millis, pdu: UssdPdu) {
        self.ussd_note(t, &pdu, Direction::ToGateway);
        let link = LinkId::UssdChannel(pdu.msisdn.clone());
        let msisdn = pdu.msisdn.clone();
        if self.send(t, link, Payload::UssdRequest(pdu)) == Fate::Dropped {
            self.abort_phone(t, &msisdn);
        }
    }

    /// The radio channel failed: the handset shows the dialogue as aborted
    /// and the network releases the gateway session.
    fn abort_phone(&mut self, t: Millis, msisdn: &str) {
        let Some(session) = self.phones.get_mut(msisdn).and_then(Phone::live) else {
            return;
        };
        session.ended = Some((PduKind::Abort, String::new()));
        let pdu = UssdPdu::new(session.session_id.clone(), msisdn, PduKind::Abort, "");
        self.ussd_note(t, &pdu, Direction::ToPhone);
        let mut backend = SimBackend {
            central: &mut self.central,
            net: Net {
                links: &mut self.links,
                trace: &mut self.trace,
                next_msg: &mut self.next_msg,
            },
            t,
            epoch: self.epoch,
        };
        self.gateway.handle_pdu(&pdu, self.epoch + t, &mut backend);
    }

    fn show(&mut self, t: Millis, pdu: &UssdPdu) {
        self.ussd_note(t, pdu, Direction::ToPhone);
        let Some(session) = self.phones.get_mut(&pdu.msisdn).and_then(Phone::live) else {
            return;
        };
        if session.session_id != pdu.session_id {
            return;
        }
        session.exchanges += 1;
        session.screens.push(pdu.text.clone());
        if matches!(pdu.kind, PduKind::End | PduKind::Abort) {
            session.ended = Some((pdu.kind, pdu.text.clone()));
        }
    }

    fn site_view(&self, site: &FacilityId) -> Result<&View, String> {
        if site.as_str() == CENTRAL_SITE {
            return Ok(self.central.store().view());
        }
        match self.replicas.get(site) {
            None => Err(format!("no replica at {site}")),
            Some(r) if !r.is_powered() => Err(format!("{site} is powered off")),
            Some(r) => Ok(r.view()),
        }
    }

    fn evaluate(&self, check: &Check) -> Result<String, String> {
        let presence = |found: bool| if found { Presence::Present } else { Presence::Missing };
        match check {
            Check::Encounter {
                site,
                patient_id,
                encounter_id,
                expect,
            } => {
                let view = self.site_view(site)?;
                let found = view.history_of(patient_id).iter().any(|h| {
                    matches!(h, HistoryEntry::Encounter(_)) && h.entity_id() == encounter_id
                });
                let got = presence(found);
                if got == *expect {
                    Ok(format!("encounter {encounter_id} {got:?} at {site}"))
                } else {
                    Err(format!("encounter {encounter_id} at {site}: expected {expect:?}, got {got:?}"))
                }
            }
            Check::Patient {
                site,
                patient_id,
                expect,
            } => {
                let got = presence(self.site_view(site)?.patient(patient_id).is_some());
                if got == *expect {
                    Ok(format!("patient {patient_id} {got:?} at {site}"))
                } else {
                    Err(format!("patient {patient_id} at {site}: expected {expect:?}, got {got:?}"))
                }
            }
            Check::RxStatus { site, rx_id, status } => {
                let got = self.site_view(site)?.prescription(rx_id).map(|rx| rx.status);
                if got == Some(*status) {
                    Ok(format!("{rx_id} is {status:?} at {site}"))
                } else {
                    Err(format!("{rx_id} at {site}: expected {status:?}, got {got:?}"))
                }
            }
            Check::Converged => {
                let central = self.central.store().view();
                for (f, r) in &self.replicas {
                    if !r.is_powered() {
                        return Err(format!("{f} is powered off"));
                    }
                    if r.view() != central {
                        return Err(format!(
                            "{f} differs from central ({} vs {} entities)",
                            r.view().registers().len(),
                            central.registers().len()
                        ));
                    }
                }
                Ok(format!(
                    "{} replicas equal central ({} entities)",
                    self.replicas.len(),
                    central.registers().len()
                ))
            }
            Check::UssdCompleted {
                msisdn,
                max_exchanges,
                end_text,
            } => {
                let s = self
                    .phones
                    .get(msisdn)
                    .and_then(|p| p.session.as_ref())
                    .ok_or_else(|| format!("{msisdn} never dialed"))?;
                if let Some(long) = s.screens.iter().find(|t| t.chars().count() > crate::ussd::pdu::MAX_PAYLOAD_CHARS) {
                    return Err(format!("screen over budget: {long:?}"));
                }
                match &s.ended {
                    Some((PduKind::End, text)) if text == end_text && s.exchanges <= *max_exchanges => {
                        Ok(format!("{} ended after {} exchanges", s.session_id, s.exchanges))
                    }
                    other => Err(format!(
                        "{}: {} exchanges, ended {other:?}; expected END {end_text:?} within {max_exchanges}",
                        s.session_id, s.exchanges
                    )),
                }
            }
            Check::UssdScreen { msisdn, text } => {
                let last = self
                    .phones
                    .get(msisdn)
                    .and_then(|p| p.session.as_ref())
                    .and_then(|s| s.screens.last());
                match last {
                    Some(t) if t == text => Ok(format!("{msisdn} shows expected screen")),
                    other => Err(format!("{msisdn} shows {other:?}, expected {text:?}")),
                }
            }
        }
    }

    /// Comparable digest of the whole world.
    pub fn state(&self) -> WorldState {
        let snap = |v: &View| serde_json::to_value(v.snapshot()).expect("snapshot serializes");
        WorldState {
            now: self.now,
            central: snap(self.central.store().view()),
            replicas: self
                .replicas
                .iter()
                .map(|(f, r)| {
                    let durable = serde_json::to_value(r.durable()).expect("durable serializes");
                    (f.to_string(), serde_json::json!({ "view": snap(r.view()), "durable": durable, "powered": r.is_powered() }))
                })
                .collect(),
            phones: self.phones.clone(),
            pending_events: self.queue.len(),
            trace: self.trace.to_jsonl(),
        }
    }
}

/// Run a script to its horizon, let in-flight messages land, and return
/// the trace. Assertion outcomes are in the trace; see
/// [`Trace::failures`].
pub fn run_scenario(script: &ScenarioScript, seed: Option<u64>) -> Result<Trace, SimError> {
    let mut world = World::from_script(script, seed)?;
    world.advance(script.header.horizon_ms)?;
    world.drain();
    Ok(world.into_trace())
}
