//! Record operations shared by the central store and facility replicas.
//!
//! A [`Mutation`] is first validated against a [`View`] and turned into a
//! [`Planned`] change, then stamped with a clock reading and committed as
//! exactly one [`ChangeEvent`]. Splitting the two steps lets callers audit
//! the outcome before anything becomes durable.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::entropy::Entropy;
use crate::event::{ChangeEvent, EntityKind, FieldValue, ROOT_PATH};
use crate::hlc::{HlcClock, ReplicaId, DEFAULT_MAX_DRIFT_MS};
use crate::model::{
    Clinician, ClinicianId, Encounter, EncounterId, Facility, FacilityId, HistoryEntry, Millis,
    PatientId, PatientRecord, Prescription, RefillRequest, RxId, RxStatus, Sex, Zone, ZoneId,
};
use crate::persist::{EventLogFile, LineCipher, PersistError};
use crate::sync::{compute_delta, SyncDocument, SyncError};
use crate::view::View;

/// Replica id of the central store.
pub const CENTRAL_REPLICA: &str = "central";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EhrError {
    #[error("DUPLICATE_ID: {kind} {id} already exists")]
    DuplicateId { kind: EntityKind, id: String },
    #[error("INVALID_ZONE: zone {0} is not registered")]
    InvalidZone(ZoneId),
    #[error("NOT_FOUND: {kind} {id}")]
    NotFound { kind: EntityKind, id: String },
    #[error("UNKNOWN_PATIENT: {0}")]
    UnknownPatient(PatientId),
    #[error("UNKNOWN_CLINICIAN: {0}")]
    UnknownClinician(ClinicianId),
    #[error("UNKNOWN_FACILITY: {0}")]
    UnknownFacility(FacilityId),
    #[error("UNKNOWN_RX: {0}")]
    UnknownRx(RxId),
    #[error("NOT_ACTIVE: prescription {0} is not active")]
    NotActive(RxId),
    #[error("NO_REFILLS_LEFT: prescription {0}")]
    NoRefillsLeft(RxId),
    #[error("NOT_REQUESTED: prescription {0} has no pending refill request")]
    NotRequested(RxId),
    #[error("VALIDATION: {0}")]
    Validation(String),
    #[error("STORAGE: {0}")]
    Storage(String),
}

impl EhrError {
    pub fn code(&self) -> &'static str {
        match self {
            EhrError::DuplicateId { .. } => "DUPLICATE_ID",
            EhrError::InvalidZone(_) => "INVALID_ZONE",
            EhrError::NotFound { .. } => "NOT_FOUND",
            EhrError::UnknownPatient(_) => "UNKNOWN_PATIENT",
            EhrError::UnknownClinician(_) => "UNKNOWN_CLINICIAN",
            EhrError::UnknownFacility(_) => "UNKNOWN_FACILITY",
            EhrError::UnknownRx(_) => "UNKNOWN_RX",
            EhrError::NotActive(_) => "NOT_ACTIVE",
            EhrError::NoRefillsLeft(_) => "NO_REFILLS_LEFT",
            EhrError::NotRequested(_) => "NOT_REQUESTED",
            EhrError::Validation(_) => "VALIDATION",
            EhrError::Storage(_) => "STORAGE",
        }
    }

    /// True for errors meaning "the referenced thing does not exist".
    pub fn is_missing(&self) -> bool {
        matches!(
            self,
            EhrError::NotFound { .. }
                | EhrError::UnknownPatient(_)
                | EhrError::UnknownRx(_)
                | EhrError::UnknownClinician(_)
                | EhrError::UnknownFacility(_)
        )
    }
}

impl From<PersistError> for EhrError {
    fn from(e: PersistError) -> Self {
        EhrError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewPatient {
    #[serde(default)]
    pub patient_id: Option<PatientId>,
    pub name: String,
    pub birth_date: NaiveDate,
    pub sex: Sex,
    pub zone_id: ZoneId,
    #[serde(default)]
    pub allergies: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientUpdate {
    pub patient_id: PatientId,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub zone_id: Option<ZoneId>,
    #[serde(default)]
    pub allergies: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewEncounter {
    #[serde(default)]
    pub encounter_id: Option<EncounterId>,
    pub patient_id: PatientId,
    pub facility_id: FacilityId,
    /// Filled from the authenticated identity when submitted through the
    /// service layer.
    #[serde(default)]
    pub clinician_id: Option<ClinicianId>,
    /// Defaults to the write time.
    #[serde(default)]
    pub occurred_at: Option<Millis>,
    #[serde(default)]
    pub diagnosis_codes: Vec<String>,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewPrescription {
    #[serde(default)]
    pub rx_id: Option<RxId>,
    pub patient_id: PatientId,
    pub drug_code: String,
    pub dose: String,
    pub refills: u32,
    #[serde(default)]
    pub prescriber_id: Option<ClinicianId>,
    #[serde(default)]
    pub prescribed_at: Option<Millis>,
}

/// Every write the record store accepts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    RegisterZone(Zone),
    RegisterFacility(Facility),
    RegisterClinician(Clinician),
    RegisterPatient(NewPatient),
    UpdatePatient(PatientUpdate),
    RecordEncounter(NewEncounter),
    RetractEncounter { encounter_id: EncounterId },
    AddPrescription(NewPrescription),
    RequestRefill { rx_id: RxId, requested_by: ClinicianId },
    GrantRefill { rx_id: RxId },
    ExpirePrescription { rx_id: RxId },
}

/// Observations are recorded as `KEY=VALUE` text, e.g. `BP=120/80`.
pub fn parse_observation(text: &str) -> Result<(String, String), EhrError> {
    let text = text.trim();
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| EhrError::Validation("observation must look like KEY=VALUE".into()))?;
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() || value.is_empty() {
        return Err(EhrError::Validation(
            "observation key and value must be non-empty".into(),
        ));
    }
    if !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(EhrError::Validation(format!("bad observation key {key:?}")));
    }
    Ok((key.to_ascii_uppercase(), value.to_owned()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Change {
    Patch(Map<String, Value>),
    Field(&'static str, Value),
    Tombstone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Created { kind: EntityKind, id: String },
    Updated { kind: EntityKind, id: String },
    Retracted { kind: EntityKind, id: String },
    RefillRequested(RefillRequest),
}

impl Outcome {
    pub fn entity_id(&self) -> &str {
        match self {
            Outcome::Created { id, .. }
            | Outcome::Updated { id, .. }
            | Outcome::Retracted { id, .. } => id,
            Outcome::RefillRequested(r) => r.rx_id.as_str(),
        }
    }
}

/// A validated mutation awaiting a timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Planned {
    pub kind: EntityKind,
    pub entity_id: String,
    pub change: Change,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Committed {
    pub event: ChangeEvent,
    pub outcome: Outcome,
}

fn non_empty(field: &str, value: &str) -> Result<(), EhrError> {
    if value.trim().is_empty() {
        Err(EhrError::Validation(format!("{field} must not be empty")))
    } else {
        Ok(())
    }
}

fn to_object<T: Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("entities serialize to objects"),
    }
}

fn fresh_id(requested: Option<String>, entropy: &mut Entropy) -> String {
    requested.unwrap_or_else(|| entropy.uuid())
}

fn require_zone(view: &View, zone: &ZoneId) -> Result<(), EhrError> {
    view.zone(zone)
        .map(|_| ())
        .ok_or_else(|| EhrError::InvalidZone(zone.clone()))
}

fn require_patient<'v>(view: &'v View, id: &PatientId) -> Result<&'v PatientRecord, EhrError> {
    view.patient(id)
        .ok_or_else(|| EhrError::UnknownPatient(id.clone()))
}

fn require_clinician(view: &View, id: &ClinicianId) -> Result<(), EhrError> {
    view.clinician(id)
        .map(|_| ())
        .ok_or_else(|| EhrError::UnknownClinician(id.clone()))
}

fn require_facility(view: &View, id: &FacilityId) -> Result<(), EhrError> {
    view.facility(id)
        .map(|_| ())
        .ok_or_else(|| EhrError::UnknownFacility(id.clone()))
}

fn require_rx<'v>(view: &'v View, id: &RxId) -> Result<&'v Prescription, EhrError> {
    view.prescription(id)
        .ok_or_else(|| EhrError::UnknownRx(id.clone()))
}

fn ensure_unique(view: &View, kind: EntityKind, id: &str) -> Result<(), EhrError> {
    if id.trim().is_empty() {
        return Err(EhrError::Validation(format!("{kind} id must not be empty")));
    }
    if view.entity_state(kind, id).is_some() {
        return Err(EhrError::DuplicateId {
            kind,
            id: id.to_owned(),
        });
    }
    Ok(())
}

fn date_of(ms: Millis) -> Option<NaiveDate> {
    DateTime::from_timestamp_millis(i64::try_from(ms).ok()?).map(|d| d.date_naive())
}

fn clean_codes(codes: &[String]) -> Result<Vec<String>, EhrError> {
    codes
        .iter()
        .map(|c| {
            let c = c.trim();
            if c.is_empty() {
                Err(EhrError::Validation("empty diagnosis code".into()))
            } else {
                Ok(c.to_owned())
            }
        })
        .collect()
}

/// Validate `mutation` against `view` at time `now`.
pub fn plan(
    view: &View,
    mutation: &Mutation,
    now: Millis,
    entropy: &mut Entropy,
) -> Result<Planned, EhrError> {
    match mutation {
        Mutation::RegisterZone(zone) => {
            ensure_unique(view, EntityKind::Zone, zone.zone_id.as_str())?;
            non_empty("zone name", &zone.name)?;
            Ok(created(EntityKind::Zone, zone.zone_id.as_str(), to_object(zone)))
        }
        Mutation::RegisterFacility(facility) => {
            ensure_unique(view, EntityKind::Facility, facility.facility_id.as_str())?;
            non_empty("facility name", &facility.name)?;
            require_zone(view, &facility.zone_id)?;
            Ok(created(
                EntityKind::Facility,
                facility.facility_id.as_str(),
                to_object(facility),
            ))
        }
        Mutation::RegisterClinician(clinician) => {
            ensure_unique(view, EntityKind::Clinician, clinician.clinician_id.as_str())?;
            non_empty("clinician name", &clinician.name)?;
            if let Some(f) = &clinician.facility_id {
                require_facility(view, f)?;
            }
            Ok(created(
                EntityKind::Clinician,
                clinician.clinician_id.as_str(),
                to_object(clinician),
            ))
        }
        Mutation::RegisterPatient(new) => {
            let id = PatientId::new(fresh_id(new.patient_id.clone().map(|p| p.0), entropy));
            ensure_unique(view, EntityKind::Patient, id.as_str())?;
            non_empty("patient name", &new.name)?;
            if date_of(now).is_some_and(|today| new.birth_date > today) {
                return Err(EhrError::Validation(format!(
                    "birth_date {} is in the future",
                    new.birth_date
                )));
            }
            require_zone(view, &new.zone_id)?;
            let record = PatientRecord {
                patient_id: id.clone(),
                name: new.name.trim().to_owned(),
                birth_date: new.birth_date,
                sex: new.sex,
                zone_id: new.zone_id.clone(),
                allergies: new.allergies.clone(),
                registered_at: now,
            };
            Ok(created(EntityKind::Patient, id.as_str(), to_object(&record)))
        }
        Mutation::UpdatePatient(update) => {
            require_patient(view, &update.patient_id)?;
            let mut patch = Map::new();
            if let Some(name) = &update.name {
                non_empty("patient name", name)?;
                patch.insert("name".into(), json!(name.trim()));
            }
            if let Some(zone) = &update.zone_id {
                require_zone(view, zone)?;
                patch.insert("zone_id".into(), json!(zone));
            }
            if let Some(allergies) = &update.allergies {
                patch.insert("allergies".into(), json!(allergies));
            }
            let change = match patch.len() {
                0 => return Err(EhrError::Validation("update changes nothing".into())),
                1 => {
                    let (k, v) = patch.into_iter().next().expect("one member");
                    let field = EntityKind::Patient
                        .fields()
                        .iter()
                        .find(|f| **f == k)
                        .expect("known field");
                    Change::Field(field, v)
                }
                _ => Change::Patch(patch),
            };
            Ok(Planned {
                kind: EntityKind::Patient,
                entity_id: update.patient_id.0.clone(),
                change,
                outcome: Outcome::Updated {
                    kind: EntityKind::Patient,
                    id: update.patient_id.0.clone(),
                },
            })
        }
        Mutation::RecordEncounter(new) => {
            require_patient(view, &new.patient_id)?;
            let clinician = new
                .clinician_id
                .clone()
                .ok_or_else(|| EhrError::Validation("clinician_id is required".into()))?;
            require_clinician(view, &clinician)?;
            require_facility(view, &new.facility_id)?;
            let occurred_at = new.occurred_at.unwrap_or(now);
            if occurred_at > now {
                return Err(EhrError::Validation(format!(
                    "occurred_at {occurred_at} is after the store clock {now}"
                )));
            }
            let codes = clean_codes(&new.diagnosis_codes)?;
            if codes.is_empty() && new.note.trim().is_empty() {
                return Err(EhrError::Validation(
                    "encounter needs a diagnosis code or a note".into(),
                ));
            }
            let id = EncounterId::new(fresh_id(new.encounter_id.clone().map(|e| e.0), entropy));
            ensure_unique(view, EntityKind::Encounter, id.as_str())?;
            let encounter = Encounter {
                encounter_id: id.clone(),
                patient_id: new.patient_id.clone(),
                facility_id: new.facility_id.clone(),
                clinician_id: clinician,
                occurred_at,
                diagnosis_codes: codes,
                note: new.note.trim().to_owned(),
            };
            Ok(created(EntityKind::Encounter, id.as_str(), to_object(&encounter)))
        }
        Mutation::RetractEncounter { encounter_id } => {
            if view.encounter(encounter_id).is_none() {
                return Err(EhrError::NotFound {
                    kind: EntityKind::Encounter,
                    id: encounter_id.0.clone(),
                });
            }
            Ok(Planned {
                kind: EntityKind::Encounter,
                entity_id: encounter_id.0.clone(),
                change: Change::Tombstone,
                outcome: Outcome::Retracted {
                    kind: EntityKind::Encounter,
                    id: encounter_id.0.clone(),
                },
            })
        }
        Mutation::AddPrescription(new) => {
            require_patient(view, &new.patient_id)?;
            let prescriber = new
                .prescriber_id
                .clone()
                .ok_or_else(|| EhrError::Validation("prescriber_id is required".into()))?;
            require_clinician(view, &prescriber)?;
            non_empty("drug_code", &new.drug_code)?;
            non_empty("dose", &new.dose)?;
            let prescribed_at = new.prescribed_at.unwrap_or(now);
            if prescribed_at > now {
                return Err(EhrError::Validation("prescribed_at is in the future".into()));
            }
            let id = RxId::new(fresh_id(new.rx_id.clone().map(|r| r.0), entropy));
            ensure_unique(view, EntityKind::Prescription, id.as_str())?;
            let rx = Prescription {
                rx_id: id.clone(),
                patient_id: new.patient_id.clone(),
                drug_code: new.drug_code.trim().to_owned(),
                dose: new.dose.trim().to_owned(),
                refills_remaining: new.refills,
                status: RxStatus::Active,
                prescribed_at,
                prescriber_id: prescriber,
            };
            Ok(created(EntityKind::Prescription, id.as_str(), to_object(&rx)))
        }
        Mutation::RequestRefill {
            rx_id,
            requested_by,
        } => {
            let rx = require_rx(view, rx_id)?;
            if rx.status != RxStatus::Active {
                return Err(EhrError::NotActive(rx_id.clone()));
            }
            if rx.refills_remaining == 0 {
                return Err(EhrError::NoRefillsLeft(rx_id.clone()));
            }
            Ok(Planned {
                kind: EntityKind::Prescription,
                entity_id: rx_id.0.clone(),
                change: Change::Field("status", json!(RxStatus::RefillRequested)),
                outcome: Outcome::RefillRequested(RefillRequest {
                    rx_id: rx_id.clone(),
                    patient_id: rx.patient_id.clone(),
                    drug_code: rx.drug_code.clone(),
                    requested_by: requested_by.clone(),
                    requested_at: now,
                    refills_remaining: rx.refills_remaining,
                }),
            })
        }
        Mutation::GrantRefill { rx_id } => {
            let rx = require_rx(view, rx_id)?;
            if rx.status != RxStatus::RefillRequested {
                return Err(EhrError::NotRequested(rx_id.clone()));
            }
            if rx.refills_remaining == 0 {
                return Err(EhrError::NoRefillsLeft(rx_id.clone()));
            }
            let mut patch = Map::new();
            patch.insert("status".into(), json!(RxStatus::Active));
            patch.insert("refills_remaining".into(), json!(rx.refills_remaining - 1));
            Ok(Planned {
                kind: EntityKind::Prescription,
                entity_id: rx_id.0.clone(),
                change: Change::Patch(patch),
                outcome: Outcome::Updated {
                    kind: EntityKind::Prescription,
                    id: rx_id.0.clone(),
                },
            })
        }
        Mutation::ExpirePrescription { rx_id } => {
            let rx = require_rx(view, rx_id)?;
            if rx.status == RxStatus::Expired {
                return Err(EhrError::NotActive(rx_id.clone()));
            }
            Ok(Planned {
                kind: EntityKind::Prescription,
                entity_id: rx_id.0.clone(),
                change: Change::Field("status", json!(RxStatus::Expired)),
                outcome: Outcome::Updated {
                    kind: EntityKind::Prescription,
                    id: rx_id.0.clone(),
                },
            })
        }
    }
}

fn created(kind: EntityKind, id: &str, object: Map<String, Value>) -> Planned {
    Planned {
        kind,
        entity_id: id.to_owned(),
        change: Change::Patch(object),
        outcome: Outcome::Created {
            kind,
            id: id.to_owned(),
        },
    }
}

/// Stamp a planned change with the next clock reading.
pub fn stamp(
    planned: &Planned,
    clock: &mut HlcClock,
    now: Millis,
    entropy: &mut Entropy,
) -> ChangeEvent {
    let hlc = clock
        .tick(now, None)
        .expect("local ticks never observe a remote clock");
    let (field_path, new_value) = match &planned.change {
        Change::Patch(patch) => (ROOT_PATH.to_owned(), FieldValue::Value(Value::Object(patch.clone()))),
        Change::Field(field, value) => ((*field).to_owned(), FieldValue::Value(value.clone())),
        Change::Tombstone => (ROOT_PATH.to_owned(), FieldValue::Tombstone),
    };
    ChangeEvent {
        event_id: entropy.uuid(),
        entity_kind: planned.kind,
        entity_id: planned.entity_id.clone(),
        field_path,
        new_value,
        origin_replica: hlc.replica_id.clone(),
        hlc,
    }
}

/// Read-side operations shared by every store flavour.
pub trait RecordReader {
    fn view(&self) -> &View;

    fn get_patient(&self, id: &PatientId) -> Result<PatientRecord, EhrError> {
        self.view()
            .patient(id)
            .cloned()
            .ok_or_else(|| EhrError::NotFound {
                kind: EntityKind::Patient,
                id: id.0.clone(),
            })
    }

    fn patient_history(&self, id: &PatientId) -> Result<Vec<HistoryEntry>, EhrError> {
        require_patient(self.view(), id)?;
        Ok(self.view().history_of(id))
    }

    fn list_prescriptions(&self, id: &PatientId) -> Result<Vec<Prescription>, EhrError> {
        require_patient(self.view(), id)?;
        let mut rxs: Vec<Prescription> = self.view().prescriptions_of(id).cloned().collect();
        rxs.sort_by(|a, b| (a.prescribed_at, &a.rx_id).cmp(&(b.prescribed_at, &b.rx_id)));
        Ok(rxs)
    }

    /// Most recent encounters recorded at a facility, newest first.
    fn facility_encounters(&self, id: &FacilityId, limit: usize) -> Result<Vec<Encounter>, EhrError> {
        require_facility(self.view(), id)?;
        let mut list: Vec<Encounter> = self
            .view()
            .encounters()
            .filter(|e| &e.facility_id == id)
            .cloned()
            .collect();
        list.sort_by(|a, b| (b.occurred_at, &b.encounter_id).cmp(&(a.occurred_at, &a.encounter_id)));
        list.truncate(limit);
        Ok(list)
    }
}

/// The central EHR database: authoritative append-only change log plus its
/// materialized view.
pub struct CentralStore {
    clock: HlcClock,
    view: View,
    log: Vec<ChangeEvent>,
    entropy: Entropy,
    file: Option<EventLogFile>,
}

impl std::fmt::Debug for CentralStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CentralStore")
            .field("log_len", &self.log.len())
            .field("clock", self.clock.last())
            .field("persistent", &self.file.is_some())
            .finish()
    }
}

impl RecordReader for CentralStore {
    fn view(&self) -> &View {
        &self.view
    }
}

impl CentralStore {
    pub fn in_memory(entropy: Entropy) -> Self {
        Self {
            clock: HlcClock::new(ReplicaId::new(CENTRAL_REPLICA)),
            view: View::new(),
            log: Vec::new(),
            entropy,
            file: None,
        }
    }

    /// Open (or create) a persistent store in `dir`, replaying the event log
    /// on top of the latest snapshot.
    pub fn open(
        dir: &Path,
        cipher: Arc<dyn LineCipher>,
        entropy: Entropy,
    ) -> Result<Self, PersistError> {
        let (file, loaded) = EventLogFile::open(dir, cipher)?;
        let mut clock = HlcClock::new(ReplicaId::new(CENTRAL_REPLICA));
        let mut view = View::new();
        let mut start = 0;
        if let Some(snapshot) = loaded.snapshot {
            if snapshot.log_len <= loaded.events.len() {
                view = View::from_snapshot(snapshot.view);
                clock = HlcClock::resume(snapshot.clock, DEFAULT_MAX_DRIFT_MS);
                start = snapshot.log_len;
            }
        }
        for event in &loaded.events[start..] {
            view.apply(event);
            if event.hlc > *clock.last() {
                let mut last = event.hlc.clone();
                last.replica_id = ReplicaId::new(CENTRAL_REPLICA);
                clock = HlcClock::resume(last, DEFAULT_MAX_DRIFT_MS);
            }
        }
        Ok(Self {
            clock,
            view,
            log: loaded.events,
            entropy,
            file: Some(file),
        })
    }

    pub fn log(&self) -> &[ChangeEvent] {
        &self.log
    }

    pub fn entropy(&mut self) -> &mut Entropy {
        &mut self.entropy
    }

    pub fn prepare(&mut self, mutation: &Mutation, now: Millis) -> Result<Planned, EhrError> {
        plan(&self.view, mutation, now, &mut self.entropy)
    }

    /// Persist and apply a change produced by [`prepare`](Self::prepare)
    /// against the current view.
    pub fn commit_planned(&mut self, planned: &Planned, now: Millis) -> Result<Committed, EhrError> {
        let event = stamp(planned, &mut self.clock, now, &mut self.entropy);
        self.append(event.clone())?;
        Ok(Committed {
            event,
            outcome: planned.outcome.clone(),
        })
    }

    pub fn commit(&mut self, mutation: &Mutation, now: Millis) -> Result<Committed, EhrError> {
        let planned = self.prepare(mutation, now)?;
        self.commit_planned(&planned, now)
    }

    fn append(&mut self, event: ChangeEvent) -> Result<(), EhrError> {
        if let Some(file) = &mut self.file {
            file.append(&event)?;
        }
        self.view.apply(&event);
        self.log.push(event);
        if let Some(file) = &mut self.file {
            if file.snapshot_due() {
                file.write_snapshot(self.log.len(), &self.view, self.clock.last())?;
            }
        }
        Ok(())
    }

    pub fn register_patient(&mut self, new: NewPatient, now: Millis) -> Result<PatientId, EhrError> {
        let c = self.commit(&Mutation::RegisterPatient(new), now)?;
        Ok(PatientId::new(c.outcome.entity_id()))
    }

    pub fn record_encounter(
        &mut self,
        new: NewEncounter,
        now: Millis,
    ) -> Result<EncounterId, EhrError> {
        let c = self.commit(&Mutation::RecordEncounter(new), now)?;
        Ok(EncounterId::new(c.outcome.entity_id()))
    }

    pub fn request_refill(
        &mut self,
        rx_id: &RxId,
        actor: &ClinicianId,
        now: Millis,
    ) -> Result<RefillRequest, EhrError> {
        let c = self.commit(
            &Mutation::RequestRefill {
                rx_id: rx_id.clone(),
                requested_by: actor.clone(),
            },
            now,
        )?;
        match c.outcome {
            Outcome::RefillRequested(r) => Ok(r),
            other => unreachable!("refill produced {other:?}"),
        }
    }

    /// Merge events pushed by a replica. Already-known events are skipped,
    /// so retried pushes leave the log unchanged.
    pub fn accept_push(&mut self, doc: &SyncDocument, now: Millis) -> Result<SyncDocument, SyncError> {
        for event in &doc.events {
            event.check_well_formed().map_err(SyncError::Malformed)?;
        }
        let mut newest = None;
        for event in &doc.events {
            if self.view.has_seen(&event.event_id) {
                continue;
            }
            self.append(event.clone())
                .map_err(|e| SyncError::Rejected(e.to_string()))?;
            if newest.as_ref().is_none_or(|n| &event.hlc > n) {
                newest = Some(event.hlc.clone());
            }
        }
        if let Some(hlc) = newest {
            if let Err(e) = self.clock.tick(now, Some(&hlc)) {
                tracing::warn!(%e, "not advancing central clock from pushed events");
            }
        }
        Ok(SyncDocument {
            replica_id: ReplicaId::new(CENTRAL_REPLICA),
            cursor: doc.cursor + doc.events.len() as u64,
            events: Vec::new(),
        })
    }

    pub fn pull(&self, cursor: u64) -> Result<SyncDocument, SyncError> {
        let events = compute_delta(&self.log, cursor)?;
        Ok(SyncDocument {
            replica_id: ReplicaId::new(CENTRAL_REPLICA),
            cursor: self.log.len() as u64,
            events: events.to_vec(),
        })
    }
}
