//! Guarded, audited access to the central store.
//!
//! Every public operation appends exactly one audit entry, whatever its
//! outcome: success, validation failure, denial or missing identity.
//! Mutations are validated first, audited second and committed last, so an
//! audit failure aborts the write.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::analytics::{aggregate_report, AggregateExport, AnalyticsError, Period};
use crate::audit::{AuditEntry, AuditLog, AuditRecord};
use crate::auth::{
    authorize, Action, AuthError, AuthPolicy, AuthRegistry, AuthzError, Channel, Credential,
    Enrollment, Identity,
};
use crate::entropy::Entropy;
use crate::model::{
    ClinicianId, Encounter, EncounterId, FacilityId, HistoryEntry, Millis, PatientId,
    PatientRecord, Prescription, RefillRequest, RxId,
};
use crate::persist::{read_lines, write_lines, LineCipher, PersistError, Plaintext};
use crate::store::{
    parse_observation, CentralStore, EhrError, Mutation, NewEncounter, NewPatient,
    NewPrescription, Outcome, PatientUpdate, RecordReader,
};
use crate::sync::{SyncDocument, SyncError};

pub const CREDENTIALS_FILE: &str = "credentials.log";

/// Actor recorded for requests without a usable identity.
pub const ANONYMOUS: &str = "anonymous";
/// Actor recorded for operator actions (seeding, enrollment from the CLI).
pub const SYSTEM: &str = "system";

#[derive(Debug, Clone)]
pub enum Caller {
    Anonymous,
    /// A token or credential was presented but did not resolve.
    Rejected(AuthError),
    Known(Identity),
}

impl From<Identity> for Caller {
    fn from(id: Identity) -> Self {
        Caller::Known(id)
    }
}

impl From<&Identity> for Caller {
    fn from(id: &Identity) -> Self {
        Caller::Known(id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("{code}: {detail}")]
    Unauthenticated { code: &'static str, detail: String },
    #[error("FORBIDDEN: {0}")]
    Forbidden(String),
    #[error(transparent)]
    Ehr(#[from] EhrError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("AUDIT_FAILURE: {0}")]
    Audit(String),
    #[error("BAD_REQUEST: {0}")]
    BadRequest(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Unauthenticated { code, .. } => code,
            ServiceError::Forbidden(_) => "FORBIDDEN",
            ServiceError::Ehr(e) => e.code(),
            ServiceError::Sync(e) => e.code(),
            ServiceError::Analytics(e) => e.code(),
            ServiceError::Audit(_) => "AUDIT_FAILURE",
            ServiceError::BadRequest(_) => "BAD_REQUEST",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ServiceError::Unauthenticated { .. } => 401,
            ServiceError::BadRequest(_) => 400,
            ServiceError::Forbidden(_) => 403,
            ServiceError::Ehr(e) if e.is_missing() => 404,
            ServiceError::Ehr(EhrError::Storage(_)) | ServiceError::Audit(_) => 500,
            ServiceError::Ehr(_) | ServiceError::Sync(_) | ServiceError::Analytics(_) => 422,
        }
    }

    fn from_auth(e: &AuthError) -> Self {
        // Unknown principals are reported like bad credentials so that
        // login does not reveal which accounts exist.
        let code = match e {
            AuthError::UnknownPrincipal => "BAD_CREDENTIALS",
            other => other.code(),
        };
        ServiceError::Unauthenticated {
            code,
            detail: e.to_string(),
        }
    }
}

impl From<AuthzError> for ServiceError {
    fn from(e: AuthzError) -> Self {
        match e {
            AuthzError::ExpiredToken => ServiceError::Unauthenticated {
                code: "EXPIRED_TOKEN",
                detail: "token expired".into(),
            },
            AuthzError::Denied { .. } => ServiceError::Forbidden(e.to_string()),
        }
    }
}

/// Items shown in a facility's inbox.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Inbox {
    pub facility_id: FacilityId,
    pub encounters: Vec<Encounter>,
    pub pending_refills: Vec<Prescription>,
}

pub fn entity_ref(kind: &str, id: &str) -> String {
    format!("{kind}:{id}")
}

#[derive(Debug)]
pub struct EhrService {
    store: CentralStore,
    auth: AuthRegistry,
    audit: AuditLog,
    entropy: Entropy,
    cipher: Arc<dyn LineCipher>,
    credentials_path: Option<PathBuf>,
    default_k: u32,
}

pub type SharedService = Arc<Mutex<EhrService>>;

impl EhrService {
    pub fn in_memory(policy: AuthPolicy, seed: u64) -> Self {
        let mut root = Entropy::seeded(seed);
        let store_entropy = Entropy::seeded(root.next_u64());
        Self {
            store: CentralStore::in_memory(store_entropy),
            auth: AuthRegistry::new(policy),
            audit: AuditLog::in_memory(),
            entropy: root,
            cipher: Arc::new(Plaintext),
            credentials_path: None,
            default_k: crate::analytics::DEFAULT_K,
        }
    }

    /// Open (or create) a store directory holding the event log, snapshot,
    /// credential file and audit log.
    pub fn open(
        dir: &Path,
        cipher: Arc<dyn LineCipher>,
        policy: AuthPolicy,
    ) -> Result<Self, ServiceError> {
        let store = CentralStore::open(dir, cipher.clone(), Entropy::from_os()).map_err(EhrError::from)?;
        let credentials_path = dir.join(CREDENTIALS_FILE);
        let creds: Vec<Credential> = if credentials_path.exists() {
            read_lines(&credentials_path, cipher.as_ref()).map_err(EhrError::from)?
        } else {
            Vec::new()
        };
        let audit = AuditLog::open(dir).map_err(|e| ServiceError::Audit(e.to_string()))?;
        Ok(Self {
            store,
            auth: AuthRegistry::from_credentials(policy, creds),
            audit,
            entropy: Entropy::from_os(),
            cipher,
            credentials_path: Some(credentials_path),
            default_k: crate::analytics::DEFAULT_K,
        })
    }

    pub fn into_shared(self) -> SharedService {
        Arc::new(Mutex::new(self))
    }

    pub fn set_default_k(&mut self, k: u32) {
        self.default_k = k;
    }

    pub fn default_k(&self) -> u32 {
        self.default_k
    }

    pub fn store(&self) -> &CentralStore {
        &self.store
    }

    pub fn audit_log(&self) -> &AuditLog {
        &self.audit
    }

    pub fn auth(&self) -> &AuthRegistry {
        &self.auth
    }

    fn save_credentials(&self) -> Result<(), PersistError> {
        match &self.credentials_path {
            Some(path) => {
                let creds: Vec<&Credential> = self.auth.credentials().collect();
                write_lines(path, self.cipher.as_ref(), &creds)
            }
            None => Ok(()),
        }
    }

    fn record(
        &mut self,
        actor: &str,
        action: &str,
        entity: &str,
        now: Millis,
        outcome: &str,
    ) -> Result<(), ServiceError> {
        self.audit
            .append(AuditEntry {
                actor: actor.to_owned(),
                action: action.to_owned(),
                entity: entity.to_owned(),
                ts: now,
                outcome: outcome.to_owned(),
            })
            .map(|_| ())
            .map_err(|e| ServiceError::Audit(e.to_string()))
    }

    /// Resolve the caller and check the permission table. A refusal is
    /// audited here; on success the caller audits the final outcome.
    fn guard(
        &mut self,
        caller: &Caller,
        action: Action,
        entity: &str,
        now: Millis,
    ) -> Result<Identity, ServiceError> {
        let refusal = match caller {
            Caller::Anonymous => ServiceError::Unauthenticated {
                code: "UNAUTHENTICATED",
                detail: "no valid identity".into(),
            },
            Caller::Rejected(e) => ServiceError::from_auth(e),
            Caller::Known(identity) => match authorize(identity, action, now) {
                Ok(()) => return Ok(identity.clone()),
                Err(e) => {
                    let err = ServiceError::from(e);
                    let actor = identity.clinician_id.0.clone();
                    let outcome = match &err {
                        ServiceError::Forbidden(_) => "DENIED",
                        other => other.code(),
                    };
                    self.record(&actor, action.as_str(), entity, now, outcome)?;
                    return Err(err);
                }
            },
        };
        self.record(ANONYMOUS, action.as_str(), entity, now, refusal.code())?;
        Err(refusal)
    }

    /// Audit the outcome of a read.
    fn finish<T>(
        &mut self,
        who: &Identity,
        action: Action,
        entity: &str,
        now: Millis,
        result: Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        let outcome = match &result {
            Ok(_) => "OK",
            Err(e) => e.code(),
        };
        self.record(who.clinician_id.as_str(), action.as_str(), entity, now, outcome)?;
        result
    }

    /// Validate, audit, commit.
    fn mutate(
        &mut self,
        who: &Identity,
        action: Action,
        entity: &str,
        mutation: &Mutation,
        now: Millis,
    ) -> Result<Outcome, ServiceError> {
        self.mutate_as(who.clinician_id.as_str(), action.as_str(), entity, mutation, now)
    }

    fn mutate_as(
        &mut self,
        actor: &str,
        action: &str,
        entity: &str,
        mutation: &Mutation,
        now: Millis,
    ) -> Result<Outcome, ServiceError> {
        let planned = match self.store.prepare(mutation, now) {
            Ok(p) => p,
            Err(e) => {
                self.record(actor, action, entity, now, e.code())?;
                return Err(e.into());
            }
        };
        self.record(actor, action, entity, now, "OK")?;
        Ok(self.store.commit_planned(&planned, now)?.outcome)
    }

    /// Fresh identifier for tagging a request.
    pub fn correlation_id(&mut self) -> String {
        self.entropy.uuid()
    }

    /// Refuse a request whose body or parameters could not be decoded. The
    /// identity check still runs first, and the refusal is audited once.
    pub fn reject_malformed(
        &mut self,
        caller: &Caller,
        action: Action,
        entity: &str,
        detail: String,
        now: Millis,
    ) -> ServiceError {
        let who = match self.guard(caller, action, entity, now) {
            Ok(who) => who,
            Err(e) => return e,
        };
        let err = ServiceError::BadRequest(detail);
        if let Err(audit) = self.record(who.clinician_id.as_str(), action.as_str(), entity, now, err.code()) {
            return audit;
        }
        err
    }

    // ---- authentication -------------------------------------------------

    pub fn login(&mut self, channel: &Channel, now: Millis) -> Result<Identity, ServiceError> {
        let entity = entity_ref("principal", channel.principal());
        let result = self.auth.authenticate(channel, now, &mut self.entropy);
        let outcome = match &result {
            Ok(_) => "OK",
            Err(e) => e.code(),
        };
        let actor = match &result {
            Ok(id) => id.clinician_id.0.clone(),
            Err(_) => ANONYMOUS.to_owned(),
        };
        self.record(&actor, "login", &entity, now, outcome)?;
        // Failure counters and locks must survive a restart.
        self.save_credentials().map_err(EhrError::from)?;
        result.map_err(|e| ServiceError::from_auth(&e))
    }

    /// Turn an optional bearer token into a caller. Not audited by itself;
    /// the operation it guards is.
    pub fn caller_from_token(&self, token: Option<&str>, now: Millis) -> Caller {
        match token {
            None => Caller::Anonymous,
            Some(t) => match self.auth.resolve_token(t, now) {
                Ok(id) => Caller::Known(id),
                Err(e) => Caller::Rejected(e),
            },
        }
    }

    pub fn is_msisdn_registered(&self, msisdn: &str) -> bool {
        self.auth.is_msisdn_registered(msisdn)
    }

    // ---- records ---------------------------------------------------------

    pub fn get_patient(
        &mut self,
        caller: &Caller,
        id: &PatientId,
        now: Millis,
    ) -> Result<PatientRecord, ServiceError> {
        let entity = entity_ref("patient", id.as_str());
        let who = self.guard(caller, Action::ReadPatient, &entity, now)?;
        let result = self.store.get_patient(id).map_err(Into::into);
        self.finish(&who, Action::ReadPatient, &entity, now, result)
    }

    pub fn register_patient(
        &mut self,
        caller: &Caller,
        new: NewPatient,
        now: Millis,
    ) -> Result<PatientId, ServiceError> {
        let entity = entity_ref(
            "patient",
            new.patient_id.as_ref().map_or("new", |p| p.as_str()),
        );
        let who = self.guard(caller, Action::RegisterPatient, &entity, now)?;
        let outcome = self.mutate(
            &who,
            Action::RegisterPatient,
            &entity,
            &Mutation::RegisterPatient(new),
            now,
        )?;
        Ok(PatientId::new(outcome.entity_id()))
    }

    pub fn update_patient(
        &mut self,
        caller: &Caller,
        update: PatientUpdate,
        now: Millis,
    ) -> Result<(), ServiceError> {
        let entity = entity_ref("patient", update.patient_id.as_str());
        let who = self.guard(caller, Action::UpdatePatient, &entity, now)?;
        self.mutate(
            &who,
            Action::UpdatePatient,
            &entity,
            &Mutation::UpdatePatient(update),
            now,
        )
        .map(|_| ())
    }

    pub fn patient_history(
        &mut self,
        caller: &Caller,
        id: &PatientId,
        now: Millis,
    ) -> Result<Vec<HistoryEntry>, ServiceError> {
        let entity = entity_ref("patient", id.as_str());
        let who = self.guard(caller, Action::ReadHistory, &entity, now)?;
        let result = self.store.patient_history(id).map_err(Into::into);
        self.finish(&who, Action::ReadHistory, &entity, now, result)
    }

    pub fn list_prescriptions(
        &mut self,
        caller: &Caller,
        id: &PatientId,
        now: Millis,
    ) -> Result<Vec<Prescription>, ServiceError> {
        let entity = entity_ref("patient", id.as_str());
        let who = self.guard(caller, Action::ReadPrescriptions, &entity, now)?;
        let result = self.store.list_prescriptions(id).map_err(Into::into);
        self.finish(&who, Action::ReadPrescriptions, &entity, now, result)
    }

    pub fn record_encounter(
        &mut self,
        caller: &Caller,
        mut new: NewEncounter,
        now: Millis,
    ) -> Result<EncounterId, ServiceError> {
        let entity = entity_ref("patient", new.patient_id.as_str());
        let who = self.guard(caller, Action::RecordEncounter, &entity, now)?;
        new.clinician_id.get_or_insert_with(|| who.clinician_id.clone());
        let outcome = self.mutate(
            &who,
            Action::RecordEncounter,
            &entity,
            &Mutation::RecordEncounter(new),
            now,
        )?;
        Ok(EncounterId::new(outcome.entity_id()))
    }

    fn home_facility(&self, who: &Identity) -> Result<FacilityId, EhrError> {
        self.store
            .view()
            .clinician(&who.clinician_id)
            .and_then(|c| c.facility_id.clone())
            .ok_or_else(|| {
                EhrError::Validation(format!("clinician {} has no facility", who.clinician_id))
            })
    }

    /// Record a `KEY=VALUE` observation as an uncoded encounter at the
    /// caller's facility.
    pub fn record_observation(
        &mut self,
        caller: &Caller,
        patient: &PatientId,
        text: &str,
        now: Millis,
    ) -> Result<EncounterId, ServiceError> {
        self.record_text(caller, Action::RecordObservation, patient, text, true, now)
    }

    /// Record a free-text note as an uncoded encounter.
    pub fn record_note(
        &mut self,
        caller: &Caller,
        patient: &PatientId,
        text: &str,
        now: Millis,
    ) -> Result<EncounterId, ServiceError> {
        self.record_text(caller, Action::RecordEncounter, patient, text, false, now)
    }

    fn record_text(
        &mut self,
        caller: &Caller,
        action: Action,
        patient: &PatientId,
        text: &str,
        observation: bool,
        now: Millis,
    ) -> Result<EncounterId, ServiceError> {
        let entity = entity_ref("patient", patient.as_str());
        let who = self.guard(caller, action, &entity, now)?;
        let prepared = (|| {
            let note = if observation {
                let (k, v) = parse_observation(text)?;
                format!("{k}={v}")
            } else {
                text.trim().to_owned()
            };
            Ok::<_, EhrError>(NewEncounter {
                encounter_id: None,
                patient_id: patient.clone(),
                facility_id: self.home_facility(&who)?,
                clinician_id: Some(who.clinician_id.clone()),
                occurred_at: None,
                diagnosis_codes: Vec::new(),
                note,
            })
        })();
        let new = match prepared {
            Ok(n) => n,
            Err(e) => {
                self.record(who.clinician_id.as_str(), action.as_str(), &entity, now, e.code())?;
                return Err(e.into());
            }
        };
        let outcome = self.mutate(&who, action, &entity, &Mutation::RecordEncounter(new), now)?;
        Ok(EncounterId::new(outcome.entity_id()))
    }

    pub fn retract_encounter(
        &mut self,
        caller: &Caller,
        id: &EncounterId,
        now: Millis,
    ) -> Result<(), ServiceError> {
        let entity = entity_ref("encounter", id.as_str());
        let who = self.guard(caller, Action::RetractEncounter, &entity, now)?;
        self.mutate(
            &who,
            Action::RetractEncounter,
            &entity,
            &Mutation::RetractEncounter {
                encounter_id: id.clone(),
            },
            now,
        )
        .map(|_| ())
    }

    pub fn add_prescription(
        &mut self,
        caller: &Caller,
        mut new: NewPrescription,
        now: Millis,
    ) -> Result<RxId, ServiceError> {
        let entity = entity_ref("patient", new.patient_id.as_str());
        let who = self.guard(caller, Action::AddPrescription, &entity, now)?;
        new.prescriber_id.get_or_insert_with(|| who.clinician_id.clone());
        let outcome = self.mutate(
            &who,
            Action::AddPrescription,
            &entity,
            &Mutation::AddPrescription(new),
            now,
        )?;
        Ok(RxId::new(outcome.entity_id()))
    }

    pub fn request_refill(
        &mut self,
        caller: &Caller,
        rx: &RxId,
        now: Millis,
    ) -> Result<RefillRequest, ServiceError> {
        let entity = entity_ref("prescription", rx.as_str());
        let who = self.guard(caller, Action::RequestRefill, &entity, now)?;
        let mutation = Mutation::RequestRefill {
            rx_id: rx.clone(),
            requested_by: who.clinician_id.clone(),
        };
        match self.mutate(&who, Action::RequestRefill, &entity, &mutation, now)? {
            Outcome::RefillRequested(r) => Ok(r),
            other => unreachable!("refill request produced {other:?}"),
        }
    }

    pub fn grant_refill(
        &mut self,
        caller: &Caller,
        rx: &RxId,
        now: Millis,
    ) -> Result<Prescription, ServiceError> {
        let entity = entity_ref("prescription", rx.as_str());
        let who = self.guard(caller, Action::GrantRefill, &entity, now)?;
        let mutation = Mutation::GrantRefill { rx_id: rx.clone() };
        self.mutate(&who, Action::GrantRefill, &entity, &mutation, now)?;
        Ok(self
            .store
            .view()
            .prescription(rx)
            .cloned()
            .expect("granted prescription exists"))
    }

    pub fn expire_prescription(
        &mut self,
        caller: &Caller,
        rx: &RxId,
        now: Millis,
    ) -> Result<(), ServiceError> {
        let entity = entity_ref("prescription", rx.as_str());
        let who = self.guard(caller, Action::ExpirePrescription, &entity, now)?;
        let mutation = Mutation::ExpirePrescription { rx_id: rx.clone() };
        self.mutate(&who, Action::ExpirePrescription, &entity, &mutation, now)
            .map(|_| ())
    }

    /// Recent encounters at the caller's facility (or `facility` if given)
    /// and every prescription awaiting a refill decision for patients seen
    /// there.
    pub fn facility_inbox(
        &mut self,
        caller: &Caller,
        facility: Option<&FacilityId>,
        limit: usize,
        now: Millis,
    ) -> Result<Inbox, ServiceError> {
        let label = facility.map_or("home", |f| f.as_str());
        let entity = entity_ref("facility", label);
        let who = self.guard(caller, Action::ReadFacilityInbox, &entity, now)?;
        let result = (|| {
            let facility_id = match facility {
                Some(f) => f.clone(),
                None => self.home_facility(&who)?,
            };
            let encounters = self.store.facility_encounters(&facility_id, limit)?;
            let view = self.store.view();
            let mut pending: Vec<Prescription> = view
                .prescriptions()
                .filter(|rx| rx.status == crate::model::RxStatus::RefillRequested)
                .filter(|rx| {
                    view.encounters_of(&rx.patient_id)
                        .any(|e| e.facility_id == facility_id)
                })
                .cloned()
                .collect();
            pending.sort_by(|a, b| a.rx_id.cmp(&b.rx_id));
            pending.truncate(limit);
            Ok(Inbox {
                facility_id,
                encounters,
                pending_refills: pending,
            })
        })()
        .map_err(|e: EhrError| e.into());
        self.finish(&who, Action::ReadFacilityInbox, &entity, now, result)
    }

    // ---- sync ------------------------------------------------------------

    pub fn sync_push(
        &mut self,
        caller: &Caller,
        doc: &SyncDocument,
        now: Millis,
    ) -> Result<SyncDocument, ServiceError> {
        let entity = entity_ref("replica", doc.replica_id.as_str());
        let who = self.guard(caller, Action::SyncPush, &entity, now)?;
        // Validate before auditing, as with other writes.
        if let Some(bad) = doc.events.iter().find_map(|e| e.check_well_formed().err()) {
            let err = SyncError::Malformed(bad);
            self.record(who.clinician_id.as_str(), "sync_push", &entity, now, err.code())?;
            return Err(err.into());
        }
        self.record(who.clinician_id.as_str(), "sync_push", &entity, now, "OK")?;
        Ok(self.store.accept_push(doc, now)?)
    }

    pub fn sync_pull(
        &mut self,
        caller: &Caller,
        cursor: u64,
        now: Millis,
    ) -> Result<SyncDocument, ServiceError> {
        let entity = entity_ref("log", &cursor.to_string());
        let who = self.guard(caller, Action::SyncPull, &entity, now)?;
        let result = self.store.pull(cursor).map_err(Into::into);
        self.finish(&who, Action::SyncPull, &entity, now, result)
    }

    // ---- analytics and administration -------------------------------------

    pub fn aggregates(
        &mut self,
        caller: &Caller,
        period: &str,
        k: Option<u32>,
        now: Millis,
    ) -> Result<AggregateExport, ServiceError> {
        let entity = entity_ref("aggregates", period);
        let who = self.guard(caller, Action::ReadAggregates, &entity, now)?;
        let k = k.unwrap_or(self.default_k);
        let result = period
            .parse::<Period>()
            .and_then(|p| aggregate_report(self.store.view(), p, k))
            .map_err(Into::into);
        self.finish(&who, Action::ReadAggregates, &entity, now, result)
    }

    /// Audit entries touching `entity` (all entries when `None`).
    pub fn audit_query(
        &mut self,
        caller: &Caller,
        entity: Option<&str>,
        now: Millis,
    ) -> Result<Vec<AuditRecord>, ServiceError> {
        let target = entity_ref("audit", entity.unwrap_or("*"));
        let who = self.guard(caller, Action::ReadAudit, &target, now)?;
        let rows = match entity {
            Some(e) => self.audit.entries_for(e),
            None => self.audit.records().to_vec(),
        };
        self.finish(&who, Action::ReadAudit, &target, now, Ok(rows))
    }

    /// Directory change (zone, facility, clinician) by an authenticated admin.
    pub fn manage_directory(
        &mut self,
        caller: &Caller,
        mutation: &Mutation,
        now: Millis,
    ) -> Result<Outcome, ServiceError> {
        let entity = directory_ref(mutation)?;
        let who = self.guard(caller, Action::ManageDirectory, &entity, now)?;
        self.mutate(&who, Action::ManageDirectory, &entity, mutation, now)
    }

    /// Operator-side write used by seeding (registrations, historical
    /// encounters and prescriptions); audited with actor `system`.
    pub fn system_commit(&mut self, mutation: &Mutation, now: Millis) -> Result<Outcome, ServiceError> {
        let (action, entity) = match mutation {
            Mutation::RegisterZone(_) | Mutation::RegisterFacility(_) | Mutation::RegisterClinician(_) => {
                (Action::ManageDirectory, directory_ref(mutation)?)
            }
            Mutation::RegisterPatient(p) => (
                Action::RegisterPatient,
                entity_ref("patient", p.patient_id.as_ref().map_or("new", |p| p.as_str())),
            ),
            Mutation::RecordEncounter(e) => (
                Action::RecordEncounter,
                entity_ref("patient", e.patient_id.as_str()),
            ),
            Mutation::AddPrescription(rx) => (
                Action::AddPrescription,
                entity_ref("patient", rx.patient_id.as_str()),
            ),
            other => {
                return Err(EhrError::Validation(format!(
                    "system writes are limited to registration and seeding, got {other:?}"
                ))
                .into())
            }
        };
        self.mutate_as(SYSTEM, action.as_str(), &entity, mutation, now)
    }

    /// Operator-side credential enrollment; audited with actor `system`.
    pub fn enroll(&mut self, enrollment: &Enrollment, now: Millis) -> Result<(), ServiceError> {
        let entity = entity_ref("credential", enrollment.clinician_id.as_str());
        let result = if self.store.view().clinician(&enrollment.clinician_id).is_none() {
            Err(ServiceError::Ehr(EhrError::UnknownClinician(
                enrollment.clinician_id.clone(),
            )))
        } else {
            self.auth
                .enroll(enrollment, &mut self.entropy)
                .map_err(|e| ServiceError::Ehr(EhrError::Validation(e.to_string())))
        };
        let outcome = match &result {
            Ok(()) => "OK",
            Err(e) => e.code(),
        };
        self.record(SYSTEM, "enroll", &entity, now, outcome)?;
        result?;
        self.save_credentials().map_err(EhrError::from)?;
        Ok(())
    }

    pub fn clinician_role(&self, id: &ClinicianId) -> Option<crate::model::Role> {
        self.store.view().clinician(id).map(|c| c.role)
    }
}

fn directory_ref(mutation: &Mutation) -> Result<String, ServiceError> {
    Ok(match mutation {
        Mutation::RegisterZone(z) => entity_ref("zone", z.zone_id.as_str()),
        Mutation::RegisterFacility(f) => entity_ref("facility", f.facility_id.as_str()),
        Mutation::RegisterClinician(c) => entity_ref("clinician", c.clinician_id.as_str()),
        other => {
            return Err(EhrError::Validation(format!("not a directory change: {other:?}")).into())
        }
    })
}
