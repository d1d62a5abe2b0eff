//! Authentication (USSD PIN, web password) and role authorization.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use pbkdf2::pbkdf2_hmac;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::entropy::Entropy;
use crate::model::{ClinicianId, Millis, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthPolicy {
    /// Consecutive failures that trigger a lock.
    pub max_failures: u32,
    pub lockout_ms: Millis,
    pub token_ttl_ms: Millis,
    pub hash_iterations: u32,
}

impl Default for AuthPolicy {
    fn default() -> Self {
        Self {
            max_failures: 3,
            lockout_ms: 15 * 60 * 1000,
            token_ttl_ms: 8 * 60 * 60 * 1000,
            hash_iterations: 60_000,
        }
    }
}

/// Stored credential. Secrets are kept only as salted PBKDF2-SHA256 hashes
/// in the form `pbkdf2-sha256$<iterations>$<salt hex>$<hash hex>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub clinician_id: ClinicianId,
    pub role: Role,
    pub msisdn: Option<String>,
    pub pin_hash: Option<String>,
    pub password_hash: Option<String>,
    pub failed_attempts: u32,
    pub locked_until: Option<Millis>,
}

/// Authentication request. `Debug` never prints the secret.
#[derive(Clone)]
pub enum Channel {
    Ussd { msisdn: String, pin: String },
    Web { username: String, password: String },
}

impl Channel {
    pub fn principal(&self) -> &str {
        match self {
            Channel::Ussd { msisdn, .. } => msisdn,
            Channel::Web { username, .. } => username,
        }
    }
}

impl fmt::Debug for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::Ussd { msisdn, .. } => write!(f, "Ussd {{ msisdn: {msisdn:?}, pin: <redacted> }}"),
            Channel::Web { username, .. } => {
                write!(f, "Web {{ username: {username:?}, password: <redacted> }}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChannelKind {
    Ussd,
    Web,
    /// Internal callers such as replica sync in the simulator.
    Service,
}

/// An authenticated principal. USSD identities live as long as their
/// session; web identities carry a bearer token and an expiry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Identity {
    pub clinician_id: ClinicianId,
    pub role: Role,
    pub channel: ChannelKind,
    #[serde(skip)]
    pub token: Option<String>,
    pub expires_at: Option<Millis>,
}

impl Identity {
    /// Identity for trusted in-process callers.
    pub fn service(clinician_id: impl Into<String>, role: Role) -> Self {
        Self {
            clinician_id: ClinicianId::new(clinician_id),
            role,
            channel: ChannelKind::Service,
            token: None,
            expires_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("BAD_CREDENTIALS")]
    BadCredentials,
    #[error("LOCKED until {until}")]
    Locked { until: Millis },
    #[error("UNKNOWN_PRINCIPAL")]
    UnknownPrincipal,
    #[error("EXPIRED_TOKEN")]
    ExpiredToken,
    #[error("INVALID_TOKEN")]
    InvalidToken,
    #[error("DUPLICATE_PRINCIPAL: {0}")]
    DuplicatePrincipal(String),
}

impl AuthError {
    pub fn code(&self) -> &'static str {
        match self {
            AuthError::BadCredentials => "BAD_CREDENTIALS",
            AuthError::Locked { .. } => "LOCKED",
            AuthError::UnknownPrincipal => "UNKNOWN_PRINCIPAL",
            AuthError::ExpiredToken => "EXPIRED_TOKEN",
            AuthError::InvalidToken => "INVALID_TOKEN",
            AuthError::DuplicatePrincipal(_) => "DUPLICATE_PRINCIPAL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    ReadPatient,
    RegisterPatient,
    UpdatePatient,
    ReadHistory,
    ReadPrescriptions,
    RecordEncounter,
    RecordObservation,
    RetractEncounter,
    AddPrescription,
    RequestRefill,
    GrantRefill,
    ExpirePrescription,
    ReadFacilityInbox,
    SyncPush,
    SyncPull,
    ReadAggregates,
    ReadAudit,
    ManageDirectory,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::ReadPatient => "read_patient",
            Action::RegisterPatient => "register_patient",
            Action::UpdatePatient => "update_patient",
            Action::ReadHistory => "read_history",
            Action::ReadPrescriptions => "read_prescriptions",
            Action::RecordEncounter => "record_encounter",
            Action::RecordObservation => "record_observation",
            Action::RetractEncounter => "retract_encounter",
            Action::AddPrescription => "add_prescription",
            Action::RequestRefill => "request_refill",
            Action::GrantRefill => "grant_refill",
            Action::ExpirePrescription => "expire_prescription",
            Action::ReadFacilityInbox => "read_facility_inbox",
            Action::SyncPush => "sync_push",
            Action::SyncPull => "sync_pull",
            Action::ReadAggregates => "read_aggregates",
            Action::ReadAudit => "read_audit",
            Action::ManageDirectory => "manage_directory",
        }
    }

    pub fn is_write(self) -> bool {
        matches!(
            self,
            Action::RegisterPatient
                | Action::UpdatePatient
                | Action::RecordEncounter
                | Action::RecordObservation
                | Action::RetractEncounter
                | Action::AddPrescription
                | Action::RequestRefill
                | Action::GrantRefill
                | Action::ExpirePrescription
                | Action::SyncPush
                | Action::ManageDirectory
        )
    }
}

/// Static role-permission table.
pub fn permits(role: Role, action: Action) -> bool {
    use Action::*;
    match role {
        Role::Physician => !matches!(action, ReadAudit | ManageDirectory),
        Role::Nurse => matches!(
            action,
            ReadPatient
                | RegisterPatient
                | UpdatePatient
                | ReadHistory
                | ReadPrescriptions
                | RecordEncounter
                | RecordObservation
                | RequestRefill
                | ReadFacilityInbox
                | SyncPush
                | SyncPull
        ),
        Role::Pharmacist => matches!(
            action,
            ReadPatient
                | ReadHistory
                | ReadPrescriptions
                | RequestRefill
                | GrantRefill
                | ExpirePrescription
                | ReadFacilityInbox
        ),
        Role::Admin => matches!(
            action,
            ReadAggregates | ReadAudit | ManageDirectory | SyncPush | SyncPull
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthzError {
    #[error("FORBIDDEN: {role:?} may not {action}")]
    Denied { role: Role, action: &'static str },
    #[error("EXPIRED_TOKEN")]
    ExpiredToken,
}

pub fn authorize(identity: &Identity, action: Action, now: Millis) -> Result<(), AuthzError> {
    if identity.expires_at.is_some_and(|t| now >= t) {
        return Err(AuthzError::ExpiredToken);
    }
    if permits(identity.role, action) {
        Ok(())
    } else {
        Err(AuthzError::Denied {
            role: identity.role,
            action: action.as_str(),
        })
    }
}

fn hash_secret(secret: &str, iterations: u32, entropy: &mut Entropy) -> String {
    let salt = entropy.bytes::<16>();
    let mut out = [0u8; 32];
    pbkdf2_hmac::<Sha256>(secret.as_bytes(), &salt, iterations, &mut out);
    format!(
        "pbkdf2-sha256${iterations}${}${}",
        hex::encode(salt),
        hex::encode(out)
    )
}

fn verify_secret(secret: &str, stored: &str) -> bool {
    let parts: Vec<&str> = stored.split('$').collect();
    let [scheme, iterations, salt, hash] = parts.as_slice() else {
        return false;
    };
    if *scheme != "pbkdf2-sha256" {
        return false;
    }
    let (Ok(iterations), Ok(salt), Ok(expected)) =
        (iterations.parse::<u32>(), hex::decode(salt), hex::decode(hash))
    else {
        return false;
    };
    let mut out = vec![0u8; expected.len()];
    pbkdf2_hmac::<Sha256>(secret.as_bytes(), &salt, iterations, &mut out);
    out.ct_eq(&expected).into()
}

/// Enrollment input; secrets are hashed immediately.
#[derive(Clone, Serialize, Deserialize)]
pub struct Enrollment {
    pub clinician_id: ClinicianId,
    pub role: Role,
    #[serde(default)]
    pub msisdn: Option<String>,
    #[serde(default)]
    pub pin: Option<String>,
    #[serde(default)]
    pub password: Option<String>,
}

impl fmt::Debug for Enrollment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enrollment")
            .field("clinician_id", &self.clinician_id)
            .field("role", &self.role)
            .field("msisdn", &self.msisdn)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Default)]
pub struct AuthRegistry {
    policy: AuthPolicy,
    credentials: BTreeMap<ClinicianId, Credential>,
    by_msisdn: BTreeMap<String, ClinicianId>,
    tokens: HashMap<String, Identity>,
}

impl AuthRegistry {
    pub fn new(policy: AuthPolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn from_credentials(policy: AuthPolicy, credentials: Vec<Credential>) -> Self {
        let mut reg = Self::new(policy);
        for c in credentials {
            if let Some(m) = &c.msisdn {
                reg.by_msisdn.insert(m.clone(), c.clinician_id.clone());
            }
            reg.credentials.insert(c.clinician_id.clone(), c);
        }
        reg
    }

    pub fn policy(&self) -> &AuthPolicy {
        &self.policy
    }

    pub fn credentials(&self) -> impl Iterator<Item = &Credential> {
        self.credentials.values()
    }

    pub fn credential(&self, id: &ClinicianId) -> Option<&Credential> {
        self.credentials.get(id)
    }

    pub fn is_msisdn_registered(&self, msisdn: &str) -> bool {
        self.by_msisdn.contains_key(msisdn)
    }

    pub fn enroll(&mut self, e: &Enrollment, entropy: &mut Entropy) -> Result<(), AuthError> {
        if self.credentials.contains_key(&e.clinician_id) {
            return Err(AuthError::DuplicatePrincipal(e.clinician_id.0.clone()));
        }
        if let Some(m) = &e.msisdn {
            if self.by_msisdn.contains_key(m) {
                return Err(AuthError::DuplicatePrincipal(m.clone()));
            }
        }
        let iterations = self.policy.hash_iterations;
        let cred = Credential {
            clinician_id: e.clinician_id.clone(),
            role: e.role,
            msisdn: e.msisdn.clone(),
            pin_hash: e.pin.as_deref().map(|p| hash_secret(p, iterations, entropy)),
            password_hash: e
                .password
                .as_deref()
                .map(|p| hash_secret(p, iterations, entropy)),
            failed_attempts: 0,
            locked_until: None,
        };
        if let Some(m) = &cred.msisdn {
            self.by_msisdn.insert(m.clone(), cred.clinician_id.clone());
        }
        self.credentials.insert(cred.clinician_id.clone(), cred);
        Ok(())
    }

    /// Check a credential. Failures count towards the lockout; while locked
    /// every attempt is refused with `LOCKED` regardless of the secret.
    pub fn authenticate(
        &mut self,
        channel: &Channel,
        now: Millis,
        entropy: &mut Entropy,
    ) -> Result<Identity, AuthError> {
        let id = match channel {
            Channel::Ussd { msisdn, .. } => self.by_msisdn.get(msisdn).cloned(),
            Channel::Web { username, .. } => Some(ClinicianId::new(username.as_str()))
                .filter(|id| self.credentials.contains_key(id)),
        }
        .ok_or(AuthError::UnknownPrincipal)?;
        let policy = self.policy;
        let cred = self.credentials.get_mut(&id).expect("indexed credential");

        if let Some(until) = cred.locked_until {
            if now < until {
                return Err(AuthError::Locked { until });
            }
            cred.locked_until = None;
            cred.failed_attempts = 0;
        }

        let (secret, stored, kind) = match channel {
            Channel::Ussd { pin, .. } => (pin, &cred.pin_hash, ChannelKind::Ussd),
            Channel::Web { password, .. } => (password, &cred.password_hash, ChannelKind::Web),
        };
        let ok = stored.as_deref().is_some_and(|h| verify_secret(secret, h));
        if !ok {
            cred.failed_attempts += 1;
            if cred.failed_attempts >= policy.max_failures {
                cred.locked_until = Some(now + policy.lockout_ms);
            }
            return Err(AuthError::BadCredentials);
        }
        cred.failed_attempts = 0;

        let mut identity = Identity {
            clinician_id: cred.clinician_id.clone(),
            role: cred.role,
            channel: kind,
            token: None,
            expires_at: None,
        };
        if kind == ChannelKind::Web {
            let token = entropy.token();
            identity.token = Some(token.clone());
            identity.expires_at = Some(now + policy.token_ttl_ms);
            self.tokens.insert(token, identity.clone());
        }
        Ok(identity)
    }

    pub fn resolve_token(&self, token: &str, now: Millis) -> Result<Identity, AuthError> {
        let identity = self.tokens.get(token).ok_or(AuthError::InvalidToken)?;
        if identity.expires_at.is_some_and(|t| now >= t) {
            return Err(AuthError::ExpiredToken);
        }
        Ok(identity.clone())
    }

    /// Drop expired bearer tokens.
    pub fn purge_tokens(&mut self, now: Millis) {
        self.tokens
            .retain(|_, id| id.expires_at.is_none_or(|t| now < t));
    }
}
