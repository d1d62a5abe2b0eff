//! Clinical domain entities.
//!
//! Every entity serializes to a flat JSON object. The replication layer
//! stores each top-level member as an independent last-writer-wins register,
//! so field names here are also the `field_path` values carried by
//! [`ChangeEvent`](crate::event::ChangeEvent)s.

use std::collections::BTreeSet;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch (simulated or wall clock).
pub type Millis = u64;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

id_type!(PatientId);
id_type!(EncounterId);
id_type!(RxId);
id_type!(FacilityId);
id_type!(ZoneId);
id_type!(
    /// Identifies a clinician account; doubles as the web login username.
    ClinicianId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Web-based, always-online client of the central store.
    WES,
    /// Mobile client with a local replica that syncs when connected.
    MES,
    /// Feature-phone access through the USSD gateway.
    UES,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Physician,
    Nurse,
    Pharmacist,
    Admin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RxStatus {
    Active,
    RefillRequested,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Zone {
    pub zone_id: ZoneId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Facility {
    pub facility_id: FacilityId,
    pub name: String,
    pub zone_id: ZoneId,
    pub modality: Modality,
}

/// Replicated directory entry for a clinician. Credentials live in
/// [`auth`](crate::auth) and never leave the central store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clinician {
    pub clinician_id: ClinicianId,
    pub name: String,
    pub role: Role,
    pub facility_id: Option<FacilityId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: PatientId,
    pub name: String,
    pub birth_date: NaiveDate,
    pub sex: Sex,
    pub zone_id: ZoneId,
    pub allergies: BTreeSet<String>,
    pub registered_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encounter {
    pub encounter_id: EncounterId,
    pub patient_id: PatientId,
    pub facility_id: FacilityId,
    pub clinician_id: ClinicianId,
    pub occurred_at: Millis,
    pub diagnosis_codes: Vec<String>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prescription {
    pub rx_id: RxId,
    pub patient_id: PatientId,
    pub drug_code: String,
    pub dose: String,
    pub refills_remaining: u32,
    pub status: RxStatus,
    pub prescribed_at: Millis,
    pub prescriber_id: ClinicianId,
}

/// Result of a successful refill request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefillRequest {
    pub rx_id: RxId,
    pub patient_id: PatientId,
    pub drug_code: String,
    pub requested_by: ClinicianId,
    pub requested_at: Millis,
    pub refills_remaining: u32,
}

/// One row of a patient's chronological history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HistoryEntry {
    Encounter(Encounter),
    Prescription(Prescription),
}

impl HistoryEntry {
    pub fn occurred_at(&self) -> Millis {
        match self {
            HistoryEntry::Encounter(e) => e.occurred_at,
            HistoryEntry::Prescription(p) => p.prescribed_at,
        }
    }

    pub fn entity_id(&self) -> &str {
        match self {
            HistoryEntry::Encounter(e) => e.encounter_id.as_str(),
            HistoryEntry::Prescription(p) => p.rx_id.as_str(),
        }
    }

    /// History order: `(occurred_at, entity id)`, ids compared lexicographically.
    pub fn sort_key(&self) -> (Millis, &str) {
        (self.occurred_at(), self.entity_id())
    }
}
