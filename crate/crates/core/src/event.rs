//! Change events: the unit of replication.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::hlc::{HlcTimestamp, ReplicaId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Zone,
    Facility,
    Clinician,
    Patient,
    Encounter,
    Prescription,
}

impl EntityKind {
    pub const ALL: [EntityKind; 6] = [
        EntityKind::Zone,
        EntityKind::Facility,
        EntityKind::Clinician,
        EntityKind::Patient,
        EntityKind::Encounter,
        EntityKind::Prescription,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Zone => "zone",
            EntityKind::Facility => "facility",
            EntityKind::Clinician => "clinician",
            EntityKind::Patient => "patient",
            EntityKind::Encounter => "encounter",
            EntityKind::Prescription => "prescription",
        }
    }

    /// Name of the member holding the entity's own id.
    pub fn id_field(self) -> &'static str {
        match self {
            EntityKind::Zone => "zone_id",
            EntityKind::Facility => "facility_id",
            EntityKind::Clinician => "clinician_id",
            EntityKind::Patient => "patient_id",
            EntityKind::Encounter => "encounter_id",
            EntityKind::Prescription => "rx_id",
        }
    }

    /// Members a well-formed event may write.
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            EntityKind::Zone => &["zone_id", "name"],
            EntityKind::Facility => &["facility_id", "name", "zone_id", "modality"],
            EntityKind::Clinician => &["clinician_id", "name", "role", "facility_id"],
            EntityKind::Patient => &[
                "patient_id",
                "name",
                "birth_date",
                "sex",
                "zone_id",
                "allergies",
                "registered_at",
            ],
            EntityKind::Encounter => &[
                "encounter_id",
                "patient_id",
                "facility_id",
                "clinician_id",
                "occurred_at",
                "diagnosis_codes",
                "note",
            ],
            EntityKind::Prescription => &[
                "rx_id",
                "patient_id",
                "drug_code",
                "dose",
                "refills_remaining",
                "status",
                "prescribed_at",
                "prescriber_id",
            ],
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// New value carried by an event. Serialized as `{"value": ...}` or the
/// string `"tombstone"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldValue {
    Value(Value),
    Tombstone,
}

/// Immutable record of one committed mutation.
///
/// `field_path` is either a single member name, in which case `new_value`
/// holds that member's value, or the empty string, in which case
/// `new_value` is an object whose members are all written at `hlc`
/// (creation and multi-field updates). A tombstone always uses the empty
/// path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub event_id: String,
    pub entity_kind: EntityKind,
    pub entity_id: String,
    pub field_path: String,
    pub new_value: FieldValue,
    pub hlc: HlcTimestamp,
    pub origin_replica: ReplicaId,
}

/// Root path: `new_value` is an object patch.
pub const ROOT_PATH: &str = "";

impl ChangeEvent {
    /// Structural checks applied before any remote event is merged.
    pub fn check_well_formed(&self) -> Result<(), String> {
        if self.event_id.is_empty() {
            return Err("empty event_id".into());
        }
        if self.entity_id.is_empty() {
            return Err(format!("event {}: empty entity_id", self.event_id));
        }
        if self.hlc.replica_id != self.origin_replica {
            return Err(format!(
                "event {}: hlc replica {} differs from origin {}",
                self.event_id, self.hlc.replica_id, self.origin_replica
            ));
        }
        let allowed = self.entity_kind.fields();
        match (&self.new_value, self.field_path.as_str()) {
            (FieldValue::Tombstone, ROOT_PATH) => Ok(()),
            (FieldValue::Tombstone, path) => Err(format!(
                "event {}: tombstone must use the root path, got {path:?}",
                self.event_id
            )),
            (FieldValue::Value(Value::Object(patch)), ROOT_PATH) => {
                if patch.is_empty() {
                    return Err(format!("event {}: empty patch", self.event_id));
                }
                for key in patch.keys() {
                    if !allowed.contains(&key.as_str()) {
                        return Err(format!(
                            "event {}: unknown {} field {key:?}",
                            self.event_id, self.entity_kind
                        ));
                    }
                }
                self.check_id_member(patch)
            }
            (FieldValue::Value(_), ROOT_PATH) => Err(format!(
                "event {}: root write must carry an object",
                self.event_id
            )),
            (FieldValue::Value(value), path) => {
                if !allowed.contains(&path) {
                    return Err(format!(
                        "event {}: unknown {} field {path:?}",
                        self.event_id, self.entity_kind
                    ));
                }
                if path == self.entity_kind.id_field() && value.as_str() != Some(&self.entity_id) {
                    return Err(format!("event {}: id member mismatch", self.event_id));
                }
                Ok(())
            }
        }
    }

    fn check_id_member(&self, patch: &Map<String, Value>) -> Result<(), String> {
        match patch.get(self.entity_kind.id_field()) {
            Some(v) if v.as_str() != Some(&self.entity_id) => {
                Err(format!("event {}: id member mismatch", self.event_id))
            }
            _ => Ok(()),
        }
    }

    /// Member writes carried by this event, or `None` for a tombstone.
    pub fn writes(&self) -> Option<Vec<(&str, &Value)>> {
        match &self.new_value {
            FieldValue::Tombstone => None,
            FieldValue::Value(Value::Object(patch)) if self.field_path.is_empty() => {
                Some(patch.iter().map(|(k, v)| (k.as_str(), v)).collect())
            }
            FieldValue::Value(v) => Some(vec![(self.field_path.as_str(), v)]),
        }
    }
}
