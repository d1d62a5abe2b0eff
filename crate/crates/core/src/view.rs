//! Materialized entity view built from change events.
//!
//! State is a map of per-field last-writer-wins registers. Merging is a
//! join: the register with the greater `(hlc, encoded value)` survives, so
//! applying any set of events in any order, any number of times, yields the
//! same registers. Typed entities are derived from the registers and cached.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::event::{ChangeEvent, EntityKind};
use crate::hlc::HlcTimestamp;
use crate::model::{
    Clinician, ClinicianId, Encounter, EncounterId, Facility, FacilityId, HistoryEntry,
    PatientId, PatientRecord, Prescription, RxId, Zone, ZoneId,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub value: Value,
    pub hlc: HlcTimestamp,
}

impl Register {
    fn dominates(&self, other: &Register) -> bool {
        match self.hlc.cmp(&other.hlc) {
            std::cmp::Ordering::Equal => self.value.to_string() > other.value.to_string(),
            ord => ord.is_gt(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityState {
    pub fields: BTreeMap<String, Register>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tombstone: Option<HlcTimestamp>,
}

impl EntityState {
    /// Deleted iff a tombstone is newer than every field write.
    pub fn is_live(&self) -> bool {
        match &self.tombstone {
            None => true,
            Some(t) => self.fields.values().any(|r| &r.hlc > t),
        }
    }

    fn as_object(&self) -> Map<String, Value> {
        self.fields
            .iter()
            .map(|(k, r)| (k.clone(), r.value.clone()))
            .collect()
    }
}

/// Serialized form of a view, used by snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewSnapshot {
    pub entities: Vec<SnapshotEntity>,
    pub seen: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotEntity {
    pub kind: EntityKind,
    pub id: String,
    pub state: EntityState,
}

#[derive(Debug, Clone, Default)]
pub struct View {
    entities: BTreeMap<(EntityKind, String), EntityState>,
    seen: HashSet<String>,
    zones: BTreeMap<ZoneId, Zone>,
    facilities: BTreeMap<FacilityId, Facility>,
    clinicians: BTreeMap<ClinicianId, Clinician>,
    patients: BTreeMap<PatientId, PatientRecord>,
    encounters: BTreeMap<EncounterId, Encounter>,
    prescriptions: BTreeMap<RxId, Prescription>,
    encounters_by_patient: BTreeMap<PatientId, BTreeSet<EncounterId>>,
    rx_by_patient: BTreeMap<PatientId, BTreeSet<RxId>>,
}

/// Two views are equal when their registers are equal; typed caches are a
/// function of the registers.
impl PartialEq for View {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
    }
}

impl Eq for View {}

impl View {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_seen(&self, event_id: &str) -> bool {
        self.seen.contains(event_id)
    }

    pub fn seen_count(&self) -> usize {
        self.seen.len()
    }

    /// Merge one event. Returns `false` when the event id was already merged.
    /// The caller is responsible for well-formedness.
    pub fn apply(&mut self, event: &ChangeEvent) -> bool {
        if !self.seen.insert(event.event_id.clone()) {
            return false;
        }
        let key = (event.entity_kind, event.entity_id.clone());
        let state = self.entities.entry(key.clone()).or_default();
        match event.writes() {
            None => {
                if state.tombstone.as_ref().is_none_or(|t| &event.hlc > t) {
                    state.tombstone = Some(event.hlc.clone());
                }
            }
            Some(writes) => {
                for (field, value) in writes {
                    let incoming = Register {
                        value: value.clone(),
                        hlc: event.hlc.clone(),
                    };
                    match state.fields.get(field) {
                        Some(current) if !incoming.dominates(current) => {}
                        _ => {
                            state.fields.insert(field.to_owned(), incoming);
                        }
                    }
                }
            }
        }
        self.refresh(&key);
        true
    }

    pub fn entity_state(&self, kind: EntityKind, id: &str) -> Option<&EntityState> {
        self.entities.get(&(kind, id.to_owned()))
    }

    /// Live materialized entity as JSON, if complete.
    pub fn entity_json(&self, kind: EntityKind, id: &str) -> Option<Value> {
        let present = match kind {
            EntityKind::Zone => self.zones.contains_key(&ZoneId::new(id)),
            EntityKind::Facility => self.facilities.contains_key(&FacilityId::new(id)),
            EntityKind::Clinician => self.clinicians.contains_key(&ClinicianId::new(id)),
            EntityKind::Patient => self.patients.contains_key(&PatientId::new(id)),
            EntityKind::Encounter => self.encounters.contains_key(&EncounterId::new(id)),
            EntityKind::Prescription => self.prescriptions.contains_key(&RxId::new(id)),
        };
        if !present {
            return None;
        }
        self.entity_state(kind, id)
            .map(|s| Value::Object(s.as_object()))
    }

    /// Register-level content, suitable for equality checks across stores.
    pub fn registers(&self) -> &BTreeMap<(EntityKind, String), EntityState> {
        &self.entities
    }

    pub fn snapshot(&self) -> ViewSnapshot {
        let mut seen: Vec<String> = self.seen.iter().cloned().collect();
        seen.sort();
        ViewSnapshot {
            entities: self
                .entities
                .iter()
                .map(|((kind, id), state)| SnapshotEntity {
                    kind: *kind,
                    id: id.clone(),
                    state: state.clone(),
                })
                .collect(),
            seen,
        }
    }

    pub fn from_snapshot(snapshot: ViewSnapshot) -> Self {
        let mut view = View {
            seen: snapshot.seen.into_iter().collect(),
            ..View::default()
        };
        for e in snapshot.entities {
            view.entities.insert((e.kind, e.id), e.state);
        }
        let keys: Vec<_> = view.entities.keys().cloned().collect();
        for key in keys {
            view.refresh(&key);
        }
        view
    }

    fn refresh(&mut self, key: &(EntityKind, String)) {
        let (kind, id) = key;
        let object = self
            .entities
            .get(key)
            .filter(|s| s.is_live())
            .map(EntityState::as_object);
        match kind {
            EntityKind::Zone => {
                update_cache(&mut self.zones, ZoneId::new(id.as_str()), object);
            }
            EntityKind::Facility => {
                update_cache(&mut self.facilities, FacilityId::new(id.as_str()), object);
            }
            EntityKind::Clinician => {
                update_cache(&mut self.clinicians, ClinicianId::new(id.as_str()), object);
            }
            EntityKind::Patient => {
                update_cache(&mut self.patients, PatientId::new(id.as_str()), object);
            }
            EntityKind::Encounter => {
                let eid = EncounterId::new(id.as_str());
                let old = update_cache(&mut self.encounters, eid.clone(), object);
                if let Some(old) = old {
                    remove_index(&mut self.encounters_by_patient, &old.patient_id, &eid);
                }
                if let Some(new) = self.encounters.get(&eid) {
                    self.encounters_by_patient
                        .entry(new.patient_id.clone())
                        .or_default()
                        .insert(eid);
                }
            }
            EntityKind::Prescription => {
                let rx = RxId::new(id.as_str());
                let old = update_cache(&mut self.prescriptions, rx.clone(), object);
                if let Some(old) = old {
                    remove_index(&mut self.rx_by_patient, &old.patient_id, &rx);
                }
                if let Some(new) = self.prescriptions.get(&rx) {
                    self.rx_by_patient
                        .entry(new.patient_id.clone())
                        .or_default()
                        .insert(rx);
                }
            }
        }
    }

    pub fn zone(&self, id: &ZoneId) -> Option<&Zone> {
        self.zones.get(id)
    }

    pub fn facility(&self, id: &FacilityId) -> Option<&Facility> {
        self.facilities.get(id)
    }

    pub fn clinician(&self, id: &ClinicianId) -> Option<&Clinician> {
        self.clinicians.get(id)
    }

    pub fn patient(&self, id: &PatientId) -> Option<&PatientRecord> {
        self.patients.get(id)
    }

    pub fn encounter(&self, id: &EncounterId) -> Option<&Encounter> {
        self.encounters.get(id)
    }

    pub fn prescription(&self, id: &RxId) -> Option<&Prescription> {
        self.prescriptions.get(id)
    }

    pub fn zones(&self) -> impl Iterator<Item = &Zone> {
        self.zones.values()
    }

    pub fn facilities(&self) -> impl Iterator<Item = &Facility> {
        self.facilities.values()
    }

    pub fn clinicians(&self) -> impl Iterator<Item = &Clinician> {
        self.clinicians.values()
    }

    pub fn patients(&self) -> impl Iterator<Item = &PatientRecord> {
        self.patients.values()
    }

    pub fn encounters(&self) -> impl Iterator<Item = &Encounter> {
        self.encounters.values()
    }

    pub fn prescriptions(&self) -> impl Iterator<Item = &Prescription> {
        self.prescriptions.values()
    }

    pub fn encounters_of(&self, patient: &PatientId) -> impl Iterator<Item = &Encounter> {
        self.encounters_by_patient
            .get(patient)
            .into_iter()
            .flatten()
            .filter_map(|id| self.encounters.get(id))
    }

    pub fn prescriptions_of(&self, patient: &PatientId) -> impl Iterator<Item = &Prescription> {
        self.rx_by_patient
            .get(patient)
            .into_iter()
            .flatten()
            .filter_map(|id| self.prescriptions.get(id))
    }

    /// Encounters and prescriptions of a patient ordered by
    /// `(occurred_at, entity id)`.
    pub fn history_of(&self, patient: &PatientId) -> Vec<HistoryEntry> {
        let mut entries: Vec<HistoryEntry> = self
            .encounters_of(patient)
            .cloned()
            .map(HistoryEntry::Encounter)
            .chain(
                self.prescriptions_of(patient)
                    .cloned()
                    .map(HistoryEntry::Prescription),
            )
            .collect();
        entries.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        entries
    }

    pub fn patient_count_in_zone(&self, zone: &ZoneId) -> usize {
        self.patients.values().filter(|p| &p.zone_id == zone).count()
    }
}

fn update_cache<K: Ord, T: DeserializeOwned>(
    cache: &mut BTreeMap<K, T>,
    key: K,
    object: Option<Map<String, Value>>,
) -> Option<T> {
    let typed = object.and_then(|o| serde_json::from_value::<T>(Value::Object(o)).ok());
    match typed {
        Some(t) => cache.insert(key, t),
        None => cache.remove(&key),
    }
}

fn remove_index<K: Ord, V: Ord>(index: &mut BTreeMap<K, BTreeSet<V>>, key: &K, value: &V) {
    if let Some(set) = index.get_mut(key) {
        set.remove(value);
        if set.is_empty() {
            index.remove(key);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::FieldValue;
    use crate::hlc::ReplicaId;
    use serde_json::json;

    fn ev(id: &str, path: &str, value: FieldValue, hlc: (u64, u32, &str)) -> ChangeEvent {
        ChangeEvent {
            event_id: id.into(),
            entity_kind: EntityKind::Zone,
            entity_id: "Z1".into(),
            field_path: path.into(),
            new_value: value,
            hlc: HlcTimestamp::new(hlc.0, hlc.1, hlc.2),
            origin_replica: ReplicaId::new(hlc.2),
        }
    }

    #[test]
    fn incomplete_entity_is_not_materialized() {
        let mut view = View::new();
        view.apply(&ev("e1", "name", FieldValue::Value(json!("North")), (5, 0, "A")));
        assert!(view.zone(&ZoneId::new("Z1")).is_none());
        view.apply(&ev(
            "e2",
            "",
            FieldValue::Value(json!({"zone_id": "Z1", "name": "Old"})),
            (1, 0, "B"),
        ));
        assert_eq!(view.zone(&ZoneId::new("Z1")).unwrap().name, "North");
    }

    #[test]
    fn tombstone_hides_until_newer_write() {
        let mut view = View::new();
        view.apply(&ev(
            "e1",
            "",
            FieldValue::Value(json!({"zone_id": "Z1", "name": "North"})),
            (1, 0, "A"),
        ));
        view.apply(&ev("e2", "", FieldValue::Tombstone, (2, 0, "A")));
        assert!(view.zone(&ZoneId::new("Z1")).is_none());
        view.apply(&ev("e3", "name", FieldValue::Value(json!("South")), (3, 0, "B")));
        assert_eq!(view.zone(&ZoneId::new("Z1")).unwrap().name, "South");
    }

    #[test]
    fn duplicate_event_id_is_ignored() {
        let mut view = View::new();
        let e = ev("e1", "name", FieldValue::Value(json!("N")), (1, 0, "A"));
        assert!(view.apply(&e));
        assert!(!view.apply(&e));
    }

    #[test]
    fn snapshot_round_trip_preserves_registers_and_seen() {
        let mut view = View::new();
        view.apply(&ev(
            "e1",
            "",
            FieldValue::Value(json!({"zone_id": "Z1", "name": "North"})),
            (1, 0, "A"),
        ));
        let restored = View::from_snapshot(view.snapshot());
        assert_eq!(restored, view);
        assert!(restored.has_seen("e1"));
        assert!(restored.zone(&ZoneId::new("Z1")).is_some());
    }
}
