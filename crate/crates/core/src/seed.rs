//! Fixture data loaded into a fresh central store.

use serde::{Deserialize, Serialize};

use crate::auth::Enrollment;
use crate::model::{Clinician, Facility, Millis, Zone};
use crate::service::{EhrService, ServiceError};
use crate::store::{Mutation, NewEncounter, NewPatient, NewPrescription};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedData {
    pub zones: Vec<Zone>,
    pub facilities: Vec<Facility>,
    pub clinicians: Vec<Clinician>,
    pub patients: Vec<NewPatient>,
    pub encounters: Vec<NewEncounter>,
    pub prescriptions: Vec<NewPrescription>,
    pub enrollments: Vec<Enrollment>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SeedSummary {
    pub records: usize,
    pub enrollments: usize,
}

impl SeedData {
    /// Registration order: directory first, then patients, then their
    /// clinical records.
    pub fn mutations(&self) -> Vec<Mutation> {
        let mut out = Vec::new();
        out.extend(self.zones.iter().cloned().map(Mutation::RegisterZone));
        out.extend(self.facilities.iter().cloned().map(Mutation::RegisterFacility));
        out.extend(self.clinicians.iter().cloned().map(Mutation::RegisterClinician));
        out.extend(self.patients.iter().cloned().map(Mutation::RegisterPatient));
        out.extend(self.encounters.iter().cloned().map(Mutation::RecordEncounter));
        out.extend(self.prescriptions.iter().cloned().map(Mutation::AddPrescription));
        out
    }

    pub fn is_empty(&self) -> bool {
        self.mutations().is_empty() && self.enrollments.is_empty()
    }

    /// Commit everything as the operator. Stops at the first failure.
    pub fn apply(&self, service: &mut EhrService, now: Millis) -> Result<SeedSummary, ServiceError> {
        let mut summary = SeedSummary::default();
        for m in self.mutations() {
            service.system_commit(&m, now)?;
            summary.records += 1;
        }
        for e in &self.enrollments {
            service.enroll(e, now)?;
            summary.enrollments += 1;
        }
        Ok(summary)
    }
}
