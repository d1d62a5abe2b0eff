//! Randomized workloads for convergence testing.
//!
//! A workload is an ordinary scenario script: random link schedules, a mix
//! of facility writes, sync triggers, power cuts and link flaps, then a
//! quiet tail in which every link comes up, every replica syncs twice and
//! convergence is asserted.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chrono::NaiveDate;

use crate::model::{Clinician, Facility, FacilityId, Millis, Modality, Role, Sex, Zone};
use crate::netsim::link::{Interval, LinkId, LinkSchedule, LinkState};
use crate::netsim::script::{Check, Command, ScenarioHeader, ScenarioScript, ScriptLine, DEFAULT_EPOCH_MS};
use crate::seed::SeedData;
use crate::store::{Mutation, NewEncounter, NewPatient, NewPrescription, PatientUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub replicas: usize,
    pub operations: usize,
    /// Length of the randomized phase.
    pub active_ms: Millis,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            replicas: 3,
            operations: 50,
            active_ms: 20_000,
        }
    }
}

const CLINICIAN: &str = "C-1";
const CODES: [&[&str]; 5] = [&[], &["MALARIA"], &["TB"], &["MALARIA", "TB"], &["HIV"]];

fn random_schedule(rng: &mut ChaCha8Rng, link: LinkId, active_ms: Millis, horizon_ms: Millis) -> LinkSchedule {
    let cuts = rng.gen_range(0..=3usize);
    let mut points: Vec<Millis> = (0..cuts).map(|_| rng.gen_range(1..active_ms)).collect();
    points.sort_unstable();
    points.dedup();
    let mut state = if rng.gen_bool(0.7) { LinkState::Up } else { LinkState::Down };
    let mut intervals = Vec::new();
    let mut from = 0;
    for p in points.into_iter().chain([horizon_ms]) {
        intervals.push(Interval { from_ms: from, to_ms: p, state });
        from = p;
        state = match state {
            LinkState::Up => LinkState::Down,
            LinkState::Down => LinkState::Up,
        };
    }
    LinkSchedule {
        link,
        intervals,
        base_latency_ms: rng.gen_range(5..=60),
        jitter_ms: rng.gen_range(0..=20),
        jitter_seed: rng.gen(),
    }
}

fn setup(facilities: &[FacilityId]) -> SeedData {
    let zones = ["Z1", "Z2"];
    SeedData {
        zones: zones
            .iter()
            .map(|z| Zone {
                zone_id: (*z).into(),
                name: format!("zone {z}"),
            })
            .collect(),
        facilities: facilities
            .iter()
            .enumerate()
            .map(|(i, f)| Facility {
                facility_id: f.clone(),
                name: format!("facility {f}"),
                zone_id: zones[i % 2].into(),
                modality: Modality::MES,
            })
            .collect(),
        clinicians: vec![Clinician {
            clinician_id: CLINICIAN.into(),
            name: "Clinician".into(),
            role: Role::Physician,
            facility_id: facilities.first().cloned(),
        }],
        patients: (1..=4)
            .map(|i| NewPatient {
                patient_id: Some(format!("P-{i}").as_str().into()),
                name: format!("Patient {i}"),
                birth_date: NaiveDate::from_ymd_opt(1960 + i, 1, 1).expect("valid date"),
                sex: Sex::X,
                zone_id: zones[(i % 2) as usize].into(),
                allergies: Default::default(),
            })
            .collect(),
        ..SeedData::default()
    }
}

struct Pools {
    patients: Vec<String>,
    encounters: Vec<String>,
    prescriptions: Vec<String>,
}

fn pick(rng: &mut ChaCha8Rng, pool: &[String], fallback: &str) -> String {
    pool.choose(rng).cloned().unwrap_or_else(|| fallback.to_owned())
}

fn random_mutation(rng: &mut ChaCha8Rng, i: usize, facility: &FacilityId, pools: &mut Pools) -> Mutation {
    let roll = rng.gen_range(0..100);
    match roll {
        0..=14 => {
            let id = format!("P-new-{i}");
            pools.patients.push(id.clone());
            Mutation::RegisterPatient(NewPatient {
                patient_id: Some(id.as_str().into()),
                name: format!("Registered at {facility}"),
                birth_date: NaiveDate::from_ymd_opt(1990, 6, 1).expect("valid date"),
                sex: Sex::F,
                zone_id: if rng.gen_bool(0.5) { "Z1" } else { "Z2" }.into(),
                allergies: Default::default(),
            })
        }
        15..=34 => {
            let pid = pick(rng, &pools.patients, "P-1");
            let mut update = PatientUpdate {
                patient_id: pid.as_str().into(),
                name: None,
                zone_id: None,
                allergies: None,
            };
            match rng.gen_range(0..3) {
                0 => update.name = Some(format!("Renamed {i}")),
                1 => update.zone_id = Some(if rng.gen_bool(0.5) { "Z1" } else { "Z2" }.into()),
                _ => update.allergies = Some([format!("A{}", rng.gen_range(0..3))].into()),
            }
            Mutation::UpdatePatient(update)
        }
        35..=64 => {
            let id = format!("E-{i}");
            pools.encounters.push(id.clone());
            Mutation::RecordEncounter(NewEncounter {
                encounter_id: Some(id.as_str().into()),
                patient_id: pick(rng, &pools.patients, "P-1").as_str().into(),
                facility_id: facility.clone(),
                clinician_id: Some(CLINICIAN.into()),
                occurred_at: None,
                diagnosis_codes: CODES[rng.gen_range(0..CODES.len())]
                    .iter()
                    .map(|c| (*c).to_owned())
                    .collect(),
                note: format!("visit {i}"),
            })
        }
        65..=74 => {
            let id = format!("R-{i}");
            pools.prescriptions.push(id.clone());
            Mutation::AddPrescription(NewPrescription {
                rx_id: Some(id.as_str().into()),
                patient_id: pick(rng, &pools.patients, "P-1").as_str().into(),
                drug_code: "AMOX".into(),
                dose: "500mg".into(),
                refills: rng.gen_range(0..3),
                prescriber_id: Some(CLINICIAN.into()),
                prescribed_at: None,
            })
        }
        75..=84 => Mutation::RequestRefill {
            rx_id: pick(rng, &pools.prescriptions, "R-none").as_str().into(),
            requested_by: CLINICIAN.into(),
        },
        85..=89 => Mutation::GrantRefill {
            rx_id: pick(rng, &pools.prescriptions, "R-none").as_str().into(),
        },
        90..=94 => Mutation::ExpirePrescription {
            rx_id: pick(rng, &pools.prescriptions, "R-none").as_str().into(),
        },
        _ => Mutation::RetractEncounter {
            encounter_id: pick(rng, &pools.encounters, "E-none").as_str().into(),
        },
    }
}

/// A seeded random scenario ending in a convergence assertion.
pub fn random_scenario(seed: u64, spec: &WorkloadSpec) -> ScenarioScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let facilities: Vec<FacilityId> = (1..=spec.replicas).map(|i| format!("F{i}").as_str().into()).collect();
    let active = spec.active_ms.max(1_000);
    let tail = 6_000 + 600 * spec.replicas as Millis;
    let horizon = active + tail;

    let links = facilities
        .iter()
        .map(|f| random_schedule(&mut rng, LinkId::Internet(f.clone()), active, horizon))
        .collect();

    let mut pools = Pools {
        patients: (1..=4).map(|i| format!("P-{i}")).collect(),
        encounters: Vec::new(),
        prescriptions: Vec::new(),
    };
    let mut times: Vec<Millis> = (0..spec.operations).map(|_| rng.gen_range(100..active)).collect();
    times.sort_unstable();

    let mut commands: Vec<ScriptLine> = facilities
        .iter()
        .map(|f| ScriptLine {
            at_ms: 0,
            command: Command::Sync { facility: f.clone() },
        })
        .collect();
    for (i, at_ms) in times.into_iter().enumerate() {
        let f = facilities.choose(&mut rng).expect("at least one facility").clone();
        let command = match rng.gen_range(0..100) {
            0..=44 => Command::Write {
                mutation: random_mutation(&mut rng, i, &f, &mut pools),
                facility: f,
            },
            45..=69 => Command::Sync { facility: f },
            70..=77 => Command::PowerCut { facility: f },
            78..=87 => Command::PowerRestore { facility: f },
            88..=93 => Command::LinkDown {
                link: LinkId::Internet(f),
            },
            _ => Command::LinkUp {
                link: LinkId::Internet(f),
            },
        };
        commands.push(ScriptLine { at_ms, command });
    }

    // Quiet tail: everything up, two sync passes, then check.
    for f in &facilities {
        commands.push(ScriptLine {
            at_ms: active,
            command: Command::PowerRestore { facility: f.clone() },
        });
        commands.push(ScriptLine {
            at_ms: active,
            command: Command::LinkUp {
                link: LinkId::Internet(f.clone()),
            },
        });
    }
    for pass in 0..2 {
        for (i, f) in facilities.iter().enumerate() {
            commands.push(ScriptLine {
                at_ms: active + 1_000 + pass * (300 * spec.replicas as Millis + 1_000) + 300 * i as Millis,
                command: Command::Sync { facility: f.clone() },
            });
        }
    }
    commands.push(ScriptLine {
        at_ms: horizon - 500,
        command: Command::Assert(Check::Converged),
    });

    ScenarioScript {
        header: ScenarioHeader {
            scenario: format!("random-{seed}"),
            seed,
            horizon_ms: horizon,
            epoch_ms: DEFAULT_EPOCH_MS,
            setup: setup(&facilities),
            facilities,
            phones: Vec::new(),
            links,
            sync_interval_ms: None,
        },
        commands,
    }
}
