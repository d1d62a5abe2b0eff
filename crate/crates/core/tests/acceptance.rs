//! Acceptance gate. Runs every primary criterion, prints one line per
//! criterion and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use chrono::NaiveDate;
use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use offgrid_ehr::analytics::aggregate_report;
use offgrid_ehr::audit::{verify_audit_chain, ChainStatus, AUDIT_FILE};
use offgrid_ehr::auth::{AuthPolicy, Identity};
use offgrid_ehr::entropy::Entropy;
use offgrid_ehr::event::{ChangeEvent, FieldValue};
use offgrid_ehr::hlc::ReplicaId;
use offgrid_ehr::model::{
    Clinician, Facility, Millis, Modality, Role, RxStatus, Sex, Zone,
};
use offgrid_ehr::netsim::link::LinkState;
use offgrid_ehr::netsim::trace::{TraceEvent, Verdict};
use offgrid_ehr::netsim::workload::{random_scenario, WorkloadSpec};
use offgrid_ehr::netsim::{run_scenario, Check, Command, LinkId, Presence, ScenarioScript};
use offgrid_ehr::persist::Plaintext;
use offgrid_ehr::seed::SeedData;
use offgrid_ehr::service::EhrService;
use offgrid_ehr::store::{
    CentralStore, Mutation, NewEncounter, NewPatient, NewPrescription, PatientUpdate, RecordReader,
};
use offgrid_ehr::sync::{Replica, SyncDocument};
use offgrid_ehr::ussd::gateway::{self, Gateway, GatewayConfig, ServiceBackend};
use offgrid_ehr::ussd::menu::{Frame, FieldName, Menu, MenuSession, Step};
use offgrid_ehr::ussd::pdu::{PduKind, UssdPdu, MAX_PAYLOAD_CHARS};
use offgrid_ehr::view::View;
use offgrid_ehr::web::{handle_request, ApiRequest};

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture_script(name: &str) -> ScenarioScript {
    let text = std::fs::read_to_string(fixtures().join(name)).expect("fixture exists");
    ScenarioScript::parse(&text).expect("fixture parses")
}

fn seed_data() -> SeedData {
    let text = std::fs::read_to_string(fixtures().join("seed.json")).expect("seed exists");
    serde_json::from_str(&text).expect("seed parses")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- convergence ----------------------------------------------------------------

fn convergence_suite() -> Outcome {
    let start = Instant::now();
    let spec = WorkloadSpec::default();
    let mut converged = 0;
    let mut failures = Vec::new();
    for seed in 0..200u64 {
        let script = random_scenario(seed, &spec);
        let trace = run_scenario(&script, None).map_err(|e| format!("seed {seed}: {e}"))?;
        trace
            .check_conservation()
            .map_err(|e| format!("seed {seed}: conservation: {e}"))?;
        match trace.failures().as_slice() {
            [] if trace.assertions() == 1 => converged += 1,
            f => failures.push(format!("seed {seed}: {f:?}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(failures.is_empty(), || failures.join("; "))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{converged}/200 scenarios converged in {secs:.1}s"))
}

// ---- fixtures ------------------------------------------------------------------

fn verdicts(trace: &offgrid_ehr::netsim::Trace) -> Vec<(Check, Verdict)> {
    trace
        .entries
        .iter()
        .filter_map(|e| match &e.event {
            TraceEvent::Assert { check, verdict, .. } => Some((check.clone(), *verdict)),
            _ => None,
        })
        .collect()
}

fn h1_h2_transfer() -> Outcome {
    let script = fixture_script("h1-h2-transfer.json");
    let a = run_scenario(&script, Some(7)).map_err(|e| e.to_string())?;
    let b = run_scenario(&script, Some(7)).map_err(|e| e.to_string())?;
    let h2: Vec<Presence> = verdicts(&a)
        .into_iter()
        .filter_map(|(c, v)| match c {
            Check::Encounter { site, expect, .. } if site.as_str() == "H2" && v == Verdict::Pass => Some(expect),
            _ => None,
        })
        .collect();
    ensure(a.failures().is_empty(), || format!("{:?}", a.failures()))?;
    ensure(h2 == [Presence::Missing, Presence::Present], || format!("H2 reads: {h2:?}"))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    std::fs::write(&pa, a.to_jsonl()).map_err(|e| e.to_string())?;
    std::fs::write(&pb, b.to_jsonl()).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    ensure(ba == bb, || "traces differ between runs".into())?;
    Ok(format!("MISSING then PRESENT at H2; {} trace bytes identical across runs", ba.len()))
}

fn ussd_during_outage() -> Outcome {
    let script = fixture_script("ussd-during-outage.json");
    let internet = LinkId::Internet("C1".into());
    let sched = script
        .header
        .links
        .iter()
        .find(|s| s.link == internet)
        .ok_or("no schedule for internet:C1")?;
    ensure(
        sched.intervals.iter().all(|i| i.state == LinkState::Down)
            && sched.intervals.last().is_some_and(|i| i.to_ms >= script.header.horizon_ms)
            && !script.commands.iter().any(|c| matches!(&c.command, Command::LinkUp { link } if *link == internet)),
        || "facility link is not down for the whole horizon".into(),
    )?;
    let trace = run_scenario(&script, None).map_err(|e| e.to_string())?;
    ensure(trace.failures().is_empty(), || format!("{:?}", trace.failures()))?;
    let screens: Vec<&String> = trace
        .entries
        .iter()
        .filter_map(|e| match &e.event {
            TraceEvent::Ussd {
                text,
                direction: offgrid_ehr::ussd::pdu::Direction::ToPhone,
                ..
            } => Some(text),
            _ => None,
        })
        .collect();
    let longest = screens.iter().map(|s| s.chars().count()).max().unwrap_or(0);
    ensure(longest <= MAX_PAYLOAD_CHARS, || format!("screen of {longest} chars"))?;
    ensure(screens.len() <= 8, || format!("{} exchanges", screens.len()))?;
    ensure(
        screens.last().map(|s| s.as_str()) == Some("Refill requested."),
        || format!("last screen {:?}", screens.last()),
    )?;
    let central_checked = verdicts(&trace).iter().any(|(c, v)| {
        matches!(c, Check::RxStatus { site, status: RxStatus::RefillRequested, .. } if site.as_str() == "central")
            && *v == Verdict::Pass
    });
    ensure(central_checked, || "refill not confirmed centrally".into())?;
    Ok(format!("{} exchanges, longest screen {longest} chars, refill visible centrally", screens.len()))
}

// ---- menu walk -----------------------------------------------------------------

struct Walk<'a> {
    menu: &'a Menu,
    service: &'a mut EhrService,
    identity: Identity,
    visited: HashSet<MenuSession>,
    nodes: BTreeSet<String>,
    deepest_page: usize,
    pick_lists: usize,
    screens: usize,
    over_budget: usize,
    errors: Vec<String>,
}

const MAX_DEPTH: usize = 24;

impl Walk<'_> {
    fn inputs(session: &MenuSession) -> Vec<String> {
        let mut v: Vec<String> = (0..=9).map(|d| d.to_string()).collect();
        v.extend(["", "10", "#", "*"].map(String::from));
        if let Some(Frame::Prompt { field, .. }) = session.stack().last() {
            let field = &field.name;
            let extra: &[&str] = match field {
                FieldName::PatientId => &["P-0001", "P-MANY", "P-0013", "P-NONE"],
                FieldName::Observation => &["BP=120/80", "no equals sign"],
                FieldName::Note => &["Feeling better"],
            };
            v.extend(extra.iter().map(|s| s.to_string()));
            v.push("x".repeat(170));
        }
        v
    }

    fn check(&mut self, text: &str) {
        self.screens += 1;
        if text.chars().count() > MAX_PAYLOAD_CHARS {
            self.over_budget += 1;
        }
    }

    fn visit(&mut self, session: &MenuSession, depth: usize) {
        for f in session.stack() {
            match f {
                Frame::Node { node, .. } => {
                    self.nodes.insert(node.clone());
                }
                Frame::Listing { page, pick, .. } => {
                    self.deepest_page = self.deepest_page.max(*page);
                    self.pick_lists += usize::from(pick.is_some());
                }
                Frame::Prompt { .. } => {}
            }
        }
        if depth >= MAX_DEPTH {
            return;
        }
        for input in Self::inputs(session) {
            let mut next = session.clone();
            let menu = self.menu;
            let service = &mut *self.service;
            let identity = &self.identity;
            let run = catch_unwind(AssertUnwindSafe(|| {
                let mut step = next.step(menu, &input);
                loop {
                    match step {
                        Step::Execute(cmd) => {
                            let result = gateway::run_command(service, identity, &cmd, T0);
                            step = next.complete(menu, result);
                        }
                        Step::Screen(t) => break (t, false),
                        Step::End(t) => break (t, true),
                    }
                }
            }));
            match run {
                Err(_) => self.errors.push(format!("panic on {input:?} at {:?}", session.stack())),
                Ok((text, ended)) => {
                    self.check(&text);
                    if !ended && self.visited.insert(next.clone()) {
                        self.visit(&next, depth + 1);
                    }
                }
            }
        }
    }
}

const T0: Millis = 1_711_929_600_000; // 2024-04-01

fn walk_service() -> EhrService {
    let mut s = EhrService::in_memory(
        AuthPolicy {
            hash_iterations: 1_000,
            ..AuthPolicy::default()
        },
        17,
    );
    let mut seed = seed_data();
    seed.enrollments.clear();
    seed.patients.push(NewPatient {
        patient_id: Some("P-MANY".into()),
        name: "Patient With A Rather Long Name For Titles".into(),
        birth_date: NaiveDate::from_ymd_opt(1940, 2, 3).unwrap(),
        sex: Sex::F,
        zone_id: "Z-LAKE".into(),
        allergies: Default::default(),
    });
    for i in 0..25 {
        seed.encounters.push(NewEncounter {
            encounter_id: Some(format!("E-MANY-{i}").as_str().into()),
            patient_id: "P-MANY".into(),
            facility_id: "C1".into(),
            clinician_id: Some("N-CHIKU".into()),
            occurred_at: Some(T0 - 86_400_000 * (40 - i)),
            diagnosis_codes: if i % 3 == 0 { vec![] } else { vec!["MALARIA".into(), "ANAEMIA".into()] },
            note: "BP=118/76 with a note long enough to need clipping on a small screen".into(),
        });
    }
    for i in 0..3 {
        seed.prescriptions.push(NewPrescription {
            rx_id: Some(format!("RX-MANY-{i}").as_str().into()),
            patient_id: "P-MANY".into(),
            drug_code: "FERROUS-SULPHATE-AND-FOLIC-ACID".into(),
            dose: "200mg three times daily after meals".into(),
            refills: 2 + i,
            prescriber_id: Some("D-ASHA".into()),
            prescribed_at: Some(T0 - 86_400_000),
        });
    }
    seed.apply(&mut s, T0).expect("seed applies");
    s
}

fn menu_walk() -> Outcome {
    let menu = Menu::from_json(&std::fs::read_to_string(fixtures().join("menu.json")).unwrap())
        .map_err(|e| e.to_string())?;
    ensure(menu.doc() == Menu::default_tree().doc(), || "shipped menu.json differs from the built-in tree".into())?;
    let mut service = walk_service();
    let root = MenuSession::new(&menu);
    let mut walk = Walk {
        menu: &menu,
        service: &mut service,
        identity: Identity::service("N-CHIKU", Role::Nurse),
        visited: HashSet::new(),
        nodes: BTreeSet::new(),
        deepest_page: 0,
        pick_lists: 0,
        screens: 0,
        over_budget: 0,
        errors: Vec::new(),
    };
    let first = root.render(&menu, None);
    walk.check(&first);
    walk.visited.insert(root.clone());
    walk.visit(&root, 0);
    let all: BTreeSet<String> = menu.nodes().iter().map(|n| n.id.clone()).collect();
    ensure(walk.errors.is_empty(), || walk.errors.join("; "))?;
    ensure(walk.over_budget == 0, || format!("{} over-budget screens", walk.over_budget))?;
    ensure(walk.nodes == all, || format!("visited nodes {:?} of {all:?}", walk.nodes))?;
    ensure(walk.deepest_page >= 2 && walk.pick_lists > 0, || {
        format!("listings reached page {}, {} pick lists", walk.deepest_page, walk.pick_lists)
    })?;
    Ok(format!(
        "{} states, {} screens, listings paged to page {}, 0 over budget, 0 internal errors",
        walk.visited.len(),
        walk.screens,
        walk.deepest_page + 1
    ))
}

// ---- security --------------------------------------------------------------------

fn security_suite() -> Outcome {
    let mut s = EhrService::in_memory(AuthPolicy::default(), 23);
    seed_data().apply(&mut s, T0).map_err(|e| e.to_string())?;
    let log_before = s.store().log().len();
    let audit_before = s.audit_log().len();
    let mut guarded = 0usize;

    // A token that has expired.
    let login = |s: &mut EhrService, user: &str, pw: &str, now| {
        handle_request(s, &ApiRequest::post("/api/login", &json!({"username": user, "password": pw})), now)
    };
    let r = login(&mut s, "D-ASHA", "asha-h1-demo", T0 - 9 * 3_600_000);
    guarded += 1;
    let expired = r.body["token"].as_str().ok_or("login failed")?.to_owned();
    let r = login(&mut s, "ADM-1", "records-admin-demo", T0);
    guarded += 1;
    let admin = r.body["token"].as_str().ok_or("admin login failed")?.to_owned();
    let r = login(&mut s, "PH-ELIA", "elia-h1-demo", T0);
    guarded += 1;
    let pharmacist = r.body["token"].as_str().ok_or("pharmacist login failed")?.to_owned();

    let patient = json!({"patient_id": "P-NEW", "name": "New", "birth_date": "2000-01-01", "sex": "F", "zone_id": "Z-NORTH"});
    let encounter = json!({"patient_id": "P-0001", "facility_id": "H1", "diagnosis_codes": ["MALARIA"]});
    let rx = json!({"patient_id": "P-0001", "drug_code": "X", "dose": "1", "refills": 1});
    let push = SyncDocument {
        replica_id: ReplicaId::new("rogue"),
        cursor: 0,
        events: Vec::new(),
    };
    let writes: Vec<ApiRequest> = vec![
        ApiRequest::post("/api/patients", &patient),
        ApiRequest::post("/api/encounters", &encounter),
        ApiRequest::post("/api/prescriptions", &rx),
        ApiRequest::post("/api/prescriptions/RX-0001/refill-request", &json!({})),
        ApiRequest::post("/api/prescriptions/RX-0001/refill-grant", &json!({})),
        ApiRequest::post("/api/sync/push", &push),
        {
            let mut r = ApiRequest::new("POST", "/api/patients");
            r.body = b"{broken".to_vec();
            r
        },
    ];
    let mut attempts = 0;
    let mut rejected = 0;
    for req in &writes {
        for token in [None, Some("not-a-token"), Some(expired.as_str())] {
            let mut req = req.clone();
            req.token = token.map(str::to_owned);
            let r = handle_request(&mut s, &req, T0);
            attempts += 1;
            guarded += 1;
            if r.status == 401 {
                rejected += 1;
            }
        }
    }
    // Authenticated but not permitted.
    for (req, token) in [
        (ApiRequest::post("/api/encounters", &encounter), &admin),
        (ApiRequest::post("/api/patients", &patient), &pharmacist),
        (ApiRequest::post("/api/prescriptions", &rx), &pharmacist),
        (ApiRequest::post("/api/sync/push", &push), &pharmacist),
    ] {
        let r = handle_request(&mut s, &req.with_token(token.clone()), T0);
        attempts += 1;
        guarded += 1;
        if r.status == 403 {
            rejected += 1;
        }
    }
    // USSD: an unregistered phone and a phone that never gets past the PIN.
    let shared = s.into_shared();
    let gw = Gateway::new(GatewayConfig::default(), Arc::new(Menu::default_tree()));
    let mut backend = ServiceBackend { service: shared.clone() };
    let r = gw.handle_pdu(&UssdPdu::begin("u1", "+10000000000", "*384#"), T0, &mut backend);
    attempts += 1;
    if r.kind == PduKind::End {
        rejected += 1;
    }
    gw.handle_pdu(&UssdPdu::begin("u2", "+255700000101", "*384#"), T0, &mut backend);
    for input in ["1", "1", "1"] {
        gw.handle_pdu(&UssdPdu::input("u2", "+255700000101", input), T0, &mut backend);
        guarded += 1;
    }
    let r = gw.handle_pdu(&UssdPdu::input("u2", "+255700000101", "3"), T0, &mut backend);
    guarded += 1;
    attempts += 1;
    if r.kind == PduKind::End && r.text.contains("locked") {
        rejected += 1;
    }
    drop(backend);
    let mut s = Arc::try_unwrap(shared).map_err(|_| "service still shared")?.into_inner();

    ensure(rejected == attempts, || format!("{rejected}/{attempts} unauthenticated writes rejected"))?;
    ensure(s.store().log().len() == log_before, || "store changed under unauthenticated writes".into())?;

    // Three strikes on the web.
    let mut codes = Vec::new();
    for pw in ["wrong", "wrong", "wrong", "baraka-h2-demo"] {
        let r = login(&mut s, "D-BARAKA", pw, T0 + 1_000);
        guarded += 1;
        codes.push(r.body["code"].as_str().unwrap_or("OK").to_owned());
    }
    let after = login(&mut s, "D-BARAKA", "baraka-h2-demo", T0 + 1_000 + 15 * 60_000 + 1);
    guarded += 1;
    ensure(
        codes == ["BAD_CREDENTIALS", "BAD_CREDENTIALS", "BAD_CREDENTIALS", "LOCKED"] && after.status == 200,
        || format!("lockout sequence {codes:?}, then {}", after.status),
    )?;

    let audited = s.audit_log().len() - audit_before;
    ensure(audited == guarded, || format!("{audited} audit entries for {guarded} guarded operations"))?;

    // Tamper detection on a persisted log.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    {
        let mut disk = EhrService::open(dir.path(), Arc::new(Plaintext), AuthPolicy::default())
            .map_err(|e| e.to_string())?;
        seed_data().apply(&mut disk, T0).map_err(|e| e.to_string())?;
    }
    let bytes = std::fs::read(dir.path().join(AUDIT_FILE)).map_err(|e| e.to_string())?;
    let entries = match verify_audit_chain(&bytes) {
        ChainStatus::Ok { entries } => entries,
        other => return Err(format!("clean log reported {other:?}")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let pos = rng.gen_range(0..bytes.len());
        let mut tampered = bytes.clone();
        tampered[pos] ^= rng.gen_range(1..=255u8);
        let line = bytes[..pos].iter().filter(|b| **b == b'\n').count() as u64;
        let got = verify_audit_chain(&tampered);
        ensure(got == ChainStatus::BrokenAt(line), || format!("byte {pos}: {got:?}, expected BROKEN_AT({line})"))?;
    }
    Ok(format!(
        "{rejected}/{attempts} unauthorized writes rejected; lockout enforced; 20/20 tampers located in a {entries}-entry log; {audited} audit entries = {guarded} guarded calls"
    ))
}

// ---- suppression -------------------------------------------------------------------

const MARCH: Millis = 1_709_251_200_000;
const APRIL: Millis = 1_711_929_600_000;
const CODES: [&[&str]; 6] = [&[], &["MALARIA"], &["TB"], &["MALARIA", "TB"], &["HIV", "MALARIA"], &["DIABETES"]];

struct RandomStore {
    store: CentralStore,
    identifiers: Vec<String>,
    oracle: Vec<(String, String, u64)>,
}

fn random_store(trial: u64, k: u32) -> RandomStore {
    let mut rng = ChaCha8Rng::seed_from_u64(trial);
    let mut store = CentralStore::in_memory(Entropy::seeded(trial));
    let now = APRIL + 20 * 86_400_000;
    let zones: Vec<String> = (0..rng.gen_range(1..=4)).map(|z| format!("ZONE-{z}")).collect();
    for z in &zones {
        store
            .commit(&Mutation::RegisterZone(Zone { zone_id: z.as_str().into(), name: format!("{z} name") }), now)
            .unwrap();
    }
    store
        .commit(
            &Mutation::RegisterFacility(Facility {
                facility_id: "FAC".into(),
                name: "Facility".into(),
                zone_id: zones[0].as_str().into(),
                modality: Modality::WES,
            }),
            now,
        )
        .unwrap();
    store
        .commit(
            &Mutation::RegisterClinician(Clinician {
                clinician_id: "CLIN".into(),
                name: "Clinician".into(),
                role: Role::Physician,
                facility_id: Some("FAC".into()),
            }),
            now,
        )
        .unwrap();

    let mut zone_of: BTreeMap<String, String> = BTreeMap::new();
    let mut identifiers = Vec::new();
    for i in 0..rng.gen_range(0..=30) {
        let id = format!("pt{trial}q{i}");
        let name = format!("Person{trial}n{i}");
        let zone = zones.choose(&mut rng).unwrap().clone();
        store
            .commit(
                &Mutation::RegisterPatient(NewPatient {
                    patient_id: Some(id.as_str().into()),
                    name: name.clone(),
                    birth_date: NaiveDate::from_ymd_opt(1970, 1, 1).unwrap(),
                    sex: Sex::X,
                    zone_id: zone.as_str().into(),
                    allergies: Default::default(),
                }),
                now,
            )
            .unwrap();
        zone_of.insert(id.clone(), zone);
        identifiers.push(id);
        identifiers.push(name);
    }
    let patients: Vec<String> = zone_of.keys().cloned().collect();
    let mut encounters: Vec<(String, Vec<&str>, Millis, bool)> = Vec::new();
    if !patients.is_empty() {
        for i in 0..rng.gen_range(0..=80) {
            let pid = patients.choose(&mut rng).unwrap().clone();
            let codes = CODES[rng.gen_range(0..CODES.len())].to_vec();
            let at = MARCH - 15 * 86_400_000 + rng.gen_range(0..60 * 86_400_000u64);
            let eid = format!("enc{trial}q{i}");
            store
                .commit(
                    &Mutation::RecordEncounter(NewEncounter {
                        encounter_id: Some(eid.as_str().into()),
                        patient_id: pid.as_str().into(),
                        facility_id: "FAC".into(),
                        clinician_id: Some("CLIN".into()),
                        occurred_at: Some(at),
                        diagnosis_codes: codes.iter().map(|c| c.to_string()).collect(),
                        note: "seen".into(),
                    }),
                    now,
                )
                .unwrap();
            let retracted = rng.gen_bool(0.1);
            if retracted {
                store
                    .commit(&Mutation::RetractEncounter { encounter_id: eid.as_str().into() }, now)
                    .unwrap();
            }
            identifiers.push(eid);
            encounters.push((pid, codes, at, retracted));
        }
        // Some patients move.
        for pid in &patients {
            if rng.gen_bool(0.2) {
                let zone = zones.choose(&mut rng).unwrap().clone();
                store
                    .commit(
                        &Mutation::UpdatePatient(PatientUpdate {
                            patient_id: pid.as_str().into(),
                            name: None,
                            zone_id: Some(zone.as_str().into()),
                            allergies: None,
                        }),
                        now,
                    )
                    .unwrap();
                zone_of.insert(pid.clone(), zone);
            }
        }
    }

    // Brute-force oracle straight from the generated records.
    let mut per_zone: BTreeMap<&str, u64> = BTreeMap::new();
    for z in zone_of.values() {
        *per_zone.entry(z).or_default() += 1;
    }
    let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
    for (pid, codes, at, retracted) in &encounters {
        if *retracted || codes.is_empty() || *at < MARCH || *at >= APRIL {
            continue;
        }
        *counts.entry((zone_of[pid].clone(), codes[0].to_string())).or_default() += 1;
    }
    let k = u64::from(k);
    let oracle = counts
        .into_iter()
        .filter(|((z, _), n)| *n >= k && per_zone.get(z.as_str()).copied().unwrap_or(0) >= k)
        .map(|((z, c), n)| (z, c, n))
        .collect();
    RandomStore { store, identifiers, oracle }
}

fn suppression_oracle() -> Outcome {
    let period = "2024-03".parse().unwrap();
    let mut rows_total = 0;
    for trial in 0..1000u64 {
        let k = [2, 5, 10][(trial % 3) as usize];
        let rs = random_store(trial, k);
        let view: &View = rs.store.view();
        let doc = aggregate_report(view, period, k).map_err(|e| format!("trial {trial}: {e}"))?;
        let got: Vec<(String, String, u64)> = doc
            .rows
            .iter()
            .map(|r| (r.zone_id.to_string(), r.condition_code.clone(), r.count))
            .collect();
        ensure(got == rs.oracle, || format!("trial {trial} k={k}: got {got:?}, oracle {:?}", rs.oracle))?;
        for r in &doc.rows {
            let zone_patients = view.patient_count_in_zone(&r.zone_id) as u64;
            ensure(r.count >= u64::from(k) && zone_patients >= u64::from(k), || {
                format!("trial {trial}: row {r:?} violates k={k}")
            })?;
        }
        let text = serde_json::to_string(&doc).unwrap();
        if let Some(leak) = rs.identifiers.iter().find(|id| text.contains(id.as_str())) {
            return Err(format!("trial {trial}: identifier {leak} in export"));
        }
        rows_total += doc.rows.len();
    }
    Ok(format!("1000/1000 stores match the oracle ({rows_total} rows), 0 threshold violations, 0 identifier leaks"))
}

// ---- idempotence / commutativity -----------------------------------------------------

fn event_pool(seed: u64) -> Vec<ChangeEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r1 = Replica::new(ReplicaId::new("R1"), Entropy::seeded(seed));
    let mut r2 = Replica::new(ReplicaId::new("R2"), Entropy::seeded(seed + 1));
    let mut r3 = Replica::new(ReplicaId::new("R3"), Entropy::seeded(seed + 2));
    let t = MARCH;
    let mut pool = Vec::new();
    let base = [
        Mutation::RegisterZone(Zone { zone_id: "Z1".into(), name: "Z1".into() }),
        Mutation::RegisterZone(Zone { zone_id: "Z2".into(), name: "Z2".into() }),
        Mutation::RegisterFacility(Facility {
            facility_id: "F".into(),
            name: "F".into(),
            zone_id: "Z1".into(),
            modality: Modality::MES,
        }),
        Mutation::RegisterPatient(NewPatient {
            patient_id: Some("P".into()),
            name: "Original".into(),
            birth_date: NaiveDate::from_ymd_opt(1980, 1, 1).unwrap(),
            sex: Sex::F,
            zone_id: "Z1".into(),
            allergies: Default::default(),
        }),
    ];
    for m in &base {
        let (e, _) = r1.local_apply(m, t).unwrap();
        pool.push(e);
    }
    let doc = SyncDocument { replica_id: ReplicaId::new("central"), cursor: pool.len() as u64, events: pool.clone() };
    r2.apply_pull(&doc, t).unwrap();
    r3.apply_pull(&doc, t).unwrap();
    let mut replicas = [r1, r2, r3];
    for i in 0..8 {
        let r = &mut replicas[rng.gen_range(0..3)];
        let now = t + rng.gen_range(0..3) * 1000;
        let m = match rng.gen_range(0..4) {
            0 => Mutation::UpdatePatient(PatientUpdate {
                patient_id: "P".into(),
                name: Some(format!("Name {i}")),
                zone_id: None,
                allergies: None,
            }),
            1 => Mutation::UpdatePatient(PatientUpdate {
                patient_id: "P".into(),
                name: None,
                zone_id: Some(if rng.gen_bool(0.5) { "Z1" } else { "Z2" }.into()),
                allergies: Some([format!("A{i}")].into()),
            }),
            2 => Mutation::RecordEncounter(NewEncounter {
                encounter_id: Some("E".into()),
                patient_id: "P".into(),
                facility_id: "F".into(),
                clinician_id: None,
                occurred_at: Some(t),
                diagnosis_codes: vec![format!("C{i}")],
                note: String::new(),
            }),
            _ => Mutation::RetractEncounter { encounter_id: "E".into() },
        };
        if let Ok((e, _)) = r.local_apply(&m, now) {
            pool.push(e);
        }
    }
    // A forged twin with an identical timestamp exercises the tie rule.
    if let Some(last) = pool.iter().rev().find(|e| matches!(e.new_value, FieldValue::Value(_)) && e.field_path.is_empty()).cloned() {
        let mut twin = last;
        twin.event_id = format!("{}-twin", twin.event_id);
        if let FieldValue::Value(serde_json::Value::Object(ref mut patch)) = twin.new_value {
            if let Some(v) = patch.get_mut("name") {
                *v = json!("Tie breaker");
            }
        }
        if twin.check_well_formed().is_ok() {
            pool.push(twin);
        }
    }
    pool
}

fn idempotence_commutativity() -> Outcome {
    let mut sets = 0;
    let mut orders = 0u64;
    for trial in 0..36u64 {
        let n = (trial % 6 + 1) as usize;
        let pool = event_pool(trial);
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + trial);
        let set: Vec<ChangeEvent> = pool.choose_multiple(&mut rng, n.min(pool.len())).cloned().collect();
        let mut reference = View::new();
        for e in &set {
            reference.apply(e);
        }
        for perm in set.iter().permutations(set.len()) {
            for mask in 0u32..(1 << set.len()) {
                let mut v = View::new();
                for e in &perm {
                    v.apply(e);
                }
                for (i, e) in perm.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        v.apply(e);
                    }
                }
                orders += 1;
                if v != reference {
                    return Err(format!("trial {trial}: order/replay pattern diverged"));
                }
            }
        }
        sets += 1;
    }
    Ok(format!("{sets} event sets, {orders} orderings and replay patterns, one final state each"))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 7] = [
        ("convergence suite", convergence_suite),
        ("h1-h2-transfer fixture", h1_h2_transfer),
        ("ussd-during-outage fixture", ussd_during_outage),
        ("exhaustive menu walk", menu_walk),
        ("security suite", security_suite),
        ("suppression oracle", suppression_oracle),
        ("idempotence and commutativity", idempotence_commutativity),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
