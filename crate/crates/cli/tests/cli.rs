use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

use offgrid_ehr::config::KEY_ENV;
use offgrid_ehr::entropy::Entropy;
use offgrid_ehr::hlc::ReplicaId;
use offgrid_ehr::store::{CentralStore, Mutation, NewEncounter, PatientUpdate, RecordReader};
use offgrid_ehr::sync::{DirectTransport, Replica, SyncDocument, SyncTransport, TransportError};
use offgrid_ehr::ussd::pdu::{BridgeMessage, Direction, PduKind, UssdPdu};

const KEY: &str = "5f0c4a8e9b1d2c3e4f5061728394a5b6c7d8e9f0112233445566778899aabbcc";
const NURSE: &str = "+255700000101";

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_offgrid-ehr"));
    c.env(KEY_ENV, KEY).env("RUST_LOG", "error");
    c
}

fn run(args: &[&str], stdin: &str) -> Output {
    let mut child = bin()
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn seeded_store() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().to_str().unwrap();
    let out = run(&["--store", store, "seed", "--fixture", fixture("seed.json").to_str().unwrap()], "");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn usage_errors_exit_2_with_synopsis() {
    for args in [&["frobnicate"][..], &[], &["simulate"], &["export-aggregates", "--k", "x"]] {
        let out = run(args, "");
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"), "{args:?}");
    }
}

#[test]
fn simulate_writes_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = fixture("h1-h2-transfer.json");
    let mut traces = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let out_path = dir.path().join(name);
        let out = run(
            &["simulate", "--scenario", scenario.to_str().unwrap(), "--seed", "7", "--out", out_path.to_str().unwrap()],
            "",
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        traces.push(std::fs::read(out_path).unwrap());
    }
    assert!(!traces[0].is_empty());
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn simulate_reports_failed_assertions() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("h1-h2-transfer.json")).unwrap();
    // Expect the opposite of what happens.
    let flipped = text.replacen("\"expect\":\"MISSING\"", "\"expect\":\"PRESENT\"", 1);
    assert_ne!(flipped, text);
    let path = dir.path().join("flipped.json");
    std::fs::write(&path, flipped).unwrap();
    let out = run(&["simulate", "--scenario", path.to_str().unwrap()], "");
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).lines().count() > 10);
}

#[test]
fn seed_refuses_a_populated_store() {
    let dir = seeded_store();
    let out = run(
        &["--store", dir.path().to_str().unwrap(), "seed", "--fixture", fixture("seed.json").to_str().unwrap()],
        "",
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_audit_detects_tampering() {
    let dir = seeded_store();
    let store = dir.path().to_str().unwrap();
    let out = run(&["--store", store, "verify-audit"], "");
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("OK "));

    let path = dir.path().join("audit.log");
    let mut bytes = std::fs::read(&path).unwrap();
    let third_line = bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').nth(1).unwrap().0 + 5;
    bytes[third_line] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    let out = run(&["--store", store, "verify-audit"], "");
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout(&out).trim(), "BROKEN_AT 2");
}

#[test]
fn flags_override_the_config_file() {
    let dir = seeded_store();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        json!({"store_dir": dir.path(), "suppression_k": 50}).to_string(),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();

    let from_file: Value =
        serde_json::from_slice(&run(&["--config", cfg, "export-aggregates", "--period", "2024-03"], "").stdout).unwrap();
    assert_eq!(from_file["k"], 50);
    assert_eq!(from_file["rows"], json!([]));

    let out = run(&["--config", cfg, "--suppression-k", "2", "export-aggregates", "--period", "2024-03"], "");
    let from_flag: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(from_flag["k"], 2);
    let rows = from_flag["rows"].as_array().unwrap();
    assert!(rows.contains(&json!({"zone_id": "Z-NORTH", "period": "2024-03", "condition_code": "MALARIA", "count": 6})));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("P-00"));

    let bad = run(&["--config", cfg, "--suppression-k", "0", "verify-audit"], "");
    assert_eq!(bad.status.code(), Some(1));
}

const REFILL_INPUT: &str = "2468\n1\nP-0001\n1\n0\n3\n";

#[test]
fn terminal_refill_flow() {
    let dir = seeded_store();
    let out = run(&["--store", dir.path().to_str().unwrap(), "ussd", "--msisdn", NURSE], REFILL_INPUT);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let screens: Vec<String> = stdout(&out).split("\n\n").filter(|s| !s.is_empty()).map(str::to_owned).collect();
    assert_eq!(screens.len(), 7, "{screens:#?}");
    assert_eq!(screens[0], "Enter PIN:");
    assert_eq!(screens.last().unwrap(), "Refill requested.");
    assert!(screens.iter().all(|s| s.chars().count() <= 182));
}

#[test]
fn unregistered_phone_is_refused() {
    let dir = seeded_store();
    let out = run(&["--store", dir.path().to_str().unwrap(), "ussd", "--msisdn", "+19999999999"], "1234\n");
    assert!(out.status.success());
    assert_eq!(stdout(&out), "This number is not registered.\n\n");
}

// ---- serve ------------------------------------------------------------------------

struct Server {
    child: Child,
    http: String,
    gateway: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(store: &Path) -> Server {
    let mut child = bin()
        .args(["--store", store.to_str().unwrap(), "--http-port", "0", "--gateway-port", "0", "serve"])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let mut http = None;
    let mut gateway = None;
    for part in line.split_whitespace() {
        if let Some(a) = part.strip_prefix("http=") {
            http = Some(a.replace("0.0.0.0", "127.0.0.1"));
        }
        if let Some(a) = part.strip_prefix("gateway=") {
            gateway = Some(a.replace("0.0.0.0", "127.0.0.1"));
        }
    }
    Server {
        child,
        http: http.unwrap_or_else(|| panic!("no ports in {line:?}")),
        gateway: gateway.unwrap(),
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn login(agent: &ureq::Agent, server: &Server, user: &str, password: &str) -> String {
    let mut r = agent
        .post(format!("http://{}/api/login", server.http))
        .send_json(json!({"username": user, "password": password}))
        .unwrap();
    assert_eq!(r.status(), 200);
    let body: Value = r.body_mut().read_json().unwrap();
    body["token"].as_str().unwrap().to_owned()
}

#[test]
fn http_api_carries_tokens_and_correlation_ids() {
    let dir = seeded_store();
    let server = serve(dir.path());
    let agent = agent();
    let token = login(&agent, &server, "D-ASHA", "asha-h1-demo");

    let mut r = agent
        .get(format!("http://{}/api/patients/P-0001", server.http))
        .header("Authorization", format!("Bearer {token}"))
        .header("x-correlation-id", "req-42")
        .call()
        .unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(r.headers().get("x-correlation-id").unwrap(), "req-42");
    let body: Value = r.body_mut().read_json().unwrap();
    assert_eq!(body["name"], "Amina Juma");

    let mut r = agent
        .post(format!("http://{}/api/encounters", server.http))
        .send_json(json!({"patient_id": "P-0001", "facility_id": "H1", "diagnosis_codes": ["MALARIA"]}))
        .unwrap();
    assert_eq!(r.status(), 401);
    assert!(r.headers().get("x-correlation-id").is_some());
    let body: Value = r.body_mut().read_json().unwrap();
    assert_eq!(body["code"], "UNAUTHENTICATED");
    assert_eq!(body.as_object().unwrap().len(), 3);
}

/// Sync over the running HTTP server.
struct HttpTransport<'a> {
    agent: &'a ureq::Agent,
    base: String,
    token: String,
}

impl SyncTransport for HttpTransport<'_> {
    fn push(&mut self, doc: SyncDocument) -> Result<SyncDocument, TransportError> {
        let mut r = self
            .agent
            .post(format!("{}/api/sync/push", self.base))
            .header("Authorization", format!("Bearer {}", self.token))
            .send_json(&doc)
            .map_err(|_| TransportError::LinkDown)?;
        match r.status().as_u16() {
            200 => Ok(r.body_mut().read_json().unwrap()),
            s => Err(TransportError::Rejected(format!("status {s}"))),
        }
    }

    fn pull(&mut self, _replica: &ReplicaId, cursor: u64) -> Result<SyncDocument, TransportError> {
        let mut r = self
            .agent
            .get(format!("{}/api/sync/pull?cursor={cursor}", self.base))
            .header("Authorization", format!("Bearer {}", self.token))
            .call()
            .map_err(|_| TransportError::LinkDown)?;
        match r.status().as_u16() {
            200 => Ok(r.body_mut().read_json().unwrap()),
            s => Err(TransportError::Rejected(format!("status {s}"))),
        }
    }
}

#[test]
fn sync_over_http_matches_in_process_sync() {
    let dir = seeded_store();
    let server = serve(dir.path());
    let agent = agent();
    let mut http = HttpTransport {
        agent: &agent,
        base: format!("http://{}", server.http),
        token: login(&agent, &server, "D-ASHA", "asha-h1-demo"),
    };

    // An in-process central starting from the same log.
    let initial = http.pull(&ReplicaId::new("probe"), 0).unwrap();
    let mut central = CentralStore::in_memory(Entropy::seeded(1));
    central.accept_push(&initial, 0).unwrap();
    assert!(central.view().patient(&"P-0001".into()).is_some());

    let now = 1_790_000_000_000;
    let mut over_http = Replica::new(ReplicaId::new("H1"), Entropy::seeded(9));
    let mut in_process = Replica::new(ReplicaId::new("H1"), Entropy::seeded(9));
    let a = over_http.sync_round(&mut http, now).unwrap();
    let b = in_process.sync_round(&mut DirectTransport { central: &mut central, now }, now).unwrap();
    assert_eq!(a, b);
    let batches = [
        vec![
            Mutation::RecordEncounter(NewEncounter {
                encounter_id: Some("E-HTTP-1".into()),
                patient_id: "P-0003".into(),
                facility_id: "H1".into(),
                clinician_id: Some("D-ASHA".into()),
                occurred_at: None,
                diagnosis_codes: vec!["TB".into()],
                note: "via http".into(),
            }),
            Mutation::UpdatePatient(PatientUpdate {
                patient_id: "P-0004".into(),
                name: Some("Juma H. Hassan".into()),
                zone_id: None,
                allergies: None,
            }),
        ],
        vec![Mutation::RequestRefill {
            rx_id: "RX-0003".into(),
            requested_by: "D-ASHA".into(),
        }],
    ];
    for (i, batch) in batches.iter().enumerate() {
        let t = now + (i as u64 + 1) * 1_000;
        for m in batch {
            over_http.local_apply(m, t).unwrap();
            in_process.local_apply(m, t).unwrap();
        }
        let a = over_http.sync_round(&mut http, t).unwrap();
        let b = in_process.sync_round(&mut DirectTransport { central: &mut central, now: t }, t).unwrap();
        assert_eq!(a, b);
    }
    assert!(over_http.view() == in_process.view());

    let mut fresh = Replica::new(ReplicaId::new("H2"), Entropy::seeded(10));
    fresh.apply_pull(&http.pull(&ReplicaId::new("H2"), 0).unwrap(), now).unwrap();
    assert!(fresh.view() == central.view());
    assert!(fresh.view().encounter(&"E-HTTP-1".into()).is_some());
}

#[test]
fn framed_gateway_matches_terminal_transcript() {
    // Identical stores, one driven in-process and one through the gateway port.
    let local_dir = seeded_store();
    let served_dir = seeded_store();
    let local = run(&["--store", local_dir.path().to_str().unwrap(), "ussd", "--msisdn", NURSE], REFILL_INPUT);
    let server = serve(served_dir.path());
    let remote = run(&["ussd", "--msisdn", NURSE, "--connect", &server.gateway], REFILL_INPUT);
    assert!(remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    assert_eq!(stdout(&remote), stdout(&local));
    assert!(stdout(&remote).ends_with("Refill requested.\n\n"));
}

#[test]
fn bridge_relays_pdus_over_websocket() {
    let dir = seeded_store();
    let server = serve(dir.path());
    let (mut ws, _) = tungstenite::connect(format!("ws://{}/bridge", server.gateway)).unwrap();
    let mut exchange = |pdu: UssdPdu| -> UssdPdu {
        let msg = BridgeMessage {
            direction: Direction::ToGateway,
            pdu,
        };
        ws.send(tungstenite::Message::text(serde_json::to_string(&msg).unwrap())).unwrap();
        loop {
            if let tungstenite::Message::Text(t) = ws.read().unwrap() {
                let reply: BridgeMessage = serde_json::from_str(t.as_str()).unwrap();
                assert_eq!(reply.direction, Direction::ToPhone);
                return reply.pdu;
            }
        }
    };
    let first = exchange(UssdPdu::begin("tab-1", NURSE, "*384#"));
    assert_eq!((first.kind, first.text.as_str()), (PduKind::Continue, "Enter PIN:"));
    let menu = exchange(UssdPdu::input("tab-1", NURSE, "2468"));
    assert_eq!(menu.kind, PduKind::Continue);
    assert!(menu.text.contains("\n1 Patient lookup\n"), "{}", menu.text);

    assert!(tungstenite::connect(format!("ws://{}/elsewhere", server.gateway)).is_err());
}
