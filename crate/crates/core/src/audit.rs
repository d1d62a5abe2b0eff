//! Tamper-evident audit log.
//!
//! One compact JSON line per entry with members, in order,
//! `seq, actor, action, entity, ts, outcome, chain`. `chain` is the
//! lowercase hex SHA-256 of the previous entry's chain bytes (or of the
//! seed for entry 0) followed by the entry's JSON without `chain`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::Millis;

pub const AUDIT_FILE: &str = "audit.log";

const CHAIN_SEED: &[u8] = b"offgrid-ehr audit chain v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub actor: String,
    pub action: String,
    pub entity: String,
    pub ts: Millis,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub seq: u64,
    pub actor: String,
    pub action: String,
    pub entity: String,
    pub ts: Millis,
    pub outcome: String,
    pub chain: String,
}

#[derive(Serialize)]
struct ChainBody<'a> {
    seq: u64,
    actor: &'a str,
    action: &'a str,
    entity: &'a str,
    ts: Millis,
    outcome: &'a str,
}

pub fn seed_hash() -> [u8; 32] {
    Sha256::digest(CHAIN_SEED).into()
}

fn link(prev: &[u8; 32], seq: u64, entry: &AuditEntry) -> [u8; 32] {
    let body = ChainBody {
        seq,
        actor: &entry.actor,
        action: &entry.action,
        entity: &entry.entity,
        ts: entry.ts,
        outcome: &entry.outcome,
    };
    let mut h = Sha256::new();
    h.update(prev);
    h.update(serde_json::to_vec(&body).expect("audit body serializes"));
    h.finalize().into()
}

impl AuditRecord {
    pub fn entry(&self) -> AuditEntry {
        AuditEntry {
            actor: self.actor.clone(),
            action: self.action.clone(),
            entity: self.entity.clone(),
            ts: self.ts,
            outcome: self.outcome.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("audit record serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChainStatus {
    Ok { entries: u64 },
    BrokenAt(u64),
}

/// Recompute the chain over raw log bytes. Each line must parse, carry the
/// expected sequence number and chain value, and be byte-identical to its
/// canonical serialization; the first line failing any check is reported.
pub fn verify_audit_chain(bytes: &[u8]) -> ChainStatus {
    let mut lines: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    let mut prev = seed_hash();
    for (i, line) in lines.iter().enumerate() {
        let expected_seq = i as u64;
        let Ok(record) = serde_json::from_slice::<AuditRecord>(line) else {
            return ChainStatus::BrokenAt(expected_seq);
        };
        if record.seq != expected_seq || record.to_line().as_bytes() != *line {
            return ChainStatus::BrokenAt(expected_seq);
        }
        let chain = link(&prev, expected_seq, &record.entry());
        if hex::encode(chain) != record.chain {
            return ChainStatus::BrokenAt(expected_seq);
        }
        prev = chain;
    }
    ChainStatus::Ok {
        entries: lines.len() as u64,
    }
}

/// Append-only audit log, optionally mirrored to a file.
#[derive(Debug)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
    head: [u8; 32],
    file: Option<(PathBuf, File)>,
}

impl Default for AuditLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            head: seed_hash(),
            file: None,
        }
    }

    /// Open `dir/audit.log`, verifying the existing chain first.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(AUDIT_FILE);
        let mut log = Self::in_memory();
        if path.exists() {
            let bytes = std::fs::read(&path)?;
            if let ChainStatus::BrokenAt(seq) = verify_audit_chain(&bytes) {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("audit chain broken at seq {seq}"),
                ));
            }
            for line in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
                let record: AuditRecord = serde_json::from_slice(line)?;
                log.head = hex::decode(&record.chain)
                    .ok()
                    .and_then(|b| b.try_into().ok())
                    .expect("verified chain is 32-byte hex");
                log.records.push(record);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        log.file = Some((path, file));
        Ok(log)
    }

    /// Append an entry; on I/O failure nothing is recorded in memory either.
    pub fn append(&mut self, entry: AuditEntry) -> std::io::Result<u64> {
        let seq = self.records.len() as u64;
        let chain = link(&self.head, seq, &entry);
        let record = AuditRecord {
            seq,
            actor: entry.actor,
            action: entry.action,
            entity: entry.entity,
            ts: entry.ts,
            outcome: entry.outcome,
            chain: hex::encode(chain),
        };
        if let Some((_, file)) = &mut self.file {
            let mut line = record.to_line();
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.head = chain;
        self.records.push(record);
        Ok(seq)
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    /// Serialized log exactly as it appears on disk.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.records {
            out.extend_from_slice(r.to_line().as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn entries_for(&self, entity: &str) -> Vec<AuditRecord> {
        self.records
            .iter()
            .filter(|r| r.entity == entity)
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: u64) -> AuditEntry {
        AuditEntry {
            actor: format!("C{}", i % 3),
            action: "read_patient".into(),
            entity: format!("patient:P-{i}"),
            ts: 1_000 + i,
            outcome: "OK".into(),
        }
    }

    fn log_of(n: u64) -> AuditLog {
        let mut log = AuditLog::in_memory();
        for i in 0..n {
            log.append(entry(i)).unwrap();
        }
        log
    }

    /// Independent recomputation straight from the definition.
    fn oracle_chain(entries: &[AuditEntry]) -> Vec<String> {
        let mut prev: Vec<u8> = Sha256::digest(b"offgrid-ehr audit chain v1").to_vec();
        let mut out = Vec::new();
        for (seq, e) in entries.iter().enumerate() {
            let body = format!(
                r#"{{"seq":{},"actor":{},"action":{},"entity":{},"ts":{},"outcome":{}}}"#,
                seq,
                serde_json::to_string(&e.actor).unwrap(),
                serde_json::to_string(&e.action).unwrap(),
                serde_json::to_string(&e.entity).unwrap(),
                e.ts,
                serde_json::to_string(&e.outcome).unwrap(),
            );
            let mut h = Sha256::new();
            h.update(&prev);
            h.update(body.as_bytes());
            prev = h.finalize().to_vec();
            out.push(hex::encode(&prev));
        }
        out
    }

    #[test]
    fn first_entry_hashes_seed() {
        let log = log_of(1);
        let r = &log.records()[0];
        assert_eq!(r.seq, 0);
        assert_eq!(r.chain, oracle_chain(&[entry(0)])[0]);
    }

    #[test]
    fn second_entry_depends_on_first() {
        let a = log_of(2);
        let mut b = AuditLog::in_memory();
        let mut e0 = entry(0);
        e0.outcome = "DENIED".into();
        b.append(e0).unwrap();
        b.append(entry(1)).unwrap();
        assert_ne!(a.records()[1].chain, b.records()[1].chain);
    }

    #[test]
    fn hundred_entries_match_oracle_and_verify() {
        let log = log_of(100);
        let entries: Vec<_> = (0..100).map(entry).collect();
        let oracle = oracle_chain(&entries);
        let chains: Vec<_> = log.records().iter().map(|r| r.chain.clone()).collect();
        assert_eq!(chains, oracle);
        assert_eq!(verify_audit_chain(&log.to_bytes()), ChainStatus::Ok { entries: 100 });
    }

    #[test]
    fn line_format_is_exact() {
        let log = log_of(1);
        let line = log.records()[0].to_line();
        assert!(line.starts_with(r#"{"seq":0,"actor":"C0","action":"read_patient","entity":"patient:P-0","ts":1000,"outcome":"OK","chain":""#));
    }

    fn line_span(bytes: &[u8], seq: usize) -> std::ops::Range<usize> {
        let mut start = 0;
        for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
            if i == seq {
                return start..start + line.len() + 1;
            }
            start += line.len() + 1;
        }
        unreachable!()
    }

    #[test]
    fn byte_flip_in_entry_seven_detected() {
        let log = log_of(20);
        let bytes = log.to_bytes();
        let span = line_span(&bytes, 7);
        for pos in span {
            let mut tampered = bytes.clone();
            tampered[pos] ^= 0x01;
            assert_eq!(verify_audit_chain(&tampered), ChainStatus::BrokenAt(7), "pos {pos}");
        }
    }

    #[test]
    fn deleted_entry_detected_at_gap() {
        let log = log_of(20);
        let bytes = log.to_bytes();
        let span = line_span(&bytes, 7);
        let mut cut = bytes[..span.start].to_vec();
        cut.extend_from_slice(&bytes[span.end..]);
        assert_eq!(verify_audit_chain(&cut), ChainStatus::BrokenAt(7));
    }

    #[test]
    fn persisted_log_reopens_and_continues_chain() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = AuditLog::open(dir.path()).unwrap();
            log.append(entry(0)).unwrap();
            log.append(entry(1)).unwrap();
        }
        let mut log = AuditLog::open(dir.path()).unwrap();
        assert_eq!(log.append(entry(2)).unwrap(), 2);
        let bytes = std::fs::read(dir.path().join(AUDIT_FILE)).unwrap();
        assert_eq!(verify_audit_chain(&bytes), ChainStatus::Ok { entries: 3 });
    }
}
