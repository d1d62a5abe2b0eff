//! On-disk layout of the central store.
//!
//! * `events.log` holds one sealed line per [`ChangeEvent`], in commit order.
//! * `snapshot.json` holds one sealed line: the materialized view after the
//!   first `log_len` events, rewritten every `snapshot_every` commits.
//!
//! Lines pass through a [`LineCipher`]. With [`Plaintext`] a line is the
//! compact JSON document itself; with [`ChaChaCipher`] it is
//! `enc1:` followed by base64 of `nonce || ciphertext`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chacha20poly1305::aead::{Aead, AeadCore, KeyInit, OsRng};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::ChangeEvent;
use crate::hlc::HlcTimestamp;
use crate::view::{View, ViewSnapshot};

/// Environment variable carrying the 32-byte at-rest key as 64 hex digits.
pub const KEY_ENV: &str = "OFFGRID_EHR_KEY";

pub const EVENTS_FILE: &str = "events.log";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const DEFAULT_SNAPSHOT_EVERY: usize = 500;

const SEALED_PREFIX: &str = "enc1:";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt record in {path} line {line}: {detail}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("cipher: {0}")]
    Cipher(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Seam through which every persisted line passes.
pub trait LineCipher: Send + Sync + std::fmt::Debug {
    fn seal(&self, plaintext: &[u8]) -> String;
    fn open(&self, line: &str) -> Result<Vec<u8>, PersistError>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Plaintext;

impl LineCipher for Plaintext {
    fn seal(&self, plaintext: &[u8]) -> String {
        String::from_utf8_lossy(plaintext).into_owned()
    }

    fn open(&self, line: &str) -> Result<Vec<u8>, PersistError> {
        if line.starts_with(SEALED_PREFIX) {
            return Err(PersistError::Cipher(format!(
                "store is encrypted; set {KEY_ENV}"
            )));
        }
        Ok(line.as_bytes().to_vec())
    }
}

/// ChaCha20-Poly1305 with a random 96-bit nonce per line.
pub struct ChaChaCipher {
    aead: ChaCha20Poly1305,
}

impl std::fmt::Debug for ChaChaCipher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ChaChaCipher(..)")
    }
}

impl ChaChaCipher {
    pub fn new(key: [u8; 32]) -> Self {
        Self {
            aead: ChaCha20Poly1305::new(Key::from_slice(&key)),
        }
    }

    pub fn from_hex(hex_key: &str) -> Result<Self, PersistError> {
        let bytes = hex::decode(hex_key.trim())
            .map_err(|e| PersistError::Cipher(format!("key is not hex: {e}")))?;
        let key: [u8; 32] = bytes
            .try_into()
            .map_err(|_| PersistError::Cipher("key must be 32 bytes (64 hex digits)".into()))?;
        Ok(Self::new(key))
    }
}

impl LineCipher for ChaChaCipher {
    fn seal(&self, plaintext: &[u8]) -> String {
        let nonce = ChaCha20Poly1305::generate_nonce(&mut OsRng);
        let ct = self
            .aead
            .encrypt(&nonce, plaintext)
            .expect("in-memory encryption does not fail");
        let mut buf = nonce.to_vec();
        buf.extend_from_slice(&ct);
        format!("{SEALED_PREFIX}{}", STANDARD.encode(buf))
    }

    fn open(&self, line: &str) -> Result<Vec<u8>, PersistError> {
        let body = line
            .strip_prefix(SEALED_PREFIX)
            .ok_or_else(|| PersistError::Cipher("line is not sealed".into()))?;
        let raw = STANDARD
            .decode(body)
            .map_err(|e| PersistError::Cipher(format!("bad base64: {e}")))?;
        if raw.len() < 12 {
            return Err(PersistError::Cipher("sealed line too short".into()));
        }
        let (nonce, ct) = raw.split_at(12);
        self.aead
            .decrypt(Nonce::from_slice(nonce), ct)
            .map_err(|_| PersistError::Cipher("authentication failed (wrong key?)".into()))
    }
}

/// Cipher selected by the environment: sealed when [`KEY_ENV`] is set.
pub fn cipher_from_env() -> Result<Arc<dyn LineCipher>, PersistError> {
    match std::env::var(KEY_ENV) {
        Ok(k) if !k.trim().is_empty() => Ok(Arc::new(ChaChaCipher::from_hex(&k)?)),
        _ => Ok(Arc::new(Plaintext)),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotDoc {
    pub format: u32,
    pub log_len: usize,
    pub clock: HlcTimestamp,
    pub view: ViewSnapshot,
}

#[derive(Debug, Default)]
pub struct Loaded {
    pub events: Vec<ChangeEvent>,
    pub snapshot: Option<SnapshotDoc>,
}

#[derive(Debug)]
pub struct EventLogFile {
    events_path: PathBuf,
    snapshot_path: PathBuf,
    file: File,
    cipher: Arc<dyn LineCipher>,
    since_snapshot: usize,
    snapshot_every: usize,
}

impl EventLogFile {
    pub fn open(dir: &Path, cipher: Arc<dyn LineCipher>) -> Result<(Self, Loaded), PersistError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let events_path = dir.join(EVENTS_FILE);
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let mut loaded = Loaded::default();
        if events_path.exists() {
            loaded.events = read_lines(&events_path, cipher.as_ref())?;
        }
        if snapshot_path.exists() {
            let mut docs: Vec<SnapshotDoc> = read_lines(&snapshot_path, cipher.as_ref())?;
            loaded.snapshot = docs.pop();
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&events_path)
            .map_err(io_err(&events_path))?;
        Ok((
            Self {
                events_path,
                snapshot_path,
                file,
                cipher,
                since_snapshot: 0,
                snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            },
            loaded,
        ))
    }

    pub fn set_snapshot_every(&mut self, n: usize) {
        self.snapshot_every = n.max(1);
    }

    pub fn append(&mut self, event: &ChangeEvent) -> Result<(), PersistError> {
        let json = serde_json::to_vec(event).expect("events serialize");
        let mut line = self.cipher.seal(&json);
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(io_err(&self.events_path))?;
        self.since_snapshot += 1;
        Ok(())
    }

    pub fn snapshot_due(&self) -> bool {
        self.since_snapshot >= self.snapshot_every
    }

    /// Atomically replace the snapshot file.
    pub fn write_snapshot(
        &mut self,
        log_len: usize,
        view: &View,
        clock: &HlcTimestamp,
    ) -> Result<(), PersistError> {
        let doc = SnapshotDoc {
            format: 1,
            log_len,
            clock: clock.clone(),
            view: view.snapshot(),
        };
        let json = serde_json::to_vec(&doc).expect("snapshot serializes");
        let mut line = self.cipher.seal(&json);
        line.push('\n');
        let tmp = self.snapshot_path.with_extension("json.tmp");
        fs::write(&tmp, line).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &self.snapshot_path).map_err(io_err(&self.snapshot_path))?;
        self.since_snapshot = 0;
        Ok(())
    }
}

/// Read every sealed JSON line of `path`.
pub fn read_lines<T: serde::de::DeserializeOwned>(
    path: &Path,
    cipher: &dyn LineCipher,
) -> Result<Vec<T>, PersistError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |detail: String| PersistError::Corrupt {
            path: path.to_owned(),
            line: i + 1,
            detail,
        };
        let plain = cipher.open(&line).map_err(|e| corrupt(e.to_string()))?;
        out.push(serde_json::from_slice(&plain).map_err(|e| corrupt(e.to_string()))?);
    }
    Ok(out)
}

/// Atomically replace `path` with one sealed JSON line per item.
pub fn write_lines<T: Serialize>(
    path: &Path,
    cipher: &dyn LineCipher,
    items: &[T],
) -> Result<(), PersistError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&cipher.seal(&serde_json::to_vec(item).expect("item serializes")));
        out.push('\n');
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
