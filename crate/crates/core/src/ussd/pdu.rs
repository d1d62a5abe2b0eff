//! USSD wire unit and its framing.
//!
//! A frame is a 4-byte big-endian payload length followed by the compact
//! UTF-8 JSON of one document. Gateway clients send [`UssdPdu`] documents;
//! the `/bridge` socket carries [`BridgeMessage`] documents, one per
//! WebSocket text message, with the same PDU schema inside.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// GSM USSD payload limit, in characters.
pub const MAX_PAYLOAD_CHARS: usize = 182;

/// Upper bound on a frame payload; a 182-character payload of 4-byte
/// characters plus the envelope fits comfortably.
pub const MAX_FRAME_BYTES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PduKind {
    Begin,
    Continue,
    End,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UssdPdu {
    pub session_id: String,
    pub msisdn: String,
    pub kind: PduKind,
    pub text: String,
}

impl UssdPdu {
    pub fn new(
        session_id: impl Into<String>,
        msisdn: impl Into<String>,
        kind: PduKind,
        text: impl Into<String>,
    ) -> Self {
        Self {
            session_id: session_id.into(),
            msisdn: msisdn.into(),
            kind,
            text: text.into(),
        }
    }

    pub fn begin(session_id: &str, msisdn: &str, shortcode: &str) -> Self {
        Self::new(session_id, msisdn, PduKind::Begin, shortcode)
    }

    pub fn input(session_id: &str, msisdn: &str, text: &str) -> Self {
        Self::new(session_id, msisdn, PduKind::Continue, text)
    }

    /// Reply on the same session.
    pub fn reply(&self, kind: PduKind, text: impl Into<String>) -> Self {
        Self::new(self.session_id.clone(), self.msisdn.clone(), kind, text)
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn within_budget(&self) -> bool {
        self.char_len() <= MAX_PAYLOAD_CHARS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    ToGateway,
    ToPhone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeMessage {
    pub direction: Direction,
    pub pdu: UssdPdu,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    TooLarge(usize),
    #[error("malformed PDU: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("truncated frame")]
    Truncated,
}

pub fn encode_json<T: Serialize>(doc: &T) -> Result<Vec<u8>, FrameError> {
    let body = serde_json::to_vec(doc)?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(FrameError::TooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn encode_frame(pdu: &UssdPdu) -> Result<Vec<u8>, FrameError> {
    encode_json(pdu)
}

/// Split one frame off the front of `buf`. `Ok(None)` means more bytes are
/// needed; on success returns the document and the bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(UssdPdu, usize)>, FrameError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::TooLarge(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let pdu = serde_json::from_slice(&buf[4..4 + len])?;
    Ok(Some((pdu, 4 + len)))
}

/// Decode a buffer holding exactly one frame.
pub fn decode_exact(buf: &[u8]) -> Result<UssdPdu, FrameError> {
    match decode_frame(buf)? {
        Some((pdu, used)) if used == buf.len() => Ok(pdu),
        _ => Err(FrameError::Truncated),
    }
}
