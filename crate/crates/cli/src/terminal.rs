//! Terminal USSD session. Each screen is written verbatim followed by an
//! empty line; each input line is one submission.

use std::io::{BufRead, Read, Write};
use std::net::TcpStream;

use anyhow::{bail, Context, Result};

use offgrid_ehr::service::SharedService;
use offgrid_ehr::ussd::gateway::{Gateway, ServiceBackend};
use offgrid_ehr::ussd::pdu::{encode_frame, PduKind, UssdPdu, MAX_FRAME_BYTES};

use crate::now_ms;

fn show(out: &mut impl Write, reply: &UssdPdu) -> Result<bool> {
    write!(out, "{}\n\n", reply.text)?;
    out.flush()?;
    Ok(matches!(reply.kind, PduKind::End | PduKind::Abort))
}

/// Drive a dialogue through `exchange` until the gateway ends it or input
/// runs out. On end of input a live session is aborted.
fn dialogue(
    shortcode: &str,
    msisdn: &str,
    mut input: impl BufRead,
    mut out: impl Write,
    mut exchange: impl FnMut(&UssdPdu) -> Result<UssdPdu>,
) -> Result<()> {
    let session_id = format!("term-{msisdn}-{}", now_ms());
    if show(&mut out, &exchange(&UssdPdu::begin(&session_id, msisdn, shortcode))?)? {
        return Ok(());
    }
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            exchange(&UssdPdu::new(&session_id, msisdn, PduKind::Abort, ""))?;
            return Ok(());
        }
        let text = line.trim_end_matches(['\r', '\n']);
        if show(&mut out, &exchange(&UssdPdu::input(&session_id, msisdn, text))?)? {
            return Ok(());
        }
    }
}

/// In-process gateway over an opened store.
pub fn local(
    gateway: &Gateway,
    service: SharedService,
    msisdn: &str,
    input: impl BufRead,
    out: impl Write,
) -> Result<()> {
    let mut backend = ServiceBackend { service };
    let shortcode = gateway.config().shortcode.clone();
    dialogue(&shortcode, msisdn, input, out, |pdu| {
        let now = now_ms();
        gateway.expire_sessions(now);
        Ok(gateway.handle_pdu(pdu, now, &mut backend))
    })
}

fn read_frame(stream: &mut TcpStream) -> Result<UssdPdu> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len).context("gateway closed the connection")?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        bail!("gateway sent a {len}-byte frame");
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    Ok(serde_json::from_slice(&body)?)
}

/// Length-delimited PDUs to a running gateway.
pub fn remote(addr: &str, shortcode: &str, msisdn: &str, input: impl BufRead, out: impl Write) -> Result<()> {
    let mut stream = TcpStream::connect(addr).with_context(|| format!("connecting to {addr}"))?;
    dialogue(shortcode, msisdn, input, out, |pdu| {
        stream.write_all(&encode_frame(pdu)?)?;
        read_frame(&mut stream)
    })
}
