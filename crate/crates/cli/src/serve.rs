//! Network services: the HTTP API and the USSD gateway port.
//!
//! The gateway port carries two protocols. A connection whose first bytes
//! are `GET ` is a WebSocket upgrade for `/bridge` and exchanges
//! `BridgeMessage` text frames; anything else is a stream of 4-byte
//! big-endian length-prefixed PDU documents.

use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request as WsRequest, Response as WsResponse};
use tokio_tungstenite::tungstenite::Message;
use tokio_util::codec::{Framed, LengthDelimitedCodec};

use offgrid_ehr::config::Config;
use offgrid_ehr::service::{EhrService, SharedService};
use offgrid_ehr::ussd::gateway::{Gateway, ServiceBackend};
use offgrid_ehr::ussd::menu::Menu;
use offgrid_ehr::ussd::pdu::{BridgeMessage, Direction, UssdPdu, MAX_FRAME_BYTES};
use offgrid_ehr::web::{handle_request, ApiRequest, CORRELATION_HEADER};

use crate::now_ms;

pub const BRIDGE_PATH: &str = "/bridge";

#[derive(Clone)]
struct Shared {
    service: SharedService,
    gateway: Arc<Gateway>,
}

impl Shared {
    async fn pdu(&self, pdu: UssdPdu) -> UssdPdu {
        let this = self.clone();
        tokio::task::spawn_blocking(move || {
            let mut backend = ServiceBackend {
                service: this.service.clone(),
            };
            this.gateway.handle_pdu(&pdu, now_ms(), &mut backend)
        })
        .await
        .expect("gateway task")
    }
}

pub async fn run(cfg: Config, service: EhrService) -> Result<()> {
    let shared = Shared {
        service: service.into_shared(),
        gateway: Arc::new(Gateway::new(cfg.gateway(), Arc::new(Menu::default_tree()))),
    };
    let http = TcpListener::bind(("0.0.0.0", cfg.http_port))
        .await
        .with_context(|| format!("binding HTTP port {}", cfg.http_port))?;
    let gw = TcpListener::bind(("0.0.0.0", cfg.gateway_port))
        .await
        .with_context(|| format!("binding gateway port {}", cfg.gateway_port))?;
    // Tests and scripts read the bound ports from this line.
    println!("listening http={} gateway={}", http.local_addr()?, gw.local_addr()?);

    let app = Router::new().fallback(api).with_state(shared.clone());
    let http_task = tokio::spawn(async move { axum::serve(http, app).await });
    let gw_task = tokio::spawn(accept_gateway(gw, shared.clone()));
    let expiry = tokio::spawn(expire_loop(shared.gateway.clone()));

    tokio::select! {
        r = http_task => r?.context("HTTP server")?,
        r = gw_task => r?.context("gateway listener")?,
        _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
    }
    expiry.abort();
    Ok(())
}

async fn api(State(shared): State<Shared>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    let target = uri.path_and_query().map_or(uri.path(), |pq| pq.as_str());
    let mut req = ApiRequest::new(method.as_str(), target);
    req.body = body.to_vec();
    req.token = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|t| t.trim().to_owned());
    req.correlation_id = headers
        .get(CORRELATION_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let service = shared.service.clone();
    let res = tokio::task::spawn_blocking(move || handle_request(&mut service.lock(), &req, now_ms()))
        .await
        .expect("request task");
    let status = StatusCode::from_u16(res.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let mut response = (status, axum::Json(res.body)).into_response();
    if let Ok(v) = HeaderValue::from_str(&res.correlation_id) {
        response.headers_mut().insert(CORRELATION_HEADER, v);
    }
    response
}

async fn expire_loop(gateway: Arc<Gateway>) {
    let mut tick = tokio::time::interval(Duration::from_secs(1));
    loop {
        tick.tick().await;
        let n = gateway.expire_sessions(now_ms());
        if n > 0 {
            tracing::debug!(expired = n, "USSD sessions expired");
        }
    }
}

async fn accept_gateway(listener: TcpListener, shared: Shared) -> Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let shared = shared.clone();
        tokio::spawn(async move {
            if let Err(e) = gateway_connection(stream, shared).await {
                tracing::warn!(%peer, "gateway connection: {e:#}");
            }
        });
    }
}

/// Look at the first four bytes without consuming them.
async fn sniff_http(stream: &TcpStream) -> Result<bool> {
    let mut buf = [0u8; 4];
    loop {
        let n = stream.peek(&mut buf).await?;
        if n == 0 {
            return Ok(false);
        }
        if n == 4 || buf[..n] != b"GET "[..n] {
            return Ok(&buf[..n] == b"GET ");
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

async fn gateway_connection(stream: TcpStream, shared: Shared) -> Result<()> {
    stream.set_nodelay(true)?;
    if sniff_http(&stream).await? {
        bridge(stream, shared).await
    } else {
        framed(stream, shared).await
    }
}

async fn framed(stream: TcpStream, shared: Shared) -> Result<()> {
    let codec = LengthDelimitedCodec::builder()
        .length_field_length(4)
        .big_endian()
        .max_frame_length(MAX_FRAME_BYTES)
        .new_codec();
    let mut frames = Framed::new(stream, codec);
    while let Some(frame) = frames.next().await {
        let pdu: UssdPdu = serde_json::from_slice(&frame?).context("malformed PDU")?;
        let reply = shared.pdu(pdu).await;
        frames.send(Bytes::from(serde_json::to_vec(&reply)?)).await?;
    }
    Ok(())
}

async fn bridge(stream: TcpStream, shared: Shared) -> Result<()> {
    let check_path = |req: &WsRequest, resp: WsResponse| -> Result<WsResponse, ErrorResponse> {
        if req.uri().path() == BRIDGE_PATH {
            Ok(resp)
        } else {
            let mut err = ErrorResponse::new(Some("no such endpoint".into()));
            *err.status_mut() = StatusCode::NOT_FOUND;
            Err(err)
        }
    };
    let mut ws = tokio_tungstenite::accept_hdr_async(stream, check_path).await?;
    while let Some(msg) = ws.next().await {
        let text = match msg? {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Ping(p) => {
                ws.send(Message::Pong(p)).await?;
                continue;
            }
            _ => continue,
        };
        let incoming: BridgeMessage = match serde_json::from_str(text.as_str()) {
            Ok(m) => m,
            Err(e) => {
                tracing::warn!("dropping malformed bridge message: {e}");
                continue;
            }
        };
        if incoming.direction != Direction::ToGateway {
            tracing::warn!("dropping bridge message addressed to the phone");
            continue;
        }
        let reply = BridgeMessage {
            direction: Direction::ToPhone,
            pdu: shared.pdu(incoming.pdu).await,
        };
        ws.send(Message::text(serde_json::to_string(&reply)?)).await?;
    }
    Ok(())
}
