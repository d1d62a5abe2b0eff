//! HTTP surface as a pure request router. The binary wraps this in an
//! axum server; tests call it directly.

use percent_encoding::percent_decode_str;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::auth::{Action, Channel};
use crate::model::{Millis, PatientId, RxId};
use crate::service::{entity_ref, Caller, EhrService, ServiceError};
use crate::store::{NewEncounter, NewPatient, NewPrescription};
use crate::sync::SyncDocument;

pub const CORRELATION_HEADER: &str = "x-correlation-id";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiRequest {
    pub method: String,
    /// Path without the query string.
    pub path: String,
    pub query: Option<String>,
    pub token: Option<String>,
    pub body: Vec<u8>,
    /// Taken from the request header when the client supplies one.
    pub correlation_id: Option<String>,
}

impl ApiRequest {
    pub fn new(method: &str, target: &str) -> Self {
        let (path, query) = match target.split_once('?') {
            Some((p, q)) => (p.to_owned(), Some(q.to_owned())),
            None => (target.to_owned(), None),
        };
        Self {
            method: method.to_ascii_uppercase(),
            path,
            query,
            token: None,
            body: Vec::new(),
            correlation_id: None,
        }
    }

    pub fn get(target: &str) -> Self {
        Self::new("GET", target)
    }

    pub fn post<T: Serialize>(target: &str, body: &T) -> Self {
        let mut req = Self::new("POST", target);
        req.body = serde_json::to_vec(body).expect("serializable body");
        req
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    fn param(&self, name: &str) -> Option<String> {
        let query = self.query.as_deref()?;
        form_urlencoded::parse(query.as_bytes())
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.into_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiResponse {
    pub status: u16,
    pub correlation_id: String,
    pub body: Value,
}

/// Uniform error document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub error: String,
    pub code: String,
    pub detail: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LoginBody {
    Web { username: String, password: String },
    Ussd { msisdn: String, pin: String },
}

enum ApiError {
    Service(ServiceError),
    NoRoute,
    WrongMethod,
    BadLogin(String),
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::Service(e)
    }
}

fn reason(status: u16) -> &'static str {
    match status {
        400 => "Bad Request",
        401 => "Unauthorized",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        422 => "Unprocessable Entity",
        _ => "Internal Server Error",
    }
}

impl ApiError {
    fn into_response(self) -> (u16, Value) {
        let (status, code, detail) = match self {
            ApiError::Service(e) => (e.status(), e.code().to_owned(), e.to_string()),
            ApiError::NoRoute => (404, "NO_ROUTE".into(), "no such endpoint".into()),
            ApiError::WrongMethod => (405, "METHOD_NOT_ALLOWED".into(), "method not allowed".into()),
            ApiError::BadLogin(d) => (400, "BAD_REQUEST".into(), d),
        };
        let body = ErrorBody {
            error: reason(status).into(),
            code,
            detail,
        };
        (status, serde_json::to_value(body).expect("error body"))
    }
}

fn usable_correlation(id: &Option<String>) -> Option<String> {
    id.as_ref()
        .filter(|s| !s.is_empty() && s.len() <= 64 && s.bytes().all(|b| b.is_ascii_graphic()))
        .cloned()
}

/// Route one request. Every response carries a correlation id; every
/// request reaching an endpoint other than login is audited exactly once
/// by the service layer.
pub fn handle_request(service: &mut EhrService, req: &ApiRequest, now: Millis) -> ApiResponse {
    let correlation_id = usable_correlation(&req.correlation_id).unwrap_or_else(|| service.correlation_id());
    let (status, body) = route(service, req, now).unwrap_or_else(ApiError::into_response);
    tracing::debug!(%correlation_id, method = %req.method, path = %req.path, status, "request");
    ApiResponse {
        status,
        correlation_id,
        body,
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable response")
}

struct Ctx<'a> {
    service: &'a mut EhrService,
    req: &'a ApiRequest,
    caller: Caller,
    now: Millis,
}

impl Ctx<'_> {
    fn body<T: DeserializeOwned>(&mut self, action: Action, entity: &str) -> Result<T, ServiceError> {
        serde_json::from_slice(&self.req.body).map_err(|e| {
            self.service
                .reject_malformed(&self.caller, action, entity, e.to_string(), self.now)
        })
    }

    fn malformed(&mut self, action: Action, entity: &str, detail: String) -> ServiceError {
        self.service
            .reject_malformed(&self.caller, action, entity, detail, self.now)
    }
}

fn route(service: &mut EhrService, req: &ApiRequest, now: Millis) -> Result<(u16, Value), ApiError> {
    let Some(rest) = req.path.strip_prefix("/api/") else {
        return Err(ApiError::NoRoute);
    };
    let segments: Vec<String> = rest
        .split('/')
        .map(|s| percent_decode_str(s).decode_utf8_lossy().into_owned())
        .collect();
    let segs: Vec<&str> = segments.iter().map(String::as_str).collect();
    let method = req.method.as_str();

    if segs == ["login"] {
        if method != "POST" {
            return Err(ApiError::WrongMethod);
        }
        let body: LoginBody =
            serde_json::from_slice(&req.body).map_err(|e| ApiError::BadLogin(e.to_string()))?;
        let channel = match body {
            LoginBody::Web { username, password } => Channel::Web { username, password },
            LoginBody::Ussd { msisdn, pin } => Channel::Ussd { msisdn, pin },
        };
        let identity = service.login(&channel, now)?;
        return Ok((
            200,
            json!({
                "token": identity.token,
                "clinician_id": identity.clinician_id,
                "role": identity.role,
                "expires_at": identity.expires_at,
            }),
        ));
    }

    let expected = match segs.as_slice() {
        ["patients"] | ["encounters"] | ["prescriptions"] | ["sync", "push"] => "POST",
        ["prescriptions", _, "refill-request"] | ["prescriptions", _, "refill-grant"] => "POST",
        ["patients", _] | ["patients", _, "history"] | ["patients", _, "prescriptions"] => "GET",
        ["sync", "pull"] | ["aggregates"] | ["audit"] => "GET",
        _ => return Err(ApiError::NoRoute),
    };
    if method != expected {
        return Err(ApiError::WrongMethod);
    }

    let caller = service.caller_from_token(req.token.as_deref(), now);
    let mut cx = Ctx {
        service,
        req,
        caller,
        now,
    };
    let out = match segs.as_slice() {
        ["patients", id] => {
            let rec = cx.service.get_patient(&cx.caller, &PatientId::new(*id), now)?;
            (200, to_value(&rec))
        }
        ["patients"] => {
            let new: NewPatient = cx.body(Action::RegisterPatient, &entity_ref("patient", "new"))?;
            let id = cx.service.register_patient(&cx.caller, new, now)?;
            (201, json!({ "patient_id": id }))
        }
        ["patients", id, "history"] => {
            let pid = PatientId::new(*id);
            let history = cx.service.patient_history(&cx.caller, &pid, now)?;
            (200, json!({ "patient_id": pid, "entries": history }))
        }
        ["patients", id, "prescriptions"] => {
            let pid = PatientId::new(*id);
            let rx = cx.service.list_prescriptions(&cx.caller, &pid, now)?;
            (200, json!({ "patient_id": pid, "prescriptions": rx }))
        }
        ["encounters"] => {
            let new: NewEncounter = cx.body(Action::RecordEncounter, &entity_ref("patient", "new"))?;
            let id = cx.service.record_encounter(&cx.caller, new, now)?;
            (201, json!({ "encounter_id": id }))
        }
        ["prescriptions"] => {
            let new: NewPrescription = cx.body(Action::AddPrescription, &entity_ref("patient", "new"))?;
            let id = cx.service.add_prescription(&cx.caller, new, now)?;
            (201, json!({ "rx_id": id }))
        }
        ["prescriptions", id, "refill-request"] => {
            let req = cx.service.request_refill(&cx.caller, &RxId::new(*id), now)?;
            (201, to_value(&req))
        }
        ["prescriptions", id, "refill-grant"] => {
            let rx = cx.service.grant_refill(&cx.caller, &RxId::new(*id), now)?;
            (200, to_value(&rx))
        }
        ["sync", "push"] => {
            let doc: SyncDocument = cx.body(Action::SyncPush, &entity_ref("replica", "?"))?;
            let ack = cx.service.sync_push(&cx.caller, &doc, now)?;
            (200, to_value(&ack))
        }
        ["sync", "pull"] => {
            let cursor = match cx.req.param("cursor") {
                None => 0,
                Some(c) => match c.parse::<u64>() {
                    Ok(n) => n,
                    Err(_) => {
                        let entity = entity_ref("log", &c);
                        return Err(cx.malformed(Action::SyncPull, &entity, format!("cursor {c:?}")).into());
                    }
                },
            };
            let doc = cx.service.sync_pull(&cx.caller, cursor, now)?;
            (200, to_value(&doc))
        }
        ["aggregates"] => {
            let Some(period) = cx.req.param("period") else {
                let entity = entity_ref("aggregates", "?");
                return Err(cx.malformed(Action::ReadAggregates, &entity, "period is required".into()).into());
            };
            let k = match cx.req.param("k") {
                None => None,
                Some(k) => match k.parse::<u32>() {
                    Ok(k) => Some(k),
                    Err(_) => {
                        let entity = entity_ref("aggregates", &period);
                        return Err(cx.malformed(Action::ReadAggregates, &entity, format!("k {k:?}")).into());
                    }
                },
            };
            let doc = cx.service.aggregates(&cx.caller, &period, k, now)?;
            (200, to_value(&doc))
        }
        ["audit"] => {
            let entity = cx.req.param("entity");
            let rows = cx.service.audit_query(&cx.caller, entity.as_deref(), now)?;
            (200, json!({ "entries": rows }))
        }
        _ => unreachable!("route table checked above"),
    };
    Ok(out)
}
