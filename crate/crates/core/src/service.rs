//! Newline-delimited JSON routing service.
//!
//! Each request line is a JSON object; each response is one JSON line.
//!
//! ```text
//! → {"id":1,"queries":[{"id":"q1","text":"What is 2+2?"}],"weights":{"p":0.5,"c":0.3,"t":0.2}}
//! ← {"id":1,"choices":[{"query_id":"q1","model_id":"m","p":…,"cost":…,"latency":…}],
//!    "estimates":[…],"solver":"exact","feasible":true,"objective":…,"gap":0.0,
//!    "constraint_slack":{},"registry_version":3,"timestamp":1700000000000}
//! ```
//!
//! A query may carry a precomputed `"embedding"` for the predictor, or a
//! `"latent": {"alpha": […], "b": […]}` that bypasses the predictor. Instead
//! of `"weights"` a request may name a `"policy"` preset; with neither, the
//! balanced preset is used. `"constraints"` takes the fields of
//! [`GlobalConstraints`].
//!
//! Failures produce `{"id":…,"error":{"code":…,"message":…}}` with HTTP-like
//! codes: 400 malformed request, 422 semantically invalid, 503 registry not
//! ready for routing.
//!
//! Besides routing, `{"op":"status"}` reports the registry version and model
//! count, and `{"op":"reload"}` re-reads the registry directory.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::estimators::TokenizerRegistry;
use crate::irt::ItemParams;
use crate::registry::{Registry, RegistryHandle};
use crate::router::{
    route_constrained_with, score_matrix, ConstraintSlack, GlobalConstraints, PolicyWeights, QueryModelEstimate,
    RouteOptions, ScoringQuery,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentOverride {
    pub alpha: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestQuery {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentOverride>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteRequest {
    #[serde(default)]
    pub id: Value,
    pub queries: Vec<RequestQuery>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PolicyWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default)]
    pub constraints: GlobalConstraints,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseChoice {
    pub query_id: String,
    pub model_id: String,
    pub p: f64,
    pub cost: f64,
    pub latency: f64,
}

/// Field order is part of the wire format; `timestamp` stays last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub id: Value,
    pub choices: Vec<ResponseChoice>,
    pub estimates: Vec<QueryModelEstimate>,
    pub solver: String,
    pub feasible: bool,
    pub objective: f64,
    pub gap: f64,
    pub constraint_slack: ConstraintSlack,
    pub registry_version: u64,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: u16,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub id: Value,
    pub error: ErrorBody,
}

/// Error with a wire code attached.
#[derive(Debug)]
pub struct ServiceError {
    pub code: u16,
    pub message: String,
}

impl ServiceError {
    fn bad_request(m: impl Into<String>) -> Self {
        Self {
            code: 400,
            message: m.into(),
        }
    }

    fn unavailable(m: impl Into<String>) -> Self {
        Self {
            code: 503,
            message: m.into(),
        }
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Numerical(_) => 500,
            _ => 422,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Routes one parsed request against a registry snapshot.
pub fn route_request(
    registry: &Registry,
    tokenizers: &TokenizerRegistry,
    options: &RouteOptions,
    req: &RouteRequest,
) -> std::result::Result<RouteResponse, ServiceError> {
    let weights = match (&req.weights, &req.policy) {
        (Some(w), _) => *w,
        (None, Some(name)) => PolicyWeights::preset(name)
            .ok_or_else(|| ServiceError::bad_request(format!("unknown policy `{name}`")))?,
        (None, None) => PolicyWeights::BALANCED,
    };
    if req.queries.is_empty() {
        return Err(ServiceError::bad_request("request has no queries"));
    }
    let profiles = registry.routable_profiles();
    if profiles.is_empty() {
        return Err(ServiceError::unavailable("registry has no routable models"));
    }
    let mut scoring = Vec::with_capacity(req.queries.len());
    for q in &req.queries {
        let item = match &q.latent {
            Some(l) => ItemParams::new(q.id.clone(), l.alpha.clone(), l.b.clone())?,
            None => {
                let predictor = registry
                    .predictor
                    .as_ref()
                    .ok_or_else(|| ServiceError::unavailable("registry has no predictor"))?;
                predictor.predict_item(&q.id, &q.text, q.embedding.as_deref())?
            }
        };
        scoring.push(ScoringQuery {
            query_id: q.id.clone(),
            item,
            text: q.text.clone(),
        });
    }
    let matrix = score_matrix(&scoring, &profiles, tokenizers)?;
    let mut opts = *options;
    if let Some(n) = req.normalize {
        opts.normalize = n;
    }
    let assignment = route_constrained_with(&matrix, &weights, &req.constraints, &opts)?;
    let choices = assignment
        .choices
        .iter()
        .enumerate()
        .map(|(q, c)| {
            let m = matrix.model_index(&c.model_id).expect("chosen model is a column");
            let e = matrix.get(q, m);
            ResponseChoice {
                query_id: c.query_id.clone(),
                model_id: c.model_id.clone(),
                p: e.p,
                cost: e.cost,
                latency: e.latency,
            }
        })
        .collect();
    Ok(RouteResponse {
        id: req.id.clone(),
        choices,
        estimates: matrix.cells().to_vec(),
        solver: assignment.solver.as_str().into(),
        feasible: assignment.feasible,
        objective: assignment.objective_value,
        gap: assignment.gap,
        constraint_slack: assignment.constraint_slack,
        registry_version: registry.version,
        timestamp: now_millis(),
    })
}

fn error_line(id: Value, e: ServiceError) -> String {
    serde_json::to_string(&ErrorResponse {
        id,
        error: ErrorBody {
            code: e.code,
            message: e.message,
        },
    })
    .expect("error response serializes")
}

/// Handles one request line with default tokenizers and options.
pub fn handle_route_request(registry: &Registry, line: &str) -> String {
    handle_route_request_with(registry, &TokenizerRegistry::default(), &RouteOptions::default(), line)
}

pub fn handle_route_request_with(
    registry: &Registry,
    tokenizers: &TokenizerRegistry,
    options: &RouteOptions,
    line: &str,
) -> String {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return error_line(Value::Null, ServiceError::bad_request(format!("malformed JSON: {e}"))),
    };
    let id = value.get("id").cloned().unwrap_or(Value::Null);
    let req: RouteRequest = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => return error_line(id, ServiceError::bad_request(format!("invalid request: {e}"))),
    };
    match route_request(registry, tokenizers, options, &req) {
        Ok(resp) => serde_json::to_string(&resp).expect("response serializes"),
        Err(e) => error_line(id, e),
    }
}

/// Shared state of a running server.
pub struct Service {
    pub registry: Arc<RegistryHandle>,
    pub tokenizers: TokenizerRegistry,
    pub options: RouteOptions,
    reload_dir: Option<std::path::PathBuf>,
}

impl Service {
    pub fn new(registry: Arc<RegistryHandle>) -> Self {
        Self {
            registry,
            tokenizers: TokenizerRegistry::default(),
            options: RouteOptions::default(),
            reload_dir: None,
        }
    }

    /// Enables `{"op":"reload"}` from this directory.
    pub fn with_reload_dir(mut self, dir: impl Into<std::path::PathBuf>) -> Self {
        self.reload_dir = Some(dir.into());
        self
    }

    /// Dispatches one line; the registry snapshot is taken per request.
    pub fn handle_line(&self, line: &str) -> String {
        let op = serde_json::from_str::<Value>(line)
            .ok()
            .and_then(|v| Some((v.get("op")?.as_str()?.to_string(), v.get("id").cloned().unwrap_or(Value::Null))));
        match op {
            Some((op, id)) if op == "status" => {
                let snap = self.registry.snapshot();
                serde_json::json!({
                    "id": id,
                    "registry_version": snap.version,
                    "models": snap.profiles.len(),
                    "routable_models": snap.routable_profiles().len(),
                    "has_predictor": snap.predictor.is_some(),
                })
                .to_string()
            }
            Some((op, id)) if op == "reload" => match &self.reload_dir {
                Some(dir) => match Registry::load(dir).and_then(|fresh| self.registry.update(|r| {
                    *r = fresh;
                    Ok(r.version)
                })) {
                    Ok(v) => serde_json::json!({"id": id, "registry_version": v}).to_string(),
                    Err(e) => error_line(id, e.into()),
                },
                None => error_line(id, ServiceError::bad_request("reload is not enabled")),
            },
            Some((op, id)) if op != "route" => error_line(id, ServiceError::bad_request(format!("unknown op `{op}`"))),
            _ => {
                let snap = self.registry.snapshot();
                let stripped = strip_op(line);
                handle_route_request_with(&snap, &self.tokenizers, &self.options, stripped.as_deref().unwrap_or(line))
            }
        }
    }
}

/// Removes an `"op":"route"` member so the request parses strictly.
fn strip_op(line: &str) -> Option<String> {
    let mut v: Value = serde_json::from_str(line).ok()?;
    v.as_object_mut()?.remove("op")?;
    Some(v.to_string())
}

fn serve_connection(service: &Service, stream: TcpStream) -> std::io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut out = service.handle_line(&line);
        out.push('\n');
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// A bound TCP server. One thread per connection.
pub struct Server {
    listener: TcpListener,
    service: Arc<Service>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, service: Service) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::io("<listen>", e))?;
        Ok(Self {
            listener,
            service: Arc::new(service),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.listener.local_addr().map_err(|e| Error::io("<listen>", e))
    }

    /// Serves until `stop` is set; a connection attempt is needed to wake the
    /// accept loop afterwards.
    pub fn run(self, stop: Arc<AtomicBool>) -> Result<()> {
        for stream in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let service = Arc::clone(&self.service);
            std::thread::spawn(move || {
                let _ = serve_connection(&service, stream);
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || self.run(flag));
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if let Some(t) = self.thread.take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}
