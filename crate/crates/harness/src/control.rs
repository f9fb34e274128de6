//! Control channel between the `gateway` CLI and a running daemon: a Unix
//! socket carrying one JSON object per line in each direction.
//!
//! Requests are `{"op": ..., "args": {...}}`. Replies are
//! `{"ok": true, "result": ...}` or `{"ok": false, "kind": ..., "error": ...}`.

use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use crossbeam_channel::Sender;
use gateway_core::{ppm, DataEnvelope, Engine, EngineError, ProviderInput, MEDIA_OCTET_STREAM, MEDIA_PPM};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const SOCKET_ENV: &str = "GATEWAY_SOCKET";
const PREVIEW_BYTES: usize = 16;

pub fn default_socket_path() -> PathBuf {
    std::env::var_os(SOCKET_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("gateway.sock"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlRequest {
    pub op: String,
    #[serde(default)]
    pub args: Value,
}

/// One line of `tail` output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeSummary {
    pub data_id: u64,
    pub request_id: u64,
    pub media_type: String,
    pub size: usize,
    pub preview_hex: String,
}

impl EnvelopeSummary {
    pub fn of(envelope: &DataEnvelope) -> Self {
        let n = envelope.payload.len().min(PREVIEW_BYTES);
        Self {
            data_id: envelope.data_id.0,
            request_id: envelope.request_id.0,
            media_type: envelope.media_type.clone(),
            size: envelope.payload.len(),
            preview_hex: hex::encode(&envelope.payload[..n]),
        }
    }
}

impl std::fmt::Display for EnvelopeSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.data_id, self.request_id, self.media_type, self.size, self.preview_hex
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderSummary {
    pub key: String,
    pub state: String,
    pub output_store: String,
    pub pending: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("daemon unreachable at {path}: {reason}")]
    Unreachable { path: String, reason: String },
    #[error("{kind}: {message}")]
    Remote { kind: String, message: String },
    #[error("bad reply from daemon: {0}")]
    Protocol(String),
}

struct Failure {
    kind: String,
    message: String,
}

impl Failure {
    fn bad_args(message: impl Into<String>) -> Self {
        Self {
            kind: "BadArguments".into(),
            message: message.into(),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let debug = format!("{e:?}");
        let kind = debug
            .split(|c: char| !c.is_alphanumeric())
            .next()
            .unwrap_or("EngineError")
            .to_string();
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

fn arg_str<'a>(args: &'a Value, name: &str) -> Result<&'a str, Failure> {
    args.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| Failure::bad_args(format!("missing string argument {name:?}")))
}

/// Executes one request against the engine.
fn dispatch(engine: &Engine, request: &ControlRequest, shutdown: &Sender<()>) -> Result<Value, Failure> {
    let args = &request.args;
    match request.op.as_str() {
        "produce" => {
            let store = arg_str(args, "store")?;
            let ctx = engine.new_request("control:produce");
            let input = match args.get("input_b64").and_then(Value::as_str) {
                Some(b64) => {
                    let bytes = BASE64
                        .decode(b64)
                        .map_err(|e| Failure::bad_args(format!("input_b64: {e}")))?;
                    let media = args
                        .get("media_type")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .unwrap_or_else(|| guess_media_type(&bytes).to_string());
                    ProviderInput::Single(Arc::new(DataEnvelope::external(bytes, media, ctx.request_id)))
                }
                None => ProviderInput::None,
            };
            let request_id = engine.produce_data(store, input, Some(ctx))?;
            Ok(json!({ "request_id": request_id.0 }))
        }
        "tail" => {
            let store = arg_str(args, "store")?;
            let n = args.get("n").and_then(Value::as_u64).unwrap_or(10) as usize;
            let lines: Vec<EnvelopeSummary> = engine
                .retrieve_latest(store, n)?
                .iter()
                .map(|e| EnvelopeSummary::of(e))
                .collect();
            Ok(json!({ "envelopes": lines }))
        }
        "status" => {
            let mut providers = Vec::new();
            for key in engine.provider_keys() {
                let status = engine.provider_state(&key)?;
                providers.push(ProviderSummary {
                    output_store: engine.provider_descriptor(&key)?.output_store,
                    pending: engine.pending_len(&key)?,
                    state: status.state.to_string(),
                    last_error: status.last_error,
                    key,
                });
            }
            Ok(json!({ "running": engine.is_running(), "providers": providers }))
        }
        "shutdown" => {
            let _ = shutdown.try_send(());
            Ok(json!({}))
        }
        other => Err(Failure {
            kind: "UnknownOp".into(),
            message: format!("unknown op {other:?}"),
        }),
    }
}

pub fn guess_media_type(bytes: &[u8]) -> &'static str {
    if ppm::parse(bytes).is_some() {
        MEDIA_PPM
    } else {
        MEDIA_OCTET_STREAM
    }
}

/// Listens on the control socket until dropped.
pub struct ControlServer {
    path: PathBuf,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl ControlServer {
    /// Binds `path`, replacing a stale socket file left by a dead daemon.
    /// A `shutdown` request sends on `shutdown`.
    pub fn bind(path: &Path, engine: Engine, shutdown: Sender<()>) -> io::Result<Self> {
        if path.exists() {
            if UnixStream::connect(path).is_ok() {
                return Err(io::Error::new(
                    io::ErrorKind::AddrInUse,
                    format!("a daemon is already listening on {}", path.display()),
                ));
            }
            std::fs::remove_file(path)?;
        }
        let listener = UnixListener::bind(path)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = Arc::clone(&stop);
        let acceptor = thread::Builder::new()
            .name("control-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop2.load(Ordering::SeqCst) {
                        break;
                    }
                    match conn {
                        Ok(stream) => {
                            let engine = engine.clone();
                            let shutdown = shutdown.clone();
                            thread::spawn(move || {
                                if let Err(e) = serve_connection(stream, &engine, &shutdown) {
                                    tracing::debug!(error = %e, "control connection closed");
                                }
                            });
                        }
                        Err(e) => tracing::warn!(error = %e, "control accept failed"),
                    }
                }
            })?;
        tracing::info!(socket = %path.display(), "control socket ready");
        Ok(Self {
            path: path.to_path_buf(),
            stop,
            acceptor: Some(acceptor),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = UnixStream::connect(&self.path);
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

fn serve_connection(stream: UnixStream, engine: &Engine, shutdown: &Sender<()>) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<ControlRequest>(&line) {
            Ok(request) => match dispatch(engine, &request, shutdown) {
                Ok(result) => json!({ "ok": true, "result": result }),
                Err(f) => json!({ "ok": false, "kind": f.kind, "error": f.message }),
            },
            Err(e) => json!({ "ok": false, "kind": "BadRequest", "error": e.to_string() }),
        };
        writeln!(writer, "{reply}")?;
    }
    Ok(())
}

/// Sends one request and waits for its reply.
pub fn request(path: &Path, op: &str, args: Value) -> Result<Value, ControlError> {
    let unreachable = |e: io::Error| ControlError::Unreachable {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let stream = UnixStream::connect(path).map_err(unreachable)?;
    stream
        .set_read_timeout(Some(Duration::from_secs(30)))
        .map_err(unreachable)?;
    let mut writer = stream.try_clone().map_err(unreachable)?;
    let line = serde_json::to_string(&ControlRequest {
        op: op.to_string(),
        args,
    })
    .expect("request serializes");
    writeln!(writer, "{line}").map_err(unreachable)?;
    let mut reply = String::new();
    BufReader::new(stream)
        .read_line(&mut reply)
        .map_err(unreachable)?;
    let reply: Value =
        serde_json::from_str(&reply).map_err(|e| ControlError::Protocol(e.to_string()))?;
    if reply["ok"].as_bool() == Some(true) {
        Ok(reply["result"].clone())
    } else {
        Err(ControlError::Remote {
            kind: reply["kind"].as_str().unwrap_or("Unknown").to_string(),
            message: reply["error"].as_str().unwrap_or("").to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gateway_core::engine::{InputSpec, ProviderDescriptor};
    use gateway_core::{ProviderCall, ProviderOutput, RequestId, RuntimeConfig};

    #[test]
    fn summary_line() {
        let env = DataEnvelope::external((0u8..20).collect(), "x/y", RequestId(9));
        let s = EnvelopeSummary::of(&env);
        assert_eq!(s.preview_hex.len(), 32);
        assert_eq!(s.to_string(), "0\t9\tx/y\t20\t000102030405060708090a0b0c0d0e0f");
    }

    #[test]
    fn round_trip_over_socket() {
        let dir = tempfile::tempdir().unwrap();
        let sock = dir.path().join("ctl.sock");
        let engine = Engine::with_runtime(RuntimeConfig::default().with_workers(2)).unwrap();
        engine.register_store("out", 8).unwrap();
        engine
            .register_provider(
                ProviderDescriptor::new("upper", "out").with_input(InputSpec::SingleEnvelope),
                |call: &ProviderCall<'_>| {
                    Ok(Some(ProviderOutput::new(
                        call.input.concat_payloads().to_ascii_uppercase(),
                        "text/plain",
                    )))
                },
            )
            .unwrap();
        let (tx, rx) = crossbeam_channel::bounded(1);
        let server = ControlServer::bind(&sock, engine.clone(), tx).unwrap();

        let produced = request(&sock, "produce", json!({"store": "out", "input_b64": BASE64.encode("abc")})).unwrap();
        let rid = RequestId(produced["request_id"].as_u64().unwrap());
        let stored = engine.wait_for_request("out", rid, Duration::from_secs(5)).unwrap().unwrap();
        assert_eq!(stored.payload, b"ABC");

        let tail = request(&sock, "tail", json!({"store": "out", "n": 5})).unwrap();
        let lines: Vec<EnvelopeSummary> = serde_json::from_value(tail["envelopes"].clone()).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].preview_hex, "414243");

        let status = request(&sock, "status", json!({})).unwrap();
        assert_eq!(status["providers"][0]["key"], "upper");

        let err = request(&sock, "produce", json!({"store": "nope"})).unwrap_err();
        assert!(matches!(err, ControlError::Remote { ref kind, .. } if kind == "UnknownStore"), "{err}");

        request(&sock, "shutdown", json!({})).unwrap();
        assert!(rx.recv_timeout(Duration::from_secs(1)).is_ok());
        drop(server);
        assert!(matches!(
            request(&sock, "status", json!({})),
            Err(ControlError::Unreachable { .. })
        ));
        engine.stop_daemon(true).unwrap();
    }
}
