//! In-process stand-ins for the FogBus, EdgeLens and Aneka masters and
//! workers plus an HTTP blob store.
//!
//! Every server records each request it answers (method, path, request id and
//! byte counts) in a [`RequestLog`] before the response goes out, so a client
//! that has returned can count its own traffic without racing the server.

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use gateway_core::backends::aneka::{TaskReceipt, TaskState, TaskSubmission};
use gateway_core::backends::{FileStore, Transform, REQUEST_ID_HEADER};
use gateway_core::envelope::RequestId;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;
use tiny_http::{Header, Method, Request, Response, Server};

const HANDLER_THREADS: usize = 4;
const RECV_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum MockError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("cannot bind port {port}: {reason}")]
    Bind { port: u16, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoggedRequest {
    pub server: String,
    pub method: String,
    pub path: String,
    pub request_id: Option<String>,
    pub bytes_in: usize,
    pub bytes_out: usize,
    pub status: u16,
}

#[derive(Debug, Clone, Default)]
pub struct RequestLog(Arc<Mutex<Vec<LoggedRequest>>>);

impl RequestLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> Vec<LoggedRequest> {
        self.0.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.0.lock().clear();
    }

    pub fn count(&self, pred: impl Fn(&LoggedRequest) -> bool) -> usize {
        self.0.lock().iter().filter(|r| pred(r)).count()
    }

    /// Requests tagged with one engine request id.
    pub fn for_request(&self, request_id: RequestId) -> Vec<LoggedRequest> {
        let id = request_id.to_string();
        self.0
            .lock()
            .iter()
            .filter(|r| r.request_id.as_deref() == Some(id.as_str()))
            .cloned()
            .collect()
    }

    fn push(&self, entry: LoggedRequest) {
        tracing::info!(
            server = %entry.server,
            method = %entry.method,
            path = %entry.path,
            status = entry.status,
            bytes_in = entry.bytes_in,
            bytes_out = entry.bytes_out,
            "mock request"
        );
        self.0.lock().push(entry);
    }
}

pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
    pub content_type: &'static str,
}

impl Reply {
    pub fn bytes(status: u16, body: Vec<u8>) -> Self {
        Self {
            status,
            body,
            content_type: "application/octet-stream",
        }
    }

    pub fn text(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            body: body.into().into_bytes(),
            content_type: "text/plain",
        }
    }

    pub fn json(status: u16, value: &impl Serialize) -> Self {
        Self {
            status,
            body: serde_json::to_vec(value).expect("mock reply serializes"),
            content_type: "application/json",
        }
    }

    pub fn empty(status: u16) -> Self {
        Self::bytes(status, Vec::new())
    }

    fn not_found() -> Self {
        Self::text(404, "not found")
    }
}

pub trait Handler: Send + Sync + 'static {
    fn handle(&self, method: &Method, path: &str, body: Vec<u8>) -> Reply;
}

/// A running mock. Dropping it stops the listener.
pub struct MockServer<H> {
    name: String,
    addr: SocketAddr,
    handler: Arc<H>,
    log: RequestLog,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

fn bind(port: u16) -> Result<Server, MockError> {
    Server::http(("127.0.0.1", port)).map_err(|e| {
        match e.downcast_ref::<io::Error>().map(io::Error::kind) {
            Some(io::ErrorKind::AddrInUse) => MockError::PortInUse(port),
            _ => MockError::Bind {
                port,
                reason: e.to_string(),
            },
        }
    })
}

impl<H: Handler> MockServer<H> {
    /// Binds 127.0.0.1:`port`; port 0 picks a free one.
    pub fn start(name: &str, port: u16, handler: H) -> Result<Self, MockError> {
        Self::start_with_log(name, port, handler, RequestLog::new())
    }

    pub fn start_with_log(
        name: &str,
        port: u16,
        handler: H,
        log: RequestLog,
    ) -> Result<Self, MockError> {
        let server = Arc::new(bind(port)?);
        let addr = server
            .server_addr()
            .to_ip()
            .expect("mock binds a TCP address");
        let handler = Arc::new(handler);
        let stop = Arc::new(AtomicBool::new(false));
        let threads = (0..HANDLER_THREADS)
            .map(|i| {
                let server = Arc::clone(&server);
                let handler = Arc::clone(&handler);
                let stop = Arc::clone(&stop);
                let log = log.clone();
                let name = name.to_string();
                thread::Builder::new()
                    .name(format!("mock-{name}-{i}"))
                    .spawn(move || serve(&server, &*handler, &stop, &log, &name))
                    .expect("spawn mock thread")
            })
            .collect();
        tracing::info!(server = name, %addr, "mock listening");
        Ok(Self {
            name: name.to_string(),
            addr,
            handler,
            log,
            stop,
            threads,
        })
    }

}

impl<H> MockServer<H> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn handler(&self) -> &H {
        &self.handler
    }

    pub fn log(&self) -> &RequestLog {
        &self.log
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl<H> Drop for MockServer<H> {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(server: &Server, handler: &dyn Handler, stop: &AtomicBool, log: &RequestLog, name: &str) {
    while !stop.load(Ordering::SeqCst) {
        match server.recv_timeout(RECV_POLL) {
            Ok(Some(request)) => answer(request, handler, log, name),
            Ok(None) => {}
            Err(e) => {
                tracing::warn!(server = name, error = %e, "mock accept failed");
                break;
            }
        }
    }
}

fn answer(mut request: Request, handler: &dyn Handler, log: &RequestLog, name: &str) {
    let mut body = Vec::new();
    let reply = match request.as_reader().read_to_end(&mut body) {
        Ok(_) => handler.handle(request.method(), request.url(), body.clone()),
        Err(e) => Reply::text(400, format!("unreadable body: {e}")),
    };
    let request_id = request
        .headers()
        .iter()
        .find(|h| h.field.equiv(REQUEST_ID_HEADER))
        .map(|h| h.value.to_string());
    log.push(LoggedRequest {
        server: name.to_string(),
        method: request.method().to_string(),
        path: request.url().to_string(),
        request_id,
        bytes_in: body.len(),
        bytes_out: reply.body.len(),
        status: reply.status,
    });
    let header = Header::from_bytes("Content-Type", reply.content_type).expect("static header");
    let response = Response::from_data(reply.body)
        .with_status_code(reply.status)
        .with_header(header);
    if let Err(e) = request.respond(response) {
        tracing::debug!(server = name, error = %e, "client went away");
    }
}

fn transform_reply(transform: Transform, input: &[u8], error_status: u16) -> Reply {
    match transform.apply(input) {
        Ok(out) => Reply::bytes(200, out),
        Err(e) => Reply::text(error_status, e.to_string()),
    }
}

// ----- FogBus ----------------------------------------------------------------

/// `POST /analyze` answers synchronously with the transformed body.
pub struct FogBusMaster {
    transform: Transform,
    fail_with: RwLock<Option<u16>>,
    delay: RwLock<Duration>,
}

impl FogBusMaster {
    pub fn new(transform: Transform) -> Self {
        Self {
            transform,
            fail_with: RwLock::new(None),
            delay: RwLock::new(Duration::ZERO),
        }
    }

    /// Make every analysis fail with `status`, or recover with `None`.
    pub fn fail_with(&self, status: Option<u16>) {
        *self.fail_with.write() = status;
    }

    pub fn set_delay(&self, delay: Duration) {
        *self.delay.write() = delay;
    }
}

impl Handler for FogBusMaster {
    fn handle(&self, method: &Method, path: &str, body: Vec<u8>) -> Reply {
        if *method != Method::Post || path != "/analyze" {
            return Reply::not_found();
        }
        thread::sleep(*self.delay.read());
        if let Some(status) = *self.fail_with.read() {
            return Reply::text(status, "injected failure");
        }
        if body.is_empty() {
            return Reply::text(400, "empty batch");
        }
        transform_reply(self.transform, &body, 400)
    }
}

// ----- EdgeLens --------------------------------------------------------------

/// `GET /worker` names the assigned worker, or 204 when there is none.
#[derive(Default)]
pub struct EdgeLensMaster {
    worker: RwLock<Option<String>>,
}

impl EdgeLensMaster {
    pub fn new(worker: Option<String>) -> Self {
        Self {
            worker: RwLock::new(worker),
        }
    }

    pub fn set_worker(&self, worker: Option<String>) {
        *self.worker.write() = worker;
    }
}

impl Handler for EdgeLensMaster {
    fn handle(&self, method: &Method, path: &str, _body: Vec<u8>) -> Reply {
        if *method != Method::Get || path != "/worker" {
            return Reply::not_found();
        }
        match &*self.worker.read() {
            Some(url) => Reply::text(200, url.clone()),
            None => Reply::empty(204),
        }
    }
}

/// How slowly an EdgeLens worker finishes its jobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WorkerBehavior {
    /// `GET /result` answers 404 this many times before the result.
    pub pending_polls: u32,
    /// Result never becomes available.
    pub never_complete: bool,
    /// Minimum time between `execute` and the result being ready.
    pub exec_time: Duration,
}

struct Job {
    input: Vec<u8>,
    started: Option<Instant>,
    result_polls: u32,
}

pub struct EdgeLensWorker {
    transform: Transform,
    behavior: RwLock<WorkerBehavior>,
    jobs: Mutex<HashMap<String, Job>>,
    next_job: AtomicU64,
}

impl EdgeLensWorker {
    pub fn new(transform: Transform) -> Self {
        Self {
            transform,
            behavior: RwLock::new(WorkerBehavior::default()),
            jobs: Mutex::default(),
            next_job: AtomicU64::new(1),
        }
    }

    pub fn with_behavior(self, behavior: WorkerBehavior) -> Self {
        *self.behavior.write() = behavior;
        self
    }

    pub fn set_behavior(&self, behavior: WorkerBehavior) {
        *self.behavior.write() = behavior;
    }

    pub fn jobs_seen(&self) -> usize {
        self.jobs.lock().len()
    }
}

impl Handler for EdgeLensWorker {
    fn handle(&self, method: &Method, path: &str, body: Vec<u8>) -> Reply {
        let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();
        match (method, segments.as_slice()) {
            (Method::Post, ["upload"]) => {
                let id = format!("job-{}", self.next_job.fetch_add(1, Ordering::Relaxed));
                self.jobs.lock().insert(
                    id.clone(),
                    Job {
                        input: body,
                        started: None,
                        result_polls: 0,
                    },
                );
                Reply::text(200, id)
            }
            (Method::Post, ["execute", id]) => match self.jobs.lock().get_mut(*id) {
                Some(job) => {
                    job.started.get_or_insert_with(Instant::now);
                    Reply::empty(202)
                }
                None => Reply::not_found(),
            },
            (Method::Get, ["result", id]) => {
                let behavior = *self.behavior.read();
                let mut jobs = self.jobs.lock();
                let Some(job) = jobs.get_mut(*id) else {
                    return Reply::text(410, "unknown job");
                };
                job.result_polls += 1;
                let ready = match job.started {
                    Some(started) => {
                        !behavior.never_complete
                            && job.result_polls > behavior.pending_polls
                            && started.elapsed() >= behavior.exec_time
                    }
                    None => false,
                };
                if ready {
                    transform_reply(self.transform, &job.input, 500)
                } else {
                    Reply::text(404, "pending")
                }
            }
            _ => Reply::not_found(),
        }
    }
}

// ----- Aneka -----------------------------------------------------------------

/// Where the Aneka mock reads inputs and writes results.
pub enum MockFiles {
    /// The in-memory map behind a [`BlobServer`].
    Blobs(BlobData),
    /// Any other file store, e.g. a local directory.
    Store(Box<dyn FileStore>),
}

impl MockFiles {
    fn get(&self, path: &str) -> Result<Vec<u8>, String> {
        match self {
            MockFiles::Blobs(data) => data.get(path).ok_or_else(|| format!("no blob {path}")),
            MockFiles::Store(store) => store.get(path, RequestId(0)).map_err(|e| e.to_string()),
        }
    }

    fn put(&self, path: &str, bytes: Vec<u8>) -> Result<(), String> {
        match self {
            MockFiles::Blobs(data) => {
                data.put(path, bytes);
                Ok(())
            }
            MockFiles::Store(store) => store
                .put(path, &bytes, RequestId(0))
                .map_err(|e| e.to_string()),
        }
    }
}

struct AnekaTask {
    submission: TaskSubmission,
    transform: Transform,
    polls: usize,
    outcome: Option<Result<String, String>>,
}

/// Task REST API. A task walks through `timeline`, one entry per status
/// request, and stays on the last entry. The transform runs the first time
/// the task is reported Completed; the result goes to `out/{task_id}`.
pub struct AnekaMaster {
    files: MockFiles,
    timeline: RwLock<Vec<TaskState>>,
    tasks: Mutex<HashMap<String, AnekaTask>>,
    next_task: AtomicU64,
}

pub fn default_timeline() -> Vec<TaskState> {
    vec![TaskState::Submitted, TaskState::Running, TaskState::Completed]
}

impl AnekaMaster {
    pub fn new(files: MockFiles) -> Self {
        Self {
            files,
            timeline: RwLock::new(default_timeline()),
            tasks: Mutex::default(),
            next_task: AtomicU64::new(1),
        }
    }

    pub fn with_timeline(self, timeline: Vec<TaskState>) -> Self {
        self.set_timeline(timeline);
        self
    }

    pub fn set_timeline(&self, timeline: Vec<TaskState>) {
        assert!(!timeline.is_empty(), "timeline needs at least one state");
        *self.timeline.write() = timeline;
    }

    fn status(&self, id: &str) -> Reply {
        let timeline = self.timeline.read().clone();
        let mut tasks = self.tasks.lock();
        let Some(task) = tasks.get_mut(id) else {
            return Reply::not_found();
        };
        task.polls += 1;
        let mut state = timeline[(task.polls - 1).min(timeline.len() - 1)];
        if state == TaskState::Completed && task.outcome.is_none() {
            let result_ref = format!("out/{id}");
            let outcome = self
                .files
                .get(&task.submission.input)
                .and_then(|input| task.transform.apply(&input).map_err(|e| e.to_string()))
                .and_then(|out| self.files.put(&result_ref, out))
                .map(|()| result_ref);
            task.outcome = Some(outcome);
        }
        let mut result_ref = None;
        match &task.outcome {
            Some(Ok(r)) if state == TaskState::Completed => result_ref = Some(r.clone()),
            Some(Err(e)) => {
                tracing::warn!(task = id, error = %e, "mock task failed");
                state = TaskState::Failed;
            }
            _ => {}
        }
        Reply::json(
            200,
            &TaskReceipt {
                task_id: id.to_string(),
                state,
                result_ref,
            },
        )
    }
}

impl Handler for AnekaMaster {
    fn handle(&self, method: &Method, path: &str, body: Vec<u8>) -> Reply {
        let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();
        match (method, segments.as_slice()) {
            (Method::Post, ["tasks"]) => {
                let submission: TaskSubmission = match serde_json::from_slice(&body) {
                    Ok(s) => s,
                    Err(e) => return Reply::text(400, format!("bad submission: {e}")),
                };
                let transform: Transform = match submission.transform.parse() {
                    Ok(t) => t,
                    Err(e) => return Reply::text(400, e.to_string()),
                };
                let id = format!("task-{}", self.next_task.fetch_add(1, Ordering::Relaxed));
                self.tasks.lock().insert(
                    id.clone(),
                    AnekaTask {
                        submission,
                        transform,
                        polls: 0,
                        outcome: None,
                    },
                );
                Reply::json(200, &serde_json::json!({ "task_id": id }))
            }
            (Method::Get, ["tasks", id]) => self.status(id),
            _ => Reply::not_found(),
        }
    }
}

// ----- blob store ------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct BlobData(Arc<Mutex<HashMap<String, Vec<u8>>>>);

impl BlobData {
    pub fn get(&self, path: &str) -> Option<Vec<u8>> {
        self.0.lock().get(path.trim_start_matches('/')).cloned()
    }

    pub fn put(&self, path: &str, bytes: Vec<u8>) {
        self.0.lock().insert(path.trim_start_matches('/').to_string(), bytes);
    }

    pub fn keys(&self) -> Vec<String> {
        let mut keys: Vec<_> = self.0.lock().keys().cloned().collect();
        keys.sort();
        keys
    }
}

/// `PUT /blob/{path}` stores, `GET /blob/{path}` fetches.
#[derive(Default)]
pub struct BlobServer {
    data: BlobData,
}

impl BlobServer {
    pub fn new(data: BlobData) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &BlobData {
        &self.data
    }
}

impl Handler for BlobServer {
    fn handle(&self, method: &Method, path: &str, body: Vec<u8>) -> Reply {
        let Some(key) = path.strip_prefix("/blob/").filter(|k| !k.is_empty()) else {
            return Reply::not_found();
        };
        match method {
            Method::Put => {
                self.data.put(key, body);
                Reply::empty(200)
            }
            Method::Get => match self.data.get(key) {
                Some(bytes) => Reply::bytes(200, bytes),
                None => Reply::not_found(),
            },
            _ => Reply::text(405, "method not allowed"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn handle(h: &impl Handler, method: Method, path: &str, body: &[u8]) -> Reply {
        h.handle(&method, path, body.to_vec())
    }

    #[test]
    fn fogbus_rejects_empty_batch() {
        let m = FogBusMaster::new(Transform::HypopneaCount);
        assert_eq!(handle(&m, Method::Post, "/analyze", b"").status, 400);
        let ok = handle(&m, Method::Post, "/analyze", &[80, 60, 0, 0]);
        assert_eq!((ok.status, ok.body), (200, b"HYPOPNEA:1".to_vec()));
        m.fail_with(Some(500));
        assert_eq!(handle(&m, Method::Post, "/analyze", &[80, 60, 0, 0]).status, 500);
    }

    #[test]
    fn worker_pending_then_ready() {
        let w = EdgeLensWorker::new(Transform::Complement).with_behavior(WorkerBehavior {
            pending_polls: 2,
            ..Default::default()
        });
        let job = String::from_utf8(handle(&w, Method::Post, "/upload", b"\x01").body).unwrap();
        assert_eq!(handle(&w, Method::Get, &format!("/result/{job}"), b"").status, 404);
        assert_eq!(handle(&w, Method::Post, &format!("/execute/{job}"), b"").status, 202);
        assert_eq!(handle(&w, Method::Get, &format!("/result/{job}"), b"").status, 404);
        let done = handle(&w, Method::Get, &format!("/result/{job}"), b"");
        assert_eq!((done.status, done.body), (200, vec![0xFE]));
    }

    #[test]
    fn aneka_timeline_and_result() {
        let blobs = BlobData::default();
        blobs.put("in/1", b"img".to_vec());
        let m = AnekaMaster::new(MockFiles::Blobs(blobs.clone()));
        let sub = serde_json::to_vec(&TaskSubmission {
            input: "in/1".into(),
            transform: "append-marker".into(),
        })
        .unwrap();
        let reply = handle(&m, Method::Post, "/tasks", &sub);
        let id: serde_json::Value = serde_json::from_slice(&reply.body).unwrap();
        let path = format!("/tasks/{}", id["task_id"].as_str().unwrap());
        let states: Vec<TaskReceipt> = (0..4)
            .map(|_| serde_json::from_slice(&handle(&m, Method::Get, &path, b"").body).unwrap())
            .collect();
        let seen: Vec<_> = states.iter().map(|r| r.state).collect();
        assert_eq!(
            seen,
            [TaskState::Submitted, TaskState::Running, TaskState::Completed, TaskState::Completed]
        );
        let result_ref = states[2].result_ref.clone().unwrap();
        assert_eq!(result_ref, "out/task-1");
        assert_eq!(blobs.get(&result_ref).unwrap(), b"imgDETECTED");
    }

    #[test]
    fn aneka_missing_input_fails_task() {
        let m = AnekaMaster::new(MockFiles::Blobs(BlobData::default()))
            .with_timeline(vec![TaskState::Completed]);
        let sub = br#"{"input":"in/404","transform":"complement"}"#;
        handle(&m, Method::Post, "/tasks", sub);
        let r: TaskReceipt =
            serde_json::from_slice(&handle(&m, Method::Get, "/tasks/task-1", b"").body).unwrap();
        assert_eq!(r.state, TaskState::Failed);
        assert_eq!(r.result_ref, None);
    }

    #[test]
    fn port_in_use_is_reported() {
        let first = MockServer::start("blob", 0, BlobServer::default()).unwrap();
        let err = MockServer::start("blob", first.port(), BlobServer::default())
            .err()
            .unwrap();
        assert!(matches!(err, MockError::PortInUse(p) if p == first.port()), "{err}");
    }
}
