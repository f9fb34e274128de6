//! Background execution runtime.
//!
//! A fixed pool of worker threads runs task bodies. Every pre-hook and
//! post-hook runs on one coordination thread, so hooks of different tasks
//! never overlap and can do bookkeeping without further locking discipline.
//!
//! Timeouts are cooperative: the body's [`CancelToken`] is cancelled when the
//! deadline passes. A body that ignores the signal is abandoned; its ticket is
//! marked [`TicketStatus::TimedOut`] right away, a replacement worker is
//! spawned, and the old thread exits once the body finally returns.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, select, unbounded, Receiver, Sender};
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::RequestId;

pub const ENV_WORKERS: &str = "GATEWAY_WORKERS";
pub const ENV_TIMEOUT_MS: &str = "GATEWAY_TIMEOUT_MS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub worker_count: usize,
    #[serde(rename = "default_timeout_ms", with = "crate::millis")]
    pub default_timeout: Duration,
    /// Per-provider backlog for trigger deliveries that arrive while the
    /// provider is busy.
    pub pending_queue_depth: usize,
    #[serde(rename = "shutdown_grace_ms", with = "crate::millis")]
    pub shutdown_grace: Duration,
    /// Tickets allowed to wait for a worker before `submit` reports QueueFull.
    pub queue_capacity: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            worker_count: 4,
            default_timeout: Duration::from_secs(30),
            pending_queue_depth: 64,
            shutdown_grace: Duration::from_secs(5),
            queue_capacity: 4096,
        }
    }
}

impl RuntimeConfig {
    pub fn with_workers(mut self, worker_count: usize) -> Self {
        self.worker_count = worker_count;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.default_timeout = timeout;
        self
    }

    pub fn with_shutdown_grace(mut self, grace: Duration) -> Self {
        self.shutdown_grace = grace;
        self
    }

    /// Applies `GATEWAY_WORKERS` and `GATEWAY_TIMEOUT_MS` from the process
    /// environment.
    pub fn with_env_overrides(self) -> Self {
        self.apply_overrides(|key| std::env::var(key).ok())
    }

    /// Same as [`with_env_overrides`](Self::with_env_overrides) with an
    /// explicit lookup. Unparseable values are ignored with a warning.
    pub fn apply_overrides(mut self, lookup: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(raw) = lookup(ENV_WORKERS) {
            match raw.trim().parse::<usize>() {
                Ok(n) if n >= 1 => self.worker_count = n,
                _ => tracing::warn!(value = %raw, "ignoring invalid {ENV_WORKERS}"),
            }
        }
        if let Some(raw) = lookup(ENV_TIMEOUT_MS) {
            match raw.trim().parse::<u64>() {
                Ok(ms) if ms > 0 => self.default_timeout = Duration::from_millis(ms),
                _ => tracing::warn!(value = %raw, "ignoring invalid {ENV_TIMEOUT_MS}"),
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.worker_count == 0 {
            return Err(RuntimeError::InvalidConfig("worker_count must be at least 1".into()));
        }
        if self.pending_queue_depth == 0 || self.queue_capacity == 0 {
            return Err(RuntimeError::InvalidConfig("queue sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("runtime is stopped")]
    Stopped,
    #[error("runtime queue is full")]
    QueueFull,
    #[error("runtime is already running")]
    AlreadyRunning,
    #[error("runtime is not running")]
    NotRunning,
    #[error("invalid runtime config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TicketStatus {
    Queued,
    PreHook,
    Running,
    PostHook,
    Done,
    Failed(String),
    TimedOut,
}

impl TicketStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            TicketStatus::Done | TicketStatus::Failed(_) | TicketStatus::TimedOut
        )
    }

    /// Position in the lifecycle; terminal states share the last rank.
    pub fn rank(&self) -> u8 {
        match self {
            TicketStatus::Queued => 0,
            TicketStatus::PreHook => 1,
            TicketStatus::Running => 2,
            TicketStatus::PostHook => 3,
            TicketStatus::Done | TicketStatus::Failed(_) | TicketStatus::TimedOut => 4,
        }
    }
}

impl fmt::Display for TicketStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TicketStatus::Failed(reason) => write!(f, "Failed({reason})"),
            other => write!(f, "{other:?}"),
        }
    }
}

struct TicketInner {
    id: u64,
    request_id: RequestId,
    provider_key: String,
    submitted_at: Instant,
    timeout: Duration,
    status: Mutex<TicketStatus>,
    changed: Condvar,
}

/// Handle on one submitted task. Cheap to clone.
#[derive(Clone)]
pub struct Ticket {
    inner: Arc<TicketInner>,
}

impl fmt::Debug for Ticket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ticket")
            .field("id", &self.inner.id)
            .field("request_id", &self.inner.request_id)
            .field("provider_key", &self.inner.provider_key)
            .field("status", &*self.inner.status.lock())
            .finish()
    }
}

impl Ticket {
    fn new(id: u64, request_id: RequestId, provider_key: String, timeout: Duration) -> Self {
        Self {
            inner: Arc::new(TicketInner {
                id,
                request_id,
                provider_key,
                submitted_at: Instant::now(),
                timeout,
                status: Mutex::new(TicketStatus::Queued),
                changed: Condvar::new(),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn request_id(&self) -> RequestId {
        self.inner.request_id
    }

    pub fn provider_key(&self) -> &str {
        &self.inner.provider_key
    }

    pub fn submitted_at(&self) -> Instant {
        self.inner.submitted_at
    }

    pub fn timeout(&self) -> Duration {
        self.inner.timeout
    }

    pub fn status(&self) -> TicketStatus {
        self.inner.status.lock().clone()
    }

    fn advance(&self, next: TicketStatus) {
        let mut status = self.inner.status.lock();
        if status.is_terminal() {
            return;
        }
        debug_assert!(next.rank() >= status.rank(), "{status:?} -> {next:?}");
        *status = next;
        self.inner.changed.notify_all();
    }

    /// Blocks until the ticket is terminal or `timeout` elapses, returning the
    /// status seen last.
    pub fn wait(&self, timeout: Duration) -> TicketStatus {
        let deadline = Instant::now() + timeout;
        let mut status = self.inner.status.lock();
        while !status.is_terminal() {
            if self.inner.changed.wait_until(&mut status, deadline).timed_out() {
                break;
            }
        }
        status.clone()
    }
}

const SLOT_RUNNING: u8 = 0;
const SLOT_FINISHED: u8 = 1;
const SLOT_ABANDONED: u8 = 2;

struct CancelInner {
    cancelled: AtomicBool,
    // Decides who owns the outcome of a running body: the worker (finished)
    // or the coordinator (abandoned after a deadline).
    slot: AtomicU8,
}

/// Cooperative cancellation signal handed to task bodies.
#[derive(Clone)]
pub struct CancelToken {
    inner: Arc<CancelInner>,
}

impl Default for CancelToken {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for CancelToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CancelToken")
            .field("cancelled", &self.is_cancelled())
            .finish()
    }
}

impl CancelToken {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(CancelInner {
                cancelled: AtomicBool::new(false),
                slot: AtomicU8::new(SLOT_RUNNING),
            }),
        }
    }

    pub fn cancel(&self) {
        self.inner.cancelled.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.inner.cancelled.load(Ordering::SeqCst)
    }

    /// Sleeps for `dur` unless cancelled first. Returns `false` on cancellation.
    pub fn sleep(&self, dur: Duration) -> bool {
        let deadline = Instant::now() + dur;
        loop {
            if self.is_cancelled() {
                return false;
            }
            let now = Instant::now();
            if now >= deadline {
                return true;
            }
            thread::sleep((deadline - now).min(Duration::from_millis(5)));
        }
    }

    fn claim(&self, to: u8) -> bool {
        self.inner
            .slot
            .compare_exchange(SLOT_RUNNING, to, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }
}

/// How a task ended, as seen by its post-hook.
#[derive(Debug)]
pub enum Outcome<T> {
    Completed(T),
    Failed(String),
    TimedOut,
    /// The body never ran: the runtime shut down first or the pre-hook failed.
    NotStarted(String),
}

type PreHook = Box<dyn FnOnce() -> Result<(), String> + Send>;
type Body<T> = Box<dyn FnOnce(&CancelToken) -> Result<T, String> + Send>;
type PostHook<T> = Box<dyn FnOnce(Outcome<T>) -> Result<(), String> + Send>;

/// A unit of work: body on a worker, hooks on the coordination thread.
pub struct Task<T> {
    provider_key: String,
    request_id: RequestId,
    timeout: Option<Duration>,
    pre_hook: Option<PreHook>,
    body: Body<T>,
    post_hook: Option<PostHook<T>>,
}

impl<T> Task<T> {
    pub fn new(
        provider_key: impl Into<String>,
        request_id: RequestId,
        body: impl FnOnce(&CancelToken) -> Result<T, String> + Send + 'static,
    ) -> Self {
        Self {
            provider_key: provider_key.into(),
            request_id,
            timeout: None,
            pre_hook: None,
            body: Box::new(body),
            post_hook: None,
        }
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn pre_hook(mut self, hook: impl FnOnce() -> Result<(), String> + Send + 'static) -> Self {
        self.pre_hook = Some(Box::new(hook));
        self
    }

    pub fn post_hook(
        mut self,
        hook: impl FnOnce(Outcome<T>) -> Result<(), String> + Send + 'static,
    ) -> Self {
        self.post_hook = Some(Box::new(hook));
        self
    }
}

/// Counts of how tickets ended during a stop.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopSummary {
    /// Tickets that never started and were failed with "shutdown".
    pub dropped_queued: usize,
    /// Running tickets abandoned because the grace period ran out.
    pub abandoned_running: usize,
}

#[derive(Default)]
struct Stats {
    running: AtomicUsize,
    peak_running: AtomicUsize,
    queued: AtomicUsize,
}

enum Command<T> {
    Submit(Ticket, Task<T>),
    Stop {
        drain: bool,
        reply: Sender<StopSummary>,
    },
}

struct WorkItem<T> {
    ticket_id: u64,
    body: Body<T>,
    cancel: CancelToken,
}

struct Finished<T> {
    ticket_id: u64,
    result: Result<T, String>,
}

/// Worker pool plus coordination thread, generic over the body's output.
pub struct Runtime<T: Send + 'static> {
    config: RuntimeConfig,
    commands: Sender<Command<T>>,
    accepting: Arc<RwLock<bool>>,
    stats: Arc<Stats>,
    next_ticket: AtomicU64,
    coordinator: Mutex<Option<JoinHandle<()>>>,
    coordinator_thread: thread::ThreadId,
}

impl<T: Send + 'static> Runtime<T> {
    pub fn start(config: RuntimeConfig) -> Result<Self, RuntimeError> {
        config.validate()?;
        let (commands, command_rx) = unbounded();
        let (work_tx, work_rx) = unbounded();
        let (done_tx, done_rx) = unbounded();
        let stats = Arc::new(Stats::default());

        let coordinator = Coordinator {
            config: config.clone(),
            stats: stats.clone(),
            commands: command_rx,
            done_rx,
            done_tx,
            work_tx: Some(work_tx),
            work_rx,
            queue: VecDeque::new(),
            active: HashMap::new(),
            idle_workers: 0,
            stopping: None,
        };
        let handle = thread::Builder::new()
            .name("gateway-coordinator".into())
            .spawn(move || coordinator.run())
            .expect("spawn coordinator thread");
        let coordinator_thread = handle.thread().id();

        Ok(Self {
            config,
            commands,
            accepting: Arc::new(RwLock::new(true)),
            stats,
            next_ticket: AtomicU64::new(1),
            coordinator: Mutex::new(Some(handle)),
            coordinator_thread,
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn is_running(&self) -> bool {
        *self.accepting.read()
    }

    /// True when called from the thread that runs hooks.
    pub fn on_coordinator(&self) -> bool {
        thread::current().id() == self.coordinator_thread
    }

    pub fn running_now(&self) -> usize {
        self.stats.running.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously running bodies observed so far.
    pub fn peak_running(&self) -> usize {
        self.stats.peak_running.load(Ordering::SeqCst)
    }

    pub fn queued_now(&self) -> usize {
        self.stats.queued.load(Ordering::SeqCst)
    }

    pub fn submit(&self, task: Task<T>) -> Result<Ticket, RuntimeError> {
        let accepting = self.accepting.read();
        if !*accepting {
            return Err(RuntimeError::Stopped);
        }
        if self.stats.queued.fetch_add(1, Ordering::SeqCst) >= self.config.queue_capacity {
            self.stats.queued.fetch_sub(1, Ordering::SeqCst);
            return Err(RuntimeError::QueueFull);
        }
        let timeout = task.timeout.unwrap_or(self.config.default_timeout);
        let id = self.next_ticket.fetch_add(1, Ordering::Relaxed);
        let ticket = Ticket::new(id, task.request_id, task.provider_key.clone(), timeout);
        if self
            .commands
            .send(Command::Submit(ticket.clone(), task))
            .is_err()
        {
            self.stats.queued.fetch_sub(1, Ordering::SeqCst);
            return Err(RuntimeError::Stopped);
        }
        Ok(ticket)
    }

    /// Stops accepting work and shuts the pool down.
    ///
    /// With `drain`, queued and running tickets are given `shutdown_grace` to
    /// finish. Without it, queued tickets fail immediately with "shutdown" and
    /// only running ones get the grace period. Anything still running when
    /// the grace period ends is abandoned and failed. Must not be called from
    /// a hook.
    pub fn stop(&self, drain: bool) -> Result<StopSummary, RuntimeError> {
        {
            let mut accepting = self.accepting.write();
            if !*accepting {
                return Err(RuntimeError::NotRunning);
            }
            *accepting = false;
        }
        assert!(!self.on_coordinator(), "Runtime::stop called from a hook");
        let (reply, summary_rx) = bounded(1);
        let _ = self.commands.send(Command::Stop { drain, reply });
        let summary = summary_rx.recv().unwrap_or_default();
        if let Some(handle) = self.coordinator.lock().take() {
            let _ = handle.join();
        }
        Ok(summary)
    }
}

impl<T: Send + 'static> Drop for Runtime<T> {
    fn drop(&mut self) {
        if self.is_running() && !self.on_coordinator() {
            let _ = self.stop(false);
        }
    }
}

struct Active<T> {
    ticket: Ticket,
    cancel: CancelToken,
    deadline: Instant,
    post_hook: Option<PostHook<T>>,
}

struct Stopping {
    drain: bool,
    deadline: Instant,
    reply: Sender<StopSummary>,
    summary: StopSummary,
}

struct Coordinator<T> {
    config: RuntimeConfig,
    stats: Arc<Stats>,
    commands: Receiver<Command<T>>,
    done_rx: Receiver<Finished<T>>,
    done_tx: Sender<Finished<T>>,
    work_tx: Option<Sender<WorkItem<T>>>,
    work_rx: Receiver<WorkItem<T>>,
    queue: VecDeque<(Ticket, Task<T>)>,
    active: HashMap<u64, Active<T>>,
    idle_workers: usize,
    stopping: Option<Stopping>,
}

impl<T: Send + 'static> Coordinator<T> {
    fn run(mut self) {
        for _ in 0..self.config.worker_count {
            self.spawn_worker();
        }
        loop {
            self.dispatch();
            if self.try_finish_stop() {
                return;
            }

            let wake_at = self
                .active
                .values()
                .map(|a| a.deadline)
                .chain(self.stopping.as_ref().map(|s| s.deadline))
                .min();
            let timeout = wake_at
                .map(|t| t.saturating_duration_since(Instant::now()))
                .unwrap_or(Duration::from_secs(3600));

            select! {
                recv(self.commands) -> cmd => match cmd {
                    Ok(Command::Submit(ticket, task)) => self.queue.push_back((ticket, task)),
                    Ok(Command::Stop { drain, reply }) => self.begin_stop(drain, reply),
                    Err(_) => {
                        // Every Runtime handle is gone.
                        let (reply, _) = bounded(1);
                        if self.stopping.is_none() {
                            self.begin_stop(false, reply);
                        }
                        self.shutdown_now();
                        return;
                    }
                },
                recv(self.done_rx) -> done => {
                    if let Ok(done) = done {
                        self.finish(done);
                    }
                },
                default(timeout) => {}
            }
            self.expire_deadlines();
        }
    }

    fn spawn_worker(&mut self) {
        let work_rx = self.work_rx.clone();
        let done_tx = self.done_tx.clone();
        thread::Builder::new()
            .name("gateway-worker".into())
            .spawn(move || worker_loop(work_rx, done_tx))
            .expect("spawn worker thread");
        self.idle_workers += 1;
    }

    fn dispatch(&mut self) {
        let accepting_queue = self.stopping.as_ref().is_none_or(|s| s.drain);
        while accepting_queue && self.idle_workers > 0 {
            let Some((ticket, task)) = self.queue.pop_front() else {
                break;
            };
            self.stats.queued.fetch_sub(1, Ordering::SeqCst);
            let Task {
                pre_hook,
                body,
                post_hook,
                ..
            } = task;

            ticket.advance(TicketStatus::PreHook);
            if let Some(pre) = pre_hook {
                if let Err(err) = run_hook(pre) {
                    if let Some(post) = post_hook {
                        let reason = err.clone();
                        let _ = run_hook(move || post(Outcome::NotStarted(reason)));
                    }
                    ticket.advance(TicketStatus::Failed(err));
                    continue;
                }
            }

            let cancel = CancelToken::new();
            ticket.advance(TicketStatus::Running);
            let running = self.stats.running.fetch_add(1, Ordering::SeqCst) + 1;
            self.stats.peak_running.fetch_max(running, Ordering::SeqCst);
            self.active.insert(
                ticket.id(),
                Active {
                    ticket: ticket.clone(),
                    cancel: cancel.clone(),
                    deadline: Instant::now() + ticket.timeout(),
                    post_hook,
                },
            );
            self.idle_workers -= 1;
            let item = WorkItem {
                ticket_id: ticket.id(),
                body,
                cancel,
            };
            if let Some(tx) = &self.work_tx {
                let _ = tx.send(item);
            }
        }
    }

    fn finish(&mut self, done: Finished<T>) {
        self.idle_workers += 1;
        let Some(mut active) = self.active.remove(&done.ticket_id) else {
            return;
        };
        self.stats.running.fetch_sub(1, Ordering::SeqCst);
        active.ticket.advance(TicketStatus::PostHook);
        let (outcome, terminal) = match done.result {
            Ok(value) => (Outcome::Completed(value), TicketStatus::Done),
            Err(err) => (Outcome::Failed(err.clone()), TicketStatus::Failed(err)),
        };
        let terminal = match active.post_hook.take() {
            Some(post) => match run_hook(move || post(outcome)) {
                Ok(()) => terminal,
                Err(err) => TicketStatus::Failed(err),
            },
            None => terminal,
        };
        active.ticket.advance(terminal);
    }

    fn expire_deadlines(&mut self) {
        let now = Instant::now();
        let expired: Vec<u64> = self
            .active
            .iter()
            .filter(|(_, a)| a.deadline <= now)
            .map(|(id, _)| *id)
            .collect();
        for id in expired {
            self.abandon(id, Outcome::TimedOut, TicketStatus::TimedOut);
        }
    }

    fn abandon(&mut self, id: u64, outcome: Outcome<T>, terminal: TicketStatus) -> bool {
        let Some(active) = self.active.get(&id) else {
            return false;
        };
        active.cancel.cancel();
        if !active.cancel.claim(SLOT_ABANDONED) {
            // The worker finished first; its result is already in flight.
            return false;
        }
        let mut active = self.active.remove(&id).expect("present");
        self.stats.running.fetch_sub(1, Ordering::SeqCst);
        tracing::warn!(
            provider = active.ticket.provider_key(),
            ticket = id,
            "abandoning running task"
        );
        active.ticket.advance(TicketStatus::PostHook);
        let terminal = match active.post_hook.take() {
            Some(post) => match run_hook(move || post(outcome)) {
                Ok(()) => terminal,
                Err(err) => TicketStatus::Failed(err),
            },
            None => terminal,
        };
        active.ticket.advance(terminal);
        // The abandoned thread exits on its own once the body returns.
        if self.work_tx.is_some() {
            self.spawn_worker();
        }
        true
    }

    fn fail_queued(&mut self) -> usize {
        let mut dropped = 0;
        while let Some((ticket, task)) = self.queue.pop_front() {
            self.stats.queued.fetch_sub(1, Ordering::SeqCst);
            ticket.advance(TicketStatus::PostHook);
            if let Some(post) = task.post_hook {
                let _ = run_hook(move || post(Outcome::NotStarted("shutdown".into())));
            }
            ticket.advance(TicketStatus::Failed("shutdown".into()));
            dropped += 1;
        }
        dropped
    }

    fn begin_stop(&mut self, drain: bool, reply: Sender<StopSummary>) {
        let mut summary = StopSummary::default();
        if !drain {
            summary.dropped_queued = self.fail_queued();
        }
        self.stopping = Some(Stopping {
            drain,
            deadline: Instant::now() + self.config.shutdown_grace,
            reply,
            summary,
        });
    }

    fn try_finish_stop(&mut self) -> bool {
        let Some(stopping) = &self.stopping else {
            return false;
        };
        let idle = self.queue.is_empty() && self.active.is_empty();
        if !idle && Instant::now() < stopping.deadline {
            return false;
        }
        self.shutdown_now();
        true
    }

    fn shutdown_now(&mut self) {
        let dropped = self.fail_queued();
        let ids: Vec<u64> = self.active.keys().copied().collect();
        // Stop spawning replacements before abandoning.
        self.work_tx = None;
        let mut abandoned = 0;
        for id in ids {
            let terminal = TicketStatus::Failed("shutdown".into());
            if self.abandon(id, Outcome::Failed("shutdown".into()), terminal) {
                abandoned += 1;
            }
        }
        if let Some(mut stopping) = self.stopping.take() {
            stopping.summary.dropped_queued += dropped;
            stopping.summary.abandoned_running += abandoned;
            let _ = stopping.reply.send(stopping.summary);
        }
    }
}

fn worker_loop<T>(work_rx: Receiver<WorkItem<T>>, done_tx: Sender<Finished<T>>) {
    for item in work_rx.iter() {
        let cancel = item.cancel.clone();
        let result = catch_unwind(AssertUnwindSafe(|| (item.body)(&cancel)))
            .unwrap_or_else(|panic| Err(panic_message(&panic)));
        if !cancel.claim(SLOT_FINISHED) {
            // Abandoned after a deadline; a replacement worker took our place.
            return;
        }
        if done_tx
            .send(Finished {
                ticket_id: item.ticket_id,
                result,
            })
            .is_err()
        {
            return;
        }
    }
}

fn run_hook<R>(hook: impl FnOnce() -> Result<R, String>) -> Result<R, String> {
    catch_unwind(AssertUnwindSafe(hook)).unwrap_or_else(|panic| Err(panic_message(&panic)))
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn rt(workers: usize) -> Runtime<Vec<u8>> {
        Runtime::start(
            RuntimeConfig::default()
                .with_workers(workers)
                .with_timeout(Duration::from_secs(5))
                .with_shutdown_grace(Duration::from_secs(2)),
        )
        .unwrap()
    }

    #[test]
    fn body_output_reaches_post_hook() {
        let runtime = rt(1);
        let (tx, rx) = unbounded();
        let ticket = runtime
            .submit(
                Task::new("p", RequestId(1), |_| Ok(b"ok".to_vec())).post_hook(move |outcome| {
                    if let Outcome::Completed(bytes) = outcome {
                        tx.send(bytes).unwrap();
                    }
                    Ok(())
                }),
            )
            .unwrap();
        assert_eq!(ticket.wait(Duration::from_secs(2)), TicketStatus::Done);
        assert_eq!(rx.recv().unwrap(), b"ok");
    }

    #[test]
    fn body_error_fails_ticket() {
        let runtime = rt(1);
        let ticket = runtime
            .submit(Task::new("p", RequestId(1), |_| Err("boom".into())))
            .unwrap();
        assert_eq!(
            ticket.wait(Duration::from_secs(2)),
            TicketStatus::Failed("boom".into())
        );
    }

    #[test]
    fn panicking_body_fails_ticket_and_worker_survives() {
        let runtime = rt(1);
        let t1 = runtime
            .submit(Task::new("p", RequestId(1), |_| panic!("kaboom")))
            .unwrap();
        assert!(matches!(t1.wait(Duration::from_secs(2)), TicketStatus::Failed(m) if m.contains("kaboom")));
        let t2 = runtime
            .submit(Task::new("p", RequestId(2), |_| Ok(vec![])))
            .unwrap();
        assert_eq!(t2.wait(Duration::from_secs(2)), TicketStatus::Done);
    }

    #[test]
    fn pre_hook_failure_skips_body() {
        let runtime = rt(1);
        let ran = Arc::new(AtomicBool::new(false));
        let ran2 = ran.clone();
        let ticket = runtime
            .submit(
                Task::new("p", RequestId(1), move |_| {
                    ran2.store(true, Ordering::SeqCst);
                    Ok(vec![])
                })
                .pre_hook(|| Err("refused".into())),
            )
            .unwrap();
        assert_eq!(
            ticket.wait(Duration::from_secs(2)),
            TicketStatus::Failed("refused".into())
        );
        assert!(!ran.load(Ordering::SeqCst));
    }

    #[test]
    fn ignoring_cancellation_times_out_and_worker_is_replaced() {
        let runtime = rt(1);
        let stuck = runtime
            .submit(
                Task::new("slow", RequestId(1), |_| {
                    thread::sleep(Duration::from_millis(400));
                    Ok(vec![])
                })
                .timeout(Duration::from_millis(50)),
            )
            .unwrap();
        assert_eq!(stuck.wait(Duration::from_secs(2)), TicketStatus::TimedOut);
        // The single worker is still stuck in the sleep; a replacement serves this.
        let next = runtime
            .submit(Task::new("fast", RequestId(2), |_| Ok(vec![])))
            .unwrap();
        assert_eq!(next.wait(Duration::from_millis(200)), TicketStatus::Done);
    }

    #[test]
    fn cooperative_body_sees_cancellation() {
        let runtime = rt(1);
        let saw = Arc::new(AtomicBool::new(false));
        let saw2 = saw.clone();
        let ticket = runtime
            .submit(
                Task::new("p", RequestId(1), move |cancel| {
                    if !cancel.sleep(Duration::from_secs(5)) {
                        saw2.store(true, Ordering::SeqCst);
                    }
                    Ok(vec![])
                })
                .timeout(Duration::from_millis(30)),
            )
            .unwrap();
        assert_eq!(ticket.wait(Duration::from_secs(2)), TicketStatus::TimedOut);
        thread::sleep(Duration::from_millis(50));
        assert!(saw.load(Ordering::SeqCst));
    }

    #[test]
    fn hooks_run_on_one_thread_and_never_overlap() {
        let runtime = rt(4);
        let in_hook = Arc::new(AtomicUsize::new(0));
        let overlap = Arc::new(AtomicBool::new(false));
        let threads = Arc::new(Mutex::new(std::collections::HashSet::new()));
        let mut tickets = Vec::new();
        for i in 0..20 {
            let (a, b, c) = (in_hook.clone(), overlap.clone(), threads.clone());
            let (a2, b2, c2) = (in_hook.clone(), overlap.clone(), threads.clone());
            let hook = move |a: &AtomicUsize, b: &AtomicBool, c: &Mutex<std::collections::HashSet<thread::ThreadId>>| {
                if a.fetch_add(1, Ordering::SeqCst) != 0 {
                    b.store(true, Ordering::SeqCst);
                }
                c.lock().insert(thread::current().id());
                thread::sleep(Duration::from_millis(1));
                a.fetch_sub(1, Ordering::SeqCst);
            };
            let task = Task::new("p", RequestId(i), |_| Ok(vec![]))
                .pre_hook(move || {
                    hook(&a, &b, &c);
                    Ok(())
                })
                .post_hook(move |_| {
                    hook(&a2, &b2, &c2);
                    Ok(())
                });
            tickets.push(runtime.submit(task).unwrap());
        }
        for t in &tickets {
            assert_eq!(t.wait(Duration::from_secs(5)), TicketStatus::Done);
        }
        assert!(!overlap.load(Ordering::SeqCst));
        assert_eq!(threads.lock().len(), 1);
        assert!(!threads.lock().contains(&thread::current().id()));
    }

    #[test]
    fn concurrency_never_exceeds_worker_count() {
        let runtime = rt(2);
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let tickets: Vec<_> = (0..10)
            .map(|i| {
                let (current, peak) = (current.clone(), peak.clone());
                runtime
                    .submit(Task::new("p", RequestId(i), move |_| {
                        let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(now, Ordering::SeqCst);
                        thread::sleep(Duration::from_millis(20));
                        current.fetch_sub(1, Ordering::SeqCst);
                        Ok(vec![])
                    }))
                    .unwrap()
            })
            .collect();
        for t in &tickets {
            assert_eq!(t.wait(Duration::from_secs(5)), TicketStatus::Done);
        }
        assert_eq!(peak.load(Ordering::SeqCst), 2);
        assert_eq!(runtime.peak_running(), 2);
    }

    #[test]
    fn queue_full_is_reported() {
        let runtime: Runtime<Vec<u8>> = Runtime::start(RuntimeConfig {
            worker_count: 1,
            queue_capacity: 2,
            ..RuntimeConfig::default()
        })
        .unwrap();
        let (gate_tx, gate_rx) = bounded::<()>(0);
        let blocker = runtime
            .submit(Task::new("p", RequestId(0), move |_| {
                let _ = gate_rx.recv();
                Ok(vec![])
            }))
            .unwrap();
        while blocker.status() != TicketStatus::Running {
            thread::yield_now();
        }
        runtime.submit(Task::new("p", RequestId(1), |_| Ok(vec![]))).unwrap();
        runtime.submit(Task::new("p", RequestId(2), |_| Ok(vec![]))).unwrap();
        assert_eq!(
            runtime.submit(Task::new("p", RequestId(3), |_| Ok(vec![]))).unwrap_err(),
            RuntimeError::QueueFull
        );
        drop(gate_tx);
    }

    #[test]
    fn stop_without_drain_fails_queued() {
        let runtime = rt(1);
        let (gate_tx, gate_rx) = bounded::<()>(0);
        let running = runtime
            .submit(Task::new("p", RequestId(0), move |_| {
                let _ = gate_rx.recv();
                Ok(vec![])
            }))
            .unwrap();
        while running.status() != TicketStatus::Running {
            thread::yield_now();
        }
        let queued: Vec<_> = (1..=5)
            .map(|i| runtime.submit(Task::new("p", RequestId(i), |_| Ok(vec![]))).unwrap())
            .collect();
        let releaser = thread::spawn(move || {
            thread::sleep(Duration::from_millis(50));
            drop(gate_tx);
        });
        let summary = runtime.stop(false).unwrap();
        releaser.join().unwrap();
        assert_eq!(summary.dropped_queued, 5);
        for t in &queued {
            assert_eq!(t.status(), TicketStatus::Failed("shutdown".into()));
        }
        assert_eq!(running.status(), TicketStatus::Done);
    }

    #[test]
    fn stop_with_drain_finishes_everything() {
        let runtime = rt(2);
        let tickets: Vec<_> = (0..8)
            .map(|i| {
                runtime
                    .submit(Task::new("p", RequestId(i), |_| {
                        thread::sleep(Duration::from_millis(10));
                        Ok(vec![])
                    }))
                    .unwrap()
            })
            .collect();
        let summary = runtime.stop(true).unwrap();
        assert_eq!(summary, StopSummary::default());
        assert!(tickets.iter().all(|t| t.status() == TicketStatus::Done));
        assert_eq!(
            runtime.submit(Task::new("p", RequestId(9), |_| Ok(vec![]))).unwrap_err(),
            RuntimeError::Stopped
        );
        assert_eq!(runtime.stop(true).unwrap_err(), RuntimeError::NotRunning);
    }

    #[test]
    fn env_overrides_apply() {
        let cfg = RuntimeConfig::default().apply_overrides(|k| match k {
            ENV_WORKERS => Some("7".into()),
            ENV_TIMEOUT_MS => Some("1500".into()),
            _ => None,
        });
        assert_eq!(cfg.worker_count, 7);
        assert_eq!(cfg.default_timeout, Duration::from_millis(1500));

        let cfg = RuntimeConfig::default().apply_overrides(|k| match k {
            ENV_WORKERS => Some("0".into()),
            _ => Some("nope".into()),
        });
        assert_eq!(cfg, RuntimeConfig::default());
    }

    #[test]
    fn zero_workers_rejected() {
        assert!(matches!(
            Runtime::<()>::start(RuntimeConfig::default().with_workers(0)),
            Err(RuntimeError::InvalidConfig(_))
        ));
    }
}
