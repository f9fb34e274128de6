//! Registration and coordination of stores, providers, triggers and choosers.

use std::collections::hash_map::RandomState;
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::hash::BuildHasher;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chooser::{ChooseError, Chooser, ChooserPolicy};
use crate::envelope::{DataEnvelope, DataId, ProviderInput, RequestContext, RequestId};
use crate::exec::{
    CancelToken, Outcome, Runtime, RuntimeConfig, RuntimeError, StopSummary, Task, Ticket,
};

/// Capacity used when a configuration does not name one.
pub const DEFAULT_STORE_CAPACITY: usize = 256;

const EVENT_LOG_LEN: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("key must not be empty")]
    EmptyKey,
    #[error("key {0:?} is already registered")]
    DuplicateKey(String),
    #[error("store capacity must be positive")]
    InvalidCapacity,
    #[error("unknown store {0:?}")]
    UnknownStore(String),
    #[error("unknown provider {0:?}")]
    UnknownProvider(String),
    #[error("unknown trigger {0}")]
    UnknownTrigger(TriggerId),
    #[error("data id {data_id} not found in store {store:?}")]
    NotFound { store: String, data_id: DataId },
    #[error("no provider outputs to store {0:?}")]
    NoProvider(String),
    #[error("all candidates for store {0:?} are busy or failed")]
    AllCandidatesUnavailable(String),
    #[error("provider {provider:?} outputs to {actual:?}, chooser is for {expected:?}")]
    OutputMismatch {
        provider: String,
        expected: String,
        actual: String,
    },
    #[error("chooser for store {0:?} has no candidates")]
    EmptyCandidates(String),
    #[error("pending queue of provider {0:?} is full")]
    PendingQueueFull(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

impl From<ChooseError> for EngineError {
    fn from(err: ChooseError) -> Self {
        match err {
            ChooseError::EmptyCandidates(store) => EngineError::EmptyCandidates(store),
            ChooseError::AllCandidatesUnavailable(store) => {
                EngineError::AllCandidatesUnavailable(store)
            }
            ChooseError::MissingState(provider) => EngineError::UnknownProvider(provider),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProviderState {
    Idle,
    Running,
    Failed,
}

impl fmt::Display for ProviderState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderStatus {
    pub state: ProviderState,
    pub last_error: Option<String>,
}

/// What a provider expects to be started with.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSpec {
    #[default]
    None,
    SingleEnvelope,
    EnvelopeBatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderDescriptor {
    pub key: String,
    pub output_store: String,
    pub input_spec: InputSpec,
    /// Overrides the runtime's default timeout.
    pub timeout: Option<Duration>,
}

impl ProviderDescriptor {
    pub fn new(key: impl Into<String>, output_store: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            output_store: output_store.into(),
            input_spec: InputSpec::None,
            timeout: None,
        }
    }

    pub fn with_input(mut self, input_spec: InputSpec) -> Self {
        self.input_spec = input_spec;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderOutput {
    pub payload: Vec<u8>,
    pub media_type: String,
}

impl ProviderOutput {
    pub fn new(payload: Vec<u8>, media_type: impl Into<String>) -> Self {
        Self {
            payload,
            media_type: media_type.into(),
        }
    }
}

pub type ProviderError = Box<dyn std::error::Error + Send + Sync>;

/// Everything a provider body gets to see while it runs.
pub struct ProviderCall<'a> {
    pub engine: &'a Engine,
    pub provider_key: &'a str,
    pub input: &'a ProviderInput,
    pub ctx: &'a RequestContext,
    pub cancel: &'a CancelToken,
}

/// The work a provider does. Returning `Ok(None)` stores nothing.
pub trait ProviderBody: Send + Sync + 'static {
    fn execute(&self, call: &ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError>;
}

impl<F> ProviderBody for F
where
    F: Fn(&ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError> + Send + Sync + 'static,
{
    fn execute(&self, call: &ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError> {
        self(call)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TriggerId(pub u64);

impl fmt::Display for TriggerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TriggerAction {
    StartProvider(String),
    /// Produce into a store, letting its chooser pick the provider.
    ProduceData(String),
    Notify(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerRegistration {
    pub id: TriggerId,
    pub store_key: String,
    pub action: TriggerAction,
    pub enabled: bool,
}

/// Delivered to [`Engine::subscribe`] receivers by `Notify` triggers.
#[derive(Debug, Clone)]
pub struct Notification {
    pub sink_id: String,
    pub trigger: TriggerId,
    pub store_key: String,
    pub envelope: Arc<DataEnvelope>,
    /// Engine-wide firing sequence number.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreEventKind {
    Stored,
    TriggerFired(TriggerId),
    DeliveryFailed { trigger: TriggerId, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreEvent {
    pub data_id: DataId,
    pub request_id: RequestId,
    pub kind: StoreEventKind,
}

struct StoreState {
    next_id: u64,
    records: VecDeque<Arc<DataEnvelope>>,
    triggers: Vec<TriggerRegistration>,
}

struct StoreInner {
    key: String,
    capacity: usize,
    state: Mutex<StoreState>,
    appended: Condvar,
    events: Mutex<VecDeque<StoreEvent>>,
}

impl StoreInner {
    fn log(&self, event: StoreEvent) {
        let mut events = self.events.lock();
        if events.len() == EVENT_LOG_LEN {
            events.pop_front();
        }
        events.push_back(event);
    }
}

/// Read-only view of a registered store.
#[derive(Clone)]
pub struct StoreHandle {
    inner: Arc<StoreInner>,
}

impl fmt::Debug for StoreHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StoreHandle")
            .field("key", &self.inner.key)
            .field("capacity", &self.inner.capacity)
            .field("len", &self.len())
            .finish()
    }
}

impl StoreHandle {
    pub fn key(&self) -> &str {
        &self.inner.key
    }

    pub fn capacity(&self) -> usize {
        self.inner.capacity
    }

    /// Number of retained envelopes.
    pub fn len(&self) -> usize {
        self.inner.state.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Highest data id ever assigned (0 for a fresh store).
    pub fn high_water(&self) -> u64 {
        self.inner.state.lock().next_id - 1
    }
}

#[derive(Default)]
struct ProviderBook {
    // Tickets between pre-hook and post-hook.
    running: usize,
    // Tickets submitted and not yet through their post-hook.
    inflight: usize,
    failed: bool,
    last_error: Option<String>,
    pending: VecDeque<(ProviderInput, RequestContext)>,
}

impl ProviderBook {
    fn status(&self) -> ProviderStatus {
        let state = if self.running > 0 {
            ProviderState::Running
        } else if self.failed {
            ProviderState::Failed
        } else {
            ProviderState::Idle
        };
        ProviderStatus {
            state,
            last_error: self.last_error.clone(),
        }
    }
}

struct ProviderEntry {
    descriptor: ProviderDescriptor,
    body: Arc<dyn ProviderBody>,
    book: Mutex<ProviderBook>,
}

type EngineRuntime = Runtime<Option<ProviderOutput>>;

struct EngineInner {
    epoch: Instant,
    salt: u64,
    request_counter: AtomicU64,
    trigger_counter: AtomicU64,
    notify_seq: AtomicU64,
    pending_depth: AtomicUsize,
    default_timeout: Mutex<Duration>,
    stores: RwLock<HashMap<String, Arc<StoreInner>>>,
    providers: RwLock<HashMap<String, Arc<ProviderEntry>>>,
    // Output store -> provider keys in registration order.
    producers: RwLock<HashMap<String, Vec<String>>>,
    choosers: Mutex<HashMap<String, Chooser>>,
    trigger_stores: RwLock<HashMap<TriggerId, String>>,
    fire_counts: RwLock<HashMap<TriggerId, Arc<AtomicU64>>>,
    sinks: Mutex<HashMap<String, Vec<Sender<Notification>>>>,
    runtime: RwLock<Option<Arc<EngineRuntime>>>,
}

/// The pipeline engine. Cloning yields another handle on the same engine.
#[derive(Clone)]
pub struct Engine {
    inner: Arc<EngineInner>,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("stores", &self.store_keys())
            .field("providers", &self.provider_keys())
            .field("running", &self.is_running())
            .finish()
    }
}

impl Engine {
    /// Creates an engine with no runtime. Call [`start_daemon`](Self::start_daemon)
    /// before running providers.
    pub fn new() -> Self {
        let defaults = RuntimeConfig::default();
        Self {
            inner: Arc::new(EngineInner {
                epoch: Instant::now(),
                salt: RandomState::new().hash_one(std::process::id()),
                request_counter: AtomicU64::new(0),
                trigger_counter: AtomicU64::new(0),
                notify_seq: AtomicU64::new(0),
                pending_depth: AtomicUsize::new(defaults.pending_queue_depth),
                default_timeout: Mutex::new(defaults.default_timeout),
                stores: RwLock::default(),
                providers: RwLock::default(),
                producers: RwLock::default(),
                choosers: Mutex::default(),
                trigger_stores: RwLock::default(),
                fire_counts: RwLock::default(),
                sinks: Mutex::default(),
                runtime: RwLock::new(None),
            }),
        }
    }

    /// Shorthand for `new` followed by `start_daemon`.
    pub fn with_runtime(config: RuntimeConfig) -> Result<Self, EngineError> {
        let engine = Self::new();
        engine.start_daemon(config)?;
        Ok(engine)
    }

    fn from_weak(weak: &Weak<EngineInner>) -> Option<Self> {
        weak.upgrade().map(|inner| Self { inner })
    }

    /// Mints a context for a new request chain.
    pub fn new_request(&self, origin: impl Into<String>) -> RequestContext {
        let n = self.inner.request_counter.fetch_add(1, Ordering::Relaxed) + 1;
        // XOR with a fixed salt is a bijection, so ids stay unique.
        RequestContext::with_id(RequestId(n ^ self.inner.salt), origin)
    }

    fn now_nanos(&self) -> u64 {
        self.inner.epoch.elapsed().as_nanos() as u64
    }

    // ----- runtime lifecycle -------------------------------------------------

    pub fn start_daemon(&self, config: RuntimeConfig) -> Result<(), EngineError> {
        let mut slot = self.inner.runtime.write();
        if slot.is_some() {
            return Err(RuntimeError::AlreadyRunning.into());
        }
        let runtime = Runtime::start(config.clone())?;
        self.inner
            .pending_depth
            .store(config.pending_queue_depth, Ordering::SeqCst);
        *self.inner.default_timeout.lock() = config.default_timeout;
        *slot = Some(Arc::new(runtime));
        Ok(())
    }

    /// Stops the runtime; see [`Runtime::stop`] for the drain semantics.
    pub fn stop_daemon(&self, drain: bool) -> Result<StopSummary, EngineError> {
        let runtime = self
            .inner
            .runtime
            .write()
            .take()
            .ok_or(RuntimeError::NotRunning)?;
        Ok(runtime.stop(drain)?)
    }

    pub fn is_running(&self) -> bool {
        self.inner.runtime.read().is_some()
    }

    fn runtime(&self) -> Result<Arc<EngineRuntime>, EngineError> {
        self.inner
            .runtime
            .read()
            .clone()
            .ok_or(EngineError::Runtime(RuntimeError::Stopped))
    }

    /// Peak number of concurrently running bodies on the current runtime.
    pub fn peak_running(&self) -> usize {
        self.inner
            .runtime
            .read()
            .as_ref()
            .map_or(0, |rt| rt.peak_running())
    }

    // ----- stores ------------------------------------------------------------

    pub fn register_store(
        &self,
        key: impl Into<String>,
        capacity: usize,
    ) -> Result<StoreHandle, EngineError> {
        let key = key.into();
        if key.is_empty() {
            return Err(EngineError::EmptyKey);
        }
        if capacity == 0 {
            return Err(EngineError::InvalidCapacity);
        }
        let mut stores = self.inner.stores.write();
        if stores.contains_key(&key) {
            return Err(EngineError::DuplicateKey(key));
        }
        let inner = Arc::new(StoreInner {
            key: key.clone(),
            capacity,
            state: Mutex::new(StoreState {
                next_id: 1,
                records: VecDeque::with_capacity(capacity.min(1024)),
                triggers: Vec::new(),
            }),
            appended: Condvar::new(),
            events: Mutex::new(VecDeque::new()),
        });
        stores.insert(key, inner.clone());
        Ok(StoreHandle { inner })
    }

    fn store_inner(&self, key: &str) -> Result<Arc<StoreInner>, EngineError> {
        self.inner
            .stores
            .read()
            .get(key)
            .cloned()
            .ok_or_else(|| EngineError::UnknownStore(key.to_string()))
    }

    pub fn store_handle(&self, key: &str) -> Result<StoreHandle, EngineError> {
        self.store_inner(key).map(|inner| StoreHandle { inner })
    }

    pub fn store_keys(&self) -> Vec<String> {
        let mut keys: Vec<_> = self.inner.stores.read().keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Appends an envelope produced outside any provider.
    pub fn store(
        &self,
        store_key: &str,
        payload: Vec<u8>,
        media_type: &str,
        ctx: &RequestContext,
    ) -> Result<DataId, EngineError> {
        self.store_as(
            store_key,
            payload,
            media_type,
            ctx,
            DataEnvelope::EXTERNAL_PRODUCER,
        )
    }

    /// Appends an envelope and fires every enabled trigger of the store once,
    /// in registration order, after the store lock is released.
    pub fn store_as(
        &self,
        store_key: &str,
        payload: Vec<u8>,
        media_type: &str,
        ctx: &RequestContext,
        producer_key: &str,
    ) -> Result<DataId, EngineError> {
        let store = self.store_inner(store_key)?;
        let (envelope, triggers) = {
            let mut state = store.state.lock();
            let data_id = DataId(state.next_id);
            state.next_id += 1;
            let envelope = Arc::new(DataEnvelope {
                data_id,
                request_id: ctx.request_id,
                created_at: self.now_nanos(),
                payload,
                media_type: media_type.to_string(),
                producer_key: producer_key.to_string(),
            });
            state.records.push_back(envelope.clone());
            while state.records.len() > store.capacity {
                state.records.pop_front();
            }
            let triggers: Vec<_> = state
                .triggers
                .iter()
                .filter(|t| t.enabled)
                .cloned()
                .collect();
            store.appended.notify_all();
            (envelope, triggers)
        };
        store.log(StoreEvent {
            data_id: envelope.data_id,
            request_id: envelope.request_id,
            kind: StoreEventKind::Stored,
        });
        for trigger in &triggers {
            self.fire(&store, trigger, &envelope, ctx);
        }
        Ok(envelope.data_id)
    }

    pub fn retrieve(&self, store_key: &str, data_id: DataId) -> Result<Arc<DataEnvelope>, EngineError> {
        let store = self.store_inner(store_key)?;
        let state = store.state.lock();
        let not_found = || EngineError::NotFound {
            store: store_key.to_string(),
            data_id,
        };
        // Records hold consecutive ids, so the position is an offset.
        let first = state.records.front().ok_or_else(not_found)?.data_id.0;
        let offset = data_id.0.checked_sub(first).ok_or_else(not_found)?;
        state
            .records
            .get(offset as usize)
            .filter(|env| env.data_id == data_id)
            .cloned()
            .ok_or_else(not_found)
    }

    /// Up to `n` newest envelopes, oldest first.
    pub fn retrieve_latest(
        &self,
        store_key: &str,
        n: usize,
    ) -> Result<Vec<Arc<DataEnvelope>>, EngineError> {
        let store = self.store_inner(store_key)?;
        let state = store.state.lock();
        let skip = state.records.len().saturating_sub(n);
        Ok(state.records.iter().skip(skip).cloned().collect())
    }

    /// Blocks until an envelope carrying `request_id` is retained in the store.
    pub fn wait_for_request(
        &self,
        store_key: &str,
        request_id: RequestId,
        timeout: Duration,
    ) -> Result<Option<Arc<DataEnvelope>>, EngineError> {
        self.wait_until(store_key, timeout, |records| {
            records.iter().rev().find(|e| e.request_id == request_id).cloned()
        })
    }

    /// Blocks until `probe` returns `Some` for the store's retained records,
    /// re-checking after every append.
    pub fn wait_until<R>(
        &self,
        store_key: &str,
        timeout: Duration,
        mut probe: impl FnMut(&VecDeque<Arc<DataEnvelope>>) -> Option<R>,
    ) -> Result<Option<R>, EngineError> {
        let store = self.store_inner(store_key)?;
        let deadline = Instant::now() + timeout;
        let mut state = store.state.lock();
        loop {
            if let Some(found) = probe(&state.records) {
                return Ok(Some(found));
            }
            if store.appended.wait_until(&mut state, deadline).timed_out() {
                return Ok(probe(&state.records));
            }
        }
    }

    /// Most recent diagnostic events of a store, oldest first.
    pub fn store_events(&self, store_key: &str) -> Result<Vec<StoreEvent>, EngineError> {
        Ok(self.store_inner(store_key)?.events.lock().iter().cloned().collect())
    }

    // ----- providers ---------------------------------------------------------

    pub fn register_provider(
        &self,
        descriptor: ProviderDescriptor,
        body: impl ProviderBody,
    ) -> Result<(), EngineError> {
        self.register_provider_arc(descriptor, Arc::new(body))
    }

    pub fn register_provider_arc(
        &self,
        descriptor: ProviderDescriptor,
        body: Arc<dyn ProviderBody>,
    ) -> Result<(), EngineError> {
        if descriptor.key.is_empty() {
            return Err(EngineError::EmptyKey);
        }
        self.store_inner(&descriptor.output_store)?;
        let mut providers = self.inner.providers.write();
        if providers.contains_key(&descriptor.key) {
            return Err(EngineError::DuplicateKey(descriptor.key));
        }
        self.inner
            .producers
            .write()
            .entry(descriptor.output_store.clone())
            .or_default()
            .push(descriptor.key.clone());
        providers.insert(
            descriptor.key.clone(),
            Arc::new(ProviderEntry {
                descriptor,
                body,
                book: Mutex::default(),
            }),
        );
        Ok(())
    }

    fn provider(&self, key: &str) -> Result<Arc<ProviderEntry>, EngineError> {
        self.inner
            .providers
            .read()
            .get(key)
            .cloned()
            .ok_or_else(|| EngineError::UnknownProvider(key.to_string()))
    }

    pub fn provider_descriptor(&self, key: &str) -> Result<ProviderDescriptor, EngineError> {
        Ok(self.provider(key)?.descriptor.clone())
    }

    pub fn provider_keys(&self) -> Vec<String> {
        let mut keys: Vec<_> = self.inner.providers.read().keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Providers publishing to `store_key`, in registration order.
    pub fn providers_for(&self, store_key: &str) -> Vec<String> {
        self.inner
            .producers
            .read()
            .get(store_key)
            .cloned()
            .unwrap_or_default()
    }

    pub fn provider_state(&self, key: &str) -> Result<ProviderStatus, EngineError> {
        Ok(self.provider(key)?.book.lock().status())
    }

    /// Number of inputs waiting in a provider's trigger backlog.
    pub fn pending_len(&self, key: &str) -> Result<usize, EngineError> {
        Ok(self.provider(key)?.book.lock().pending.len())
    }

    /// Schedules the provider's body on the runtime.
    ///
    /// Runs are not serialized per provider: a direct submit may overlap an
    /// earlier run of the same provider. Only trigger deliveries wait.
    pub fn submit(
        &self,
        provider_key: &str,
        input: ProviderInput,
        ctx: Option<RequestContext>,
    ) -> Result<Ticket, EngineError> {
        let entry = self.provider(provider_key)?;
        let ctx = ctx.unwrap_or_else(|| self.new_request(format!("run:{provider_key}")));
        entry.book.lock().inflight += 1;
        self.launch(&entry, input, ctx)
    }

    /// Non-blocking; the output shows up in the provider's store under the
    /// returned request id.
    pub fn run_provider(
        &self,
        provider_key: &str,
        input: ProviderInput,
        ctx: Option<RequestContext>,
    ) -> Result<RequestId, EngineError> {
        self.submit(provider_key, input, ctx).map(|t| t.request_id())
    }

    /// Runs a provider that publishes to `store_key`, asking the store's
    /// chooser when there is more than one.
    pub fn produce_data(
        &self,
        store_key: &str,
        input: ProviderInput,
        ctx: Option<RequestContext>,
    ) -> Result<RequestId, EngineError> {
        self.produce_data_ticket(store_key, input, ctx)
            .map(|t| t.request_id())
    }

    pub fn produce_data_ticket(
        &self,
        store_key: &str,
        input: ProviderInput,
        ctx: Option<RequestContext>,
    ) -> Result<Ticket, EngineError> {
        let provider_key = self.select_provider(store_key)?;
        self.submit(&provider_key, input, ctx)
    }

    /// The provider `produce_data` would run right now.
    pub fn select_provider(&self, store_key: &str) -> Result<String, EngineError> {
        self.store_inner(store_key)?;
        let candidates = self.providers_for(store_key);
        match candidates.len() {
            0 => Err(EngineError::NoProvider(store_key.to_string())),
            1 => Ok(candidates[0].clone()),
            _ => {
                let mut choosers = self.inner.choosers.lock();
                let chooser = choosers.entry(store_key.to_string()).or_insert_with(|| {
                    let names: Vec<&str> = candidates.iter().map(String::as_str).collect();
                    Chooser::new(ChooserPolicy::priority(store_key, &names).with_fallback(true))
                        .expect("nonempty candidates")
                });
                let mut states = HashMap::new();
                for key in &chooser.policy().candidates {
                    states.insert(key.clone(), self.provider_state(key)?.state);
                }
                Ok(chooser.choose(&states)?)
            }
        }
    }

    pub fn set_chooser(&self, policy: ChooserPolicy) -> Result<(), EngineError> {
        self.store_inner(&policy.store_key)?;
        if policy.candidates.is_empty() {
            return Err(EngineError::EmptyCandidates(policy.store_key));
        }
        for key in &policy.candidates {
            let entry = self.provider(key)?;
            if entry.descriptor.output_store != policy.store_key {
                return Err(EngineError::OutputMismatch {
                    provider: key.clone(),
                    expected: policy.store_key.clone(),
                    actual: entry.descriptor.output_store.clone(),
                });
            }
        }
        let store_key = policy.store_key.clone();
        let chooser = Chooser::new(policy)?;
        self.inner.choosers.lock().insert(store_key, chooser);
        Ok(())
    }

    pub fn chooser_policy(&self, store_key: &str) -> Option<ChooserPolicy> {
        self.inner
            .choosers
            .lock()
            .get(store_key)
            .map(|c| c.policy().clone())
    }

    fn launch(
        &self,
        entry: &Arc<ProviderEntry>,
        input: ProviderInput,
        ctx: RequestContext,
    ) -> Result<Ticket, EngineError> {
        let runtime = match self.runtime() {
            Ok(rt) => rt,
            Err(err) => {
                entry.book.lock().inflight -= 1;
                return Err(err);
            }
        };
        let input = coerce_input(entry.descriptor.input_spec, input);
        let timeout = entry
            .descriptor
            .timeout
            .unwrap_or_else(|| *self.inner.default_timeout.lock());
        let weak = Arc::downgrade(&self.inner);

        let body = {
            let weak = weak.clone();
            let entry = entry.clone();
            let ctx = ctx.clone();
            move |cancel: &CancelToken| {
                let engine = Engine::from_weak(&weak).ok_or("engine dropped")?;
                let call = ProviderCall {
                    engine: &engine,
                    provider_key: &entry.descriptor.key,
                    input: &input,
                    ctx: &ctx,
                    cancel,
                };
                entry.body.execute(&call).map_err(|e| e.to_string())
            }
        };
        let pre = {
            let entry = entry.clone();
            move || {
                entry.book.lock().running += 1;
                Ok(())
            }
        };
        let post = {
            let entry = entry.clone();
            let ctx = ctx.clone();
            move |outcome| {
                let engine = Engine::from_weak(&weak);
                let result = engine
                    .as_ref()
                    .map_or(Ok(()), |engine| engine.finish_run(&entry, outcome, &ctx));
                result
            }
        };

        let task = Task::new(entry.descriptor.key.clone(), ctx.request_id, body)
            .timeout(timeout)
            .pre_hook(pre)
            .post_hook(post);
        runtime.submit(task).map_err(|err| {
            entry.book.lock().inflight -= 1;
            EngineError::from(err)
        })
    }

    // Post-hook of every provider run; executes on the coordination thread.
    fn finish_run(
        &self,
        entry: &Arc<ProviderEntry>,
        outcome: Outcome<Option<ProviderOutput>>,
        ctx: &RequestContext,
    ) -> Result<(), String> {
        let started = !matches!(outcome, Outcome::NotStarted(_));
        let mut store_error = None;
        let error = match outcome {
            Outcome::Completed(Some(output)) => {
                store_error = self
                    .store_as(
                        &entry.descriptor.output_store,
                        output.payload,
                        &output.media_type,
                        ctx,
                        &entry.descriptor.key,
                    )
                    .err()
                    .map(|e| e.to_string());
                store_error.clone()
            }
            Outcome::Completed(None) => None,
            Outcome::Failed(err) => Some(err),
            Outcome::TimedOut => Some("timed out".to_string()),
            Outcome::NotStarted(reason) => Some(reason),
        };

        let next = {
            let mut book = entry.book.lock();
            if started {
                book.running -= 1;
                book.failed = error.is_some();
                book.last_error = error.clone();
            }
            book.inflight -= 1;
            if book.inflight == 0 {
                book.pending.pop_front().inspect(|_| book.inflight += 1)
            } else {
                None
            }
        };
        if let Some((input, next_ctx)) = next {
            if let Err(err) = self.launch(entry, input, next_ctx) {
                tracing::warn!(provider = %entry.descriptor.key, %err, "dropping queued trigger input");
            }
        }
        // Body failures are already reflected in the ticket status.
        store_error.map_or(Ok(()), Err)
    }

    // ----- triggers ----------------------------------------------------------

    pub fn attach_trigger(
        &self,
        store_key: &str,
        action: TriggerAction,
    ) -> Result<TriggerId, EngineError> {
        let store = self.store_inner(store_key)?;
        match &action {
            TriggerAction::StartProvider(key) => {
                self.provider(key)?;
            }
            TriggerAction::ProduceData(target) => {
                self.store_inner(target)?;
            }
            TriggerAction::Notify(_) => {}
        }
        let id = TriggerId(self.inner.trigger_counter.fetch_add(1, Ordering::Relaxed) + 1);
        self.inner
            .trigger_stores
            .write()
            .insert(id, store_key.to_string());
        self.inner
            .fire_counts
            .write()
            .insert(id, Arc::new(AtomicU64::new(0)));
        store.state.lock().triggers.push(TriggerRegistration {
            id,
            store_key: store_key.to_string(),
            action,
            enabled: true,
        });
        Ok(id)
    }

    pub fn set_trigger_enabled(&self, id: TriggerId, enabled: bool) -> Result<(), EngineError> {
        let store_key = self
            .inner
            .trigger_stores
            .read()
            .get(&id)
            .cloned()
            .ok_or(EngineError::UnknownTrigger(id))?;
        let store = self.store_inner(&store_key)?;
        let mut state = store.state.lock();
        let reg = state
            .triggers
            .iter_mut()
            .find(|t| t.id == id)
            .ok_or(EngineError::UnknownTrigger(id))?;
        reg.enabled = enabled;
        Ok(())
    }

    pub fn triggers(&self, store_key: &str) -> Result<Vec<TriggerRegistration>, EngineError> {
        Ok(self.store_inner(store_key)?.state.lock().triggers.clone())
    }

    /// How many times a registration has fired.
    pub fn trigger_fire_count(&self, id: TriggerId) -> Result<u64, EngineError> {
        self.inner
            .fire_counts
            .read()
            .get(&id)
            .map(|c| c.load(Ordering::SeqCst))
            .ok_or(EngineError::UnknownTrigger(id))
    }

    /// Receiver for `Notify(sink_id)` trigger firings.
    pub fn subscribe(&self, sink_id: &str) -> Receiver<Notification> {
        let (tx, rx) = unbounded();
        self.inner
            .sinks
            .lock()
            .entry(sink_id.to_string())
            .or_default()
            .push(tx);
        rx
    }

    fn fire(
        &self,
        store: &StoreInner,
        trigger: &TriggerRegistration,
        envelope: &Arc<DataEnvelope>,
        ctx: &RequestContext,
    ) {
        if let Some(count) = self.inner.fire_counts.read().get(&trigger.id) {
            count.fetch_add(1, Ordering::SeqCst);
        }
        let chained = RequestContext {
            request_id: envelope.request_id,
            origin: format!("trigger:{}", store.key),
            deadline: ctx.deadline,
        };
        let result = match &trigger.action {
            TriggerAction::StartProvider(key) => {
                self.deliver(key, ProviderInput::Single(envelope.clone()), chained)
            }
            TriggerAction::ProduceData(target) => self
                .produce_data_ticket(target, ProviderInput::Single(envelope.clone()), Some(chained))
                .map(|_| ()),
            TriggerAction::Notify(sink_id) => {
                let notification = Notification {
                    sink_id: sink_id.clone(),
                    trigger: trigger.id,
                    store_key: store.key.clone(),
                    envelope: envelope.clone(),
                    seq: self.inner.notify_seq.fetch_add(1, Ordering::SeqCst),
                };
                if let Some(subscribers) = self.inner.sinks.lock().get_mut(sink_id) {
                    subscribers.retain(|tx| tx.send(notification.clone()).is_ok());
                }
                Ok(())
            }
        };
        let kind = match result {
            Ok(()) => StoreEventKind::TriggerFired(trigger.id),
            Err(err) => {
                tracing::warn!(store = %store.key, trigger = %trigger.id, %err, "trigger delivery failed");
                StoreEventKind::DeliveryFailed {
                    trigger: trigger.id,
                    reason: err.to_string(),
                }
            }
        };
        store.log(StoreEvent {
            data_id: envelope.data_id,
            request_id: envelope.request_id,
            kind,
        });
    }

    // Trigger path: a busy provider gets the input queued instead of a
    // concurrent run.
    fn deliver(
        &self,
        provider_key: &str,
        input: ProviderInput,
        ctx: RequestContext,
    ) -> Result<(), EngineError> {
        let entry = self.provider(provider_key)?;
        {
            let mut book = entry.book.lock();
            if book.inflight > 0 {
                if book.pending.len() >= self.inner.pending_depth.load(Ordering::SeqCst) {
                    return Err(EngineError::PendingQueueFull(provider_key.to_string()));
                }
                book.pending.push_back((input, ctx));
                return Ok(());
            }
            book.inflight += 1;
        }
        self.launch(&entry, input, ctx).map(|_| ())
    }
}

fn coerce_input(spec: InputSpec, input: ProviderInput) -> ProviderInput {
    match (spec, input) {
        (InputSpec::None, _) => ProviderInput::None,
        (InputSpec::EnvelopeBatch, ProviderInput::Single(env)) => ProviderInput::Batch(vec![env]),
        (InputSpec::SingleEnvelope, ProviderInput::Batch(mut batch)) if batch.len() == 1 => {
            ProviderInput::Single(batch.remove(0))
        }
        (_, input) => input,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::TicketStatus;
    use std::thread;

    const WAIT: Duration = Duration::from_secs(5);

    fn engine() -> Engine {
        Engine::with_runtime(RuntimeConfig::default().with_workers(2)).unwrap()
    }

    fn echo(call: &ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError> {
        Ok(Some(ProviderOutput::new(
            call.input.concat_payloads(),
            call.input.media_type().unwrap_or("application/octet-stream"),
        )))
    }

    #[test]
    fn fresh_store_is_empty() {
        let e = Engine::new();
        let h = e.register_store("oximeter-raw", 1024).unwrap();
        assert_eq!(h.len(), 0);
        assert_eq!(h.high_water(), 0);
        assert!(e.retrieve_latest("oximeter-raw", 5).unwrap().is_empty());
    }

    #[test]
    fn duplicate_store_rejected() {
        let e = Engine::new();
        e.register_store("oximeter-raw", 8).unwrap();
        assert_eq!(
            e.register_store("oximeter-raw", 8).unwrap_err(),
            EngineError::DuplicateKey("oximeter-raw".into())
        );
        assert_eq!(e.register_store("x", 0).unwrap_err(), EngineError::InvalidCapacity);
        assert_eq!(e.register_store("", 1).unwrap_err(), EngineError::EmptyKey);
    }

    #[test]
    fn ninth_store_evicts_first() {
        let e = Engine::new();
        e.register_store("s", 8).unwrap();
        let ctx = e.new_request("test");
        let ids: Vec<_> = (0..9u8)
            .map(|i| e.store("s", vec![i], "x", &ctx).unwrap())
            .collect();
        assert_eq!(ids.first(), Some(&DataId(1)));
        assert!(matches!(
            e.retrieve("s", ids[0]),
            Err(EngineError::NotFound { .. })
        ));
        for id in &ids[1..] {
            assert_eq!(e.retrieve("s", *id).unwrap().data_id, *id);
        }
    }

    #[test]
    fn retrieve_latest_examples() {
        let e = Engine::new();
        e.register_store("s", 8).unwrap();
        let ctx = e.new_request("test");
        for i in 0..3u8 {
            e.store("s", vec![i], "x", &ctx).unwrap();
        }
        let latest = e.retrieve_latest("s", 2).unwrap();
        assert_eq!(
            latest.iter().map(|x| x.data_id.0).collect::<Vec<_>>(),
            [2, 3]
        );
        for i in 3..10u8 {
            e.store("s", vec![i], "x", &ctx).unwrap();
        }
        let latest = e.retrieve_latest("s", 20).unwrap();
        assert_eq!(
            latest.iter().map(|x| x.data_id.0).collect::<Vec<_>>(),
            (3..=10).collect::<Vec<_>>()
        );
        assert!(matches!(
            e.retrieve_latest("nope", 1),
            Err(EngineError::UnknownStore(_))
        ));
    }

    #[test]
    fn round_trip_preserves_payload_and_request() {
        let e = Engine::new();
        e.register_store("s", 4).unwrap();
        let ctx = e.new_request("test");
        let id = e.store("s", b"abc".to_vec(), "text/plain", &ctx).unwrap();
        let a = e.retrieve("s", id).unwrap();
        let b = e.retrieve("s", id).unwrap();
        assert_eq!(a.payload, b"abc");
        assert_eq!(a.request_id, ctx.request_id);
        assert_eq!(a.media_type, "text/plain");
        assert_eq!(a, b);
        assert!(matches!(
            e.retrieve("s", DataId(99)),
            Err(EngineError::NotFound { .. })
        ));
    }

    #[test]
    fn request_ids_are_distinct() {
        let e = Engine::new();
        let ids: std::collections::HashSet<_> =
            (0..1000).map(|_| e.new_request("t").request_id).collect();
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn provider_registration_errors() {
        let e = Engine::new();
        e.register_store("photo-raw", 4).unwrap();
        e.register_provider(ProviderDescriptor::new("cam", "photo-raw"), echo)
            .unwrap();
        assert_eq!(e.provider_state("cam").unwrap().state, ProviderState::Idle);
        assert_eq!(
            e.register_provider(ProviderDescriptor::new("cam", "photo-raw"), echo)
                .unwrap_err(),
            EngineError::DuplicateKey("cam".into())
        );
        assert_eq!(
            e.register_provider(ProviderDescriptor::new("x", "missing"), echo)
                .unwrap_err(),
            EngineError::UnknownStore("missing".into())
        );
        assert!(matches!(
            e.attach_trigger("photo-raw", TriggerAction::StartProvider("nope".into())),
            Err(EngineError::UnknownProvider(_))
        ));
        assert!(matches!(
            e.attach_trigger("nope", TriggerAction::Notify("ui".into())),
            Err(EngineError::UnknownStore(_))
        ));
    }

    #[test]
    fn trigger_runs_provider_with_stored_envelope() {
        let e = engine();
        e.register_store("photo-raw", 4).unwrap();
        e.register_store("bitmap", 4).unwrap();
        e.register_provider(
            ProviderDescriptor::new("bitmap", "bitmap").with_input(InputSpec::SingleEnvelope),
            echo,
        )
        .unwrap();
        let t = e
            .attach_trigger("photo-raw", TriggerAction::StartProvider("bitmap".into()))
            .unwrap();
        let ctx = e.new_request("test");
        e.store("photo-raw", b"img".to_vec(), "image/x", &ctx).unwrap();
        let out = e.wait_for_request("bitmap", ctx.request_id, WAIT).unwrap().unwrap();
        assert_eq!(out.payload, b"img");
        assert_eq!(out.producer_key, "bitmap");
        assert_eq!(e.trigger_fire_count(t).unwrap(), 1);
    }

    #[test]
    fn triggers_fire_in_registration_order_and_respect_enabled() {
        let e = Engine::new();
        e.register_store("s", 4).unwrap();
        let t1 = e.attach_trigger("s", TriggerAction::Notify("a".into())).unwrap();
        let t2 = e.attach_trigger("s", TriggerAction::Notify("a".into())).unwrap();
        let t3 = e.attach_trigger("s", TriggerAction::Notify("a".into())).unwrap();
        e.set_trigger_enabled(t3, false).unwrap();
        let rx = e.subscribe("a");
        let ctx = e.new_request("t");
        e.store("s", vec![1], "x", &ctx).unwrap();
        let fired: Vec<_> = rx.try_iter().map(|n| n.trigger).collect();
        assert_eq!(fired, [t1, t2]);
        assert_eq!(e.trigger_fire_count(t3).unwrap(), 0);
    }

    #[test]
    fn run_provider_propagates_request_id() {
        let e = engine();
        e.register_store("photo-raw", 4).unwrap();
        e.register_provider(ProviderDescriptor::new("cam", "photo-raw"), |_: &ProviderCall<'_>| {
            Ok(Some(ProviderOutput::new(b"photo".to_vec(), "image/x")))
        })
        .unwrap();
        let r = e.run_provider("cam", ProviderInput::None, None).unwrap();
        let env = e.wait_for_request("photo-raw", r, WAIT).unwrap().unwrap();
        assert_eq!(env.payload, b"photo");

        let ctx = e.new_request("explicit");
        let r2 = e.run_provider("cam", ProviderInput::None, Some(ctx.clone())).unwrap();
        assert_eq!(r2, ctx.request_id);
        assert!(e.wait_for_request("photo-raw", r2, WAIT).unwrap().is_some());
        assert!(matches!(
            e.run_provider("nope", ProviderInput::None, None),
            Err(EngineError::UnknownProvider(_))
        ));
    }

    #[test]
    fn failing_body_marks_provider_failed() {
        let e = engine();
        e.register_store("out", 4).unwrap();
        e.register_provider(ProviderDescriptor::new("bad", "out"), |_: &ProviderCall<'_>| {
            Err("sensor unplugged".into())
        })
        .unwrap();
        let ticket = e.submit("bad", ProviderInput::None, None).unwrap();
        assert_eq!(
            ticket.wait(WAIT),
            TicketStatus::Failed("sensor unplugged".into())
        );
        let status = e.provider_state("bad").unwrap();
        assert_eq!(status.state, ProviderState::Failed);
        assert_eq!(status.last_error.as_deref(), Some("sensor unplugged"));
        assert!(e.store_handle("out").unwrap().is_empty());
    }

    #[test]
    fn timed_out_provider_is_failed_and_stores_nothing() {
        let e = engine();
        e.register_store("out", 4).unwrap();
        e.register_provider(
            ProviderDescriptor::new("slow", "out").with_timeout(Duration::from_millis(50)),
            |call: &ProviderCall<'_>| {
                call.cancel.sleep(Duration::from_secs(2));
                Ok(Some(ProviderOutput::new(vec![1], "x")))
            },
        )
        .unwrap();
        let ticket = e.submit("slow", ProviderInput::None, None).unwrap();
        assert_eq!(ticket.wait(WAIT), TicketStatus::TimedOut);
        assert_eq!(e.provider_state("slow").unwrap().state, ProviderState::Failed);
        thread::sleep(Duration::from_millis(50));
        assert!(e.store_handle("out").unwrap().is_empty());
    }

    #[test]
    fn busy_provider_queues_trigger_input() {
        let e = engine();
        e.register_store("in", 8).unwrap();
        e.register_store("out", 8).unwrap();
        let (gate_tx, gate_rx) = crossbeam_channel::unbounded::<()>();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        e.register_provider(
            ProviderDescriptor::new("p", "out").with_input(InputSpec::SingleEnvelope),
            move |call: &ProviderCall<'_>| {
                seen2.lock().push(call.input.concat_payloads());
                gate_rx.recv_timeout(WAIT).ok();
                echo(call)
            },
        )
        .unwrap();
        e.attach_trigger("in", TriggerAction::StartProvider("p".into()))
            .unwrap();
        let c1 = e.new_request("a");
        let c2 = e.new_request("b");
        e.store("in", b"first".to_vec(), "x", &c1).unwrap();
        while e.provider_state("p").unwrap().state != ProviderState::Running {
            thread::yield_now();
        }
        e.store("in", b"second".to_vec(), "x", &c2).unwrap();
        assert_eq!(e.pending_len("p").unwrap(), 1);
        assert_eq!(seen.lock().len(), 1);
        gate_tx.send(()).unwrap();
        gate_tx.send(()).unwrap();
        let second = e.wait_for_request("out", c2.request_id, WAIT).unwrap().unwrap();
        assert_eq!(second.payload, b"second");
        assert_eq!(*seen.lock(), [b"first".to_vec(), b"second".to_vec()]);
        let first = e.wait_for_request("out", c1.request_id, WAIT).unwrap().unwrap();
        assert!(first.data_id < second.data_id);
    }

    #[test]
    fn pending_overflow_is_logged() {
        let e = Engine::with_runtime(RuntimeConfig {
            worker_count: 1,
            pending_queue_depth: 1,
            ..RuntimeConfig::default()
        })
        .unwrap();
        e.register_store("in", 8).unwrap();
        e.register_store("out", 8).unwrap();
        let (gate_tx, gate_rx) = crossbeam_channel::unbounded::<()>();
        e.register_provider(
            ProviderDescriptor::new("p", "out"),
            move |_: &ProviderCall<'_>| {
                gate_rx.recv_timeout(WAIT).ok();
                Ok(None)
            },
        )
        .unwrap();
        let t = e
            .attach_trigger("in", TriggerAction::StartProvider("p".into()))
            .unwrap();
        let ctx = e.new_request("t");
        for i in 0..3u8 {
            e.store("in", vec![i], "x", &ctx).unwrap();
        }
        let failures: Vec<_> = e
            .store_events("in")
            .unwrap()
            .into_iter()
            .filter(|ev| matches!(ev.kind, StoreEventKind::DeliveryFailed { trigger, .. } if trigger == t))
            .collect();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].data_id, DataId(3));
        drop(gate_tx);
    }

    #[test]
    fn produce_data_uses_chooser() {
        let e = engine();
        e.register_store("detect-out", 8).unwrap();
        let (gate_tx, gate_rx) = crossbeam_channel::unbounded::<()>();
        e.register_provider(
            ProviderDescriptor::new("edgelens", "detect-out"),
            move |_: &ProviderCall<'_>| {
                gate_rx.recv_timeout(WAIT).ok();
                Ok(Some(ProviderOutput::new(b"edgelens".to_vec(), "x")))
            },
        )
        .unwrap();
        e.register_provider(ProviderDescriptor::new("aneka", "detect-out"), |_: &ProviderCall<'_>| {
            Ok(Some(ProviderOutput::new(b"aneka".to_vec(), "x")))
        })
        .unwrap();
        e.set_chooser(ChooserPolicy::priority("detect-out", &["edgelens", "aneka"]))
            .unwrap();
        assert_eq!(e.select_provider("detect-out").unwrap(), "edgelens");

        e.run_provider("edgelens", ProviderInput::None, None).unwrap();
        while e.provider_state("edgelens").unwrap().state != ProviderState::Running {
            thread::yield_now();
        }
        let r = e.produce_data("detect-out", ProviderInput::None, None).unwrap();
        let env = e.wait_for_request("detect-out", r, WAIT).unwrap().unwrap();
        assert_eq!(env.producer_key, "aneka");
        gate_tx.send(()).unwrap();
    }

    #[test]
    fn produce_data_errors() {
        let e = engine();
        e.register_store("empty", 4).unwrap();
        e.register_store("other", 4).unwrap();
        assert_eq!(
            e.produce_data("empty", ProviderInput::None, None).unwrap_err(),
            EngineError::NoProvider("empty".into())
        );
        assert_eq!(
            e.produce_data("nope", ProviderInput::None, None).unwrap_err(),
            EngineError::UnknownStore("nope".into())
        );
        e.register_provider(ProviderDescriptor::new("a", "empty"), echo).unwrap();
        e.register_provider(ProviderDescriptor::new("b", "other"), echo).unwrap();
        assert!(matches!(
            e.set_chooser(ChooserPolicy::priority("empty", &["a", "b"])),
            Err(EngineError::OutputMismatch { .. })
        ));
        assert!(matches!(
            e.set_chooser(ChooserPolicy::priority("empty", &["a", "zz"])),
            Err(EngineError::UnknownProvider(_))
        ));
    }

    #[test]
    fn round_robin_via_engine() {
        let e = Engine::new();
        e.register_store("s", 4).unwrap();
        e.register_provider(ProviderDescriptor::new("A", "s"), echo).unwrap();
        e.register_provider(ProviderDescriptor::new("B", "s"), echo).unwrap();
        e.set_chooser(ChooserPolicy::round_robin("s", &["A", "B"])).unwrap();
        let picks: Vec<_> = (0..4).map(|_| e.select_provider("s").unwrap()).collect();
        assert_eq!(picks, ["A", "B", "A", "B"]);
    }

    #[test]
    fn lifecycle_errors() {
        let e = engine();
        assert_eq!(
            e.start_daemon(RuntimeConfig::default()).unwrap_err(),
            EngineError::Runtime(RuntimeError::AlreadyRunning)
        );
        e.stop_daemon(true).unwrap();
        assert_eq!(
            e.stop_daemon(true).unwrap_err(),
            EngineError::Runtime(RuntimeError::NotRunning)
        );
        e.register_store("s", 1).unwrap();
        e.register_provider(ProviderDescriptor::new("p", "s"), echo).unwrap();
        assert_eq!(
            e.run_provider("p", ProviderInput::None, None).unwrap_err(),
            EngineError::Runtime(RuntimeError::Stopped)
        );
        // Restart works after a stop.
        e.start_daemon(RuntimeConfig::default()).unwrap();
        e.run_provider("p", ProviderInput::None, None).unwrap();
    }

    #[test]
    fn trigger_chain_shares_request_id() {
        let e = engine();
        for s in ["a", "b", "c"] {
            e.register_store(s, 8).unwrap();
        }
        e.register_provider(ProviderDescriptor::new("ab", "b").with_input(InputSpec::SingleEnvelope), echo)
            .unwrap();
        e.register_provider(ProviderDescriptor::new("bc", "c").with_input(InputSpec::SingleEnvelope), echo)
            .unwrap();
        e.attach_trigger("a", TriggerAction::StartProvider("ab".into())).unwrap();
        e.attach_trigger("b", TriggerAction::ProduceData("c".into())).unwrap();
        let ctx = e.new_request("t");
        e.store("a", b"x".to_vec(), "x", &ctx).unwrap();
        let c = e.wait_for_request("c", ctx.request_id, WAIT).unwrap().unwrap();
        assert_eq!(c.payload, b"x");
        assert_eq!(c.producer_key, "bc");
    }
}
