//! Simulated pulse oximeter pushing one frame per notification.
//!
//! Wire layout of a frame, 4 bytes:
//!
//! | byte | field                  |
//! |------|------------------------|
//! | 0    | SpO2 percent, 0..=100  |
//! | 1    | pulse, beats/minute    |
//! | 2..4 | sequence number, BE    |

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, RecvTimeoutError, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::SourceError;
use crate::engine::{Engine, EngineError, ProviderBody, ProviderCall, ProviderError, ProviderOutput};
use crate::envelope::DataEnvelope;
use crate::MEDIA_OXIMETER_FRAME;

pub const FRAME_LEN: usize = 4;
/// Highest notification rate a stream profile may ask for.
pub const MAX_RATE_HZ: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OximeterFrame {
    pub spo2: u8,
    pub pulse_bpm: u8,
    pub seq: u16,
}

impl OximeterFrame {
    pub fn encode(&self) -> [u8; FRAME_LEN] {
        let [hi, lo] = self.seq.to_be_bytes();
        [self.spo2, self.pulse_bpm, hi, lo]
    }
}

pub fn decode_frame(payload: &[u8]) -> Result<OximeterFrame, SourceError> {
    let bytes: [u8; FRAME_LEN] = payload.try_into().map_err(|_| {
        SourceError::MalformedFrame(format!("expected {FRAME_LEN} bytes, got {}", payload.len()))
    })?;
    if bytes[0] > 100 {
        return Err(SourceError::MalformedFrame(format!(
            "spo2 {} exceeds 100",
            bytes[0]
        )));
    }
    Ok(OximeterFrame {
        spo2: bytes[0],
        pulse_bpm: bytes[1],
        seq: u16::from_be_bytes([bytes[2], bytes[3]]),
    })
}

/// Decodes a concatenation of frames, e.g. an uploaded batch.
pub fn decode_batch(payload: &[u8]) -> Result<Vec<OximeterFrame>, SourceError> {
    if !payload.len().is_multiple_of(FRAME_LEN) {
        return Err(SourceError::MalformedFrame(format!(
            "batch length {} is not a multiple of {FRAME_LEN}",
            payload.len()
        )));
    }
    payload.chunks_exact(FRAME_LEN).map(decode_frame).collect()
}

/// One reading without its sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub spo2: u8,
    pub pulse_bpm: u8,
}

fn default_pulse() -> u8 {
    72
}

fn default_margin() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Waveform {
    /// The same reading forever.
    Constant { spo2: u8, pulse_bpm: u8 },
    /// The listed readings once, then the stream stops.
    Scripted { frames: Vec<Sample> },
    /// `lead` baseline readings, `dip_len` readings at `baseline - dip_depth`,
    /// `tail` baseline readings, then the stream stops.
    HypopneaEpisode {
        baseline: u8,
        dip_depth: u8,
        dip_len: u32,
        #[serde(default = "default_pulse")]
        pulse_bpm: u8,
        #[serde(default = "default_margin")]
        lead: u32,
        #[serde(default = "default_margin")]
        tail: u32,
    },
}

impl Waveform {
    pub fn hypopnea(baseline: u8, dip_depth: u8, dip_len: u32) -> Self {
        Waveform::HypopneaEpisode {
            baseline,
            dip_depth,
            dip_len,
            pulse_bpm: default_pulse(),
            lead: default_margin(),
            tail: default_margin(),
        }
    }

    /// Number of readings, or `None` for an endless waveform.
    pub fn reading_count(&self) -> Option<u64> {
        match self {
            Waveform::Constant { .. } => None,
            Waveform::Scripted { frames } => Some(frames.len() as u64),
            Waveform::HypopneaEpisode {
                dip_len, lead, tail, ..
            } => Some(u64::from(*lead) + u64::from(*dip_len) + u64::from(*tail)),
        }
    }

    pub fn sample(&self, index: u64) -> Option<Sample> {
        if self.reading_count().is_some_and(|n| index >= n) {
            return None;
        }
        Some(match self {
            Waveform::Constant { spo2, pulse_bpm } => Sample {
                spo2: *spo2,
                pulse_bpm: *pulse_bpm,
            },
            Waveform::Scripted { frames } => frames[index as usize],
            Waveform::HypopneaEpisode {
                baseline,
                dip_depth,
                dip_len,
                pulse_bpm,
                lead,
                ..
            } => {
                let lead = u64::from(*lead);
                let in_dip = index >= lead && index < lead + u64::from(*dip_len);
                Sample {
                    spo2: if in_dip { baseline - dip_depth } else { *baseline },
                    pulse_bpm: *pulse_bpm,
                }
            }
        })
    }

    fn validate(&self) -> Result<(), SourceError> {
        let invalid = |msg: String| Err(SourceError::ProfileInvalid(msg));
        match self {
            Waveform::Constant { spo2, .. } if *spo2 > 100 => invalid(format!("spo2 {spo2} > 100")),
            Waveform::Scripted { frames } => match frames.iter().find(|s| s.spo2 > 100) {
                Some(s) => invalid(format!("scripted spo2 {} > 100", s.spo2)),
                None => Ok(()),
            },
            Waveform::HypopneaEpisode {
                baseline,
                dip_depth,
                ..
            } => {
                if *baseline > 100 {
                    invalid(format!("baseline {baseline} > 100"))
                } else if dip_depth > baseline {
                    invalid(format!("dip depth {dip_depth} exceeds baseline {baseline}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

fn default_rate() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamProfile {
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    pub waveform: Waveform,
    /// Upper bound of a uniformly random delay added to each notification.
    #[serde(default)]
    pub jitter_ms: u64,
}

impl StreamProfile {
    pub fn new(waveform: Waveform, rate_hz: f64) -> Self {
        Self {
            rate_hz,
            waveform,
            jitter_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0 && self.rate_hz <= MAX_RATE_HZ) {
            return Err(SourceError::ProfileInvalid(format!(
                "rate_hz must be in (0, {MAX_RATE_HZ}], got {}",
                self.rate_hz
            )));
        }
        self.waveform.validate()
    }

    pub fn period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.rate_hz)
    }
}

/// Controls a running stream. Dropping the handle stops the stream.
pub struct StreamHandle {
    stop_tx: Mutex<Option<Sender<()>>>,
    thread: Mutex<Option<JoinHandle<()>>>,
    emitted: Arc<AtomicU64>,
    finished: Arc<AtomicBool>,
}

impl StreamHandle {
    /// Frames stored so far.
    pub fn emitted(&self) -> u64 {
        self.emitted.load(Ordering::SeqCst)
    }

    /// True once a finite waveform has run out or the stream was stopped.
    pub fn is_finished(&self) -> bool {
        self.finished.load(Ordering::SeqCst)
    }

    /// Waits for a finite waveform to run out. Returns `false` on timeout.
    pub fn wait_finished(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while !self.is_finished() {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(2));
        }
        true
    }

    /// Stops the stream and returns the number of frames stored.
    pub fn stop(&self) -> Result<u64, SourceError> {
        let tx = self.stop_tx.lock().take().ok_or(SourceError::AlreadyStopped)?;
        drop(tx);
        if let Some(handle) = self.thread.lock().take() {
            let _ = handle.join();
        }
        Ok(self.emitted())
    }
}

impl Drop for StreamHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

pub fn start_stream(
    engine: &Engine,
    profile: StreamProfile,
    target_store: &str,
) -> Result<StreamHandle, SourceError> {
    start_stream_as(engine, profile, target_store, DataEnvelope::EXTERNAL_PRODUCER)
}

/// Starts pushing frames into `target_store`. Every frame is stored under a
/// fresh request, since each notification is an independent external event.
pub fn start_stream_as(
    engine: &Engine,
    profile: StreamProfile,
    target_store: &str,
    producer_key: &str,
) -> Result<StreamHandle, SourceError> {
    profile.validate()?;
    engine.store_handle(target_store).map_err(|err| match err {
        EngineError::UnknownStore(key) => SourceError::UnknownStore(key),
        other => SourceError::Engine(other),
    })?;

    let (stop_tx, stop_rx) = bounded::<()>(0);
    let emitted = Arc::new(AtomicU64::new(0));
    let finished = Arc::new(AtomicBool::new(false));
    let engine = engine.clone();
    let store = target_store.to_string();
    let producer = producer_key.to_string();
    let (emitted2, finished2) = (emitted.clone(), finished.clone());

    let thread = thread::Builder::new()
        .name(format!("stream-{store}"))
        .spawn(move || {
            let period = profile.period();
            let start = Instant::now();
            let mut index: u64 = 0;
            while let Some(sample) = profile.waveform.sample(index) {
                let jitter = if profile.jitter_ms > 0 {
                    Duration::from_millis(fastrand::u64(0..=profile.jitter_ms))
                } else {
                    Duration::ZERO
                };
                let due = start + period.mul_f64(index as f64) + jitter;
                match stop_rx.recv_deadline(due) {
                    Err(RecvTimeoutError::Timeout) => {}
                    _ => break,
                }
                let frame = OximeterFrame {
                    spo2: sample.spo2,
                    pulse_bpm: sample.pulse_bpm,
                    seq: (index % (1 << 16)) as u16,
                };
                let ctx = engine.new_request(format!("stream:{store}"));
                if let Err(err) =
                    engine.store_as(&store, frame.encode().to_vec(), MEDIA_OXIMETER_FRAME, &ctx, &producer)
                {
                    tracing::warn!(%store, %err, "oximeter stream stopping");
                    break;
                }
                emitted2.fetch_add(1, Ordering::SeqCst);
                index += 1;
            }
            finished2.store(true, Ordering::SeqCst);
        })
        .expect("spawn stream thread");

    Ok(StreamHandle {
        stop_tx: Mutex::new(Some(stop_tx)),
        thread: Mutex::new(Some(thread)),
        emitted,
        finished,
    })
}

pub fn stop_stream(handle: &StreamHandle) -> Result<u64, SourceError> {
    handle.stop()
}

/// Provider that subscribes to the simulated device when executed.
///
/// Running it starts a stream into the provider's output store; running it
/// again while that stream is live does nothing. The run itself stores no
/// envelope.
pub struct OximeterProvider {
    profile: StreamProfile,
    stream: Mutex<Option<StreamHandle>>,
}

impl OximeterProvider {
    pub fn new(profile: StreamProfile) -> Result<Self, SourceError> {
        profile.validate()?;
        Ok(Self {
            profile,
            stream: Mutex::new(None),
        })
    }

    /// Stops the live stream, returning the frames it stored.
    pub fn stop(&self) -> Option<u64> {
        self.stream.lock().take().and_then(|h| h.stop().ok())
    }

    pub fn emitted(&self) -> Option<u64> {
        self.stream.lock().as_ref().map(StreamHandle::emitted)
    }
}

impl ProviderBody for OximeterProvider {
    fn execute(&self, call: &ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError> {
        let mut stream = self.stream.lock();
        if stream.as_ref().is_some_and(|h| !h.is_finished()) {
            return Ok(None);
        }
        let output_store = call.engine.provider_descriptor(call.provider_key)?.output_store;
        *stream = Some(start_stream_as(
            call.engine,
            self.profile.clone(),
            &output_store,
            call.provider_key,
        )?);
        Ok(None)
    }
}
