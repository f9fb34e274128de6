//! Self-hosted end-to-end runs of the two case-study pipelines.
//!
//! Every scenario starts its own mocks on OS-assigned ports, so nothing
//! outside the process is needed.

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use gateway_core::backends::aneka::TaskState;
use gateway_core::backends::{
    AnekaProvider, BackendEndpointConfig, BatchSource, EdgeLensProvider, FileStoreConfig,
    FogBusProvider, Transform,
};
use gateway_core::engine::ProviderDescriptor;
use gateway_core::sources::oximeter::{decode_frame, OximeterProvider, StreamProfile, Waveform};
use gateway_core::sources::{capture, BitmapProvider, CameraProvider, CapturedImage};
use gateway_core::{
    ChooserPolicy, DataEnvelope, Engine, EngineError, InputSpec, ProviderInput, ProviderState,
    RequestId, RuntimeConfig, TicketStatus, TriggerAction, MEDIA_PPM,
};
use serde::Serialize;
use thiserror::Error;

use crate::mock::{
    AnekaMaster, BlobServer, EdgeLensMaster, EdgeLensWorker, FogBusMaster, MockFiles, MockServer,
    RequestLog, WorkerBehavior,
};

pub const SCENARIOS: [&str; 4] = [
    "oximeter-fogbus",
    "camera-edgelens",
    "camera-aneka",
    "chooser-fallback",
];

/// Frames below the SpO2 threshold in the scripted oximeter episode.
pub const SCRIPTED_DIP_LEN: u32 = 5;

const WAIT: Duration = Duration::from_secs(8);
const POLL_INTERVAL: Duration = Duration::from_millis(20);
const IMAGE: (u32, u32, &str) = (160, 120, "gradient");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}; expected one of {SCENARIOS:?}")]
    UnknownScenario(String),
    #[error("scenario {scenario} failed at step {step:?}: {detail}")]
    ScenarioFailed {
        scenario: String,
        step: String,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepResult {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioReport {
    pub scenario_id: String,
    pub steps: Vec<StepResult>,
    #[serde(rename = "elapsed_ms", serialize_with = "ser_millis")]
    pub elapsed: Duration,
}

fn ser_millis<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u64(d.as_millis() as u64)
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.passed)
    }

    pub fn failed_step(&self) -> Option<&StepResult> {
        self.steps.iter().find(|s| !s.passed)
    }

    pub fn into_result(self) -> Result<Self, ScenarioError> {
        match self.failed_step() {
            Some(step) => Err(ScenarioError::ScenarioFailed {
                scenario: self.scenario_id.clone(),
                step: step.description.clone(),
                detail: step.detail.clone(),
            }),
            None => Ok(self),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "scenario {}: {} in {} ms\n",
            self.scenario_id,
            if self.passed() { "PASS" } else { "FAIL" },
            self.elapsed.as_millis()
        );
        for s in &self.steps {
            out.push_str(&format!(
                "  [{}] {}: {}\n",
                if s.passed { "ok" } else { "FAIL" },
                s.description,
                s.detail
            ));
        }
        out
    }
}

type StepOutcome<T> = Result<(T, String), String>;

struct Steps(Vec<StepResult>);

impl Steps {
    /// Records the step; `None` means it failed and the scenario stops.
    fn run<T>(&mut self, description: &str, f: impl FnOnce() -> StepOutcome<T>) -> Option<T> {
        let (value, passed, detail) = match f() {
            Ok((v, detail)) => (Some(v), true, detail),
            Err(detail) => (None, false, detail),
        };
        tracing::info!(step = description, passed, %detail, "scenario step");
        self.0.push(StepResult {
            description: description.to_string(),
            passed,
            detail,
        });
        value
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn run_scenario(id: &str) -> Result<ScenarioReport, ScenarioError> {
    let body: fn(&mut Steps) -> Option<()> = match id {
        "oximeter-fogbus" => oximeter_fogbus,
        "camera-edgelens" => camera_edgelens,
        "camera-aneka" => camera_aneka,
        "chooser-fallback" => chooser_fallback,
        other => return Err(ScenarioError::UnknownScenario(other.to_string())),
    };
    let started = Instant::now();
    let mut steps = Steps(Vec::new());
    let _ = body(&mut steps);
    Ok(ScenarioReport {
        scenario_id: id.to_string(),
        steps: steps.0,
        elapsed: started.elapsed(),
    })
}

fn engine_with_stores(stores: &[&str]) -> Result<Engine, String> {
    let engine = Engine::with_runtime(RuntimeConfig::default()).map_err(err)?;
    for s in stores {
        engine.register_store(*s, 64).map_err(err)?;
    }
    Ok(engine)
}

fn endpoint(url: &str) -> BackendEndpointConfig {
    BackendEndpointConfig::new(url)
        .with_polling(POLL_INTERVAL, 250)
        .with_connect_timeout(Duration::from_secs(1))
}

fn wait_for(engine: &Engine, store: &str, rid: RequestId) -> Result<Arc<DataEnvelope>, String> {
    engine
        .wait_for_request(store, rid, WAIT)
        .map_err(err)?
        .ok_or_else(|| format!("nothing reached {store} for request {rid} within {WAIT:?}"))
}

fn wait_state(engine: &Engine, key: &str, want: ProviderState) -> Result<(), String> {
    let deadline = Instant::now() + WAIT;
    loop {
        let state = engine.provider_state(key).map_err(err)?.state;
        if state == want {
            return Ok(());
        }
        if Instant::now() > deadline {
            return Err(format!("{key} stayed {state}, expected {want}"));
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// Complement of the pixel bytes, header untouched; computed without the
/// transform code.
fn complemented(image: &CapturedImage) -> Vec<u8> {
    let header = image.header_len();
    image
        .ppm
        .iter()
        .enumerate()
        .map(|(i, b)| if i < header { *b } else { 0xFF - *b })
        .collect()
}

fn check_request_ids(log: &RequestLog, rid: RequestId) -> Result<(), String> {
    let stray: Vec<_> = log
        .entries()
        .into_iter()
        .filter(|e| e.request_id.as_deref() != Some(rid.to_string().as_str()))
        .collect();
    ensure(stray.is_empty(), || {
        format!("{} mock requests did not carry request id {rid}: {stray:?}", stray.len())
    })
}

fn oximeter_fogbus(steps: &mut Steps) -> Option<()> {
    let fogbus = steps.run("start FogBus master mock", || {
        let m = MockServer::start("fogbus", 0, FogBusMaster::new(Transform::HypopneaCount)).map_err(err)?;
        let url = m.url();
        Ok((m, url))
    })?;
    let profile = StreamProfile::new(Waveform::hypopnea(97, 10, SCRIPTED_DIP_LEN), 100.0);
    let frames = profile.waveform.reading_count().expect("finite episode") as usize;

    let engine = steps.run("wire oximeter stream and FogBus analysis", || {
        let engine = engine_with_stores(&["oximeter-raw", "analysis"])?;
        let oximeter = OximeterProvider::new(profile.clone()).map_err(err)?;
        engine
            .register_provider(
                ProviderDescriptor::new("oximeter", "oximeter-raw").with_input(InputSpec::None),
                oximeter,
            )
            .map_err(err)?;
        let analyze = FogBusProvider::new(endpoint(&fogbus.url()))
            .map_err(err)?
            .with_batch(BatchSource {
                store: "oximeter-raw".into(),
                window: frames,
            });
        engine
            .register_provider(
                ProviderDescriptor::new("fogbus", "analysis").with_input(InputSpec::None),
                analyze,
            )
            .map_err(err)?;
        Ok((engine, "2 stores, 2 providers".into()))
    })?;

    let stored = steps.run("stream the scripted hypopnea episode", || {
        engine.run_provider("oximeter", ProviderInput::None, None).map_err(err)?;
        let batch = engine
            .wait_until("oximeter-raw", WAIT, |r| (r.len() >= frames).then(|| r.clone()))
            .map_err(err)?
            .ok_or_else(|| format!("fewer than {frames} frames arrived"))?;
        let decoded: Vec<_> = batch
            .iter()
            .map(|e| decode_frame(&e.payload))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let seqs: Vec<u16> = decoded.iter().map(|f| f.seq).collect();
        ensure(seqs == (0..frames as u16).collect::<Vec<_>>(), || {
            format!("sequence numbers {seqs:?}")
        })?;
        let dips = decoded.iter().filter(|f| f.spo2 < 92).count();
        Ok((dips, format!("{frames} frames, {dips} below 92%")))
    })?;

    let rid = steps.run("analyze the batch via FogBus", || {
        let rid = engine
            .produce_data("analysis", ProviderInput::None, None)
            .map_err(err)?;
        let result = wait_for(&engine, "analysis", rid)?;
        let expected = format!("HYPOPNEA:{SCRIPTED_DIP_LEN}");
        ensure(stored == SCRIPTED_DIP_LEN as usize, || {
            format!("stream stored {stored} dips, script has {SCRIPTED_DIP_LEN}")
        })?;
        ensure(result.payload == expected.as_bytes(), || {
            format!("got {:?}", String::from_utf8_lossy(&result.payload))
        })?;
        Ok((rid, expected))
    })?;

    steps.run("FogBus saw exactly one request", || {
        let log = fogbus.log().entries();
        ensure(log.len() == 1, || format!("{} requests: {log:?}", log.len()))?;
        let only = &log[0];
        ensure(only.method == "POST" && only.path == "/analyze", || format!("{only:?}"))?;
        ensure(only.bytes_in == 4 * frames, || format!("{} bytes sent", only.bytes_in))?;
        check_request_ids(fogbus.log(), rid)?;
        Ok(((), format!("POST /analyze, X-Request-Id {rid}")))
    })?;
    let _ = engine.stop_daemon(true);
    Some(())
}

fn camera_edgelens(steps: &mut Steps) -> Option<()> {
    let log = RequestLog::new();
    let (master, worker) = steps.run("start EdgeLens master and worker mocks", || {
        let worker = MockServer::start_with_log(
            "edgelens-worker",
            0,
            EdgeLensWorker::new(Transform::Complement).with_behavior(WorkerBehavior {
                pending_polls: 1,
                ..Default::default()
            }),
            log.clone(),
        )
        .map_err(err)?;
        let master = MockServer::start_with_log(
            "edgelens-master",
            0,
            EdgeLensMaster::new(Some(worker.url())),
            log.clone(),
        )
        .map_err(err)?;
        let detail = format!("master {}, worker {}", master.url(), worker.url());
        Ok(((master, worker), detail))
    })?;

    let engine = steps.run("wire camera, EdgeLens detector and display conversion", || {
        let engine = engine_with_stores(&["photo-raw", "detect-out", "display"])?;
        let (w, h, pattern) = IMAGE;
        engine
            .register_provider(
                ProviderDescriptor::new("camera", "photo-raw").with_input(InputSpec::None),
                CameraProvider::new(w, h, pattern).map_err(err)?,
            )
            .map_err(err)?;
        engine
            .register_provider(
                ProviderDescriptor::new("edgelens", "detect-out").with_input(InputSpec::SingleEnvelope),
                EdgeLensProvider::new(endpoint(&master.url())).map_err(err)?,
            )
            .map_err(err)?;
        engine
            .register_provider(ProviderDescriptor::new("detect-to-bitmap", "display").with_input(InputSpec::SingleEnvelope), BitmapProvider)
            .map_err(err)?;
        engine
            .attach_trigger("photo-raw", TriggerAction::StartProvider("edgelens".into()))
            .map_err(err)?;
        engine
            .attach_trigger("detect-out", TriggerAction::StartProvider("detect-to-bitmap".into()))
            .map_err(err)?;
        Ok((engine, "photo-raw -> edgelens -> detect-out -> display".into()))
    })?;

    let image = capture(IMAGE.0, IMAGE.1, IMAGE.2).ok()?;
    let rid = steps.run("take a photo and follow it to the display", || {
        let ctx = engine.new_request("scenario:camera-edgelens");
        let rid = engine
            .run_provider("camera", ProviderInput::None, Some(ctx))
            .map_err(err)?;
        let display = wait_for(&engine, "display", rid)?;
        Ok((rid, format!("request {rid} reached display ({} bytes)", display.payload.len())))
    })?;

    steps.run("detections are the byte-exact complement", || {
        let raw = wait_for(&engine, "photo-raw", rid)?;
        ensure(raw.payload == image.ppm, || "photo differs from the pattern".into())?;
        let detected = wait_for(&engine, "detect-out", rid)?;
        ensure(detected.payload == complemented(&image), || {
            "detector output is not the complemented image".into()
        })?;
        ensure(detected.media_type == MEDIA_PPM, || detected.media_type.clone())?;
        let display = wait_for(&engine, "display", rid)?;
        let mut expected = Vec::new();
        expected.extend_from_slice(&image.width.to_be_bytes());
        expected.extend_from_slice(&image.height.to_be_bytes());
        expected.extend_from_slice(&complemented(&image)[image.header_len()..]);
        ensure(display.payload == expected, || "display bitmap mismatch".into())?;
        Ok(((), format!("{} pixel bytes complemented", image.pixel_bytes().len())))
    })?;

    steps.run("request id and request count hold end to end", || {
        check_request_ids(&log, rid)?;
        let entries = log.entries();
        let polls = entries.iter().filter(|e| e.path.starts_with("/result/")).count();
        ensure(polls == 2, || format!("{polls} result polls"))?;
        ensure(entries.len() == 3 + polls, || format!("{} requests: {entries:?}", entries.len()))?;
        let master_hits = entries.iter().filter(|e| e.server == "edgelens-master").count();
        ensure(master_hits == 1, || format!("master saw {master_hits} requests"))?;
        Ok(((), format!("1 master + {} worker requests, all tagged {rid}", entries.len() - 1)))
    })?;
    drop(worker);
    let _ = engine.stop_daemon(true);
    Some(())
}

fn camera_aneka(steps: &mut Steps) -> Option<()> {
    let (master, blobs) = steps.run("start Aneka master and blob store mocks", || {
        let blobs = MockServer::start("blob", 0, BlobServer::default()).map_err(err)?;
        let master = MockServer::start(
            "aneka",
            0,
            AnekaMaster::new(MockFiles::Blobs(blobs.handler().data().clone())),
        )
        .map_err(err)?;
        let detail = format!("master {}, blobs {}", master.url(), blobs.url());
        Ok(((master, blobs), detail))
    })?;

    let engine = steps.run("wire camera and Aneka detector", || {
        let engine = engine_with_stores(&["photo-raw", "detect-out"])?;
        let (w, h, pattern) = IMAGE;
        engine
            .register_provider(
                ProviderDescriptor::new("camera", "photo-raw").with_input(InputSpec::None),
                CameraProvider::new(w, h, pattern).map_err(err)?,
            )
            .map_err(err)?;
        let cfg = endpoint(&master.url()).with_transfer(FileStoreConfig::http(blobs.url()));
        engine
            .register_provider(
                ProviderDescriptor::new("aneka", "detect-out").with_input(InputSpec::SingleEnvelope),
                AnekaProvider::new(cfg).map_err(err)?,
            )
            .map_err(err)?;
        engine
            .attach_trigger("photo-raw", TriggerAction::StartProvider("aneka".into()))
            .map_err(err)?;
        Ok((engine, "photo-raw -> aneka -> detect-out".into()))
    })?;

    let image = capture(IMAGE.0, IMAGE.1, IMAGE.2).ok()?;
    let rid = steps.run("photo comes back with the detection marker", || {
        let ctx = engine.new_request("scenario:camera-aneka");
        let rid = engine
            .run_provider("camera", ProviderInput::None, Some(ctx))
            .map_err(err)?;
        let detected = wait_for(&engine, "detect-out", rid)?;
        let mut expected = image.ppm.clone();
        expected.extend_from_slice(b"DETECTED");
        ensure(detected.payload == expected, || {
            format!("{} bytes back, expected {}", detected.payload.len(), expected.len())
        })?;
        Ok((rid, format!("{} bytes + marker", image.ppm.len())))
    })?;

    steps.run("request id and request count hold end to end", || {
        check_request_ids(master.log(), rid)?;
        check_request_ids(blobs.log(), rid)?;
        let transfers = blobs.log().entries();
        let paths: Vec<_> = transfers.iter().map(|e| format!("{} {}", e.method, e.path)).collect();
        let expected = [format!("PUT /blob/in/{rid}"), "GET /blob/out/task-1".to_string()];
        ensure(paths == expected, || format!("transfers {paths:?}"))?;
        let api = master.log().entries();
        let submits = api.iter().filter(|e| e.method == "POST").count();
        let polls = api.iter().filter(|e| e.method == "GET").count();
        ensure(submits == 1 && polls == 3 && api.len() == 4, || format!("master saw {api:?}"))?;
        Ok(((), format!("2 transfers + 1 submit + {polls} polls, all tagged {rid}")))
    })?;
    let _ = engine.stop_daemon(true);
    Some(())
}

fn chooser_fallback(steps: &mut Steps) -> Option<()> {
    let mocks = steps.run("start EdgeLens and Aneka mocks", || {
        let worker = MockServer::start("edgelens-worker", 0, EdgeLensWorker::new(Transform::Complement))
            .map_err(err)?;
        let master = MockServer::start("edgelens-master", 0, EdgeLensMaster::new(Some(worker.url())))
            .map_err(err)?;
        let blobs = MockServer::start("blob", 0, BlobServer::default()).map_err(err)?;
        let aneka = MockServer::start(
            "aneka",
            0,
            AnekaMaster::new(MockFiles::Blobs(blobs.handler().data().clone())),
        )
        .map_err(err)?;
        Ok(((worker, master, blobs, aneka), "4 mocks up".into()))
    })?;
    let (worker, master, blobs, aneka) = &mocks;

    let engine = steps.run("register both detectors behind one chooser", || {
        let engine = engine_with_stores(&["detect-out"])?;
        engine
            .register_provider(
                ProviderDescriptor::new("edgelens", "detect-out").with_input(InputSpec::SingleEnvelope),
                EdgeLensProvider::new(endpoint(&master.url())).map_err(err)?,
            )
            .map_err(err)?;
        let cfg = endpoint(&aneka.url()).with_transfer(FileStoreConfig::http(blobs.url()));
        engine
            .register_provider(
                ProviderDescriptor::new("aneka", "detect-out").with_input(InputSpec::SingleEnvelope),
                AnekaProvider::new(cfg).map_err(err)?.with_transform(Transform::Complement),
            )
            .map_err(err)?;
        engine
            .set_chooser(ChooserPolicy::priority("detect-out", &["edgelens", "aneka"]).with_fallback(true))
            .map_err(err)?;
        Ok((engine, "priority [edgelens, aneka], fallback on".into()))
    })?;

    let image = capture(IMAGE.0, IMAGE.1, IMAGE.2).ok()?;
    let expected = complemented(&image);
    let input = || {
        ProviderInput::Single(Arc::new(DataEnvelope::external(
            image.ppm.clone(),
            MEDIA_PPM,
            RequestId(0),
        )))
    };

    let jammed = steps.run("jam edgelens with a job that does not finish", || {
        worker.handler().set_behavior(WorkerBehavior {
            never_complete: true,
            ..Default::default()
        });
        let ticket = engine
            .produce_data_ticket("detect-out", input(), None)
            .map_err(err)?;
        ensure(ticket.provider_key() == "edgelens", || {
            format!("first pick was {}", ticket.provider_key())
        })?;
        wait_state(&engine, "edgelens", ProviderState::Running)?;
        Ok((ticket, "edgelens Running".into()))
    })?;

    steps.run("busy edgelens is skipped in favour of aneka", || {
        let rid = engine.produce_data("detect-out", input(), None).map_err(err)?;
        let out = wait_for(&engine, "detect-out", rid)?;
        ensure(out.producer_key == "aneka", || format!("served by {}", out.producer_key))?;
        ensure(out.payload == expected, || "aneka output differs".into())?;
        let edgelens = engine.provider_state("edgelens").map_err(err)?.state;
        ensure(edgelens == ProviderState::Running, || format!("edgelens was {edgelens}"))?;
        Ok(((), "provider aneka selected while edgelens Running".into()))
    })?;

    steps.run("released edgelens finishes its job and is Idle again", || {
        worker.handler().set_behavior(WorkerBehavior::default());
        let status = jammed.wait(WAIT);
        ensure(status == TicketStatus::Done, || format!("jammed ticket ended {status}"))?;
        let out = wait_for(&engine, "detect-out", jammed.request_id())?;
        ensure(out.producer_key == "edgelens" && out.payload == expected, || {
            format!("served by {}", out.producer_key)
        })?;
        wait_state(&engine, "edgelens", ProviderState::Idle)?;
        let pick = engine.select_provider("detect-out").map_err(err)?;
        ensure(pick == "edgelens", || format!("chooser picked {pick}"))?;
        Ok(((), "both idle, priority back on edgelens".into()))
    })?;

    steps.run("edgelens fails permanently and aneka takes over", || {
        master.handler().set_worker(None);
        let ticket = engine.submit("edgelens", input(), None).map_err(err)?;
        let status = ticket.wait(WAIT);
        ensure(matches!(status, TicketStatus::Failed(_)), || format!("ticket ended {status}"))?;
        let failed = engine.provider_state("edgelens").map_err(err)?;
        ensure(failed.state == ProviderState::Failed, || format!("edgelens {}", failed.state))?;
        let rid = engine.produce_data("detect-out", input(), None).map_err(err)?;
        let out = wait_for(&engine, "detect-out", rid)?;
        ensure(out.producer_key == "aneka", || format!("served by {}", out.producer_key))?;
        Ok(((), format!("edgelens Failed ({}), aneka served", failed.last_error.unwrap_or_default())))
    })?;

    steps.run("with every candidate failed only the fallback flag decides", || {
        aneka.handler().set_timeline(vec![TaskState::Failed]);
        let status = engine.submit("aneka", input(), None).map_err(err)?.wait(WAIT);
        ensure(matches!(status, TicketStatus::Failed(_)), || format!("aneka ended {status}"))?;
        wait_state(&engine, "aneka", ProviderState::Failed)?;
        let pick = engine.select_provider("detect-out").map_err(err)?;
        ensure(pick == "edgelens", || format!("fallback picked {pick}"))?;
        engine
            .set_chooser(ChooserPolicy::priority("detect-out", &["edgelens", "aneka"]).with_fallback(false))
            .map_err(err)?;
        let refused = engine.produce_data("detect-out", input(), None);
        ensure(matches!(refused, Err(EngineError::AllCandidatesUnavailable(_))), || {
            format!("without fallback got {refused:?}")
        })?;
        Ok(((), "fallback retries edgelens; strict policy refuses".into()))
    })?;
    let _ = engine.stop_daemon(false);
    Some(())
}
