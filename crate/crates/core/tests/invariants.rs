use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use gateway_core::exec::{Runtime, Task};
use gateway_core::{
    choose, CancelToken, ChooserPolicy, DataId, Engine, EngineError, InputSpec, ProviderDescriptor,
    ProviderInput, ProviderOutput, ProviderState, RequestId, RuntimeConfig, TicketStatus, TriggerAction,
};
use proptest::prelude::*;

fn state() -> impl Strategy<Value = ProviderState> {
    prop_oneof![
        Just(ProviderState::Idle),
        Just(ProviderState::Running),
        Just(ProviderState::Failed),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retained_ids_are_the_newest_consecutive_run(capacity in 1usize..20, appends in 0usize..60) {
        let engine = Engine::new();
        engine.register_store("s", capacity).unwrap();
        let ctx = engine.new_request("test");
        for i in 0..appends {
            let id = engine.store("s", vec![i as u8], "x", &ctx).unwrap();
            prop_assert_eq!(id, DataId(i as u64 + 1));
        }
        let kept = engine.retrieve_latest("s", usize::MAX).unwrap();
        prop_assert_eq!(kept.len(), appends.min(capacity));
        let first = (appends - kept.len()) as u64 + 1;
        for (i, env) in kept.iter().enumerate() {
            prop_assert_eq!(env.data_id, DataId(first + i as u64));
        }
        if first > 1 {
            let evicted = engine.retrieve("s", DataId(first - 1));
            let not_found = matches!(evicted, Err(EngineError::NotFound { .. }));
            prop_assert!(not_found);
        }
    }

    #[test]
    fn chooser_never_picks_running(
        states in proptest::collection::vec(state(), 1..6),
        round_robin: bool,
        fallback: bool,
    ) {
        let names: Vec<String> = (0..states.len()).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let policy = if round_robin {
            ChooserPolicy::round_robin("out", &refs)
        } else {
            ChooserPolicy::priority("out", &refs)
        }
        .with_fallback(fallback);
        let map: HashMap<String, ProviderState> = names.iter().cloned().zip(states.iter().copied()).collect();
        let first_idle = states.iter().position(|s| *s == ProviderState::Idle);
        let first_failed = states.iter().position(|s| *s == ProviderState::Failed);
        let expected = first_idle.or(if fallback { first_failed } else { None });
        match choose(&policy, &map) {
            Ok(pick) => prop_assert_eq!(Some(pick), expected.map(|i| names[i].clone())),
            Err(_) => prop_assert_eq!(expected, None),
        }
    }

    #[test]
    fn peak_never_exceeds_workers(workers in 1usize..5, tasks in 1u64..16) {
        let runtime = Runtime::<u64>::start(RuntimeConfig::default().with_workers(workers)).unwrap();
        let live = Arc::new(AtomicUsize::new(0));
        let seen = Arc::new(AtomicUsize::new(0));
        let tickets: Vec<_> = (0..tasks)
            .map(|i| {
                let (live, seen) = (live.clone(), seen.clone());
                runtime
                    .submit(Task::new("t", RequestId(i), move |_: &CancelToken| {
                        let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                        seen.fetch_max(now, Ordering::SeqCst);
                        std::thread::sleep(Duration::from_millis(2));
                        live.fetch_sub(1, Ordering::SeqCst);
                        Ok(i)
                    }))
                    .unwrap()
            })
            .collect();
        for t in &tickets {
            prop_assert_eq!(t.wait(Duration::from_secs(10)), TicketStatus::Done);
        }
        prop_assert!(seen.load(Ordering::SeqCst) <= workers);
        prop_assert!(runtime.peak_running() <= workers);
        runtime.stop(true).unwrap();
    }

    #[test]
    fn notify_triggers_fire_in_registration_order(enabled in proptest::collection::vec(any::<bool>(), 1..6), events in 1usize..8) {
        let engine = Engine::new();
        engine.register_store("s", 16).unwrap();
        let rx = engine.subscribe("sink");
        let ids: Vec<_> = enabled
            .iter()
            .map(|on| {
                let id = engine.attach_trigger("s", TriggerAction::Notify("sink".into())).unwrap();
                engine.set_trigger_enabled(id, *on).unwrap();
                id
            })
            .collect();
        let ctx = engine.new_request("test");
        for _ in 0..events {
            engine.store("s", vec![0], "x", &ctx).unwrap();
        }
        let got: Vec<_> = rx.try_iter().collect();
        let want: Vec<_> = ids.iter().zip(&enabled).filter(|(_, on)| **on).map(|(id, _)| *id).collect();
        prop_assert_eq!(got.len(), want.len() * events);
        for (chunk, event) in got.chunks(want.len().max(1)).zip(1u64..) {
            let order: Vec<_> = chunk.iter().map(|n| n.trigger).collect();
            prop_assert_eq!(&order, &want);
            prop_assert!(chunk.iter().all(|n| n.envelope.data_id == DataId(event)));
        }
        for (id, on) in ids.iter().zip(&enabled) {
            prop_assert_eq!(engine.trigger_fire_count(*id).unwrap(), if *on { events as u64 } else { 0 });
        }
    }
}

#[test]
fn request_id_follows_a_trigger_chain() {
    let engine = Engine::with_runtime(RuntimeConfig::default()).unwrap();
    for store in ["raw", "mid", "out"] {
        engine.register_store(store, 8).unwrap();
    }
    let upper = |call: &gateway_core::ProviderCall<'_>| {
        Ok(Some(ProviderOutput::new(call.input.concat_payloads().to_ascii_uppercase(), "text/plain")))
    };
    let reverse = |call: &gateway_core::ProviderCall<'_>| {
        let mut p = call.input.concat_payloads();
        p.reverse();
        Ok(Some(ProviderOutput::new(p, "text/plain")))
    };
    engine
        .register_provider(ProviderDescriptor::new("upper", "mid").with_input(InputSpec::SingleEnvelope), upper)
        .unwrap();
    engine
        .register_provider(ProviderDescriptor::new("reverse", "out").with_input(InputSpec::SingleEnvelope), reverse)
        .unwrap();
    engine.attach_trigger("raw", TriggerAction::StartProvider("upper".into())).unwrap();
    engine.attach_trigger("mid", TriggerAction::ProduceData("out".into())).unwrap();

    let ctx = engine.new_request("test");
    engine.store("raw", b"abc".to_vec(), "text/plain", &ctx).unwrap();
    let out = engine
        .wait_for_request("out", ctx.request_id, Duration::from_secs(5))
        .unwrap()
        .expect("chain reaches the last store");
    assert_eq!(out.payload, b"CBA");
    assert_eq!(out.producer_key, "reverse");
    let mid = engine.retrieve_latest("mid", 1).unwrap();
    assert_eq!(mid[0].request_id, ctx.request_id);
    engine.stop_daemon(true).unwrap();
}

#[test]
fn drain_stop_rejects_new_work() {
    let engine = Engine::with_runtime(RuntimeConfig::default().with_workers(1)).unwrap();
    engine.register_store("out", 8).unwrap();
    engine
        .register_provider(ProviderDescriptor::new("p", "out"), |_: &gateway_core::ProviderCall<'_>| {
            std::thread::sleep(Duration::from_millis(20));
            Ok(None)
        })
        .unwrap();
    let tickets: Vec<_> = (0..5)
        .map(|_| engine.submit("p", ProviderInput::None, None).unwrap())
        .collect();
    let summary = engine.stop_daemon(true).unwrap();
    assert_eq!(summary.dropped_queued, 0);
    assert!(tickets.iter().all(|t| t.status() == TicketStatus::Done));
    assert!(engine.submit("p", ProviderInput::None, None).is_err());
}
