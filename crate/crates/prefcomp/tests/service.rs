mod common;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use prefcomp::config::SessionPlan;
use prefcomp::export::DATASET_MANIFEST;
use prefcomp::orchestrator::{simulated_listener, Run, RunOutcome, LOG};
use prefcomp::runlog::{read_records, LogEvent};
use prefcomp::service::{fold_feedback, read_feedback, router, ApiError, PrefService, ServiceConfig, ServiceListener};
use prefcomp::wav::read_wav_bytes;
use prefcomp_core::action::CrAdjustment;
use prefcomp_core::audio::AudioClip;
use prefcomp_core::env::Source;
use prefcomp_core::protocol::{EvalTally, Phase, Query};
use prefcomp_core::reward::Choice;
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Clip A is quiet and clip B loud, so the audio reveals which one was served.
fn queries(first: u64, n: usize, phase: Phase) -> Vec<Query> {
    (0..n as u64)
        .map(|i| {
            let tone = |amp: f64| (0..800).map(|k| amp * (k as f64 * 0.05).sin()).collect::<Vec<_>>();
            Query {
                id: first + i,
                phase,
                source: Source { speech: i as usize, noise: None, noise_offset: 0 },
                clip_a: AudioClip::new("a", tone(0.1), 16000).unwrap(),
                clip_b: AudioClip::new("b", tone(0.5), 16000).unwrap(),
                adj_a: CrAdjustment(vec![1.0; 5]),
                adj_b: CrAdjustment(vec![4.0; 5]),
            }
        })
        .collect()
}

fn service(side_seed: u64) -> Arc<PrefService> {
    let svc = PrefService::new(ServiceConfig { side_seed, ..Default::default() }).unwrap();
    svc.attach();
    svc
}

async fn call(svc: &Arc<PrefService>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = router(Arc::clone(svc)).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(svc: &Arc<PrefService>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(svc, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn session(svc: &Arc<PrefService>) -> String {
    let (s, v) = call_json(svc, "POST", "/session", Some(json!({ "listener": "L1" }))).await;
    assert_eq!(s, StatusCode::OK);
    v["session"].as_str().unwrap().to_string()
}

async fn answer(svc: &Arc<PrefService>, sid: &str, pair: u64, choice: &str) -> (StatusCode, Value) {
    call_json(svc, "POST", "/feedback", Some(json!({ "session": sid, "pair": pair, "choice": choice }))).await
}

/// Whether the listener's A is the server's loud clip B.
async fn heard_swapped(svc: &Arc<PrefService>, pair: u64) -> bool {
    let (s, a) = call(svc, "GET", &format!("/audio/{pair}/a"), None).await;
    assert_eq!(s, StatusCode::OK);
    let clip = read_wav_bytes(&a, "a").unwrap();
    clip.samples().iter().fold(0.0f64, |m, x| m.max(x.abs())) > 0.3
}

#[tokio::test]
async fn sessions_need_an_attached_run() {
    let svc = PrefService::new(ServiceConfig::default()).unwrap();
    let (s, _) = call(&svc, "POST", "/session", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    svc.attach();
    let (s, v) = call_json(&svc, "POST", "/session", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["listener"], Value::Null);
    assert_eq!(call(&svc, "POST", "/session", Some(json!({ "listener": 5 }))).await.0, StatusCode::BAD_REQUEST);
    let a = session(&svc).await;
    let b = session(&svc).await;
    assert_ne!(a, b);
    let (s, _) = call(&svc, "GET", "/pair?session=nobody", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&svc, "GET", &format!("/pair?session={a}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn pairs_are_served_once_until_the_round_is_exhausted() {
    let svc = service(1);
    svc.publish_round(Phase::Round(0), &queries(100, 30, Phase::Round(0)));
    let sid = session(&svc).await;
    let other = session(&svc).await;
    let mut seen = BTreeSet::new();
    for _ in 0..30 {
        let (s, p) = call_json(&svc, "GET", &format!("/pair?session={sid}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let (_, again) = call_json(&svc, "GET", &format!("/pair?session={sid}"), None).await;
        assert_eq!(again, p);
        let id = p["pair"].as_u64().unwrap();
        assert_eq!(p["phase"], "training_query");
        assert_eq!(p["audio_a"], format!("/audio/{id}/a"));
        let (s, _) = answer(&svc, &other, id, "A").await;
        assert_eq!(s, StatusCode::CONFLICT);
        let (s, _) = answer(&svc, &sid, id, "A").await;
        assert_eq!(s, StatusCode::OK);
        assert!(seen.insert(id));
    }
    assert_eq!(seen, (100..130).collect());
    let (s, _) = call(&svc, "GET", &format!("/pair?session={sid}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    assert_eq!(call(&svc, "GET", "/audio/999/a", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&svc, "GET", "/audio/100/c", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(answer(&svc, &sid, 999, "A").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn audio_is_a_playable_wav_pair_of_equal_length() {
    let svc = service(2);
    svc.publish_round(Phase::Warmup, &queries(0, 1, Phase::Warmup));
    let (_, a) = call(&svc, "GET", "/audio/0/a", None).await;
    let (_, b) = call(&svc, "GET", "/audio/0/b", None).await;
    assert_eq!(&a[..4], b"RIFF");
    let (ca, cb) = (read_wav_bytes(&a, "a").unwrap(), read_wav_bytes(&b, "b").unwrap());
    assert_eq!(ca.sample_rate_hz(), 16000);
    assert_eq!(ca.len(), 800);
    assert_eq!(ca.len(), cb.len());
}

#[tokio::test]
async fn answers_are_unblinded_into_server_order() {
    let svc = service(3);
    svc.publish_round(Phase::Round(0), &queries(0, 40, Phase::Round(0)));
    let sid = session(&svc).await;
    let choices = ["A", "B", "EQUAL", "NEITHER", "a", "equal"];
    let mut swaps = 0;
    for i in 0..40 {
        let (_, p) = call_json(&svc, "GET", &format!("/pair?session={sid}"), None).await;
        let id = p["pair"].as_u64().unwrap();
        let swapped = heard_swapped(&svc, id).await;
        swaps += swapped as usize;
        let given = choices[i % choices.len()];
        let (s, ack) = answer(&svc, &sid, id, given).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(ack["included"], given != "NEITHER");
        let expected = match (given.to_ascii_uppercase().as_str(), swapped) {
            ("A", false) | ("B", true) => Choice::A,
            ("A", true) | ("B", false) => Choice::B,
            ("EQUAL", _) => Choice::Equal,
            _ => Choice::Neither,
        };
        let rec = &svc.feedback()[&id];
        assert_eq!(rec.swapped, swapped);
        assert_eq!(rec.server_choice, expected, "pair {id} given {given}");
        assert_eq!(rec.server_order_mu, expected.preference().map(|p| p.mu()));
        assert_eq!(answer(&svc, &sid, id, "A").await.0, StatusCode::CONFLICT);
    }
    assert!((5..=35).contains(&swaps), "{swaps} of 40 swapped");
    let (_, prog) = call_json(&svc, "GET", &format!("/progress?session={sid}"), None).await;
    assert_eq!(prog["labeled"], 40);
    assert_eq!(prog["excluded"], 7);
    let (_, p) = call_json(&svc, "GET", &format!("/pair?session={sid}"), None).await;
    assert_eq!(p, Value::Null);
}

#[tokio::test]
async fn replays_are_counted_per_side() {
    let svc = service(4);
    svc.publish_round(Phase::Round(0), &queries(0, 1, Phase::Round(0)));
    let sid = session(&svc).await;
    let (_, p) = call_json(&svc, "GET", &format!("/pair?session={sid}"), None).await;
    let id = p["pair"].as_u64().unwrap();
    for _ in 0..3 {
        call(&svc, "GET", &format!("/audio/{id}/a"), None).await;
    }
    call(&svc, "GET", &format!("/audio/{id}/B"), None).await;
    assert_eq!(answer(&svc, &sid, id, "A").await.0, StatusCode::OK);
    assert_eq!(svc.feedback()[&id].plays, [3, 1]);
}

#[tokio::test]
async fn unknown_choice_is_a_bad_request() {
    let svc = service(4);
    svc.publish_round(Phase::Warmup, &queries(0, 1, Phase::Warmup));
    let sid = session(&svc).await;
    call(&svc, "GET", &format!("/pair?session={sid}"), None).await;
    assert_eq!(answer(&svc, &sid, 0, "maybe").await.0, StatusCode::BAD_REQUEST);
    assert!(svc.feedback().is_empty());
}

#[tokio::test]
async fn a_break_follows_every_block() {
    let plan = SessionPlan { pairs_per_block: 30, blocks: 2 };
    let svc = PrefService::new(ServiceConfig { plan, ..Default::default() }).unwrap();
    svc.attach();
    svc.publish_round(Phase::Evaluation, &queries(0, 31, Phase::Evaluation));
    let sid = session(&svc).await;
    for i in 0..31 {
        let (_, p) = call_json(&svc, "GET", &format!("/pair?session={sid}"), None).await;
        assert_eq!(p["phase"], "evaluation");
        let (_, ack) = answer(&svc, &sid, p["pair"].as_u64().unwrap(), "EQUAL").await;
        let prog = &ack["progress"];
        assert_eq!(prog["on_break"], i == 29, "after {} answers", i + 1);
        assert_eq!(prog["block"], if i < 29 { 1 } else { 2 });
    }
}

#[tokio::test]
async fn results_wait_for_the_evaluation() {
    let svc = service(5);
    let sid = session(&svc).await;
    assert_eq!(call(&svc, "GET", &format!("/results?session={sid}"), None).await.0, StatusCode::CONFLICT);
    svc.set_results(EvalTally { personalized: 41, reference: 9, equal: 7, neither: 3, n_pairs: 60, complete: true });
    let (s, r) = call_json(&svc, "GET", &format!("/results?session={sid}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["answered"], 60);
    let sum: f64 = ["percent_personalized", "percent_reference", "percent_equal", "percent_neither"].iter().map(|k| r[k].as_f64().unwrap()).sum();
    assert!((sum - 100.0).abs() < 1e-9);
    assert!((r["percent_personalized"].as_f64().unwrap() - 100.0 * 41.0 / 60.0).abs() < 1e-9);
}

#[test]
fn api_errors_map_to_status_codes() {
    use axum::response::IntoResponse;
    for (e, code) in [
        (ApiError::NotFound("x".into()), StatusCode::NOT_FOUND),
        (ApiError::Conflict("x".into()), StatusCode::CONFLICT),
        (ApiError::BadRequest("x".into()), StatusCode::BAD_REQUEST),
        (ApiError::NoContent, StatusCode::NO_CONTENT),
        (ApiError::Internal("x".into()), StatusCode::INTERNAL_SERVER_ERROR),
    ] {
        assert_eq!(e.into_response().status(), code);
    }
}

/// Answers through the service API from a thread until `stop` is set or
/// `budget` answers are given. The answer depends only on the pair id.
fn scripted_client(svc: Arc<PrefService>, budget: usize, stop: Arc<AtomicBool>, given: Arc<AtomicUsize>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let sid = svc.create_session(Some("script".into())).unwrap().session;
        while !stop.load(Ordering::SeqCst) && given.load(Ordering::SeqCst) < budget {
            match svc.next_pair(&sid) {
                Ok(p) => {
                    let choice = [Choice::A, Choice::B, Choice::Equal, Choice::A, Choice::Neither][(p.pair % 5) as usize];
                    svc.feedback_for(&sid, p.pair, choice).unwrap();
                    given.fetch_add(1, Ordering::SeqCst);
                }
                Err(_) => thread::sleep(Duration::from_millis(2)),
            }
        }
    })
}

fn serve_run(dir: &std::path::Path, log: &std::path::Path, budget: usize, timeout: Duration) -> (RunOutcome, usize) {
    let svc = PrefService::new(ServiceConfig { side_seed: 9, feedback_log: Some(log.to_path_buf()), ..Default::default() }).unwrap();
    svc.attach();
    let stop = Arc::new(AtomicBool::new(false));
    let given = Arc::new(AtomicUsize::new(0));
    let client = scripted_client(Arc::clone(&svc), budget, Arc::clone(&stop), Arc::clone(&given));
    let mut listener = ServiceListener { service: Arc::clone(&svc), timeout };
    let mut run = if dir.join(prefcomp::orchestrator::RUN_CONFIG).exists() {
        Run::open(dir).unwrap()
    } else {
        Run::create(common::tiny_config(1), dir).unwrap()
    };
    let out = run.execute(&mut listener).unwrap();
    stop.store(true, Ordering::SeqCst);
    client.join().unwrap();
    (out, given.load(Ordering::SeqCst))
}

#[test]
fn a_restarted_service_replays_its_feedback_log() {
    let straight = tempfile::tempdir().unwrap();
    let (out, given) = serve_run(straight.path(), &straight.path().join("feedback.jsonl"), usize::MAX, Duration::from_secs(30));
    assert!(matches!(out, RunOutcome::Completed(_)));
    assert_eq!(given, 12 + 8 + 6);

    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("feedback.jsonl");
    let (out, given) = serve_run(dir.path(), &log, 14, Duration::from_millis(500));
    assert!(matches!(out, RunOutcome::Suspended { .. }), "{out:?}");
    assert_eq!(given, 14);
    assert_eq!(read_feedback(&log).unwrap().len(), 14);
    let (out, given) = serve_run(dir.path(), &log, usize::MAX, Duration::from_secs(30));
    assert!(matches!(out, RunOutcome::Completed(_)));
    assert_eq!(given, 12 + 8 + 6 - 14);

    let feedback = read_feedback(&log).unwrap();
    let ids: BTreeSet<u64> = feedback.iter().map(|r| r.pair).collect();
    assert_eq!(ids.len(), feedback.len());
    let labels = fold_feedback(&feedback);
    let records = read_records(&dir.path().join(LOG)).unwrap();
    let mut logged = 0;
    for r in &records {
        if let LogEvent::Labels { pairs, .. } = &r.event {
            for l in pairs {
                assert_eq!(labels[&l.pair], l.choice, "pair {}", l.pair);
                assert_eq!(l.included, l.choice != Choice::Neither);
                logged += 1;
            }
        }
    }
    assert_eq!(logged, feedback.len());
    let manifest = |d: &std::path::Path| std::fs::read_to_string(d.join(DATASET_MANIFEST)).unwrap();
    assert_eq!(manifest(dir.path()), manifest(straight.path()));
}

#[test]
fn service_and_simulated_listener_agree_on_labels() {
    let cfg = common::tiny_config(1);
    let sim = simulated_listener(&cfg).unwrap();
    let svc = service(6);
    let qs = queries(0, 20, Phase::Round(1));
    svc.publish_round(Phase::Round(1), &qs);
    let sid = svc.create_session(None).unwrap().session;
    let expected = prefcomp_core::protocol::Listener::label(&mut sim.clone(), Phase::Round(1), &qs).unwrap();
    while let Ok(p) = svc.next_pair(&sid) {
        let q = &qs[p.pair as usize];
        let swapped = read_wav_bytes(&svc.audio(p.pair, "a").unwrap(), "a").unwrap().samples().iter().any(|x| x.abs() > 0.3);
        let mut heard = q.clone();
        if swapped {
            std::mem::swap(&mut heard.adj_a, &mut heard.adj_b);
        }
        let c = prefcomp_core::protocol::Listener::label(&mut sim.clone(), Phase::Round(1), std::slice::from_ref(&heard)).unwrap()[0];
        svc.feedback_for(&sid, p.pair, c).unwrap();
    }
    let got = svc.wait_for_labels(&(0..20).collect::<Vec<_>>(), Duration::from_secs(1)).unwrap();
    assert_eq!(got, expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unblinding_is_sound_for_any_side_seed(seed in any::<u64>(), picks in proptest::collection::vec(0usize..4, 12)) {
        let svc = service(seed);
        svc.publish_round(Phase::Round(0), &queries(0, 12, Phase::Round(0)));
        let sid = svc.create_session(None).unwrap().session;
        for pick in picks {
            let p = svc.next_pair(&sid).unwrap();
            let heard_a_loud = read_wav_bytes(&svc.audio(p.pair, "a").unwrap(), "a").unwrap().samples().iter().any(|x| x.abs() > 0.3);
            let given = [Choice::A, Choice::B, Choice::Equal, Choice::Neither][pick];
            svc.feedback_for(&sid, p.pair, given).unwrap();
            let server = svc.feedback()[&p.pair].server_choice;
            let preferred_loud = match given {
                Choice::A => Some(heard_a_loud),
                Choice::B => Some(!heard_a_loud),
                _ => None,
            };
            match preferred_loud {
                Some(loud) => prop_assert_eq!(server, if loud { Choice::B } else { Choice::A }),
                None => prop_assert_eq!(server, given),
            }
        }
    }
}
