//! HTTP preference service. The protocol thread publishes each round of
//! comparisons through [`ServiceListener`]; listeners fetch blinded pairs,
//! play the WAV audio and post one of four answers. Every answer is appended
//! to a synced JSON-lines log before it is acknowledged, and the labels are a
//! fold of that log, so a restarted service picks up where it stopped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query as UrlQuery, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prefcomp_core::protocol::{EvalTally, Listener, Phase, Query};
use prefcomp_core::reward::Choice;
use prefcomp_core::RunRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::SessionPlan;
use crate::error::{IoContext, Result};
use crate::wav::{wav_bytes, WavFormat};

/// One line of the feedback log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub session: String,
    pub pair: u64,
    pub phase: Phase,
    /// The answer as given, relative to the order the listener heard.
    pub choice: Choice,
    /// Whether the listener's A was the server's second clip.
    pub swapped: bool,
    /// The answer relative to the server's clip order.
    pub server_choice: Choice,
    /// Label in server order; absent for NEITHER.
    pub server_order_mu: Option<[f64; 2]>,
    /// Times the listener fetched A and B before answering.
    #[serde(default)]
    pub plays: [u32; 2],
    pub timestamp_ms: u64,
}

struct FeedbackLog {
    path: PathBuf,
    file: File,
}

impl FeedbackLog {
    fn open(path: &Path) -> Result<(Self, Vec<FeedbackRecord>)> {
        let records = if path.exists() { read_feedback(path)? } else { Vec::new() };
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).expect("feedback serializes"));
            text.push('\n');
        }
        std::fs::write(path, text).at(path)?;
        let file = OpenOptions::new().append(true).open(path).at(path)?;
        Ok((Self { path: path.to_path_buf(), file }, records))
    }

    fn append(&mut self, r: &FeedbackRecord) -> Result<()> {
        let mut line = serde_json::to_string(r).expect("feedback serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).at(&self.path)?;
        self.file.sync_data().at(&self.path)
    }
}

/// Complete records of a feedback log; a torn final line is ignored.
pub fn read_feedback(path: &Path) -> Result<Vec<FeedbackRecord>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        match serde_json::from_str(l) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(e).at(path),
        }
    }
    Ok(out)
}

/// Server-order labels by pair id, the last answer winning.
pub fn fold_feedback(records: &[FeedbackRecord]) -> BTreeMap<u64, Choice> {
    records.iter().map(|r| (r.pair, r.server_choice)).collect()
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub plan: SessionPlan,
    /// Seed of the per-pair side randomization.
    pub side_seed: u64,
    pub feedback_log: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { plan: SessionPlan::default(), side_seed: 0, feedback_log: None }
    }
}

struct PairSlot {
    id: u64,
    /// Audio in the order presented to the listener.
    wav: [Arc<Vec<u8>>; 2],
    swapped: bool,
    served_to: Option<String>,
    plays: [u32; 2],
}

struct Round {
    phase: Phase,
    pairs: Vec<PairSlot>,
}

#[derive(Debug, Clone)]
struct Session {
    listener: Option<String>,
    served: usize,
    labeled: usize,
    excluded: usize,
    current: Option<u64>,
}

struct ServiceState {
    attached: bool,
    plan: SessionPlan,
    side_seed: u64,
    sessions: BTreeMap<String, Session>,
    next_session: u64,
    round: Option<Round>,
    feedback: BTreeMap<u64, FeedbackRecord>,
    log: Option<FeedbackLog>,
    results: Option<EvalTally>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApiError {
    NotFound(String),
    Conflict(String),
    BadRequest(String),
    NoContent,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::NoContent => return StatusCode::NO_CONTENT.into_response(),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(serde_json::json!({ "error": msg }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub session: String,
    pub listener: Option<String>,
    pub phase: String,
    pub served: usize,
    pub labeled: usize,
    pub excluded: usize,
    /// 1-based block, capped at the plan's block count.
    pub block: usize,
    /// Labels given in the current block.
    pub labeled_in_block: usize,
    pub pairs_per_block: usize,
    pub blocks: usize,
    /// Set when a block has just been completed.
    pub on_break: bool,
    /// Pairs of the current round nobody has been served yet.
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairView {
    pub session: String,
    pub pair: u64,
    pub phase: String,
    pub audio_a: String,
    pub audio_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub pair: u64,
    pub accepted: bool,
    /// False for NEITHER, which is logged but kept out of the dataset.
    pub included: bool,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub tally: EvalTally,
    pub answered: usize,
    pub percent_personalized: f64,
    pub percent_reference: f64,
    pub percent_equal: f64,
    pub percent_neither: f64,
}

fn phase_name(p: Option<Phase>) -> String {
    match p {
        Some(Phase::Evaluation) => "evaluation",
        Some(_) => "training_query",
        None => "idle",
    }
    .into()
}

fn parse_choice(s: &str) -> Option<Choice> {
    match s.to_ascii_uppercase().as_str() {
        "A" => Some(Choice::A),
        "B" => Some(Choice::B),
        "EQUAL" => Some(Choice::Equal),
        "NEITHER" => Some(Choice::Neither),
        _ => None,
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl ServiceState {
    fn session(&self, id: &str) -> ApiResult<&Session> {
        self.sessions.get(id).ok_or_else(|| ApiError::NotFound(format!("unknown session {id}")))
    }

    fn pending(&self) -> usize {
        self.round
            .as_ref()
            .map(|r| r.pairs.iter().filter(|p| p.served_to.is_none() && !self.feedback.contains_key(&p.id)).count())
            .unwrap_or(0)
    }

    fn progress(&self, id: &str) -> ApiResult<Progress> {
        let s = self.session(id)?;
        let ppb = self.plan.pairs_per_block;
        Ok(Progress {
            session: id.to_string(),
            listener: s.listener.clone(),
            phase: phase_name(self.round.as_ref().map(|r| r.phase)),
            served: s.served,
            labeled: s.labeled,
            excluded: s.excluded,
            block: (s.labeled / ppb + 1).min(self.plan.blocks),
            labeled_in_block: s.labeled % ppb,
            pairs_per_block: ppb,
            blocks: self.plan.blocks,
            on_break: s.labeled > 0 && s.labeled % ppb == 0,
            pending: self.pending(),
        })
    }
}

/// State shared by the HTTP handlers and the protocol thread.
pub struct PrefService {
    state: Mutex<ServiceState>,
    changed: Condvar,
}

impl PrefService {
    /// Opens the service, replaying the feedback log if one is configured.
    pub fn new(cfg: ServiceConfig) -> Result<Arc<Self>> {
        let (log, records) = match &cfg.feedback_log {
            Some(p) => {
                let (log, records) = FeedbackLog::open(p)?;
                (Some(log), records)
            }
            None => (None, Vec::new()),
        };
        let state = ServiceState {
            attached: false,
            plan: cfg.plan,
            side_seed: cfg.side_seed,
            sessions: BTreeMap::new(),
            next_session: 1,
            round: None,
            feedback: records.into_iter().map(|r| (r.pair, r)).collect(),
            log,
            results: None,
        };
        Ok(Arc::new(Self { state: Mutex::new(state), changed: Condvar::new() }))
    }

    fn lock(&self) -> MutexGuard<'_, ServiceState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Marks a run as attached; sessions can only be opened afterwards.
    pub fn attach(&self) {
        self.lock().attached = true;
    }

    pub fn set_results(&self, tally: EvalTally) {
        self.lock().results = Some(tally);
        self.changed.notify_all();
    }

    /// Every logged answer, keyed by pair id.
    pub fn feedback(&self) -> BTreeMap<u64, FeedbackRecord> {
        self.lock().feedback.clone()
    }

    pub fn create_session(&self, listener: Option<String>) -> ApiResult<Progress> {
        let mut st = self.lock();
        if !st.attached {
            return Err(ApiError::Conflict("no run is attached".into()));
        }
        let id = format!("s{}", st.next_session);
        st.next_session += 1;
        st.sessions.insert(id.clone(), Session { listener, served: 0, labeled: 0, excluded: 0, current: None });
        st.progress(&id)
    }

    /// The session's unlabeled pair, or the next one nobody has been served.
    pub fn next_pair(&self, session: &str) -> ApiResult<PairView> {
        let mut st = self.lock();
        let cur = st.session(session)?.current;
        let st = &mut *st;
        let round = st.round.as_mut().ok_or(ApiError::NoContent)?;
        let id = match cur.filter(|id| !st.feedback.contains_key(id) && round.pairs.iter().any(|p| p.id == *id)) {
            Some(id) => id,
            None => {
                let slot = round
                    .pairs
                    .iter_mut()
                    .find(|p| p.served_to.is_none() && !st.feedback.contains_key(&p.id))
                    .ok_or(ApiError::NoContent)?;
                slot.served_to = Some(session.to_string());
                let s = st.sessions.get_mut(session).expect("session checked above");
                s.served += 1;
                s.current = Some(slot.id);
                slot.id
            }
        };
        Ok(PairView {
            session: session.to_string(),
            pair: id,
            phase: phase_name(Some(round.phase)),
            audio_a: format!("/audio/{id}/a"),
            audio_b: format!("/audio/{id}/b"),
        })
    }

    pub fn audio(&self, pair: u64, side: &str) -> ApiResult<Arc<Vec<u8>>> {
        let idx = match side.to_ascii_lowercase().as_str() {
            "a" => 0,
            "b" => 1,
            _ => return Err(ApiError::NotFound(format!("unknown side {side}"))),
        };
        let mut st = self.lock();
        let slot = st
            .round
            .as_mut()
            .and_then(|r| r.pairs.iter_mut().find(|p| p.id == pair))
            .ok_or_else(|| ApiError::NotFound(format!("unknown pair {pair}")))?;
        slot.plays[idx] += 1;
        Ok(Arc::clone(&slot.wav[idx]))
    }

    pub fn feedback_for(&self, session: &str, pair: u64, choice: Choice) -> ApiResult<Ack> {
        let mut st = self.lock();
        st.session(session)?;
        if st.feedback.contains_key(&pair) {
            return Err(ApiError::Conflict(format!("pair {pair} is already labeled")));
        }
        let round = st.round.as_ref().ok_or_else(|| ApiError::NotFound(format!("unknown pair {pair}")))?;
        let phase = round.phase;
        let slot = round.pairs.iter().find(|p| p.id == pair).ok_or_else(|| ApiError::NotFound(format!("unknown pair {pair}")))?;
        if slot.served_to.as_deref() != Some(session) {
            return Err(ApiError::Conflict(format!("pair {pair} was not served to session {session}")));
        }
        let swapped = slot.swapped;
        let plays = slot.plays;
        let server_choice = if swapped { choice.swapped() } else { choice };
        let rec = FeedbackRecord {
            session: session.to_string(),
            pair,
            phase,
            choice,
            swapped,
            server_choice,
            server_order_mu: server_choice.preference().map(|p| p.mu()),
            plays,
            timestamp_ms: now_ms(),
        };
        if let Some(log) = st.log.as_mut() {
            log.append(&rec).map_err(|e| ApiError::Internal(e.to_string()))?;
        }
        st.feedback.insert(pair, rec);
        let s = st.sessions.get_mut(session).expect("session checked above");
        s.labeled += 1;
        if choice == Choice::Neither {
            s.excluded += 1;
        }
        s.current = None;
        let progress = st.progress(session)?;
        drop(st);
        self.changed.notify_all();
        Ok(Ack { pair, accepted: true, included: choice != Choice::Neither, progress })
    }

    pub fn progress(&self, session: &str) -> ApiResult<Progress> {
        self.lock().progress(session)
    }

    pub fn results(&self, session: &str) -> ApiResult<Results> {
        let st = self.lock();
        st.session(session)?;
        let tally = st.results.ok_or_else(|| ApiError::Conflict("the evaluation has not finished".into()))?;
        let [p, r, e, n] = tally.percentages();
        Ok(Results {
            tally,
            answered: tally.answered(),
            percent_personalized: p,
            percent_reference: r,
            percent_equal: e,
            percent_neither: n,
        })
    }

    /// Makes `queries` the current round, rendering the audio up front with
    /// a per-pair random side order.
    pub fn publish_round(&self, phase: Phase, queries: &[Query]) {
        let mut st = self.lock();
        let seed = st.side_seed;
        let pairs = queries
            .iter()
            .map(|q| {
                let mut rng = RunRng::seed_from_u64(seed);
                rng.set_stream(q.id);
                let swapped = rng.gen::<bool>();
                let a = Arc::new(wav_bytes(&q.clip_a, WavFormat::Pcm16));
                let b = Arc::new(wav_bytes(&q.clip_b, WavFormat::Pcm16));
                let wav = if swapped { [b, a] } else { [a, b] };
                PairSlot { id: q.id, wav, swapped, served_to: None, plays: [0; 2] }
            })
            .collect();
        st.round = Some(Round { phase, pairs });
        for s in st.sessions.values_mut() {
            s.current = None;
        }
        drop(st);
        self.changed.notify_all();
    }

    /// Blocks until every pair in `ids` is labeled; `None` on timeout.
    pub fn wait_for_labels(&self, ids: &[u64], timeout: Duration) -> Option<Vec<Choice>> {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if ids.iter().all(|id| st.feedback.contains_key(id)) {
                return Some(ids.iter().map(|id| st.feedback[id].server_choice).collect());
            }
            let left = deadline.checked_duration_since(Instant::now())?;
            st = self.changed.wait_timeout(st, left).unwrap_or_else(|e| e.into_inner()).0;
        }
    }
}

/// Protocol listener backed by the service: publishes each round and waits
/// for the human answers.
pub struct ServiceListener {
    pub service: Arc<PrefService>,
    pub timeout: Duration,
}

impl Listener for ServiceListener {
    fn label(&mut self, phase: Phase, queries: &[Query]) -> prefcomp_core::Result<Vec<Choice>> {
        self.service.publish_round(phase, queries);
        let ids: Vec<u64> = queries.iter().map(|q| q.id).collect();
        self.service.wait_for_labels(&ids, self.timeout).ok_or_else(|| {
            prefcomp_core::Error::Listener(format!("no answers for {} pairs within {} s", ids.len(), self.timeout.as_secs()))
        })
    }
}

#[derive(Debug, Deserialize)]
struct SessionRequest {
    listener: Option<String>,
}

#[derive(Debug, Deserialize)]
struct SessionParam {
    session: String,
}

#[derive(Debug, Deserialize)]
struct FeedbackRequest {
    session: String,
    pair: u64,
    choice: String,
}

type Shared = State<Arc<PrefService>>;

/// The body is optional; an empty one opens an anonymous session.
async fn post_session(State(svc): Shared, body: axum::body::Bytes) -> ApiResult<Json<Progress>> {
    let listener = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        serde_json::from_slice::<SessionRequest>(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?.listener
    };
    svc.create_session(listener).map(Json)
}

async fn get_pair(State(svc): Shared, UrlQuery(q): UrlQuery<SessionParam>) -> ApiResult<Json<PairView>> {
    svc.next_pair(&q.session).map(Json)
}

async fn get_audio(State(svc): Shared, UrlPath((pair, side)): UrlPath<(u64, String)>) -> ApiResult<Response> {
    let bytes = svc.audio(pair, &side)?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes.as_ref().clone()).into_response())
}

async fn post_feedback(State(svc): Shared, Json(f): Json<FeedbackRequest>) -> ApiResult<Json<Ack>> {
    let choice = parse_choice(&f.choice).ok_or_else(|| ApiError::BadRequest(format!("unknown choice {}", f.choice)))?;
    svc.feedback_for(&f.session, f.pair, choice).map(Json)
}

async fn get_progress(State(svc): Shared, UrlQuery(q): UrlQuery<SessionParam>) -> ApiResult<Json<Progress>> {
    svc.progress(&q.session).map(Json)
}

async fn get_results(State(svc): Shared, UrlQuery(q): UrlQuery<SessionParam>) -> ApiResult<Json<Results>> {
    svc.results(&q.session).map(Json)
}

pub fn router(service: Arc<PrefService>) -> Router {
    Router::new()
        .route("/session", post(post_session))
        .route("/pair", get(get_pair))
        .route("/audio/{pair}/{side}", get(get_audio))
        .route("/feedback", post(post_feedback))
        .route("/progress", get(get_progress))
        .route("/results", get(get_results))
        .with_state(service)
}
