//! The study platform: sessions, pools, slots, verdicts and payouts behind
//! one event-sourced state.
//!
//! Every accepted mutation is applied to memory and then appended to a
//! JSON-lines log before it is acknowledged. On restart the log is replayed
//! through the same apply functions, so the state (including the responses
//! remembered for idempotency keys) is rebuilt exactly. Verdicts and payouts
//! are pure functions of the replayed answers and are not logged separately.
//!
//! A failed append poisons the engine: the in-memory state may be ahead of the
//! log, so every later call reports `StorageUnavailable` until a restart.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compensation::{export_payouts, payout_for, Payout};
use crate::config::StudyConfig;
use crate::export::{scores_from_rows, AggregateParams, RatingRow, RowVerdict};
use crate::ids::{DatasetId, ExternalIds, ImageId, Millis, SessionId, StudyTarget};
use crate::plate::{generate_plate, PlateError, PlateMeta, PlateSpec};
use crate::pool::{ImageKind, ImagePool, ImageRecord, IngestSummary, PoolError, SlotCounts, SlotOutcome};
use crate::protocol::{
    PairCandidates, PlateAnswer, PlateKey, ProtocolError, Session, SessionState, Side, Transition,
};
use crate::quality::{evaluate, AttentionTargets, QualityVerdict, Verdict};
use crate::seeding::{child_seed, mix, STREAM_SESSION_SEEDS};
use crate::stats::{leaderboard, required_participants, LeaderboardEntry, ParticipantPlan, StatsError};

pub trait Clock: Send + Sync {
    fn now(&self) -> Millis;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Millis {
        Millis::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: Millis) -> Self {
        Self(AtomicU64::new(start.0))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn set(&self, t: Millis) {
        self.0.store(t.0, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Millis {
        Millis(self.0.load(Ordering::SeqCst))
    }
}

/// How hard an append is pushed towards the disk before acknowledging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// `fdatasync` after every event.
    #[default]
    Fsync,
    /// Written to the OS; survives a process kill, not a power cut.
    Flush,
    /// No log at all.
    Memory,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSettings {
    pub study: StudyConfig,
    /// Recruiting-platform study id -> the target it evaluates.
    pub studies: BTreeMap<String, StudyTarget>,
    /// Root of session seeds and ids.
    pub seed: u64,
    pub aggregate: AggregateParams,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Plate(#[from] PlateError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("participant {0} already has a session")]
    DuplicateParticipant(String),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("no partitioned study matches {0:?}")]
    UnknownStudy(String),
    #[error("session {session} has ended ({state})")]
    SessionEnded { session: SessionId, state: SessionState },
    #[error("file behind image {0} no longer matches its id")]
    ImageMismatch(ImageId),
    #[error("plate {index} is not on display")]
    PlateNotAvailable { index: usize },
    #[error("idempotency key {0:?} was already used for a different request")]
    IdempotencyConflict(String),
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("event log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EngineError {
    /// Machine-readable error name used on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::Protocol(e) => e.kind(),
            EngineError::Pool(PoolError::ManifestRowInvalid { .. }) => "manifest_row_invalid",
            EngineError::Pool(PoolError::InsufficientPool { .. }) => "insufficient_pool",
            EngineError::Pool(PoolError::AlreadyPartitioned(_)) => "already_partitioned",
            EngineError::Pool(PoolError::UnknownTarget(_)) => "unknown_study",
            EngineError::Pool(PoolError::NoDatasetAvailable(_)) => "no_dataset_available",
            EngineError::Pool(PoolError::UnknownSlot { .. }) => "unknown_slot",
            EngineError::Pool(PoolError::Io(_)) | EngineError::Io(_) => "io",
            EngineError::Stats(StatsError::NoRatings | StatsError::EmptyInput) => "no_ratings",
            EngineError::Stats(_) => "invalid_parameter",
            EngineError::Plate(_) => "plate_generation",
            EngineError::Config(_) => "invalid_config",
            EngineError::DuplicateParticipant(_) => "duplicate_participant",
            EngineError::UnknownSession(_) => "unknown_session",
            EngineError::UnknownImage(_) => "unknown_image",
            EngineError::UnknownStudy(_) => "unknown_study",
            EngineError::SessionEnded { .. } => "session_ended",
            EngineError::ImageMismatch(_) => "image_mismatch",
            EngineError::PlateNotAvailable { .. } => "plate_not_available",
            EngineError::IdempotencyConflict(_) => "idempotency_conflict",
            EngineError::StorageUnavailable(_) => "storage_unavailable",
            EngineError::CorruptLog { .. } => "corrupt_log",
        }
    }
}

/// A participant's response to the current item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Answer {
    Colorblind {
        index: usize,
        answer: PlateAnswer,
    },
    Instructions,
    Comprehension {
        index: usize,
        chosen: Side,
    },
    Main {
        index: usize,
        image_id: ImageId,
        value: i32,
        elapsed_ms: u64,
    },
}

/// What the participant should see next.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum NextItem {
    Colorblind {
        index: usize,
        total: usize,
    },
    Instructions,
    Comprehension {
        index: usize,
        total: usize,
        left: ImageId,
        right: ImageId,
    },
    Main {
        index: usize,
        total: usize,
        image_id: ImageId,
        slider_min: i32,
        slider_max: i32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: SessionId,
    pub participant_id: String,
    pub target: StudyTarget,
    pub state: SessionState,
    pub dataset_id: Option<DatasetId>,
    pub cursor: Option<usize>,
    pub created_at: Millis,
    pub last_active_at: Millis,
}

impl SessionView {
    fn of(s: &Session) -> Self {
        Self {
            session_id: s.session_id.clone(),
            participant_id: s.external_ids.participant_id.clone(),
            target: s.target.clone(),
            state: s.state,
            dataset_id: s.dataset_id,
            cursor: s.cursor(),
            created_at: s.created_at,
            last_active_at: s.last_active_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerAck {
    pub session_id: SessionId,
    pub transition: Transition,
    pub state: SessionState,
    pub cursor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<QualityVerdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub target: StudyTarget,
    pub first_dataset: DatasetId,
    pub datasets: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStatus {
    pub dataset_id: DatasetId,
    pub counts: SlotCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetStatus {
    pub target: StudyTarget,
    pub plan: ParticipantPlan,
    pub datasets: Vec<DatasetStatus>,
    /// Every dataset holds at least the minimum of valid slots.
    pub complete: bool,
    pub sessions_by_state: BTreeMap<SessionState, usize>,
    /// Sessions that claimed a slot, whatever happened afterwards.
    pub main_study_entrants: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignStatus {
    pub targets: Vec<TargetStatus>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Event {
    Ingested {
        records: Vec<ImageRecord>,
    },
    Partitioned {
        target: StudyTarget,
        seed: u64,
    },
    SessionCreated {
        session_id: SessionId,
        external_ids: ExternalIds,
        target: StudyTarget,
        rng_seed: u64,
        at: Millis,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key: Option<String>,
    },
    Answered {
        session_id: SessionId,
        answer: Answer,
        at: Millis,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key: Option<String>,
    },
    Expired {
        session_id: SessionId,
        at: Millis,
    },
    Abandoned {
        session_id: SessionId,
        at: Millis,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key: Option<String>,
    },
}

#[derive(Debug, Clone)]
enum Remembered {
    Ingested(IngestSummary),
    Created(SessionView),
    Answered(AnswerAck),
    Abandoned(Payout),
}

#[derive(Debug, Default)]
struct State {
    pool: ImagePool,
    registry: crate::pool::DatasetRegistry,
    sessions: HashMap<SessionId, Session>,
    by_participant: HashMap<String, SessionId>,
    live: BTreeSet<SessionId>,
    verdicts: HashMap<SessionId, QualityVerdict>,
    entrants: HashMap<StudyTarget, usize>,
    pair_pool: BTreeMap<StudyTarget, (Vec<ImageId>, Vec<ImageId>)>,
    idempotency: HashMap<String, (String, Remembered)>,
    sessions_created: u64,
}

impl State {
    fn session_mut(&mut self, id: &SessionId) -> Result<&mut Session, EngineError> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| EngineError::UnknownSession(id.clone()))
    }

    fn remember(&mut self, key: &Option<String>, fingerprint: String, response: Remembered) {
        if let Some(k) = key {
            self.idempotency.insert(k.clone(), (fingerprint, response));
        }
    }

    fn recall(&self, key: Option<&str>, fingerprint: &str) -> Result<Option<Remembered>, EngineError> {
        let Some(k) = key else { return Ok(None) };
        match self.idempotency.get(k) {
            Some((fp, r)) if fp == fingerprint => Ok(Some(r.clone())),
            Some(_) => Err(EngineError::IdempotencyConflict(k.to_string())),
            None => Ok(None),
        }
    }

    fn attention_targets(&self, dataset: DatasetId) -> AttentionTargets {
        self.registry
            .get(dataset)
            .map(|d| {
                d.attention_ids
                    .iter()
                    .filter_map(|id| Some((id.clone(), self.pool.get(id)?.attention_target?)))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn apply(&mut self, settings: &EngineSettings, event: &Event) -> Result<Option<Remembered>, EngineError> {
        let cfg = &settings.study;
        match event {
            Event::Ingested { records } => Ok(Some(Remembered::Ingested(self.pool.add_records(records.clone())))),
            Event::Partitioned { target, seed } => {
                self.registry.add_partition(&self.pool, target, cfg, *seed)?;
                let candidates = (
                    self.pool.ids_for(target, ImageKind::Unmodified),
                    self.pool.ids_for(target, ImageKind::Adversarial),
                );
                self.pair_pool.insert(target.clone(), candidates);
                Ok(None)
            }
            Event::SessionCreated {
                session_id,
                external_ids,
                target,
                rng_seed,
                at,
                key,
            } => {
                if let Some(prior) = self.by_participant.get(&external_ids.participant_id) {
                    if self.sessions[prior].state != SessionState::Expired {
                        return Err(EngineError::DuplicateParticipant(external_ids.participant_id.clone()));
                    }
                }
                if self.registry.partition_info(target).is_none() {
                    return Err(EngineError::UnknownStudy(target.to_string()));
                }
                let session = Session::create(
                    session_id.clone(),
                    external_ids.clone(),
                    target.clone(),
                    cfg,
                    *rng_seed,
                    *at,
                );
                let view = SessionView::of(&session);
                self.by_participant
                    .insert(external_ids.participant_id.clone(), session_id.clone());
                self.live.insert(session_id.clone());
                self.sessions.insert(session_id.clone(), session);
                self.sessions_created += 1;
                let response = Remembered::Created(view);
                self.remember(key, create_fingerprint(external_ids), response.clone());
                Ok(Some(response))
            }
            Event::Answered {
                session_id,
                answer,
                at,
                key,
            } => {
                let ack = self.apply_answer(cfg, session_id, answer, *at)?;
                let response = Remembered::Answered(ack);
                self.remember(key, answer_fingerprint(session_id, answer), response.clone());
                Ok(Some(response))
            }
            Event::Expired { session_id, at } => {
                let session = self.session_mut(session_id)?;
                let (_, released) = session
                    .expire(cfg, *at)
                    .ok_or(ProtocolError::InvalidState {
                        state: session.state,
                        action: "expiry",
                    })?;
                self.live.remove(session_id);
                if let Some(d) = released {
                    self.registry.settle_slot(d, session_id, SlotOutcome::Expired)?;
                }
                Ok(None)
            }
            Event::Abandoned { session_id, at, key } => {
                let session = self.session_mut(session_id)?;
                let (_, released) = session.abandon(*at)?;
                let payout = payout_for(session, cfg).expect("abandoned sessions are terminal");
                self.live.remove(session_id);
                if let Some(d) = released {
                    self.registry.settle_slot(d, session_id, SlotOutcome::Expired)?;
                }
                let response = Remembered::Abandoned(payout);
                self.remember(key, abandon_fingerprint(session_id), response.clone());
                Ok(Some(response))
            }
        }
    }

    fn apply_answer(
        &mut self,
        cfg: &StudyConfig,
        session_id: &SessionId,
        answer: &Answer,
        at: Millis,
    ) -> Result<AnswerAck, EngineError> {
        let State {
            sessions,
            registry,
            pair_pool,
            entrants,
            ..
        } = self;
        let session = sessions
            .get_mut(session_id)
            .ok_or_else(|| EngineError::UnknownSession(session_id.clone()))?;
        let transition = match answer {
            Answer::Colorblind { index, answer } => session.submit_plate_answer(cfg, *index, *answer, at)?,
            Answer::Instructions => {
                let (unmodified, adversarial) = pair_pool
                    .get(&session.target)
                    .ok_or_else(|| EngineError::UnknownStudy(session.target.to_string()))?;
                session.acknowledge_instructions(
                    cfg,
                    PairCandidates {
                        unmodified,
                        adversarial,
                    },
                    at,
                )?
            }
            Answer::Comprehension { index, chosen } => {
                session.submit_pair_answer(cfg, *index, *chosen, at, |s| {
                    let id = registry
                        .claim_slot(&s.target, &s.session_id, cfg)
                        .map_err(|_| ProtocolError::NoDatasetAvailable)?;
                    let items = registry.get(id).expect("claimed dataset exists").items();
                    Ok((id, items))
                })?
            }
            Answer::Main {
                index,
                image_id,
                value,
                elapsed_ms,
            } => session.submit_rating(cfg, *index, image_id, *value, *elapsed_ms, at)?,
        };
        if transition.to == SessionState::MainStudy && transition.changed() {
            *entrants.entry(session.target.clone()).or_default() += 1;
        }
        let state = session.state;
        let cursor = session.cursor();
        if state.is_terminal() {
            self.live.remove(session_id);
        }
        let mut verdict = None;
        if transition.changed() && state == SessionState::Completed {
            let session = &self.sessions[session_id];
            let dataset = session.dataset_id.expect("completed sessions hold a dataset");
            let targets = self.attention_targets(dataset);
            let v = evaluate(session_id, &session.stage_results.ratings, &targets, cfg);
            let outcome = match v.verdict {
                Verdict::Valid => SlotOutcome::Valid,
                Verdict::Excluded => SlotOutcome::Excluded,
            };
            self.registry.settle_slot(dataset, session_id, outcome)?;
            self.verdicts.insert(session_id.clone(), v.clone());
            verdict = Some(v);
        }
        Ok(AnswerAck {
            session_id: session_id.clone(),
            transition,
            state,
            cursor,
            verdict,
        })
    }
}

fn create_fingerprint(ids: &ExternalIds) -> String {
    format!("create:{}", serde_json::to_string(ids).expect("serializable"))
}

fn answer_fingerprint(session: &SessionId, answer: &Answer) -> String {
    format!("answer:{session}:{}", serde_json::to_string(answer).expect("serializable"))
}

fn abandon_fingerprint(session: &SessionId) -> String {
    format!("abandon:{session}")
}

struct EventLog {
    file: Option<File>,
    durability: Durability,
    /// Appends left before an injected failure.
    fail_in: Option<u64>,
}

impl EventLog {
    fn append(&mut self, event: &Event) -> io::Result<()> {
        let Some(file) = self.file.as_mut() else { return Ok(()) };
        if let Some(n) = self.fail_in.as_mut() {
            if *n == 0 {
                return Err(io::Error::other("injected storage fault"));
            }
            *n -= 1;
        }
        let mut line = serde_json::to_vec(event).map_err(io::Error::from)?;
        line.push(b'\n');
        file.write_all(&line)?;
        if self.durability == Durability::Fsync {
            file.sync_data()?;
        }
        Ok(())
    }
}

/// Reads the log, dropping a torn final line. Returns the events and the
/// byte length of the intact prefix.
fn read_log(path: &Path) -> Result<(Vec<Event>, u64), EngineError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    let mut good = 0u64;
    let mut buf = Vec::new();
    let mut line = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line += 1;
        if buf.last() != Some(&b'\n') {
            // only the final line can be torn
            break;
        }
        match serde_json::from_slice::<Event>(&buf) {
            Ok(e) => {
                events.push(e);
                good += n as u64;
            }
            Err(e) => {
                return Err(EngineError::CorruptLog {
                    line,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok((events, good))
}

pub const LOG_FILE: &str = "events.jsonl";

pub struct Engine {
    settings: EngineSettings,
    clock: Arc<dyn Clock>,
    state: RwLock<State>,
    log: Mutex<EventLog>,
    poisoned: AtomicBool,
    data_dir: Option<PathBuf>,
}

impl Engine {
    pub fn in_memory(settings: EngineSettings, clock: Arc<dyn Clock>) -> Result<Self, EngineError> {
        Self::build(settings, clock, None, Durability::Memory)
    }

    /// Opens (or creates) the data directory and replays its event log.
    pub fn open(
        dir: &Path,
        durability: Durability,
        settings: EngineSettings,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, EngineError> {
        Self::build(settings, clock, Some(dir.to_path_buf()), durability)
    }

    fn build(
        settings: EngineSettings,
        clock: Arc<dyn Clock>,
        dir: Option<PathBuf>,
        durability: Durability,
    ) -> Result<Self, EngineError> {
        settings.study.validate()?;
        let mut state = State::default();
        let mut file = None;
        if let (Some(dir), false) = (&dir, durability == Durability::Memory) {
            fs::create_dir_all(dir)?;
            let path = dir.join(LOG_FILE);
            if path.exists() {
                let (events, good) = read_log(&path)?;
                for (i, event) in events.iter().enumerate() {
                    state.apply(&settings, event).map_err(|e| EngineError::CorruptLog {
                        line: i + 1,
                        reason: format!("replay rejected: {e}"),
                    })?;
                }
                let f = OpenOptions::new().write(true).open(&path)?;
                f.set_len(good)?;
                file = Some(f);
            } else {
                file = Some(File::create(&path)?);
            }
            if let Some(f) = file.as_mut() {
                f.seek(SeekFrom::End(0))?;
            }
        }
        Ok(Self {
            settings,
            clock,
            state: RwLock::new(state),
            log: Mutex::new(EventLog {
                file,
                durability,
                fail_in: None,
            }),
            poisoned: AtomicBool::new(false),
            data_dir: dir,
        })
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    pub fn config(&self) -> &StudyConfig {
        &self.settings.study
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    /// Makes the append after the next `after` appends fail.
    #[doc(hidden)]
    pub fn inject_storage_fault(&self, after: u64) {
        self.log.lock().fail_in = Some(after);
    }

    fn check_available(&self) -> Result<(), EngineError> {
        if self.poisoned.load(Ordering::SeqCst) {
            Err(EngineError::StorageUnavailable("event log write failed earlier; restart required".into()))
        } else {
            Ok(())
        }
    }

    /// Applies an event and logs it; the write lock is held across both so
    /// log order equals apply order.
    fn commit(&self, state: &mut State, event: Event) -> Result<Option<Remembered>, EngineError> {
        let out = state.apply(&self.settings, &event)?;
        if let Err(e) = self.log.lock().append(&event) {
            self.poisoned.store(true, Ordering::SeqCst);
            return Err(EngineError::StorageUnavailable(e.to_string()));
        }
        Ok(out)
    }

    fn sweep_locked(&self, state: &mut State, now: Millis) -> Result<usize, EngineError> {
        let cfg = &self.settings.study;
        let stale: Vec<SessionId> = state
            .live
            .iter()
            .filter(|id| state.sessions[*id].is_stale(cfg, now))
            .cloned()
            .collect();
        for id in &stale {
            self.commit(state, Event::Expired { session_id: id.clone(), at: now })?;
        }
        Ok(stale.len())
    }

    /// Expires every session idle past the TTL, releasing its slot.
    pub fn expire_stale(&self) -> Result<usize, EngineError> {
        self.check_available()?;
        let now = self.clock.now();
        let cfg = &self.settings.study;
        let any = {
            let s = self.state.read();
            s.live.iter().any(|id| s.sessions[id].is_stale(cfg, now))
        };
        if !any {
            return Ok(0);
        }
        self.sweep_locked(&mut self.state.write(), now)
    }

    pub fn ingest_manifest<R: BufRead>(&self, reader: R, image_root: &Path) -> Result<IngestSummary, EngineError> {
        self.check_available()?;
        let records = crate::pool::parse_manifest(reader, image_root, &self.settings.study)?;
        self.ingest_records(records)
    }

    /// Adds records whose ids were already checked against their files.
    pub fn ingest_records(&self, records: Vec<ImageRecord>) -> Result<IngestSummary, EngineError> {
        self.check_available()?;
        let mut state = self.state.write();
        match self.commit(&mut state, Event::Ingested { records })? {
            Some(Remembered::Ingested(summary)) => Ok(summary),
            _ => unreachable!("ingestion returns a summary"),
        }
    }

    /// Partitions a target's pool into datasets. Repeating the call with the
    /// same seed returns the existing partition.
    pub fn partition(&self, target: &StudyTarget, seed: u64) -> Result<PartitionSummary, EngineError> {
        self.check_available()?;
        let mut state = self.state.write();
        if let Some(info) = state.registry.partition_info(target) {
            if info.seed != seed {
                return Err(PoolError::AlreadyPartitioned(target.clone()).into());
            }
            return Ok(PartitionSummary {
                target: target.clone(),
                first_dataset: DatasetId(info.first_id),
                datasets: info.count as usize,
            });
        }
        self.commit(
            &mut state,
            Event::Partitioned {
                target: target.clone(),
                seed,
            },
        )?;
        let info = state.registry.partition_info(target).expect("just partitioned");
        Ok(PartitionSummary {
            target: target.clone(),
            first_dataset: DatasetId(info.first_id),
            datasets: info.count as usize,
        })
    }

    /// Picks the target for a recruiting-platform study id: a configured
    /// mapping, an `attack@model` literal, or the only partitioned target.
    pub fn resolve_study(&self, study: Option<&str>) -> Result<StudyTarget, EngineError> {
        let state = self.state.read();
        if let Some(s) = study.filter(|s| !s.is_empty()) {
            if let Some(t) = self.settings.studies.get(s) {
                return Ok(t.clone());
            }
            if let Some((attack, model)) = s.split_once('@') {
                let t = StudyTarget::new(attack, model);
                if state.registry.partition_info(&t).is_some() {
                    return Ok(t);
                }
            }
        }
        let mut targets = state.registry.targets();
        match (targets.next(), targets.next()) {
            (Some(t), None) => Ok(t.clone()),
            _ => Err(EngineError::UnknownStudy(study.unwrap_or_default().to_string())),
        }
    }

    pub fn create_session(
        &self,
        external_ids: ExternalIds,
        target: &StudyTarget,
        key: Option<&str>,
    ) -> Result<SessionView, EngineError> {
        self.check_available()?;
        let now = self.clock.now();
        let mut state = self.state.write();
        if let Some(Remembered::Created(v)) = state.recall(key, &create_fingerprint(&external_ids))? {
            return Ok(v);
        }
        self.sweep_locked(&mut state, now)?;
        let base = mix(self.settings.seed ^ STREAM_SESSION_SEEDS.rotate_left(32));
        let mut n = state.sessions_created;
        let (rng_seed, session_id) = loop {
            let seed = child_seed(base, n);
            let id = SessionId::from_seed(seed);
            if !state.sessions.contains_key(&id) {
                break (seed, id);
            }
            n += 1;
        };
        let event = Event::SessionCreated {
            session_id,
            external_ids,
            target: target.clone(),
            rng_seed,
            at: now,
            key: key.map(str::to_string),
        };
        match self.commit(&mut state, event)? {
            Some(Remembered::Created(v)) => Ok(v),
            _ => unreachable!("session creation returns a view"),
        }
    }

    pub fn answer(&self, session_id: &SessionId, answer: Answer, key: Option<&str>) -> Result<AnswerAck, EngineError> {
        self.check_available()?;
        let now = self.clock.now();
        let mut state = self.state.write();
        if let Some(Remembered::Answered(ack)) = state.recall(key, &answer_fingerprint(session_id, &answer))? {
            return Ok(ack);
        }
        let was_live = state.live.contains(session_id);
        self.sweep_locked(&mut state, now)?;
        if was_live && !state.live.contains(session_id) {
            return Err(EngineError::SessionEnded {
                session: session_id.clone(),
                state: SessionState::Expired,
            });
        }
        state.session_mut(session_id)?;
        let event = Event::Answered {
            session_id: session_id.clone(),
            answer,
            at: now,
            key: key.map(str::to_string),
        };
        match self.commit(&mut state, event)? {
            Some(Remembered::Answered(ack)) => Ok(ack),
            _ => unreachable!("answers return an acknowledgement"),
        }
    }

    pub fn abandon(&self, session_id: &SessionId, key: Option<&str>) -> Result<Payout, EngineError> {
        self.check_available()?;
        let now = self.clock.now();
        let mut state = self.state.write();
        if let Some(Remembered::Abandoned(p)) = state.recall(key, &abandon_fingerprint(session_id))? {
            return Ok(p);
        }
        state.session_mut(session_id)?;
        let event = Event::Abandoned {
            session_id: session_id.clone(),
            at: now,
            key: key.map(str::to_string),
        };
        match self.commit(&mut state, event)? {
            Some(Remembered::Abandoned(p)) => Ok(p),
            _ => unreachable!("abandonment returns a payout"),
        }
    }

    pub fn session(&self, session_id: &SessionId) -> Result<Session, EngineError> {
        self.check_available()?;
        self.expire_stale()?;
        self.state
            .read()
            .sessions
            .get(session_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownSession(session_id.clone()))
    }

    pub fn session_view(&self, session_id: &SessionId) -> Result<SessionView, EngineError> {
        self.session(session_id).map(|s| SessionView::of(&s))
    }

    pub fn verdict(&self, session_id: &SessionId) -> Option<QualityVerdict> {
        self.state.read().verdicts.get(session_id).cloned()
    }

    /// The item the session is waiting on. Terminal sessions report
    /// `SessionEnded` with their final state.
    pub fn next_item(&self, session_id: &SessionId) -> Result<NextItem, EngineError> {
        let s = self.session(session_id)?;
        let cfg = &self.settings.study;
        Ok(match s.state {
            SessionState::Created | SessionState::ColorblindCheck => NextItem::Colorblind {
                index: s.stage_progress.plates,
                total: cfg.plate_count,
            },
            SessionState::Instructions => NextItem::Instructions,
            SessionState::ComprehensionCheck => {
                let pair = &s.pairs[s.stage_progress.pairs];
                NextItem::Comprehension {
                    index: s.stage_progress.pairs,
                    total: cfg.pair_count,
                    left: pair.left.clone(),
                    right: pair.right.clone(),
                }
            }
            SessionState::MainStudy => NextItem::Main {
                index: s.stage_progress.items,
                total: cfg.main_item_count,
                image_id: s.order[s.stage_progress.items].clone(),
                slider_min: cfg.slider_min,
                slider_max: cfg.slider_max,
            },
            state => {
                return Err(EngineError::SessionEnded {
                    session: session_id.clone(),
                    state,
                })
            }
        })
    }

    fn current_plate(&self, session_id: &SessionId, index: usize) -> Result<PlateKey, EngineError> {
        let s = self.session(session_id)?;
        if s.state != SessionState::ColorblindCheck || index != s.stage_progress.plates {
            return Err(EngineError::PlateNotAvailable { index });
        }
        Ok(s.plates[index])
    }

    /// PNG of the plate currently shown to the session. Only the plate at
    /// the cursor is served.
    pub fn plate_png(&self, session_id: &SessionId, index: usize) -> Result<Vec<u8>, EngineError> {
        let key = self.current_plate(session_id, index)?;
        Ok(generate_plate(&PlateSpec::new(key.digit, key.seed))?.png_bytes()?)
    }

    /// Schedule entry of any plate of a session, including its answer.
    pub fn plate_key(&self, session_id: &SessionId, index: usize) -> Result<PlateKey, EngineError> {
        let s = self.session(session_id)?;
        s.plates
            .get(index)
            .copied()
            .ok_or(EngineError::PlateNotAvailable { index })
    }

    pub fn plate_meta(&self, session_id: &SessionId, index: usize) -> Result<PlateMeta, EngineError> {
        let key = self.plate_key(session_id, index)?;
        Ok(generate_plate(&PlateSpec::new(key.digit, key.seed))?.meta())
    }

    pub fn image_record(&self, image_id: &ImageId) -> Result<ImageRecord, EngineError> {
        self.state
            .read()
            .pool
            .get(image_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownImage(image_id.clone()))
    }

    pub fn image_bytes(&self, image_id: &ImageId) -> Result<Vec<u8>, EngineError> {
        let record = self.image_record(image_id)?;
        let bytes = fs::read(&record.path)?;
        if &ImageId::of_bytes(&bytes) != image_id {
            return Err(EngineError::ImageMismatch(image_id.clone()));
        }
        Ok(bytes)
    }

    pub fn pool_records(&self) -> Vec<ImageRecord> {
        self.state.read().pool.records().cloned().collect()
    }

    pub fn export_database(&self, dir: &Path) -> Result<usize, EngineError> {
        Ok(self.state.read().pool.export_database(dir)?)
    }

    pub fn datasets(&self) -> Vec<crate::pool::StudyDataset> {
        self.state.read().registry.datasets().to_vec()
    }

    /// All ratings of sessions that hold a dataset, by session then position.
    pub fn rating_rows(&self) -> Vec<RatingRow> {
        let state = self.state.read();
        let mut sessions: Vec<&Session> = state.sessions.values().filter(|s| s.dataset_id.is_some()).collect();
        sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        let mut rows = Vec::new();
        for s in sessions {
            let verdict = match state.verdicts.get(&s.session_id).map(|v| v.verdict) {
                Some(Verdict::Valid) => RowVerdict::Valid,
                Some(Verdict::Excluded) => RowVerdict::Excluded,
                None => RowVerdict::Pending,
            };
            for r in &s.stage_results.ratings {
                let kind = state.pool.get(&r.image_id).map_or(ImageKind::Unmodified, |rec| rec.kind);
                rows.push(RatingRow {
                    session: s.session_id.clone(),
                    image: r.image_id.clone(),
                    kind,
                    value: r.value,
                    elapsed_ms: r.elapsed_ms,
                    verdict,
                    attack: s.target.attack.clone(),
                    victim_model: s.target.model.clone(),
                });
            }
        }
        rows
    }

    pub fn payouts(&self) -> Vec<Payout> {
        let state = self.state.read();
        let mut out: Vec<Payout> = state
            .sessions
            .values()
            .filter_map(|s| payout_for(s, &self.settings.study).ok())
            .collect();
        out.sort_by(|a, b| {
            a.participant_id
                .cmp(&b.participant_id)
                .then_with(|| a.session_id.cmp(&b.session_id))
        });
        out
    }

    pub fn write_payouts<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let state = self.state.read();
        export_payouts(state.sessions.values(), &self.settings.study, out)
    }

    /// Leaderboard over the valid ratings, optionally for one victim model.
    pub fn leaderboard(&self, model: Option<&str>) -> Result<Vec<LeaderboardEntry>, EngineError> {
        let rows = self.rating_rows();
        let scores = scores_from_rows(&rows, self.settings.aggregate)?;
        let scores: Vec<_> = scores
            .into_iter()
            .filter(|s| model.is_none_or(|m| s.victim_model == m))
            .collect();
        Ok(leaderboard(&scores))
    }

    pub fn campaign_status(&self) -> CampaignStatus {
        let state = self.state.read();
        let cfg = &self.settings.study;
        let targets = state
            .registry
            .targets()
            .map(|t| {
                let datasets: Vec<DatasetStatus> = state
                    .registry
                    .for_target(t)
                    .map(|d| DatasetStatus {
                        dataset_id: d.dataset_id,
                        counts: d.counts(),
                    })
                    .collect();
                let mut sessions_by_state = BTreeMap::new();
                for s in state.sessions.values().filter(|s| &s.target == t) {
                    *sessions_by_state.entry(s.state).or_insert(0) += 1;
                }
                TargetStatus {
                    target: t.clone(),
                    plan: required_participants(cfg),
                    complete: datasets.iter().all(|d| d.counts.valid >= cfg.ratings_per_image_min),
                    datasets,
                    sessions_by_state,
                    main_study_entrants: state.entrants.get(t).copied().unwrap_or(0),
                }
            })
            .collect();
        CampaignStatus { targets }
    }

    pub fn session_count(&self) -> usize {
        self.state.read().sessions.len()
    }
}
