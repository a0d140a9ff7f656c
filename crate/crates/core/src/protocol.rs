//! Participant session state machine.
//!
//! A session walks `ColorblindCheck -> Instructions -> ComprehensionCheck ->
//! MainStudy -> Completed`, may fail out of either check, and may expire or
//! be abandoned from any non-terminal state. Items are served one at a time
//! and answers are final. All shuffles derive from the session's `rng_seed`,
//! so replaying an answer stream reproduces the session exactly.
//!
//! The state machine is pure: it never touches storage or other sessions.
//! Cross-session effects (claiming a dataset slot) are injected by the
//! caller as a closure that either succeeds or leaves the session untouched.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::config::StudyConfig;
use crate::ids::{DatasetId, ExternalIds, ImageId, Millis, SessionId, StudyTarget};
use crate::seeding::{substream, STREAM_ORDER, STREAM_PAIRS, STREAM_PLATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Created,
    ColorblindCheck,
    Instructions,
    ComprehensionCheck,
    MainStudy,
    Completed,
    FailedColorblind,
    FailedComprehension,
    Expired,
    Abandoned,
}

impl SessionState {
    pub const ALL: [SessionState; 10] = [
        SessionState::Created,
        SessionState::ColorblindCheck,
        SessionState::Instructions,
        SessionState::ComprehensionCheck,
        SessionState::MainStudy,
        SessionState::Completed,
        SessionState::FailedColorblind,
        SessionState::FailedComprehension,
        SessionState::Expired,
        SessionState::Abandoned,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            SessionState::Completed
                | SessionState::FailedColorblind
                | SessionState::FailedComprehension
                | SessionState::Expired
                | SessionState::Abandoned
        )
    }

    /// The transition relation. Anything not listed here is undefined.
    pub fn allows(self, next: SessionState) -> bool {
        use SessionState::*;
        match (self, next) {
            (Created, ColorblindCheck)
            | (ColorblindCheck, Instructions)
            | (ColorblindCheck, FailedColorblind)
            | (Instructions, ComprehensionCheck)
            | (ComprehensionCheck, MainStudy)
            | (ComprehensionCheck, FailedComprehension)
            | (MainStudy, Completed) => true,
            (from, Expired | Abandoned) => !from.is_terminal(),
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Created => "created",
            SessionState::ColorblindCheck => "colorblind_check",
            SessionState::Instructions => "instructions",
            SessionState::ComprehensionCheck => "comprehension_check",
            SessionState::MainStudy => "main_study",
            SessionState::Completed => "completed",
            SessionState::FailedColorblind => "failed_colorblind",
            SessionState::FailedComprehension => "failed_comprehension",
            SessionState::Expired => "expired",
            SessionState::Abandoned => "abandoned",
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SessionState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SessionState::ALL
            .into_iter()
            .find(|state| state.as_str() == s)
            .ok_or_else(|| format!("unknown session state {s:?}"))
    }
}

/// What a participant reports seeing on a plate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlateAnswer {
    Digit(u8),
    NoDigit,
}

impl PlateAnswer {
    pub fn from_digit(digit: Option<u8>) -> Self {
        digit.map_or(PlateAnswer::NoDigit, PlateAnswer::Digit)
    }
}

impl fmt::Display for PlateAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlateAnswer::Digit(d) => write!(f, "{d}"),
            PlateAnswer::NoDigit => f.write_str("none"),
        }
    }
}

impl FromStr for PlateAnswer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(PlateAnswer::NoDigit),
            _ => match s.parse::<u8>() {
                Ok(d) if d <= 9 => Ok(PlateAnswer::Digit(d)),
                _ => Err(format!("expected a digit 0-9 or \"none\", got {s:?}")),
            },
        }
    }
}

impl Serialize for PlateAnswer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PlateAnswer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) if n <= 9 => Ok(PlateAnswer::Digit(n as u8)),
            Raw::Num(n) => Err(serde::de::Error::custom(format!("digit out of range: {n}"))),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// One colorblindness plate as scheduled for a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlateKey {
    pub digit: Option<u8>,
    pub seed: u64,
}

impl PlateKey {
    pub fn answer(&self) -> PlateAnswer {
        PlateAnswer::from_digit(self.digit)
    }
}

/// One comprehension pair: an unmodified and a modified image side by side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairItem {
    pub left: ImageId,
    pub right: ImageId,
    pub modified: Side,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlateResult {
    pub index: usize,
    pub answer: PlateAnswer,
    pub correct: bool,
    pub at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairResult {
    pub index: usize,
    pub chosen: Side,
    pub correct: bool,
    pub at: Millis,
}

/// One slider response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub session_id: SessionId,
    pub image_id: ImageId,
    pub position: usize,
    pub value: i32,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageProgress {
    pub plates: usize,
    pub pairs: usize,
    pub items: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageResults {
    pub plates: Vec<PlateResult>,
    pub pairs: Vec<PairResult>,
    pub ratings: Vec<Rating>,
}

/// Images of one study dataset, as handed to a session when it claims a slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetItems {
    pub unmodified: Vec<ImageId>,
    pub adversarial: Vec<ImageId>,
    pub attention: Vec<ImageId>,
}

/// Images the comprehension pairs are drawn from.
#[derive(Debug, Clone, Copy)]
pub struct PairCandidates<'a> {
    pub unmodified: &'a [ImageId],
    pub adversarial: &'a [ImageId],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: SessionState,
    pub to: SessionState,
}

impl Transition {
    pub fn changed(&self) -> bool {
        self.from != self.to
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("{action} is not allowed in state {state}")]
    InvalidState { state: SessionState, action: &'static str },
    #[error("answer for item {got} arrived but the cursor is at {expected}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("image {got} is not the current item (expected {expected})")]
    UnexpectedImage { expected: ImageId, got: ImageId },
    #[error("slider value {value} outside [{min}, {max}]")]
    ValueOutOfRange { value: i32, min: i32, max: i32 },
    #[error("image {0} was already rated in this session")]
    DuplicateRating(ImageId),
    #[error("no dataset has a free slot")]
    NoDatasetAvailable,
    #[error("no images are available for comprehension pairs")]
    NoPairCandidates,
    #[error("undefined transition {from} -> {to}")]
    IllegalTransition { from: SessionState, to: SessionState },
}

impl ProtocolError {
    /// Stable machine-readable name used on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolError::InvalidState { .. } => "invalid_state",
            ProtocolError::OutOfOrder { .. } | ProtocolError::UnexpectedImage { .. } => "out_of_order",
            ProtocolError::ValueOutOfRange { .. } => "value_out_of_range",
            ProtocolError::DuplicateRating(_) => "duplicate_rating",
            ProtocolError::NoDatasetAvailable => "no_dataset_available",
            ProtocolError::NoPairCandidates => "no_pair_candidates",
            ProtocolError::IllegalTransition { .. } => "illegal_transition",
        }
    }
}

/// One participant's traversal of the study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub external_ids: ExternalIds,
    pub target: StudyTarget,
    pub state: SessionState,
    pub dataset_id: Option<DatasetId>,
    pub stage_progress: StageProgress,
    pub stage_results: StageResults,
    pub rng_seed: u64,
    pub plates: Vec<PlateKey>,
    pub pairs: Vec<PairItem>,
    pub order: Vec<ImageId>,
    pub created_at: Millis,
    pub last_active_at: Millis,
}

impl Session {
    /// Opens a session and moves it straight to the colorblindness check.
    pub fn create(
        session_id: SessionId,
        external_ids: ExternalIds,
        target: StudyTarget,
        config: &StudyConfig,
        rng_seed: u64,
        now: Millis,
    ) -> Session {
        let mut session = Session {
            session_id,
            external_ids,
            target,
            state: SessionState::Created,
            dataset_id: None,
            stage_progress: StageProgress::default(),
            stage_results: StageResults::default(),
            rng_seed,
            plates: plate_schedule(rng_seed, config),
            pairs: Vec::new(),
            order: Vec::new(),
            created_at: now,
            last_active_at: now,
        };
        session
            .move_to(SessionState::ColorblindCheck)
            .expect("Created -> ColorblindCheck is always defined");
        session
    }

    fn move_to(&mut self, next: SessionState) -> Result<Transition, ProtocolError> {
        if !self.state.allows(next) {
            return Err(ProtocolError::IllegalTransition {
                from: self.state,
                to: next,
            });
        }
        let from = self.state;
        self.state = next;
        Ok(Transition { from, to: next })
    }

    fn stay(&self) -> Transition {
        Transition {
            from: self.state,
            to: self.state,
        }
    }

    fn require(&self, state: SessionState, action: &'static str) -> Result<(), ProtocolError> {
        if self.state == state {
            Ok(())
        } else {
            Err(ProtocolError::InvalidState {
                state: self.state,
                action,
            })
        }
    }

    pub fn is_stale(&self, config: &StudyConfig, now: Millis) -> bool {
        !self.state.is_terminal() && now.since(self.last_active_at) > config.session_ttl_ms()
    }

    pub fn submit_plate_answer(
        &mut self,
        config: &StudyConfig,
        plate_index: usize,
        answer: PlateAnswer,
        now: Millis,
    ) -> Result<Transition, ProtocolError> {
        self.require(SessionState::ColorblindCheck, "plate answer")?;
        let cursor = self.stage_progress.plates;
        if plate_index != cursor {
            return Err(ProtocolError::OutOfOrder {
                expected: cursor,
                got: plate_index,
            });
        }
        let correct = self.plates[cursor].answer() == answer;
        self.stage_results.plates.push(PlateResult {
            index: plate_index,
            answer,
            correct,
            at: now,
        });
        self.stage_progress.plates += 1;
        self.last_active_at = now;
        if self.stage_progress.plates < config.plate_count {
            return Ok(self.stay());
        }
        let passed = self.stage_results.plates.iter().filter(|p| p.correct).count();
        if passed >= config.plate_pass_min {
            self.move_to(SessionState::Instructions)
        } else {
            self.move_to(SessionState::FailedColorblind)
        }
    }

    /// Confirms the participant saw the instructions and schedules the
    /// comprehension pairs.
    pub fn acknowledge_instructions(
        &mut self,
        config: &StudyConfig,
        candidates: PairCandidates<'_>,
        now: Millis,
    ) -> Result<Transition, ProtocolError> {
        self.require(SessionState::Instructions, "instructions acknowledgement")?;
        let pairs = pair_schedule(self.rng_seed, config, candidates)?;
        self.pairs = pairs;
        self.last_active_at = now;
        self.move_to(SessionState::ComprehensionCheck)
    }

    /// Records a comprehension answer. When the last pair passes, `claim` is
    /// asked for a dataset; if it fails the answer is not recorded.
    pub fn submit_pair_answer<F>(
        &mut self,
        config: &StudyConfig,
        pair_index: usize,
        chosen: Side,
        now: Millis,
        claim: F,
    ) -> Result<Transition, ProtocolError>
    where
        F: FnOnce(&Session) -> Result<(DatasetId, DatasetItems), ProtocolError>,
    {
        self.require(SessionState::ComprehensionCheck, "pair answer")?;
        let cursor = self.stage_progress.pairs;
        if pair_index != cursor {
            return Err(ProtocolError::OutOfOrder {
                expected: cursor,
                got: pair_index,
            });
        }
        let correct = self.pairs[cursor].modified == chosen;
        let result = PairResult {
            index: pair_index,
            chosen,
            correct,
            at: now,
        };
        if cursor + 1 < config.pair_count {
            self.stage_results.pairs.push(result);
            self.stage_progress.pairs += 1;
            self.last_active_at = now;
            return Ok(self.stay());
        }
        let passed = self.stage_results.pairs.iter().filter(|p| p.correct).count() + usize::from(correct);
        if passed < config.pair_pass_min {
            self.stage_results.pairs.push(result);
            self.stage_progress.pairs += 1;
            self.last_active_at = now;
            return self.move_to(SessionState::FailedComprehension);
        }
        let (dataset_id, items) = claim(self)?;
        self.stage_results.pairs.push(result);
        self.stage_progress.pairs += 1;
        self.last_active_at = now;
        self.order = session_order(self.rng_seed, &items);
        self.dataset_id = Some(dataset_id);
        self.move_to(SessionState::MainStudy)
    }

    pub fn submit_rating(
        &mut self,
        config: &StudyConfig,
        position: usize,
        image_id: &ImageId,
        value: i32,
        elapsed_ms: u64,
        now: Millis,
    ) -> Result<Transition, ProtocolError> {
        if self.state == SessionState::Completed {
            return Err(ProtocolError::OutOfOrder {
                expected: self.stage_progress.items,
                got: position,
            });
        }
        self.require(SessionState::MainStudy, "rating")?;
        if self.stage_results.ratings.iter().any(|r| &r.image_id == image_id) {
            return Err(ProtocolError::DuplicateRating(image_id.clone()));
        }
        let cursor = self.stage_progress.items;
        if position != cursor {
            return Err(ProtocolError::OutOfOrder {
                expected: cursor,
                got: position,
            });
        }
        let expected = &self.order[cursor];
        if expected != image_id {
            return Err(ProtocolError::UnexpectedImage {
                expected: expected.clone(),
                got: image_id.clone(),
            });
        }
        if !config.slider_contains(value) {
            return Err(ProtocolError::ValueOutOfRange {
                value,
                min: config.slider_min,
                max: config.slider_max,
            });
        }
        self.stage_results.ratings.push(Rating {
            session_id: self.session_id.clone(),
            image_id: image_id.clone(),
            position,
            value,
            elapsed_ms,
        });
        self.stage_progress.items += 1;
        self.last_active_at = now;
        if self.stage_progress.items < config.main_item_count {
            Ok(self.stay())
        } else {
            self.move_to(SessionState::Completed)
        }
    }

    /// Moves a stale session to `Expired`. Returns the transition and the
    /// dataset slot it held, if any; partial ratings are discarded.
    pub fn expire(
        &mut self,
        config: &StudyConfig,
        now: Millis,
    ) -> Option<(Transition, Option<DatasetId>)> {
        if !self.is_stale(config, now) {
            return None;
        }
        self.leave(SessionState::Expired).ok()
    }

    /// The participant withdrew (e.g. returned the submission on the recruiting platform).
    pub fn abandon(&mut self, now: Millis) -> Result<(Transition, Option<DatasetId>), ProtocolError> {
        if self.state.is_terminal() {
            return Err(ProtocolError::InvalidState {
                state: self.state,
                action: "abandon",
            });
        }
        let out = self.leave(SessionState::Abandoned)?;
        self.last_active_at = now;
        Ok(out)
    }

    fn leave(&mut self, to: SessionState) -> Result<(Transition, Option<DatasetId>), ProtocolError> {
        let transition = self.move_to(to)?;
        let released = self.dataset_id.take();
        if released.is_some() {
            self.stage_results.ratings.clear();
            self.order.clear();
        }
        Ok((transition, released))
    }

    /// The cursor of the active stage, if the session is in one.
    pub fn cursor(&self) -> Option<usize> {
        match self.state {
            SessionState::ColorblindCheck => Some(self.stage_progress.plates),
            SessionState::ComprehensionCheck => Some(self.stage_progress.pairs),
            SessionState::MainStudy => Some(self.stage_progress.items),
            _ => None,
        }
    }

    pub fn completed_colorblind_stage(&self) -> bool {
        self.stage_progress.plates > 0 && self.plates.len() == self.stage_progress.plates
    }
}

/// Digits and seeds for a session's plates: `plate_digit_count` distinct
/// digits plus blanks, in a seeded order.
pub fn plate_schedule(seed: u64, config: &StudyConfig) -> Vec<PlateKey> {
    let mut rng = substream(seed, STREAM_PLATES);
    let mut digits: Vec<u8> = (0..=9).collect();
    digits.shuffle(&mut rng);
    let mut answers: Vec<Option<u8>> = digits
        .into_iter()
        .take(config.plate_digit_count)
        .map(Some)
        .collect();
    answers.resize(config.plate_count, None);
    answers.shuffle(&mut rng);
    answers
        .into_iter()
        .map(|digit| PlateKey {
            digit,
            seed: rng.next_u64(),
        })
        .collect()
}

/// Comprehension pairs. Images are drawn without replacement while the
/// candidate lists last and the modified image's side is a fair coin.
pub fn pair_schedule(
    seed: u64,
    config: &StudyConfig,
    candidates: PairCandidates<'_>,
) -> Result<Vec<PairItem>, ProtocolError> {
    if candidates.unmodified.is_empty() || candidates.adversarial.is_empty() {
        return Err(ProtocolError::NoPairCandidates);
    }
    let mut rng = substream(seed, STREAM_PAIRS);
    let pick = |pool: &[ImageId], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<ImageId> {
        if pool.len() >= config.pair_count {
            pool.choose_multiple(rng, config.pair_count).cloned().collect()
        } else {
            (0..config.pair_count)
                .map(|_| pool.choose(rng).expect("non-empty").clone())
                .collect()
        }
    };
    let clean = pick(candidates.unmodified, &mut rng);
    let modified = pick(candidates.adversarial, &mut rng);
    Ok(clean
        .into_iter()
        .zip(modified)
        .map(|(clean, modified)| {
            if rng.random_bool(0.5) {
                PairItem {
                    left: modified,
                    right: clean,
                    modified: Side::Left,
                }
            } else {
                PairItem {
                    left: clean,
                    right: modified,
                    modified: Side::Right,
                }
            }
        })
        .collect())
}

/// Main-stage order for a session. Regular items are shuffled; attention
/// items go into distinct gaps after regular items, so none is first and no
/// two are adjacent.
pub fn session_order(seed: u64, items: &DatasetItems) -> Vec<ImageId> {
    let mut rng = substream(seed, STREAM_ORDER);
    let mut regular: Vec<ImageId> = items
        .unmodified
        .iter()
        .chain(items.adversarial.iter())
        .cloned()
        .collect();
    regular.shuffle(&mut rng);
    let mut attention = items.attention.clone();
    attention.shuffle(&mut rng);
    assert!(
        attention.len() <= regular.len(),
        "not enough regular items to separate attention items"
    );
    let gaps: HashSet<usize> = rand::seq::index::sample(&mut rng, regular.len(), attention.len())
        .into_iter()
        .collect();
    let mut attention = attention.into_iter();
    let mut order = Vec::with_capacity(regular.len() + items.attention.len());
    for (i, image) in regular.into_iter().enumerate() {
        order.push(image);
        if gaps.contains(&i) {
            order.push(attention.next().expect("one attention item per gap"));
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(prefix: &str, n: usize) -> Vec<ImageId> {
        (0..n).map(|i| ImageId(format!("{prefix}{i:03}"))).collect()
    }

    fn items() -> DatasetItems {
        DatasetItems {
            unmodified: ids("u", 50),
            adversarial: ids("a", 50),
            attention: ids("t", 6),
        }
    }

    fn fresh(config: &StudyConfig, seed: u64) -> Session {
        Session::create(
            SessionId::from_seed(seed),
            ExternalIds::participant("p1"),
            StudyTarget::new("atk", "resnet50"),
            config,
            seed,
            Millis(0),
        )
    }

    fn pass_plates(s: &mut Session, cfg: &StudyConfig, correct: usize) -> Transition {
        let mut last = None;
        for i in 0..cfg.plate_count {
            let truth = s.plates[i].answer();
            let answer = if i < correct {
                truth
            } else {
                match truth {
                    PlateAnswer::NoDigit => PlateAnswer::Digit(8),
                    PlateAnswer::Digit(_) => PlateAnswer::NoDigit,
                }
            };
            last = Some(s.submit_plate_answer(cfg, i, answer, Millis(1)).unwrap());
        }
        last.unwrap()
    }

    #[test]
    fn create_starts_at_colorblind_check() {
        let cfg = StudyConfig::default();
        let s = fresh(&cfg, 1);
        assert_eq!(s.state, SessionState::ColorblindCheck);
        assert_eq!(s.stage_progress, StageProgress::default());
        assert_eq!(s.plates.len(), 5);
        assert_eq!(s.plates.iter().filter(|p| p.digit.is_none()).count(), 1);
        let digits: HashSet<_> = s.plates.iter().filter_map(|p| p.digit).collect();
        assert_eq!(digits.len(), 4);
    }

    #[test]
    fn all_plates_correct_passes() {
        let cfg = StudyConfig::default();
        let mut s = fresh(&cfg, 2);
        let t = pass_plates(&mut s, &cfg, 5);
        assert_eq!(t.to, SessionState::Instructions);
    }

    #[test]
    fn four_of_five_plates_fails() {
        let cfg = StudyConfig::default();
        let mut s = fresh(&cfg, 3);
        let t = pass_plates(&mut s, &cfg, 4);
        assert_eq!(t.to, SessionState::FailedColorblind);
        assert!(s.dataset_id.is_none());
    }

    #[test]
    fn none_on_blank_plate_is_correct() {
        let cfg = StudyConfig::default();
        let mut s = fresh(&cfg, 4);
        let blank = s.plates.iter().position(|p| p.digit.is_none()).unwrap();
        for i in 0..blank {
            let a = s.plates[i].answer();
            s.submit_plate_answer(&cfg, i, a, Millis(1)).unwrap();
        }
        s.submit_plate_answer(&cfg, blank, PlateAnswer::NoDigit, Millis(1)).unwrap();
        assert!(s.stage_results.plates[blank].correct);
    }

    #[test]
    fn plate_out_of_order() {
        let cfg = StudyConfig::default();
        let mut s = fresh(&cfg, 5);
        let err = s
            .submit_plate_answer(&cfg, 1, PlateAnswer::NoDigit, Millis(1))
            .unwrap_err();
        assert_eq!(err, ProtocolError::OutOfOrder { expected: 0, got: 1 });
        assert_eq!(s.stage_progress.plates, 0);
    }

    fn to_comprehension(cfg: &StudyConfig, seed: u64, pool: &DatasetItems) -> Session {
        let mut s = fresh(cfg, seed);
        pass_plates(&mut s, cfg, cfg.plate_count);
        s.acknowledge_instructions(
            cfg,
            PairCandidates {
                unmodified: &pool.unmodified,
                adversarial: &pool.adversarial,
            },
            Millis(2),
        )
        .unwrap();
        s
    }

    fn answer_pairs(s: &mut Session, cfg: &StudyConfig, correct: usize) -> Result<Transition, ProtocolError> {
        let mut last = Ok(s.stay());
        for i in 0..cfg.pair_count {
            let truth = s.pairs[i].modified;
            let chosen = if i < correct { truth } else { truth.other() };
            last = s.submit_pair_answer(cfg, i, chosen, Millis(3), |_| Ok((DatasetId(0), items())));
            last.as_ref().map_err(Clone::clone)?;
        }
        last
    }

    #[test]
    fn comprehension_thresholds() {
        let cfg = StudyConfig::default();
        let pool = items();
        for (correct, expected) in [
            (6, SessionState::MainStudy),
            (5, SessionState::MainStudy),
            (4, SessionState::FailedComprehension),
        ] {
            let mut s = to_comprehension(&cfg, 10 + correct as u64, &pool);
            let t = answer_pairs(&mut s, &cfg, correct).unwrap();
            assert_eq!(t.to, expected, "{correct}/6");
            assert_eq!(s.dataset_id.is_some(), expected == SessionState::MainStudy);
        }
    }

    #[test]
    fn failed_claim_leaves_session_untouched() {
        let cfg = StudyConfig::default();
        let pool = items();
        let mut s = to_comprehension(&cfg, 20, &pool);
        for i in 0..cfg.pair_count - 1 {
            let m = s.pairs[i].modified;
            s.submit_pair_answer(&cfg, i, m, Millis(3), |_| unreachable!()).unwrap();
        }
        let before = s.clone();
        let last = cfg.pair_count - 1;
        let m = s.pairs[last].modified;
        let err = s
            .submit_pair_answer(&cfg, last, m, Millis(4), |_| Err(ProtocolError::NoDatasetAvailable))
            .unwrap_err();
        assert_eq!(err, ProtocolError::NoDatasetAvailable);
        assert_eq!(s, before);
    }

    fn to_main(cfg: &StudyConfig, seed: u64) -> Session {
        let pool = items();
        let mut s = to_comprehension(cfg, seed, &pool);
        answer_pairs(&mut s, cfg, cfg.pair_count).unwrap();
        s
    }

    #[test]
    fn rating_rules() {
        let cfg = StudyConfig::default();
        let mut s = to_main(&cfg, 30);
        let first = s.order[0].clone();
        let err = s.submit_rating(&cfg, 0, &first, 101, 2000, Millis(5)).unwrap_err();
        assert!(matches!(err, ProtocolError::ValueOutOfRange { .. }));
        s.submit_rating(&cfg, 0, &first, -100, 2000, Millis(5)).unwrap();
        let err = s.submit_rating(&cfg, 1, &first, -100, 2000, Millis(5)).unwrap_err();
        assert_eq!(err, ProtocolError::DuplicateRating(first));
        let second = s.order[1].clone();
        let err = s.submit_rating(&cfg, 2, &second, 0, 2000, Millis(5)).unwrap_err();
        assert!(matches!(err, ProtocolError::OutOfOrder { expected: 1, got: 2 }));
    }

    #[test]
    fn hundred_and_sixth_rating_completes() {
        let cfg = StudyConfig::default();
        let mut s = to_main(&cfg, 31);
        let order = s.order.clone();
        for (i, image) in order.iter().enumerate() {
            let t = s.submit_rating(&cfg, i, image, 0, 2000, Millis(6)).unwrap();
            if i + 1 < 106 {
                assert_eq!(t.to, SessionState::MainStudy);
            } else {
                assert_eq!(t.to, SessionState::Completed);
            }
        }
        assert_eq!(s.stage_results.ratings.len(), 106);
        let err = s
            .submit_rating(&cfg, 106, &order[0], 0, 2000, Millis(7))
            .unwrap_err();
        assert!(matches!(err, ProtocolError::OutOfOrder { .. }));
    }

    #[test]
    fn ttl_expiry() {
        let cfg = StudyConfig::default();
        let mut s = fresh(&cfg, 40);
        assert!(s.expire(&cfg, Millis(60 * 60_000)).is_none());
        let (t, released) = s.expire(&cfg, Millis(61 * 60_000)).unwrap();
        assert_eq!(t.to, SessionState::Expired);
        assert!(released.is_none());
        assert!(s.expire(&cfg, Millis(200 * 60_000)).is_none());
    }

    #[test]
    fn expiry_in_main_study_releases_slot_and_discards_ratings() {
        let cfg = StudyConfig::default();
        let mut s = to_main(&cfg, 41);
        let first = s.order[0].clone();
        s.submit_rating(&cfg, 0, &first, 10, 2000, Millis(10)).unwrap();
        let (_, released) = s.expire(&cfg, Millis(10 + 3_600_001)).unwrap();
        assert_eq!(released, Some(DatasetId(0)));
        assert!(s.stage_results.ratings.is_empty());
        assert!(s.dataset_id.is_none());
    }

    #[test]
    fn order_is_a_permutation_with_spaced_attention_items() {
        let pool = items();
        for seed in 0..200 {
            let order = session_order(seed, &pool);
            assert_eq!(order.len(), 106);
            let unique: HashSet<_> = order.iter().collect();
            assert_eq!(unique.len(), 106);
            let is_att = |id: &ImageId| id.0.starts_with('t');
            assert!(!is_att(&order[0]));
            for w in order.windows(2) {
                assert!(!(is_att(&w[0]) && is_att(&w[1])));
            }
        }
        assert_eq!(session_order(9, &pool), session_order(9, &pool));
    }

    #[test]
    fn different_seeds_give_different_orders() {
        let pool = items();
        let differing = (0..100u64)
            .filter(|&i| session_order(2 * i, &pool) != session_order(2 * i + 1, &pool))
            .count();
        assert!(differing >= 99, "{differing}");
    }

    #[test]
    fn transition_relation_matches_the_documented_edges() {
        use SessionState::*;
        let edges: usize = SessionState::ALL
            .iter()
            .flat_map(|a| SessionState::ALL.iter().map(move |b| (a, b)))
            .filter(|(a, b)| a.allows(**b))
            .count();
        // 7 forward/failure edges + 5 non-terminal states x {Expired, Abandoned}
        assert_eq!(edges, 7 + 5 * 2);
        assert!(!Completed.allows(Expired));
        assert!(MainStudy.allows(Expired));
    }

    #[test]
    fn plate_answer_wire_format() {
        assert_eq!(serde_json::to_string(&PlateAnswer::Digit(3)).unwrap(), "\"3\"");
        assert_eq!(serde_json::to_string(&PlateAnswer::NoDigit).unwrap(), "\"none\"");
        let n: PlateAnswer = serde_json::from_str("7").unwrap();
        assert_eq!(n, PlateAnswer::Digit(7));
        assert!(serde_json::from_str::<PlateAnswer>("\"12\"").is_err());
    }
}
