use thiserror::Error;

use percept_core::engine::{Answer, AnswerAck, CampaignStatus, Engine, EngineError, NextItem, SessionView};
use percept_core::export::RatingRow;
use percept_core::ids::{ExternalIds, SessionId};
use percept_core::protocol::{PlateKey, SessionState};

/// An error as a remote client would see it.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind}: {detail}")]
pub struct PlatformError {
    pub kind: String,
    pub detail: String,
}

impl PlatformError {
    pub fn new(kind: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            detail: detail.into(),
        }
    }
}

impl From<EngineError> for PlatformError {
    fn from(e: EngineError) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

/// Result of asking for the next item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Item(NextItem),
    Ended(SessionState),
}

/// The operations a participant (plus the operator's plate metadata and
/// exports) can reach. Answers carry idempotency keys so clients may retry.
pub trait StudyPlatform {
    fn create_session(&self, ids: &ExternalIds) -> Result<SessionView, PlatformError>;
    fn next_item(&self, session: &SessionId) -> Result<Step, PlatformError>;
    fn answer(&self, session: &SessionId, answer: &Answer, key: &str) -> Result<AnswerAck, PlatformError>;
    fn abandon(&self, session: &SessionId, key: &str) -> Result<(), PlatformError>;
    /// Operator metadata for a plate, including its answer.
    fn plate_key(&self, session: &SessionId, index: usize) -> Result<PlateKey, PlatformError>;
    fn plate_png(&self, session: &SessionId, index: usize) -> Result<Vec<u8>, PlatformError>;
    fn campaign_status(&self) -> Result<CampaignStatus, PlatformError>;
    fn rating_rows(&self) -> Result<Vec<RatingRow>, PlatformError>;
}

impl StudyPlatform for Engine {
    fn create_session(&self, ids: &ExternalIds) -> Result<SessionView, PlatformError> {
        let target = self.resolve_study(Some(&ids.study_id))?;
        Ok(Engine::create_session(self, ids.clone(), &target, None)?)
    }

    fn next_item(&self, session: &SessionId) -> Result<Step, PlatformError> {
        match Engine::next_item(self, session) {
            Ok(item) => Ok(Step::Item(item)),
            Err(EngineError::SessionEnded { state, .. }) => Ok(Step::Ended(state)),
            Err(e) => Err(e.into()),
        }
    }

    fn answer(&self, session: &SessionId, answer: &Answer, key: &str) -> Result<AnswerAck, PlatformError> {
        Ok(Engine::answer(self, session, answer.clone(), Some(key))?)
    }

    fn abandon(&self, session: &SessionId, key: &str) -> Result<(), PlatformError> {
        Engine::abandon(self, session, Some(key))?;
        Ok(())
    }

    fn plate_key(&self, session: &SessionId, index: usize) -> Result<PlateKey, PlatformError> {
        Ok(Engine::plate_key(self, session, index)?)
    }

    fn plate_png(&self, session: &SessionId, index: usize) -> Result<Vec<u8>, PlatformError> {
        Ok(Engine::plate_png(self, session, index)?)
    }

    fn campaign_status(&self) -> Result<CampaignStatus, PlatformError> {
        Ok(Engine::campaign_status(self))
    }

    fn rating_rows(&self) -> Result<Vec<RatingRow>, PlatformError> {
        Ok(Engine::rating_rows(self))
    }
}
