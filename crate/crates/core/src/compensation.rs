//! Prorated payouts.
//!
//! Every terminal state credits a fixed number of minutes at the configured
//! hourly rate, rounded up to the next whole penny.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Pence, Rational, StudyConfig};
use crate::ids::SessionId;
use crate::protocol::{Session, SessionState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payout {
    pub session_id: SessionId,
    pub participant_id: String,
    pub terminal_state: SessionState,
    pub minutes_credited: Rational,
    pub amount: Pence,
    pub currency: String,
    /// Pence added by rounding up, `amount - exact`.
    pub rounding_applied: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompensationError {
    #[error("session {0} is still in progress")]
    NonTerminal(SessionId),
}

/// Minutes credited for a terminal state. Dropouts are paid for the last
/// stage they fully completed.
pub fn credited_minutes(
    state: SessionState,
    colorblind_done: bool,
    comprehension_done: bool,
    config: &StudyConfig,
) -> Option<Rational> {
    match state {
        SessionState::Completed => Some(config.expected_minutes),
        SessionState::FailedColorblind => Some(config.colorblind_fail_minutes),
        SessionState::FailedComprehension => Some(config.comprehension_fail_minutes),
        SessionState::Expired | SessionState::Abandoned => Some(if comprehension_done {
            config.comprehension_fail_minutes
        } else if colorblind_done {
            config.colorblind_fail_minutes
        } else {
            Rational::from_integer(0)
        }),
        _ => None,
    }
}

/// `(amount, exact)` in pence for a credited duration.
pub fn amount_for_minutes(minutes: Rational, config: &StudyConfig) -> (Pence, Rational) {
    let exact = Rational::from_integer(config.hourly_rate.0) * minutes / Rational::from_integer(60);
    (Pence(exact.ceil().to_integer()), exact)
}

pub fn payout_for(session: &Session, config: &StudyConfig) -> Result<Payout, CompensationError> {
    let colorblind_done = session.stage_progress.plates >= config.plate_count;
    let comprehension_done = session.stage_progress.pairs >= config.pair_count;
    let minutes = credited_minutes(session.state, colorblind_done, comprehension_done, config)
        .ok_or_else(|| CompensationError::NonTerminal(session.session_id.clone()))?;
    let (amount, exact) = amount_for_minutes(minutes, config);
    Ok(Payout {
        session_id: session.session_id.clone(),
        participant_id: session.external_ids.participant_id.clone(),
        terminal_state: session.state,
        minutes_credited: minutes,
        amount,
        currency: config.currency.clone(),
        rounding_applied: Rational::from_integer(amount.0) - exact,
    })
}

pub const PAYOUT_HEADER: [&str; 4] = ["participant_id", "amount_pence", "currency", "terminal_state"];

/// Payment table for every terminal session, sorted by participant id.
/// Sessions still in progress are skipped.
pub fn export_payouts<'a, W: std::io::Write>(
    sessions: impl IntoIterator<Item = &'a Session>,
    config: &StudyConfig,
    out: W,
) -> Result<(), csv::Error> {
    let mut rows: Vec<Payout> = sessions
        .into_iter()
        .filter_map(|s| payout_for(s, config).ok())
        .collect();
    rows.sort_by(|a, b| {
        a.participant_id
            .cmp(&b.participant_id)
            .then_with(|| a.session_id.cmp(&b.session_id))
    });
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PAYOUT_HEADER)?;
    for p in rows {
        w.write_record([
            p.participant_id.as_str(),
            &p.amount.0.to_string(),
            &p.currency,
            p.terminal_state.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
