//! Post-completion quality control: attention checks and speeding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::StudyConfig;
use crate::ids::{ImageId, SessionId};
use crate::protocol::Rating;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Attention,
    Speeding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Excluded,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Valid => "valid",
            Verdict::Excluded => "excluded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub session_id: SessionId,
    pub attention_passed: usize,
    pub attention_failed: usize,
    pub median_item_ms: u64,
    pub verdict: Verdict,
    pub reasons: Vec<ExclusionReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QualityError {
    #[error("attention item {0} has no rating")]
    MissingAttentionRating(ImageId),
}

/// Attention image -> slider value its instruction asks for.
pub type AttentionTargets = BTreeMap<ImageId, i32>;

/// Counts attention items answered within `tolerance` of their target.
pub fn score_attention(
    ratings: &[Rating],
    targets: &AttentionTargets,
    tolerance: u32,
) -> Result<(usize, usize), QualityError> {
    let mut passed = 0;
    let mut failed = 0;
    for (image, target) in targets {
        let rating = ratings
            .iter()
            .find(|r| &r.image_id == image)
            .ok_or_else(|| QualityError::MissingAttentionRating(image.clone()))?;
        if attention_passes(rating.value, *target, tolerance) {
            passed += 1;
        } else {
            failed += 1;
        }
    }
    Ok((passed, failed))
}

pub fn attention_passes(value: i32, target: i32, tolerance: u32) -> bool {
    (i64::from(value) - i64::from(target)).unsigned_abs() <= u64::from(tolerance)
}

/// Median of per-item times; the mean of the two middle values for even counts.
pub fn median_item_ms(ratings: &[Rating]) -> u64 {
    if ratings.is_empty() {
        return 0;
    }
    let mut times: Vec<u64> = ratings.iter().map(|r| r.elapsed_ms).collect();
    times.sort_unstable();
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2
    }
}

/// Inclusion verdict for a completed session. An attention item without a
/// rating counts as failed.
pub fn evaluate(
    session_id: &SessionId,
    ratings: &[Rating],
    targets: &AttentionTargets,
    config: &StudyConfig,
) -> QualityVerdict {
    let passed = targets
        .iter()
        .filter(|(image, target)| {
            ratings
                .iter()
                .find(|r| &r.image_id == *image)
                .is_some_and(|r| attention_passes(r.value, **target, config.attention_tolerance))
        })
        .count();
    let failed = targets.len() - passed;
    let median = median_item_ms(ratings);
    let mut reasons = Vec::new();
    if failed > config.attention_fail_max {
        reasons.push(ExclusionReason::Attention);
    }
    if median < config.speed_floor_ms {
        reasons.push(ExclusionReason::Speeding);
    }
    QualityVerdict {
        session_id: session_id.clone(),
        attention_passed: passed,
        attention_failed: failed,
        median_item_ms: median,
        verdict: if reasons.is_empty() {
            Verdict::Valid
        } else {
            Verdict::Excluded
        },
        reasons,
    }
}
