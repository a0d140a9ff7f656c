//! The ratings table: CSV export, re-import, and aggregation into attack scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::{ImageId, SessionId, StudyTarget};
use crate::pool::ImageKind;
use crate::seeding::child_seed;
use crate::stats::{attack_score, image_score, AttackScore, BootstrapParams, EffectSpec, PilotData, StatsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowVerdict {
    Valid,
    Excluded,
    /// The session is still rating.
    Pending,
}

/// One exported rating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRow {
    pub session: SessionId,
    pub image: ImageId,
    pub kind: ImageKind,
    pub value: i32,
    pub elapsed_ms: u64,
    pub verdict: RowVerdict,
    pub attack: String,
    pub victim_model: String,
}

impl RatingRow {
    pub fn target(&self) -> StudyTarget {
        StudyTarget::new(&self.attack, &self.victim_model)
    }
}

pub fn write_ratings_csv<W: std::io::Write>(rows: &[RatingRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["session", "image", "kind", "value", "elapsed_ms", "verdict", "attack", "victim_model"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ratings_csv<R: std::io::Read>(input: R) -> Result<Vec<RatingRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Bootstrap settings for aggregation: per-image intervals and the
/// cluster bootstrap behind attack intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateParams {
    pub image: BootstrapParams,
    pub cluster: BootstrapParams,
}

impl Default for AggregateParams {
    fn default() -> Self {
        Self {
            image: BootstrapParams {
                resamples: 1_000,
                seed: 0,
            },
            cluster: BootstrapParams::default(),
        }
    }
}

/// Attack scores from the valid rows of a ratings table, one per target
/// with at least one rated adversarial image. Row order does not matter.
pub fn scores_from_rows(rows: &[RatingRow], params: AggregateParams) -> Result<Vec<AttackScore>, StatsError> {
    type PerImage = BTreeMap<ImageId, (ImageKind, Vec<f64>)>;
    let mut by_target: BTreeMap<StudyTarget, PerImage> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.verdict == RowVerdict::Valid) {
        by_target
            .entry(r.target())
            .or_default()
            .entry(r.image.clone())
            .or_insert_with(|| (r.kind, Vec::new()))
            .1
            .push(f64::from(r.value));
    }
    let mut out = Vec::new();
    for (target, images) in by_target {
        if !images.values().any(|(k, _)| *k == ImageKind::Adversarial) {
            continue;
        }
        let mut scores = Vec::with_capacity(images.len());
        let mut kinds = BTreeMap::new();
        for (i, (id, (kind, values))) in images.into_iter().enumerate() {
            let p = BootstrapParams {
                resamples: params.image.resamples,
                seed: child_seed(params.image.seed, i as u64),
            };
            scores.push(image_score(id.clone(), &values, p)?);
            kinds.insert(id, kind);
        }
        out.push(attack_score(&target, &scores, &kinds, params.cluster)?);
    }
    Ok(out)
}

/// Pilot groups for a comparison: one value per valid annotator, the mean
/// of their ratings in the group.
pub fn pilot_from_rows(rows: &[RatingRow], effect: &EffectSpec) -> PilotData {
    let per_session = |target: &StudyTarget, kind: ImageKind| -> Vec<Vec<f64>> {
        let mut by: BTreeMap<&SessionId, Vec<f64>> = BTreeMap::new();
        for r in rows
            .iter()
            .filter(|r| r.verdict == RowVerdict::Valid && r.kind == kind && &r.target() == target)
        {
            by.entry(&r.session).or_default().push(f64::from(r.value));
        }
        by.into_values().collect()
    };
    let (a, b) = match effect {
        EffectSpec::AdversarialVsUnmodified { target } => (
            per_session(target, ImageKind::Adversarial),
            per_session(target, ImageKind::Unmodified),
        ),
        EffectSpec::BetweenAttacks { a, b } => (
            per_session(a, ImageKind::Adversarial),
            per_session(b, ImageKind::Adversarial),
        ),
    };
    PilotData::from_rating_vectors(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(session: &str, image: &str, kind: ImageKind, value: i32, verdict: RowVerdict) -> RatingRow {
        RatingRow {
            session: SessionId(session.into()),
            image: ImageId(image.into()),
            kind,
            value,
            elapsed_ms: 2000,
            verdict,
            attack: "a".into(),
            victim_model: "m".into(),
        }
    }

    fn small() -> AggregateParams {
        AggregateParams {
            image: BootstrapParams { resamples: 50, seed: 1 },
            cluster: BootstrapParams { resamples: 200, seed: 2 },
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            row("s1", "x", ImageKind::Adversarial, -3, RowVerdict::Valid),
            row("s2", "y,\"odd\"", ImageKind::Attention, 100, RowVerdict::Excluded),
            row("s3", "z", ImageKind::Unmodified, 7, RowVerdict::Pending),
        ];
        let mut buf = Vec::new();
        write_ratings_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("session,image,kind,value,elapsed_ms,verdict,attack,victim_model\n"));
        assert_eq!(read_ratings_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn excluded_and_pending_rows_never_reach_scores() {
        let clean = vec![
            row("s1", "x", ImageKind::Adversarial, 10, RowVerdict::Valid),
            row("s1", "u", ImageKind::Unmodified, -50, RowVerdict::Valid),
        ];
        let mut poisoned = clean.clone();
        poisoned.push(row("bad", "x", ImageKind::Adversarial, 100, RowVerdict::Excluded));
        poisoned.push(row("bad", "new", ImageKind::Adversarial, 100, RowVerdict::Excluded));
        poisoned.push(row("busy", "x", ImageKind::Adversarial, 100, RowVerdict::Pending));
        assert_eq!(scores_from_rows(&clean, small()), scores_from_rows(&poisoned, small()));
        assert_eq!(scores_from_rows(&clean, small()).unwrap()[0].mean_adversarial, 10.0);
    }

    #[test]
    fn aggregation_ignores_row_order() {
        let mut rows: Vec<RatingRow> = (0..40)
            .map(|i| {
                let kind = if (i % 9) % 2 == 0 { ImageKind::Adversarial } else { ImageKind::Unmodified };
                row(&format!("s{}", i % 7), &format!("img{}", i % 9), kind, i * 3 - 50, RowVerdict::Valid)
            })
            .collect();
        let a = scores_from_rows(&rows, small()).unwrap();
        rows.reverse();
        rows.swap(3, 17);
        assert_eq!(a, scores_from_rows(&rows, small()).unwrap());
    }

    #[test]
    fn pilot_groups_are_per_valid_session_means() {
        let mut rows = vec![
            row("s1", "x", ImageKind::Adversarial, 10, RowVerdict::Valid),
            row("s1", "y", ImageKind::Adversarial, 20, RowVerdict::Valid),
            row("s1", "u", ImageKind::Unmodified, -40, RowVerdict::Valid),
            row("s2", "x", ImageKind::Adversarial, 30, RowVerdict::Valid),
            row("s2", "u", ImageKind::Unmodified, -20, RowVerdict::Valid),
            row("s3", "x", ImageKind::Adversarial, 99, RowVerdict::Excluded),
        ];
        let mut other = row("s4", "z", ImageKind::Adversarial, 50, RowVerdict::Valid);
        other.attack = "b".into();
        rows.push(other);
        let target = StudyTarget::new("a", "m");
        let pilot = pilot_from_rows(&rows, &EffectSpec::AdversarialVsUnmodified { target: target.clone() });
        assert_eq!(pilot.group_a, vec![15.0, 30.0]);
        assert_eq!(pilot.group_b, vec![-40.0, -20.0]);
        let between = pilot_from_rows(
            &rows,
            &EffectSpec::BetweenAttacks {
                a: target,
                b: StudyTarget::new("b", "m"),
            },
        );
        assert_eq!(between.group_b, vec![50.0]);
    }
}
