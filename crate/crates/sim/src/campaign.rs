use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use percept_core::config::StudyConfig;
use percept_core::export::{scores_from_rows, AggregateParams, RowVerdict};
use percept_core::ids::{ExternalIds, ImageId, StudyTarget};
use percept_core::pool::ImageKind;
use percept_core::protocol::SessionState;
use percept_core::quality::Verdict;
use percept_core::seeding::{child_seed, substream};
use percept_core::stats::AttackScore;

use crate::model::{AnnotatorModel, PopulationSpec, RaterKind};
use crate::platform::{PlatformError, StudyPlatform};
use crate::session::simulate_session;
use crate::world::SyntheticPool;

const STREAM_POPULATION: u64 = 0x50;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindTally {
    pub sessions: usize,
    pub by_state: BTreeMap<SessionState, usize>,
    pub entered_main_study: usize,
    pub excluded: usize,
    /// Completed sessions with more failed attention checks than allowed.
    pub attention_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredScore {
    pub score: AttackScore,
    pub latent_mean_adversarial: f64,
    pub latent_mean_unmodified: Option<f64>,
    pub error: f64,
    pub within_ci: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub seed: u64,
    pub target: StudyTarget,
    pub invites: usize,
    pub sessions_started: usize,
    pub entrants: usize,
    pub complete: bool,
    pub completed: usize,
    pub excluded: usize,
    /// Excluded share of completed sessions.
    pub exclusion_fraction: f64,
    pub by_kind: BTreeMap<RaterKind, KindTally>,
    pub per_dataset_valid: BTreeMap<u32, usize>,
    pub recovered: Option<RecoveredScore>,
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invite budget exhausted with {} datasets short", shortfall.len())]
    BudgetExhausted {
        /// Dataset id -> valid slots still missing.
        shortfall: BTreeMap<u32, usize>,
        report: Box<CampaignReport>,
    },
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error("invalid population spec: {0}")]
    InvalidSpec(String),
}

/// Recruits simulated participants one after another until every dataset
/// of the target holds the minimum of valid slots, or the budget runs out.
/// Sessions run sequentially, so the report is a function of the inputs.
pub fn run_campaign<P: StudyPlatform + ?Sized>(
    platform: &P,
    spec: &PopulationSpec,
    world: &SyntheticPool,
    config: &StudyConfig,
    aggregate: AggregateParams,
    seed: u64,
) -> Result<CampaignReport, CampaignError> {
    spec.validate().map_err(CampaignError::InvalidSpec)?;
    let target = world.target.clone();
    let mut by_kind: BTreeMap<RaterKind, KindTally> = BTreeMap::new();
    let mut entrants = 0;
    let mut started = 0;
    let mut completed = 0;
    let mut excluded = 0;
    let mut complete = target_complete(platform, &target, config)?;
    while !complete && entrants < spec.invites && started < spec.max_sessions {
        let participant_seed = child_seed(seed, started as u64);
        let kind = spec.draw_kind(&mut substream(participant_seed, STREAM_POPULATION));
        let model = AnnotatorModel {
            seed: participant_seed,
            profile: spec.profile(kind),
        };
        let ids = ExternalIds {
            participant_id: format!("sim-{seed:x}-{started:05}"),
            study_id: spec.study.clone(),
            submission_id: format!("sub-{started:05}"),
        };
        let out = simulate_session(
            &model,
            platform,
            &ids,
            world,
            &spec.behaviour,
            spec.plate_perception,
            config,
        )?;
        started += 1;
        let tally = by_kind.entry(kind).or_default();
        tally.sessions += 1;
        *tally.by_state.entry(out.terminal).or_default() += 1;
        if out.entered_main_study {
            entrants += 1;
            tally.entered_main_study += 1;
        }
        if out.terminal == SessionState::Completed {
            completed += 1;
            if out.verdict == Some(Verdict::Excluded) {
                excluded += 1;
                tally.excluded += 1;
            }
            let failed = config.attention_per_dataset - out.attention_passed.unwrap_or(0);
            if failed > config.attention_fail_max {
                tally.attention_failures += 1;
            }
            complete = target_complete(platform, &target, config)?;
        }
    }

    let per_dataset_valid = dataset_valid_counts(platform, &target)?;
    let recovered = recover(platform, world, &target, aggregate)?;
    let report = CampaignReport {
        seed,
        target,
        invites: spec.invites,
        sessions_started: started,
        entrants,
        complete,
        completed,
        excluded,
        exclusion_fraction: if completed == 0 {
            0.0
        } else {
            excluded as f64 / completed as f64
        },
        by_kind,
        per_dataset_valid,
        recovered,
    };
    if complete {
        return Ok(report);
    }
    let shortfall = report
        .per_dataset_valid
        .iter()
        .filter(|(_, v)| **v < config.ratings_per_image_min)
        .map(|(d, v)| (*d, config.ratings_per_image_min - v))
        .collect();
    Err(CampaignError::BudgetExhausted {
        shortfall,
        report: Box::new(report),
    })
}

fn target_complete<P: StudyPlatform + ?Sized>(
    platform: &P,
    target: &StudyTarget,
    config: &StudyConfig,
) -> Result<bool, PlatformError> {
    Ok(dataset_valid_counts(platform, target)?
        .values()
        .all(|v| *v >= config.ratings_per_image_min))
}

fn dataset_valid_counts<P: StudyPlatform + ?Sized>(
    platform: &P,
    target: &StudyTarget,
) -> Result<BTreeMap<u32, usize>, PlatformError> {
    let status = platform.campaign_status()?;
    let t = status
        .targets
        .into_iter()
        .find(|t| &t.target == target)
        .ok_or_else(|| PlatformError::new("unknown_study", format!("{target} is not partitioned")))?;
    Ok(t.datasets.iter().map(|d| (d.dataset_id.0, d.counts.valid)).collect())
}

/// Scores from the platform's ratings export next to the simulator's truth.
fn recover<P: StudyPlatform + ?Sized>(
    platform: &P,
    world: &SyntheticPool,
    target: &StudyTarget,
    aggregate: AggregateParams,
) -> Result<Option<RecoveredScore>, CampaignError> {
    let rows: Vec<_> = platform
        .rating_rows()?
        .into_iter()
        .filter(|r| &r.target() == target)
        .collect();
    let scores = scores_from_rows(&rows, aggregate).map_err(|e| PlatformError::new("stats", e.to_string()))?;
    let Some(score) = scores.into_iter().next() else {
        return Ok(None);
    };
    let rated = |kind: ImageKind| -> Vec<ImageId> {
        let mut ids: Vec<ImageId> = rows
            .iter()
            .filter(|r| r.verdict == RowVerdict::Valid && r.kind == kind)
            .map(|r| r.image.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    };
    let latent_adv = world
        .latent_mean(&rated(ImageKind::Adversarial))
        .expect("scored adversarial images have latent values");
    let latent_unmod = world.latent_mean(&rated(ImageKind::Unmodified));
    let (lo, hi) = score.adversarial_ci;
    Ok(Some(RecoveredScore {
        latent_mean_adversarial: latent_adv,
        latent_mean_unmodified: latent_unmod,
        error: (score.mean_adversarial - latent_adv).abs(),
        within_ci: lo <= latent_adv && latent_adv <= hi,
        score,
    }))
}
