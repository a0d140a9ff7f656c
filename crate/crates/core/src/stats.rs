//! Imperceptibility scores, confidence intervals, sample-size estimation and
//! the leaderboard.
//!
//! Bootstrap and power loops are split into fixed-size chunks, each with its
//! own ChaCha substream derived from the caller's seed, so results are
//! identical whether the chunks run serially or on the rayon pool.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::config::{Rational, StudyConfig};
use crate::ids::{ImageId, StudyTarget};
use crate::pool::ImageKind;
use crate::seeding::{child_seed, substream, STREAM_BOOTSTRAP, STREAM_POWER};

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("no ratings")]
    NoRatings,
    #[error("no adversarial image scores")]
    EmptyInput,
    #[error("pilot needs at least two annotators per group (got {a} and {b})")]
    InsufficientPilot { a: usize, b: usize },
    #[error("power {power:.3} at n = {max_n} per group is below the target")]
    Unreachable { max_n: usize, power: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bootstrap distribution of the mean, in resample order.
fn bootstrap_means(values: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    let chunks = resamples.div_ceil(CHUNK);
    let per_chunk: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(child_seed(seed, c as u64), STREAM_BOOTSTRAP);
            let take = CHUNK.min(resamples - c * CHUNK);
            (0..take)
                .map(|_| {
                    let sum: f64 = (0..values.len())
                        .map(|_| values[rng.random_range(0..values.len())])
                        .sum();
                    sum / values.len() as f64
                })
                .collect()
        })
        .collect();
    per_chunk.into_iter().flatten().collect()
}

/// Percentile bootstrap interval for the mean at the given level.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, seed: u64, level: f64) -> (f64, f64) {
    let mut sorted_input = values.to_vec();
    sorted_input.sort_by(f64::total_cmp);
    let mut means = bootstrap_means(&sorted_input, resamples, seed);
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (percentile_sorted(&means, tail), percentile_sorted(&means, 1.0 - tail))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapParams {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapParams {
    fn default() -> Self {
        Self {
            resamples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: ImageId,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean rating of one image with a 95% percentile bootstrap interval. The
/// interval is widened to contain the mean if resampling skews it away.
pub fn image_score(image_id: ImageId, ratings: &[f64], params: BootstrapParams) -> Result<ImageScore, StatsError> {
    if ratings.is_empty() {
        return Err(StatsError::NoRatings);
    }
    if params.resamples == 0 {
        return Err(StatsError::InvalidParameter("resamples must be >= 1".into()));
    }
    let m = mean(ratings);
    let (lo, hi) = bootstrap_mean_ci(ratings, params.resamples, params.seed, 0.95);
    Ok(ImageScore {
        image_id,
        n: ratings.len(),
        mean: m,
        ci_low: lo.min(m),
        ci_high: hi.max(m),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub attack_name: String,
    pub victim_model: String,
    pub mean_adversarial: f64,
    pub adversarial_ci: (f64, f64),
    pub mean_unmodified: Option<f64>,
    pub unmodified_ci: Option<(f64, f64)>,
    pub n_images: usize,
    pub n_unmodified_images: usize,
    pub n_ratings: usize,
}

impl AttackScore {
    pub fn ci_width(&self) -> f64 {
        self.adversarial_ci.1 - self.adversarial_ci.0
    }
}

/// Per-attack score: every image weighs the same regardless of how many
/// ratings it has; intervals come from a cluster bootstrap over images.
pub fn attack_score(
    target: &StudyTarget,
    image_scores: &[ImageScore],
    kinds: &BTreeMap<ImageId, ImageKind>,
    params: BootstrapParams,
) -> Result<AttackScore, StatsError> {
    let mut by_kind: BTreeMap<ImageKind, Vec<(&ImageId, f64, usize)>> = BTreeMap::new();
    for s in image_scores {
        if let Some(kind) = kinds.get(&s.image_id) {
            by_kind.entry(*kind).or_default().push((&s.image_id, s.mean, s.n));
        }
    }
    let summarize = |kind: ImageKind, stream: u64| -> Option<(f64, (f64, f64), usize, usize)> {
        let mut rows = by_kind.get(&kind)?.clone();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let means: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let m = mean(&means);
        let (lo, hi) = bootstrap_mean_ci(&means, params.resamples.max(1), child_seed(params.seed, stream), 0.95);
        Some((m, (lo.min(m), hi.max(m)), rows.len(), rows.iter().map(|r| r.2).sum()))
    };
    let (mean_adv, adv_ci, n_images, n_ratings) = summarize(ImageKind::Adversarial, 0).ok_or(StatsError::EmptyInput)?;
    let unmod = summarize(ImageKind::Unmodified, 1);
    Ok(AttackScore {
        attack_name: target.attack.clone(),
        victim_model: target.model.clone(),
        mean_adversarial: mean_adv,
        adversarial_ci: adv_ci,
        mean_unmodified: unmod.map(|u| u.0),
        unmodified_ci: unmod.map(|u| u.1),
        n_images,
        n_unmodified_images: unmod.map_or(0, |u| u.2),
        n_ratings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantPlan {
    pub min_invites: u64,
    pub with_buffer: u64,
}

/// `dataset_count x ratings_per_image_min`, plus the low-quality buffer rounded up.
pub fn required_participants(config: &StudyConfig) -> ParticipantPlan {
    let min = (config.dataset_count * config.ratings_per_image_min) as u64;
    let buffered = Rational::from_integer(min) * (Rational::from_integer(1) + config.buffer_fraction);
    ParticipantPlan {
        min_invites: min,
        with_buffer: buffered.ceil().to_integer(),
    }
}

/// Per-annotator summary values for the two groups a study compares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotData {
    pub group_a: Vec<f64>,
    pub group_b: Vec<f64>,
}

impl PilotData {
    /// Each annotator contributes the mean of their rating vector.
    pub fn from_rating_vectors(a: &[Vec<f64>], b: &[Vec<f64>]) -> Self {
        let per = |v: &[Vec<f64>]| v.iter().filter(|r| !r.is_empty()).map(|r| mean(r)).collect();
        Self {
            group_a: per(a),
            group_b: per(b),
        }
    }

    /// Standardized mean difference using the pooled standard deviation.
    pub fn effect_size(&self) -> f64 {
        let (ma, va) = mean_var(&self.group_a);
        let (mb, vb) = mean_var(&self.group_b);
        let na = self.group_a.len() as f64;
        let nb = self.group_b.len() as f64;
        let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
        (ma - mb).abs() / pooled
    }
}

/// Which comparison a sample-size estimate targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectSpec {
    /// Adversarial vs unmodified ratings within one study run.
    AdversarialVsUnmodified { target: StudyTarget },
    /// Adversarial ratings of two attacks.
    BetweenAttacks { a: StudyTarget, b: StudyTarget },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerParams {
    pub alpha: f64,
    pub power_target: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for PowerParams {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            power_target: 0.80,
            trials: 2_000,
            seed: 0,
        }
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided Welch t-test p-value from summary statistics.
pub fn welch_p_value(mean_a: f64, var_a: f64, n_a: usize, mean_b: f64, var_b: f64, n_b: usize) -> f64 {
    let (na, nb) = (n_a as f64, n_b as f64);
    let se2 = var_a / na + var_b / nb;
    let diff = mean_a - mean_b;
    if se2 <= 0.0 {
        return if diff == 0.0 { 1.0 } else { 0.0 };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / ((var_a / na).powi(2) / (na - 1.0) + (var_b / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df.max(1e-9)).expect("positive degrees of freedom");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

/// Fraction of resampled studies with `n` annotators per group that reject
/// the null at `alpha`.
pub fn empirical_power(pilot: &PilotData, n: usize, params: &PowerParams) -> f64 {
    let chunks = params.trials.div_ceil(CHUNK);
    let rejections: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(child_seed(params.seed, c as u64), STREAM_POWER);
            let take = CHUNK.min(params.trials - c * CHUNK);
            let mut draw = |group: &[f64]| {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for _ in 0..n {
                    let x = group[rng.random_range(0..group.len())];
                    sum += x;
                    sum_sq += x * x;
                }
                let m = sum / n as f64;
                let var = ((sum_sq - n as f64 * m * m) / (n as f64 - 1.0)).max(0.0);
                (m, var)
            };
            (0..take)
                .filter(|_| {
                    let (ma, va) = draw(&pilot.group_a);
                    let (mb, vb) = draw(&pilot.group_b);
                    welch_p_value(ma, va, n, mb, vb, n) < params.alpha
                })
                .count()
        })
        .sum();
    rejections as f64 / params.trials as f64
}

/// Smallest per-group annotator count whose resampled Welch-test power
/// reaches the target. Searches `2..=100 x pilot size` by bisection.
pub fn estimate_sample_size(pilot: &PilotData, params: &PowerParams) -> Result<usize, StatsError> {
    let (na, nb) = (pilot.group_a.len(), pilot.group_b.len());
    if na < 2 || nb < 2 {
        return Err(StatsError::InsufficientPilot { a: na, b: nb });
    }
    if !(params.alpha > 0.0 && params.alpha < 1.0) {
        return Err(StatsError::InvalidParameter(format!("alpha {}", params.alpha)));
    }
    if !(params.power_target > 0.0 && params.power_target < 1.0) {
        return Err(StatsError::InvalidParameter(format!("power {}", params.power_target)));
    }
    if params.trials == 0 {
        return Err(StatsError::InvalidParameter("trials must be >= 1".into()));
    }
    let max_n = 100 * na.max(nb);
    let top = empirical_power(pilot, max_n, params);
    if top < params.power_target {
        return Err(StatsError::Unreachable { max_n, power: top });
    }
    let (mut lo, mut hi) = (2usize, max_n);
    if empirical_power(pilot, lo, params) >= params.power_target {
        return Ok(lo);
    }
    // invariant: power(lo) < target <= power(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if empirical_power(pilot, mid, params) >= params.power_target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Normal-approximation per-group size for a two-sided two-sample test.
pub fn closed_form_n_per_group(effect_size: f64, alpha: f64, power: f64) -> f64 {
    let z = Normal::new(0.0, 1.0).expect("standard normal");
    let za = z.inverse_cdf(1.0 - alpha / 2.0);
    let zb = z.inverse_cdf(power);
    2.0 * (za + zb).powi(2) / (effect_size * effect_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub attack_name: String,
    pub victim_model: String,
    pub mean_adversarial: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_ratings: usize,
}

/// Ranks attacks per victim model: lower mean rating first, then the
/// narrower interval, then the attack name.
pub fn leaderboard(scores: &[AttackScore]) -> Vec<LeaderboardEntry> {
    let mut by_model: BTreeMap<&str, Vec<&AttackScore>> = BTreeMap::new();
    for s in scores {
        by_model.entry(s.victim_model.as_str()).or_default().push(s);
    }
    let mut out = Vec::with_capacity(scores.len());
    for (_, mut group) in by_model {
        group.sort_by(|a, b| {
            a.mean_adversarial
                .total_cmp(&b.mean_adversarial)
                .then_with(|| a.ci_width().total_cmp(&b.ci_width()))
                .then_with(|| a.attack_name.cmp(&b.attack_name))
        });
        out.extend(group.into_iter().enumerate().map(|(i, s)| LeaderboardEntry {
            rank: i + 1,
            attack_name: s.attack_name.clone(),
            victim_model: s.victim_model.clone(),
            mean_adversarial: s.mean_adversarial,
            ci_low: s.adversarial_ci.0,
            ci_high: s.adversarial_ci.1,
            n_ratings: s.n_ratings,
        }));
    }
    out
}

pub fn write_leaderboard_csv<W: std::io::Write>(entries: &[LeaderboardEntry], out: W) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record([
            "rank",
            "attack_name",
            "victim_model",
            "mean_adversarial",
            "ci_low",
            "ci_high",
            "n_ratings",
        ])?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}
