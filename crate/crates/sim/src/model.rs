use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use percept_core::config::StudyConfig;

/// Parameters of one kind of rater.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorProfile {
    pub colorblind: bool,
    /// Probability of answering an item at random.
    pub lapse_rate: f64,
    /// Item times drawn from the speeding range instead of the normal one.
    pub speeder: bool,
    /// Slope from latent perceptibility to expected rating.
    pub sensitivity: f64,
    pub bias: f64,
    pub noise_sd: f64,
}

impl Default for AnnotatorProfile {
    fn default() -> Self {
        Self {
            colorblind: false,
            lapse_rate: 0.0,
            speeder: false,
            sensitivity: 1.0,
            bias: 0.0,
            noise_sd: 15.0,
        }
    }
}

impl AnnotatorProfile {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.lapse_rate) {
            return Err(format!("lapse_rate {} outside [0, 1]", self.lapse_rate));
        }
        let negative = |x: f64| x.is_nan() || x < 0.0;
        if negative(self.sensitivity) || negative(self.noise_sd) || !self.bias.is_finite() {
            return Err("sensitivity and noise_sd must be >= 0 and bias finite".into());
        }
        Ok(())
    }
}

/// One simulated participant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorModel {
    pub seed: u64,
    pub profile: AnnotatorProfile,
}

/// Response probabilities and timings shared by every rater. These are
/// modelling choices for exercising the platform, not claims about people.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Behaviour {
    /// Chance of naming the digit on a digit plate with normal vision.
    pub plate_accuracy: f64,
    pub colorblind_plate_accuracy: f64,
    pub pair_accuracy: f64,
    /// Pair accuracy when the rater lapses.
    pub lapse_pair_accuracy: f64,
    pub item_ms: [u64; 2],
    pub speeding_item_ms: [u64; 2],
}

impl Default for Behaviour {
    fn default() -> Self {
        Self {
            plate_accuracy: 0.98,
            colorblind_plate_accuracy: 0.1,
            pair_accuracy: 0.97,
            lapse_pair_accuracy: 0.5,
            item_ms: [2_000, 6_000],
            speeding_item_ms: [100, 800],
        }
    }
}

/// How simulated raters learn what a plate shows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlatePerception {
    /// Read the operator's plate metadata and answer with the accuracy in
    /// [`Behaviour`].
    #[default]
    Sidecar,
    /// Fetch the PNG and read it; colorblind raters see it through a
    /// protanope projection.
    Raster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaterKind {
    Honest,
    Colorblind,
    Lapsing,
    Speeding,
}

/// Relative weights of the low-quality rater kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BadMix {
    pub colorblind: f64,
    pub lapsing: f64,
    pub speeding: f64,
}

impl Default for BadMix {
    fn default() -> Self {
        Self {
            colorblind: 1.0,
            lapsing: 1.0,
            speeding: 1.0,
        }
    }
}

/// A recruiting campaign's population and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    /// Participants who may enter the main study. Screen-outs are replaced
    /// and do not count.
    pub invites: usize,
    /// Hard cap on sessions started, screen-outs included.
    pub max_sessions: usize,
    pub honest: AnnotatorProfile,
    pub bad_fraction: f64,
    pub bad_mix: BadMix,
    pub behaviour: Behaviour,
    pub plate_perception: PlatePerception,
    /// External study id sent on session creation.
    pub study: String,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            invites: 690,
            max_sessions: 5_000,
            honest: AnnotatorProfile::default(),
            bad_fraction: 0.13,
            bad_mix: BadMix::default(),
            behaviour: Behaviour::default(),
            plate_perception: PlatePerception::Sidecar,
            study: String::new(),
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<(), String> {
        self.honest.validate()?;
        if !(0.0..=1.0).contains(&self.bad_fraction) {
            return Err(format!("bad_fraction {} outside [0, 1]", self.bad_fraction));
        }
        let m = self.bad_mix;
        if [m.colorblind, m.lapsing, m.speeding].iter().any(|w| w.is_nan() || *w < 0.0)
            || (self.bad_fraction > 0.0 && m.colorblind + m.lapsing + m.speeding <= 0.0)
        {
            return Err("bad_mix weights must be >= 0 with a positive sum".into());
        }
        let b = self.behaviour;
        for p in [
            b.plate_accuracy,
            b.colorblind_plate_accuracy,
            b.pair_accuracy,
            b.lapse_pair_accuracy,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("behaviour probability {p} outside [0, 1]"));
            }
        }
        if b.item_ms[0] > b.item_ms[1] || b.speeding_item_ms[0] > b.speeding_item_ms[1] {
            return Err("timing ranges must be [low, high]".into());
        }
        Ok(())
    }

    /// Draws the kind of the next participant.
    pub fn draw_kind<R: Rng>(&self, rng: &mut R) -> RaterKind {
        if !rng.random_bool(self.bad_fraction) {
            return RaterKind::Honest;
        }
        let m = self.bad_mix;
        let x = rng.random::<f64>() * (m.colorblind + m.lapsing + m.speeding);
        if x < m.colorblind {
            RaterKind::Colorblind
        } else if x < m.colorblind + m.lapsing {
            RaterKind::Lapsing
        } else {
            RaterKind::Speeding
        }
    }

    pub fn profile(&self, kind: RaterKind) -> AnnotatorProfile {
        let base = self.honest;
        match kind {
            RaterKind::Honest => base,
            RaterKind::Colorblind => AnnotatorProfile {
                colorblind: true,
                ..base
            },
            RaterKind::Lapsing => AnnotatorProfile {
                lapse_rate: 1.0,
                ..base
            },
            RaterKind::Speeding => AnnotatorProfile { speeder: true, ..base },
        }
    }
}

impl AnnotatorModel {
    pub(crate) fn lapses<R: Rng>(&self, rng: &mut R) -> bool {
        self.profile.lapse_rate > 0.0 && rng.random_bool(self.profile.lapse_rate)
    }

    /// Slider value for an image with the given latent perceptibility.
    pub(crate) fn rate<R: Rng>(&self, latent: f64, rng: &mut R, cfg: &StudyConfig) -> i32 {
        let p = &self.profile;
        let noise = if p.noise_sd > 0.0 {
            Normal::new(0.0, p.noise_sd).expect("finite sd").sample(rng)
        } else {
            0.0
        };
        let v = (p.sensitivity * latent + p.bias + noise).round();
        v.clamp(f64::from(cfg.slider_min), f64::from(cfg.slider_max)) as i32
    }

    pub(crate) fn item_ms<R: Rng>(&self, behaviour: &Behaviour, rng: &mut R) -> u64 {
        let [lo, hi] = if self.profile.speeder {
            behaviour.speeding_item_ms
        } else {
            behaviour.item_ms
        };
        rng.random_range(lo..=hi)
    }
}
