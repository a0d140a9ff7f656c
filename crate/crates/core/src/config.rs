//! Protocol constants for one study deployment.
//!
//! Every count, threshold, duration and pay figure the rest of the crate
//! consults lives in [`StudyConfig`]. The defaults reproduce the reference
//! protocol: five plates (four with a digit), six comprehension pairs with
//! a pass mark of five, a 106-item main stage split 50/50/6, a slider from
//! -100 to +100, and 60 datasets rated at least ten times each.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact non-negative rational used for minutes and fractions.
pub type Rational = Ratio<u64>;

/// Whole pence (or the minor unit of whatever `currency` names).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pence(pub u64);

impl std::fmt::Display for Pence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("main_item_count {main} != unmodified {unmodified} + adversarial {adversarial} + attention {attention}")]
    ItemCountMismatch {
        main: usize,
        unmodified: usize,
        adversarial: usize,
        attention: usize,
    },
    #[error("plate_digit_count ({digits}) must be below plate_count ({plates})")]
    PlateCounts { digits: usize, plates: usize },
    #[error("pair_pass_min ({min}) exceeds pair_count ({pairs})")]
    PairCounts { min: usize, pairs: usize },
    #[error("slider bounds must straddle zero, got [{min}, {max}]")]
    SliderBounds { min: i32, max: i32 },
    #[error("{0} must be strictly positive")]
    NotPositive(&'static str),
    #[error("{0} attention items cannot be spaced out between the regular items")]
    AttentionCrowding(usize),
    #[error("attention_tolerance {0} is wider than the slider")]
    Tolerance(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub plate_count: usize,
    pub plate_digit_count: usize,
    pub pair_count: usize,
    pub pair_pass_min: usize,
    /// Correct plates required to pass; defaults to all of them.
    pub plate_pass_min: usize,
    pub main_item_count: usize,
    pub unmodified_per_dataset: usize,
    pub adversarial_per_dataset: usize,
    pub attention_per_dataset: usize,
    pub slider_min: i32,
    pub slider_max: i32,
    #[serde(with = "decimal")]
    pub expected_minutes: Rational,
    pub hourly_rate: Pence,
    pub currency: String,
    #[serde(with = "decimal")]
    pub colorblind_fail_minutes: Rational,
    #[serde(with = "decimal")]
    pub comprehension_fail_minutes: Rational,
    pub dataset_count: usize,
    pub ratings_per_image_min: usize,
    #[serde(with = "decimal")]
    pub buffer_fraction: Rational,
    pub attention_fail_max: usize,
    pub attention_tolerance: u32,
    /// Median per-item time below which a completed session counts as speeding.
    pub speed_floor_ms: u64,
    #[serde(with = "decimal")]
    pub session_ttl_minutes: Rational,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            plate_count: 5,
            plate_digit_count: 4,
            pair_count: 6,
            pair_pass_min: 5,
            plate_pass_min: 5,
            main_item_count: 106,
            unmodified_per_dataset: 50,
            adversarial_per_dataset: 50,
            attention_per_dataset: 6,
            slider_min: -100,
            slider_max: 100,
            expected_minutes: Rational::from_integer(13),
            hourly_rate: Pence(760),
            currency: "GBP".to_owned(),
            colorblind_fail_minutes: Rational::from_integer(1),
            comprehension_fail_minutes: Rational::new(5, 2),
            dataset_count: 60,
            ratings_per_image_min: 10,
            buffer_fraction: Rational::new(15, 100),
            attention_fail_max: 1,
            attention_tolerance: 10,
            speed_floor_ms: 1_500,
            session_ttl_minutes: Rational::from_integer(60),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("plate_count", self.plate_count),
            ("pair_count", self.pair_count),
            ("pair_pass_min", self.pair_pass_min),
            ("plate_pass_min", self.plate_pass_min),
            ("main_item_count", self.main_item_count),
            ("unmodified_per_dataset", self.unmodified_per_dataset),
            ("adversarial_per_dataset", self.adversarial_per_dataset),
            ("attention_per_dataset", self.attention_per_dataset),
            ("dataset_count", self.dataset_count),
            ("ratings_per_image_min", self.ratings_per_image_min),
            ("hourly_rate", self.hourly_rate.0 as usize),
            ("speed_floor_ms", self.speed_floor_ms as usize),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ConfigError::NotPositive(name));
            }
        }
        for (name, value) in [
            ("expected_minutes", self.expected_minutes),
            ("colorblind_fail_minutes", self.colorblind_fail_minutes),
            ("comprehension_fail_minutes", self.comprehension_fail_minutes),
            ("session_ttl_minutes", self.session_ttl_minutes),
        ] {
            if value == Rational::from_integer(0) {
                return Err(ConfigError::NotPositive(name));
            }
        }
        let sum = self.unmodified_per_dataset + self.adversarial_per_dataset + self.attention_per_dataset;
        if sum != self.main_item_count {
            return Err(ConfigError::ItemCountMismatch {
                main: self.main_item_count,
                unmodified: self.unmodified_per_dataset,
                adversarial: self.adversarial_per_dataset,
                attention: self.attention_per_dataset,
            });
        }
        if self.attention_per_dataset > self.unmodified_per_dataset + self.adversarial_per_dataset {
            return Err(ConfigError::AttentionCrowding(self.attention_per_dataset));
        }
        if self.plate_digit_count >= self.plate_count
            || self.plate_digit_count > 10
            || self.plate_pass_min > self.plate_count
        {
            return Err(ConfigError::PlateCounts {
                digits: self.plate_digit_count,
                plates: self.plate_count,
            });
        }
        if self.pair_pass_min > self.pair_count {
            return Err(ConfigError::PairCounts {
                min: self.pair_pass_min,
                pairs: self.pair_count,
            });
        }
        if !(self.slider_min < 0 && 0 < self.slider_max) {
            return Err(ConfigError::SliderBounds {
                min: self.slider_min,
                max: self.slider_max,
            });
        }
        if i64::from(self.attention_tolerance) >= i64::from(self.slider_max) - i64::from(self.slider_min) {
            return Err(ConfigError::Tolerance(self.attention_tolerance));
        }
        Ok(())
    }

    pub fn session_ttl_ms(&self) -> u64 {
        let ms = self.session_ttl_minutes * Rational::from_integer(60_000);
        ms.to_integer()
    }

    pub fn slider_contains(&self, value: i32) -> bool {
        (self.slider_min..=self.slider_max).contains(&value)
    }
}

/// Serializes a [`Rational`] as a plain decimal and parses decimals back
/// exactly, so `0.15` becomes 3/20 rather than the nearest binary float.
pub mod decimal {
    use super::Rational;
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Rational, s: S) -> Result<S::Ok, S::Error> {
        if value.is_integer() {
            s.serialize_u64(value.to_integer())
        } else {
            s.serialize_f64(*value.numer() as f64 / *value.denom() as f64)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        struct DecimalVisitor;

        impl Visitor<'_> for DecimalVisitor {
            type Value = Rational;

            fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str("a non-negative decimal number")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Rational, E> {
                Ok(Rational::from_integer(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Rational, E> {
                u64::try_from(v)
                    .map(Rational::from_integer)
                    .map_err(|_| E::custom("negative value"))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Rational, E> {
                parse(&v.to_string()).ok_or_else(|| E::custom(format!("not a decimal: {v}")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Rational, E> {
                parse(v).ok_or_else(|| E::custom(format!("not a decimal: {v}")))
            }
        }

        d.deserialize_any(DecimalVisitor)
    }

    /// Parses `"12"`, `"2.5"` or `"0.15"` into an exact ratio.
    pub fn parse(text: &str) -> Option<Rational> {
        let text = text.trim();
        let (whole, frac) = match text.split_once('.') {
            Some((w, f)) => (w, f),
            None => (text, ""),
        };
        if whole.is_empty() && frac.is_empty() {
            return None;
        }
        if !whole.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 18 {
            return None;
        }
        let whole: u64 = if whole.is_empty() { 0 } else { whole.parse().ok()? };
        let denom = 10u64.pow(frac.len() as u32);
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
        let numer = whole.checked_mul(denom)?.checked_add(frac)?;
        Some(Rational::new(numer, denom))
    }
}
