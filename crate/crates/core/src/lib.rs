//! Core of a platform for human imperceptibility studies of adversarial
//! images: the participant protocol, colorblindness plates, image pools and
//! dataset assignment, quality control, payouts, statistics, and an
//! event-sourced engine that ties them together.

pub mod compensation;
pub mod config;
pub mod engine;
pub mod export;
pub mod ids;
pub mod plate;
pub mod protocol;
pub mod quality;
pub mod pool;
pub mod seeding;
pub mod stats;
