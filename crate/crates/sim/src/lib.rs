//! Synthetic annotators for end-to-end validation of the study platform.
//!
//! Simulated participants talk to the platform only through [`StudyPlatform`],
//! which is implemented both by the in-process engine and by the HTTP client
//! in the service crate, so the simulated path is the participant path.

mod campaign;
mod model;
mod platform;
mod session;
mod world;

pub use campaign::{run_campaign, CampaignError, CampaignReport, KindTally, RecoveredScore};
pub use model::{AnnotatorModel, AnnotatorProfile, BadMix, Behaviour, PlatePerception, PopulationSpec, RaterKind};
pub use platform::{PlatformError, Step, StudyPlatform};
pub use session::{simulate_session, SessionOutcome};
pub use world::{synthetic_image_bytes, Latent, LatentImage, PoolSpec, SyntheticPool};
