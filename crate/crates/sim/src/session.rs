use image::RgbImage;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use percept_core::config::StudyConfig;
use percept_core::engine::{Answer, NextItem};
use percept_core::ids::{ExternalIds, ImageId, SessionId};
use percept_core::plate::{color::protan_srgb, read_plate, Palette};
use percept_core::pool::ImageKind;
use percept_core::protocol::{PlateAnswer, SessionState, Side};
use percept_core::quality::Verdict;
use percept_core::seeding::substream;

use crate::model::{AnnotatorModel, Behaviour, PlatePerception};
use crate::platform::{PlatformError, Step, StudyPlatform};
use crate::world::{Latent, SyntheticPool};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub session_id: SessionId,
    pub terminal: SessionState,
    /// The session held a dataset slot at some point.
    pub entered_main_study: bool,
    pub verdict: Option<Verdict>,
    pub attention_passed: Option<usize>,
    pub ratings: usize,
}

const STREAM_RATER: u64 = 0x52;

/// Plays one participant from session creation to a terminal state.
pub fn simulate_session<P: StudyPlatform + ?Sized>(
    model: &AnnotatorModel,
    platform: &P,
    ids: &ExternalIds,
    world: &SyntheticPool,
    behaviour: &Behaviour,
    perception: PlatePerception,
    config: &StudyConfig,
) -> Result<SessionOutcome, PlatformError> {
    let mut rng = substream(model.seed, STREAM_RATER);
    let view = platform.create_session(ids)?;
    let sid = view.session_id;
    let mut outcome = SessionOutcome {
        session_id: sid.clone(),
        terminal: view.state,
        entered_main_study: false,
        verdict: None,
        attention_passed: None,
        ratings: 0,
    };
    loop {
        let item = match platform.next_item(&sid)? {
            Step::Ended(state) => {
                outcome.terminal = state;
                return Ok(outcome);
            }
            Step::Item(item) => item,
        };
        let (answer, key) = match item {
            NextItem::Colorblind { index, .. } => {
                let answer = perceive_plate(model, platform, &sid, index, behaviour, perception, &mut rng)?;
                (Answer::Colorblind { index, answer }, format!("{sid}/plate/{index}"))
            }
            NextItem::Instructions => (Answer::Instructions, format!("{sid}/instructions")),
            NextItem::Comprehension { index, left, right, .. } => {
                let chosen = choose_pair(model, world, &left, &right, behaviour, &mut rng);
                (Answer::Comprehension { index, chosen }, format!("{sid}/pair/{index}"))
            }
            NextItem::Main { index, image_id, .. } => {
                let value = rate_item(model, world, &image_id, config, &mut rng);
                let elapsed_ms = model.item_ms(behaviour, &mut rng);
                let answer = Answer::Main {
                    index,
                    image_id,
                    value,
                    elapsed_ms,
                };
                (answer, format!("{sid}/item/{index}"))
            }
        };
        match platform.answer(&sid, &answer, &key) {
            Ok(ack) => {
                if ack.state == SessionState::MainStudy {
                    outcome.entered_main_study = true;
                }
                if matches!(answer, Answer::Main { .. }) {
                    outcome.ratings += 1;
                }
                if let Some(v) = ack.verdict {
                    outcome.verdict = Some(v.verdict);
                    outcome.attention_passed = Some(v.attention_passed);
                }
            }
            Err(e) if e.kind == "no_dataset_available" => {
                // The study is full; the participant returns the submission.
                platform.abandon(&sid, &format!("{sid}/abandon"))?;
            }
            Err(e) => return Err(e),
        }
    }
}

fn perceive_plate<P: StudyPlatform + ?Sized, R: Rng>(
    model: &AnnotatorModel,
    platform: &P,
    sid: &SessionId,
    index: usize,
    behaviour: &Behaviour,
    perception: PlatePerception,
    rng: &mut R,
) -> Result<PlateAnswer, PlatformError> {
    match perception {
        PlatePerception::Sidecar => {
            let truth = platform.plate_key(sid, index)?.answer();
            let PlateAnswer::Digit(d) = truth else {
                return Ok(PlateAnswer::NoDigit);
            };
            let p = if model.profile.colorblind {
                behaviour.colorblind_plate_accuracy
            } else {
                behaviour.plate_accuracy
            };
            if rng.random_bool(p) {
                return Ok(truth);
            }
            Ok(if model.profile.colorblind {
                PlateAnswer::NoDigit
            } else {
                let others: Vec<u8> = (0..=9).filter(|x| *x != d).collect();
                PlateAnswer::Digit(*others.choose(rng).expect("nine other digits"))
            })
        }
        PlatePerception::Raster => {
            let png = platform.plate_png(sid, index)?;
            let raster = image::load_from_memory(&png)
                .map_err(|e| PlatformError::new("decode", e.to_string()))?
                .to_rgb8();
            if model.profile.colorblind {
                Ok(read_plate(&dichromat_view(&raster), &dichromat_palettes()))
            } else {
                Ok(read_plate(&raster, &Palette::shipped()))
            }
        }
    }
}

fn dichromat_view(raster: &RgbImage) -> RgbImage {
    let mut out = raster.clone();
    for px in out.pixels_mut() {
        if px.0 != percept_core::plate::PAPER {
            px.0 = protan_srgb(px.0);
        }
    }
    out
}

fn dichromat_palettes() -> Vec<Palette> {
    Palette::shipped()
        .into_iter()
        .map(|p| Palette {
            figure: p.figure.iter().map(|c| protan_srgb(*c)).collect(),
            ground: p.ground.iter().map(|c| protan_srgb(*c)).collect(),
            ..p
        })
        .collect()
}

fn choose_pair<R: Rng>(
    model: &AnnotatorModel,
    world: &SyntheticPool,
    left: &ImageId,
    right: &ImageId,
    behaviour: &Behaviour,
    rng: &mut R,
) -> Side {
    let modified = |id: &ImageId| world.latent_of(id).is_some_and(|l| l.kind == ImageKind::Adversarial);
    let truth = if modified(left) && !modified(right) {
        Side::Left
    } else {
        Side::Right
    };
    let p = if model.lapses(rng) {
        behaviour.lapse_pair_accuracy
    } else {
        behaviour.pair_accuracy
    };
    if rng.random_bool(p) {
        truth
    } else {
        truth.other()
    }
}

fn rate_item<R: Rng>(model: &AnnotatorModel, world: &SyntheticPool, image: &ImageId, cfg: &StudyConfig, rng: &mut R) -> i32 {
    if model.lapses(rng) {
        return rng.random_range(cfg.slider_min..=cfg.slider_max);
    }
    match world.latent_of(image).map(|l| l.latent) {
        Some(Latent::Attention(t)) => t,
        Some(Latent::Perceptibility(p)) => model.rate(p, rng, cfg),
        None => 0,
    }
}
