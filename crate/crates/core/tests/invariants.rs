use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use percept_core::config::StudyConfig;
use percept_core::engine::{Answer, Durability, Engine, EngineError, EngineSettings, ManualClock, NextItem};
use percept_core::ids::{ExternalIds, ImageId, Millis, SessionId, StudyTarget};
use percept_core::plate::{generate_plate, PlateSpec};
use percept_core::pool::{partition, ImageKind, ImagePool, ImageRecord};
use percept_core::protocol::{PlateAnswer, SessionState};

fn target() -> StudyTarget {
    StudyTarget::new("fgsm", "resnet50")
}

fn record(id: String, kind: ImageKind) -> ImageRecord {
    ImageRecord {
        image_id: ImageId(id.clone()),
        path: format!("{id}.png"),
        kind,
        attack_name: (kind == ImageKind::Adversarial).then(|| "fgsm".into()),
        victim_model: "resnet50".into(),
        source_image_id: None,
        model_confidence: None,
        attention_target: (kind == ImageKind::Attention).then_some(50),
    }
}

fn pool_records(cfg: &StudyConfig, spare: usize) -> Vec<ImageRecord> {
    let n = |per: usize| cfg.dataset_count * per + spare;
    let mut out = Vec::new();
    out.extend((0..n(cfg.unmodified_per_dataset)).map(|i| record(format!("u{i:04}"), ImageKind::Unmodified)));
    out.extend((0..n(cfg.adversarial_per_dataset)).map(|i| record(format!("a{i:04}"), ImageKind::Adversarial)));
    out.extend((0..cfg.attention_per_dataset + spare).map(|i| record(format!("t{i:04}"), ImageKind::Attention)));
    out
}

fn tiny_config() -> StudyConfig {
    StudyConfig {
        plate_count: 2,
        plate_digit_count: 1,
        plate_pass_min: 2,
        pair_count: 2,
        pair_pass_min: 1,
        main_item_count: 5,
        unmodified_per_dataset: 2,
        adversarial_per_dataset: 2,
        attention_per_dataset: 1,
        dataset_count: 2,
        ratings_per_image_min: 2,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_disjoint_and_exact(
        datasets in 1usize..8,
        unmodified in 1usize..12,
        adversarial in 1usize..12,
        spare in 0usize..5,
        seed: u64,
    ) {
        let cfg = StudyConfig {
            dataset_count: datasets,
            unmodified_per_dataset: unmodified,
            adversarial_per_dataset: adversarial,
            attention_per_dataset: 1,
            main_item_count: unmodified + adversarial + 1,
            ..Default::default()
        };
        let mut pool = ImagePool::new();
        pool.add_records(pool_records(&cfg, spare));
        let parts = partition(&pool, &target(), &cfg, seed, 0).unwrap();
        prop_assert_eq!(parts.len(), datasets);
        let mut seen = BTreeSet::new();
        for d in &parts {
            prop_assert_eq!(d.unmodified_ids.len(), unmodified);
            prop_assert_eq!(d.adversarial_ids.len(), adversarial);
            for id in d.unmodified_ids.iter().chain(&d.adversarial_ids) {
                prop_assert!(seen.insert(id.clone()), "{} appears twice", id);
            }
        }
        prop_assert_eq!(partition(&pool, &target(), &cfg, seed, 0).unwrap(), parts);
    }

    #[test]
    fn partition_reports_shortfall(datasets in 2usize..6, seed: u64) {
        let cfg = StudyConfig { dataset_count: datasets, ..tiny_config() };
        let mut pool = ImagePool::new();
        let mut records = pool_records(&cfg, 0);
        records.retain(|r| r.image_id.0 != "u0000");
        pool.add_records(records);
        prop_assert!(partition(&pool, &target(), &cfg, seed, 0).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn plates_respect_packing(seed: u64, digit in proptest::option::of(0u8..10)) {
        let spec = PlateSpec::new(digit, seed);
        let plate = generate_plate(&spec).unwrap();
        let disk = spec.disk();
        for d in &plate.dots {
            let reach = ((d.x - disk.cx).powi(2) + (d.y - disk.cy).powi(2)).sqrt() + d.radius;
            prop_assert!(reach <= disk.radius + 1e-9);
        }
        prop_assert!((plate.coverage() - spec.coverage_target).abs() <= 0.10);
        prop_assert_eq!(plate.figure_dots() == 0, digit.is_none());
        prop_assert_eq!(plate.answer, PlateAnswer::from_digit(digit));
    }
}

/// One client move in the engine trace test.
#[derive(Debug, Clone)]
enum Move {
    Create,
    /// Answer the next item of session `n % live`, correctly or not.
    Answer { n: usize, correct: bool },
    /// Replay the previous answer with the same idempotency key.
    Retry,
    Abandon { n: usize },
    Advance { minutes: u64 },
}

fn moves() -> impl Strategy<Value = Move> {
    prop_oneof![
        1 => Just(Move::Create),
        12 => (any::<usize>(), proptest::bool::weighted(0.9)).prop_map(|(n, correct)| Move::Answer { n, correct }),
        1 => Just(Move::Retry),
        1 => any::<usize>().prop_map(|n| Move::Abandon { n }),
        1 => (1u64..90).prop_map(|minutes| Move::Advance { minutes }),
    ]
}

fn next_answer(engine: &Engine, sid: &SessionId, correct: bool) -> Option<Answer> {
    let session = engine.session(sid).ok()?;
    Some(match engine.next_item(sid).ok()? {
        NextItem::Colorblind { index, .. } => {
            let truth = session.plates[index].answer();
            Answer::Colorblind {
                index,
                answer: if correct { truth } else if truth == PlateAnswer::NoDigit { PlateAnswer::Digit(3) } else { PlateAnswer::NoDigit },
            }
        }
        NextItem::Instructions => Answer::Instructions,
        NextItem::Comprehension { index, .. } => {
            let truth = session.pairs[index].modified;
            Answer::Comprehension {
                index,
                chosen: if correct { truth } else { truth.other() },
            }
        }
        NextItem::Main { index, image_id, .. } => Answer::Main {
            index,
            value: if image_id.0.starts_with('t') { 50 } else if correct { 20 } else { -80 },
            image_id,
            elapsed_ms: 2_500,
        },
    })
}

fn check_registry(engine: &Engine, cfg: &StudyConfig) -> Result<(), TestCaseError> {
    let mut holders = BTreeSet::new();
    for d in engine.datasets() {
        prop_assert!(d.counts().load() <= cfg.ratings_per_image_min, "dataset {:?} overfull", d.dataset_id);
        for s in &d.slots {
            prop_assert!(holders.insert(s.session_id.clone()), "{} holds two slots", s.session_id);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn engine_traces_replay_identically(trace in proptest::collection::vec(moves(), 1..160)) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let settings = EngineSettings { study: cfg.clone(), seed: 11, ..Default::default() };
        let clock = Arc::new(ManualClock::new(Millis(1_000_000)));
        let engine = Engine::open(dir.path(), Durability::Flush, settings.clone(), clock.clone()).unwrap();
        engine.ingest_records(pool_records(&cfg, 2)).unwrap();
        engine.partition(&target(), 5).unwrap();

        let mut sessions: Vec<SessionId> = Vec::new();
        let mut last: Option<(SessionId, Answer, String)> = None;
        let mut step = 0usize;
        for m in trace {
            step += 1;
            clock.advance(1_000);
            match m {
                Move::Create => {
                    let v = engine
                        .create_session(ExternalIds::participant(format!("p{}", sessions.len())), &target(), None)
                        .unwrap();
                    prop_assert_eq!(v.state, SessionState::ColorblindCheck);
                    sessions.push(v.session_id);
                }
                Move::Answer { n, correct } if !sessions.is_empty() => {
                    let sid = sessions[n % sessions.len()].clone();
                    let before = engine.session(&sid).unwrap();
                    if let Some(answer) = next_answer(&engine, &sid, correct) {
                        let key = format!("k{step}");
                        match engine.answer(&sid, answer.clone(), Some(&key)) {
                            Ok(ack) => {
                                let after = engine.session(&sid).unwrap();
                                prop_assert!(after.state == before.state || before.state.allows(after.state));
                                prop_assert_eq!(ack.state, after.state);
                                last = Some((sid, answer, key));
                            }
                            Err(EngineError::Protocol(_)) => {
                                prop_assert_eq!(engine.session(&sid).unwrap().stage_progress, before.stage_progress);
                            }
                            Err(e) => return Err(TestCaseError::fail(format!("unexpected {e}"))),
                        }
                    }
                }
                Move::Retry => {
                    if let Some((sid, answer, key)) = &last {
                        let before = engine.session(sid).unwrap();
                        let replay = engine.answer(sid, answer.clone(), Some(key));
                        let ended = matches!(replay, Err(EngineError::SessionEnded { .. }));
                        prop_assert!(replay.is_ok() || ended, "retry failed: {:?}", replay.err());
                        prop_assert_eq!(engine.session(sid).unwrap().stage_progress, before.stage_progress);
                    }
                }
                Move::Abandon { n } if !sessions.is_empty() => {
                    let sid = &sessions[n % sessions.len()];
                    let was = engine.session(sid).unwrap().state;
                    let r = engine.abandon(sid, None);
                    prop_assert_eq!(r.is_ok(), !was.is_terminal());
                    prop_assert!(engine.session(sid).unwrap().state.is_terminal());
                }
                Move::Advance { minutes } => {
                    clock.advance(minutes * 60_000);
                    engine.expire_stale().unwrap();
                }
                _ => {}
            }
            check_registry(&engine, &cfg)?;
        }

        let rows = engine.rating_rows();
        let datasets = engine.datasets();
        let snapshot: Vec<_> = sessions.iter().map(|s| engine.session(s).unwrap()).collect();
        drop(engine);
        let replayed = Engine::open(dir.path(), Durability::Flush, settings, clock).unwrap();
        prop_assert_eq!(replayed.datasets(), datasets);
        prop_assert_eq!(replayed.rating_rows(), rows);
        let again: Vec<_> = sessions.iter().map(|s| replayed.session(s).unwrap()).collect();
        prop_assert_eq!(again, snapshot);
    }
}
