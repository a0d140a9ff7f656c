use std::path::Path;
use std::sync::Arc;

use percept_core::config::StudyConfig;
use percept_core::engine::{Engine, EngineSettings, SystemClock};
use percept_core::export::{AggregateParams, RowVerdict};
use percept_core::ids::{ExternalIds, StudyTarget};
use percept_core::protocol::SessionState;
use percept_core::quality::Verdict;
use percept_core::stats::BootstrapParams;
use percept_sim::{
    run_campaign, simulate_session, AnnotatorModel, AnnotatorProfile, Behaviour, CampaignError, PlatePerception,
    PoolSpec, PopulationSpec, StudyPlatform, SyntheticPool,
};

fn target() -> StudyTarget {
    StudyTarget::new("diffattack", "resnet50")
}

fn platform(cfg: &StudyConfig, world: &SyntheticPool) -> Engine {
    let settings = EngineSettings {
        study: cfg.clone(),
        ..Default::default()
    };
    let engine = Engine::in_memory(settings, Arc::new(SystemClock)).unwrap();
    engine.ingest_records(world.records_under(Path::new("/synthetic"))).unwrap();
    engine.partition(&world.target, 11).unwrap();
    engine
}

/// One dataset with room for `sessions` participants.
fn roomy(sessions: usize) -> StudyConfig {
    StudyConfig {
        dataset_count: 1,
        ratings_per_image_min: sessions,
        ..Default::default()
    }
}

fn small_aggregate() -> AggregateParams {
    AggregateParams {
        image: BootstrapParams { resamples: 20, seed: 1 },
        cluster: BootstrapParams {
            resamples: 1_000,
            seed: 2,
        },
    }
}

fn run_many(profile: AnnotatorProfile, n: usize, perception: PlatePerception) -> Vec<percept_sim::SessionOutcome> {
    let cfg = roomy(n);
    let world = SyntheticPool::generate(&target(), &PoolSpec::for_config(&cfg), 3);
    let engine = platform(&cfg, &world);
    (0..n)
        .map(|i| {
            let model = AnnotatorModel {
                seed: 1_000 + i as u64,
                profile,
            };
            simulate_session(
                &model,
                &engine,
                &ExternalIds::participant(format!("p{i}")),
                &world,
                &Behaviour::default(),
                perception,
                &cfg,
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn honest_raters_complete_and_pass_attention() {
    let outs = run_many(AnnotatorProfile::default(), 500, PlatePerception::Sidecar);
    let completed: Vec<_> = outs.iter().filter(|o| o.terminal == SessionState::Completed).collect();
    let passing = completed.iter().filter(|o| o.attention_passed >= Some(5)).count();
    assert!(passing as f64 >= 0.99 * completed.len() as f64, "{passing}/{}", completed.len());
    assert!(completed.iter().all(|o| o.verdict == Some(Verdict::Valid) && o.ratings == 106));
    // Screening: 0.98^4 on plates times >= 5/6 pairs at 0.97.
    let rate = completed.len() as f64 / outs.len() as f64;
    assert!((0.85..0.96).contains(&rate), "{rate}");
}

#[test]
fn colorblind_raters_fail_the_plates() {
    let profile = AnnotatorProfile {
        colorblind: true,
        ..Default::default()
    };
    let outs = run_many(profile, 500, PlatePerception::Sidecar);
    let failed = outs.iter().filter(|o| o.terminal == SessionState::FailedColorblind).count();
    assert!(failed >= 475, "{failed}/500");
    assert!(outs.iter().filter(|o| o.terminal == SessionState::FailedColorblind).all(|o| !o.entered_main_study));
}

#[test]
fn always_lapsing_raters_are_excluded() {
    let profile = AnnotatorProfile {
        lapse_rate: 1.0,
        ..Default::default()
    };
    let outs = run_many(profile, 500, PlatePerception::Sidecar);
    let completed: Vec<_> = outs.iter().filter(|o| o.terminal == SessionState::Completed).collect();
    assert!(!completed.is_empty());
    let excluded = completed.iter().filter(|o| o.verdict == Some(Verdict::Excluded)).count();
    assert!(excluded as f64 >= 0.95 * completed.len() as f64, "{excluded}/{}", completed.len());
    // Random pair answers pass the comprehension check only rarely.
    let screened = outs.iter().filter(|o| o.terminal == SessionState::FailedComprehension).count();
    assert!(screened > 350, "{screened}");
}

#[test]
fn speeders_are_excluded_for_speed() {
    let profile = AnnotatorProfile {
        speeder: true,
        ..Default::default()
    };
    let outs = run_many(profile, 40, PlatePerception::Sidecar);
    assert!(outs
        .iter()
        .filter(|o| o.terminal == SessionState::Completed)
        .all(|o| o.verdict == Some(Verdict::Excluded) && o.attention_passed == Some(6)));
}

#[test]
fn raster_perception_separates_normal_and_dichromat_vision() {
    let normal = run_many(AnnotatorProfile::default(), 6, PlatePerception::Raster);
    assert!(normal.iter().all(|o| o.terminal != SessionState::FailedColorblind));
    let colorblind = run_many(
        AnnotatorProfile {
            colorblind: true,
            ..Default::default()
        },
        6,
        PlatePerception::Raster,
    );
    assert!(colorblind.iter().all(|o| o.terminal == SessionState::FailedColorblind));
}

fn small_campaign_config() -> StudyConfig {
    StudyConfig {
        dataset_count: 4,
        ratings_per_image_min: 3,
        ..Default::default()
    }
}

fn campaign(spec: &PopulationSpec, seed: u64) -> (Result<percept_sim::CampaignReport, CampaignError>, Engine) {
    let cfg = small_campaign_config();
    let world = SyntheticPool::generate(&target(), &PoolSpec::for_config(&cfg), seed);
    let engine = platform(&cfg, &world);
    (run_campaign(&engine, spec, &world, &cfg, small_aggregate(), seed), engine)
}

#[test]
fn noiseless_raters_recover_latent_means_exactly() {
    let spec = PopulationSpec {
        invites: 12,
        bad_fraction: 0.0,
        honest: AnnotatorProfile {
            noise_sd: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = campaign(&spec, 5).0.unwrap();
    assert!(report.complete);
    let r = report.recovered.unwrap();
    assert!(r.error < 1e-9, "{}", r.error);
    assert!((r.score.mean_unmodified.unwrap() - r.latent_mean_unmodified.unwrap()).abs() < 1e-9);
    assert_eq!(r.score.n_images, 200);
    assert_eq!(report.exclusion_fraction, 0.0);
}

#[test]
fn campaigns_are_deterministic_and_self_consistent() {
    let spec = PopulationSpec {
        invites: 20,
        bad_fraction: 0.3,
        ..Default::default()
    };
    let (a, engine) = campaign(&spec, 9);
    let a = a.unwrap();
    let (b, _) = campaign(&spec, 9);
    assert_eq!(a, b.unwrap());

    let rows = engine.rating_rows();
    let mut sessions: Vec<_> = rows.iter().filter(|r| r.verdict != RowVerdict::Pending).map(|r| (&r.session, r.verdict)).collect();
    sessions.dedup();
    let excluded = sessions.iter().filter(|(_, v)| *v == RowVerdict::Excluded).count();
    assert_eq!(excluded, a.excluded);
    assert_eq!(sessions.len(), a.completed);
    assert!((a.exclusion_fraction - excluded as f64 / sessions.len() as f64).abs() < 1e-12);
    assert!(a.per_dataset_valid.values().all(|v| *v >= 3));
}

#[test]
fn a_budget_without_buffer_runs_out() {
    let spec = PopulationSpec {
        invites: 12,
        bad_fraction: 0.5,
        bad_mix: percept_sim::BadMix {
            colorblind: 0.0,
            lapsing: 0.0,
            speeding: 1.0,
        },
        ..Default::default()
    };
    match campaign(&spec, 4).0 {
        Err(CampaignError::BudgetExhausted { shortfall, report }) => {
            assert!(!shortfall.is_empty());
            assert_eq!(report.entrants, 12);
            assert!(!report.complete);
        }
        other => panic!("expected BudgetExhausted, got {other:?}"),
    }
}

#[test]
fn engine_platform_reports_ended_sessions() {
    let cfg = roomy(2);
    let world = SyntheticPool::generate(&target(), &PoolSpec::for_config(&cfg), 1);
    let engine = platform(&cfg, &world);
    let out = simulate_session(
        &AnnotatorModel {
            seed: 1,
            profile: AnnotatorProfile::default(),
        },
        &engine,
        &ExternalIds::participant("x"),
        &world,
        &Behaviour::default(),
        PlatePerception::Sidecar,
        &cfg,
    )
    .unwrap();
    let step = StudyPlatform::next_item(&engine, &out.session_id).unwrap();
    assert_eq!(step, percept_sim::Step::Ended(out.terminal));
}
