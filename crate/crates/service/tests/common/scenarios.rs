use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use percept_core::config::StudyConfig;
use percept_core::engine::{Answer, AnswerAck, CampaignStatus, Durability, Engine, EngineSettings, SessionView, SystemClock};
use percept_core::export::RatingRow;
use percept_core::ids::{ExternalIds, SessionId};
use percept_core::protocol::{PlateKey, SessionState};
use percept_service::campaign::{launch_local, stage_pool};
use percept_service::{HttpPlatform, RetryPolicy};
use percept_sim::{
    simulate_session, AnnotatorModel, AnnotatorProfile, Behaviour, PlatePerception, PlatformError, PoolSpec, Step,
    StudyPlatform, SyntheticPool,
};

use super::{small_config, target};

const TOKEN: &str = "crash-admin";

/// Never misreads a plate or a pair, and rates without noise.
pub fn perfect() -> (AnnotatorProfile, Behaviour) {
    (
        AnnotatorProfile {
            noise_sd: 0.0,
            ..Default::default()
        },
        Behaviour {
            plate_accuracy: 1.0,
            pair_accuracy: 1.0,
            ..Default::default()
        },
    )
}

/// Records every acknowledged answer.
struct Recording<'a> {
    inner: &'a HttpPlatform,
    acks: &'a Mutex<Vec<(SessionId, Answer)>>,
}

impl StudyPlatform for Recording<'_> {
    fn create_session(&self, ids: &ExternalIds) -> Result<SessionView, PlatformError> {
        self.inner.create_session(ids)
    }
    fn next_item(&self, session: &SessionId) -> Result<Step, PlatformError> {
        self.inner.next_item(session)
    }
    fn answer(&self, session: &SessionId, answer: &Answer, key: &str) -> Result<AnswerAck, PlatformError> {
        let ack = self.inner.answer(session, answer, key)?;
        self.acks.lock().unwrap().push((session.clone(), answer.clone()));
        Ok(ack)
    }
    fn abandon(&self, session: &SessionId, key: &str) -> Result<(), PlatformError> {
        self.inner.abandon(session, key)
    }
    fn plate_key(&self, session: &SessionId, index: usize) -> Result<PlateKey, PlatformError> {
        self.inner.plate_key(session, index)
    }
    fn plate_png(&self, session: &SessionId, index: usize) -> Result<Vec<u8>, PlatformError> {
        self.inner.plate_png(session, index)
    }
    fn campaign_status(&self) -> Result<CampaignStatus, PlatformError> {
        self.inner.campaign_status()
    }
    fn rating_rows(&self) -> Result<Vec<RatingRow>, PlatformError> {
        self.inner.rating_rows()
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn spawn_service(config: &Path, log: &Path) -> Child {
    let log = fs::OpenOptions::new().create(true).append(true).open(log).unwrap();
    Command::new(env!("CARGO_BIN_EXE_percept"))
        .args(["serve", "--config"])
        .arg(config)
        .stdout(Stdio::null())
        .stderr(log)
        .spawn()
        .expect("start percept serve")
}

fn wait_healthy(base: &str) {
    let client = reqwest::blocking::Client::new();
    let deadline = Instant::now() + Duration::from_secs(30);
    while Instant::now() < deadline {
        if client
            .get(format!("{base}/api/v1/health"))
            .send()
            .is_ok_and(|r| r.status().is_success())
        {
            return;
        }
        thread::sleep(Duration::from_millis(20));
    }
    panic!("service at {base} did not come up");
}

#[derive(Debug)]
pub struct CrashOutcome {
    pub acked_before_kill: usize,
    /// Ratings acknowledged before the kill but missing after restart.
    pub lost: usize,
    /// (session, item) pairs stored more than once.
    pub duplicates: usize,
    pub sessions: usize,
    pub completed: usize,
}

/// Runs `sessions` concurrent participants against the real binary, kills it
/// with SIGKILL after `kill_after` acknowledged answers, restarts it on the
/// same data directory and lets the clients retry to completion.
pub fn crash_recovery(sessions: usize, kill_after: usize) -> CrashOutcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(2, sessions.div_ceil(2));
    let port = free_port();
    let base = format!("http://127.0.0.1:{port}");
    let config_path = dir.path().join("service.toml");
    let data_dir = dir.path().join("data");
    let image_root = dir.path().join("images");
    fs::write(
        &config_path,
        format!(
            "bind = \"127.0.0.1:{port}\"\ndata_dir = {:?}\nimage_root = {:?}\ndurability = \"fsync\"\nadmin_token = \"{TOKEN}\"\nsession_seed = 5\n\n[engine.study]\ndataset_count = {}\nratings_per_image_min = {}\n",
            data_dir, image_root, cfg.dataset_count, cfg.ratings_per_image_min
        ),
    )
    .unwrap();
    let server_log = dir.path().join("server.log");
    let mut child = spawn_service(&config_path, &server_log);
    wait_healthy(&base);

    let client = HttpPlatform::new(base.clone(), Some(TOKEN.into())).with_retry(RetryPolicy {
        attempts: 200,
        delay: Duration::from_millis(10),
    });
    let world = SyntheticPool::generate(&target(), &PoolSpec::for_config(&cfg), 17);
    stage_pool(&client, &world, &image_root, 1).unwrap();

    let acks = Mutex::new(Vec::new());
    let (profile, behaviour) = perfect();
    let outcomes = thread::scope(|scope| {
        let workers: Vec<_> = (0..sessions)
            .map(|i| {
                let (client, acks, world, cfg) = (&client, &acks, &world, &cfg);
                scope.spawn(move || {
                    let platform = Recording { inner: client, acks };
                    let model = AnnotatorModel {
                        seed: 100 + i as u64,
                        profile,
                    };
                    simulate_session(
                        &model,
                        &platform,
                        &ExternalIds::participant(format!("crash-{i}")),
                        world,
                        &behaviour,
                        PlatePerception::Sidecar,
                        cfg,
                    )
                })
            })
            .collect();
        while acks.lock().unwrap().len() < kill_after {
            thread::sleep(Duration::from_millis(1));
        }
        child.kill().unwrap();
        child.wait().unwrap();
        let snapshot: Vec<(SessionId, Answer)> = acks.lock().unwrap().clone();
        child = spawn_service(&config_path, &server_log);
        wait_healthy(&base);
        let results: Vec<_> = workers.into_iter().map(|w| w.join().unwrap()).collect();
        (snapshot, results)
    });
    let (snapshot, results) = outcomes;

    let rows = client.rating_rows().unwrap();
    let stored: BTreeMap<(SessionId, percept_core::ids::ImageId), Vec<i32>> =
        rows.iter().fold(BTreeMap::new(), |mut m, r| {
            m.entry((r.session.clone(), r.image.clone())).or_default().push(r.value);
            m
        });
    let mut acked_ratings = 0;
    let mut lost = 0;
    for (sid, answer) in &snapshot {
        if let Answer::Main { image_id, value, .. } = answer {
            acked_ratings += 1;
            if !stored
                .get(&(sid.clone(), image_id.clone()))
                .is_some_and(|v| v.contains(value))
            {
                lost += 1;
            }
        }
    }
    let duplicates = stored.values().filter(|v| v.len() > 1).count();
    let completed = results
        .iter()
        .filter(|r| r.as_ref().is_ok_and(|o| o.terminal == SessionState::Completed))
        .count();
    let _ = child.kill();
    let _ = child.wait();
    assert!(acked_ratings > 0, "kill happened before any rating was acknowledged");
    CrashOutcome {
        acked_before_kill: snapshot.len(),
        lost,
        duplicates,
        sessions,
        completed,
    }
}

#[derive(Debug)]
pub struct ClaimOutcome {
    pub sessions: usize,
    pub capacity: usize,
    pub claimed: usize,
    pub turned_away: usize,
    /// Sessions holding more than one slot, plus slots beyond a dataset's cap.
    pub duplicate_slots: usize,
    pub overfull_datasets: usize,
    pub identical_after_restart: bool,
}

/// Starts `n` participants at once against datasets with fewer slots than
/// participants, then replays the log into a fresh engine.
pub fn concurrent_claims(n: usize) -> ClaimOutcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg: StudyConfig = small_config(3, 10);
    let capacity = cfg.dataset_count * cfg.ratings_per_image_min;
    let settings = EngineSettings {
        study: cfg.clone(),
        seed: 8,
        ..Default::default()
    };
    let world = SyntheticPool::generate(&target(), &PoolSpec::for_config(&cfg), 23);
    let (server, client) = launch_local(dir.path(), settings.clone(), Durability::Flush).unwrap();
    stage_pool(&client, &world, &dir.path().join("images"), 2).unwrap();

    let barrier = Arc::new(Barrier::new(n));
    let (profile, behaviour) = perfect();
    let outcomes: Vec<_> = thread::scope(|scope| {
        (0..n)
            .map(|i| {
                let (client, world, cfg, barrier) = (&client, &world, &cfg, barrier.clone());
                scope.spawn(move || {
                    barrier.wait();
                    simulate_session(
                        &AnnotatorModel {
                            seed: 500 + i as u64,
                            profile,
                        },
                        client,
                        &ExternalIds::participant(format!("claim-{i}")),
                        world,
                        &behaviour,
                        PlatePerception::Sidecar,
                        cfg,
                    )
                    .unwrap()
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .collect()
    });
    let claimed = outcomes.iter().filter(|o| o.entered_main_study).count();
    let turned_away = outcomes.iter().filter(|o| o.terminal == SessionState::Abandoned).count();

    let datasets = server.engine().datasets();
    let check = |datasets: &[percept_core::pool::StudyDataset]| {
        let mut seen = BTreeSet::new();
        let mut duplicates = 0;
        let mut overfull = 0;
        for d in datasets {
            if d.counts().load() > cfg.ratings_per_image_min {
                overfull += 1;
            }
            for s in &d.slots {
                if !seen.insert(s.session_id.clone()) {
                    duplicates += 1;
                }
            }
        }
        (duplicates, overfull)
    };
    let (duplicate_slots, overfull_datasets) = check(&datasets);
    server.stop().unwrap();
    let replayed = Engine::open(dir.path(), Durability::Flush, settings, Arc::new(SystemClock)).unwrap();
    let identical_after_restart = replayed.datasets() == datasets;
    ClaimOutcome {
        sessions: n,
        capacity,
        claimed,
        turned_away,
        duplicate_slots,
        overfull_datasets,
        identical_after_restart,
    }
}
