#![allow(dead_code)]

pub mod scenarios;

use reqwest::blocking::Client;
use serde_json::{json, Value};
use tempfile::TempDir;

use percept_core::config::StudyConfig;
use percept_core::engine::{Durability, EngineSettings};
use percept_core::ids::{ImageId, StudyTarget};
use percept_core::pool::ImageKind;
use percept_service::campaign::{launch_local, stage_pool, LOCAL_TOKEN};
use percept_service::{HttpPlatform, ServerHandle};
use percept_sim::{Latent, PoolSpec, SyntheticPool};

pub fn target() -> StudyTarget {
    StudyTarget::new("diffattack", "resnet50")
}

pub fn small_config(datasets: usize, floor: usize) -> StudyConfig {
    StudyConfig {
        dataset_count: datasets,
        ratings_per_image_min: floor,
        ..Default::default()
    }
}

pub struct Fixture {
    pub dir: TempDir,
    pub server: ServerHandle,
    pub client: HttpPlatform,
    pub world: SyntheticPool,
    pub cfg: StudyConfig,
    pub http: Client,
}

impl Fixture {
    pub fn start(cfg: StudyConfig, durability: Durability) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let world = SyntheticPool::generate(&target(), &PoolSpec::for_config(&cfg), 7);
        let settings = EngineSettings {
            study: cfg.clone(),
            seed: 99,
            ..Default::default()
        };
        let (server, client) = launch_local(dir.path(), settings, durability).unwrap();
        stage_pool(&client, &world, &dir.path().join("images"), 3).unwrap();
        Self {
            dir,
            server,
            client,
            world,
            cfg,
            http: Client::new(),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.server.base_url())
    }

    pub fn create(&self, pid: &str) -> (u16, Value) {
        let r = self
            .http
            .post(self.url("/sessions"))
            .query(&[("pid", pid), ("study", &target().to_string()), ("submission", "sub")])
            .send()
            .unwrap();
        (r.status().as_u16(), r.json().unwrap())
    }

    pub fn next(&self, sid: &str) -> (u16, Value) {
        let r = self.http.get(self.url(&format!("/sessions/{sid}/next"))).send().unwrap();
        (r.status().as_u16(), r.json().unwrap())
    }

    pub fn post_answer(&self, sid: &str, body: &Value, key: &str) -> (u16, Value) {
        let r = self
            .http
            .post(self.url(&format!("/sessions/{sid}/answers")))
            .header("Idempotency-Key", key)
            .json(body)
            .send()
            .unwrap();
        (r.status().as_u16(), r.json().unwrap())
    }

    pub fn admin_get(&self, path: &str) -> reqwest::blocking::Response {
        self.http.get(self.url(path)).bearer_auth(LOCAL_TOKEN).send().unwrap()
    }
}

/// The answer a perfectly attentive participant with normal vision gives
/// to an item descriptor, as raw JSON.
pub fn correct_answer(world: &SyntheticPool, base: &str, http: &Client, sid: &str, item: &Value) -> Value {
    let d = &item["item"];
    let index = d["index"].clone();
    match d["stage"].as_str().unwrap() {
        "colorblind" => {
            let key: Value = http
                .get(format!("{base}/api/v1/admin/sessions/{sid}/plates/{index}/key"))
                .bearer_auth(LOCAL_TOKEN)
                .send()
                .unwrap()
                .json()
                .unwrap();
            let answer = match key["digit"].as_u64() {
                Some(digit) => json!(digit),
                None => json!("none"),
            };
            json!({"stage": "colorblind", "index": index, "answer": answer})
        }
        "instructions" => json!({"stage": "instructions"}),
        "comprehension" => {
            let left = ImageId(d["left"].as_str().unwrap().to_string());
            let modified = world.latent_of(&left).unwrap().kind == ImageKind::Adversarial;
            json!({"stage": "comprehension", "index": index, "chosen": if modified {"left"} else {"right"}})
        }
        "main" => {
            let image = ImageId(d["image_id"].as_str().unwrap().to_string());
            let value = match world.latent_of(&image).unwrap().latent {
                Latent::Attention(t) => t,
                Latent::Perceptibility(p) => p.round() as i32,
            };
            json!({"stage": "main", "index": index, "image_id": image, "value": value, "elapsed_ms": 3000})
        }
        other => panic!("unexpected stage {other}"),
    }
}

/// Plays a session to its end over raw HTTP; returns the final 410 body.
pub fn play_perfect(f: &Fixture, sid: &str) -> Value {
    let base = f.server.base_url();
    for step in 0.. {
        let (status, item) = f.next(sid);
        if status == 410 {
            return item;
        }
        assert_eq!(status, 200, "{item}");
        let answer = correct_answer(&f.world, &base, &f.http, sid, &item);
        let (status, ack) = f.post_answer(sid, &answer, &format!("{sid}/{step}"));
        assert_eq!(status, 200, "{ack}");
    }
    unreachable!()
}
