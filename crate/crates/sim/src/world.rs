use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use image::{ImageFormat, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use percept_core::config::StudyConfig;
use percept_core::ids::{ImageId, StudyTarget};
use percept_core::pool::{ImageKind, ImageRecord};
use percept_core::seeding::substream;

/// What a simulated rater "sees" in an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Latent {
    /// Perceptibility in slider units; negative reads as unmodified.
    Perceptibility(f64),
    /// An attention check asking for this slider value.
    Attention(i32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentImage {
    pub image_id: ImageId,
    pub kind: ImageKind,
    pub latent: Latent,
}

/// Sizes and latent ranges of a synthetic pool. Latent values are integers
/// drawn uniformly from the inclusive ranges, so a noiseless rater
/// reproduces them exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSpec {
    pub unmodified: usize,
    pub adversarial: usize,
    pub attention: usize,
    pub unmodified_latent: [i32; 2],
    pub adversarial_latent: [i32; 2],
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            unmodified: 3_000,
            adversarial: 3_000,
            attention: 6,
            unmodified_latent: [-90, -30],
            adversarial_latent: [-20, 60],
        }
    }
}

impl PoolSpec {
    /// Exactly enough images for `config`.
    pub fn for_config(config: &StudyConfig) -> Self {
        Self {
            unmodified: config.dataset_count * config.unmodified_per_dataset,
            adversarial: config.dataset_count * config.adversarial_per_dataset,
            attention: config.attention_per_dataset,
            ..Self::default()
        }
    }
}

/// Tiny distinct PNG standing in for a real image.
pub fn synthetic_image_bytes(tag: &str) -> Vec<u8> {
    let h = percept_core::ids::ImageId::of_bytes(tag.as_bytes()).0.into_bytes();
    let img = RgbImage::from_fn(4, 4, |x, y| {
        let i = ((y * 4 + x) * 3) as usize % (h.len() - 2);
        image::Rgb([h[i], h[i + 1], h[i + 2]])
    });
    let mut out = io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

fn draw<R: Rng>(rng: &mut R, [lo, hi]: [i32; 2]) -> f64 {
    f64::from(rng.random_range(lo..=hi))
}

/// Image database with known ground truth for one target.
#[derive(Debug, Clone)]
pub struct SyntheticPool {
    pub target: StudyTarget,
    pub records: Vec<ImageRecord>,
    pub latent: BTreeMap<ImageId, LatentImage>,
    files: Vec<(String, Vec<u8>)>,
}

impl SyntheticPool {
    pub fn generate(target: &StudyTarget, spec: &PoolSpec, seed: u64) -> Self {
        let mut rng = substream(seed, 0x51);
        let mut records = Vec::new();
        let mut latent = BTreeMap::new();
        let mut files = Vec::new();
        let mut add = |kind: ImageKind, i: usize, value: Latent, source: Option<ImageId>| {
            let rel = format!("{}/{}-{i}.png", kind.as_str(), target.attack);
            let bytes = synthetic_image_bytes(&format!("{target}/{rel}/{seed}"));
            let id = ImageId::of_bytes(&bytes);
            records.push(ImageRecord {
                image_id: id.clone(),
                path: rel.clone(),
                kind,
                attack_name: (kind == ImageKind::Adversarial).then(|| target.attack.clone()),
                victim_model: target.model.clone(),
                source_image_id: source,
                model_confidence: (kind != ImageKind::Attention).then_some(0.9),
                attention_target: match value {
                    Latent::Attention(t) => Some(t),
                    Latent::Perceptibility(_) => None,
                },
            });
            latent.insert(
                id.clone(),
                LatentImage {
                    image_id: id.clone(),
                    kind,
                    latent: value,
                },
            );
            files.push((rel, bytes));
            id
        };
        let mut clean = Vec::new();
        for i in 0..spec.unmodified {
            let v = draw(&mut rng, spec.unmodified_latent);
            clean.push(add(ImageKind::Unmodified, i, Latent::Perceptibility(v), None));
        }
        for i in 0..spec.adversarial {
            let v = draw(&mut rng, spec.adversarial_latent);
            let source = clean.get(i % clean.len().max(1)).cloned().or_else(|| Some(ImageId::of_bytes(b"")));
            add(ImageKind::Adversarial, i, Latent::Perceptibility(v), source);
        }
        for i in 0..spec.attention {
            let t = if i % 2 == 0 { 100 } else { -100 };
            add(ImageKind::Attention, i, Latent::Attention(t), None);
        }
        Self {
            target: target.clone(),
            records,
            latent,
            files,
        }
    }

    /// Records with paths resolved under `root`, for direct ingestion.
    pub fn records_under(&self, root: &Path) -> Vec<ImageRecord> {
        self.records
            .iter()
            .map(|r| ImageRecord {
                path: root.join(&r.path).to_string_lossy().into_owned(),
                ..r.clone()
            })
            .collect()
    }

    /// Writes the images below `root` and returns the manifest (JSON lines,
    /// paths relative to `root`).
    pub fn write_files(&self, root: &Path) -> io::Result<Vec<u8>> {
        for (rel, bytes) in &self.files {
            let path = root.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, bytes)?;
        }
        let mut manifest = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut manifest, r).map_err(io::Error::from)?;
            manifest.write_all(b"\n")?;
        }
        Ok(manifest)
    }

    pub fn latent_of(&self, id: &ImageId) -> Option<&LatentImage> {
        self.latent.get(id)
    }

    /// Mean latent perceptibility over the given images.
    pub fn latent_mean<'a>(&self, ids: impl IntoIterator<Item = &'a ImageId>) -> Option<f64> {
        let values: Vec<f64> = ids
            .into_iter()
            .filter_map(|id| match self.latent.get(id)?.latent {
                Latent::Perceptibility(p) => Some(p),
                Latent::Attention(_) => None,
            })
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}
