//! Image database, study datasets and assignment slots.
//!
//! Images are ingested from a JSON-lines manifest and keyed by the SHA-256
//! of their bytes. For each (attack, model) pair the pool is shuffled and cut
//! into `dataset_count` disjoint datasets of unmodified and adversarial
//! images; one set of attention images is shared by all of them. Sessions
//! claim slots least-filled-first so every dataset reaches the rating floor
//! at the same pace.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::StudyConfig;
use crate::ids::{DatasetId, ImageId, SessionId, StudyTarget};
use crate::protocol::DatasetItems;
use crate::seeding::{substream, STREAM_PARTITION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    Unmodified,
    Adversarial,
    Attention,
}

impl ImageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageKind::Unmodified => "unmodified",
            ImageKind::Adversarial => "adversarial",
            ImageKind::Attention => "attention",
        }
    }
}

impl std::str::FromStr for ImageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unmodified" => Ok(ImageKind::Unmodified),
            "adversarial" => Ok(ImageKind::Adversarial),
            "attention" => Ok(ImageKind::Attention),
            other => Err(format!("unknown image kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub path: String,
    pub kind: ImageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_name: Option<String>,
    pub victim_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image_id: Option<ImageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_target: Option<i32>,
}

/// One manifest line. Same fields as [`ImageRecord`]; `image_id` may be
/// omitted and is then computed from the file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    #[serde(default)]
    image_id: Option<ImageId>,
    path: String,
    kind: String,
    #[serde(default)]
    attack_name: Option<String>,
    victim_model: String,
    #[serde(default)]
    source_image_id: Option<ImageId>,
    #[serde(default)]
    model_confidence: Option<f64>,
    #[serde(default)]
    attention_target: Option<i32>,
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("manifest line {line}: {reason}")]
    ManifestRowInvalid { line: usize, reason: String },
    #[error("not enough {kind:?} images for {target}: need {required}, have {available} (short by {shortfall})")]
    InsufficientPool {
        target: StudyTarget,
        kind: ImageKind,
        required: usize,
        available: usize,
        shortfall: usize,
    },
    #[error("{0} is already partitioned")]
    AlreadyPartitioned(StudyTarget),
    #[error("{0} has not been partitioned")]
    UnknownTarget(StudyTarget),
    #[error("all datasets for {0} are saturated")]
    NoDatasetAvailable(StudyTarget),
    #[error("dataset {dataset} has no active slot for session {session}")]
    UnknownSlot { dataset: DatasetId, session: SessionId },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ImageRecord {
    fn validate(&self, config: &StudyConfig) -> Result<(), String> {
        if !self.image_id.is_well_formed() {
            return Err(format!("image_id {} is not a SHA-256 hex digest", self.image_id));
        }
        if self.victim_model.is_empty() {
            return Err("victim_model is empty".into());
        }
        if let Some(c) = self.model_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(format!("model_confidence {c} outside [0, 1]"));
            }
        }
        match self.kind {
            ImageKind::Unmodified => {
                if self.model_confidence.is_none() {
                    return Err("unmodified image without model_confidence".into());
                }
                if self.attention_target.is_some() || self.attack_name.is_some() {
                    return Err("unmodified image carries attack or attention fields".into());
                }
            }
            ImageKind::Adversarial => {
                if self.attack_name.as_deref().is_none_or(str::is_empty) {
                    return Err("adversarial image without attack_name".into());
                }
                if self.source_image_id.is_none() {
                    return Err("adversarial image without source_image_id".into());
                }
                if self.model_confidence.is_none() {
                    return Err("adversarial image without model_confidence".into());
                }
                if self.attention_target.is_some() {
                    return Err("adversarial image carries attention_target".into());
                }
            }
            ImageKind::Attention => match self.attention_target {
                Some(t) if config.slider_contains(t) => {}
                Some(t) => return Err(format!("attention_target {t} outside slider bounds")),
                None => return Err("attention image without attention_target".into()),
            },
        }
        Ok(())
    }
}

/// Parses and validates a manifest, hashing every referenced file. Paths
/// are resolved against `image_root` and stored resolved.
pub fn parse_manifest<R: BufRead>(
    reader: R,
    image_root: &Path,
    config: &StudyConfig,
) -> Result<Vec<ImageRecord>, PoolError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |reason: String| PoolError::ManifestRowInvalid { line: line_no, reason };
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        let kind: ImageKind = row.kind.parse().map_err(invalid)?;
        let rel = Path::new(&row.path);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(invalid(format!("path {:?} escapes the image root", row.path)));
        }
        let full: PathBuf = image_root.join(rel);
        let bytes = fs::read(&full).map_err(|e| invalid(format!("cannot read {}: {e}", full.display())))?;
        let image_id = ImageId::of_bytes(&bytes);
        if let Some(claimed) = &row.image_id {
            if claimed != &image_id {
                return Err(invalid(format!("image_id {claimed} does not match file hash {image_id}")));
            }
        }
        let record = ImageRecord {
            image_id,
            path: full.to_string_lossy().into_owned(),
            kind,
            attack_name: row.attack_name,
            victim_model: row.victim_model,
            source_image_id: row.source_image_id,
            model_confidence: row.model_confidence,
            attention_target: row.attention_target,
        };
        record.validate(config).map_err(invalid)?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub unmodified: usize,
    pub adversarial: usize,
    pub attention: usize,
}

impl KindCounts {
    fn bump(&mut self, kind: ImageKind) {
        match kind {
            ImageKind::Unmodified => self.unmodified += 1,
            ImageKind::Adversarial => self.adversarial += 1,
            ImageKind::Attention => self.attention += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows: usize,
    pub added: KindCounts,
    /// Rows whose content hash was already present; tolerated and skipped.
    pub duplicates: Vec<ImageId>,
    pub totals: KindCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImagePool {
    records: BTreeMap<ImageId, ImageRecord>,
}

impl ImagePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &ImageId) -> Option<&ImageRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.values()
    }

    /// Adds validated records, skipping content hashes already present.
    pub fn add_records(&mut self, records: Vec<ImageRecord>) -> IngestSummary {
        let mut summary = IngestSummary {
            rows: records.len(),
            added: KindCounts::default(),
            duplicates: Vec::new(),
            totals: KindCounts::default(),
        };
        for record in records {
            if self.records.contains_key(&record.image_id) {
                summary.duplicates.push(record.image_id);
                continue;
            }
            summary.added.bump(record.kind);
            self.records.insert(record.image_id.clone(), record);
        }
        summary.totals = self.counts();
        summary
    }

    pub fn ingest_manifest<R: BufRead>(
        &mut self,
        reader: R,
        image_root: &Path,
        config: &StudyConfig,
    ) -> Result<IngestSummary, PoolError> {
        let records = parse_manifest(reader, image_root, config)?;
        Ok(self.add_records(records))
    }

    pub fn counts(&self) -> KindCounts {
        let mut c = KindCounts::default();
        for r in self.records.values() {
            c.bump(r.kind);
        }
        c
    }

    /// Ids of one kind relevant to a target, in id order. Unmodified images
    /// belong to a model; adversarial ones to an (attack, model) pair;
    /// attention images are shared by everyone.
    pub fn ids_for(&self, target: &StudyTarget, kind: ImageKind) -> Vec<ImageId> {
        self.records
            .values()
            .filter(|r| r.kind == kind)
            .filter(|r| match kind {
                ImageKind::Unmodified => r.victim_model == target.model,
                ImageKind::Adversarial => {
                    r.victim_model == target.model && r.attack_name.as_deref() == Some(target.attack.as_str())
                }
                ImageKind::Attention => true,
            })
            .map(|r| r.image_id.clone())
            .collect()
    }

    /// Copies every image to `dir/images/<id>.<ext>` and writes `dir/index.jsonl`.
    pub fn export_database(&self, dir: &Path) -> Result<usize, PoolError> {
        let images = dir.join("images");
        fs::create_dir_all(&images)?;
        let mut index = io::BufWriter::new(fs::File::create(dir.join("index.jsonl"))?);
        for record in self.records.values() {
            let ext = Path::new(&record.path)
                .extension()
                .and_then(|e| e.to_str())
                .unwrap_or("bin");
            let name = format!("{}.{ext}", record.image_id);
            fs::copy(&record.path, images.join(&name))?;
            let mut exported = record.clone();
            exported.path = format!("images/{name}");
            serde_json::to_writer(&mut index, &exported).map_err(io::Error::from)?;
            index.write_all(b"\n")?;
        }
        index.flush()?;
        Ok(self.records.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotStatus {
    Active,
    Valid,
    Excluded,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotOutcome {
    Valid,
    Excluded,
    Expired,
}

impl From<SlotOutcome> for SlotStatus {
    fn from(o: SlotOutcome) -> Self {
        match o {
            SlotOutcome::Valid => SlotStatus::Valid,
            SlotOutcome::Excluded => SlotStatus::Excluded,
            SlotOutcome::Expired => SlotStatus::Expired,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub session_id: SessionId,
    pub status: SlotStatus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub active: usize,
    pub valid: usize,
    pub excluded: usize,
    pub expired: usize,
}

impl SlotCounts {
    /// Slots that count toward saturation.
    pub fn load(&self) -> usize {
        self.active + self.valid
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyDataset {
    pub dataset_id: DatasetId,
    pub attack_name: String,
    pub victim_model: String,
    pub unmodified_ids: Vec<ImageId>,
    pub adversarial_ids: Vec<ImageId>,
    pub attention_ids: Vec<ImageId>,
    pub slots: Vec<Slot>,
}

impl StudyDataset {
    pub fn target(&self) -> StudyTarget {
        StudyTarget::new(&self.attack_name, &self.victim_model)
    }

    pub fn items(&self) -> DatasetItems {
        DatasetItems {
            unmodified: self.unmodified_ids.clone(),
            adversarial: self.adversarial_ids.clone(),
            attention: self.attention_ids.clone(),
        }
    }

    pub fn counts(&self) -> SlotCounts {
        let mut c = SlotCounts::default();
        for slot in &self.slots {
            match slot.status {
                SlotStatus::Active => c.active += 1,
                SlotStatus::Valid => c.valid += 1,
                SlotStatus::Excluded => c.excluded += 1,
                SlotStatus::Expired => c.expired += 1,
            }
        }
        c
    }
}

/// Shuffles the target's pool and cuts it into `dataset_count` datasets.
/// Dataset ids start at `first_id`.
pub fn partition(
    pool: &ImagePool,
    target: &StudyTarget,
    config: &StudyConfig,
    seed: u64,
    first_id: u32,
) -> Result<Vec<StudyDataset>, PoolError> {
    let need = |kind: ImageKind, required: usize| -> Result<Vec<ImageId>, PoolError> {
        let ids = pool.ids_for(target, kind);
        if ids.len() < required {
            return Err(PoolError::InsufficientPool {
                target: target.clone(),
                kind,
                required,
                available: ids.len(),
                shortfall: required - ids.len(),
            });
        }
        Ok(ids)
    };
    let mut unmodified = need(ImageKind::Unmodified, config.dataset_count * config.unmodified_per_dataset)?;
    let mut adversarial = need(ImageKind::Adversarial, config.dataset_count * config.adversarial_per_dataset)?;
    let attention_pool = need(ImageKind::Attention, config.attention_per_dataset)?;

    let mut rng = substream(seed, STREAM_PARTITION);
    unmodified.shuffle(&mut rng);
    adversarial.shuffle(&mut rng);
    let mut attention: Vec<ImageId> = attention_pool
        .choose_multiple(&mut rng, config.attention_per_dataset)
        .cloned()
        .collect();
    attention.sort();

    Ok((0..config.dataset_count)
        .map(|i| {
            let u = i * config.unmodified_per_dataset;
            let a = i * config.adversarial_per_dataset;
            StudyDataset {
                dataset_id: DatasetId(first_id + i as u32),
                attack_name: target.attack.clone(),
                victim_model: target.model.clone(),
                unmodified_ids: unmodified[u..u + config.unmodified_per_dataset].to_vec(),
                adversarial_ids: adversarial[a..a + config.adversarial_per_dataset].to_vec(),
                attention_ids: attention.clone(),
                slots: Vec::new(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionInfo {
    pub seed: u64,
    pub first_id: u32,
    pub count: u32,
}

/// All partitioned datasets plus their slots. Not internally synchronized;
/// callers serialize claims and settlements.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRegistry {
    datasets: Vec<StudyDataset>,
    partitions: BTreeMap<StudyTarget, PartitionInfo>,
}

impl DatasetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn targets(&self) -> impl Iterator<Item = &StudyTarget> {
        self.partitions.keys()
    }

    pub fn partition_info(&self, target: &StudyTarget) -> Option<&PartitionInfo> {
        self.partitions.get(target)
    }

    pub fn datasets(&self) -> &[StudyDataset] {
        &self.datasets
    }

    pub fn get(&self, id: DatasetId) -> Option<&StudyDataset> {
        self.datasets.get(id.0 as usize)
    }

    pub fn for_target<'a>(&'a self, target: &'a StudyTarget) -> impl Iterator<Item = &'a StudyDataset> + 'a {
        self.partitions
            .get(target)
            .map(|p| &self.datasets[p.first_id as usize..(p.first_id + p.count) as usize])
            .unwrap_or(&[])
            .iter()
    }

    pub fn add_partition(
        &mut self,
        pool: &ImagePool,
        target: &StudyTarget,
        config: &StudyConfig,
        seed: u64,
    ) -> Result<&[StudyDataset], PoolError> {
        if self.partitions.contains_key(target) {
            return Err(PoolError::AlreadyPartitioned(target.clone()));
        }
        let first_id = self.datasets.len() as u32;
        let new = partition(pool, target, config, seed, first_id)?;
        let count = new.len() as u32;
        self.datasets.extend(new);
        self.partitions.insert(target.clone(), PartitionInfo { seed, first_id, count });
        Ok(&self.datasets[first_id as usize..])
    }

    /// Assigns the least-loaded unsaturated dataset (lowest id on ties) and
    /// appends an active slot for the session.
    pub fn claim_slot(
        &mut self,
        target: &StudyTarget,
        session_id: &SessionId,
        config: &StudyConfig,
    ) -> Result<DatasetId, PoolError> {
        let info = self
            .partitions
            .get(target)
            .ok_or_else(|| PoolError::UnknownTarget(target.clone()))?;
        let range = info.first_id as usize..(info.first_id + info.count) as usize;
        let chosen = self.datasets[range]
            .iter()
            .map(|d| (d.counts().load(), d.dataset_id))
            .filter(|(load, _)| *load < config.ratings_per_image_min)
            .min()
            .map(|(_, id)| id)
            .ok_or_else(|| PoolError::NoDatasetAvailable(target.clone()))?;
        self.datasets[chosen.0 as usize].slots.push(Slot {
            session_id: session_id.clone(),
            status: SlotStatus::Active,
        });
        Ok(chosen)
    }

    pub fn settle_slot(
        &mut self,
        dataset_id: DatasetId,
        session_id: &SessionId,
        outcome: SlotOutcome,
    ) -> Result<SlotCounts, PoolError> {
        let unknown = || PoolError::UnknownSlot {
            dataset: dataset_id,
            session: session_id.clone(),
        };
        let dataset = self.datasets.get_mut(dataset_id.0 as usize).ok_or_else(unknown)?;
        let slot = dataset
            .slots
            .iter_mut()
            .find(|s| &s.session_id == session_id && s.status == SlotStatus::Active)
            .ok_or_else(unknown)?;
        slot.status = outcome.into();
        Ok(dataset.counts())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::collections::HashSet;

    pub(crate) fn synthetic_pool(unmodified: usize, adversarial: usize, attention: usize) -> ImagePool {
        let mut records = Vec::new();
        for i in 0..unmodified {
            records.push(ImageRecord {
                image_id: ImageId::of_bytes(format!("u{i}").as_bytes()),
                path: format!("u{i}.bin"),
                kind: ImageKind::Unmodified,
                attack_name: None,
                victim_model: "resnet50".into(),
                source_image_id: None,
                model_confidence: Some(0.9),
                attention_target: None,
            });
        }
        for i in 0..adversarial {
            records.push(ImageRecord {
                image_id: ImageId::of_bytes(format!("a{i}").as_bytes()),
                path: format!("a{i}.bin"),
                kind: ImageKind::Adversarial,
                attack_name: Some("colorfool".into()),
                victim_model: "resnet50".into(),
                source_image_id: Some(ImageId::of_bytes(format!("u{i}").as_bytes())),
                model_confidence: Some(0.2),
                attention_target: None,
            });
        }
        for i in 0..attention {
            records.push(ImageRecord {
                image_id: ImageId::of_bytes(format!("t{i}").as_bytes()),
                path: format!("t{i}.bin"),
                kind: ImageKind::Attention,
                attack_name: None,
                victim_model: "any".into(),
                source_image_id: None,
                model_confidence: None,
                attention_target: Some(if i % 2 == 0 { 100 } else { -100 }),
            });
        }
        let mut pool = ImagePool::new();
        pool.add_records(records);
        pool
    }

    fn target() -> StudyTarget {
        StudyTarget::new("colorfool", "resnet50")
    }

    #[test]
    fn reference_partition() {
        let cfg = StudyConfig::default();
        let pool = synthetic_pool(3000, 3000, 6);
        let sets = partition(&pool, &target(), &cfg, 42, 0).unwrap();
        assert_eq!(sets.len(), 60);
        let mut seen_u = HashSet::new();
        let mut seen_a = HashSet::new();
        for d in &sets {
            assert_eq!(d.unmodified_ids.len(), 50);
            assert_eq!(d.adversarial_ids.len(), 50);
            assert_eq!(d.attention_ids.len(), 6);
            seen_u.extend(d.unmodified_ids.iter().cloned());
            seen_a.extend(d.adversarial_ids.iter().cloned());
        }
        let all_u: HashSet<_> = pool.ids_for(&target(), ImageKind::Unmodified).into_iter().collect();
        assert_eq!(seen_u, all_u);
        assert_eq!(seen_a.len(), 3000);
        assert_eq!(partition(&pool, &target(), &cfg, 42, 0).unwrap(), sets);
    }

    #[test]
    fn shortfall_is_exact() {
        let cfg = StudyConfig::default();
        let pool = synthetic_pool(3000, 2999, 6);
        match partition(&pool, &target(), &cfg, 1, 0) {
            Err(PoolError::InsufficientPool { kind, shortfall, .. }) => {
                assert_eq!(kind, ImageKind::Adversarial);
                assert_eq!(shortfall, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn claims_fill_evenly_and_saturate() {
        let cfg = StudyConfig::default();
        let pool = synthetic_pool(3000, 3000, 6);
        let mut reg = DatasetRegistry::new();
        reg.add_partition(&pool, &target(), &cfg, 7).unwrap();
        let first = reg.claim_slot(&target(), &SessionId("s0".into()), &cfg).unwrap();
        assert_eq!(first, DatasetId(0));
        for i in 1..600 {
            reg.claim_slot(&target(), &SessionId(format!("s{i}")), &cfg).unwrap();
        }
        assert!(reg.datasets().iter().all(|d| d.slots.len() == 10));
        assert!(matches!(
            reg.claim_slot(&target(), &SessionId("extra".into()), &cfg),
            Err(PoolError::NoDatasetAvailable(_))
        ));
        let holder = reg.datasets()[3].slots[0].session_id.clone();
        let counts = reg.settle_slot(DatasetId(3), &holder, SlotOutcome::Excluded).unwrap();
        assert_eq!(counts.load(), 9);
        assert_eq!(
            reg.claim_slot(&target(), &SessionId("extra".into()), &cfg).unwrap(),
            DatasetId(3)
        );
        assert!(matches!(
            reg.settle_slot(DatasetId(3), &holder, SlotOutcome::Valid),
            Err(PoolError::UnknownSlot { .. })
        ));
    }

    #[test]
    fn repartition_is_refused() {
        let cfg = StudyConfig::default();
        let pool = synthetic_pool(3000, 3000, 6);
        let mut reg = DatasetRegistry::new();
        reg.add_partition(&pool, &target(), &cfg, 7).unwrap();
        assert!(matches!(
            reg.add_partition(&pool, &target(), &cfg, 7),
            Err(PoolError::AlreadyPartitioned(_))
        ));
    }

    #[test]
    fn manifest_rows_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.bin"), b"x").unwrap();
        let cfg = StudyConfig::default();
        let bad = [
            r#"{"path":"x.bin","kind":"adversarial","victim_model":"m","model_confidence":0.5,"source_image_id":"00"}"#,
            r#"{"path":"x.bin","kind":"unmodified","victim_model":"m"}"#,
            r#"{"path":"missing.bin","kind":"unmodified","victim_model":"m","model_confidence":0.9}"#,
            r#"{"path":"x.bin","kind":"bogus","victim_model":"m"}"#,
            r#"{"path":"x.bin","kind":"attention","victim_model":"m","attention_target":150}"#,
            r#"{"path":"../x.bin","kind":"unmodified","victim_model":"m","model_confidence":0.9}"#,
            r#"{"path":"x.bin","kind":"unmodified","victim_model":"m","model_confidence":0.9,"image_id":"0000000000000000000000000000000000000000000000000000000000000000"}"#,
        ];
        for row in bad {
            let err = parse_manifest(row.as_bytes(), dir.path(), &cfg).unwrap_err();
            assert!(matches!(err, PoolError::ManifestRowInvalid { line: 1, .. }), "{row}: {err}");
        }
        let good = r#"{"path":"x.bin","kind":"unmodified","victim_model":"m","model_confidence":0.9}"#;
        let recs = parse_manifest(good.as_bytes(), dir.path(), &cfg).unwrap();
        assert_eq!(recs[0].image_id, ImageId::of_bytes(b"x"));
    }

    proptest::proptest! {
        #[test]
        fn partition_is_a_bijection(datasets in 1usize..8, per in 1usize..6, seed: u64) {
            let cfg = StudyConfig {
                dataset_count: datasets,
                unmodified_per_dataset: per,
                adversarial_per_dataset: per,
                attention_per_dataset: 1,
                main_item_count: 2 * per + 1,
                ..Default::default()
            };
            let pool = synthetic_pool(datasets * per, datasets * per, 3);
            let sets = partition(&pool, &target(), &cfg, seed, 0).unwrap();
            let mut u: Vec<_> = sets.iter().flat_map(|d| d.unmodified_ids.clone()).collect();
            let mut a: Vec<_> = sets.iter().flat_map(|d| d.adversarial_ids.clone()).collect();
            u.sort();
            a.sort();
            proptest::prop_assert_eq!(u, pool.ids_for(&target(), ImageKind::Unmodified));
            proptest::prop_assert_eq!(a, pool.ids_for(&target(), ImageKind::Adversarial));
        }
    }
}
