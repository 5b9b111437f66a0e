//! Dataset serialization: `manifest.json`, `samples.jsonl`, and one PPM
//! image per sample under `images/`.

use super::gen::{generate_sample, DataSample, TaskConfig};
use super::vocab;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ModelConfig;
use crate::reward::BoundingBox;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub task: TaskConfig,
    /// Full id → name vocabulary listing.
    pub vocab: Vec<String>,
    pub sample_count: usize,
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_VERSION {
            return Err(Error::Version { expected: DATASET_VERSION, found: self.format_version });
        }
        if self.train_ids.len() + self.test_ids.len() != self.sample_count {
            return Err(Error::Validation(format!(
                "splits cover {} ids but manifest declares {} samples",
                self.train_ids.len() + self.test_ids.len(),
                self.sample_count
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in self.train_ids.iter().chain(&self.test_ids) {
            if !seen.insert(*id) {
                return Err(Error::Validation(format!("id {} appears in both splits", id)));
            }
        }
        Ok(())
    }
}

/// On-disk record; the image lives in a sidecar PPM file.
#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: u64,
    question: Vec<usize>,
    gold: Vec<usize>,
    boxes: Vec<BoundingBox>,
    warmup_response: Vec<usize>,
    image: String,
}

/// Generates `n_train + n_test` samples; the first `n_train` ids form the
/// training split.
pub fn gen_dataset(
    config: &ModelConfig,
    task: &TaskConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(DatasetManifest, Vec<DataSample>)> {
    let total = n_train + n_test;
    if total == 0 {
        return Err(Error::Usage("dataset must contain at least one sample".into()));
    }
    let mut samples = Vec::with_capacity(total);
    for id in 0..total as u64 {
        samples.push(generate_sample(config, task, id, seed)?);
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        model_config: config.clone(),
        task: task.clone(),
        vocab: vocab::names(config.vocab),
        sample_count: total,
        train_ids: (0..n_train as u64).collect(),
        test_ids: (n_train as u64..total as u64).collect(),
        seed,
    };
    Ok((manifest, samples))
}

pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, samples: &[DataSample]) -> Result<()> {
    manifest.validate()?;
    if samples.len() != manifest.sample_count {
        return Err(Error::Validation(format!(
            "manifest declares {} samples, got {}",
            manifest.sample_count,
            samples.len()
        )));
    }
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;

    let mut jsonl = std::fs::File::create(dir.join("samples.jsonl"))?;
    for s in samples {
        let rel = format!("images/{}.ppm", s.id);
        s.image.save_ppm(&dir.join(&rel))?;
        let record = SampleRecord {
            id: s.id,
            question: s.question.clone(),
            gold: s.gold.clone(),
            boxes: s.boxes.clone(),
            warmup_response: s.warmup_response.clone(),
            image: rel,
        };
        writeln!(jsonl, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<DataSample>)> {
    let manifest: DatasetManifest = {
        let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
        let head: serde_json::Value = serde_json::from_str(&raw)?;
        let found = head
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Validation("manifest missing format_version".into()))?;
        if found as u32 != DATASET_VERSION {
            return Err(Error::Version { expected: DATASET_VERSION, found: found as u32 });
        }
        serde_json::from_str(&raw)?
    };
    manifest.validate()?;

    let file = std::fs::File::open(dir.join("samples.jsonl"))?;
    let mut samples = Vec::with_capacity(manifest.sample_count);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let image = Image::load_ppm(&dir.join(&record.image)).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: format!("image {}: {}", record.image, e),
        })?;
        samples.push(DataSample {
            id: record.id,
            image,
            question: record.question,
            gold: record.gold,
            boxes: record.boxes,
            warmup_response: record.warmup_response,
        });
    }
    if samples.len() != manifest.sample_count {
        return Err(Error::Validation(format!(
            "manifest declares {} samples but samples.jsonl holds {}",
            manifest.sample_count,
            samples.len()
        )));
    }
    Ok((manifest, samples))
}

/// Splits loaded samples by the manifest's id lists.
pub fn split_samples<'a>(
    manifest: &DatasetManifest,
    samples: &'a [DataSample],
) -> (Vec<&'a DataSample>, Vec<&'a DataSample>) {
    let train: std::collections::HashSet<u64> = manifest.train_ids.iter().copied().collect();
    let test: std::collections::HashSet<u64> = manifest.test_ids.iter().copied().collect();
    (
        samples.iter().filter(|s| train.contains(&s.id)).collect(),
        samples.iter().filter(|s| test.contains(&s.id)).collect(),
    )
}
