use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_example_label, example_rng, gen_example, validate_beats, BeatAnnotation, BeatClass, Example, GeneratorParams};
use crate::engine::checkpoint::{read_f32le, write_f32le};
use crate::error::{Error, LoadError, Result};

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SIGNAL_BLOB: &str = "signals.f32le";

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sampling_rate: f64,
    pub signal_length: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn examples(&self) -> impl Iterator<Item = (Split, &Example)> {
        self.train.iter().map(|e| (Split::Train, e)).chain(self.test.iter().map(|e| (Split::Test, e)))
    }

    pub fn find(&self, id: usize) -> Option<&Example> {
        self.train.iter().chain(&self.test).find(|e| e.id == id)
    }

    pub fn class_counts(split: &[Example]) -> [usize; 3] {
        let mut counts = [0; 3];
        for e in split {
            counts[e.label.index()] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: [usize; 3],
    pub test: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: usize,
    pub split: Split,
    /// Offset into the blob, in samples.
    pub offset: usize,
    pub length: usize,
    pub label: BeatClass,
    pub beats: Vec<BeatAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sampling_rate: f64,
    pub signal_length: usize,
    pub class_names: Vec<String>,
    pub counts: SplitCounts,
    pub blob: String,
    pub examples: Vec<ExampleRecord>,
}

fn gen_split(n_per_class: usize, params: &GeneratorParams, stream: u64, id_offset: usize) -> Result<Vec<Example>> {
    (0..3 * n_per_class)
        .into_par_iter()
        .map(|i| {
            let class = BeatClass::ALL[i % 3];
            let mut rng = example_rng(params.seed, stream, i as u64);
            let mut ex = gen_example(class, params, &mut rng)?;
            ex.id = id_offset + i;
            Ok(ex)
        })
        .collect()
}

/// Balanced train and test splits with `n_per_class` examples per class each.
/// Train ids are `0..3n`, test ids `3n..6n`; the splits use disjoint RNG streams.
pub fn gen_dataset(n_per_class: usize, params: &GeneratorParams) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    params.validate()?;
    let train = gen_split(n_per_class, params, TRAIN_STREAM, 0)?;
    let test = gen_split(n_per_class, params, TEST_STREAM, 3 * n_per_class)?;
    Ok(Dataset { sampling_rate: params.sampling_rate, signal_length: params.signal_length, train, test })
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut records = Vec::new();
    for (split, ex) in dataset.examples() {
        records.push(ExampleRecord {
            id: ex.id,
            split,
            offset: blob.len(),
            length: ex.signal.len(),
            label: ex.label,
            beats: ex.beats.clone(),
        });
        blob.extend_from_slice(&ex.signal);
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        sampling_rate: dataset.sampling_rate,
        signal_length: dataset.signal_length,
        class_names: super::class_names(),
        counts: SplitCounts { train: Dataset::class_counts(&dataset.train), test: Dataset::class_counts(&dataset.test) },
        blob: SIGNAL_BLOB.to_string(),
        examples: records,
    };
    write_f32le(&dir.join(SIGNAL_BLOB), &blob)?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = crate::engine::checkpoint::read_manifest(&path)?;
    let malformed = |reason: String| LoadError::MalformedManifest { path: path.clone(), reason };
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(LoadError::Version { path, found: manifest.version }.into());
    }
    if manifest.class_names != super::class_names() {
        return Err(malformed(format!("unexpected class names {:?}", manifest.class_names)).into());
    }
    let blob_path: PathBuf = dir.join(&manifest.blob);
    let blob = read_f32le(&blob_path, None)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for rec in &manifest.examples {
        let end = rec.offset.checked_add(rec.length).ok_or_else(|| malformed(format!("example {} overflows", rec.id)))?;
        if end > blob.len() {
            return Err(LoadError::TruncatedBlob { path: blob_path, expected: end as u64 * 4, actual: blob.len() as u64 * 4 }.into());
        }
        if rec.length != manifest.signal_length {
            return Err(malformed(format!(
                "example {} has length {}, manifest says {}",
                rec.id, rec.length, manifest.signal_length
            ))
            .into());
        }
        if let Err((beat, reason)) = validate_beats(&rec.beats, rec.length) {
            return Err(LoadError::InvalidAnnotation { example: rec.id, beat, reason }.into());
        }
        let classes: Vec<BeatClass> = rec.beats.iter().map(|b| b.class).collect();
        let label = derive_example_label(&classes).map_err(|e| LoadError::InvalidAnnotation {
            example: rec.id,
            beat: 0,
            reason: e.to_string(),
        })?;
        if label != rec.label {
            return Err(LoadError::InvalidAnnotation {
                example: rec.id,
                beat: 0,
                reason: format!("label {} disagrees with beats ({label})", rec.label),
            }
            .into());
        }
        let ex = Example { id: rec.id, signal: blob[rec.offset..end].to_vec(), beats: rec.beats.clone(), label };
        match rec.split {
            Split::Train => train.push(ex),
            Split::Test => test.push(ex),
        }
    }
    let counts = SplitCounts { train: Dataset::class_counts(&train), test: Dataset::class_counts(&test) };
    if counts != manifest.counts {
        return Err(malformed(format!("counts {:?} do not match the example records", manifest.counts)).into());
    }
    Ok(Dataset { sampling_rate: manifest.sampling_rate, signal_length: manifest.signal_length, train, test })
}
