use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributionMap, MethodId, SignMode};
use crate::engine::checkpoint::{read_f32le, write_f32le};
use crate::error::{Error, LoadError, Result};

pub const DUMP_VERSION: u32 = 1;
pub const DUMP_INDEX: &str = "index.json";
pub const DUMP_VALUES: &str = "values.f32le";

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub example_id: usize,
    pub map: AttributionMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    example_id: usize,
    method: MethodId,
    sign_mode: SignMode,
    target_class: usize,
    /// Offset into the value blob, in values.
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionDump {
    version: u32,
    blob: String,
    records: Vec<IndexEntry>,
}

pub fn write_dump(dir: &Path, records: &[DumpRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut index = Vec::with_capacity(records.len());
    for r in records {
        index.push(IndexEntry {
            example_id: r.example_id,
            method: r.map.method,
            sign_mode: r.map.sign_mode,
            target_class: r.map.target_class,
            offset: blob.len(),
            length: r.map.values.len(),
        });
        blob.extend_from_slice(&r.map.values);
    }
    write_f32le(&dir.join(DUMP_VALUES), &blob)?;
    let dump = AttributionDump { version: DUMP_VERSION, blob: DUMP_VALUES.into(), records: index };
    let path = dir.join(DUMP_INDEX);
    fs::write(&path, serde_json::to_string_pretty(&dump).expect("index serializes")).map_err(|e| Error::io(&path, e))
}

pub fn read_dump(dir: &Path) -> Result<Vec<DumpRecord>> {
    let path = dir.join(DUMP_INDEX);
    let text = crate::engine::checkpoint::read_manifest(&path)?;
    let dump: AttributionDump =
        serde_json::from_str(&text).map_err(|e| LoadError::MalformedManifest { path: path.clone(), reason: e.to_string() })?;
    if dump.version != DUMP_VERSION {
        return Err(LoadError::Version { path, found: dump.version }.into());
    }
    let blob_path = dir.join(&dump.blob);
    let blob = read_f32le(&blob_path, None)?;
    dump.records
        .into_iter()
        .map(|e| {
            let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len()).ok_or_else(|| {
                LoadError::TruncatedBlob {
                    path: blob_path.clone(),
                    expected: (e.offset as u64 + e.length as u64) * 4,
                    actual: blob.len() as u64 * 4,
                }
            })?;
            Ok(DumpRecord {
                example_id: e.example_id,
                map: AttributionMap {
                    values: blob[e.offset..end].to_vec(),
                    method: e.method,
                    sign_mode: e.sign_mode,
                    target_class: e.target_class,
                },
            })
        })
        .collect()
}
