//! Small CSV import path for real recordings.
//!
//! Signal file: one sample per row, first column, optional header row.
//! Annotation file: header `r_peak,start,end,class`, one beat per row.

use std::path::Path;

use serde::Deserialize;

use super::{derive_example_label, validate_beats, BeatAnnotation, BeatClass, Example};
use crate::error::{Error, LoadError, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    }
}

pub fn read_signal_csv(path: &Path) -> Result<Vec<f32>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let Some(field) = rec.get(0) else { continue };
        match field.parse::<f32>() {
            Ok(v) if v.is_finite() => out.push(v),
            Ok(_) => return Err(Error::Input(format!("{}: row {row}: non-finite sample", path.display()))),
            Err(_) if row == 0 => {}
            Err(_) => return Err(Error::Input(format!("{}: row {row}: `{field}` is not a number", path.display()))),
        }
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{}: no samples", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct BeatRow {
    r_peak: usize,
    start: usize,
    end: usize,
    class: String,
}

pub fn read_annotation_csv(path: &Path) -> Result<Vec<BeatAnnotation>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut beats = Vec::new();
    for row in reader.deserialize::<BeatRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        beats.push(BeatAnnotation { r_peak: row.r_peak, start: row.start, end: row.end, class: row.class.parse::<BeatClass>()? });
    }
    Ok(beats)
}

/// Builds an example from a signal CSV and its beat annotations. Overlapping,
/// unordered or out-of-range beats are rejected with the offending beat index,
/// as are examples that mix PAC and PVC beats.
pub fn import_csv(signal: &Path, annotations: &Path, id: usize) -> Result<Example> {
    let signal = read_signal_csv(signal)?;
    let beats = read_annotation_csv(annotations)?;
    if beats.is_empty() {
        return Err(LoadError::InvalidAnnotation { example: id, beat: 0, reason: "no beats".into() }.into());
    }
    if let Err((beat, reason)) = validate_beats(&beats, signal.len()) {
        return Err(LoadError::InvalidAnnotation { example: id, beat, reason }.into());
    }
    let classes: Vec<BeatClass> = beats.iter().map(|b| b.class).collect();
    let label = derive_example_label(&classes).map_err(|e| LoadError::InvalidAnnotation {
        example: id,
        beat: beats.iter().position(|b| b.class.is_abnormal()).unwrap_or(0),
        reason: e.to_string(),
    })?;
    Ok(Example { id, signal, beats, label })
}
