//! Dataset manifest: `manifest.csv` (one row per sample) plus a
//! `manifest.json` sidecar documenting column semantics and generator
//! settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{Regime, N_ACTIVE_PARAMS, N_PARAMS, PARAM_NAMES};
use super::targets::{N_TARGETS, TARGET_NAMES};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const META_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub sample_id: String,
    /// Path of the image relative to the manifest directory.
    pub image_file: String,
    pub descriptors: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnDoc {
    pub column: String,
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enters_dynamics: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub format_version: u32,
    pub regime: Regime,
    pub grid_size: usize,
    pub seed: u64,
    pub count: usize,
    pub parameters: Vec<ColumnDoc>,
    pub targets: Vec<ColumnDoc>,
    /// Samples whose field was constant, so the length scale fell back to the
    /// grid size.
    pub undefined_length_scale: Vec<String>,
}

impl ManifestMeta {
    pub fn new(regime: Regime, grid_size: usize, seed: u64, count: usize) -> Self {
        let parameters = (0..N_PARAMS)
            .map(|i| ColumnDoc {
                column: param_column(i),
                name: PARAM_NAMES[i].into(),
                range: Some(regime.ranges()[i]),
                enters_dynamics: Some(i < N_ACTIVE_PARAMS),
            })
            .collect();
        let targets = (0..N_TARGETS)
            .map(|i| ColumnDoc {
                column: target_column(i),
                name: TARGET_NAMES[i].into(),
                range: None,
                enters_dynamics: None,
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            regime,
            grid_size,
            seed,
            count,
            parameters,
            targets,
            undefined_length_scale: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    pub meta: Option<ManifestMeta>,
}

pub fn param_column(i: usize) -> String {
    format!("p{:02}", i + 1)
}

pub fn target_column(i: usize) -> String {
    format!("t{}", i + 1)
}

pub fn header() -> Vec<String> {
    let mut h = vec!["sample_id".to_string(), "image_file".to_string()];
    h.extend((0..N_PARAMS).map(param_column));
    h.extend((0..N_TARGETS).map(target_column));
    h
}

/// Writes `manifest.csv` (and `manifest.json` when metadata is present) into `dir`.
pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let csv_err = |e: csv::Error| Error::Manifest {
        path: path.clone(),
        row: 0,
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(header()).map_err(csv_err)?;
    for row in &manifest.rows {
        let mut rec = vec![row.sample_id.clone(), row.image_file.clone()];
        rec.extend(row.descriptors.iter().map(f64::to_string));
        rec.extend(row.targets.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    if let Some(meta) = &manifest.meta {
        let meta_path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(meta).expect("meta serializes");
        fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
    }
    Ok(path)
}

/// Parses a manifest, validating the header and every row. Row numbers in
/// errors are 1-based file lines (the header is line 1).
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let err = |row: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => err(0, format!("{other:?}")),
        })?;
    let mut records = r.records();
    let head = records
        .next()
        .ok_or_else(|| err(1, "empty manifest".into()))?
        .map_err(|e| err(1, e.to_string()))?;
    let expected = header();
    let got: Vec<&str> = head.iter().collect();
    if got != expected {
        let n_params = got.iter().filter(|c| c.starts_with('p')).count();
        let reason = if n_params != N_PARAMS {
            format!("expected {N_PARAMS} descriptor columns p01..p18, found {n_params}")
        } else {
            format!("header mismatch: expected {expected:?}, got {got:?}")
        };
        return Err(err(1, reason));
    }
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        if rec.len() != expected.len() {
            return Err(err(line, format!("expected {} fields, got {}", expected.len(), rec.len())));
        }
        let parse = |j: usize| -> Result<f64> {
            let s = &rec[j];
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| err(line, format!("column {}: `{s}` is not a number", expected[j])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(line, format!("column {}: non-finite value", expected[j])))
            }
        };
        rows.push(ManifestRow {
            sample_id: rec[0].to_string(),
            image_file: rec[1].to_string(),
            descriptors: (2..2 + N_PARAMS).map(parse).collect::<Result<_>>()?,
            targets: (2 + N_PARAMS..expected.len()).map(parse).collect::<Result<_>>()?,
        });
    }
    let meta_path = path.with_file_name(META_FILE);
    let meta = match fs::read_to_string(&meta_path) {
        Ok(text) => Some(
            serde_json::from_str(&text)
                .map_err(|e| err(0, format!("{}: {e}", meta_path.display())))?,
        ),
        Err(_) => None,
    };
    Ok(DatasetManifest { rows, meta })
}
