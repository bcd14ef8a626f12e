//! Dataset files and the synthetic generator.
//!
//! On-disk layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/records/<id>.json   header: labels, proposals, ground truth
//! <dir>/records/<id>.bin    label grid (u32), saliency maps (f32), features (f32)
//! ```
//!
//! Binary payloads are little-endian and row-major behind a 16-byte header.

mod format;
mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ImageRecord;

pub use format::{read_record, write_record, RECORD_MAGIC};
pub use synth::{class_template, generate_synthetic, SynthConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_DIR: &str = "records";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_names: Vec<String>,
    pub images: Vec<String>,
    /// RNG seed for synthetic sets.
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, feature_dim: usize, seed: Option<u64>) -> Self {
        Self {
            version: FORMAT_VERSION,
            num_classes: class_names.len(),
            feature_dim,
            class_names,
            images: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::invalid(
                "manifest.version",
                format!(
                    "unsupported version {} (expected {FORMAT_VERSION})",
                    self.version
                ),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("manifest.num_classes", "must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("manifest.feature_dim", "must be at least 1"));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::invalid(
                "manifest.class_names",
                format!(
                    "{} names for {} classes",
                    self.class_names.len(),
                    self.num_classes
                ),
            ));
        }
        let unique: BTreeSet<&String> = self.class_names.iter().collect();
        if unique.len() != self.class_names.len() {
            return Err(Error::invalid(
                "manifest.class_names",
                "names must be unique",
            ));
        }
        let stems: BTreeSet<&String> = self.images.iter().collect();
        if stems.len() != self.images.len() {
            return Err(Error::invalid("manifest.images", "duplicate image stem"));
        }
        Ok(())
    }
}

/// A manifest and its records, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    /// Builds a dataset, deriving the image list from the records.
    pub fn new(mut manifest: DatasetManifest, records: Vec<ImageRecord>) -> Result<Self> {
        manifest.images = records.iter().map(|r| r.id.clone()).collect();
        manifest.validate()?;
        for r in &records {
            r.validate(manifest.num_classes, manifest.feature_dim)?;
        }
        Ok(Self { manifest, records })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn prefix_error(path: &Path, err: Error) -> Error {
    match err {
        Error::Invalid { field, message } => Error::Invalid {
            field: format!("{}: {field}", path.display()),
            message,
        },
        other => other,
    }
}

/// Loads and validates a dataset from `<dir>/manifest.json` (or a manifest path).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    manifest
        .validate()
        .map_err(|e| prefix_error(&manifest_path, e))?;

    let records = manifest
        .images
        .par_iter()
        .map(|stem| {
            let header = dir.join(RECORDS_DIR).join(format!("{stem}.json"));
            let blob = dir.join(RECORDS_DIR).join(format!("{stem}.bin"));
            let record = read_record(&header, &blob)?;
            if record.id != *stem {
                return Err(Error::invalid(
                    format!("{}: id", header.display()),
                    format!(
                        "record id {:?} does not match manifest stem {stem:?}",
                        record.id
                    ),
                ));
            }
            record
                .validate(manifest.num_classes, manifest.feature_dim)
                .map_err(|e| prefix_error(&header, e))?;
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, records })
}

/// Writes the dataset under `dir`. Output bytes depend only on the dataset.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut manifest = dataset.manifest.clone();
    manifest.images = dataset.records.iter().map(|r| r.id.clone()).collect();
    manifest.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if !dataset.records.is_empty() {
        let rec_dir = dir.join(RECORDS_DIR);
        fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
        for r in &dataset.records {
            r.validate(manifest.num_classes, manifest.feature_dim)?;
            write_record(
                r,
                &rec_dir.join(format!("{}.json", r.id)),
                &rec_dir.join(format!("{}.bin", r.id)),
            )?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
