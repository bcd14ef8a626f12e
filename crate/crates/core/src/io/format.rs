use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::types::{
    FeatureMatrix, GroundTruth, ImageRecord, LabelVector, Proposal, SaliencyMap, SuperpixelGrid,
};

/// First 8 bytes of every record blob; followed by `u32` version and `u32` reserved.
pub const RECORD_MAGIC: [u8; 8] = *b"SGWSREC\0";
const HEADER_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    version: u32,
    id: String,
    width: u32,
    height: u32,
    feature_dim: usize,
    labels: Vec<i8>,
    /// Class of each saliency map in blob order.
    saliency_classes: Vec<usize>,
    proposals: Vec<Vec<u32>>,
    gt_boxes: Vec<GroundTruth>,
}

pub fn write_record(record: &ImageRecord, header_path: &Path, blob_path: &Path) -> Result<()> {
    let header = RecordHeader {
        version: FORMAT_VERSION,
        id: record.id.clone(),
        width: record.grid.width(),
        height: record.grid.height(),
        feature_dim: record.features.cols(),
        labels: record.labels.values().to_vec(),
        saliency_classes: record.saliency.iter().map(SaliencyMap::class_id).collect(),
        proposals: record
            .proposals
            .iter()
            .map(|p| p.superpixels().to_vec())
            .collect(),
        gt_boxes: record.gt_boxes.clone(),
    };
    let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
    text.push('\n');
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;

    let n_px = record.grid.num_pixels();
    let mut blob = Vec::with_capacity(
        HEADER_LEN + 4 * (n_px * (1 + record.saliency.len()) + record.features.data().len()),
    );
    blob.extend_from_slice(&RECORD_MAGIC);
    blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    blob.extend_from_slice(&0u32.to_le_bytes());
    for &l in record.grid.labels() {
        blob.extend_from_slice(&l.to_le_bytes());
    }
    for m in &record.saliency {
        for &v in m.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &v in record.features.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(blob_path, blob).map_err(|e| Error::io(blob_path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take_words(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n.checked_mul(4)?)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32s(&mut self, n: usize) -> Option<Vec<u32>> {
        Some(
            self.take_words(n)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        Some(
            self.take_words(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

/// Prefixes invalid-field errors with the file they came from.
fn in_file(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Invalid { field, message } => Error::Invalid {
            field: format!("{}: {field}", path.display()),
            message,
        },
        other => other,
    }
}

pub fn read_record(header_path: &Path, blob_path: &Path) -> Result<ImageRecord> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: RecordHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(header_path, e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(
            header_path,
            format!("unsupported version {}", header.version),
        ));
    }
    let bytes = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    if bytes.len() < HEADER_LEN || bytes[..8] != RECORD_MAGIC {
        return Err(Error::format(blob_path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(
            blob_path,
            format!("unsupported version {version}"),
        ));
    }
    let n_px = header.width as usize * header.height as usize;
    let n_rows = header.proposals.len();
    let expected =
        HEADER_LEN + 4 * (n_px * (1 + header.saliency_classes.len()) + n_rows * header.feature_dim);
    if bytes.len() != expected {
        return Err(Error::format(
            blob_path,
            format!(
                "dimension mismatch: {} bytes, header implies {expected}",
                bytes.len()
            ),
        ));
    }
    let mut cur = Cursor {
        bytes: &bytes,
        pos: HEADER_LEN,
    };
    let truncated = || Error::format(blob_path, "truncated payload");
    let labels = cur.u32s(n_px).ok_or_else(truncated)?;
    let in_blob = in_file(blob_path);
    let grid = SuperpixelGrid::new(header.width, header.height, labels).map_err(&in_blob)?;
    let mut saliency = Vec::with_capacity(header.saliency_classes.len());
    for &c in &header.saliency_classes {
        let values = cur.f32s(n_px).ok_or_else(truncated)?;
        saliency.push(SaliencyMap::new(c, values).map_err(&in_blob)?);
    }
    let features = FeatureMatrix::new(
        n_rows,
        header.feature_dim,
        cur.f32s(n_rows * header.feature_dim)
            .ok_or_else(truncated)?,
    )
    .map_err(&in_blob)?;
    let proposals = header
        .proposals
        .iter()
        .map(|ids| Proposal::new(&grid, ids.iter().copied()))
        .collect::<Result<Vec<_>>>()
        .map_err(in_file(header_path))?;
    Ok(ImageRecord {
        id: header.id,
        grid,
        proposals,
        features,
        labels: LabelVector::new(header.labels).map_err(in_file(header_path))?,
        saliency,
        gt_boxes: header.gt_boxes,
    })
}
