//! Geometry and dataset domain types.
//!
//! Everything here is immutable once constructed. Validation happens in the
//! constructors so downstream modules can index without re-checking.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box over half-open pixel intervals `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::invalid(
                "box",
                format!("degenerate box ({x0},{y0},{x1},{y1})"),
            ));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            u64::from(x1 - x0) * u64::from(y1 - y0)
        }
    }

    /// Smallest box containing both.
    pub fn union_hull(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Translate an inclusive VOC-style box `(xmin, ymin, xmax, ymax)`.
    pub fn from_inclusive(xmin: u32, ymin: u32, xmax: u32, ymax: u32) -> Result<Self> {
        Self::new(xmin, ymin, xmax + 1, ymax + 1)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Row-major label image of superpixel ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelGrid {
    width: u32,
    height: u32,
    labels: Vec<u32>,
    num_superpixels: u32,
    areas: Vec<u64>,
    bboxes: Vec<BBox>,
}

impl SuperpixelGrid {
    /// Builds a grid; every id in `[0, max_id]` must occur.
    pub fn new(width: u32, height: u32, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("grid", "width and height must be positive"));
        }
        let expected = width as usize * height as usize;
        if labels.len() != expected {
            return Err(Error::invalid(
                "grid.labels",
                format!("expected {expected} labels, got {}", labels.len()),
            ));
        }
        let num = labels.iter().copied().max().unwrap_or(0) + 1;
        let mut areas = vec![0u64; num as usize];
        let mut extents = vec![(u32::MAX, u32::MAX, 0u32, 0u32); num as usize];
        for y in 0..height {
            for x in 0..width {
                let s = labels[(y * width + x) as usize] as usize;
                areas[s] += 1;
                let e = &mut extents[s];
                e.0 = e.0.min(x);
                e.1 = e.1.min(y);
                e.2 = e.2.max(x + 1);
                e.3 = e.3.max(y + 1);
            }
        }
        if let Some(missing) = areas.iter().position(|&a| a == 0) {
            return Err(Error::invalid(
                "grid.labels",
                format!("superpixel id {missing} never occurs (ids must be dense)"),
            ));
        }
        let bboxes = extents
            .into_iter()
            .map(|(x0, y0, x1, y1)| BBox { x0, y0, x1, y1 })
            .collect();
        Ok(Self {
            width,
            height,
            labels,
            num_superpixels: num,
            areas,
            bboxes,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_superpixels(&self) -> usize {
        self.num_superpixels as usize
    }

    pub fn label_at(&self, x: u32, y: u32) -> u32 {
        self.labels[(y * self.width + x) as usize]
    }

    /// Pixel count of one superpixel.
    pub fn superpixel_area(&self, id: u32) -> u64 {
        self.areas[id as usize]
    }

    pub fn superpixel_bbox(&self, id: u32) -> BBox {
        self.bboxes[id as usize]
    }

    /// Neighbor sets under 4-connectivity. Symmetric and irreflexive.
    pub fn adjacency(&self) -> Vec<BTreeSet<u32>> {
        let mut adj = vec![BTreeSet::new(); self.num_superpixels()];
        let w = self.width as usize;
        for (idx, &s) in self.labels.iter().enumerate() {
            let x = idx % w;
            if x + 1 < w {
                let r = self.labels[idx + 1];
                if r != s {
                    adj[s as usize].insert(r);
                    adj[r as usize].insert(s);
                }
            }
            if idx + w < self.labels.len() {
                let d = self.labels[idx + w];
                if d != s {
                    adj[s as usize].insert(d);
                    adj[d as usize].insert(s);
                }
            }
        }
        adj
    }
}

/// A region proposal: a union of superpixels with its derived box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    superpixels: Vec<u32>,
    bbox: BBox,
    area_px: u64,
}

impl Proposal {
    /// Member ids are deduplicated and sorted. Non-contiguous unions are accepted.
    pub fn new(grid: &SuperpixelGrid, ids: impl IntoIterator<Item = u32>) -> Result<Self> {
        let set: BTreeSet<u32> = ids.into_iter().collect();
        if set.is_empty() {
            return Err(Error::invalid("proposal", "empty superpixel set"));
        }
        let mut bbox: Option<BBox> = None;
        let mut area_px = 0;
        for &id in &set {
            if id as usize >= grid.num_superpixels() {
                return Err(Error::invalid(
                    "proposal",
                    format!(
                        "superpixel id {id} out of range (grid has {})",
                        grid.num_superpixels()
                    ),
                ));
            }
            area_px += grid.superpixel_area(id);
            let b = grid.superpixel_bbox(id);
            bbox = Some(bbox.map_or(b, |acc| acc.union_hull(&b)));
        }
        Ok(Self {
            superpixels: set.into_iter().collect(),
            bbox: bbox.expect("nonempty"),
            area_px,
        })
    }

    pub fn superpixels(&self) -> &[u32] {
        &self.superpixels
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn area_px(&self) -> u64 {
        self.area_px
    }

    pub fn contains(&self, id: u32) -> bool {
        self.superpixels.binary_search(&id).is_ok()
    }
}

/// Per-pixel non-negative evidence for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    class_id: usize,
    values: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(class_id: usize, values: Vec<f32>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(
                "saliency",
                format!("class {class_id}: value {v} is not finite and non-negative"),
            ));
        }
        Ok(Self { class_id, values })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

/// Image-level labels in `{+1, -1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<i8>);

impl LabelVector {
    pub fn new(y: Vec<i8>) -> Result<Self> {
        if let Some(v) = y.iter().find(|v| **v != 1 && **v != -1) {
            return Err(Error::invalid("labels", format!("entry {v} is not +1/-1")));
        }
        Ok(Self(y))
    }

    pub fn from_positives(num_classes: usize, positives: &[usize]) -> Self {
        let mut y = vec![-1i8; num_classes];
        for &c in positives {
            y[c] = 1;
        }
        Self(y)
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn is_positive(&self, c: usize) -> bool {
        self.0[c] == 1
    }

    /// Positive classes in ascending order.
    pub fn positives(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&c| self.0[c] == 1).collect()
    }
}

/// A ground-truth object, used only by evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Dense row-major matrix of per-proposal features, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(
                "features",
                format!(
                    "{rows}x{cols} matrix needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features", "non-finite entry"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Widened copy for double-precision compute.
    pub fn to_array(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.rows, self.cols), |(i, j)| {
            f64::from(self.data[i * self.cols + j])
        })
    }
}

/// One example: grid, proposals, features, labels, saliency maps, optional GT.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub grid: SuperpixelGrid,
    pub proposals: Vec<Proposal>,
    pub features: FeatureMatrix,
    pub labels: LabelVector,
    pub saliency: Vec<SaliencyMap>,
    pub gt_boxes: Vec<GroundTruth>,
}

impl ImageRecord {
    /// Cross-field validation. `feature_dim` and `num_classes` come from the manifest.
    pub fn validate(&self, num_classes: usize, feature_dim: usize) -> Result<()> {
        let field = |f: &str| format!("{}: {f}", self.id);
        if self.proposals.is_empty() {
            return Err(Error::invalid(
                field("proposals"),
                "at least one proposal required",
            ));
        }
        if self.features.rows() != self.proposals.len() {
            return Err(Error::invalid(
                field("features"),
                format!(
                    "dimension mismatch: {} feature rows for {} proposals",
                    self.features.rows(),
                    self.proposals.len()
                ),
            ));
        }
        if self.features.cols() != feature_dim {
            return Err(Error::invalid(
                field("features"),
                format!(
                    "dimension mismatch: {} columns, manifest feature_dim {feature_dim}",
                    self.features.cols()
                ),
            ));
        }
        if self.labels.num_classes() != num_classes {
            return Err(Error::invalid(
                field("labels"),
                format!(
                    "dimension mismatch: {} entries, manifest has {num_classes} classes",
                    self.labels.num_classes()
                ),
            ));
        }
        let positives = self.labels.positives();
        if positives.is_empty() {
            return Err(Error::invalid(
                field("labels"),
                "label vector has no positive class",
            ));
        }
        let mut map_classes: Vec<usize> = self.saliency.iter().map(|m| m.class_id()).collect();
        map_classes.sort_unstable();
        if map_classes != positives {
            return Err(Error::invalid(
                field("saliency"),
                format!("maps for classes {map_classes:?}, positives are {positives:?}"),
            ));
        }
        for m in &self.saliency {
            if m.values().len() != self.grid.num_pixels() {
                return Err(Error::invalid(
                    field("saliency"),
                    format!(
                        "dimension mismatch: map for class {} has {} values, grid has {} pixels",
                        m.class_id(),
                        m.values().len(),
                        self.grid.num_pixels()
                    ),
                ));
            }
        }
        for p in &self.proposals {
            if p.superpixels()
                .iter()
                .any(|&s| s as usize >= self.grid.num_superpixels())
            {
                return Err(Error::invalid(
                    field("proposals"),
                    "superpixel id out of range",
                ));
            }
        }
        for g in &self.gt_boxes {
            if g.class_id >= num_classes {
                return Err(Error::invalid(
                    field("gt_boxes"),
                    format!("class {} out of range", g.class_id),
                ));
            }
            if g.bbox.x1 <= g.bbox.x0 || g.bbox.y1 <= g.bbox.y0 {
                return Err(Error::invalid(field("gt_boxes"), "degenerate box"));
            }
        }
        Ok(())
    }

    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    pub fn saliency_for(&self, class_id: usize) -> Option<&SaliencyMap> {
        self.saliency.iter().find(|m| m.class_id() == class_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(10, 0, 20, 10)), 0.0);
        assert_eq!(iou(&a, &bx(5, 0, 15, 10)), 50.0 / 150.0);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BBox::new(3, 0, 3, 5).is_err());
        assert!(BBox::new(0, 4, 2, 1).is_err());
        assert_eq!(BBox::from_inclusive(0, 0, 9, 9).unwrap(), bx(0, 0, 10, 10));
    }

    #[test]
    fn adjacency_small_grids() {
        let g = SuperpixelGrid::new(2, 1, vec![0, 1]).unwrap();
        let adj = g.adjacency();
        assert_eq!(adj[0], BTreeSet::from([1]));
        assert_eq!(adj[1], BTreeSet::from([0]));

        let g = SuperpixelGrid::new(1, 1, vec![0]).unwrap();
        assert!(g.adjacency()[0].is_empty());
    }

    #[test]
    fn diagonal_touch_is_not_adjacent() {
        // 0 1
        // 2 0   -> the two 0 pixels touch only diagonally with nothing
        let g = SuperpixelGrid::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let adj = g.adjacency();
        assert_eq!(adj[0], BTreeSet::from([1]));
        let g = SuperpixelGrid::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let adj = g.adjacency();
        assert!(!adj[0].contains(&3));
        assert!(!adj[1].contains(&2));
    }

    #[test]
    fn sparse_ids_rejected() {
        let err = SuperpixelGrid::new(2, 1, vec![0, 2]).unwrap_err();
        assert!(err.to_string().contains("never occurs"));
    }

    #[test]
    fn proposal_box_and_area() {
        let g = SuperpixelGrid::new(4, 2, vec![0, 0, 1, 1, 2, 2, 3, 3]).unwrap();
        let p = Proposal::new(&g, [3, 0, 0]).unwrap();
        assert_eq!(p.superpixels(), &[0, 3]);
        assert_eq!(p.area_px(), 4);
        assert_eq!(p.bbox(), bx(0, 0, 4, 2));
        assert!(Proposal::new(&g, []).is_err());
        assert!(Proposal::new(&g, [4]).is_err());
    }
}
