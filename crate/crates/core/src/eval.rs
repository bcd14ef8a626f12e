//! Test-time scoring and VOC-style metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::ModelParams;
use crate::types::{iou, BBox, GroundTruth, LabelVector};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub proposal_index: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_id: String,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Area under the monotone precision envelope (VOC 2010+).
    Continuous,
    /// Mean interpolated precision at recall 0, 0.1, ..., 1 (VOC 2007).
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub nms_threshold: f64,
    pub ap_mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            ap_mode: ApMode::Continuous,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("iou threshold", self.iou_threshold),
            ("nms threshold", self.nms_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {t}")));
            }
        }
        Ok(())
    }
}

/// Runs the frozen model on every image. Labels and saliency maps are not read.
///
/// Returns one detection per (proposal, class), ordered by image then proposal
/// then class, and each image's τ.
pub fn score_dataset(
    params: &ModelParams,
    dataset: &Dataset,
) -> Result<(Vec<Detection>, Vec<ImageScores>)> {
    let per_image = dataset
        .records
        .par_iter()
        .map(|r| {
            let trace = params.forward(&r.features.to_array())?;
            let mut dets = Vec::with_capacity(trace.phi.len());
            for (i, p) in r.proposals.iter().enumerate() {
                for c in 0..trace.phi.nrows() {
                    dets.push(Detection {
                        image_id: r.id.clone(),
                        class_id: c,
                        proposal_index: i,
                        bbox: p.bbox(),
                        score: trace.phi[(c, i)],
                    });
                }
            }
            let scores = ImageScores {
                image_id: r.id.clone(),
                tau: trace.tau.to_vec(),
            };
            Ok((dets, scores))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut dets = Vec::new();
    let mut taus = Vec::with_capacity(per_image.len());
    for (d, t) in per_image {
        dets.extend(d);
        taus.push(t);
    }
    Ok((dets, taus))
}

/// Score descending, then image id and proposal index ascending.
fn rank_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.proposal_index.cmp(&b.proposal_index))
}

/// Greedy suppression within each (image, class) group: a detection is dropped
/// when its IoU with an already kept one is at least `threshold`.
///
/// The output is ordered by image, class, then rank.
pub fn nms(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut groups: BTreeMap<(&str, usize), Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        groups.entry((&d.image_id, d.class_id)).or_default().push(d);
    }
    let mut kept = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| rank_order(a, b));
        let mut chosen: Vec<&Detection> = Vec::new();
        for d in group {
            if chosen.iter().all(|k| iou(&k.bbox, &d.bbox) < threshold) {
                chosen.push(d);
            }
        }
        kept.extend(chosen.into_iter().cloned());
    }
    kept
}

/// AP of a ranked list where `hits[k]` marks a true positive at rank `k` and
/// `num_relevant` is the number of positives to recall. Zero positives gives `None`.
pub fn average_precision(hits: &[bool], num_relevant: usize, mode: ApMode) -> Option<f64> {
    if num_relevant == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_relevant as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    Some(match mode {
        ApMode::Continuous => {
            let mut envelope = precision.clone();
            for k in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[k] = envelope[k].max(envelope[k + 1]);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                if *r > prev_recall {
                    ap += (r - prev_recall) * p;
                    prev_recall = *r;
                }
            }
            ap
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

/// Per-class detection AP. `gt` maps image id to its ground-truth objects.
///
/// Each detection, taken in rank order, is matched to the highest-IoU ground
/// truth of its class in its image. A match at or above `iou_threshold` is a
/// true positive unless that ground truth was already claimed.
pub fn detection_ap(
    detections: &[Detection],
    gt: &BTreeMap<String, Vec<GroundTruth>>,
    num_classes: usize,
    iou_threshold: f64,
    mode: ApMode,
) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class_id == c).collect();
            dets.sort_by(|a, b| rank_order(a, b));
            let mut claimed: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
            let mut num_gt = 0;
            for (id, boxes) in gt {
                let n = boxes.iter().filter(|g| g.class_id == c).count();
                num_gt += n;
                claimed.insert(id, vec![false; boxes.len()]);
            }
            let hits: Vec<bool> = dets
                .iter()
                .map(|d| {
                    let Some(boxes) = gt.get(&d.image_id) else {
                        return false;
                    };
                    let best = boxes
                        .iter()
                        .enumerate()
                        .filter(|(_, g)| g.class_id == c)
                        .map(|(j, g)| (j, iou(&g.bbox, &d.bbox)))
                        .fold(None, |acc: Option<(usize, f64)>, (j, o)| match acc {
                            Some((_, best)) if best >= o => acc,
                            _ => Some((j, o)),
                        });
                    match best {
                        Some((j, o)) if o >= iou_threshold => {
                            let taken = &mut claimed.get_mut(d.image_id.as_str()).unwrap()[j];
                            !std::mem::replace(taken, true)
                        }
                        _ => false,
                    }
                })
                .collect();
            let ap = average_precision(&hits, num_gt, mode);
            if ap.is_none() {
                log::info!("class {c} has no ground truth; AP undefined");
            }
            ap
        })
        .collect()
}

/// Highest-scoring detection per (image, class); ties go to the lower proposal index.
pub fn top_detections(detections: &[Detection]) -> BTreeMap<(String, usize), Detection> {
    let mut top: BTreeMap<(String, usize), Detection> = BTreeMap::new();
    for d in detections {
        let key = (d.image_id.clone(), d.class_id);
        match top.get(&key) {
            Some(t) if rank_order(t, d).is_le() => {}
            _ => {
                top.insert(key, d.clone());
            }
        }
    }
    top
}

/// Per image: its labels and ground truth.
pub struct LabeledImage<'a> {
    pub id: &'a str,
    pub labels: &'a LabelVector,
    pub gt: &'a [GroundTruth],
}

/// Fraction of positive images whose top box of the class overlaps one of its
/// ground-truth boxes with IoU ≥ `iou_threshold`. Classes without positive
/// images give `None`.
pub fn corloc(
    top: &BTreeMap<(String, usize), Detection>,
    images: &[LabeledImage<'_>],
    num_classes: usize,
    iou_threshold: f64,
) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; num_classes];
    let mut positives = vec![0usize; num_classes];
    for img in images {
        for c in img.labels.positives() {
            positives[c] += 1;
            let Some(d) = top.get(&(img.id.to_string(), c)) else {
                continue;
            };
            if img
                .gt
                .iter()
                .any(|g| g.class_id == c && iou(&g.bbox, &d.bbox) >= iou_threshold)
            {
                hits[c] += 1;
            }
        }
    }
    hits.iter()
        .zip(&positives)
        .map(|(&h, &p)| (p > 0).then(|| h as f64 / p as f64))
        .collect()
}

/// Per-class AP of ranking images by τ_c. Ties keep the input order.
pub fn classification_ap(
    tau: &[Vec<f64>],
    labels: &[&LabelVector],
    num_classes: usize,
    mode: ApMode,
) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut order: Vec<usize> = (0..tau.len()).collect();
            order.sort_by(|&a, &b| tau[b][c].total_cmp(&tau[a][c]));
            let hits: Vec<bool> = order.iter().map(|&k| labels[k].is_positive(c)).collect();
            let relevant = hits.iter().filter(|&&h| h).count();
            average_precision(&hits, relevant, mode)
        })
        .collect()
}

/// Unweighted mean over defined entries.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub num_images: usize,
    pub num_gt_boxes: usize,
    pub num_corloc_images: usize,
    pub config: EvalConfig,
    pub detection_ap: Vec<Option<f64>>,
    pub mean_ap: Option<f64>,
    pub corloc: Vec<Option<f64>>,
    pub mean_corloc: Option<f64>,
    pub classification_ap: Vec<Option<f64>>,
    pub mean_classification_ap: Option<f64>,
}

impl EvalReport {
    /// Per-class table with a trailing mean row; undefined entries are blank.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("class,detection_ap,corloc,classification_ap\n");
        for (c, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(
                out,
                "{name},{},{},{}",
                cell(self.detection_ap[c]),
                cell(self.corloc[c]),
                cell(self.classification_ap[c])
            );
        }
        let _ = writeln!(
            out,
            "mean,{},{},{}",
            cell(self.mean_ap),
            cell(self.mean_corloc),
            cell(self.mean_classification_ap)
        );
        out
    }
}

fn labeled(dataset: &Dataset) -> Vec<LabeledImage<'_>> {
    dataset
        .records
        .iter()
        .map(|r| LabeledImage {
            id: &r.id,
            labels: &r.labels,
            gt: &r.gt_boxes,
        })
        .collect()
}

/// Detection and classification AP on `test`; CorLoc on `corloc_set`, or on
/// `test` when none is given.
pub fn evaluate(
    params: &ModelParams,
    test: &Dataset,
    corloc_set: Option<&Dataset>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let c = test.num_classes();
    for ds in std::iter::once(test).chain(corloc_set) {
        if ds.num_classes() != params.config.num_classes
            || ds.feature_dim() != params.config.feature_dim
        {
            return Err(Error::Shape(format!(
                "model expects D={} C={}, dataset has D={} C={}",
                params.config.feature_dim,
                params.config.num_classes,
                ds.feature_dim(),
                ds.num_classes()
            )));
        }
    }
    let (dets, taus) = score_dataset(params, test)?;
    let kept = nms(&dets, config.nms_threshold);
    let gt: BTreeMap<String, Vec<GroundTruth>> = test
        .records
        .iter()
        .map(|r| (r.id.clone(), r.gt_boxes.clone()))
        .collect();
    let det_ap = detection_ap(&kept, &gt, c, config.iou_threshold, config.ap_mode);

    let tau: Vec<Vec<f64>> = taus.into_iter().map(|t| t.tau).collect();
    let labels: Vec<&LabelVector> = test.records.iter().map(|r| &r.labels).collect();
    let cls_ap = classification_ap(&tau, &labels, c, config.ap_mode);

    let loc_set = corloc_set.unwrap_or(test);
    let loc_dets = match corloc_set {
        Some(ds) => score_dataset(params, ds)?.0,
        None => dets,
    };
    let loc = corloc(
        &top_detections(&loc_dets),
        &labeled(loc_set),
        c,
        config.iou_threshold,
    );

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        class_names: test.manifest.class_names.clone(),
        num_images: test.len(),
        num_gt_boxes: gt.values().map(Vec::len).sum(),
        num_corloc_images: loc_set.len(),
        config: *config,
        mean_ap: mean_defined(&det_ap),
        detection_ap: det_ap,
        mean_corloc: mean_defined(&loc),
        corloc: loc,
        mean_classification_ap: mean_defined(&cls_ap),
        classification_ap: cls_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(img: &str, c: usize, i: usize, b: BBox, s: f64) -> Detection {
        Detection {
            image_id: img.into(),
            class_id: c,
            proposal_index: i,
            bbox: b,
            score: s,
        }
    }

    #[test]
    fn nms_examples() {
        let one = vec![det("a", 0, 0, bx(0, 0, 4, 4), 0.3)];
        assert_eq!(nms(&one, 0.4), one);
        let two = vec![
            det("a", 0, 0, bx(0, 0, 4, 4), 0.8),
            det("a", 0, 1, bx(0, 0, 4, 4), 0.9),
        ];
        let kept = nms(&two, 0.4);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_groups_by_image_and_class() {
        let b = bx(0, 0, 4, 4);
        let dets = vec![
            det("a", 0, 0, b, 0.8),
            det("a", 1, 0, b, 0.8),
            det("b", 0, 0, b, 0.8),
        ];
        assert_eq!(nms(&dets, 0.4).len(), 3);
    }

    #[test]
    fn ap_perfect_and_empty() {
        assert_eq!(
            average_precision(&[true, true], 2, ApMode::Continuous),
            Some(1.0)
        );
        assert_eq!(
            average_precision(&[true, true], 2, ApMode::ElevenPoint),
            Some(1.0)
        );
        assert_eq!(
            average_precision(&[false, false], 2, ApMode::Continuous),
            Some(0.0)
        );
        assert_eq!(average_precision(&[], 3, ApMode::Continuous), Some(0.0));
        assert_eq!(average_precision(&[true], 0, ApMode::Continuous), None);
    }

    #[test]
    fn ap_hand_fixture() {
        // 3 GT; ranked hits T F T F T
        // recall 1/3 @ P 1, 2/3 @ P 2/3, 1 @ P 3/5
        let hits = [true, false, true, false, true];
        let ap = average_precision(&hits, 3, ApMode::Continuous).unwrap();
        let expected = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        assert!((ap - expected).abs() < 1e-12, "{ap} vs {expected}");
        // 11-point: t=0..0.3 → 1, t=0.4..0.6 → 2/3, t=0.7..1 → 3/5
        let ap11 = average_precision(&hits, 3, ApMode::ElevenPoint).unwrap();
        let expected11 = (4.0 * 1.0 + 3.0 * (2.0 / 3.0) + 4.0 * 0.6) / 11.0;
        assert!((ap11 - expected11).abs() < 1e-12);
    }

    #[test]
    fn detection_ap_matching() {
        let g = bx(0, 0, 10, 10);
        let gt: BTreeMap<String, Vec<GroundTruth>> = [(
            "a".to_string(),
            vec![GroundTruth {
                class_id: 0,
                bbox: g,
            }],
        )]
        .into();
        let exact = vec![det("a", 0, 0, g, 0.9)];
        assert_eq!(
            detection_ap(&exact, &gt, 1, 0.5, ApMode::Continuous),
            vec![Some(1.0)]
        );
        let miss = vec![det("a", 0, 0, bx(20, 20, 30, 30), 0.9)];
        assert_eq!(
            detection_ap(&miss, &gt, 1, 0.5, ApMode::Continuous),
            vec![Some(0.0)]
        );
        // duplicate of a claimed GT is a false positive
        let dup = vec![det("a", 0, 0, g, 0.9), det("a", 0, 1, g, 0.8)];
        assert_eq!(
            detection_ap(&dup, &gt, 1, 0.5, ApMode::Continuous),
            vec![Some(1.0)]
        );
        let dup_first = vec![
            det("a", 0, 0, g, 0.7),
            det("a", 0, 1, bx(20, 20, 30, 30), 0.8),
        ];
        assert_eq!(
            detection_ap(&dup_first, &gt, 1, 0.5, ApMode::Continuous),
            vec![Some(0.5)]
        );
        // class without GT
        assert_eq!(
            detection_ap(&exact, &gt, 2, 0.5, ApMode::Continuous)[1],
            None
        );
    }

    #[test]
    fn classification_ap_examples() {
        let pos = LabelVector::new(vec![1]).unwrap();
        let neg = LabelVector::new(vec![-1]).unwrap();
        let labels = vec![&neg, &neg, &neg, &pos];
        let tau = vec![vec![0.9], vec![0.8], vec![0.7], vec![0.1]];
        let ap = classification_ap(&tau, &labels, 1, ApMode::Continuous)[0].unwrap();
        assert!((ap - 0.25).abs() < 1e-12);
        let tau = vec![vec![0.1], vec![0.2], vec![0.3], vec![0.9]];
        assert_eq!(
            classification_ap(&tau, &labels, 1, ApMode::Continuous),
            vec![Some(1.0)]
        );
    }

    #[test]
    fn corloc_counts() {
        let g = bx(0, 0, 10, 10);
        let gts = [GroundTruth {
            class_id: 0,
            bbox: g,
        }];
        let lab = LabelVector::new(vec![1, -1]).unwrap();
        let images = [
            LabeledImage {
                id: "a",
                labels: &lab,
                gt: &gts,
            },
            LabeledImage {
                id: "b",
                labels: &lab,
                gt: &gts,
            },
        ];
        let dets = vec![
            det("a", 0, 0, g, 0.9),
            det("a", 0, 1, bx(20, 20, 30, 30), 0.1),
            det("b", 0, 0, g, 0.1),
            det("b", 0, 1, bx(20, 20, 30, 30), 0.9),
        ];
        let loc = corloc(&top_detections(&dets), &images, 2, 0.5);
        assert_eq!(loc, vec![Some(0.5), None]);
    }

    #[test]
    fn top_detection_ties_prefer_lower_index() {
        let b = bx(0, 0, 2, 2);
        let dets = vec![det("a", 0, 3, b, 0.5), det("a", 0, 1, b, 0.5)];
        assert_eq!(
            top_detections(&dets)[&("a".to_string(), 0)].proposal_index,
            1
        );
    }

    #[test]
    fn csv_layout() {
        let report = EvalReport {
            schema_version: 1,
            class_names: vec!["a".into(), "b".into()],
            num_images: 1,
            num_gt_boxes: 1,
            num_corloc_images: 1,
            config: EvalConfig::default(),
            detection_ap: vec![Some(1.0), None],
            mean_ap: Some(1.0),
            corloc: vec![Some(0.5), None],
            mean_corloc: Some(0.5),
            classification_ap: vec![Some(1.0), None],
            mean_classification_ap: Some(1.0),
        };
        assert_eq!(
            report.to_csv(),
            "class,detection_ap,corloc,classification_ap\n\
             a,1.000000,0.500000,1.000000\n\
             b,,,\n\
             mean,1.000000,0.500000,1.000000\n"
        );
    }
}
