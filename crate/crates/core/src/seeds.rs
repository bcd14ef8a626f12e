//! Context-aware seed selection.
//!
//! For every labeled class the proposal with the largest saliency contrast
//! against its adjacent superpixels becomes the seed. Negatives for the
//! saliency branch are the proposals with the lowest in-region saliency.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, ImageRecord, Proposal, SaliencyMap, SuperpixelGrid};

/// Default bandwidth of the area term.
pub const DEFAULT_SIGMA: f64 = 1e3;
/// Default relative threshold of the thresholding baseline.
pub const DEFAULT_THETA: f64 = 0.5;
/// Cap on `area / sigma^2` before exponentiation.
pub const MAX_AREA_EXPONENT: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub proposal_index: usize,
    pub class_id: usize,
    pub rs: f64,
    pub ns: f64,
    pub contrast: f64,
}

/// Seeds and mined negatives for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAssignment {
    /// Positive classes, ascending.
    pub classes: Vec<usize>,
    /// `seeds[k]` is the seed proposal for `classes[k]`.
    pub seeds: Vec<usize>,
    /// Winning score per class, aligned with `seeds`.
    pub seed_scores: Vec<SeedScore>,
    /// One negative per positive class unless the image has too few proposals.
    pub negatives: Vec<usize>,
}

impl SeedAssignment {
    /// Seeds followed by negatives.
    pub fn sample_indices(&self) -> Vec<usize> {
        self.seeds.iter().chain(&self.negatives).copied().collect()
    }

    /// Saliency targets aligned with [`sample_indices`](Self::sample_indices).
    pub fn targets(&self) -> Vec<f64> {
        std::iter::repeat_n(1.0, self.seeds.len())
            .chain(std::iter::repeat_n(0.0, self.negatives.len()))
            .collect()
    }

    pub fn seed_for(&self, class_id: usize) -> Option<usize> {
        self.classes
            .iter()
            .position(|&c| c == class_id)
            .map(|k| self.seeds[k])
    }
}

/// Per-superpixel sums of a saliency map.
pub fn superpixel_sums(grid: &SuperpixelGrid, map: &SaliencyMap) -> Vec<f64> {
    let mut sums = vec![0.0; grid.num_superpixels()];
    for (&s, &v) in grid.labels().iter().zip(map.values()) {
        sums[s as usize] += f64::from(v);
    }
    sums
}

fn mean_over<'a>(
    grid: &SuperpixelGrid,
    sums: &[f64],
    ids: impl IntoIterator<Item = &'a u32>,
) -> Option<f64> {
    let mut total = 0.0;
    let mut area = 0u64;
    for &id in ids {
        total += sums[id as usize];
        area += grid.superpixel_area(id);
    }
    (area > 0).then(|| total / area as f64)
}

/// Mean saliency over the proposal's pixels.
pub fn region_saliency(grid: &SuperpixelGrid, proposal: &Proposal, map: &SaliencyMap) -> f64 {
    let sums = superpixel_sums(grid, map);
    region_saliency_from_sums(grid, proposal, &sums)
}

fn region_saliency_from_sums(grid: &SuperpixelGrid, proposal: &Proposal, sums: &[f64]) -> f64 {
    mean_over(grid, sums, proposal.superpixels()).unwrap_or(0.0)
}

/// Superpixels adjacent to any member of the proposal, members excluded.
pub fn neighborhood(proposal: &Proposal, adjacency: &[BTreeSet<u32>]) -> BTreeSet<u32> {
    proposal
        .superpixels()
        .iter()
        .flat_map(|&s| adjacency[s as usize].iter().copied())
        .filter(|&n| !proposal.contains(n))
        .collect()
}

/// Mean saliency over the proposal's neighborhood; 0 when the neighborhood is empty.
pub fn neighborhood_saliency(
    grid: &SuperpixelGrid,
    proposal: &Proposal,
    map: &SaliencyMap,
    adjacency: &[BTreeSet<u32>],
) -> f64 {
    let sums = superpixel_sums(grid, map);
    neighborhood_saliency_from_sums(grid, proposal, &sums, adjacency)
}

fn neighborhood_saliency_from_sums(
    grid: &SuperpixelGrid,
    proposal: &Proposal,
    sums: &[f64],
    adjacency: &[BTreeSet<u32>],
) -> f64 {
    let nbhd = neighborhood(proposal, adjacency);
    match mean_over(grid, sums, &nbhd) {
        Some(ns) => ns,
        None => {
            log::debug!(
                "proposal covers every reachable superpixel; neighborhood saliency set to 0"
            );
            0.0
        }
    }
}

/// `exp(area / sigma^2) * (rs - ns)`, with the exponent capped at [`MAX_AREA_EXPONENT`].
pub fn saliency_contrast(rs: f64, ns: f64, area_px: u64, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    let mut exponent = area_px as f64 / (sigma * sigma);
    if exponent > MAX_AREA_EXPONENT {
        log::warn!("area term {exponent:.3e} exceeds {MAX_AREA_EXPONENT}; capping before exp");
        exponent = MAX_AREA_EXPONENT;
    }
    exponent.exp() * (rs - ns)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    Ok(())
}

/// Scores every proposal of `record` for one class.
pub fn score_proposals(
    record: &ImageRecord,
    map: &SaliencyMap,
    adjacency: &[BTreeSet<u32>],
    sigma: f64,
) -> Vec<SeedScore> {
    let sums = superpixel_sums(&record.grid, map);
    record
        .proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let rs = region_saliency_from_sums(&record.grid, p, &sums);
            let ns = neighborhood_saliency_from_sums(&record.grid, p, &sums, adjacency);
            SeedScore {
                proposal_index: i,
                class_id: map.class_id(),
                rs,
                ns,
                contrast: saliency_contrast(rs, ns, p.area_px(), sigma),
            }
        })
        .collect()
}

fn map_for(record: &ImageRecord, class_id: usize) -> Result<&SaliencyMap> {
    record.saliency_for(class_id).ok_or_else(|| {
        Error::invalid(
            format!("{}: saliency", record.id),
            format!("no saliency map for positive class {class_id}"),
        )
    })
}

/// Picks one seed per positive class; `negatives` is left empty.
pub fn select_seeds(record: &ImageRecord, sigma: f64) -> Result<SeedAssignment> {
    check_sigma(sigma)?;
    let adjacency = record.grid.adjacency();
    let classes = record.labels.positives();
    let mut seeds = Vec::with_capacity(classes.len());
    let mut seed_scores = Vec::with_capacity(classes.len());
    for &c in &classes {
        let scores = score_proposals(record, map_for(record, c)?, &adjacency, sigma);
        // Strict comparison keeps the lowest index on ties.
        let best = scores.iter().skip(1).fold(&scores[0], |best, s| {
            if s.contrast > best.contrast {
                s
            } else {
                best
            }
        });
        seeds.push(best.proposal_index);
        seed_scores.push(*best);
    }
    Ok(SeedAssignment {
        classes,
        seeds,
        seed_scores,
        negatives: Vec::new(),
    })
}

/// Mines one lowest-saliency negative per positive class, in ascending class order,
/// never reusing a seed or an earlier negative.
pub fn select_negatives(record: &ImageRecord, assignment: &mut SeedAssignment) -> Result<()> {
    let mut used: BTreeSet<usize> = assignment.seeds.iter().copied().collect();
    let mut negatives = Vec::with_capacity(assignment.classes.len());
    for &c in &assignment.classes {
        let sums = superpixel_sums(&record.grid, map_for(record, c)?);
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in record.proposals.iter().enumerate() {
            if used.contains(&i) {
                continue;
            }
            let rs = region_saliency_from_sums(&record.grid, p, &sums);
            if best.is_none_or(|(_, b)| rs < b) {
                best = Some((i, rs));
            }
        }
        match best {
            Some((i, _)) => {
                used.insert(i);
                negatives.push(i);
            }
            None => {
                log::warn!(
                    "{}: only {} proposals for {} positive classes; negatives truncated to {}",
                    record.id,
                    record.num_proposals(),
                    assignment.classes.len(),
                    negatives.len()
                );
                break;
            }
        }
    }
    assignment.negatives = negatives;
    Ok(())
}

/// Seeds plus negatives.
pub fn assign(record: &ImageRecord, sigma: f64) -> Result<SeedAssignment> {
    let mut a = select_seeds(record, sigma)?;
    select_negatives(record, &mut a)?;
    Ok(a)
}

/// Comparator: binarize at `theta * max`, return the enclosing box of each
/// 4-connected component in raster order of first pixel.
pub fn threshold_baseline(
    map: &SaliencyMap,
    width: u32,
    height: u32,
    theta: f64,
) -> Result<Vec<BBox>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Config(format!(
            "theta must lie in (0,1), got {theta}"
        )));
    }
    let (w, h) = (width as usize, height as usize);
    if map.values().len() != w * h {
        return Err(Error::Shape(format!(
            "map has {} values for a {width}x{height} grid",
            map.values().len()
        )));
    }
    let max = f64::from(map.max());
    if max <= 0.0 {
        return Ok(Vec::new());
    }
    let cut = theta * max;
    let on: Vec<bool> = map.values().iter().map(|&v| f64::from(v) >= cut).collect();
    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |n: usize| {
                if on[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < w {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - w);
            }
            if y + 1 < h {
                visit(idx + w);
            }
        }
        boxes.push(BBox {
            x0: x0 as u32,
            y0: y0 as u32,
            x1: x1 as u32,
            y1: y1 as u32,
        });
    }
    Ok(boxes)
}
