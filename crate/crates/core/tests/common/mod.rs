//! Independent reference implementations used as test oracles.
//!
//! Everything here works on raw pixels, scalars and nested loops so that it
//! shares no code path with the library beyond the data types.

#![allow(dead_code)]

use std::collections::BTreeSet;

use sgwsod::eval::Detection;
use sgwsod::model::Network;
use sgwsod::types::{BBox, ImageRecord, SuperpixelGrid};

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) as i64 - a.x0.max(b.x0) as i64).max(0);
    let iy = (a.y1.min(b.y1) as i64 - a.y0.max(b.y0) as i64).max(0);
    let inter = (ix * iy) as f64;
    let area = |r: &BBox| ((r.x1 - r.x0) as f64) * ((r.y1 - r.y0) as f64);
    inter / (area(a) + area(b) - inter)
}

/// Superpixel adjacency by comparing every pair of pixels.
pub fn adjacency_all_pairs(grid: &SuperpixelGrid) -> Vec<BTreeSet<u32>> {
    let w = grid.width() as i64;
    let labels = grid.labels();
    let mut adj = vec![BTreeSet::new(); grid.num_superpixels()];
    for p in 0..labels.len() as i64 {
        for q in 0..labels.len() as i64 {
            let (px, py, qx, qy) = (p % w, p / w, q % w, q / w);
            if (px - qx).abs() + (py - qy).abs() == 1 {
                let (a, b) = (labels[p as usize], labels[q as usize]);
                if a != b {
                    adj[a as usize].insert(b);
                }
            }
        }
    }
    adj
}

pub struct PixelScore {
    pub rs: f64,
    pub ns: f64,
    pub area: usize,
    pub contrast: f64,
}

/// Region and neighbourhood saliency straight from the pixel grid.
pub fn pixel_scores(record: &ImageRecord, map: &[f64], sigma: f64) -> Vec<PixelScore> {
    let w = record.grid.width() as usize;
    let h = record.grid.height() as usize;
    let labels = record.grid.labels();
    record
        .proposals
        .iter()
        .map(|p| {
            let inside = |k: usize| p.superpixels().contains(&labels[k]);
            let mut touched = BTreeSet::new();
            let (mut sum, mut area) = (0.0, 0usize);
            for y in 0..h {
                for x in 0..w {
                    let k = y * w + x;
                    if !inside(k) {
                        continue;
                    }
                    sum += map[k];
                    area += 1;
                    let mut look = |xx: usize, yy: usize| {
                        let j = yy * w + xx;
                        if !inside(j) {
                            touched.insert(labels[j]);
                        }
                    };
                    if x > 0 {
                        look(x - 1, y);
                    }
                    if x + 1 < w {
                        look(x + 1, y);
                    }
                    if y > 0 {
                        look(x, y - 1);
                    }
                    if y + 1 < h {
                        look(x, y + 1);
                    }
                }
            }
            let (mut nsum, mut ncount) = (0.0, 0usize);
            for k in 0..labels.len() {
                if touched.contains(&labels[k]) {
                    nsum += map[k];
                    ncount += 1;
                }
            }
            let rs = sum / area as f64;
            let ns = if ncount == 0 {
                0.0
            } else {
                nsum / ncount as f64
            };
            let exponent = (area as f64 / (sigma * sigma)).min(64.0);
            PixelScore {
                rs,
                ns,
                area,
                contrast: exponent.exp() * (rs - ns),
            }
        })
        .collect()
}

/// Seeds and negatives from pixel-level scores. `map_of(c)` yields the map
/// used for class `c`.
pub fn brute_seeds(
    record: &ImageRecord,
    sigma: f64,
    map_of: impl Fn(usize) -> Vec<f64>,
) -> (Vec<usize>, Vec<usize>) {
    let positives = record.labels.positives();
    let mut seeds = Vec::new();
    let mut all_scores = Vec::new();
    for &c in &positives {
        let scores = pixel_scores(record, &map_of(c), sigma);
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i].contrast > scores[best].contrast {
                best = i;
            }
        }
        seeds.push(best);
        all_scores.push(scores);
    }
    let mut taken: BTreeSet<usize> = seeds.iter().copied().collect();
    let mut negatives = Vec::new();
    for scores in &all_scores {
        let mut pick: Option<usize> = None;
        for i in 0..scores.len() {
            if taken.contains(&i) {
                continue;
            }
            if pick.is_none_or(|j| scores[i].rs < scores[j].rs) {
                pick = Some(i);
            }
        }
        if let Some(i) = pick {
            taken.insert(i);
            negatives.push(i);
        }
    }
    (seeds, negatives)
}

/// Reference NMS: repeatedly take the best remaining detection and drop
/// everything overlapping it, within each (image, class).
pub fn brute_nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut remaining: Vec<Detection> = dets.to_vec();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (a, b) = (&remaining[i], &remaining[best]);
            let better = a.score > b.score
                || (a.score == b.score
                    && (a.image_id.as_str(), a.class_id, a.proposal_index)
                        < (b.image_id.as_str(), b.class_id, b.proposal_index));
            if better {
                best = i;
            }
        }
        let top = remaining.remove(best);
        remaining.retain(|d| {
            d.image_id != top.image_id
                || d.class_id != top.class_id
                || box_iou(&d.bbox, &top.bbox) < threshold
        });
        kept.push(top);
    }
    kept
}

/// Continuous AP from a ranked relevance list: mean over relevant items of
/// the best precision at that rank or any later one.
pub fn brute_ap(hits: &[bool], num_relevant: usize) -> f64 {
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut total = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            total += precision[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    total / num_relevant as f64
}

/// Eleven-point AP: mean over t ∈ {0, 0.1, .., 1} of the best precision at recall ≥ t.
pub fn brute_ap11(hits: &[bool], num_relevant: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..=10 {
        let mut best = 0.0f64;
        let mut tp = 0;
        for (k, &h) in hits.iter().enumerate() {
            tp += usize::from(h);
            // recall ≥ t/10 ⇔ 10·tp ≥ t·num_relevant
            if 10 * tp >= t * num_relevant {
                best = best.max(tp as f64 / (k + 1) as f64);
            }
        }
        total += best;
    }
    total / 11.0
}

pub struct Trace {
    pub p: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
}

fn dense(w: &ndarray::Array2<f64>, b: &ndarray::Array1<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|o| b[o] + (0..w.ncols()).map(|i| w[(o, i)] * x[i]).sum::<f64>())
        .collect()
}

/// Scalar re-implementation of the network's forward pass.
pub fn forward_oracle(net: &Network, saliency_branch: bool, x: &[Vec<f64>]) -> Trace {
    let n = x.len();
    let c = net.cls.weight.nrows();
    let mut g = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for row in x {
        let mut h = row.clone();
        for layer in &net.trunk {
            h = dense(&layer.weight, &layer.bias, &h)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
        }
        let pi = if saliency_branch {
            let s: Vec<f64> = dense(&net.saliency_hidden.weight, &net.saliency_hidden.bias, &h)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let z = dense(&net.saliency_out.weight, &net.saliency_out.bias, &s)[0];
            1.0 / (1.0 + (-z).exp())
        } else {
            1.0
        };
        p.push(pi);
        g.push(h.iter().map(|v| v * pi).collect::<Vec<_>>());
    }
    let cls: Vec<Vec<f64>> = g
        .iter()
        .map(|gi| dense(&net.cls.weight, &net.cls.bias, gi))
        .collect();
    let det: Vec<Vec<f64>> = g
        .iter()
        .map(|gi| dense(&net.det.weight, &net.det.bias, gi))
        .collect();
    let mut phi = vec![vec![0.0; n]; c];
    for k in 0..c {
        let det_den: f64 = (0..n).map(|i| det[i][k].exp()).sum();
        for i in 0..n {
            let cls_den: f64 = (0..c).map(|j| cls[i][j].exp()).sum();
            phi[k][i] = cls[i][k].exp() / cls_den * det[i][k].exp() / det_den;
        }
    }
    let tau = phi.iter().map(|r| r.iter().sum::<f64>().min(1.0)).collect();
    Trace { p, phi, tau }
}
