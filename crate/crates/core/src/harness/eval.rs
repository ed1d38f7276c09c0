//! HOI-style mean average precision.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, BBox, Detection, Triplet};
use crate::error::{config_err, contract_err, Result};
use crate::textenc::CategorySpec;

pub const IOU_THRESHOLD: f64 = 0.5;

/// One scored `<subject, interaction, object>` hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub sub_box: BBox,
    pub obj_box: BBox,
    pub hoi_pair: usize,
    pub score: f64,
}

/// Every (query, pair) hypothesis of one scene, scored by the pair's
/// interaction probability times its object-class probability.
pub fn scored_triplets(spec: &CategorySpec, dets: &[Detection]) -> Vec<ScoredTriplet> {
    let mut out = Vec::with_capacity(dets.len() * spec.n_hoi());
    for d in dets {
        for (pair, &p) in d.hoi_probs.iter().enumerate() {
            out.push(ScoredTriplet {
                sub_box: d.sub_box,
                obj_box: d.obj_box,
                hoi_pair: pair,
                score: p * d.obj_probs[spec.pair_object(pair)],
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP per hoi pair; `None` for pairs without test annotations.
    pub per_pair_ap: Vec<Option<f64>>,
    pub n_gt: Vec<usize>,
    pub rare: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
    pub map_full: f64,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    /// Only reported when some pairs are held out.
    pub map_unseen: Option<f64>,
    pub map_seen: Option<f64>,
}

impl EvalResult {
    /// Pairs that entered the full mean.
    pub fn full_pairs(&self) -> BTreeSet<usize> {
        (0..self.per_pair_ap.len())
            .filter(|p| self.per_pair_ap[*p].is_some())
            .collect()
    }

    pub fn unseen_pairs(&self) -> BTreeSet<usize> {
        self.full_pairs().intersection(&self.unseen).copied().collect()
    }

    pub fn seen_pairs(&self) -> BTreeSet<usize> {
        self.full_pairs().difference(&self.unseen).copied().collect()
    }

    pub fn rare_pairs(&self) -> BTreeSet<usize> {
        self.full_pairs().intersection(&self.rare).copied().collect()
    }

    pub fn nonrare_pairs(&self) -> BTreeSet<usize> {
        self.full_pairs().difference(&self.rare).copied().collect()
    }

    /// Mean AP over `pairs`, `None` when empty.
    pub fn mean_over(&self, pairs: &BTreeSet<usize>) -> Option<f64> {
        if pairs.is_empty() {
            return None;
        }
        let sum: f64 = pairs.iter().map(|p| self.per_pair_ap[*p].unwrap_or(0.0)).sum();
        Some(sum / pairs.len() as f64)
    }
}

/// All-point interpolated AP of a ranked list of hit flags against `n_gt`
/// annotations.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let total = hits
        .iter()
        .zip(&precision)
        .filter(|(h, _)| **h)
        .fold(0.0, |acc, (_, p)| acc + p);
    total / n_gt as f64
}

/// `detections[s]` and `gts[s]` belong to test scene `s`. Hypotheses are
/// visited by descending score; each takes the annotation of its pair with
/// the largest `min(subject IoU, object IoU)` and is a hit when that overlap
/// exceeds `iou_thresh` and the annotation is not yet claimed.
pub fn evaluate_map(
    detections: &[Vec<ScoredTriplet>],
    gts: &[Vec<Triplet>],
    n_hoi: usize,
    rare: &BTreeSet<usize>,
    unseen: &BTreeSet<usize>,
    iou_thresh: f64,
) -> Result<EvalResult> {
    if detections.len() != gts.len() {
        return Err(contract_err!("{} detection lists for {} scenes", detections.len(), gts.len()));
    }
    let mut n_gt = vec![0usize; n_hoi];
    for t in gts.iter().flatten() {
        if t.hoi_pair >= n_hoi {
            return Err(contract_err!("annotation with pair {} outside 0..{n_hoi}", t.hoi_pair));
        }
        n_gt[t.hoi_pair] += 1;
    }
    if n_gt.iter().all(|&n| n == 0) {
        return Err(config_err!("the test set has no annotations"));
    }

    let mut ranked: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); n_hoi];
    for (s, dets) in detections.iter().enumerate() {
        for (i, d) in dets.iter().enumerate() {
            if d.hoi_pair >= n_hoi {
                return Err(contract_err!("detection with pair {} outside 0..{n_hoi}", d.hoi_pair));
            }
            ranked[d.hoi_pair].push((d.score, s, i));
        }
    }

    let mut per_pair_ap = vec![None; n_hoi];
    for (pair, list) in ranked.iter_mut().enumerate() {
        if n_gt[pair] == 0 {
            continue;
        }
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = list
            .iter()
            .map(|&(_, s, i)| {
                let d = &detections[s][i];
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts[s].iter().enumerate() {
                    if g.hoi_pair != pair {
                        continue;
                    }
                    let overlap = iou(d.sub_box, g.sub_box).min(iou(d.obj_box, g.obj_box));
                    if best.is_none_or(|(_, b)| overlap > b) {
                        best = Some((j, overlap));
                    }
                }
                match best {
                    Some((j, overlap)) if overlap > iou_thresh && !claimed[s][j] => {
                        claimed[s][j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_pair_ap[pair] = Some(average_precision(&hits, n_gt[pair]));
    }

    let mut result = EvalResult {
        per_pair_ap,
        n_gt,
        rare: rare.clone(),
        unseen: unseen.clone(),
        map_full: 0.0,
        map_rare: None,
        map_nonrare: None,
        map_unseen: None,
        map_seen: None,
    };
    result.map_full = result.mean_over(&result.full_pairs()).unwrap_or(0.0);
    result.map_rare = result.mean_over(&result.rare_pairs());
    result.map_nonrare = result.mean_over(&result.nonrare_pairs());
    if !unseen.is_empty() {
        result.map_unseen = result.mean_over(&result.unseen_pairs());
        result.map_seen = result.mean_over(&result.seen_pairs());
    }
    Ok(result)
}
