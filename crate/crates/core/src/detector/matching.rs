//! Minimum-cost bipartite assignment of ground truth to queries.

use serde::{Deserialize, Serialize};

use super::boxes::{giou, BBox};
use crate::error::{config_err, contract_err, Result};

/// Weights shared by the matching cost and the set-prediction loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_cls: f64,
    pub w_obj: f64,
    pub w_box: f64,
    pub w_giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            w_cls: 1.0,
            w_obj: 1.0,
            w_box: 2.5,
            w_giou: 1.0,
        }
    }
}

/// One query's decoded prediction, probabilities already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub sub_box: BBox,
    pub obj_box: BBox,
    /// Softmax over object classes plus a trailing background entry.
    pub obj_probs: Vec<f64>,
    /// Independent sigmoid per hoi pair.
    pub hoi_probs: Vec<f64>,
}

/// One annotated human-object pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub sub_box: BBox,
    pub obj_box: BBox,
    pub obj_class: usize,
    pub hoi_pair: usize,
}

pub fn match_cost(det: &Detection, gt: &Triplet, w: &CostWeights) -> f64 {
    w.w_cls * (1.0 - det.hoi_probs[gt.hoi_pair])
        + w.w_obj * (1.0 - det.obj_probs[gt.obj_class])
        + w.w_box * (det.sub_box.l1(gt.sub_box) + det.obj_box.l1(gt.obj_box))
        + w.w_giou * (2.0 - giou(det.sub_box, gt.sub_box) - giou(det.obj_box, gt.obj_box))
}

/// Row-major `n_gt x n_query` costs.
pub fn cost_matrix(dets: &[Detection], gts: &[Triplet], w: &CostWeights) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| dets.iter().map(|d| match_cost(d, g, w)).collect())
        .collect()
}

/// Minimum-cost assignment of every row to a distinct column of an
/// `n x m` matrix with `n <= m`. Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(contract_err!("ragged cost matrix"));
    }
    if n > m {
        return Err(config_err!("{n} ground-truth triplets but only {m} queries"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(contract_err!("non-finite matching cost"));
    }
    // Shortest augmenting paths with row/column potentials; index 0 is a
    // sentinel column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Match ground truth to detections; entry `g` is the query of triplet `g`.
pub fn hungarian_match(dets: &[Detection], gts: &[Triplet], w: &CostWeights) -> Result<Vec<usize>> {
    if gts.len() > dets.len() {
        return Err(config_err!(
            "{} ground-truth triplets but only {} queries",
            gts.len(),
            dets.len()
        ));
    }
    hungarian(&cost_matrix(dets, gts, w))
}

pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}
