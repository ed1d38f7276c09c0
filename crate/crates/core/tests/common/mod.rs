//! Independent oracles and fixtures shared by the integration targets.

#![allow(dead_code)]

use std::collections::BTreeSet;

use promptdist::detector::{BBox, DetectorConfig, Triplet};
use promptdist::distengine::DistConfig;
use promptdist::harness::{DataConfig, ExperimentConfig, ScoredTriplet, TrainConfig};
use promptdist::numcore::Rng;

/// Minimum total cost over every injective gt -> query map.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for q in 0..used.len() {
            if !used[q] {
                used[q] = true;
                best = best.min(cost[row][q] + go(cost, row + 1, used));
                used[q] = false;
            }
        }
        best
    }
    let m = cost.first().map_or(0, |r| r.len());
    go(cost, 0, &mut vec![false; m])
}

fn corner_iou(a: BBox, b: BBox) -> f64 {
    let ca = [a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0];
    let cb = [b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0];
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// VOC-style AP from the monotone precision envelope over
/// `[0, recall..., 1]`.
fn voc_ap(tp: &[bool], npos: usize) -> f64 {
    let (mut ctp, mut cfp) = (0.0, 0.0);
    let mut mrec = vec![0.0];
    let mut mpre = vec![0.0];
    for &t in tp {
        if t {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        mrec.push(ctp / npos as f64);
        mpre.push(ctp / (ctp + cfp));
    }
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (0..mrec.len() - 1)
        .filter(|&i| mrec[i + 1] != mrec[i])
        .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
        .sum()
}

/// Per-pair AP by the standard protocol: rank every hypothesis of the pair by
/// score, label it a true positive when its best-overlapping annotation
/// clears 0.5 on both boxes and is unused.
pub fn pr_oracle(dets: &[Vec<ScoredTriplet>], gts: &[Vec<Triplet>], n_hoi: usize) -> Vec<Option<f64>> {
    (0..n_hoi)
        .map(|pair| {
            let npos = gts.iter().flatten().filter(|g| g.hoi_pair == pair).count();
            if npos == 0 {
                return None;
            }
            let mut ranked: Vec<(f64, usize, ScoredTriplet)> = Vec::new();
            for (s, list) in dets.iter().enumerate() {
                for d in list.iter().filter(|d| d.hoi_pair == pair) {
                    ranked.push((d.score, s, *d));
                }
            }
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp = Vec::new();
            for (_, s, d) in ranked {
                let mut best = (-1.0, usize::MAX);
                for (j, g) in gts[s].iter().enumerate() {
                    if g.hoi_pair == pair {
                        let ov = corner_iou(d.sub_box, g.sub_box).min(corner_iou(d.obj_box, g.obj_box));
                        if ov > best.0 {
                            best = (ov, j);
                        }
                    }
                }
                let hit = best.0 > 0.5 && !used[s][best.1];
                if hit {
                    used[s][best.1] = true;
                }
                tp.push(hit);
            }
            Some(voc_ap(&tp, npos))
        })
        .collect()
}

fn random_box(rng: &mut Rng) -> BBox {
    let w = rng.uniform_in(0.1, 0.4);
    let h = rng.uniform_in(0.1, 0.4);
    BBox::new(rng.uniform_in(w / 2.0, 1.0 - w / 2.0), rng.uniform_in(h / 2.0, 1.0 - h / 2.0), w, h)
}

fn jitter(b: BBox, rng: &mut Rng, amount: f64) -> BBox {
    BBox::new(
        b.cx + rng.uniform_in(-amount, amount) * b.w,
        b.cy + rng.uniform_in(-amount, amount) * b.h,
        b.w * (1.0 + rng.uniform_in(-amount, amount)),
        b.h * (1.0 + rng.uniform_in(-amount, amount)),
    )
}

pub struct MapFixture {
    pub dets: Vec<Vec<ScoredTriplet>>,
    pub gts: Vec<Vec<Triplet>>,
    pub n_hoi: usize,
    pub rare: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
}

/// Up to 10 scenes whose hypotheses mix near-copies of annotations (some
/// over, some under the IoU threshold), duplicates, wrong pairs and noise.
/// Scores are distinct with probability one.
pub fn map_fixture(seed: u64) -> MapFixture {
    let mut rng = Rng::new(seed);
    let n_hoi = 2 + rng.below(4);
    let n_scenes = 1 + rng.below(10);
    let mut gts = Vec::with_capacity(n_scenes);
    let mut dets = Vec::with_capacity(n_scenes);
    for _ in 0..n_scenes {
        let n_gt = rng.below(4);
        let scene_gts: Vec<Triplet> = (0..n_gt)
            .map(|_| Triplet {
                sub_box: random_box(&mut rng),
                obj_box: random_box(&mut rng),
                obj_class: 0,
                hoi_pair: rng.below(n_hoi),
            })
            .collect();
        let mut scene_dets = Vec::new();
        for g in &scene_gts {
            for _ in 0..rng.below(3) {
                let amount = rng.uniform_in(0.0, 0.5);
                let pair = if rng.uniform() < 0.8 { g.hoi_pair } else { rng.below(n_hoi) };
                scene_dets.push(ScoredTriplet {
                    sub_box: jitter(g.sub_box, &mut rng, amount),
                    obj_box: jitter(g.obj_box, &mut rng, amount),
                    hoi_pair: pair,
                    score: rng.uniform(),
                });
            }
        }
        for _ in 0..rng.below(4) {
            scene_dets.push(ScoredTriplet {
                sub_box: random_box(&mut rng),
                obj_box: random_box(&mut rng),
                hoi_pair: rng.below(n_hoi),
                score: rng.uniform(),
            });
        }
        gts.push(scene_gts);
        dets.push(scene_dets);
    }
    if gts.iter().all(|g| g.is_empty()) {
        gts[0].push(Triplet {
            sub_box: random_box(&mut rng),
            obj_box: random_box(&mut rng),
            obj_class: 0,
            hoi_pair: 0,
        });
    }
    let rare = (0..n_hoi).filter(|_| rng.uniform() < 0.4).collect();
    let unseen = (0..n_hoi).filter(|_| rng.uniform() < 0.3).collect();
    MapFixture {
        dets,
        gts,
        n_hoi,
        rare,
        unseen,
    }
}

/// A detector and data small enough for a run in well under a second.
pub fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        model: DetectorConfig {
            c: 8,
            encoder_layers: 1,
            instance_decoder_layers: 1,
            interaction_decoder_layers: 1,
            heads: 2,
            ffn: 16,
            n_q: 4,
            n_s: 2,
            pattern_dim: None,
        },
        dist: DistConfig {
            k: 3,
            l: 8,
            e: 4,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        },
        data: DataConfig {
            n_train: 24,
            n_test: 12,
            ..Default::default()
        },
        ..Default::default()
    }
}
