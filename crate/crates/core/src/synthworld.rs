//! Synthetic single-person scenes whose interactions are geometric
//! predicates with several visual modes each.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{BBox, Triplet};
use crate::error::{config_err, Error, Result};
use crate::numcore::{Rng, Tensor};
use crate::textenc::CategorySpec;

pub const GRID: usize = 8;
/// Pose glyphs on the subject; the pose tells which mode the first triplet
/// was drawn from.
pub const POSES: usize = 2;
/// Ratio between consecutive pair weights under the long-tail profile.
pub const LONGTAIL_RATIO: f64 = 0.6;
const MAX_ATTEMPTS: usize = 500;
const TEST_KEY_OFFSET: u64 = 1 << 40;

/// Closed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn contains(self, v: f64) -> bool {
        v >= self.0 - 1e-12 && v <= self.1 + 1e-12
    }

    fn sample(self, rng: &mut Rng) -> f64 {
        rng.uniform_in(self.0, self.1)
    }
}

/// One visual mode of an interaction, relative to the subject box:
/// `dx`, `dy` are center offsets in units of subject width/height and
/// `scale` is object width over subject width. Objects are square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub dx: Range,
    pub dy: Range,
    pub scale: Range,
}

impl Mode {
    pub fn holds(&self, sub: BBox, obj: BBox) -> bool {
        self.dx.contains((obj.cx - sub.cx) / sub.w)
            && self.dy.contains((obj.cy - sub.cy) / sub.h)
            && self.scale.contains(obj.w / sub.w)
            && (obj.w - obj.h).abs() < 1e-12
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub categories: CategorySpec,
    /// Modes per interaction, indexed like `categories.interactions`.
    pub modes: Vec<Vec<Mode>>,
    /// Subject width and height ranges; centers are drawn from `[0.3, 0.7]`.
    pub subject_w: Range,
    pub subject_h: Range,
}

fn mode(dx: (f64, f64), dy: (f64, f64), scale: (f64, f64)) -> Mode {
    Mode {
        dx: Range(dx.0, dx.1),
        dy: Range(dy.0, dy.1),
        scale: Range(scale.0, scale.1),
    }
}

impl WorldSpec {
    /// Geometry for [`CategorySpec::toy`].
    pub fn toy() -> Self {
        WorldSpec {
            categories: CategorySpec::toy(),
            modes: vec![
                // ride: underneath, or side-on
                vec![
                    mode((-0.2, 0.2), (0.3, 0.6), (1.5, 2.2)),
                    mode((0.3, 0.6), (0.2, 0.5), (1.5, 2.2)),
                ],
                // carry: overhead, or at the hip
                vec![
                    mode((-0.2, 0.2), (-0.9, -0.6), (0.6, 1.0)),
                    mode((0.6, 0.9), (-0.2, 0.1), (0.6, 1.0)),
                ],
                // hold: right hand, or left hand
                vec![
                    mode((0.5, 0.8), (0.0, 0.2), (0.3, 0.5)),
                    mode((-0.8, -0.5), (0.0, 0.2), (0.3, 0.5)),
                ],
                // kick: right foot, or left foot
                vec![
                    mode((0.4, 0.7), (0.45, 0.65), (0.3, 0.6)),
                    mode((-0.7, -0.4), (0.45, 0.65), (0.3, 0.6)),
                ],
                // sit on: centered, or perched
                vec![
                    mode((-0.1, 0.1), (0.15, 0.35), (1.0, 1.4)),
                    mode((0.2, 0.4), (0.15, 0.35), (1.0, 1.4)),
                ],
                // look at: far right, or far left
                vec![
                    mode((1.2, 1.8), (-0.3, 0.0), (0.3, 1.0)),
                    mode((-1.8, -1.2), (-0.3, 0.0), (0.3, 1.0)),
                ],
            ],
            subject_w: Range(0.15, 0.25),
            subject_h: Range(0.3, 0.4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.categories.validate()?;
        if self.modes.len() != self.categories.interactions.len() {
            return Err(config_err!(
                "{} mode lists for {} interactions",
                self.modes.len(),
                self.categories.interactions.len()
            ));
        }
        for (i, ms) in self.modes.iter().enumerate() {
            if ms.len() < 2 {
                return Err(config_err!(
                    "interaction `{}` needs at least two modes",
                    self.categories.interactions[i]
                ));
            }
            for m in ms {
                for r in [m.dx, m.dy, m.scale, self.subject_w, self.subject_h] {
                    if !(r.0 <= r.1) || !r.0.is_finite() || !r.1.is_finite() {
                        return Err(config_err!("invalid range {:?}", r));
                    }
                }
                if m.scale.0 <= 0.0 {
                    return Err(config_err!("object scale must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Whether some mode of the pair's interaction holds.
    pub fn satisfies(&self, pair: usize, sub: BBox, obj: BBox) -> bool {
        let i = self.categories.pair_interaction(pair);
        self.modes[i].iter().any(|m| m.holds(sub, obj))
    }

    pub fn channels(&self) -> usize {
        channels(self.categories.n_obj())
    }
}

/// Feature channels for `n_obj` object classes: two occupancies, pose
/// one-hot, class one-hot, offsets and size.
pub fn channels(n_obj: usize) -> usize {
    2 + POSES + n_obj + 4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Uniform,
    Longtail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub rare_threshold: usize,
    pub unseen_pairs: BTreeSet<usize>,
    pub profile: Profile,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            rare_threshold: 10,
            unseen_pairs: BTreeSet::new(),
            profile: Profile::Longtail,
        }
    }
}

impl SplitSpec {
    /// Sampling probability of each pair in training scenes.
    pub fn train_weights(&self, n_hoi: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..n_hoi)
            .map(|p| {
                if self.unseen_pairs.contains(&p) {
                    0.0
                } else {
                    match self.profile {
                        Profile::Uniform => 1.0,
                        Profile::Longtail => LONGTAIL_RATIO.powi(p as i32),
                    }
                }
            })
            .collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= z);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    /// Drawn under the split's profile with unseen pairs excluded.
    Train,
    /// Uniform over every pair, unseen ones included.
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub bbox: BBox,
    pub pose: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub bbox: BBox,
}

/// Geometry of one scene; features are rasterized on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub subject: Subject,
    pub objects: Vec<SceneObject>,
    pub triplets: Vec<Triplet>,
}

fn place(world: &WorldSpec, pair: usize, sub: BBox, mode: usize, rng: &mut Rng) -> Option<BBox> {
    let m = world.modes[world.categories.pair_interaction(pair)][mode];
    let size = m.scale.sample(rng) * sub.w;
    let b = BBox::new(
        sub.cx + m.dx.sample(rng) * sub.w,
        sub.cy + m.dy.sample(rng) * sub.h,
        size,
        size,
    );
    b.is_normalized().then_some(b)
}

fn generate_scene(world: &WorldSpec, id: u64, weights: &[f64], rng: &mut Rng) -> Result<Scene> {
    let n_trip = 1 + rng.below(2);
    let pairs: Vec<usize> = (0..n_trip).map(|_| rng.categorical(weights)).collect();
    let modes: Vec<usize> = pairs
        .iter()
        .map(|&p| rng.below(world.modes[world.categories.pair_interaction(p)].len()))
        .collect();
    for _ in 0..MAX_ATTEMPTS {
        let sub = BBox::new(
            rng.uniform_in(0.3, 0.7),
            rng.uniform_in(0.3, 0.7),
            world.subject_w.sample(rng),
            world.subject_h.sample(rng),
        );
        if !sub.is_normalized() {
            continue;
        }
        let placed: Option<Vec<BBox>> = pairs
            .iter()
            .zip(&modes)
            .map(|(&p, &m)| place(world, p, sub, m, rng))
            .collect();
        let Some(boxes) = placed else { continue };
        let objects = pairs
            .iter()
            .zip(&boxes)
            .map(|(&p, &b)| SceneObject {
                class: world.categories.pair_object(p),
                bbox: b,
            })
            .collect();
        let triplets = pairs
            .iter()
            .zip(&boxes)
            .map(|(&p, &b)| Triplet {
                sub_box: sub,
                obj_box: b,
                obj_class: world.categories.pair_object(p),
                hoi_pair: p,
            })
            .collect();
        return Ok(Scene {
            id,
            subject: Subject {
                bbox: sub,
                pose: modes[0] % POSES,
            },
            objects,
            triplets,
        });
    }
    let names: Vec<String> = pairs.iter().map(|&p| world.categories.hoi_text(p)).collect();
    Err(Error::Generation(format!(
        "could not place `{}` inside the frame after {MAX_ATTEMPTS} attempts",
        names.join("` with `")
    )))
}

/// Deterministic scenes; scene `i` draws from its own substream of `seed`.
pub fn generate(world: &WorldSpec, n_scenes: usize, seed: u64, split: &SplitSpec, part: Part) -> Result<Vec<Scene>> {
    world.validate()?;
    let n_hoi = world.categories.n_hoi();
    if let Some(bad) = split.unseen_pairs.iter().find(|p| **p >= n_hoi) {
        return Err(config_err!("unseen pair {bad} is not a valid hoi pair"));
    }
    let weights = match part {
        Part::Train => split.train_weights(n_hoi),
        Part::Test => vec![1.0 / n_hoi as f64; n_hoi],
    };
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(config_err!("every hoi pair is held out of training"));
    }
    let key_base = match part {
        Part::Train => 0,
        Part::Test => TEST_KEY_OFFSET,
    };
    (0..n_scenes as u64)
        .map(|i| {
            let mut rng = Rng::substream(seed, key_base + i);
            generate_scene(world, key_base + i, &weights, &mut rng)
        })
        .collect()
}

fn cell_center(i: usize, grid: usize) -> f64 {
    (i as f64 + 0.5) / grid as f64
}

fn paint(data: &mut [f64], grid: usize, c_in: usize, b: BBox, channels: &[usize], offset_at: usize) {
    let [x0, y0, x1, y1] = b.corners();
    for r in 0..grid {
        let cy = cell_center(r, grid);
        if cy < y0 || cy > y1 {
            continue;
        }
        for c in 0..grid {
            let cx = cell_center(c, grid);
            if cx < x0 || cx > x1 {
                continue;
            }
            let cell = &mut data[(r * grid + c) * c_in..(r * grid + c + 1) * c_in];
            for &ch in channels {
                cell[ch] += 1.0;
            }
            cell[offset_at] += (cx - b.cx) / b.w;
            cell[offset_at + 1] += (cy - b.cy) / b.h;
            cell[offset_at + 2] += b.w;
            cell[offset_at + 3] += b.h;
        }
    }
}

/// `grid² x channels(n_obj)` features: each cell whose center lies in a box
/// gets that box's occupancy, pose or class indicator, offset of the cell
/// from the box center in box units, and box size. Overlaps add.
pub fn rasterize(scene: &Scene, grid: usize, n_obj: usize) -> Tensor {
    let c_in = channels(n_obj);
    let mut data = vec![0.0; grid * grid * c_in];
    let offset_at = 2 + POSES + n_obj;
    let has_subject = scene.subject.bbox.area() > 0.0;
    if has_subject {
        paint(&mut data, grid, c_in, scene.subject.bbox, &[0, 2 + scene.subject.pose], offset_at);
    }
    for o in &scene.objects {
        paint(&mut data, grid, c_in, o.bbox, &[1, 2 + POSES + o.class], offset_at);
    }
    Tensor::from_parts(vec![grid * grid, c_in], data)
}

/// Stacked features of several scenes: `B x grid² x channels`.
pub fn batch_features(scenes: &[&Scene], grid: usize, n_obj: usize) -> Tensor {
    let c_in = channels(n_obj);
    let mut data = Vec::with_capacity(scenes.len() * grid * grid * c_in);
    for s in scenes {
        data.extend(rasterize(s, grid, n_obj).into_data());
    }
    Tensor::from_parts(vec![scenes.len(), grid * grid, c_in], data)
}

/// Triplet count per hoi pair.
pub fn pair_counts(scenes: &[Scene], n_hoi: usize) -> Vec<usize> {
    let mut counts = vec![0; n_hoi];
    for t in scenes.iter().flat_map(|s| &s.triplets) {
        counts[t.hoi_pair] += 1;
    }
    counts
}

/// Pairs seen fewer than `threshold` times.
pub fn rare_pairs(counts: &[usize], threshold: usize) -> BTreeSet<usize> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c < threshold)
        .map(|(p, _)| p)
        .collect()
}

pub fn write_jsonl(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Scene>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Written next to the scene files by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub split: SplitSpec,
    pub train_counts: Vec<usize>,
    pub rare_pairs: BTreeSet<usize>,
    pub world: WorldSpec,
}

impl SplitManifest {
    pub fn new(world: &WorldSpec, split: &SplitSpec, seed: u64, train: &[Scene], n_test: usize) -> Self {
        let counts = pair_counts(train, world.categories.n_hoi());
        SplitManifest {
            seed,
            n_train: train.len(),
            n_test,
            split: split.clone(),
            rare_pairs: rare_pairs(&counts, split.rare_threshold),
            train_counts: counts,
            world: world.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train(n: usize, seed: u64) -> Vec<Scene> {
        generate(&WorldSpec::toy(), n, seed, &SplitSpec::default(), Part::Train).unwrap()
    }

    #[test]
    fn empty_request() {
        assert!(train(0, 1).is_empty());
    }

    #[test]
    fn same_seed_same_scenes() {
        assert_eq!(train(50, 9), train(50, 9));
        assert_ne!(train(50, 9), train(50, 10));
    }

    #[test]
    fn every_triplet_satisfies_its_predicate() {
        let w = WorldSpec::toy();
        for s in train(500, 3) {
            for t in &s.triplets {
                assert!(t.sub_box.is_normalized() && t.obj_box.is_normalized());
                assert!(w.satisfies(t.hoi_pair, t.sub_box, t.obj_box), "{:?}", t);
            }
        }
    }

    #[test]
    fn modes_of_one_interaction_are_disjoint() {
        let w = WorldSpec::toy();
        for ms in &w.modes {
            let (a, b) = (ms[0], ms[1]);
            let overlap = |x: Range, y: Range| x.0 <= y.1 && y.0 <= x.1;
            assert!(!(overlap(a.dx, b.dx) && overlap(a.dy, b.dy) && overlap(a.scale, b.scale)));
        }
    }

    #[test]
    fn unsatisfiable_mode_names_the_pair() {
        let mut w = WorldSpec::toy();
        w.modes[0][0].dx = Range(5.0, 6.0);
        w.modes[0][1].dx = Range(5.0, 6.0);
        let split = SplitSpec {
            profile: Profile::Uniform,
            ..Default::default()
        };
        match generate(&w, 200, 1, &split, Part::Train) {
            Err(Error::Generation(msg)) => assert!(msg.contains("ride a bicycle"), "{msg}"),
            other => panic!("expected a generation error, got {:?}", other.map(|v| v.len())),
        }
    }

    #[test]
    fn train_and_test_streams_differ() {
        let w = WorldSpec::toy();
        let split = SplitSpec::default();
        let a = generate(&w, 20, 4, &split, Part::Train).unwrap();
        let b = generate(&w, 20, 4, &split, Part::Test).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.subject != y.subject));
    }

    #[test]
    fn unseen_pairs_never_train() {
        let split = SplitSpec {
            unseen_pairs: [7, 10].into_iter().collect(),
            ..Default::default()
        };
        let w = WorldSpec::toy();
        let scenes = generate(&w, 2000, 5, &split, Part::Train).unwrap();
        let counts = pair_counts(&scenes, 12);
        assert_eq!((counts[7], counts[10]), (0, 0));
        let test = generate(&w, 500, 5, &split, Part::Test).unwrap();
        let tc = pair_counts(&test, 12);
        assert!(tc[7] > 0 && tc[10] > 0);
    }

    #[test]
    fn rare_set_matches_recount() {
        let scenes = train(2000, 42);
        let mut counts = vec![0usize; 12];
        for s in &scenes {
            for t in &s.triplets {
                counts[t.hoi_pair] += 1;
            }
        }
        let expected: BTreeSet<usize> = (0..12).filter(|p| counts[*p] < 10).collect();
        let rare = rare_pairs(&pair_counts(&scenes, 12), 10);
        assert!(!rare.is_empty());
        assert_eq!(rare, expected);
    }

    #[test]
    fn histogram_within_three_sigma() {
        let split = SplitSpec::default();
        let scenes = train(3000, 8);
        let counts = pair_counts(&scenes, 12);
        let total: usize = counts.iter().sum();
        for (p, w) in split.train_weights(12).iter().enumerate() {
            let mean = total as f64 * w;
            let sd = (total as f64 * w * (1.0 - w)).sqrt();
            assert!((counts[p] as f64 - mean).abs() <= 3.0 * sd + 1e-9, "pair {p}: {} vs {mean}", counts[p]);
        }
    }

    #[test]
    fn empty_scene_rasterizes_to_zero() {
        let s = Scene {
            id: 0,
            subject: Subject {
                bbox: BBox::new(0.5, 0.5, 0.0, 0.0),
                pose: 0,
            },
            objects: vec![],
            triplets: vec![],
        };
        assert!(rasterize(&s, GRID, 4).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn small_object_lights_one_cell() {
        let s = Scene {
            id: 0,
            subject: Subject {
                bbox: BBox::new(0.5, 0.5, 0.0, 0.0),
                pose: 0,
            },
            objects: vec![SceneObject {
                class: 2,
                bbox: BBox::new(cell_center(3, GRID), cell_center(5, GRID), 0.05, 0.05),
            }],
            triplets: vec![],
        };
        let f = rasterize(&s, GRID, 4);
        let c_in = channels(4);
        let lit: Vec<usize> = (0..GRID * GRID)
            .filter(|i| f.data()[i * c_in..(i + 1) * c_in].iter().any(|v| *v != 0.0))
            .collect();
        assert_eq!(lit, vec![5 * GRID + 3]);
        assert_eq!(f.data()[lit[0] * c_in + 2 + POSES + 2], 1.0);
    }

    #[test]
    fn integer_translation_shifts_features() {
        let c_in = channels(4);
        let mut rng = Rng::new(77);
        for s in train(100, 6) {
            let (kx, ky) = (rng.below(3) as i64 - 1, rng.below(3) as i64 - 1);
            let shift = |b: BBox| BBox::new(b.cx + kx as f64 / GRID as f64, b.cy + ky as f64 / GRID as f64, b.w, b.h);
            let mut moved = s.clone();
            moved.subject.bbox = shift(s.subject.bbox);
            for o in &mut moved.objects {
                o.bbox = shift(o.bbox);
            }
            let (a, b) = (rasterize(&s, GRID, 4), rasterize(&moved, GRID, 4));
            for r in 0..GRID as i64 {
                for c in 0..GRID as i64 {
                    let (r2, c2) = (r + ky, c + kx);
                    if !(0..GRID as i64).contains(&r2) || !(0..GRID as i64).contains(&c2) {
                        continue;
                    }
                    // Skip cells whose centers sit within rounding distance
                    // of a box edge.
                    let near_edge = std::iter::once(s.subject.bbox)
                        .chain(s.objects.iter().map(|o| o.bbox))
                        .any(|bb| {
                            let [x0, y0, x1, y1] = bb.corners();
                            let (cx, cy) = (cell_center(c as usize, GRID), cell_center(r as usize, GRID));
                            [cx - x0, cx - x1, cy - y0, cy - y1].iter().any(|d| d.abs() < 1e-9)
                        });
                    if near_edge {
                        continue;
                    }
                    let i = (r * GRID as i64 + c) as usize * c_in;
                    let j = (r2 * GRID as i64 + c2) as usize * c_in;
                    for ch in 0..c_in {
                        assert!((a.data()[i + ch] - b.data()[j + ch]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let scenes = train(10, 1);
        write_jsonl(&p, &scenes).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), scenes);
    }
}
