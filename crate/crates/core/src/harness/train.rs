use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::data::Dataset;
use super::eval::{evaluate_map, scored_triplets, EvalResult, IOU_THRESHOLD};
use super::report::{write_csv, EpochMetrics};
use super::ExperimentConfig;
use crate::detector::{hungarian_match, set_loss, total_loss, Forward, LossTerms, Model, Triplet};
use crate::distengine::DistributionSpace;
use crate::error::{Error, Result};
use crate::numcore::optim::clip_grad_norm;
use crate::numcore::{checkpoint, AdamW, BoundParams, ParamStore, Rng, Tape, Var};
use crate::orthoconstraint::ALPHA_PARAM;
use crate::promptspace::GroupKind;
use crate::synthworld::{batch_features, Scene, WorldSpec, GRID};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.json";

const SHUFFLE_STREAM: u64 = 101;
const NOISE_STREAM: u64 = 102;

/// Loss graph of one batch.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub terms: LossTerms,
    pub forward: Forward,
    pub assignments: Vec<Vec<usize>>,
}

/// Forward pass, matching and the weighted loss for `scenes`. With `fixed`
/// the given assignments are used instead of fresh Hungarian matching.
pub fn objective(
    model: &Model,
    tape: &mut Tape,
    p: &BoundParams,
    scenes: &[&Scene],
    rng: &mut Rng,
    fixed: Option<&[Vec<usize>]>,
) -> Result<Objective> {
    let features = batch_features(scenes, model.grid, model.spec.n_obj());
    let forward = model.forward(tape, p, &features, rng)?;
    let gts: Vec<Vec<Triplet>> = scenes.iter().map(|s| s.triplets.clone()).collect();
    let assignments = match fixed {
        Some(a) => a.to_vec(),
        None => {
            let w = model.config.loss.weights();
            model
                .detections(tape, &forward.outputs)
                .iter()
                .zip(&gts)
                .map(|(d, g)| hungarian_match(d, g, &w))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let terms = set_loss(tape, &forward.outputs, &gts, &assignments, &model.config.loss)?;
    let total = total_loss(tape, terms.hoi, forward.loss_do, model.config.loss.lambda_do)?;
    Ok(Objective {
        total,
        terms,
        forward,
        assignments,
    })
}

/// mAP on `scenes` with guidance noise drawn from a stream fixed by
/// `eval_seed`, so repeated evaluation of the same parameters agrees bitwise.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore,
    scenes: &[Scene],
    rare: &BTreeSet<usize>,
    eval_seed: u64,
    batch_size: usize,
) -> Result<EvalResult> {
    let mut dets = Vec::with_capacity(scenes.len());
    for (bi, chunk) in scenes.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = Rng::substream(eval_seed, bi as u64);
        let features = batch_features(&refs, model.grid, model.spec.n_obj());
        let fwd = model.forward(&mut tape, &p, &features, &mut rng)?;
        for d in model.detections(&tape, &fwd.outputs) {
            dets.push(scored_triplets(&model.spec, &d));
        }
    }
    let gts: Vec<Vec<Triplet>> = scenes.iter().map(|s| s.triplets.clone()).collect();
    evaluate_map(&dets, &gts, model.spec.n_hoi(), rare, &model.unseen, IOU_THRESHOLD)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub metrics: Vec<EpochMetrics>,
    /// Evaluation after the last epoch.
    pub eval: EvalResult,
    pub param_count: usize,
}

fn shuffle(order: &mut [usize], rng: &mut Rng) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
}

fn scalar_param(store: &ParamStore, name: &str) -> Option<f64> {
    store.value(name).ok().map(|t| t.item())
}

struct StepLosses {
    values: [f64; 7],
}

fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamW,
    scenes: &[&Scene],
    rng: &mut Rng,
    clip_norm: f64,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let obj = objective(model, &mut tape, &p, scenes, rng, None)?;
    let t = &obj.terms;
    let values = [obj.total, t.hoi, obj.forward.loss_do, t.obj_ce, t.hoi_bce, t.l1, t.giou].map(|v| tape.value(v).item());
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("loss is {}", values[0])));
    }
    let mut grads = tape.backward(obj.total)?.into_params();
    if grads.values().any(|g| !g.all_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    clip_grad_norm(&mut grads, clip_norm);
    opt.step(store, &grads);
    Ok(StepLosses { values })
}

fn write_outputs(dir: &Path, store: &ParamStore, metrics: &[EpochMetrics]) -> Result<()> {
    write_csv(&dir.join(METRICS_FILE), metrics)?;
    checkpoint::save(store, &dir.join(CHECKPOINT_FILE))
}

/// Train on `data.train`, evaluating on `data.test` after every epoch.
/// With `out`, the config, per-epoch metrics, checkpoint and final
/// evaluation are written there. A non-finite loss stops training with a
/// numerical error after saving the last finite parameters.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let world = data.world();
    let (model, mut store) = Model::init(
        cfg.model_config(),
        world.categories.clone(),
        data.unseen().clone(),
        GRID,
        world.channels(),
        cfg.train.seed,
    )?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        cfg.save(&dir.join(CONFIG_FILE))?;
    }
    let tc = &cfg.train;
    let mut opt = AdamW::new(tc.lr, tc.weight_decay);
    let mut shuffle_rng = Rng::substream(tc.seed, SHUFFLE_STREAM);
    let mut noise = Rng::substream(tc.seed, NOISE_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = Vec::with_capacity(tc.epochs);
    let evaluate = |store: &ParamStore| evaluate_model(&model, store, &data.test, data.rare(), tc.eval_seed, tc.batch_size);
    let mut eval = None;

    for epoch in 0..tc.epochs {
        opt.lr = if epoch >= tc.lr_drop { tc.lr * 0.1 } else { tc.lr };
        shuffle(&mut order, &mut shuffle_rng);
        let mut sums = [0.0; 7];
        let mut batches = 0usize;
        for (step, idx) in order.chunks(tc.batch_size).enumerate() {
            let scenes: Vec<&Scene> = idx.iter().map(|&i| &data.train[i]).collect();
            match train_step(&model, &mut store, &mut opt, &scenes, &mut noise, tc.clip_norm) {
                Ok(l) => {
                    sums.iter_mut().zip(l.values).for_each(|(s, v)| *s += v);
                    batches += 1;
                }
                Err(Error::Numerical(msg)) => {
                    let saved: Option<PathBuf> = match out {
                        Some(dir) => {
                            write_outputs(dir, &store, &metrics)?;
                            Some(dir.join(CHECKPOINT_FILE))
                        }
                        None => None,
                    };
                    return Err(Error::Numerical(format!(
                        "epoch {epoch}, step {step}: {msg}; training aborted{}",
                        saved.map(|p| format!(", last good parameters in {}", p.display())).unwrap_or_default()
                    )));
                }
                Err(e) => return Err(e),
            }
        }
        let mean = sums.map(|s| s / batches.max(1) as f64);
        let ev = evaluate(&store)?;
        let gamma = |kind: GroupKind| {
            scalar_param(&store, &DistributionSpace::new(kind, 0, 0, 0).gamma_name()).map(f64::abs)
        };
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            lr: opt.lr,
            loss_total: mean[0],
            loss_hoi: mean[1],
            loss_do: mean[2],
            obj_ce: mean[3],
            hoi_bce: mean[4],
            l1: mean[5],
            giou: mean[6],
            gamma_sub: gamma(GroupKind::Subject),
            gamma_obj: gamma(GroupKind::Object),
            gamma_int: gamma(GroupKind::Interaction),
            alpha: scalar_param(&store, ALPHA_PARAM),
            map_full: ev.map_full,
            map_rare: ev.map_rare,
            map_nonrare: ev.map_nonrare,
            map_unseen: ev.map_unseen,
            map_seen: ev.map_seen,
        });
        if let Some(dir) = out {
            write_outputs(dir, &store, &metrics)?;
        }
        eval = Some(ev);
    }

    let eval = match eval {
        Some(e) => e,
        None => evaluate(&store)?,
    };
    if let Some(dir) = out {
        write_outputs(dir, &store, &metrics)?;
        fs::write(dir.join(EVAL_FILE), serde_json::to_string_pretty(&eval)?)?;
    }
    let param_count = store.learnable_count("");
    Ok(TrainOutcome {
        model,
        store,
        metrics,
        eval,
        param_count,
    })
}

/// Rebuild the model of a finished run from its config and checkpoint.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, Model, ParamStore)> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let world = WorldSpec::toy();
    let (model, mut store) = Model::init(
        cfg.model_config(),
        world.categories.clone(),
        cfg.data.split.unseen_pairs.clone(),
        GRID,
        world.channels(),
        cfg.train.seed,
    )?;
    checkpoint::load_into(&mut store, &dir.join(CHECKPOINT_FILE))?;
    Ok((cfg, model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        shuffle(&mut v, &mut Rng::new(3));
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
