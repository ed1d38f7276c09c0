//! Finite-difference checks of every differentiable path of the objective.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::train::objective;
use crate::detector::{compose_queries, DetectorConfig, Model, ModelConfig};
use crate::distengine::{
    aggregate_var, estimate_var, fourier_guidance, reparameterize, sample, DistConfig, GuidanceVars, SamplingStrategy,
};
use crate::error::Result;
use crate::numcore::{gradcheck_with, BoundParams, GradcheckOptions, GradcheckReport, Rng, Tape, Tensor, Var};
use crate::orthoconstraint::{loss_do, ConstraintConfig, LossVariant};
use crate::synthworld::{generate, Part, Scene, SplitSpec, WorldSpec, GRID};

pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
    pub passed: bool,
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.uniform_in(lo, hi)).collect())
}

/// Random projection so a scalar target sees every element.
fn project(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = uniform(&mut Rng::new(seed), t.shape(x), -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    Ok(t.sum(p))
}

fn check<F>(name: &str, inputs: &[Tensor], max_probes: Option<usize>, f: F) -> Result<GradEntry>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let opts = GradcheckOptions {
        tol: TOLERANCE,
        max_probes,
        ..Default::default()
    };
    let r = gradcheck_with(f, inputs, &opts)?;
    Ok(GradEntry {
        name: name.to_string(),
        max_rel_error: r.worst(),
        probes: r.probes,
        passed: r.passed(),
    })
}

/// Small detector used for the full-objective check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
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
        ..Default::default()
    }
}

/// Per-tensor relative errors of the full-objective check.
pub fn full_objective_report(seed: u64) -> Result<Vec<(String, f64)>> {
    let (names, report) = full_objective_raw(seed)?;
    Ok(names.into_iter().zip(report.max_rel_error).collect())
}

fn full_objective(seed: u64) -> Result<GradEntry> {
    let (_, r) = full_objective_raw(seed)?;
    Ok(GradEntry {
        name: "objective (2 scenes, all parameter tensors)".into(),
        max_rel_error: r.worst(),
        probes: r.probes,
        passed: r.passed(),
    })
}

fn full_objective_raw(seed: u64) -> Result<(Vec<String>, GradcheckReport)> {
    let world = WorldSpec::toy();
    let scenes = generate(&world, 2, seed, &SplitSpec::default(), Part::Train)?;
    let refs: Vec<&Scene> = scenes.iter().collect();
    let (model, store) = Model::init(
        tiny_model_config(),
        world.categories.clone(),
        BTreeSet::new(),
        GRID,
        world.channels(),
        seed,
    )?;
    let names: Vec<String> = store.names().cloned().collect();
    // zero-initialized biases can put a ReLU input exactly on its kink, so
    // the check runs at a jittered, generic point
    let mut jitter = Rng::new(seed ^ 0x717e);
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|n| {
            let t = store.value(n)?;
            let noise = uniform(&mut jitter, t.shape(), -0.05, 0.05);
            Ok(Tensor::from_parts(
                t.shape().to_vec(),
                t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(),
            ))
        })
        .collect::<Result<_>>()?;
    let noise_seed = seed ^ 0x5eed;
    let assignments = {
        let mut tape = Tape::new();
        let vars = names.iter().cloned().zip(inputs.iter().map(|t| tape.leaf(t.clone()))).collect();
        let p = BoundParams::from_vars(vars);
        objective(&model, &mut tape, &p, &refs, &mut Rng::new(noise_seed), None)?.assignments
    };
    let opts = GradcheckOptions {
        tol: TOLERANCE,
        max_probes: Some(2),
        ..Default::default()
    };
    let r = gradcheck_with(
        |t, v| {
            let vars: BTreeMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
            let p = BoundParams::from_vars(vars);
            let obj = objective(&model, t, &p, &refs, &mut Rng::new(noise_seed), Some(&assignments))?;
            Ok(obj.total)
        },
        &inputs,
        &opts,
    )?;
    Ok((names, r))
}

/// Every check of the gradient suite, in a fixed order.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradEntry>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();

    let rows = uniform(&mut rng, &[5, 6], -2.0, 2.0);
    for variant in [LossVariant::Dynamic, LossVariant::FixedMargin, LossVariant::HardContrastive] {
        let cfg = ConstraintConfig {
            variant,
            ..Default::default()
        };
        // a fixed margin is a constant, so alpha is only an input when learned
        let entry = if variant == LossVariant::FixedMargin {
            check(&format!("loss_do {variant:?}"), &[rows.clone()], None, |t, v| {
                let alpha = t.constant(Tensor::scalar(0.5));
                loss_do(t, v[0], alpha, &cfg)
            })?
        } else {
            check(
                &format!("loss_do {variant:?}"),
                &[rows.clone(), Tensor::scalar(0.5)],
                None,
                |t, v| loss_do(t, v[0], v[1], &cfg),
            )?
        };
        out.push(entry);
    }

    let mu = uniform(&mut rng, &[2, 1, 3, 4], -2.0, 2.0);
    let sigma = uniform(&mut rng, &[2, 1, 3, 4], 0.1, 2.0);
    let noise = rng.gaussian(&[2, 3, 3, 4]);
    out.push(check(
        "reparameterize (mu, sigma, gamma; frozen noise)",
        &[mu, sigma, Tensor::scalar(0.3)],
        None,
        |t, v| {
            let n = t.constant(noise.clone());
            let s = reparameterize(t, v[0], v[1], v[2], n)?;
            project(t, s, 1)
        },
    )?);

    let agg = uniform(&mut rng, &[2, 4, 3, 4], -2.0, 2.0);
    out.push(check("estimate (mu and sigma)", &[agg.clone()], None, |t, v| {
        let (m, s) = estimate_var(t, v[0])?;
        let a = project(t, m, 2)?;
        let b = project(t, s, 3)?;
        t.add(a, b)
    })?);

    let blocks: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[4, 3, 2], -2.0, 2.0)).collect();
    let mut agg_inputs = blocks.clone();
    agg_inputs.push(uniform(&mut rng, &[2, 3], -1.0, 1.0));
    out.push(check("aggregate (blocks, weights)", &agg_inputs, None, |t, v| {
        let a = aggregate_var(t, &v[..3], v[3])?;
        project(t, a, 4)
    })?);

    let mut sample_inputs = blocks.clone();
    sample_inputs.push(uniform(&mut rng, &[2, 3], -1.0, 1.0));
    sample_inputs.push(Tensor::scalar(0.4));
    out.push(check("aggregate, estimate and sample (gamma)", &sample_inputs, None, |t, v| {
        let a = aggregate_var(t, &v[..3], v[3])?;
        let g = sample(t, a, v[4], SamplingStrategy::ReparamGamma, 3, &mut Rng::new(9))?;
        project(t, g.raw, 5)
    })?);

    let seq = uniform(&mut rng, &[2, 3, 6, 2], -2.0, 2.0);
    out.push(check("fourier guidance", &[seq], None, |t, v| {
        let g = fourier_guidance(t, v[0], 3)?;
        project(t, g.raw, 6)
    })?);

    let (slots, n_s, e, c) = (3, 2, 4, 5);
    let mut comp = vec![
        uniform(&mut rng, &[slots * n_s, c], -2.0, 2.0),
        uniform(&mut rng, &[slots * n_s, c], -2.0, 2.0),
    ];
    for _ in 0..3 {
        comp.push(uniform(&mut rng, &[slots, n_s, e], -2.0, 2.0));
    }
    comp.push(uniform(&mut rng, &[2 * e, c], -1.0, 1.0));
    comp.push(uniform(&mut rng, &[c], -1.0, 1.0));
    comp.push(uniform(&mut rng, &[e, c], -1.0, 1.0));
    comp.push(uniform(&mut rng, &[c], -1.0, 1.0));
    out.push(check("query composition", &comp, None, |t, v| {
        let mut vars = BTreeMap::new();
        for (i, name) in ["compose.ins.w", "compose.ins.b", "compose.int.w", "compose.int.b"]
            .iter()
            .enumerate()
        {
            vars.insert(name.to_string(), v[5 + i]);
        }
        let p = BoundParams::from_vars(vars);
        let g = [2, 3, 4].map(|i| GuidanceVars { raw: v[i], pooled: v[i] });
        let (qi, qt) = compose_queries(t, &p, v[0], v[1], &g)?;
        let a = project(t, qi, 7)?;
        let b = project(t, qt, 8)?;
        t.add(a, b)
    })?);

    out.push(full_objective(seed)?);
    Ok(out)
}
