use std::collections::BTreeSet;

use super::layers::{
    decoder_layer, encoder_layer, init_decoder_layer, init_encoder_layer, init_linear, init_mlp, linear, mlp,
    position_encoding,
};
use super::matching::Detection;
use super::boxes::BBox;
use super::ModelConfig;
use crate::distengine::{
    aggregate_var, fourier_guidance, plain_guidance, sample, DistributionSpace, GuidanceBasis, GuidanceVars,
    SamplingStrategy,
};
use crate::error::{contract_err, Result};
use crate::numcore::{BoundParams, ParamStore, Rng, Tape, Tensor, Var};
use crate::orthoconstraint::{loss_do, LossVariant, ALPHA_PARAM};
use crate::promptspace::{build_groups, pooled_means, GroupKind, PromptOptions};
use crate::textenc::{CategorySpec, Vocab};

pub const QUERY_INS: &str = "query.ins";
pub const QUERY_INT: &str = "query.int";
pub const QUERY_GRID: &str = "query.grid";
const COMPOSE_INS: &str = "compose.ins";
const COMPOSE_INT: &str = "compose.int";

/// Raw head outputs for a batch of `B` scenes and `M` queries.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// `B x M x 4`, sigmoid `(cx, cy, w, h)`.
    pub sub_boxes: Var,
    pub obj_boxes: Var,
    /// `B x M x (n_obj + 1)`, background last.
    pub obj_logits: Var,
    /// `B x M x n_hoi`
    pub hoi_logits: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub outputs: Outputs,
    /// Unweighted orthogonality loss summed over the constrained spaces;
    /// zero when nothing is constrained.
    pub loss_do: Var,
    pub q_ins: Var,
    pub q_int: Var,
}

/// Decoder query grid for the pattern-dimension experiment: returns the
/// `(N_q * N_p) x C` queries and the `N_q x C` pattern-pooled rows.
pub fn patterndim_queries(tape: &mut Tape, grid: Var) -> Result<(Var, Var)> {
    let s = tape.shape(grid).to_vec();
    if s.len() != 3 {
        return Err(contract_err!("expected N_q x N_p x C grid, got {:?}", s));
    }
    let queries = tape.reshape(grid, &[s[0] * s[1], s[2]])?;
    let pooled = tape.mean_axis(grid, 1)?;
    let pooled = tape.reshape(pooled, &[s[0], s[2]])?;
    Ok((queries, pooled))
}

pub fn pattern_param_count(n_q: usize, n_p: usize, c: usize) -> usize {
    n_q * n_p * c
}

/// Add projected guidance to the learnable queries. Subject and object
/// guidance are concatenated per slot before projection.
pub fn compose_queries(
    tape: &mut Tape,
    p: &BoundParams,
    q_ins: Var,
    q_int: Var,
    guidance: &[GuidanceVars; 3],
) -> Result<(Var, Var)> {
    let [sub, obj, int] = guidance;
    let gs = tape.shape(sub.pooled).to_vec();
    if gs.len() != 3 || tape.shape(obj.pooled) != gs.as_slice() || tape.shape(int.pooled) != gs.as_slice() {
        return Err(contract_err!("guidance shapes differ or are not N_q x N_s x e"));
    }
    let slots = gs[0] * gs[1];
    for q in [q_ins, q_int] {
        if tape.shape(q).len() != 2 || tape.shape(q)[0] != slots {
            return Err(contract_err!("queries {:?} do not match {slots} guidance slots", tape.shape(q)));
        }
    }
    let both = tape.concat(&[sub.pooled, obj.pooled], 2)?;
    let both = tape.reshape(both, &[slots, 2 * gs[2]])?;
    let g_ins = linear(tape, p, COMPOSE_INS, both)?;
    let g_int = tape.reshape(int.pooled, &[slots, gs[2]])?;
    let g_int = linear(tape, p, COMPOSE_INT, g_int)?;
    Ok((tape.add(q_ins, g_ins)?, tape.add(q_int, g_int)?))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub spec: CategorySpec,
    pub unseen: BTreeSet<usize>,
    pub grid: usize,
    pub c_in: usize,
    prompt_names: [Vec<String>; 3],
    position: Tensor,
}

impl Model {
    /// Build the model and its freshly initialized parameters.
    pub fn init(
        config: ModelConfig,
        spec: CategorySpec,
        unseen: BTreeSet<usize>,
        grid: usize,
        c_in: usize,
        seed: u64,
    ) -> Result<(Model, ParamStore)> {
        config.validate()?;
        spec.validate()?;
        let mut store = ParamStore::new(seed);
        let mut rng = Rng::new(seed);
        let m = &config.model;
        let c = m.c;
        let mut prompt_names: [Vec<String>; 3] = Default::default();

        if config.uses_prompts() {
            let d = &config.dist;
            let options = PromptOptions {
                encoder_priors: config.components.encoder_priors,
                prompt_design: config.components.prompt_design,
            };
            let groups = build_groups(
                &spec,
                &Vocab::new(d.e),
                config.collection_size(),
                d.l,
                &unseen,
                options,
                &mut rng.fork(1),
            )?;
            groups.register(&mut store)?;
            for (slot, g) in prompt_names.iter_mut().zip(groups.iter()) {
                *slot = g.param_names();
            }
            let gamma = config.components.distribution
                && d.basis == GuidanceBasis::Gaussian
                && d.strategy == SamplingStrategy::ReparamGamma;
            let mut agg_rng = rng.fork(2);
            for g in groups.iter() {
                DistributionSpace::new(g.kind, g.n(), m.n_q, m.n_s).register(
                    &mut store,
                    gamma.then_some(d.gamma_init),
                    &mut agg_rng,
                )?;
            }
            init_linear(&mut store, &mut rng, COMPOSE_INS, 2 * d.e, c)?;
            init_linear(&mut store, &mut rng, COMPOSE_INT, d.e, c)?;
        }

        let constrained = config.uses_prompts() || m.pattern_dim.is_some();
        if constrained && config.loss.lambda_do > 0.0 && config.loss.variant == LossVariant::Dynamic {
            store.insert(ALPHA_PARAM, Tensor::scalar(config.dist.alpha_init))?;
        }

        match m.pattern_dim {
            Some(n_p) => store.insert(QUERY_GRID, rng.gaussian(&[m.n_q, n_p, c]))?,
            None => {
                store.insert(QUERY_INS, rng.gaussian(&[m.n_queries(), c]))?;
                store.insert(QUERY_INT, rng.gaussian(&[m.n_queries(), c]))?;
            }
        }

        init_linear(&mut store, &mut rng, "det.input", c_in, c)?;
        for i in 0..m.encoder_layers {
            init_encoder_layer(&mut store, &mut rng, &format!("det.enc.{i}"), c, m.ffn)?;
        }
        for i in 0..m.instance_decoder_layers {
            init_decoder_layer(&mut store, &mut rng, &format!("det.ins.{i}"), c, m.ffn)?;
        }
        init_linear(&mut store, &mut rng, "det.int_from_ins", c, c)?;
        for i in 0..m.interaction_decoder_layers {
            init_decoder_layer(&mut store, &mut rng, &format!("det.int.{i}"), c, m.ffn)?;
        }
        init_mlp(&mut store, &mut rng, "det.head.sub", &[c, c, c, 4])?;
        init_mlp(&mut store, &mut rng, "det.head.obj_box", &[c, c, c, 4])?;
        init_linear(&mut store, &mut rng, "det.head.obj_cls", c, spec.n_obj() + 1)?;
        init_linear(&mut store, &mut rng, "det.head.hoi", c, spec.n_hoi())?;

        let model = Model {
            position: position_encoding(grid, c),
            config,
            spec,
            unseen,
            grid,
            c_in,
            prompt_names,
        };
        Ok((model, store))
    }

    pub fn n_queries(&self) -> usize {
        self.config.model.n_queries()
    }

    pub fn prompt_names(&self, kind: GroupKind) -> &[String] {
        &self.prompt_names[kind as usize]
    }

    fn blocks(&self, p: &BoundParams, kind: GroupKind) -> Result<Vec<Var>> {
        self.prompt_names(kind).iter().map(|n| p.get(n)).collect()
    }

    /// Sampled guidance for the subject, object and interaction spaces.
    pub fn guidance(&self, tape: &mut Tape, p: &BoundParams, rng: &mut Rng) -> Result<[GuidanceVars; 3]> {
        let (d, n_s) = (&self.config.dist, self.config.model.n_s);
        let mut out = Vec::with_capacity(3);
        for kind in GroupKind::ALL {
            let mut noise = rng.fork(kind as u64);
            let space = DistributionSpace::new(kind, 0, 0, n_s);
            let blocks = self.blocks(p, kind)?;
            let agg = aggregate_var(tape, &blocks, p.get(&space.agg_name())?)?;
            let g = if !self.config.components.distribution {
                plain_guidance(tape, agg, n_s)?
            } else {
                match d.basis {
                    GuidanceBasis::Fourier => fourier_guidance(tape, agg, n_s)?,
                    GuidanceBasis::Naive => {
                        let zero = tape.scalar(0.0);
                        sample(tape, agg, zero, SamplingStrategy::NaiveMaxpool, n_s, &mut noise)?
                    }
                    GuidanceBasis::Gaussian => {
                        let gamma = if p.has(&space.gamma_name()) {
                            p.get(&space.gamma_name())?
                        } else {
                            tape.scalar(0.0)
                        };
                        sample(tape, agg, gamma, d.strategy, n_s, &mut noise)?
                    }
                }
            };
            out.push(g);
        }
        Ok([out[0], out[1], out[2]])
    }

    fn alpha(&self, tape: &mut Tape, p: &BoundParams) -> Result<Var> {
        if p.has(ALPHA_PARAM) {
            p.get(ALPHA_PARAM)
        } else {
            Ok(tape.scalar(self.config.dist.alpha_init))
        }
    }

    /// Orthogonality loss per constrained space: object then interaction
    /// prompts, or the pattern-pooled query rows.
    pub fn loss_do_terms(&self, tape: &mut Tape, p: &BoundParams) -> Result<Vec<Var>> {
        let constraint = self.config.loss.constraint(self.config.dist.alpha_init);
        let mut terms = Vec::new();
        if self.config.uses_prompts() {
            let alpha = self.alpha(tape, p)?;
            for kind in [GroupKind::Object, GroupKind::Interaction] {
                let blocks = self.blocks(p, kind)?;
                let rows = pooled_means(tape, &blocks)?;
                terms.push(loss_do(tape, rows, alpha, &constraint)?);
            }
        } else if self.config.model.pattern_dim.is_some() {
            let alpha = self.alpha(tape, p)?;
            let (_, rows) = patterndim_queries(tape, p.get(QUERY_GRID)?)?;
            terms.push(loss_do(tape, rows, alpha, &constraint)?);
        }
        Ok(terms)
    }

    /// Decoder queries after guidance composition.
    pub fn queries(&self, tape: &mut Tape, p: &BoundParams, rng: &mut Rng) -> Result<(Var, Var)> {
        if self.config.model.pattern_dim.is_some() {
            let (q, _) = patterndim_queries(tape, p.get(QUERY_GRID)?)?;
            return Ok((q, q));
        }
        let (qi, qt) = (p.get(QUERY_INS)?, p.get(QUERY_INT)?);
        if self.config.uses_prompts() {
            let g = self.guidance(tape, p, rng)?;
            compose_queries(tape, p, qi, qt, &g)
        } else {
            Ok((qi, qt))
        }
    }

    /// Encoder, both decoders and heads for `B x G² x C_in` features.
    pub fn decode(&self, tape: &mut Tape, p: &BoundParams, features: Var, q_ins: Var, q_int: Var) -> Result<Outputs> {
        let m = &self.config.model;
        let fs = tape.shape(features).to_vec();
        if fs.len() != 3 || fs[1] != self.grid * self.grid || fs[2] != self.c_in {
            return Err(contract_err!(
                "features {:?} do not match a {}x{} grid with {} channels",
                fs,
                self.grid,
                self.grid,
                self.c_in
            ));
        }
        let nq = tape.shape(q_ins)[0];
        if tape.shape(q_ins) != [nq, m.c] || tape.shape(q_int) != [nq, m.c] {
            return Err(contract_err!("queries must both be M x {}", m.c));
        }
        let b = fs[0];
        let x = linear(tape, p, "det.input", features)?;
        let pos = tape.constant(self.position.clone());
        let mut mem = tape.add(x, pos)?;
        for i in 0..m.encoder_layers {
            mem = encoder_layer(tape, p, &format!("det.enc.{i}"), mem, m.heads)?;
            tape.check_finite(mem, &format!("encoder layer {i}"))?;
        }
        let zeros = tape.constant(Tensor::zeros(&[b, nq, m.c]));
        let mut h_ins = tape.add(zeros, q_ins)?;
        for i in 0..m.instance_decoder_layers {
            h_ins = decoder_layer(tape, p, &format!("det.ins.{i}"), h_ins, mem, m.heads)?;
            tape.check_finite(h_ins, &format!("instance decoder layer {i}"))?;
        }
        let carried = linear(tape, p, "det.int_from_ins", h_ins)?;
        let mut h_int = tape.add(carried, q_int)?;
        for i in 0..m.interaction_decoder_layers {
            h_int = decoder_layer(tape, p, &format!("det.int.{i}"), h_int, mem, m.heads)?;
            tape.check_finite(h_int, &format!("interaction decoder layer {i}"))?;
        }
        let sub = mlp(tape, p, "det.head.sub", h_ins, 3)?;
        let obj = mlp(tape, p, "det.head.obj_box", h_ins, 3)?;
        let outputs = Outputs {
            sub_boxes: tape.sigmoid(sub),
            obj_boxes: tape.sigmoid(obj),
            obj_logits: linear(tape, p, "det.head.obj_cls", h_ins)?,
            hoi_logits: linear(tape, p, "det.head.hoi", h_int)?,
        };
        for (v, what) in [
            (outputs.sub_boxes, "subject box head"),
            (outputs.obj_boxes, "object box head"),
            (outputs.obj_logits, "object class head"),
            (outputs.hoi_logits, "interaction head"),
        ] {
            tape.check_finite(v, what)?;
        }
        Ok(outputs)
    }

    /// Full forward pass; `rng` drives guidance sampling.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, features: &Tensor, rng: &mut Rng) -> Result<Forward> {
        let (q_ins, q_int) = self.queries(tape, p, rng)?;
        let f = tape.constant(features.clone());
        let outputs = self.decode(tape, p, f, q_ins, q_int)?;
        let terms = self.loss_do_terms(tape, p)?;
        let mut loss_do = tape.scalar(0.0);
        for t in terms {
            loss_do = tape.add(loss_do, t)?;
        }
        Ok(Forward {
            outputs,
            loss_do,
            q_ins,
            q_int,
        })
    }

    /// Per-scene detections with probabilities applied.
    pub fn detections(&self, tape: &Tape, out: &Outputs) -> Vec<Vec<Detection>> {
        let sub = tape.value(out.sub_boxes);
        let obj = tape.value(out.obj_boxes);
        let cls = tape.value(out.obj_logits);
        let hoi = tape.value(out.hoi_logits);
        let (b, m) = (sub.shape()[0], sub.shape()[1]);
        let (nc, nh) = (cls.shape()[2], hoi.shape()[2]);
        (0..b)
            .map(|s| {
                (0..m)
                    .map(|q| {
                        let r = s * m + q;
                        let logits = &cls.data()[r * nc..(r + 1) * nc];
                        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                        let z: f64 = ex.iter().sum();
                        Detection {
                            sub_box: BBox::from_slice(&sub.data()[r * 4..r * 4 + 4]),
                            obj_box: BBox::from_slice(&obj.data()[r * 4..r * 4 + 4]),
                            obj_probs: ex.iter().map(|e| e / z).collect(),
                            hoi_probs: hoi.data()[r * nh..(r + 1) * nh]
                                .iter()
                                .map(|x| 1.0 / (1.0 + (-x).exp()))
                                .collect(),
                        }
                    })
                    .collect()
            })
            .collect()
    }
}
