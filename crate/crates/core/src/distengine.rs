//! Gaussian category distributions over prompt collections: estimation,
//! space aggregation, and guidance sampling.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Error, Result};
use crate::numcore::{ParamStore, Rng, Tape, Tensor, Var};
use crate::promptspace::GroupKind;

/// Elementwise Gaussian over a category's K prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryDistribution {
    /// `L x e`
    pub mu: Tensor,
    /// `L x e`, population standard deviation, never negative.
    pub sigma: Tensor,
}

/// Mean and population standard deviation over the K axis of `K x L x e`.
/// Values are shifted by the first prompt so identical prompts give an
/// exact zero deviation.
pub fn estimate(block: &Tensor) -> Result<CategoryDistribution> {
    let s = block.shape();
    if s.len() != 3 {
        return Err(contract_err!("expected K x L x e, got {:?}", s));
    }
    let k = s[0];
    if k < 2 {
        return Err(config_err!("estimating a distribution needs K >= 2, got {k}"));
    }
    let inner = s[1] * s[2];
    let d = block.data();
    let pivot = &d[..inner];
    let mut shift = vec![0.0; inner];
    for kk in 0..k {
        for i in 0..inner {
            shift[i] += d[kk * inner + i] - pivot[i];
        }
    }
    shift.iter_mut().for_each(|m| *m /= k as f64);
    let mut var = vec![0.0; inner];
    for kk in 0..k {
        for i in 0..inner {
            let diff = d[kk * inner + i] - pivot[i] - shift[i];
            var[i] += diff * diff;
        }
    }
    let mu = pivot.iter().zip(&shift).map(|(p, m)| p + m).collect();
    let sigma = var.iter().map(|v| (v / k as f64).sqrt()).collect();
    Ok(CategoryDistribution {
        mu: Tensor::from_parts(vec![s[1], s[2]], mu),
        sigma: Tensor::from_parts(vec![s[1], s[2]], sigma),
    })
}

/// Linear combination along the category axis: `N x K x L x e` with
/// `N' x N` weights gives `N' x K x L x e`.
pub fn aggregate(blocks: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (bs, ws) = (blocks.shape(), weights.shape());
    if bs.len() != 4 || ws.len() != 2 || ws[1] != bs[0] {
        return Err(contract_err!(
            "aggregate needs N x K x L x e blocks and N' x N weights, got {:?} and {:?}",
            bs,
            ws
        ));
    }
    let (n, np, inner) = (bs[0], ws[0], bs[1] * bs[2] * bs[3]);
    let mut out = vec![0.0; np * inner];
    for i in 0..np {
        for j in 0..n {
            let w = weights.data()[i * n + j];
            let src = &blocks.data()[j * inner..(j + 1) * inner];
            for (o, v) in out[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    Tensor::new(&[np, bs[1], bs[2], bs[3]], out)
}

/// Differentiable [`aggregate`] over per-category `K x L x e` blocks.
pub fn aggregate_var(tape: &mut Tape, blocks: &[Var], weights: Var) -> Result<Var> {
    let first = *blocks
        .first()
        .ok_or_else(|| contract_err!("aggregate over zero categories"))?;
    let bs = tape.shape(first).to_vec();
    if bs.len() != 3 {
        return Err(contract_err!("expected K x L x e blocks, got {:?}", bs));
    }
    let ws = tape.shape(weights).to_vec();
    if ws.len() != 2 || ws[1] != blocks.len() {
        return Err(contract_err!(
            "weights {:?} do not match {} categories",
            ws,
            blocks.len()
        ));
    }
    let stacked = tape.stack(blocks)?;
    let flat = tape.reshape(stacked, &[blocks.len(), bs.iter().product()])?;
    let mixed = tape.matmul(weights, flat)?;
    tape.reshape(mixed, &[ws[0], bs[0], bs[1], bs[2]])
}

/// Differentiable estimate over axis 1 of `N' x K x L x e`; returns
/// `(mu, sigma)`, each `N' x 1 x L x e`.
pub fn estimate_var(tape: &mut Tape, aggregated: Var) -> Result<(Var, Var)> {
    let s = tape.shape(aggregated).to_vec();
    if s.len() != 4 {
        return Err(contract_err!("expected N' x K x L x e, got {:?}", s));
    }
    if s[1] < 2 {
        return Err(config_err!("estimating a distribution needs K >= 2, got {}", s[1]));
    }
    let pivot = tape.slice(aggregated, 1, 0, 1)?;
    let shifted = tape.sub(aggregated, pivot)?;
    let offset = tape.mean_axis(shifted, 1)?;
    let mu = tape.add(pivot, offset)?;
    let diff = tape.sub(shifted, offset)?;
    let sq = tape.square(diff);
    let var = tape.mean_axis(sq, 1)?;
    let sigma = tape.sqrt(var);
    Ok((mu, sigma))
}

/// `mu + |gamma| * noise * sigma`, broadcasting `mu`/`sigma` over the
/// sample axis of `noise`.
pub fn reparameterize(tape: &mut Tape, mu: Var, sigma: Var, gamma: Var, noise: Var) -> Result<Var> {
    let g = tape.abs(gamma);
    let ns = tape.mul(noise, sigma)?;
    let scaled = tape.mul(ns, g)?;
    tape.add(mu, scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    ReparamGamma,
    ReparamVae,
    RepeatMu,
    NaiveMaxpool,
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reparam_gamma" => Ok(SamplingStrategy::ReparamGamma),
            "reparam_vae" => Ok(SamplingStrategy::ReparamVae),
            "repeat_mu" => Ok(SamplingStrategy::RepeatMu),
            "naive_maxpool" => Ok(SamplingStrategy::NaiveMaxpool),
            other => Err(config_err!("unknown sampling strategy `{other}`")),
        }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingStrategy::ReparamGamma => "reparam_gamma",
            SamplingStrategy::ReparamVae => "reparam_vae",
            SamplingStrategy::RepeatMu => "repeat_mu",
            SamplingStrategy::NaiveMaxpool => "naive_maxpool",
        })
    }
}

/// Sampled guidance for one distribution space.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceVars {
    /// `N' x N_s x L x e`
    pub raw: Var,
    /// `N' x N_s x e`, token mean of `raw`.
    pub pooled: Var,
}

/// Value form of [`GuidanceVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSample {
    pub raw: Tensor,
    pub pooled: Tensor,
}

impl GuidanceVars {
    pub fn values(&self, tape: &Tape) -> GuidanceSample {
        GuidanceSample {
            raw: tape.value(self.raw).clone(),
            pooled: tape.value(self.pooled).clone(),
        }
    }
}

fn repeat_samples(tape: &mut Tape, x: Var, n_s: usize) -> Result<Var> {
    let parts = vec![x; n_s];
    tape.concat(&parts, 1)
}

fn pool_tokens(tape: &mut Tape, raw: Var) -> Result<Var> {
    let s = tape.shape(raw).to_vec();
    let m = tape.mean_axis(raw, 2)?;
    tape.reshape(m, &[s[0], s[1], s[3]])
}

/// Draw `n_s` guidance samples per aggregated category.
pub fn sample(
    tape: &mut Tape,
    aggregated: Var,
    gamma: Var,
    strategy: SamplingStrategy,
    n_s: usize,
    rng: &mut Rng,
) -> Result<GuidanceVars> {
    let s = tape.shape(aggregated).to_vec();
    if s.len() != 4 || n_s == 0 {
        return Err(contract_err!("expected N' x K x L x e and N_s >= 1, got {:?}, {n_s}", s));
    }
    let noise_shape = [s[0], n_s, s[2], s[3]];
    let raw = match strategy {
        SamplingStrategy::ReparamGamma | SamplingStrategy::ReparamVae => {
            let (mu, sigma) = estimate_var(tape, aggregated)?;
            let noise = tape.constant(rng.gaussian(&noise_shape));
            let g = if strategy == SamplingStrategy::ReparamGamma {
                gamma
            } else {
                tape.scalar(1.0)
            };
            reparameterize(tape, mu, sigma, g, noise)?
        }
        SamplingStrategy::RepeatMu => {
            let (mu, _) = estimate_var(tape, aggregated)?;
            repeat_samples(tape, mu, n_s)?
        }
        SamplingStrategy::NaiveMaxpool => {
            let mx = tape.max_axis(aggregated, 1)?;
            repeat_samples(tape, mx, n_s)?
        }
    };
    let pooled = pool_tokens(tape, raw)?;
    Ok(GuidanceVars { raw, pooled })
}

/// Guidance from a collection without distribution estimation (K = 1 or
/// estimation switched off): the K-mean of each aggregated block, repeated.
pub fn plain_guidance(tape: &mut Tape, aggregated: Var, n_s: usize) -> Result<GuidanceVars> {
    let mu = tape.mean_axis(aggregated, 1)?;
    let raw = repeat_samples(tape, mu, n_s)?;
    let pooled = pool_tokens(tape, raw)?;
    Ok(GuidanceVars { raw, pooled })
}

/// Rows of the real DFT basis used for Fourier guidance: components
/// `0..=L/2` contribute their real part, then imaginary parts of components
/// `1..` until `n_s` rows exist. Scaled by `1/L` so the DC row is the mean.
pub fn fourier_basis(len: usize, n_s: usize) -> Result<Tensor> {
    if n_s == 0 || n_s > len {
        return Err(contract_err!("Fourier guidance needs 1 <= N_s <= L, got N_s={n_s}, L={len}"));
    }
    let n_real = len / 2 + 1;
    let mut data = Vec::with_capacity(n_s * len);
    for i in 0..n_s {
        let (freq, imag) = if i < n_real { (i, false) } else { (i - n_real + 1, true) };
        for t in 0..len {
            let angle = 2.0 * PI * (freq * t) as f64 / len as f64;
            let v = if imag { -angle.sin() } else { angle.cos() };
            data.push(v / len as f64);
        }
    }
    Tensor::new(&[n_s, len], data)
}

/// Value-level Fourier components of an `L x e` sequence: `n_s x e`.
pub fn fourier_components(seq: &Tensor, n_s: usize) -> Result<Tensor> {
    let s = seq.shape();
    if s.len() != 2 {
        return Err(contract_err!("expected L x e, got {:?}", s));
    }
    let basis = fourier_basis(s[0], n_s)?;
    let mut out = vec![0.0; n_s * s[1]];
    for i in 0..n_s {
        for t in 0..s[0] {
            let b = basis.data()[i * s[0] + t];
            for c in 0..s[1] {
                out[i * s[1] + c] += b * seq.data()[t * s[1] + c];
            }
        }
    }
    Tensor::new(&[n_s, s[1]], out)
}

/// Deterministic guidance from the token-axis spectrum of the K-pooled
/// aggregated block. Each sample holds one component, constant over tokens.
pub fn fourier_guidance(tape: &mut Tape, aggregated: Var, n_s: usize) -> Result<GuidanceVars> {
    let s = tape.shape(aggregated).to_vec();
    if s.len() != 4 {
        return Err(contract_err!("expected N' x K x L x e, got {:?}", s));
    }
    let (np, l, e) = (s[0], s[2], s[3]);
    let basis = tape.constant(fourier_basis(l, n_s)?);
    let mu = tape.mean_axis(aggregated, 1)?;
    let mu = tape.reshape(mu, &[np, l, e])?;
    let by_token = tape.permute(mu, &[1, 0, 2])?;
    let by_token = tape.reshape(by_token, &[l, np * e])?;
    let comps = tape.matmul(basis, by_token)?;
    let comps = tape.reshape(comps, &[n_s, np, e])?;
    let pooled = tape.permute(comps, &[1, 0, 2])?;
    let spread = tape.reshape(pooled, &[np, n_s, 1, e])?;
    let zeros = tape.constant(Tensor::zeros(&[np, n_s, l, e]));
    let raw = tape.add(spread, zeros)?;
    Ok(GuidanceVars { raw, pooled })
}

/// Where guidance samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceBasis {
    /// Elementwise max over each collection.
    Naive,
    /// Gaussian estimation plus the configured sampling strategy.
    Gaussian,
    /// Token-axis spectrum of the pooled collection.
    Fourier,
}

impl FromStr for GuidanceBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(GuidanceBasis::Naive),
            "gaussian" => Ok(GuidanceBasis::Gaussian),
            "fourier" => Ok(GuidanceBasis::Fourier),
            other => Err(config_err!("unknown guidance basis `{other}`")),
        }
    }
}

impl fmt::Display for GuidanceBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceBasis::Naive => "naive",
            GuidanceBasis::Gaussian => "gaussian",
            GuidanceBasis::Fourier => "fourier",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistConfig {
    /// Prompts per collection.
    #[serde(rename = "K")]
    pub k: usize,
    /// Tokens per prompt.
    #[serde(rename = "L")]
    pub l: usize,
    /// Token embedding width.
    pub e: usize,
    pub gamma_init: f64,
    pub alpha_init: f64,
    pub strategy: SamplingStrategy,
    pub basis: GuidanceBasis,
}

impl Default for DistConfig {
    fn default() -> Self {
        DistConfig {
            k: 8,
            l: 16,
            e: 16,
            gamma_init: 1e-2,
            alpha_init: 0.5,
            strategy: SamplingStrategy::ReparamGamma,
            basis: GuidanceBasis::Gaussian,
        }
    }
}

impl DistConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 || self.e == 0 {
            return Err(config_err!("K, L and e must be positive"));
        }
        if !self.gamma_init.is_finite() || !self.alpha_init.is_finite() {
            return Err(config_err!("gamma_init and alpha_init must be finite"));
        }
        Ok(())
    }
}

/// Parameter names and sizes of one distribution space.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSpace {
    pub kind: GroupKind,
    /// Categories before aggregation.
    pub n: usize,
    /// Categories after aggregation.
    pub n_prime: usize,
    pub n_s: usize,
}

impl DistributionSpace {
    pub fn new(kind: GroupKind, n: usize, n_prime: usize, n_s: usize) -> Self {
        DistributionSpace { kind, n, n_prime, n_s }
    }

    pub fn agg_name(&self) -> String {
        format!("dist.{}.agg", self.kind.short())
    }

    pub fn gamma_name(&self) -> String {
        format!("dist.{}.gamma", self.kind.short())
    }

    /// Aggregation weights start near a uniform average (`1/N` with 50%
    /// jitter). Gamma is only stored when `gamma_init` is given.
    pub fn register(&self, store: &mut ParamStore, gamma_init: Option<f64>, rng: &mut Rng) -> Result<()> {
        let base = 1.0 / self.n as f64;
        let w = rng
            .gaussian(&[self.n_prime, self.n])
            .map(|z| base * (1.0 + 0.5 * z));
        store.insert(&self.agg_name(), w)?;
        if let Some(g) = gamma_init {
            store.insert(&self.gamma_name(), Tensor::scalar(g))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_collection() {
        let mut d = vec![0.0; 6];
        d.extend(vec![2.0; 6]);
        let e = estimate(&Tensor::new(&[2, 3, 2], d).unwrap()).unwrap();
        assert!(e.mu.data().iter().all(|v| *v == 1.0));
        assert!(e.sigma.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn constant_collection_has_zero_sigma() {
        let e = estimate(&Tensor::full(&[8, 4, 3], -0.7)).unwrap();
        assert!(e.sigma.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_prompt_cannot_be_estimated() {
        assert!(matches!(estimate(&Tensor::zeros(&[1, 2, 2])), Err(Error::Config(_))));
    }

    #[test]
    fn identity_aggregation_is_exact() {
        let b = Rng::new(1).gaussian(&[3, 2, 4, 2]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(aggregate(&b, &eye).unwrap(), b);
    }

    #[test]
    fn uniform_weights_give_categorywise_mean() {
        let b = Rng::new(2).gaussian(&[4, 2, 3, 2]);
        let w = Tensor::full(&[1, 4], 0.25);
        let a = aggregate(&b, &w).unwrap();
        for i in 0..12 {
            let m: f64 = (0..4).map(|n| b.data()[n * 12 + i]).sum::<f64>() / 4.0;
            assert!((a.data()[i] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_shape_mismatch() {
        let b = Tensor::zeros(&[3, 2, 2, 2]);
        assert!(matches!(aggregate(&b, &Tensor::zeros(&[2, 4])), Err(Error::Contract(_))));
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("repeat_mu".parse::<SamplingStrategy>().unwrap(), SamplingStrategy::RepeatMu);
        assert!(matches!("gibbs".parse::<SamplingStrategy>(), Err(Error::Config(_))));
    }

    #[test]
    fn reparam_arithmetic() {
        let mut t = Tape::new();
        let mu = t.constant(Tensor::scalar(1.0));
        let sigma = t.constant(Tensor::scalar(0.5));
        let gamma = t.constant(Tensor::scalar(0.01));
        let n = t.constant(Tensor::scalar(2.0));
        let s = reparameterize(&mut t, mu, sigma, gamma, n).unwrap();
        assert!((t.value(s).item() - 1.01).abs() < 1e-15);
    }

    #[test]
    fn gamma_sign_is_irrelevant() {
        let run = |g: f64| {
            let mut t = Tape::new();
            let mu = t.constant(Tensor::scalar(1.0));
            let sigma = t.constant(Tensor::scalar(0.5));
            let gamma = t.constant(Tensor::scalar(g));
            let n = t.constant(Tensor::scalar(2.0));
            let s = reparameterize(&mut t, mu, sigma, gamma, n).unwrap();
            t.value(s).item()
        };
        assert_eq!(run(0.3), run(-0.3));
    }

    #[test]
    fn zero_gamma_repeats_mu() {
        let block = Rng::new(9).gaussian(&[3, 4, 5, 2]);
        let draw = |strategy, gamma: f64| {
            let mut t = Tape::new();
            let b = t.constant(block.clone());
            let g = t.constant(Tensor::scalar(gamma));
            let gv = sample(&mut t, b, g, strategy, 3, &mut Rng::new(1)).unwrap();
            gv.values(&t)
        };
        let a = draw(SamplingStrategy::ReparamGamma, 0.0);
        let b = draw(SamplingStrategy::RepeatMu, 0.3);
        assert!(a.raw.data().iter().zip(b.raw.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.raw.shape(), &[3, 3, 5, 2]);
        assert_eq!(a.pooled.shape(), &[3, 3, 2]);
    }

    #[test]
    fn naive_maxpool_takes_elementwise_max() {
        let block = Rng::new(4).gaussian(&[2, 3, 2, 2]);
        let mut t = Tape::new();
        let b = t.constant(block.clone());
        let g = t.scalar(0.0);
        let gv = sample(&mut t, b, g, SamplingStrategy::NaiveMaxpool, 2, &mut Rng::new(0)).unwrap();
        let raw = t.value(gv.raw);
        for n in 0..2 {
            for i in 0..4 {
                let m = (0..3)
                    .map(|k| block.data()[(n * 3 + k) * 4 + i])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(raw.data()[(n * 2) * 4 + i], m);
                assert_eq!(raw.data()[(n * 2 + 1) * 4 + i], m);
            }
        }
    }

    #[test]
    fn fourier_constant_sequence_is_pure_dc() {
        let seq = Tensor::full(&[8, 3], 1.5);
        let c = fourier_components(&seq, 8).unwrap();
        assert!(c.data()[..3].iter().all(|v| (v - 1.5).abs() < 1e-12));
        assert!(c.data()[3..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn fourier_cosine_lands_in_component_one() {
        let l = 8;
        let data: Vec<f64> = (0..l).map(|t| (2.0 * PI * t as f64 / l as f64).cos()).collect();
        let c = fourier_components(&Tensor::new(&[l, 1], data).unwrap(), 5).unwrap();
        let energy: Vec<f64> = c.data().iter().map(|v| v * v).collect();
        assert!((c.data()[1] - 0.5).abs() < 1e-12);
        for (i, e) in energy.iter().enumerate() {
            if i != 1 {
                assert!(*e < 1e-24, "component {i} has energy {e}");
            }
        }
    }

    #[test]
    fn fourier_requires_ns_at_most_l() {
        assert!(fourier_basis(4, 5).is_err());
        assert!(fourier_basis(4, 4).is_ok());
    }
}
