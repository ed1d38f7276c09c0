//! Pairwise orthogonality loss over a distribution space with a
//! similarity-dependent margin.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Error, Result};
use crate::numcore::{Tape, Tensor, Var};

pub const ALPHA_PARAM: &str = "constraint.alpha";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Margin `alpha * (1 - cos)` with learnable alpha.
    Dynamic,
    /// Margin fixed at the configured alpha.
    FixedMargin,
    /// Squared cosine, no margin.
    HardContrastive,
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(LossVariant::Dynamic),
            "fixed_margin" => Ok(LossVariant::FixedMargin),
            "hard_contrastive" => Ok(LossVariant::HardContrastive),
            other => Err(config_err!("unknown loss variant `{other}`")),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::Dynamic => "dynamic",
            LossVariant::FixedMargin => "fixed_margin",
            LossVariant::HardContrastive => "hard_contrastive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub alpha_init: f64,
    pub epsilon: f64,
    pub variant: LossVariant,
    pub lambda_do: f64,
    pub norm: NormKind,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            alpha_init: 0.5,
            epsilon: 1e-8,
            variant: LossVariant::Dynamic,
            lambda_do: 5e-2,
            norm: NormKind::L2,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(config_err!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.lambda_do >= 0.0) {
            return Err(config_err!("lambda_do must be non-negative, got {}", self.lambda_do));
        }
        Ok(())
    }
}

fn vector_norm(x: &[f64], norm: NormKind) -> f64 {
    match norm {
        NormKind::L2 => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        NormKind::L1 => x.iter().map(|v| v.abs()).sum(),
    }
}

/// `|<a, b>| / (|a| |b| + epsilon)` over flattened inputs.
pub fn cosine(a: &Tensor, b: &Tensor, epsilon: f64) -> Result<f64> {
    cosine_with(a, b, epsilon, NormKind::L2)
}

pub fn cosine_with(a: &Tensor, b: &Tensor, epsilon: f64, norm: NormKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract_err!("cosine of tensors with {} and {} elements", a.len(), b.len()));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(dot.abs() / (vector_norm(a.data(), norm) * vector_norm(b.data(), norm) + epsilon))
}

pub fn dynamic_margin(cos: f64, alpha: f64) -> f64 {
    alpha * (1.0 - cos)
}

/// One pair's contribution, value form.
pub fn pair_term(cos: f64, alpha: f64, epsilon: f64, variant: LossVariant) -> f64 {
    match variant {
        LossVariant::Dynamic | LossVariant::FixedMargin => {
            let margin = if variant == LossVariant::Dynamic {
                dynamic_margin(cos, alpha)
            } else {
                alpha
            };
            (margin - cos).max(epsilon).powi(2)
        }
        LossVariant::HardContrastive => cos.max(0.0).powi(2),
    }
}

/// Value form of [`loss_do`] over rows of an `N x D` matrix.
pub fn loss_do_value(rows: &Tensor, alpha: f64, config: &ConstraintConfig) -> Result<f64> {
    let s = rows.shape();
    if s.len() != 2 {
        return Err(contract_err!("expected N x D pooled rows, got {:?}", s));
    }
    let (n, d) = (s[0], s[1]);
    let row = |i: usize| Tensor::from_vec(rows.data()[i * d..(i + 1) * d].to_vec());
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine_with(&row(i), &row(j), config.epsilon, config.norm)?;
            total += pair_term(c, alpha, config.epsilon, config.variant);
        }
    }
    Ok(total)
}

/// Pairwise cosine matrix of the rows of `N x D`, differentiable.
pub fn cosine_matrix(tape: &mut Tape, rows: Var, epsilon: f64, norm: NormKind) -> Result<Var> {
    let s = tape.shape(rows).to_vec();
    if s.len() != 2 {
        return Err(contract_err!("expected N x D pooled rows, got {:?}", s));
    }
    let t = tape.transpose(rows)?;
    let gram = tape.matmul(rows, t)?;
    let gram = tape.abs(gram);
    let norms = match norm {
        NormKind::L2 => {
            let sq = tape.square(rows);
            let ss = tape.sum_axis(sq, 1)?;
            tape.sqrt(ss)
        }
        NormKind::L1 => {
            let a = tape.abs(rows);
            tape.sum_axis(a, 1)?
        }
    };
    let nt = tape.transpose(norms)?;
    let outer = tape.matmul(norms, nt)?;
    let denom = tape.add_scalar(outer, epsilon);
    tape.div(gram, denom)
}

/// Sum of pair terms over `i < j` rows of `N x D`; exact zero for `N < 2`.
/// `alpha` is a scalar var; it is read but not differentiated for
/// [`LossVariant::FixedMargin`].
pub fn loss_do(tape: &mut Tape, rows: Var, alpha: Var, config: &ConstraintConfig) -> Result<Var> {
    let s = tape.shape(rows).to_vec();
    if s.len() != 2 {
        return Err(contract_err!("expected N x D pooled rows, got {:?}", s));
    }
    let n = s[0];
    if n < 2 {
        return Ok(tape.scalar(0.0));
    }
    let cos = cosine_matrix(tape, rows, config.epsilon, config.norm)?;
    let mut mask = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            mask.data_mut()[i * n + j] = 1.0;
        }
    }
    let mask = tape.constant(mask);
    let terms = match config.variant {
        LossVariant::Dynamic => {
            let one_minus = {
                let neg = tape.neg(cos);
                tape.add_scalar(neg, 1.0)
            };
            let margin = tape.mul(one_minus, alpha)?;
            let gap = tape.sub(margin, cos)?;
            let hinge = tape.clamp_min(gap, config.epsilon);
            tape.square(hinge)
        }
        LossVariant::FixedMargin => {
            let a = tape.value(alpha).item();
            let neg = tape.neg(cos);
            let gap = tape.add_scalar(neg, a);
            let hinge = tape.clamp_min(gap, config.epsilon);
            tape.square(hinge)
        }
        LossVariant::HardContrastive => {
            let hinge = tape.clamp_min(cos, 0.0);
            tape.square(hinge)
        }
    };
    let masked = tape.mul(terms, mask)?;
    Ok(tape.sum(masked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn rows(data: Vec<f64>, n: usize) -> Tensor {
        let d = data.len() / n;
        Tensor::new(&[n, d], data).unwrap()
    }

    fn loss(r: &Tensor, variant: LossVariant) -> f64 {
        let cfg = ConstraintConfig {
            variant,
            ..Default::default()
        };
        let mut t = Tape::new();
        let x = t.constant(r.clone());
        let a = t.scalar(0.5);
        let l = loss_do(&mut t, x, a, &cfg).unwrap();
        t.value(l).item()
    }

    #[test]
    fn cosine_examples() {
        let e = Tensor::from_vec(vec![1.0, 0.0]);
        let f = Tensor::from_vec(vec![0.0, 1.0]);
        let g = Tensor::from_vec(vec![1.0, 1.0]);
        assert!(cosine(&e, &f, 1e-8).unwrap() < 1e-12);
        assert!((cosine(&g, &g, 1e-8).unwrap() - 1.0).abs() < 1e-7);
        assert!((cosine(&e, &g, 1e-8).unwrap() - 0.5f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(dynamic_margin(1.0, 0.5), 0.0);
        assert_eq!(dynamic_margin(0.0, 0.5), 0.5);
        assert_eq!(dynamic_margin(0.5, 0.5), 0.25);
    }

    #[test]
    fn closed_form_fixtures() {
        let orth = rows(vec![1.0, 0.0, 0.0, 1.0], 2);
        assert!((loss(&orth, LossVariant::Dynamic) - 0.25).abs() < 1e-10);
        let same = rows(vec![0.3, -0.2, 0.3, -0.2], 2);
        assert!((loss(&same, LossVariant::Dynamic) - 1e-16).abs() < 1e-10);
        let three = rows(vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0], 3);
        assert!((loss(&three, LossVariant::Dynamic) - 0.75).abs() < 1e-10);
        assert!((loss(&three, LossVariant::FixedMargin) - 0.75).abs() < 1e-10);
        assert!(loss(&three, LossVariant::HardContrastive).abs() < 1e-10);
        assert!((loss(&same, LossVariant::HardContrastive) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_category_is_exact_zero() {
        let r = rows(vec![1.0, 2.0], 1);
        assert_eq!(loss(&r, LossVariant::Dynamic), 0.0);
    }

    #[test]
    fn vectorized_matches_pairwise_loop() {
        let r = Rng::new(5).gaussian(&[5, 6]);
        for variant in [LossVariant::Dynamic, LossVariant::FixedMargin, LossVariant::HardContrastive] {
            for norm in [NormKind::L2, NormKind::L1] {
                let cfg = ConstraintConfig {
                    variant,
                    norm,
                    ..Default::default()
                };
                let mut t = Tape::new();
                let x = t.constant(r.clone());
                let a = t.scalar(0.7);
                let l = loss_do(&mut t, x, a, &cfg).unwrap();
                let oracle = loss_do_value(&r, 0.7, &cfg).unwrap();
                assert!((t.value(l).item() - oracle).abs() < 1e-12, "{variant} {norm:?}");
            }
        }
    }

    #[test]
    fn fixed_margin_ignores_alpha_gradient() {
        let cfg = ConstraintConfig {
            variant: LossVariant::FixedMargin,
            ..Default::default()
        };
        let mut t = Tape::new();
        let x = t.leaf(Rng::new(3).gaussian(&[3, 4]));
        let a = t.param(ALPHA_PARAM, Tensor::scalar(0.5), None);
        let l = loss_do(&mut t, x, a, &cfg).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.param(ALPHA_PARAM).unwrap().item(), 0.0);
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = ConstraintConfig::default();
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        c.epsilon = 1e-8;
        c.lambda_do = -1.0;
        assert!(c.validate().is_err());
        assert!("soft".parse::<LossVariant>().is_err());
    }
}
