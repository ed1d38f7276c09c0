//! Query-based HOI detector: encoder, instance and interaction decoders,
//! prediction heads, prompt-guided query composition and the set loss.

pub mod boxes;
pub mod layers;
pub mod loss;
pub mod matching;
pub mod model;

use serde::{Deserialize, Serialize};

use crate::distengine::DistConfig;
use crate::error::{config_err, Result};
use crate::orthoconstraint::{ConstraintConfig, LossVariant, NormKind};

pub use boxes::{giou, iou, BBox};
pub use loss::{set_loss, total_loss, LossTerms};
pub use matching::{assignment_cost, cost_matrix, hungarian, hungarian_match, CostWeights, Detection, Triplet};
pub use model::{
    compose_queries, pattern_param_count, patterndim_queries, Forward, Model, Outputs, QUERY_GRID, QUERY_INS, QUERY_INT,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(rename = "C")]
    pub c: usize,
    pub encoder_layers: usize,
    pub instance_decoder_layers: usize,
    pub interaction_decoder_layers: usize,
    pub heads: usize,
    /// Feed-forward width inside each transformer layer.
    pub ffn: usize,
    #[serde(rename = "N_q")]
    pub n_q: usize,
    #[serde(rename = "N_s")]
    pub n_s: usize,
    /// When set, queries come from a learnable `N_q x N_p x C` grid with
    /// the orthogonality loss on its pattern-pooled rows, and prompt guidance
    /// is not used.
    #[serde(rename = "N_p")]
    pub pattern_dim: Option<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            c: 32,
            encoder_layers: 2,
            instance_decoder_layers: 2,
            interaction_decoder_layers: 2,
            heads: 4,
            ffn: 64,
            n_q: 16,
            n_s: 2,
            pattern_dim: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.heads == 0 || self.c % self.heads != 0 {
            return Err(config_err!("C={} must be a positive multiple of heads={}", self.c, self.heads));
        }
        if self.n_q == 0 || self.n_s == 0 || self.ffn == 0 || self.pattern_dim == Some(0) {
            return Err(config_err!("N_q, N_s, N_p and ffn must be positive"));
        }
        Ok(())
    }

    /// Decoder slots: `N_q * N_p` in pattern-grid mode, else `N_q * N_s`.
    pub fn n_queries(&self) -> usize {
        self.n_q * self.pattern_dim.unwrap_or(self.n_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_do: f64,
    pub w_cls: f64,
    pub w_obj: f64,
    pub w_box: f64,
    pub w_giou: f64,
    /// Weight of the background class in the object cross-entropy.
    pub eos_coef: f64,
    pub variant: LossVariant,
    pub epsilon: f64,
    pub norm: NormKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = CostWeights::default();
        LossConfig {
            lambda_do: 5e-2,
            w_cls: w.w_cls,
            w_obj: w.w_obj,
            w_box: w.w_box,
            w_giou: w.w_giou,
            eos_coef: 0.1,
            variant: LossVariant::Dynamic,
            epsilon: 1e-8,
            norm: NormKind::L2,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> CostWeights {
        CostWeights {
            w_cls: self.w_cls,
            w_obj: self.w_obj,
            w_box: self.w_box,
            w_giou: self.w_giou,
        }
    }

    pub fn constraint(&self, alpha_init: f64) -> ConstraintConfig {
        ConstraintConfig {
            alpha_init,
            epsilon: self.epsilon,
            variant: self.variant,
            lambda_do: self.lambda_do,
            norm: self.norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.constraint(0.5).validate()?;
        let w = [self.w_cls, self.w_obj, self.w_box, self.w_giou, self.eos_coef];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(config_err!("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Switches for the component ladder; all on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    /// Add prompt-derived guidance to the decoder queries.
    pub prompt_query: bool,
    /// Expand prompts to K-prompt collections and sample guidance from
    /// their distributions. Off means one prompt per category.
    pub distribution: bool,
    /// Initialize prompts from category-name embeddings.
    pub encoder_priors: bool,
    /// Group-specific prompt structures.
    pub prompt_design: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            prompt_query: true,
            distribution: true,
            encoder_priors: true,
            prompt_design: true,
        }
    }
}

/// Everything that determines the model's parameters and forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub model: DetectorConfig,
    pub dist: DistConfig,
    pub loss: LossConfig,
    pub components: Components,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dist.validate()?;
        self.loss.validate()?;
        if self.components.distribution && self.uses_prompts() && self.dist.k < 2 {
            return Err(config_err!("distribution guidance needs K >= 2, got {}", self.dist.k));
        }
        if self.uses_prompts() && self.dist.basis == crate::distengine::GuidanceBasis::Fourier && self.model.n_s > self.dist.l {
            return Err(config_err!("Fourier guidance needs N_s <= L"));
        }
        Ok(())
    }

    pub fn uses_prompts(&self) -> bool {
        self.components.prompt_query && self.model.pattern_dim.is_none()
    }

    /// Prompts per collection actually built.
    pub fn collection_size(&self) -> usize {
        if self.components.distribution {
            self.dist.k
        } else {
            1
        }
    }
}
