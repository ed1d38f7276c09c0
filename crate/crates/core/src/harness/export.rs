//! Per-category distribution statistics and pairwise similarities.

use serde::{Deserialize, Serialize};

use crate::detector::Model;
use crate::distengine::estimate;
use crate::error::{config_err, Result};
use crate::numcore::{ParamStore, Tensor};
use crate::orthoconstraint::cosine_with;
use crate::promptspace::{pooled_mean, GroupKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistStatRow {
    pub group: String,
    pub category: String,
    pub mu_norm: f64,
    pub sigma_mean: f64,
    pub sigma_max: f64,
    pub param_count: usize,
}

/// Cosine between the pooled prompt embeddings of two categories of the
/// same group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub group: String,
    pub category: String,
    pub other: String,
    pub cosine: f64,
}

fn category_name(model: &Model, kind: GroupKind, i: usize) -> String {
    match kind {
        GroupKind::Subject => format!("subject {i}"),
        GroupKind::Object => model.spec.objects[i].clone(),
        GroupKind::Interaction => model.spec.hoi_text(i),
    }
}

/// Statistics of every prompt collection in `store`. Collections of a single
/// prompt report a zero deviation.
pub fn export_dist(model: &Model, store: &ParamStore) -> Result<(Vec<DistStatRow>, Vec<CosineRow>)> {
    if !model.config.uses_prompts() {
        return Err(config_err!("this configuration has no prompt collections"));
    }
    let mut stats = Vec::new();
    let mut cosines = Vec::new();
    let eps = model.config.loss.epsilon;
    for kind in GroupKind::ALL {
        let mut pooled: Vec<(String, Tensor)> = Vec::new();
        for (i, name) in model.prompt_names(kind).iter().enumerate() {
            let block = store.value(name)?;
            let (mu, sigma) = if block.shape()[0] >= 2 {
                let d = estimate(block)?;
                (d.mu, d.sigma)
            } else {
                let mu = pooled_mean(block)?;
                let zeros = Tensor::zeros(mu.shape());
                (mu, zeros)
            };
            let category = category_name(model, kind, i);
            let s = sigma.data();
            stats.push(DistStatRow {
                group: kind.to_string(),
                category: category.clone(),
                mu_norm: mu.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
                sigma_mean: s.iter().sum::<f64>() / s.len().max(1) as f64,
                sigma_max: s.iter().cloned().fold(0.0, f64::max),
                param_count: store.get(name).map_or(0, |p| p.learnable_count()),
            });
            pooled.push((category, pooled_mean(block)?));
        }
        for (a, ta) in &pooled {
            for (b, tb) in &pooled {
                if a != b {
                    cosines.push(CosineRow {
                        group: kind.to_string(),
                        category: a.clone(),
                        other: b.clone(),
                        cosine: cosine_with(ta, tb, eps, model.config.loss.norm)?,
                    });
                }
            }
        }
    }
    Ok((stats, cosines))
}
