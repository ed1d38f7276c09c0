//! Ablation ladders, variant grids and the pattern-dimension sweep.

use std::fmt;
use std::str::FromStr;

use super::data::Dataset;
use super::report::ReportRow;
use super::train::{train, TrainOutcome};
use super::ExperimentConfig;
use crate::detector::{pattern_param_count, Components, QUERY_GRID};
use crate::distengine::{GuidanceBasis, SamplingStrategy};
use crate::error::{config_err, Error, Result};
use crate::orthoconstraint::LossVariant;

/// `(N_q, N_p)` entries sharing `N_q * N_p = 16`.
pub const DEFAULT_SWEEP_GRID: [(usize, usize); 3] = [(16, 1), (8, 2), (4, 4)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    /// Cumulative component ladder from the plain query detector to the
    /// full model.
    Components,
    LossVariants,
    Sampling,
    Basis,
    /// K, N_s and lambda grids, three values each.
    Hyper,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 5] = [
        AblationSuite::Components,
        AblationSuite::LossVariants,
        AblationSuite::Sampling,
        AblationSuite::Basis,
        AblationSuite::Hyper,
    ];
}

impl FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblationSuite::Components),
            "loss_variants" => Ok(AblationSuite::LossVariants),
            "sampling" => Ok(AblationSuite::Sampling),
            "basis" => Ok(AblationSuite::Basis),
            "hyper" => Ok(AblationSuite::Hyper),
            other => Err(config_err!(
                "unknown suite `{other}`; expected components, loss_variants, sampling, basis or hyper"
            )),
        }
    }
}

impl fmt::Display for AblationSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationSuite::Components => "components",
            AblationSuite::LossVariants => "loss_variants",
            AblationSuite::Sampling => "sampling",
            AblationSuite::Basis => "basis",
            AblationSuite::Hyper => "hyper",
        })
    }
}

fn components_ladder(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut cfg = base.clone();
    cfg.components = Components {
        prompt_query: false,
        distribution: false,
        encoder_priors: false,
        prompt_design: false,
    };
    cfg.loss.lambda_do = 0.0;
    cfg.dist.strategy = SamplingStrategy::ReparamVae;
    cfg.dist.basis = GuidanceBasis::Gaussian;
    let mut rows = vec![("base".to_string(), cfg.clone())];
    let steps: [(&str, fn(&mut ExperimentConfig, &ExperimentConfig)); 6] = [
        ("+prompt_query", |c, _| c.components.prompt_query = true),
        ("+distribution", |c, _| c.components.distribution = true),
        ("+encoder_priors", |c, _| c.components.encoder_priors = true),
        ("+loss_do", |c, b| c.loss.lambda_do = b.loss.lambda_do),
        ("+gamma", |c, _| c.dist.strategy = SamplingStrategy::ReparamGamma),
        ("+prompt_design", |c, _| c.components.prompt_design = true),
    ];
    for (label, apply) in steps {
        apply(&mut cfg, base);
        rows.push((label.to_string(), cfg.clone()));
    }
    rows
}

/// Labelled configurations of `suite`, each derived from `base`.
pub fn ablation_configs(suite: AblationSuite, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match suite {
        AblationSuite::Components => components_ladder(base),
        AblationSuite::LossVariants => [
            ("dynamic", LossVariant::Dynamic),
            ("fixed_margin", LossVariant::FixedMargin),
            ("hard_contrastive", LossVariant::HardContrastive),
        ]
        .into_iter()
        .map(|(label, v)| (label.to_string(), with(&|c| c.loss.variant = v)))
        .collect(),
        AblationSuite::Sampling => [
            SamplingStrategy::ReparamVae,
            SamplingStrategy::ReparamGamma,
            SamplingStrategy::RepeatMu,
        ]
        .into_iter()
        .map(|s| (s.to_string(), with(&|c| c.dist.strategy = s)))
        .collect(),
        AblationSuite::Basis => [GuidanceBasis::Naive, GuidanceBasis::Gaussian, GuidanceBasis::Fourier]
            .into_iter()
            .map(|b| (b.to_string(), with(&|c| c.dist.basis = b)))
            .collect(),
        AblationSuite::Hyper => {
            let mut rows = Vec::with_capacity(9);
            for k in [2, 4, 8] {
                rows.push((format!("K={k}"), with(&|c| c.dist.k = k)));
            }
            for n_s in [2, 4, 8] {
                rows.push((format!("N_s={n_s}"), with(&|c| c.model.n_s = n_s)));
            }
            for lambda in [1e-1, 5e-2, 1e-2] {
                rows.push((format!("lambda={lambda}"), with(&|c| c.loss.lambda_do = lambda)));
            }
            rows
        }
    }
}

fn row(suite: &str, label: &str, cfg: &ExperimentConfig, out: &TrainOutcome, query_params: usize) -> ReportRow {
    let e = &out.eval;
    ReportRow {
        suite: suite.to_string(),
        label: label.to_string(),
        n_q: cfg.model.n_q,
        n_s: cfg.model.n_s,
        n_p: cfg.model.pattern_dim,
        k: cfg.model_config().collection_size(),
        lambda_do: cfg.loss.lambda_do,
        query_params,
        param_count: out.param_count,
        epochs: cfg.train.epochs,
        final_loss: out.metrics.last().map_or(f64::NAN, |m| m.loss_total),
        map_full: e.map_full,
        map_rare: e.map_rare,
        map_nonrare: e.map_nonrare,
        map_unseen: e.map_unseen,
        map_seen: e.map_seen,
    }
}

/// Train every configuration of `suite` with the same data and seeds.
/// `progress` sees each row as it completes.
pub fn run_ablation(
    suite: AblationSuite,
    base: &ExperimentConfig,
    data: &Dataset,
    mut progress: impl FnMut(&ReportRow),
) -> Result<Vec<ReportRow>> {
    let configs = ablation_configs(suite, base);
    for (label, cfg) in &configs {
        cfg.validate().map_err(|e| config_err!("{suite} row `{label}`: {e}"))?;
    }
    let mut rows = Vec::with_capacity(configs.len());
    for (label, cfg) in &configs {
        let out = train(cfg, data, None)?;
        let q = out.store.learnable_count("query.");
        let r = row(&suite.to_string(), label, cfg, &out, q);
        progress(&r);
        rows.push(r);
    }
    Ok(rows)
}

/// Pattern-grid configurations for `grid`; errors unless every entry has
/// the same query budget `N_q * N_p * C`.
pub fn sweep_configs(grid: &[(usize, usize)], base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    if grid.is_empty() {
        return Err(config_err!("empty pattern-dimension grid"));
    }
    let c = base.model.c;
    let budget = pattern_param_count(grid[0].0, grid[0].1, c);
    let mut out = Vec::with_capacity(grid.len());
    for &(n_q, n_p) in grid {
        let here = pattern_param_count(n_q, n_p, c);
        if here != budget {
            return Err(config_err!(
                "N_q={n_q}, N_p={n_p} gives {here} query parameters, the grid's first entry {budget}"
            ));
        }
        let mut cfg = base.clone();
        cfg.model.n_q = n_q;
        cfg.model.pattern_dim = Some(n_p);
        cfg.validate()?;
        out.push((format!("{n_q}x{n_p}"), cfg));
    }
    Ok(out)
}

/// Train each pattern-grid configuration and report its mAP and parameter
/// counts. Performance ordering is reported, not asserted; equal total
/// parameter counts are.
pub fn sweep_pattern_dim(
    grid: &[(usize, usize)],
    base: &ExperimentConfig,
    data: &Dataset,
    mut progress: impl FnMut(&ReportRow),
) -> Result<Vec<ReportRow>> {
    let configs = sweep_configs(grid, base)?;
    let mut rows: Vec<ReportRow> = Vec::with_capacity(configs.len());
    for (label, cfg) in &configs {
        let out = train(cfg, data, None)?;
        let q = out.store.learnable_count(QUERY_GRID);
        let r = row("pattern_dim", label, cfg, &out, q);
        if let Some(first) = rows.first() {
            if first.param_count != r.param_count || first.query_params != r.query_params {
                return Err(config_err!(
                    "{label} has {} parameters ({} in queries), {} has {} ({})",
                    r.param_count,
                    r.query_params,
                    first.label,
                    first.param_count,
                    first.query_params
                ));
            }
        }
        progress(&r);
        rows.push(r);
    }
    Ok(rows)
}
