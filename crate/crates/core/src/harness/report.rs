//! CSV rows with a fixed column set. Missing values are empty fields.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One line of `metrics.csv`, written after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_hoi: f64,
    pub loss_do: f64,
    pub obj_ce: f64,
    pub hoi_bce: f64,
    pub l1: f64,
    pub giou: f64,
    /// `|gamma|` per group, when learned.
    pub gamma_sub: Option<f64>,
    pub gamma_obj: Option<f64>,
    pub gamma_int: Option<f64>,
    pub alpha: Option<f64>,
    pub map_full: f64,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub map_unseen: Option<f64>,
    pub map_seen: Option<f64>,
}

/// One configuration of an ablation suite or pattern-dimension sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub suite: String,
    pub label: String,
    #[serde(rename = "N_q")]
    pub n_q: usize,
    #[serde(rename = "N_s")]
    pub n_s: usize,
    #[serde(rename = "N_p")]
    pub n_p: Option<usize>,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda_do: f64,
    pub query_params: usize,
    pub param_count: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub map_full: f64,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub map_unseen: Option<f64>,
    pub map_seen: Option<f64>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}
