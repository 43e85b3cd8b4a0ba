//! Regression distribution alignment.
//!
//! The sorted labeled labels are stretched by linear interpolation to the
//! number of unlabeled samples; each pseudo-label is then replaced by the
//! interpolated value of the same rank. A [`PseudoLabelTable`] keeps the
//! latest raw prediction per unlabeled sample and re-aligns them only every
//! `T` iterations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{regression_loss, LossGrad, RegressionKind};

/// Sorted labeled-label values resized to the unlabeled-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDistribution {
    sorted_values: Vec<f64>,
}

impl LabeledDistribution {
    pub fn values(&self) -> &[f64] {
        &self.sorted_values
    }

    pub fn len(&self) -> usize {
        self.sorted_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_values.is_empty()
    }
}

/// Endpoint-anchored linear interpolation of the sorted labels at positions
/// `t·(k−1)/(m−1)`, `t = 0..m`. For `m = 1` the lower median is used.
pub fn interpolate_labeled_distribution(labeled_labels: &[f64], m: usize) -> Result<LabeledDistribution> {
    let k = labeled_labels.len();
    if k < 2 {
        return Err(Error::InsufficientLabels { needed: 2, got: k });
    }
    if m == 0 {
        return Err(Error::config("m", "distribution size must be at least 1"));
    }
    if labeled_labels.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("labeled label".into()));
    }
    let mut v = labeled_labels.to_vec();
    v.sort_by(f64::total_cmp);
    if m == 1 {
        return Ok(LabeledDistribution {
            sorted_values: vec![v[(k - 1) / 2]],
        });
    }
    let sorted_values = (0..m)
        .map(|t| {
            let pos = (t * (k - 1)) as f64 / (m - 1) as f64;
            let lo = (pos.floor() as usize).min(k - 1);
            if lo == k - 1 {
                return v[k - 1];
            }
            let frac = pos - lo as f64;
            let (a, b) = (v[lo], v[lo + 1]);
            (a + frac * (b - a)).clamp(a, b)
        })
        .collect();
    Ok(LabeledDistribution { sorted_values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortDirection {
    Ascending,
    Descending,
}

/// Indices of `values` in ascending order, ties by index.
fn ascending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

/// The pseudo-label of rank `t` receives `dist[t]`.
pub fn align(pseudo_labels: &[f64], dist: &LabeledDistribution) -> Result<Vec<f64>> {
    align_with(pseudo_labels, dist, SortDirection::Ascending)
}

/// [`align`] with both sequences sorted in the given direction. Descending
/// order is the exact reverse of ascending order (ties by decreasing index),
/// so both directions assign the same values.
pub fn align_with(pseudo_labels: &[f64], dist: &LabeledDistribution, dir: SortDirection) -> Result<Vec<f64>> {
    let m = pseudo_labels.len();
    if dist.len() != m {
        return Err(Error::Shape(format!(
            "{m} pseudo-labels vs distribution of {}",
            dist.len()
        )));
    }
    let mut order = ascending_order(pseudo_labels);
    let mut targets = dist.sorted_values.clone();
    if dir == SortDirection::Descending {
        order.reverse();
        targets.reverse();
    }
    let mut aligned = vec![0.0; m];
    for (idx, value) in order.into_iter().zip(targets) {
        aligned[idx] = value;
    }
    Ok(aligned)
}

/// Alignment schedule and weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RdaConfig {
    /// Re-align every `refresh_period` iterations (`T`).
    pub refresh_period: u64,
    pub omega_rda: f64,
    /// Warm-up length as a fraction of total training iterations.
    pub warmup: f64,
}

impl Default for RdaConfig {
    fn default() -> Self {
        Self {
            refresh_period: 1024,
            omega_rda: 1.0,
            warmup: 0.4,
        }
    }
}

impl RdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refresh_period == 0 {
            return Err(Error::config("rda.refresh_period", "must be at least 1"));
        }
        if !(self.omega_rda >= 0.0 && self.omega_rda.is_finite()) {
            return Err(Error::config("rda.omega_rda", "must be finite and >= 0"));
        }
        if !(self.warmup >= 0.0 && self.warmup.is_finite()) {
            return Err(Error::config("rda.warmup", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Warm-up length in iterations, at least one.
    pub fn alpha_warm(&self, total_iters: u64) -> u64 {
        warmup_iters(self.warmup, total_iters)
    }
}

/// `max(1, round(fraction · total_iters))`.
pub fn warmup_iters(fraction: f64, total_iters: u64) -> u64 {
    ((fraction * total_iters as f64).round() as u64).max(1)
}

/// Raw predictions and aligned targets per unlabeled index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelTable {
    raw: Vec<f64>,
    aligned: Vec<f64>,
    initialized: bool,
    last_refresh_iter: u64,
    /// Number of alignments performed so far.
    align_calls: u64,
}

impl PseudoLabelTable {
    pub fn new(n_unlabeled: usize) -> Self {
        Self {
            raw: vec![0.0; n_unlabeled],
            aligned: vec![0.0; n_unlabeled],
            initialized: false,
            last_refresh_iter: 0,
            align_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn aligned(&self) -> &[f64] {
        &self.aligned
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn last_refresh_iter(&self) -> u64 {
        self.last_refresh_iter
    }

    pub fn align_calls(&self) -> u64 {
        self.align_calls
    }

    /// Overwrites `raw[id]` for each pair. Validates everything before
    /// writing anything.
    pub fn update(&mut self, ids: &[usize], preds: &[f64]) -> Result<()> {
        if ids.len() != preds.len() {
            return Err(Error::Shape(format!("{} ids vs {} predictions", ids.len(), preds.len())));
        }
        for (&id, &p) in ids.iter().zip(preds) {
            if id >= self.raw.len() {
                return Err(Error::Index { id, len: self.raw.len() });
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("pseudo-label prediction {p} for unlabeled id {id}")));
            }
        }
        for (&id, &p) in ids.iter().zip(preds) {
            self.raw[id] = p;
        }
        Ok(())
    }

    /// Re-aligns when the table is uninitialized or `iter` is a multiple of
    /// the refresh period. Returns whether a refresh happened.
    pub fn maybe_refresh(&mut self, labeled_labels: &[f64], iter: u64, cfg: &RdaConfig) -> Result<bool> {
        cfg.validate()?;
        if self.initialized && iter % cfg.refresh_period != 0 {
            return Ok(false);
        }
        let dist = interpolate_labeled_distribution(labeled_labels, self.raw.len())?;
        self.aligned = align(&self.raw, &dist)?;
        self.align_calls += 1;
        self.initialized = true;
        self.last_refresh_iter = iter;
        Ok(true)
    }

    /// Regression loss between predictions and the aligned targets of `ids`.
    /// Before the first refresh it is zero and flagged as not initialized.
    pub fn batch_loss(&self, ids: &[usize], reg_preds: &[f64], kind: RegressionKind) -> Result<RdaLoss> {
        if ids.len() != reg_preds.len() {
            return Err(Error::Shape(format!("{} ids vs {} predictions", ids.len(), reg_preds.len())));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.aligned.len()) {
            return Err(Error::Index { id, len: self.aligned.len() });
        }
        if !self.initialized {
            return Ok(RdaLoss {
                loss: LossGrad::zeros(reg_preds.len()),
                initialized: false,
            });
        }
        let targets: Vec<f64> = ids.iter().map(|&id| self.aligned[id]).collect();
        Ok(RdaLoss {
            loss: regression_loss(reg_preds, &targets, kind)?,
            initialized: true,
        })
    }

    pub fn dump(&self, iter: u64) -> TableDump<'_> {
        TableDump {
            format_version: TABLE_DUMP_FORMAT_VERSION,
            iter,
            initialized: self.initialized,
            last_refresh_iter: self.last_refresh_iter,
            align_calls: self.align_calls,
            raw: &self.raw,
            aligned: &self.aligned,
        }
    }
}

pub fn table_update(tbl: &mut PseudoLabelTable, ids: &[usize], preds: &[f64]) -> Result<()> {
    tbl.update(ids, preds)
}

pub fn maybe_refresh(tbl: &mut PseudoLabelTable, labeled_labels: &[f64], iter: u64, cfg: &RdaConfig) -> Result<bool> {
    tbl.maybe_refresh(labeled_labels, iter, cfg)
}

pub fn rda_batch_loss(tbl: &PseudoLabelTable, ids: &[usize], reg_preds: &[f64], kind: RegressionKind) -> Result<RdaLoss> {
    tbl.batch_loss(ids, reg_preds, kind)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdaLoss {
    pub loss: LossGrad,
    pub initialized: bool,
}

pub const TABLE_DUMP_FORMAT_VERSION: u32 = 1;

/// JSON snapshot of a pseudo-label table.
#[derive(Debug, Serialize)]
pub struct TableDump<'a> {
    pub format_version: u32,
    pub iter: u64,
    pub initialized: bool,
    pub last_refresh_iter: u64,
    pub align_calls: u64,
    pub raw: &'a [f64],
    pub aligned: &'a [f64],
}

impl TableDump<'_> {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
