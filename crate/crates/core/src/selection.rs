//! Checkpoint selection.
//!
//! Two strategies are provided:
//!
//! * [`select_ours`] keeps, per run, only the checkpoints whose validation
//!   cross-entropy falls inside a rank window (5th to 50th percentile by
//!   default), then picks the survivor minimizing
//!   `β·(1−α)·ce + α·mmd` over all runs.
//! * [`select_traditional`] is plain training-domain validation: the
//!   checkpoint with the highest validation accuracy.
//!
//! `test_acc` is carried for reporting and never read by either selector.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("no runs to select from")]
    NoRuns,
    #[error("run {0:?} has no checkpoints")]
    EmptyRun(String),
    #[error("empty checkpoint list")]
    EmptyCheckpoints,
    #[error("run {run_id:?}: checkpoints not strictly increasing by step at step {step}")]
    UnsortedSteps { run_id: String, step: u64 },
    #[error("checkpoint belongs to run {found:?}, expected {expected:?}")]
    ForeignCheckpoint { expected: String, found: String },
    #[error("duplicate run id {0:?}")]
    DuplicateRun(String),
    #[error("{field} must be finite, got {value}")]
    NonFinite { field: &'static str, value: f64 },
    #[error("invalid checkpoint {run_id:?}@{step}: {reason}")]
    InvalidCheckpoint {
        run_id: String,
        step: u64,
        reason: String,
    },
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SelectionError>;

/// One checkpoint's validation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub run_id: String,
    pub step: u64,
    pub ce: f64,
    pub mmd: f64,
    pub acc: f64,
    pub test_acc: Option<f64>,
}

impl CheckpointRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| SelectionError::InvalidCheckpoint {
            run_id: self.run_id.clone(),
            step: self.step,
            reason,
        };
        if !(self.ce.is_finite() && self.ce >= 0.0) {
            return Err(bad(format!(
                "ce must be finite and non-negative, got {}",
                self.ce
            )));
        }
        if !(self.mmd.is_finite() && self.mmd >= 0.0) {
            return Err(bad(format!(
                "mmd must be finite and non-negative, got {}",
                self.mmd
            )));
        }
        if !(0.0..=1.0).contains(&self.acc) {
            return Err(bad(format!("acc must lie in [0, 1], got {}", self.acc)));
        }
        if let Some(t) = self.test_acc {
            if !(0.0..=1.0).contains(&t) {
                return Err(bad(format!("test_acc must lie in [0, 1], got {t}")));
            }
        }
        Ok(())
    }

    pub fn key(&self) -> CheckpointKey {
        CheckpointKey {
            run_id: self.run_id.clone(),
            step: self.step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CheckpointKey {
    pub run_id: String,
    pub step: u64,
}

/// One random-search trial: its hyper-parameters and its checkpoints in step order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    run_id: String,
    hparams: BTreeMap<String, serde_json::Value>,
    checkpoints: Vec<CheckpointRecord>,
}

impl RunRecord {
    pub fn new(
        run_id: impl Into<String>,
        hparams: BTreeMap<String, serde_json::Value>,
        checkpoints: Vec<CheckpointRecord>,
    ) -> Result<Self> {
        let run_id = run_id.into();
        if checkpoints.is_empty() {
            return Err(SelectionError::EmptyRun(run_id));
        }
        for c in &checkpoints {
            if c.run_id != run_id {
                return Err(SelectionError::ForeignCheckpoint {
                    expected: run_id,
                    found: c.run_id.clone(),
                });
            }
            c.validate()?;
        }
        if let Some(w) = checkpoints.windows(2).find(|w| w[1].step <= w[0].step) {
            return Err(SelectionError::UnsortedSteps {
                run_id,
                step: w[1].step,
            });
        }
        Ok(Self {
            run_id,
            hparams,
            checkpoints,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn hparams(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.hparams
    }

    pub fn checkpoints(&self) -> &[CheckpointRecord] {
        &self.checkpoints
    }
}

/// Groups flat records into runs (by run id, lexicographic), sorting each run by step.
pub fn group_into_runs(records: Vec<CheckpointRecord>) -> Result<Vec<RunRecord>> {
    let mut grouped: BTreeMap<String, Vec<CheckpointRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.run_id.clone()).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(run_id, mut cps)| {
            cps.sort_by_key(|c| c.step);
            RunRecord::new(run_id, BTreeMap::new(), cps)
        })
        .collect()
}

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_PCT_LOW: f64 = 0.05;
pub const DEFAULT_PCT_HIGH: f64 = 0.50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub pct_low: f64,
    pub pct_high: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            pct_low: DEFAULT_PCT_LOW,
            pct_high: DEFAULT_PCT_HIGH,
        }
    }
}

impl SelectionConfig {
    /// Full window `[0, 1]`, i.e. no percentile filtering.
    pub fn unfiltered(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            pct_low: 0.0,
            pct_high: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SelectionError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return err(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return err(format!(
                "beta must be positive and finite, got {}",
                self.beta
            ));
        }
        if !(0.0..1.0).contains(&self.pct_low) {
            return err(format!("pct_low must lie in [0, 1), got {}", self.pct_low));
        }
        if !(self.pct_high > 0.0 && self.pct_high <= 1.0) {
            return err(format!(
                "pct_high must lie in (0, 1], got {}",
                self.pct_high
            ));
        }
        if self.pct_low >= self.pct_high {
            return err(format!(
                "pct_low ({}) must be below pct_high ({})",
                self.pct_low, self.pct_high
            ));
        }
        Ok(())
    }
}

/// `β·(1−α)·ce + α·mmd`.
pub fn validation_loss(ce: f64, mmd: f64, cfg: &SelectionConfig) -> Result<f64> {
    if !ce.is_finite() {
        return Err(SelectionError::NonFinite {
            field: "ce",
            value: ce,
        });
    }
    if !mmd.is_finite() {
        return Err(SelectionError::NonFinite {
            field: "mmd",
            value: mmd,
        });
    }
    Ok(cfg.beta * (1.0 - cfg.alpha) * ce + cfg.alpha * mmd)
}

fn by_ce_step_run(a: &CheckpointRecord, b: &CheckpointRecord) -> Ordering {
    a.ce.total_cmp(&b.ce)
        .then(a.step.cmp(&b.step))
        .then_with(|| a.run_id.cmp(&b.run_id))
}

// Slack so that e.g. 0.05 * 20 lands on rank 1 even when the product rounds up.
const RANK_EPS: f64 = 1e-9;

/// Inclusive 1-indexed rank window kept out of `n` records.
pub fn percentile_window(n: usize, pct_low: f64, pct_high: f64) -> (usize, usize) {
    let lo = ((pct_low * n as f64 - RANK_EPS).ceil().max(1.0)) as usize;
    let hi = ((pct_high * n as f64 + RANK_EPS).floor()) as usize;
    let hi = hi.min(n);
    if lo > hi {
        (lo, lo)
    } else {
        (lo, hi)
    }
}

/// Sorts by ascending cross-entropy and keeps the configured rank window.
/// Never returns an empty list for non-empty input.
pub fn percentile_filter(
    checkpoints: &[CheckpointRecord],
    cfg: &SelectionConfig,
) -> Result<Vec<CheckpointRecord>> {
    if checkpoints.is_empty() {
        return Err(SelectionError::EmptyCheckpoints);
    }
    let mut sorted = checkpoints.to_vec();
    sorted.sort_by(by_ce_step_run);
    let (lo, hi) = percentile_window(sorted.len(), cfg.pct_low, cfg.pct_high);
    Ok(sorted[lo - 1..hi].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Traditional,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Ours => f.write_str("ours"),
            Method::Traditional => f.write_str("traditional"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub run_id: String,
    pub step: u64,
    pub ce: f64,
    pub mmd: f64,
    /// Combined validation loss; absent for traditional selection, which never computes it.
    pub loss: Option<f64>,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: CheckpointKey,
    pub criterion_value: f64,
    pub method: Method,
    pub candidate_count: usize,
    pub audit: Vec<AuditRow>,
}

impl SelectionResult {
    pub fn chosen_record<'a>(&self, runs: &'a [RunRecord]) -> Option<&'a CheckpointRecord> {
        runs.iter()
            .filter(|r| r.run_id == self.chosen.run_id)
            .flat_map(|r| r.checkpoints.iter())
            .find(|c| c.step == self.chosen.step)
    }
}

fn check_runs(runs: &[RunRecord]) -> Result<()> {
    if runs.is_empty() {
        return Err(SelectionError::NoRuns);
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in runs {
        if r.checkpoints.is_empty() {
            return Err(SelectionError::EmptyRun(r.run_id.clone()));
        }
        if !seen.insert(r.run_id.as_str()) {
            return Err(SelectionError::DuplicateRun(r.run_id.clone()));
        }
    }
    Ok(())
}

/// Percentile filter per run, then the global minimizer of the validation loss.
/// Ties resolve by lower ce, then earlier step, then run id.
pub fn select_ours(runs: &[RunRecord], cfg: &SelectionConfig) -> Result<SelectionResult> {
    cfg.validate()?;
    check_runs(runs)?;
    let mut candidates: Vec<(f64, CheckpointRecord)> = Vec::new();
    for run in runs {
        for c in percentile_filter(&run.checkpoints, cfg)? {
            let loss = validation_loss(c.ce, c.mmd, cfg)?;
            candidates.push((loss, c));
        }
    }
    // Audit rows in a stable (run, step) order.
    candidates.sort_by(|a, b| a.1.run_id.cmp(&b.1.run_id).then(a.1.step.cmp(&b.1.step)));
    let (best_loss, best) = candidates
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| by_ce_step_run(&a.1, &b.1)))
        .expect("filter output is non-empty");
    Ok(SelectionResult {
        chosen: best.key(),
        criterion_value: *best_loss,
        method: Method::Ours,
        candidate_count: candidates.len(),
        audit: candidates
            .iter()
            .map(|(loss, c)| AuditRow {
                run_id: c.run_id.clone(),
                step: c.step,
                ce: c.ce,
                mmd: c.mmd,
                loss: Some(*loss),
                acc: c.acc,
            })
            .collect(),
    })
}

/// Highest validation accuracy over every checkpoint of every run.
/// Ties resolve by lower ce, then earlier step, then run id.
pub fn select_traditional(runs: &[RunRecord]) -> Result<SelectionResult> {
    check_runs(runs)?;
    let mut all: Vec<&CheckpointRecord> = runs.iter().flat_map(|r| r.checkpoints.iter()).collect();
    all.sort_by(|a, b| a.run_id.cmp(&b.run_id).then(a.step.cmp(&b.step)));
    let best = all
        .iter()
        .min_by(|a, b| b.acc.total_cmp(&a.acc).then_with(|| by_ce_step_run(a, b)))
        .expect("runs are non-empty");
    Ok(SelectionResult {
        chosen: best.key(),
        criterion_value: best.acc,
        method: Method::Traditional,
        candidate_count: all.len(),
        audit: all
            .iter()
            .map(|c| AuditRow {
                run_id: c.run_id.clone(),
                step: c.step,
                ce: c.ce,
                mmd: c.mmd,
                loss: None,
                acc: c.acc,
            })
            .collect(),
    })
}

/// Both selections side by side with the unseen-domain accuracy each one picked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub ours: SelectionResult,
    pub traditional: SelectionResult,
    pub ours_test_acc: Option<f64>,
    pub traditional_test_acc: Option<f64>,
    /// `ours − traditional`; null when either test accuracy is missing.
    pub delta: Option<f64>,
}

pub fn compare_methods(runs: &[RunRecord], cfg: &SelectionConfig) -> Result<ComparisonReport> {
    let ours = select_ours(runs, cfg)?;
    let traditional = select_traditional(runs)?;
    let ours_test_acc = ours.chosen_record(runs).and_then(|c| c.test_acc);
    let traditional_test_acc = traditional.chosen_record(runs).and_then(|c| c.test_acc);
    let delta = match (ours_test_acc, traditional_test_acc) {
        (Some(o), Some(t)) => Some(o - t),
        _ => None,
    };
    Ok(ComparisonReport {
        ours,
        traditional,
        ours_test_acc,
        traditional_test_acc,
        delta,
    })
}
