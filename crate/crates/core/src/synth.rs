//! Desk-scale end-to-end harness.
//!
//! Generates binary-labelled domains with one invariant coordinate and one
//! spurious coordinate whose agreement with the label differs per domain
//! (high in the seen domains, flipped in the unseen one), trains a
//! one-hidden-layer tanh network by minibatch SGD on the pooled seen-domain
//! training splits, and records hidden features, logits and labels of each
//! seen domain's validation split at every checkpoint. A random search over
//! learning rate and width produces one run per trial; both selectors are
//! then applied to the resulting metrics.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::ingest::{self, ArchiveBuilder, CheckpointArchive, IngestError};
use crate::metrics::{self, FeatureBatch, KernelConfig};
use crate::selection::{
    self, percentile_filter, CheckpointKey, CheckpointRecord, RunRecord, SelectionConfig,
    SelectionError,
};

/// Fraction of every seen domain held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;
/// Widths sampled by the random search.
pub const HIDDEN_CHOICES: [usize; 3] = [4, 8, 16];
/// Learning rates are sampled log-uniformly from this range.
pub const LEARNING_RATE_RANGE: (f64, f64) = (0.01, 1.0);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("run {run_id}: training diverged at step {step} (loss {loss})")]
    Divergence {
        run_id: String,
        step: u64,
        loss: f64,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_per_domain: usize,
    /// Probability that the spurious coordinate agrees with the label, per seen domain.
    pub seen_corrs: Vec<f64>,
    pub unseen_corr: f64,
    /// Distance between the class means of the invariant coordinate.
    pub inv_sep: f64,
    pub noise_sd: f64,
    /// Absolute value of the spurious coordinate.
    pub spurious_mag: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_domain: 1000,
            seen_corrs: vec![0.9, 0.8],
            unseen_corr: 0.1,
            inv_sep: 1.0,
            noise_sd: 1.0,
            spurious_mag: 2.0,
        }
    }
}

impl SyntheticConfig {
    /// Invariant-only data that a linear boundary separates almost surely.
    pub fn separable_smoke(seed: u64) -> Self {
        Self {
            seed,
            n_per_domain: 500,
            seen_corrs: vec![0.5, 0.5],
            unseen_corr: 0.5,
            inv_sep: 4.0,
            noise_sd: 0.5,
            spurious_mag: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.seen_corrs.len() < 2 {
            return bad(format!(
                "need at least 2 seen domains, got {}",
                self.seen_corrs.len()
            ));
        }
        if let Some(c) = self
            .seen_corrs
            .iter()
            .chain(std::iter::once(&self.unseen_corr))
            .find(|c| !(0.0..=1.0).contains(*c))
        {
            return bad(format!("correlation {c} outside [0, 1]"));
        }
        if self.n_per_domain < 5 {
            return bad(format!(
                "n_per_domain must be at least 5, got {}",
                self.n_per_domain
            ));
        }
        if !(self.inv_sep.is_finite() && self.inv_sep > 0.0) {
            return bad(format!("inv_sep must be positive, got {}", self.inv_sep));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd > 0.0) {
            return bad(format!("noise_sd must be positive, got {}", self.noise_sd));
        }
        if !(self.spurious_mag.is_finite() && self.spurious_mag >= 0.0) {
            return bad(format!(
                "spurious_mag must be non-negative, got {}",
                self.spurious_mag
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain_id: String,
    /// Columns: invariant coordinate, spurious coordinate.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `len − n_val` rows train, the rest validate.
    pub fn split_validation(&self) -> (Dataset, Dataset) {
        let n_val = validation_count(self.len());
        let cut = self.len() - n_val;
        let part = |rows: std::ops::Range<usize>| Dataset {
            domain_id: self.domain_id.clone(),
            features: self.features.slice(s![rows.clone(), ..]).to_owned(),
            labels: self.labels[rows].to_vec(),
        };
        (part(0..cut), part(cut..self.len()))
    }
}

pub fn validation_count(n: usize) -> usize {
    ((n as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, n - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSet {
    pub seen: Vec<Dataset>,
    pub unseen: Dataset,
}

fn generate_domain(cfg: &SyntheticConfig, domain_id: String, corr: f64, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, cfg.noise_sd).expect("noise_sd validated");
    let n = cfg.n_per_domain;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    // Within each class exactly round(corr · n_class) rows agree, in random order.
    let mut agree = vec![false; n];
    for class in 0..2 {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        let k = (corr * rows.len() as f64).round() as usize;
        let mut flags: Vec<bool> = (0..rows.len()).map(|j| j < k).collect();
        flags.shuffle(&mut rng);
        for (&i, f) in rows.iter().zip(flags) {
            agree[i] = f;
        }
    }
    let mut features = Array2::zeros((n, 2));
    for i in 0..n {
        let sign = if labels[i] == 1 { 1.0 } else { -1.0 };
        features[[i, 0]] = sign * cfg.inv_sep / 2.0 + noise.sample(&mut rng);
        features[[i, 1]] = if agree[i] { sign } else { -sign } * cfg.spurious_mag;
    }
    Dataset {
        domain_id,
        features,
        labels,
    }
}

/// Seen domains `seen-0, seen-1, …` and one `unseen` domain, each from its own RNG stream.
pub fn generate_domains(cfg: &SyntheticConfig) -> Result<DomainSet> {
    cfg.validate()?;
    let seen = cfg
        .seen_corrs
        .iter()
        .enumerate()
        .map(|(i, &c)| generate_domain(cfg, format!("seen-{i}"), c, i as u64 + 1))
        .collect();
    let unseen = generate_domain(
        cfg,
        "unseen".into(),
        cfg.unseen_corr,
        cfg.seen_corrs.len() as u64 + 1,
    );
    Ok(DomainSet { seen, unseen })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_units: 8,
            learning_rate: 0.1,
            steps: 1000,
            checkpoint_every: 50,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.hidden_units == 0 || self.batch_size == 0 {
            return bad("hidden_units and batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.checkpoint_every == 0 || self.steps / self.checkpoint_every < 3 {
            return bad(format!(
                "steps={} with checkpoint_every={} gives fewer than 3 checkpoints",
                self.steps, self.checkpoint_every
            ));
        }
        Ok(())
    }
}

/// `logits = W2 · tanh(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Gradients with the same shapes as the parameters of [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpGrad {
    pub fn layers(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }
}

impl Mlp {
    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let n1 = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).expect("positive sd");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive sd");
        Self {
            w1: Array2::from_shape_simple_fn((hidden, input_dim), || n1.sample(rng)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_simple_fn((classes, hidden), || n2.sample(rng)),
            b2: Array1::zeros(classes),
        }
    }

    pub fn layers_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn hidden(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (x.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh)
    }

    /// Hidden activations and logits.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let h = self.hidden(x);
        let logits = h.dot(&self.w2.t()) + &self.b2;
        (h, logits)
    }

    pub fn loss(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
        let (_, logits) = self.forward(x);
        softmax_ce(logits.view(), labels)
    }

    /// Mean cross-entropy and its gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, MlpGrad) {
        let n = labels.len() as f64;
        let (h, logits) = self.forward(x);
        let loss = softmax_ce(logits.view(), labels);
        // d loss / d logits = (softmax − onehot) / n
        let mut dlogits = logits;
        for (mut row, &y) in dlogits.rows_mut().into_iter().zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
            row[y] -= 1.0;
            row.mapv_inplace(|v| v / n);
        }
        let w2 = dlogits.t().dot(&h);
        let b2 = dlogits.sum_axis(Axis(0));
        let dh = dlogits.dot(&self.w2);
        let dpre = dh * h.mapv(|a| 1.0 - a * a);
        let w1 = dpre.t().dot(&x);
        let b1 = dpre.sum_axis(Axis(0));
        (loss, MlpGrad { w1, b1, w2, b2 })
    }

    pub fn sgd_step(&mut self, grad: &MlpGrad, lr: f64) {
        self.w1.scaled_add(-lr, &grad.w1);
        self.b1.scaled_add(-lr, &grad.b1);
        self.w2.scaled_add(-lr, &grad.w2);
        self.b2.scaled_add(-lr, &grad.b2);
    }
}

fn softmax_ce(logits: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    total / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub run_id: String,
    /// Checkpoint archive with one batch per seen validation domain.
    pub archive: CheckpointArchive,
    /// Full training-split loss at each checkpoint.
    pub train_losses: Vec<(u64, f64)>,
    pub model: Mlp,
}

impl TrainedRun {
    pub fn run_record(
        &self,
        hparams: BTreeMap<String, serde_json::Value>,
        kernel: &KernelConfig,
    ) -> Result<RunRecord> {
        let records = ingest::compute_checkpoint_metrics(&self.archive, kernel)?;
        Ok(RunRecord::new(self.run_id.clone(), hparams, records)?)
    }
}

fn stack(parts: &[&Dataset]) -> (Array2<f64>, Vec<usize>) {
    let views: Vec<_> = parts.iter().map(|d| d.features.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).expect("shared feature width");
    let y = parts
        .iter()
        .flat_map(|d| d.labels.iter().copied())
        .collect();
    (x, y)
}

/// Trains on the pooled seen-domain training splits and archives a checkpoint
/// every `checkpoint_every` steps. The unseen domain only feeds `test_acc`.
pub fn train_classifier(
    run_id: &str,
    domains: &DomainSet,
    tcfg: &TrainConfig,
) -> Result<TrainedRun> {
    tcfg.validate()?;
    if domains.seen.len() < 2 {
        return Err(SynthError::InvalidConfig(
            "need at least 2 seen domains".into(),
        ));
    }
    let splits: Vec<(Dataset, Dataset)> =
        domains.seen.iter().map(Dataset::split_validation).collect();
    let train_parts: Vec<&Dataset> = splits.iter().map(|(t, _)| t).collect();
    let (train_x, train_y) = stack(&train_parts);
    let input_dim = train_x.ncols();

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = Mlp::init(input_dim, tcfg.hidden_units, 2, &mut rng);
    let mut builder = ArchiveBuilder::new();
    let mut train_losses = Vec::new();
    let mut batch_x = Array2::zeros((tcfg.batch_size, input_dim));
    let mut batch_y = vec![0usize; tcfg.batch_size];

    for step in 1..=tcfg.steps {
        for (i, y) in batch_y.iter_mut().enumerate() {
            let j = rng.random_range(0..train_y.len());
            batch_x.row_mut(i).assign(&train_x.row(j));
            *y = train_y[j];
        }
        let (loss, grad) = model.loss_and_grad(batch_x.view(), &batch_y);
        if !loss.is_finite() {
            return Err(SynthError::Divergence {
                run_id: run_id.into(),
                step,
                loss,
            });
        }
        model.sgd_step(&grad, tcfg.learning_rate);

        if step % tcfg.checkpoint_every == 0 {
            let full = model.loss(train_x.view(), &train_y);
            if !full.is_finite() {
                return Err(SynthError::Divergence {
                    run_id: run_id.into(),
                    step,
                    loss: full,
                });
            }
            train_losses.push((step, full));
            let (_, unseen_logits) = model.forward(domains.unseen.features.view());
            let test_acc = metrics::accuracy(unseen_logits.view(), &domains.unseen.labels)
                .expect("unseen labels are binary");
            for (_, val) in &splits {
                let (h, logits) = model.forward(val.features.view());
                let batch = FeatureBatch::new(val.domain_id.clone(), h, logits, val.labels.clone())
                    .map_err(|source| IngestError::InvalidBatch {
                        run_id: run_id.into(),
                        step,
                        domain: val.domain_id.clone(),
                        source,
                    })?;
                builder.push(run_id, step, Some(test_acc), batch)?;
            }
        }
    }
    Ok(TrainedRun {
        run_id: run_id.into(),
        archive: builder.finish()?,
        train_losses,
        model,
    })
}

/// Hyper-parameters drawn for one random-search trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialParams {
    pub run_id: String,
    pub learning_rate: f64,
    pub hidden_units: usize,
    pub seed: u64,
}

impl TrialParams {
    pub fn hparams(&self) -> BTreeMap<String, serde_json::Value> {
        BTreeMap::from([
            (
                "hidden_units".to_string(),
                serde_json::json!(self.hidden_units),
            ),
            (
                "learning_rate".to_string(),
                serde_json::json!(self.learning_rate),
            ),
            ("seed".to_string(), serde_json::json!(self.seed)),
        ])
    }
}

pub fn trial_run_id(trial: usize, n_trials: usize) -> String {
    let width = n_trials.saturating_sub(1).to_string().len().max(2);
    format!("trial-{trial:0width$}")
}

/// Trial `i` draws from stream `i + 1` of a generator seeded with `base_seed`.
pub fn sample_trial(base_seed: u64, trial: usize, n_trials: usize) -> TrialParams {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(trial as u64 + 1);
    let (lo, hi) = LEARNING_RATE_RANGE;
    let exponent = rng.random_range(lo.log10()..hi.log10());
    TrialParams {
        run_id: trial_run_id(trial, n_trials),
        learning_rate: 10f64.powf(exponent),
        hidden_units: HIDDEN_CHOICES[rng.random_range(0..HIDDEN_CHOICES.len())],
        seed: rng.random(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialAuditRow {
    pub step: u64,
    pub ce: f64,
    pub mmd: f64,
    pub acc: f64,
    pub loss: f64,
    pub test_acc: Option<f64>,
    /// Whether the checkpoint passes its run's cross-entropy percentile window.
    pub candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pick {
    pub run_id: String,
    pub step: u64,
    pub criterion_value: f64,
    pub candidate_count: usize,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub run_id: String,
    pub hparams: BTreeMap<String, serde_json::Value>,
    pub ours: Pick,
    pub traditional: Pick,
    pub audit: Vec<TrialAuditRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMeans {
    pub ours: Option<f64>,
    pub traditional: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub selection: SelectionConfig,
    /// Global selection over all trials.
    pub ours: Pick,
    pub traditional: Pick,
    /// `ours − traditional` unseen-domain accuracy of the global picks.
    pub delta: Option<f64>,
    /// Unseen-domain accuracy of each method's per-trial pick, averaged over trials.
    pub per_trial_mean_test_acc: MethodMeans,
    /// Whether the combined criterion did at least as well as accuracy-based selection on mean unseen accuracy.
    pub ours_not_worse: Option<bool>,
    pub trials: Vec<TrialReport>,
}

fn pick(result: &selection::SelectionResult, runs: &[RunRecord]) -> Pick {
    Pick {
        run_id: result.chosen.run_id.clone(),
        step: result.chosen.step,
        criterion_value: result.criterion_value,
        candidate_count: result.candidate_count,
        test_acc: result.chosen_record(runs).and_then(|c| c.test_acc),
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl ExperimentReport {
    /// Applies both selectors globally and per trial. Runs may come from training or be injected.
    pub fn from_runs(runs: &[RunRecord], sel: &SelectionConfig) -> Result<Self> {
        let cmp = selection::compare_methods(runs, sel)?;
        let mut trials = Vec::with_capacity(runs.len());
        for run in runs {
            let single = std::slice::from_ref(run);
            let ours = selection::select_ours(single, sel)?;
            let trad = selection::select_traditional(single)?;
            let survivors: Vec<CheckpointKey> = percentile_filter(run.checkpoints(), sel)?
                .iter()
                .map(CheckpointRecord::key)
                .collect();
            let audit = run
                .checkpoints()
                .iter()
                .map(|c| {
                    Ok(TrialAuditRow {
                        step: c.step,
                        ce: c.ce,
                        mmd: c.mmd,
                        acc: c.acc,
                        loss: selection::validation_loss(c.ce, c.mmd, sel)?,
                        test_acc: c.test_acc,
                        candidate: survivors.contains(&c.key()),
                    })
                })
                .collect::<std::result::Result<Vec<_>, SelectionError>>()?;
            trials.push(TrialReport {
                run_id: run.run_id().into(),
                hparams: run.hparams().clone(),
                ours: pick(&ours, single),
                traditional: pick(&trad, single),
                audit,
            });
        }
        let m_ours = mean(trials.iter().map(|t| t.ours.test_acc));
        let m_trad = mean(trials.iter().map(|t| t.traditional.test_acc));
        let m_delta = m_ours.zip(m_trad).map(|(o, t)| o - t);
        Ok(Self {
            selection: *sel,
            ours: pick(&cmp.ours, runs),
            traditional: pick(&cmp.traditional, runs),
            delta: cmp.delta,
            per_trial_mean_test_acc: MethodMeans {
                ours: m_ours,
                traditional: m_trad,
                delta: m_delta,
            },
            ours_not_worse: m_delta.map(|d| d >= 0.0),
            trials,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub report: ExperimentReport,
    pub archive: CheckpointArchive,
    pub records: Vec<CheckpointRecord>,
    pub runs: Vec<RunRecord>,
}

/// Random search: `n_trials` runs with sampled learning rate and width over
/// the same generated domains, then both selection methods.
///
/// `tcfg` supplies steps, checkpoint interval, batch size and the base seed;
/// its width and learning rate are replaced per trial.
pub fn run_experiment(
    scfg: &SyntheticConfig,
    tcfg: &TrainConfig,
    n_trials: usize,
    sel: &SelectionConfig,
    kernel: &KernelConfig,
) -> Result<Experiment> {
    if n_trials == 0 {
        return Err(SynthError::InvalidConfig(
            "n_trials must be at least 1".into(),
        ));
    }
    sel.validate()?;
    tcfg.validate()?;
    let domains = generate_domains(scfg)?;
    let mut archive: Option<CheckpointArchive> = None;
    let mut runs = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let params = sample_trial(tcfg.seed, trial, n_trials);
        let trial_cfg = TrainConfig {
            hidden_units: params.hidden_units,
            learning_rate: params.learning_rate,
            seed: params.seed,
            ..tcfg.clone()
        };
        let trained = train_classifier(&params.run_id, &domains, &trial_cfg)?;
        runs.push(trained.run_record(params.hparams(), kernel)?);
        archive = Some(match archive {
            None => trained.archive,
            Some(a) => a.merge(trained.archive)?,
        });
    }
    let records = runs
        .iter()
        .flat_map(|r| r.checkpoints().iter().cloned())
        .collect();
    Ok(Experiment {
        report: ExperimentReport::from_runs(&runs, sel)?,
        archive: archive.expect("n_trials >= 1"),
        records,
        runs,
    })
}
