//! Numeric primitives over validation feature batches: pairwise squared
//! distances, the multi-bandwidth Gaussian kernel, the biased (V-statistic)
//! MMD estimator, cross-entropy and accuracy.
//!
//! Everything here is a pure function of its inputs. Means are accumulated
//! row-major in a fixed order so results are bit-stable across runs.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

/// Bandwidths used by the DomainBed MMD penalty: seven decades around 1.
pub const DEFAULT_GAMMAS: [f64; 7] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("input shape mismatch: {what} ({left} vs {right})")]
    ShapeMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("empty batch: at least one row is required")]
    EmptyBatch,
    #[error("row {row}: label {label} is not a valid class index for {classes} classes")]
    InvalidLabel {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("row {row}, column {col}: non-finite logit")]
    NonFiniteLogit { row: usize, col: usize },
    #[error("row {row}, column {col}: non-finite feature")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("kernel configuration: gamma list is empty")]
    EmptyGammas,
    #[error("kernel configuration: gamma {0} is not strictly positive and finite")]
    InvalidGamma(f64),
    #[error("insufficient domains: pairwise discrepancy needs at least 2, got {0}")]
    InsufficientDomains(usize),
    #[error("distance matrix contains a negative or non-finite entry at ({row}, {col})")]
    InvalidDistance { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Inverse squared bandwidths of the Gaussian kernel mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    gammas: Vec<f64>,
}

impl KernelConfig {
    pub fn new(gammas: Vec<f64>) -> Result<Self> {
        if gammas.is_empty() {
            return Err(MetricsError::EmptyGammas);
        }
        if let Some(&bad) = gammas.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(MetricsError::InvalidGamma(bad));
        }
        Ok(Self { gammas })
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            gammas: DEFAULT_GAMMAS.to_vec(),
        }
    }
}

/// Validation features, logits and labels of one domain at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    domain_id: String,
    features: Array2<f64>,
    logits: Array2<f64>,
    labels: Vec<usize>,
}

impl FeatureBatch {
    /// Validates row counts, label range and finiteness.
    pub fn new(
        domain_id: impl Into<String>,
        features: Array2<f64>,
        logits: Array2<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(MetricsError::EmptyBatch);
        }
        if logits.nrows() != n {
            return Err(MetricsError::ShapeMismatch {
                what: "feature rows vs logit rows",
                left: n,
                right: logits.nrows(),
            });
        }
        if labels.len() != n {
            return Err(MetricsError::ShapeMismatch {
                what: "feature rows vs label count",
                left: n,
                right: labels.len(),
            });
        }
        if let Some(((row, col), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(MetricsError::NonFiniteFeature { row, col });
        }
        validate_logits_labels(logits.view(), &labels)?;
        Ok(Self {
            domain_id: domain_id.into(),
            features,
            logits,
            labels,
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.logits.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }
}

fn validate_logits_labels(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() == 0 {
        return Err(MetricsError::EmptyBatch);
    }
    if logits.nrows() != labels.len() {
        return Err(MetricsError::ShapeMismatch {
            what: "logit rows vs label count",
            left: logits.nrows(),
            right: labels.len(),
        });
    }
    let classes = logits.ncols();
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(MetricsError::InvalidLabel {
            row,
            label,
            classes,
        });
    }
    if let Some(((row, col), _)) = logits.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(MetricsError::NonFiniteLogit { row, col });
    }
    Ok(())
}

/// Entry `(i, j)` is `‖a_i − b_j‖²`.
pub fn squared_euclidean_distances(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(MetricsError::ShapeMismatch {
            what: "feature dimension",
            left: a.ncols(),
            right: b.ncols(),
        });
    }
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            let d: f64 = ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            out[[i, j]] = d.max(0.0);
        }
    }
    Ok(out)
}

/// `K[i, j] = Σ_γ exp(−γ · D[i, j])`.
pub fn multi_gamma_kernel(
    distances: ArrayView2<'_, f64>,
    cfg: &KernelConfig,
) -> Result<Array2<f64>> {
    if cfg.gammas.is_empty() {
        return Err(MetricsError::EmptyGammas);
    }
    if let Some(((row, col), _)) = distances
        .indexed_iter()
        .find(|(_, d)| !(d.is_finite() && **d >= 0.0))
    {
        return Err(MetricsError::InvalidDistance { row, col });
    }
    Ok(distances.mapv(|d| kernel_value(d, &cfg.gammas)))
}

#[inline]
fn kernel_value(d: f64, gammas: &[f64]) -> f64 {
    gammas.iter().map(|g| (-g * d).exp()).sum()
}

/// Mean of the kernel matrix between two point sets, accumulated row by row.
fn mean_kernel(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, cfg: &KernelConfig) -> Result<f64> {
    let d = squared_euclidean_distances(a, b)?;
    let k = multi_gamma_kernel(d.view(), cfg)?;
    let total: f64 = k.iter().sum();
    Ok(total / (a.nrows() * b.nrows()) as f64)
}

/// Biased MMD² between two raw feature matrices: `mean(K_aa) + mean(K_bb) − 2·mean(K_ab)`,
/// with diagonals included, clamped at zero.
pub fn mmd_features(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    cfg: &KernelConfig,
) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(MetricsError::EmptyBatch);
    }
    if a.ncols() != b.ncols() {
        return Err(MetricsError::ShapeMismatch {
            what: "feature dimension",
            left: a.ncols(),
            right: b.ncols(),
        });
    }
    let kaa = mean_kernel(a, a, cfg)?;
    let kbb = mean_kernel(b, b, cfg)?;
    let kab = mean_kernel(a, b, cfg)?;
    Ok((kaa + kbb - 2.0 * kab).max(0.0))
}

/// Biased MMD² between the feature sets of two batches.
pub fn mmd_biased(a: &FeatureBatch, b: &FeatureBatch, cfg: &KernelConfig) -> Result<f64> {
    mmd_features(a.features(), b.features(), cfg)
}

/// Mean of [`mmd_biased`] over all unordered pairs of domains.
pub fn pairwise_domain_mmd(batches: &[FeatureBatch], cfg: &KernelConfig) -> Result<f64> {
    if batches.len() < 2 {
        return Err(MetricsError::InsufficientDomains(batches.len()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..batches.len() {
        for j in (i + 1)..batches.len() {
            total += mmd_biased(&batches[i], &batches[j], cfg)?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean negative log-softmax probability of the true label.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    validate_logits_labels(logits, labels)?;
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += log_norm - (row[label] - max);
    }
    Ok((total / labels.len() as f64).max(0.0))
}

/// Index of the largest logit; ties resolve to the lowest class index.
pub fn argmax_row(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    validate_logits_labels(logits, labels)?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| argmax_row(row.view()) == label)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}
