//! Checkpoint archives (JSON lines) and per-checkpoint metrics (CSV).
//!
//! One JSONL object per `(run, step, domain)`:
//!
//! ```json
//! {"run_id": "trial-00", "step": 50, "domain": "seen-0",
//!  "features": [[0.1, -0.3]], "logits": [[1.2, -0.4]], "labels": [0],
//!  "test_acc": 0.61}
//! ```
//!
//! Every record is validated into a [`FeatureBatch`] on load. Within a run,
//! all records share the feature dimension and class count of the first
//! record, and every step must carry every domain seen in that run.
//!
//! The metrics CSV has the header `run_id,step,ce,mmd,acc,test_acc`; floats
//! are written with 17 significant digits and an absent `test_acc` is an
//! empty field.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt_f64;
use crate::metrics::{self, FeatureBatch, KernelConfig, MetricsError};
use crate::selection::CheckpointRecord;

pub const METRICS_CSV_HEADER: [&str; 6] = ["run_id", "step", "ce", "mmd", "acc", "test_acc"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no records")]
    NoRecords,
    #[error(
        "run {run_id:?} step {step} domain {domain:?}: {what} is {found}, expected {expected}"
    )]
    DimensionMismatch {
        run_id: String,
        step: u64,
        domain: String,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("duplicate record for run {run_id:?} step {step} domain {domain:?}")]
    DuplicateKey {
        run_id: String,
        step: u64,
        domain: String,
    },
    #[error("run {run_id:?} step {step}: missing domain {domain:?}")]
    MissingDomain {
        run_id: String,
        step: u64,
        domain: String,
    },
    #[error("run {run_id:?} step {step} domain {domain:?}: {source}")]
    InvalidBatch {
        run_id: String,
        step: u64,
        domain: String,
        #[source]
        source: MetricsError,
    },
    #[error("run {run_id:?} step {step}: records disagree on test_acc")]
    TestAccConflict { run_id: String, step: u64 },
    #[error("run {run_id:?} step {step}: {source}")]
    Metrics {
        run_id: String,
        step: u64,
        #[source]
        source: MetricsError,
    },
    #[error("metrics csv row {row}: {message}")]
    Csv { row: usize, message: String },
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// Wire form of one JSONL record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointLine {
    pub run_id: String,
    pub step: u64,
    pub domain: String,
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    #[serde(default)]
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub steps: Vec<u64>,
    pub domains: Vec<String>,
    pub feature_dim: usize,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedCheckpoint {
    pub step: u64,
    pub test_acc: Option<f64>,
    /// One batch per manifest domain, in manifest order.
    pub batches: Vec<FeatureBatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArchive {
    pub manifest: RunManifest,
    pub checkpoints: Vec<ArchivedCheckpoint>,
}

/// Validated per-checkpoint, per-domain feature batches for one or more runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointArchive {
    runs: Vec<RunArchive>,
}

fn to_matrix(
    rows: &[Vec<f64>],
    key: (&str, u64, &str),
    what: &'static str,
    width: Option<usize>,
) -> Result<Array2<f64>> {
    let cols = width.or_else(|| rows.first().map(Vec::len)).unwrap_or(0);
    let mut flat = Vec::with_capacity(rows.len() * cols);
    for row in rows {
        if row.len() != cols {
            return Err(IngestError::DimensionMismatch {
                run_id: key.0.into(),
                step: key.1,
                domain: key.2.into(),
                what,
                expected: cols,
                found: row.len(),
            });
        }
        flat.extend_from_slice(row);
    }
    Ok(Array2::from_shape_vec((rows.len(), cols), flat).expect("row lengths checked"))
}

#[derive(Default)]
struct RunBuilder {
    feature_dim: usize,
    class_count: usize,
    // step -> domain -> batch
    cells: BTreeMap<u64, BTreeMap<String, FeatureBatch>>,
    test_acc: BTreeMap<u64, Option<f64>>,
}

/// Accumulates records with the same validation the JSONL loader applies.
#[derive(Default)]
pub struct ArchiveBuilder {
    runs: BTreeMap<String, RunBuilder>,
}

impl ArchiveBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_line(&mut self, line: CheckpointLine) -> Result<()> {
        let key = (line.run_id.as_str(), line.step, line.domain.as_str());
        let existing = self.runs.get(&line.run_id);
        let features = to_matrix(
            &line.features,
            key,
            "feature dimension",
            existing.map(|r| r.feature_dim),
        )?;
        let logits = to_matrix(
            &line.logits,
            key,
            "class count",
            existing.map(|r| r.class_count),
        )?;
        let batch = FeatureBatch::new(line.domain.clone(), features, logits, line.labels).map_err(
            |source| IngestError::InvalidBatch {
                run_id: line.run_id.clone(),
                step: line.step,
                domain: line.domain.clone(),
                source,
            },
        )?;
        self.push(&line.run_id, line.step, line.test_acc, batch)
    }

    pub fn push(
        &mut self,
        run_id: &str,
        step: u64,
        test_acc: Option<f64>,
        batch: FeatureBatch,
    ) -> Result<()> {
        let domain = batch.domain_id().to_string();
        let run = self
            .runs
            .entry(run_id.to_string())
            .or_insert_with(|| RunBuilder {
                feature_dim: batch.feature_dim(),
                class_count: batch.num_classes(),
                ..Default::default()
            });
        let mismatch = |what, expected, found| IngestError::DimensionMismatch {
            run_id: run_id.into(),
            step,
            domain: domain.clone(),
            what,
            expected,
            found,
        };
        if batch.feature_dim() != run.feature_dim {
            return Err(mismatch(
                "feature dimension",
                run.feature_dim,
                batch.feature_dim(),
            ));
        }
        if batch.num_classes() != run.class_count {
            return Err(mismatch(
                "class count",
                run.class_count,
                batch.num_classes(),
            ));
        }
        let slot = run.test_acc.entry(step).or_insert(test_acc);
        match (*slot, test_acc) {
            (Some(a), Some(b)) if a != b => {
                return Err(IngestError::TestAccConflict {
                    run_id: run_id.into(),
                    step,
                })
            }
            (None, Some(b)) => *slot = Some(b),
            _ => {}
        }
        let cell = run.cells.entry(step).or_default();
        if cell.contains_key(&domain) {
            return Err(IngestError::DuplicateKey {
                run_id: run_id.into(),
                step,
                domain,
            });
        }
        cell.insert(domain, batch);
        Ok(())
    }

    pub fn finish(self) -> Result<CheckpointArchive> {
        if self.runs.is_empty() {
            return Err(IngestError::NoRecords);
        }
        let mut runs = Vec::with_capacity(self.runs.len());
        for (run_id, mut rb) in self.runs {
            let domains: BTreeSet<String> =
                rb.cells.values().flat_map(|c| c.keys().cloned()).collect();
            let mut checkpoints = Vec::with_capacity(rb.cells.len());
            for (step, mut cell) in std::mem::take(&mut rb.cells) {
                let mut batches = Vec::with_capacity(domains.len());
                for d in &domains {
                    let b = cell.remove(d).ok_or_else(|| IngestError::MissingDomain {
                        run_id: run_id.clone(),
                        step,
                        domain: d.clone(),
                    })?;
                    batches.push(b);
                }
                checkpoints.push(ArchivedCheckpoint {
                    step,
                    test_acc: rb.test_acc.get(&step).copied().flatten(),
                    batches,
                });
            }
            runs.push(RunArchive {
                manifest: RunManifest {
                    run_id,
                    steps: checkpoints.iter().map(|c| c.step).collect(),
                    domains: domains.into_iter().collect(),
                    feature_dim: rb.feature_dim,
                    class_count: rb.class_count,
                },
                checkpoints,
            });
        }
        Ok(CheckpointArchive { runs })
    }
}

impl CheckpointArchive {
    /// Runs in lexicographic run-id order.
    pub fn runs(&self) -> &[RunArchive] {
        &self.runs
    }

    pub fn checkpoint_count(&self) -> usize {
        self.runs.iter().map(|r| r.checkpoints.len()).sum()
    }

    pub fn batch_count(&self) -> usize {
        self.runs
            .iter()
            .flat_map(|r| &r.checkpoints)
            .map(|c| c.batches.len())
            .sum()
    }

    /// Merges two archives; run ids must not overlap.
    pub fn merge(self, other: CheckpointArchive) -> Result<CheckpointArchive> {
        let mut builder = ArchiveBuilder::new();
        for run in self.runs.into_iter().chain(other.runs) {
            if builder.runs.contains_key(&run.manifest.run_id) {
                let first = &run.checkpoints[0];
                return Err(IngestError::DuplicateKey {
                    run_id: run.manifest.run_id.clone(),
                    step: first.step,
                    domain: first.batches[0].domain_id().into(),
                });
            }
            for cp in run.checkpoints {
                for b in cp.batches {
                    builder.push(&run.manifest.run_id, cp.step, cp.test_acc, b)?;
                }
            }
        }
        builder.finish()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for run in &self.runs {
            for cp in &run.checkpoints {
                for b in &cp.batches {
                    let line = CheckpointLine {
                        run_id: run.manifest.run_id.clone(),
                        step: cp.step,
                        domain: b.domain_id().into(),
                        features: b
                            .features()
                            .rows()
                            .into_iter()
                            .map(|r| r.to_vec())
                            .collect(),
                        logits: b.logits().rows().into_iter().map(|r| r.to_vec()).collect(),
                        labels: b.labels().to_vec(),
                        test_acc: cp.test_acc,
                    };
                    serde_json::to_writer(&mut w, &line)?;
                    w.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }
}

/// Parses JSONL from any reader; blank lines are skipped.
pub fn parse_checkpoint_jsonl<R: BufRead>(reader: R) -> Result<CheckpointArchive> {
    let mut builder = ArchiveBuilder::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| IngestError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CheckpointLine =
            serde_json::from_str(&line).map_err(|e| IngestError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        builder.push_line(record)?;
    }
    builder.finish()
}

pub fn read_checkpoint_jsonl(path: &Path) -> Result<CheckpointArchive> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_checkpoint_jsonl(BufReader::new(file))
}

/// Per checkpoint: cross-entropy and accuracy over the pooled rows of every
/// domain, and the mean pairwise MMD between domains.
pub fn compute_checkpoint_metrics(
    archive: &CheckpointArchive,
    kernel: &KernelConfig,
) -> Result<Vec<CheckpointRecord>> {
    let mut out = Vec::with_capacity(archive.checkpoint_count());
    for run in &archive.runs {
        for cp in &run.checkpoints {
            let wrap = |source| IngestError::Metrics {
                run_id: run.manifest.run_id.clone(),
                step: cp.step,
                source,
            };
            let mmd = metrics::pairwise_domain_mmd(&cp.batches, kernel).map_err(wrap)?;
            let views: Vec<_> = cp.batches.iter().map(|b| b.logits()).collect();
            let logits =
                ndarray::concatenate(Axis(0), &views).expect("class count validated on load");
            let labels: Vec<usize> = cp
                .batches
                .iter()
                .flat_map(|b| b.labels().iter().copied())
                .collect();
            out.push(CheckpointRecord {
                run_id: run.manifest.run_id.clone(),
                step: cp.step,
                ce: metrics::cross_entropy(logits.view(), &labels).map_err(wrap)?,
                mmd,
                acc: metrics::accuracy(logits.view(), &labels).map_err(wrap)?,
                test_acc: cp.test_acc,
            });
        }
    }
    Ok(out)
}

pub fn write_metrics_csv_to<W: Write>(
    records: &[CheckpointRecord],
    w: W,
) -> std::result::Result<(), csv::Error> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    wtr.write_record(METRICS_CSV_HEADER)?;
    for r in records {
        wtr.write_record([
            r.run_id.clone(),
            r.step.to_string(),
            fmt_f64(r.ce),
            fmt_f64(r.mmd),
            fmt_f64(r.acc),
            r.test_acc.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_metrics_csv(records: &[CheckpointRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_metrics_csv_to(records, std::io::BufWriter::new(file)).map_err(|e| IngestError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, row: usize) -> Result<T> {
    s.trim().parse().map_err(|_| IngestError::Csv {
        row,
        message: format!("cannot parse {name} from {s:?}"),
    })
}

/// Reads a metrics CSV. Row numbers in errors count the header as row 1.
pub fn read_metrics_csv_from<R: std::io::Read>(r: R) -> Result<Vec<CheckpointRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r);
    let mut records = Vec::new();
    let mut keys = BTreeSet::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| IngestError::Csv {
            row: row_no,
            message: e.to_string(),
        })?;
        if row_no == 1 {
            if row.iter().ne(METRICS_CSV_HEADER.iter().copied()) {
                return Err(IngestError::Csv {
                    row: 1,
                    message: format!("header must be {}", METRICS_CSV_HEADER.join(",")),
                });
            }
            continue;
        }
        if row.len() != METRICS_CSV_HEADER.len() {
            return Err(IngestError::Csv {
                row: row_no,
                message: format!(
                    "expected {} fields, found {}",
                    METRICS_CSV_HEADER.len(),
                    row.len()
                ),
            });
        }
        let test_acc = match row[5].trim() {
            "" => None,
            s => Some(parse_field(s, "test_acc", row_no)?),
        };
        let rec = CheckpointRecord {
            run_id: row[0].to_string(),
            step: parse_field(&row[1], "step", row_no)?,
            ce: parse_field(&row[2], "ce", row_no)?,
            mmd: parse_field(&row[3], "mmd", row_no)?,
            acc: parse_field(&row[4], "acc", row_no)?,
            test_acc,
        };
        rec.validate().map_err(|e| IngestError::Csv {
            row: row_no,
            message: e.to_string(),
        })?;
        if !keys.insert((rec.run_id.clone(), rec.step)) {
            return Err(IngestError::Csv {
                row: row_no,
                message: format!("duplicate checkpoint {:?}@{}", rec.run_id, rec.step),
            });
        }
        records.push(rec);
    }
    if keys.is_empty() && records.is_empty() && rdr.position().line() == 1 {
        return Err(IngestError::Csv {
            row: 1,
            message: "missing header".into(),
        });
    }
    Ok(records)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<CheckpointRecord>> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_metrics_csv_from(BufReader::new(file))
}
