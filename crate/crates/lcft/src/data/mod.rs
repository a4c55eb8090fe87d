//! Impression samples, per-user datasets and their frozen CTR statistics,
//! TSV ingestion, and timestamp splits.
//!
//! Local CTR statistics are computed once, on the raw binary labels, and
//! never recomputed: label correction rewrites labels but the correction
//! math is defined in terms of the original positive ratio.

mod synth;

pub use synth::{synth_generate, SynthConfig, TrueCtrOracle};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Default cap on history length; loading and generation keep the most
/// recent entries and drop the oldest.
pub const DEFAULT_MAX_HISTORY: usize = 50;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("non-binary raw label {label} at line {line}")]
    NonBinaryLabel { line: usize, label: f64 },
    #[error("dataset has no samples")]
    Empty,
    #[error("degenerate label pool: all samples are {0}")]
    SingleClass(&'static str),
    #[error("invalid generator config: {0}")]
    Config(String),
}

/// One impression: who saw what, what they had clicked before, and whether
/// they clicked this time.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub user_id: usize,
    pub item_id: usize,
    pub category_id: usize,
    /// Previously clicked item ids, oldest first.
    pub history: Vec<usize>,
    /// Raw labels are exactly 0 or 1; corrected labels may be any real.
    pub label: f64,
    pub timestamp: u64,
}

/// A user's local samples plus CTR statistics frozen at ingestion.
#[derive(Debug, Clone)]
pub struct UserDataset {
    user_id: usize,
    samples: Vec<Sample>,
    n_pos: usize,
    n_neg: usize,
}

impl UserDataset {
    /// Builds a dataset and freezes its statistics. Every label must be
    /// exactly 0 or 1.
    pub fn from_samples(user_id: usize, samples: Vec<Sample>) -> Result<Self, DataError> {
        let mut n_pos = 0;
        let mut n_neg = 0;
        for s in &samples {
            if s.label == 1.0 {
                n_pos += 1;
            } else if s.label == 0.0 {
                n_neg += 1;
            } else {
                return Err(DataError::NonBinaryLabel {
                    line: 0,
                    label: s.label,
                });
            }
        }
        Ok(UserDataset {
            user_id,
            samples,
            n_pos,
            n_neg,
        })
    }

    pub fn user_id(&self) -> usize {
        self.user_id
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn n_neg(&self) -> usize {
        self.n_neg
    }

    /// Positive ratio of the raw labels, `n_pos / (n_pos + n_neg)`.
    pub fn local_ctr(&self) -> f64 {
        self.n_pos as f64 / (self.n_pos + self.n_neg) as f64
    }
}

/// Pooled statistics over every user's dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalStats {
    pub num_users: usize,
    pub total_pos: usize,
    pub total_neg: usize,
    /// Pooled positive ratio, strictly inside (0, 1).
    pub global_ctr: f64,
}

/// Pooled positive ratio and user count. All-positive and all-negative
/// pools are rejected: a global CTR of 0 or 1 leaves no alignment target.
pub fn global_stats(datasets: &[UserDataset]) -> Result<GlobalStats, DataError> {
    let mut pos = 0;
    let mut neg = 0;
    for ds in datasets {
        pos += ds.n_pos;
        neg += ds.n_neg;
    }
    if pos + neg == 0 {
        return Err(DataError::Empty);
    }
    if neg == 0 {
        return Err(DataError::SingleClass("positive"));
    }
    if pos == 0 {
        return Err(DataError::SingleClass("negative"));
    }
    Ok(GlobalStats {
        num_users: datasets.len(),
        total_pos: pos,
        total_neg: neg,
        global_ctr: pos as f64 / (pos + neg) as f64,
    })
}

/// Versioned layout of the sample TSV format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsvSchema {
    /// `user_id \t item_id \t category_id \t hist|hist|... \t label \t timestamp`,
    /// empty history written as `-`.
    V1,
}

/// Loads a sample TSV and groups it into per-user datasets in ascending
/// user-id order. Histories longer than [`DEFAULT_MAX_HISTORY`] keep the
/// most recent entries.
pub fn load_tsv(path: &Path, schema: TsvSchema) -> Result<Vec<UserDataset>, DataError> {
    let TsvSchema::V1 = schema;
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut by_user: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected 6 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_id = |s: &str, what: &str| -> Result<usize, DataError> {
            s.parse::<usize>().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("invalid {what} '{s}'"),
            })
        };
        let user_id = parse_id(fields[0], "user id")?;
        let item_id = parse_id(fields[1], "item id")?;
        let category_id = parse_id(fields[2], "category id")?;
        let mut history = if fields[3] == "-" {
            Vec::new()
        } else {
            fields[3]
                .split('|')
                .map(|t| parse_id(t, "history id"))
                .collect::<Result<Vec<_>, _>>()?
        };
        if history.len() > DEFAULT_MAX_HISTORY {
            history.drain(..history.len() - DEFAULT_MAX_HISTORY);
        }
        let label: f64 = fields[4].parse().map_err(|_| DataError::Parse {
            line: line_no,
            message: format!("invalid label '{}'", fields[4]),
        })?;
        if label != 0.0 && label != 1.0 {
            return Err(DataError::NonBinaryLabel {
                line: line_no,
                label,
            });
        }
        let timestamp: u64 = fields[5].parse().map_err(|_| DataError::Parse {
            line: line_no,
            message: format!("invalid timestamp '{}'", fields[5]),
        })?;
        by_user.entry(user_id).or_default().push(Sample {
            user_id,
            item_id,
            category_id,
            history,
            label,
            timestamp,
        });
    }
    by_user
        .into_iter()
        .map(|(user_id, samples)| UserDataset::from_samples(user_id, samples))
        .collect()
}

/// Writes datasets back out in the V1 TSV layout, users in given order.
pub fn write_tsv(path: &Path, datasets: &[UserDataset]) -> Result<(), DataError> {
    let mut out = String::new();
    for ds in datasets {
        for s in &ds.samples {
            let hist = if s.history.is_empty() {
                "-".to_string()
            } else {
                s.history
                    .iter()
                    .map(|h| h.to_string())
                    .collect::<Vec<_>>()
                    .join("|")
            };
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                s.user_id, s.item_id, s.category_id, hist, s.label, s.timestamp
            )
            .expect("string write");
        }
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// One user's train/test split; only users with samples on both sides of
/// the cutoff appear in the output.
#[derive(Debug, Clone)]
pub struct UserSplit {
    /// Fine-tuning side (timestamp <= cutoff), with freshly frozen stats.
    pub train: UserDataset,
    /// Held-out side (timestamp > cutoff), labels untouched.
    pub test: Vec<Sample>,
}

impl UserSplit {
    pub fn user_id(&self) -> usize {
        self.train.user_id()
    }
}

/// Splits each user at the timestamp cutoff. Users with an empty train or
/// test side are dropped from the evaluation pool.
pub fn split_by_timestamp(datasets: &[UserDataset], cutoff: u64) -> Vec<UserSplit> {
    let mut out = Vec::new();
    for ds in datasets {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in &ds.samples {
            if s.timestamp <= cutoff {
                train.push(s.clone());
            } else {
                test.push(s.clone());
            }
        }
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let train = UserDataset::from_samples(ds.user_id, train)
            .expect("raw labels already validated at ingestion");
        out.push(UserSplit { train, test });
    }
    out
}

/// Smallest vocabulary sizes (users, items, categories) covering every id
/// in the datasets, histories included.
pub fn infer_vocabs(datasets: &[UserDataset]) -> (usize, usize, usize) {
    let mut user = 0;
    let mut item = 0;
    let mut cat = 0;
    for ds in datasets {
        for s in &ds.samples {
            user = user.max(s.user_id + 1);
            item = item.max(s.item_id + 1);
            cat = cat.max(s.category_id + 1);
            for &h in &s.history {
                item = item.max(h + 1);
            }
        }
    }
    (user, item, cat)
}

/// Train-side datasets of every user with at least one sample at or before
/// the cutoff. This is the cloud-training pool: users without test data
/// still contribute their impressions to the global model.
pub fn train_pool(datasets: &[UserDataset], cutoff: u64) -> Vec<UserDataset> {
    let mut out = Vec::new();
    for ds in datasets {
        let train: Vec<Sample> = ds
            .samples
            .iter()
            .filter(|s| s.timestamp <= cutoff)
            .cloned()
            .collect();
        if train.is_empty() {
            continue;
        }
        out.push(
            UserDataset::from_samples(ds.user_id, train)
                .expect("raw labels already validated at ingestion"),
        );
    }
    out
}
