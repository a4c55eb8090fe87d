//! Ranking evaluation: per-user AUC, the test-size-weighted average AUC,
//! drift-bucket improvement tables, win/tie/loss proportions, and plain
//! CTR-order ranking.
//!
//! AUC uses the rank-sum formulation with tied predictions counted half.
//! Ranks of a tie group average to a multiple of one half, so the sum of
//! doubled ranks stays integral and the result is exact: it equals the
//! brute-force pair count bit for bit.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum EvalError {
    #[error("labels must be 0 or 1, got {0}")]
    NonBinaryLabel(f64),
    #[error("predictions and labels disagree in length: {preds} vs {labels}")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("non-finite prediction")]
    NonFinite,
    #[error("entry user sets do not match")]
    UserSetMismatch,
    #[error("no user with a defined AUC")]
    NoDefinedAuc,
    #[error("bucket edges must strictly increase from 0 to 1, got {0:?}")]
    BadEdges(Vec<f64>),
    #[error("duplicate item id {0}")]
    DuplicateItem(usize),
}

/// Probability that a random positive outranks a random negative, ties
/// counted half; `None` when the batch has a single class.
pub fn auc(predictions: &[f64], labels: &[f64]) -> Result<Option<f64>, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut n_pos = 0u64;
    let mut n_neg = 0u64;
    for (&p, &y) in predictions.iter().zip(labels) {
        if !p.is_finite() {
            return Err(EvalError::NonFinite);
        }
        if y == 1.0 {
            n_pos += 1;
        } else if y == 0.0 {
            n_neg += 1;
        } else {
            return Err(EvalError::NonBinaryLabel(y));
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[a]
            .partial_cmp(&predictions[b])
            .expect("finite predictions")
    });
    // Walk tie groups; each member's doubled average 1-based rank is
    // (first + last + 2), an integer, so the sum stays exact.
    let mut rank2_pos = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && predictions[order[j + 1]] == predictions[order[i]] {
            j += 1;
        }
        let rank2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if labels[k] == 1.0 {
                rank2_pos += rank2;
            }
        }
        i = j + 1;
    }
    let numer = rank2_pos - n_pos * (n_pos + 1);
    Ok(Some(numer as f64 / (2 * n_pos * n_neg) as f64))
}

/// One user's evaluation entry.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEval {
    pub user_id: usize,
    /// Test-set size m_i, the AUC weight.
    pub test_size: usize,
    /// `None` when the user's test set has a single class.
    pub auc: Option<f64>,
    pub local_ctr: f64,
    pub policy: String,
    /// True when fine-tuning failed and the global model was used instead.
    pub fallback: bool,
}

/// Test-size-weighted mean AUC over users with a defined AUC.
pub fn user_avg_auc(entries: &[UserEval]) -> Result<f64, EvalError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for e in entries {
        if let Some(a) = e.auc {
            num += e.test_size as f64 * a;
            den += e.test_size as f64;
        }
    }
    if den == 0.0 {
        return Err(EvalError::NoDefinedAuc);
    }
    Ok(num / den)
}

/// Users excluded from the weighted average (single-class test sets).
pub fn undefined_auc_count(entries: &[UserEval]) -> usize {
    entries.iter().filter(|e| e.auc.is_none()).count()
}

/// One local-CTR interval of a drift-bucket comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftBucket {
    pub lo: f64,
    pub hi: f64,
    /// Users with a defined AUC on both sides that fall in the interval.
    pub count: usize,
    /// Mean (auc_a - auc_b) over those users; 0 for an empty bucket.
    pub mean_improvement: f64,
    /// Mean |local_ctr - global_ctr| of those users.
    pub mean_abs_drift: f64,
}

fn check_same_users(a: &[UserEval], b: &[UserEval]) -> Result<(), EvalError> {
    let ids_a: BTreeSet<usize> = a.iter().map(|e| e.user_id).collect();
    let ids_b: BTreeSet<usize> = b.iter().map(|e| e.user_id).collect();
    if ids_a != ids_b || a.len() != b.len() {
        return Err(EvalError::UserSetMismatch);
    }
    Ok(())
}

fn paired<'a>(
    a: &'a [UserEval],
    b: &'a [UserEval],
) -> impl Iterator<Item = (&'a UserEval, &'a UserEval)> {
    let mut sa: Vec<&UserEval> = a.iter().collect();
    let mut sb: Vec<&UserEval> = b.iter().collect();
    sa.sort_by_key(|e| e.user_id);
    sb.sort_by_key(|e| e.user_id);
    sa.into_iter().zip(sb)
}

/// Buckets users by local CTR and averages the per-user AUC difference
/// (a minus b) within each bucket. Edges must strictly increase and cover
/// [0, 1]; intervals are half-open with the last closed.
pub fn drift_buckets(
    entries_a: &[UserEval],
    entries_b: &[UserEval],
    edges: &[f64],
    global_ctr: f64,
) -> Result<Vec<DriftBucket>, EvalError> {
    check_same_users(entries_a, entries_b)?;
    if edges.len() < 2
        || edges[0] != 0.0
        || edges[edges.len() - 1] != 1.0
        || edges.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(EvalError::BadEdges(edges.to_vec()));
    }
    let n_buckets = edges.len() - 1;
    let mut sum = vec![0.0; n_buckets];
    let mut drift = vec![0.0; n_buckets];
    let mut count = vec![0usize; n_buckets];
    for (ea, eb) in paired(entries_a, entries_b) {
        let (Some(auc_a), Some(auc_b)) = (ea.auc, eb.auc) else {
            continue;
        };
        let w = ea.local_ctr;
        let mut bucket = n_buckets - 1;
        for k in 0..n_buckets {
            if w >= edges[k] && w < edges[k + 1] {
                bucket = k;
                break;
            }
        }
        sum[bucket] += auc_a - auc_b;
        drift[bucket] += (w - global_ctr).abs();
        count[bucket] += 1;
    }
    Ok((0..n_buckets)
        .map(|k| DriftBucket {
            lo: edges[k],
            hi: edges[k + 1],
            count: count[k],
            mean_improvement: if count[k] > 0 {
                sum[k] / count[k] as f64
            } else {
                0.0
            },
            mean_abs_drift: if count[k] > 0 {
                drift[k] / count[k] as f64
            } else {
                0.0
            },
        })
        .collect())
}

/// Per-user comparison counts at a tie tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinTieLoss {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl WinTieLoss {
    pub fn compared(&self) -> usize {
        self.wins + self.ties + self.losses
    }
}

/// Default tolerance under which two per-user AUCs count as a tie.
pub const TIE_TOLERANCE: f64 = 1e-6;

/// Counts users where a's AUC beats, ties, or loses to b's. Users without
/// a defined AUC on both sides are skipped.
pub fn win_tie_loss(
    entries_a: &[UserEval],
    entries_b: &[UserEval],
    tie_tolerance: f64,
) -> Result<WinTieLoss, EvalError> {
    check_same_users(entries_a, entries_b)?;
    let mut out = WinTieLoss {
        wins: 0,
        ties: 0,
        losses: 0,
    };
    for (ea, eb) in paired(entries_a, entries_b) {
        let (Some(a), Some(b)) = (ea.auc, eb.auc) else {
            continue;
        };
        if (a - b).abs() <= tie_tolerance {
            out.ties += 1;
        } else if a > b {
            out.wins += 1;
        } else {
            out.losses += 1;
        }
    }
    Ok(out)
}

/// A candidate-ranking scenario: item ids with true and predicted CTRs.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingCase {
    pub item_ids: Vec<usize>,
    pub true_ctrs: Vec<f64>,
    pub predicted_ctrs: Vec<f64>,
}

/// Which CTR column a ranking sorts by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankBy {
    TrueCtr,
    Predicted,
}

/// Item ids in descending CTR order, ties broken by ascending id.
pub fn ranking_order(case: &RankingCase, by: RankBy) -> Result<Vec<usize>, EvalError> {
    let mut seen = BTreeSet::new();
    for &id in &case.item_ids {
        if !seen.insert(id) {
            return Err(EvalError::DuplicateItem(id));
        }
    }
    let ctrs = match by {
        RankBy::TrueCtr => &case.true_ctrs,
        RankBy::Predicted => &case.predicted_ctrs,
    };
    if ctrs.len() != case.item_ids.len() {
        return Err(EvalError::LengthMismatch {
            preds: ctrs.len(),
            labels: case.item_ids.len(),
        });
    }
    if ctrs.iter().any(|c| !c.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mut order: Vec<usize> = (0..case.item_ids.len()).collect();
    order.sort_by(|&a, &b| {
        ctrs[b]
            .partial_cmp(&ctrs[a])
            .expect("finite ctrs")
            .then(case.item_ids[a].cmp(&case.item_ids[b]))
    });
    Ok(order.into_iter().map(|i| case.item_ids[i]).collect())
}

/// Aggregated comparison of one policy's entries against a named baseline.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_user: Vec<UserEval>,
    pub auc_avg: f64,
    /// Users excluded from the average for lacking a defined AUC.
    pub excluded_users: usize,
    pub baseline: String,
    pub buckets: Vec<DriftBucket>,
    pub win_tie_loss: WinTieLoss,
}

/// Builds the full report of `entries` against `baseline_entries`.
pub fn build_report(
    entries: &[UserEval],
    baseline_entries: &[UserEval],
    baseline_name: &str,
    bucket_edges: &[f64],
    global_ctr: f64,
) -> Result<EvalReport, EvalError> {
    Ok(EvalReport {
        per_user: entries.to_vec(),
        auc_avg: user_avg_auc(entries)?,
        excluded_users: undefined_auc_count(entries),
        baseline: baseline_name.to_string(),
        buckets: drift_buckets(entries, baseline_entries, bucket_edges, global_ctr)?,
        win_tie_loss: win_tie_loss(entries, baseline_entries, TIE_TOLERANCE)?,
    })
}

/// Per-user entries as CSV: `user_id,test_size,auc,local_ctr,policy,fallback`.
/// Undefined AUCs are written as `NA`.
pub fn per_user_csv(entries: &[UserEval]) -> String {
    let mut out = String::from("user_id,test_size,auc,local_ctr,policy,fallback\n");
    for e in entries {
        let auc = match e.auc {
            Some(a) => a.to_string(),
            None => "NA".to_string(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.user_id, e.test_size, auc, e.local_ctr, e.policy, e.fallback
        )
        .expect("string write");
    }
    out
}

/// Parses the per-user CSV written by [`per_user_csv`].
pub fn parse_per_user_csv(text: &str) -> Result<Vec<UserEval>, EvalError> {
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(EvalError::LengthMismatch {
                preds: f.len(),
                labels: 6,
            });
        }
        let parse_err = |_| EvalError::NonFinite;
        out.push(UserEval {
            user_id: f[0].parse().map_err(parse_err)?,
            test_size: f[1].parse().map_err(parse_err)?,
            auc: if f[2] == "NA" {
                None
            } else {
                Some(f[2].parse::<f64>().map_err(|_| EvalError::NonFinite)?)
            },
            local_ctr: f[3].parse().map_err(|_| EvalError::NonFinite)?,
            policy: f[4].to_string(),
            fallback: f[5] == "true",
        });
    }
    Ok(out)
}
