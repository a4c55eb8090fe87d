//! File-driven experiment pipeline: the TOML config schema, the
//! synth/train/finetune/report stages the command-line binary wraps, and
//! the run manifests that make every stage reproducible.
//!
//! Every seed is explicit in the config (or derived from the `--seed`
//! override); manifests record SHA-256 hashes of the inputs and outputs
//! and contain no timestamps, so re-running a stage with the same config
//! produces byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correction::{
    build_hard_table, CorrectedLabels, CorrectionError, CorrectionPolicy, HardGroup,
};
use crate::data::{
    global_stats, infer_vocabs, load_tsv, split_by_timestamp, synth_generate, train_pool,
    write_tsv, DataError, SynthConfig, TsvSchema, UserDataset, UserSplit,
};
use crate::eval::{
    auc, drift_buckets, parse_per_user_csv, per_user_csv, undefined_auc_count, user_avg_auc,
    win_tie_loss, EvalError, UserEval, WinTieLoss, TIE_TOLERANCE,
};
use crate::kernel::LossKind;
use crate::models::{
    load_checkpoint, save_checkpoint, ModelError, ModelKind, ModelParams, ModelSpec,
};
use crate::training::{
    finetune_user, run_lcft, train_cloud, OptKind, OptimizerConfig, TrainingError, UpdateScope,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(String),
}

impl PipelineError {
    /// Process exit code: 2 usage/config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Correction(CorrectionError::EmptyGrid) => 2,
            PipelineError::Data(_)
            | PipelineError::Io { .. }
            | PipelineError::MissingArtifact(_) => 3,
            PipelineError::Model(ModelError::Io { .. } | ModelError::Checkpoint(_)) => 3,
            _ => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

fn default_loss() -> String {
    "cross-entropy".to_string()
}

fn default_policies() -> Vec<String> {
    vec!["none".to_string(), "soft1".to_string()]
}

fn default_bucket_edges() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

fn default_embed_dim() -> usize {
    16
}

fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}

fn default_min_train() -> usize {
    8
}

fn default_one() -> f64 {
    1.0
}

fn default_scope() -> String {
    "all".to_string()
}

fn default_hard_alphas() -> Vec<f64> {
    (1..=12).map(|k| k as f64 * 0.25).collect()
}

fn default_hard_betas() -> Vec<f64> {
    vec![-0.5, -0.25, 0.0, 0.25]
}

fn default_hard_intervals() -> Vec<f64> {
    (0..=5).map(|k| k as f64 / 5.0).collect()
}

/// Root of the experiment config file (`schema = 1`).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Config format version; must be 1.
    pub schema: u32,
    #[serde(default = "default_loss")]
    pub loss: String,
    /// Samples with `timestamp <= split_cutoff` train; the rest test.
    pub split_cutoff: u64,
    #[serde(default = "default_policies")]
    pub policies: Vec<String>,
    #[serde(default = "default_bucket_edges")]
    pub bucket_edges: Vec<f64>,
    /// Model-initialization seed.
    #[serde(default)]
    pub init_seed: u64,
    /// Users need at least this many training samples to join the
    /// fine-tuning pool.
    #[serde(default = "default_min_train")]
    pub min_train_samples: usize,
    /// Worker threads for the fine-tuning fleet; 0 means all cores.
    /// Results are identical for any thread count.
    #[serde(default)]
    pub threads: usize,
    pub data: DataSection,
    pub model: ModelSection,
    pub cloud: OptSection,
    pub finetune: OptSection,
    #[serde(default)]
    pub hard: Option<HardSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `synth` (generated, written by the synth stage) or `tsv` (external).
    pub source: String,
    /// Path of the sample TSV when `source = "tsv"`.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub samples_per_user: [usize; 2],
    #[serde(default)]
    pub bias_location: f64,
    #[serde(default = "default_one")]
    pub bias_scale: f64,
    #[serde(default = "default_tail")]
    pub bias_tail_exponent: f64,
    #[serde(default = "default_one")]
    pub factor_scale: f64,
    #[serde(default = "default_user_factor_mean")]
    pub user_factor_mean: f64,
    #[serde(default = "default_max_history")]
    pub max_history: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_user_factor_mean() -> f64 {
    2.0
}

fn default_latent_dim() -> usize {
    8
}

fn default_tail() -> f64 {
    1.2
}

fn default_max_history() -> usize {
    crate::data::DEFAULT_MAX_HISTORY
}

impl SynthSection {
    pub fn to_config(&self) -> SynthConfig {
        SynthConfig {
            num_users: self.num_users,
            num_items: self.num_items,
            num_categories: self.num_categories,
            latent_dim: self.latent_dim,
            samples_per_user: (self.samples_per_user[0], self.samples_per_user[1]),
            bias_location: self.bias_location,
            bias_scale: self.bias_scale,
            bias_tail_exponent: self.bias_tail_exponent,
            factor_scale: self.factor_scale,
            user_factor_mean: self.user_factor_mean,
            max_history: self.max_history,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptSection {
    pub kind: String,
    pub learning_rate: f64,
    #[serde(default = "default_one")]
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// `all` or `embeddings-only`; fine-tune stage only.
    #[serde(default = "default_scope")]
    pub scope: String,
}

impl OptSection {
    pub fn to_config(&self) -> Result<OptimizerConfig, PipelineError> {
        let kind = match self.kind.as_str() {
            "sgd" => OptKind::Sgd,
            "adam" => OptKind::Adam,
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown optimizer kind '{other}'"
                )))
            }
        };
        let mut cfg = match kind {
            OptKind::Sgd => {
                OptimizerConfig::sgd(self.learning_rate, self.batch_size, self.epochs, self.seed)
            }
            OptKind::Adam => {
                OptimizerConfig::adam(self.learning_rate, self.batch_size, self.epochs, self.seed)
            }
        };
        cfg.lr_decay = self.lr_decay;
        cfg.validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn update_scope(&self) -> Result<UpdateScope, PipelineError> {
        match self.scope.as_str() {
            "all" => Ok(UpdateScope::AllTouched),
            "embeddings-only" => Ok(UpdateScope::EmbeddingsOnly),
            other => Err(PipelineError::Config(format!(
                "unknown update scope '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardSection {
    #[serde(default = "default_hard_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_hard_betas")]
    pub betas: Vec<f64>,
    /// Local-CTR interval edges for user grouping; must cover [0, 1].
    #[serde(default = "default_hard_intervals")]
    pub intervals: Vec<f64>,
}

impl HardSection {
    pub fn grid(&self) -> Vec<CorrectedLabels> {
        let mut grid = Vec::new();
        for &a in &self.alphas {
            for &b in &self.betas {
                if a > b {
                    grid.push(CorrectedLabels::new(a, b).expect("alpha > beta"));
                }
            }
        }
        grid
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.schema != 1 {
            return Err(PipelineError::Config(format!(
                "unsupported schema version {}",
                self.schema
            )));
        }
        self.loss_kind()?;
        self.model_kind()?;
        match self.data.source.as_str() {
            "synth" => {
                if self.data.synth.is_none() {
                    return Err(PipelineError::Config(
                        "data.source = \"synth\" needs a [data.synth] section".to_string(),
                    ));
                }
            }
            "tsv" => {
                if self.data.path.is_none() {
                    return Err(PipelineError::Config(
                        "data.source = \"tsv\" needs data.path".to_string(),
                    ));
                }
            }
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown data source '{other}'"
                )))
            }
        }
        let policies = self.policy_names()?;
        if !policies.iter().any(|p| p == "none") {
            return Err(PipelineError::Config(
                "policies must include \"none\" (the plain fine-tuning baseline)".to_string(),
            ));
        }
        if !policies.iter().any(|p| p != "none") {
            return Err(PipelineError::Config(
                "policies must include at least one correcting policy".to_string(),
            ));
        }
        if policies.iter().any(|p| p == "hard") && self.hard.is_none() {
            return Err(PipelineError::Config(
                "policy \"hard\" needs a [hard] section".to_string(),
            ));
        }
        self.cloud.to_config()?;
        self.finetune.to_config()?;
        self.finetune.update_scope()?;
        Ok(())
    }

    pub fn loss_kind(&self) -> Result<LossKind, PipelineError> {
        match self.loss.as_str() {
            "cross-entropy" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::MeanSquaredError),
            other => Err(PipelineError::Config(format!("unknown loss '{other}'"))),
        }
    }

    pub fn model_kind(&self) -> Result<ModelKind, PipelineError> {
        self.model
            .kind
            .parse()
            .map_err(|e: String| PipelineError::Config(e))
    }

    /// Validated policy names, deduplicated, in config order.
    pub fn policy_names(&self) -> Result<Vec<String>, PipelineError> {
        let mut seen = Vec::new();
        for name in &self.policies {
            let _: CorrectionPolicy = name.parse().map_err(|e: String| PipelineError::Config(e))?;
            if !seen.contains(name) {
                seen.push(name.clone());
            }
        }
        Ok(seen)
    }

    /// Applies the `--seed` override: synth, init, cloud, and fine-tune
    /// seeds become S, S+1, S+2, S+3.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(synth) = self.data.synth.as_mut() {
            synth.seed = seed;
        }
        self.init_seed = seed.wrapping_add(1);
        self.cloud.seed = seed.wrapping_add(2);
        self.finetune.seed = seed.wrapping_add(3);
    }

    /// Where the sample TSV lives for this config.
    pub fn data_path(&self, out: &Path) -> PathBuf {
        match self.data.source.as_str() {
            "tsv" => PathBuf::from(self.data.path.as_deref().expect("validated")),
            _ => out.join("data.tsv"),
        }
    }
}

// ---------------------------------------------------------------------------
// Hashing and manifests
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

/// Ordered key/value manifest; text, no timestamps.
fn write_manifest(path: &Path, entries: &[(&str, String)]) -> Result<(), PipelineError> {
    let mut out = String::from("schema = 1\n");
    for (k, v) in entries {
        writeln!(out, "{k} = {v}").expect("string write");
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_manifest_value(path: &Path, key: &str) -> Result<String, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix(key) {
            if let Some(v) = rest.trim_start().strip_prefix('=') {
                return Ok(v.trim().trim_matches('"').to_string());
            }
        }
    }
    Err(PipelineError::MissingArtifact(format!(
        "{} (key '{key}')",
        path.display()
    )))
}

// ---------------------------------------------------------------------------
// Stage: synth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub num_users: usize,
    pub num_samples: usize,
    pub global_ctr: f64,
    pub data_path: PathBuf,
    pub stats_path: PathBuf,
}

/// Generates the synthetic fleet and writes `data.tsv` plus a stats file
/// with the user count, global CTR, and local-CTR histogram.
pub fn run_synth(cfg: &ExperimentConfig, out: &Path) -> Result<SynthSummary, PipelineError> {
    let synth = cfg
        .data
        .synth
        .as_ref()
        .ok_or_else(|| PipelineError::Config("no [data.synth] section".to_string()))?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (datasets, _oracle) = synth_generate(&synth.to_config())?;
    let stats = global_stats(&datasets)?;
    let data_path = out.join("data.tsv");
    write_tsv(&data_path, &datasets)?;

    let edges = &cfg.bucket_edges;
    let mut counts = vec![0usize; edges.len() - 1];
    for ds in &datasets {
        let w = ds.local_ctr();
        let mut bucket = counts.len() - 1;
        for k in 0..counts.len() {
            if w >= edges[k] && w < edges[k + 1] {
                bucket = k;
                break;
            }
        }
        counts[bucket] += 1;
    }
    let num_samples: usize = datasets.iter().map(|d| d.len()).sum();
    let stats_path = out.join("synth_stats.txt");
    write_manifest(
        &stats_path,
        &[
            ("users", stats.num_users.to_string()),
            ("samples", num_samples.to_string()),
            ("global_ctr", stats.global_ctr.to_string()),
            (
                "histogram_edges",
                format!(
                    "[{}]",
                    edges
                        .iter()
                        .map(|e| e.to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            ),
            (
                "histogram_counts",
                format!(
                    "[{}]",
                    counts
                        .iter()
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            ),
            ("data_sha256", format!("\"{}\"", hash_file(&data_path)?)),
        ],
    )?;
    Ok(SynthSummary {
        num_users: stats.num_users,
        num_samples,
        global_ctr: stats.global_ctr,
        data_path,
        stats_path,
    })
}

/// The config invariant says referenced paths exist at run time; a missing
/// data file is a config error, not a data error.
fn existing_data_path(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, PipelineError> {
    let path = cfg.data_path(out);
    if !path.exists() {
        return Err(PipelineError::Config(format!(
            "data path {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

// ---------------------------------------------------------------------------
// Stage: train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epoch_losses: Vec<f64>,
    pub train_auc: Option<f64>,
    pub global_ctr: f64,
    pub pool_users: usize,
    pub pool_samples: usize,
    pub checkpoint_path: PathBuf,
    pub manifest_path: PathBuf,
}

fn model_spec(
    cfg: &ExperimentConfig,
    datasets: &[UserDataset],
) -> Result<ModelSpec, PipelineError> {
    let (user_vocab, item_vocab, cat_vocab) = infer_vocabs(datasets);
    Ok(ModelSpec {
        kind: cfg.model_kind()?,
        user_vocab,
        item_vocab,
        cat_vocab,
        embed_dim: cfg.model.embed_dim,
        hidden: cfg.model.hidden.clone(),
    })
}

/// Trains the global model over every user's train-side samples and writes
/// the checkpoint plus its manifest.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary, PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let data_path = existing_data_path(cfg, out)?;
    let datasets = load_tsv(&data_path, TsvSchema::V1)?;
    let pool = train_pool(&datasets, cfg.split_cutoff);
    let stats = global_stats(&pool)?;
    let spec = model_spec(cfg, &datasets)?;
    let opt = cfg.cloud.to_config()?;
    let loss = cfg.loss_kind()?;
    let result = train_cloud(&pool, &spec, &opt, loss, cfg.init_seed)?;

    // Pooled train AUC for the log.
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for ds in &pool {
        preds.extend(result.params.predict(ds.samples())?);
        labels.extend(ds.samples().iter().map(|s| s.label));
    }
    let train_auc = auc(&preds, &labels)?;

    let checkpoint_path = out.join("checkpoint.bin");
    save_checkpoint(&checkpoint_path, &result.params)?;
    let manifest_path = out.join("train_manifest.txt");
    write_manifest(
        &manifest_path,
        &[
            ("command", "\"train\"".to_string()),
            ("data_sha256", format!("\"{}\"", hash_file(&data_path)?)),
            ("split_cutoff", cfg.split_cutoff.to_string()),
            ("model_kind", format!("\"{}\"", spec.kind.name())),
            ("loss", format!("\"{}\"", loss.name())),
            ("init_seed", cfg.init_seed.to_string()),
            ("shuffle_seed", opt.seed.to_string()),
            ("global_ctr", stats.global_ctr.to_string()),
            (
                "epoch_losses",
                format!(
                    "[{}]",
                    result
                        .epoch_losses
                        .iter()
                        .map(|l| l.to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            ),
            (
                "train_auc",
                train_auc.map_or("\"NA\"".to_string(), |a| a.to_string()),
            ),
            (
                "checkpoint_sha256",
                format!("\"{}\"", hash_file(&checkpoint_path)?),
            ),
        ],
    )?;
    Ok(TrainSummary {
        epoch_losses: result.epoch_losses,
        train_auc,
        global_ctr: stats.global_ctr,
        pool_users: pool.len(),
        pool_samples: pool.iter().map(|d| d.len()).sum(),
        checkpoint_path,
        manifest_path,
    })
}

// ---------------------------------------------------------------------------
// Stage: finetune
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FinetuneSummary {
    /// (policy name, store path, users fine-tuned, failures).
    pub policies: Vec<(String, PathBuf, usize, usize)>,
    pub fleet_users: usize,
    pub global_ctr: f64,
    pub manifest_path: PathBuf,
}

fn eval_user(
    params: &ModelParams,
    split: &UserSplit,
    policy: &str,
    fallback: bool,
) -> Result<UserEval, PipelineError> {
    let preds = params.predict(&split.test)?;
    let labels: Vec<f64> = split.test.iter().map(|s| s.label).collect();
    Ok(UserEval {
        user_id: split.user_id(),
        test_size: split.test.len(),
        auc: auc(&preds, &labels)?,
        local_ctr: split.train.local_ctr(),
        policy: policy.to_string(),
        fallback,
    })
}

/// The evaluation fleet: users with both split sides and enough training
/// samples.
fn fleet_splits(cfg: &ExperimentConfig, datasets: &[UserDataset]) -> Vec<UserSplit> {
    split_by_timestamp(datasets, cfg.split_cutoff)
        .into_iter()
        .filter(|s| s.train.len() >= cfg.min_train_samples)
        .collect()
}

fn store_path(out: &Path, policy: &str) -> PathBuf {
    out.join(format!("store_{policy}.csv"))
}

/// Builds the hard-correction table by grid search over the fleet: users
/// grouped by train-side local CTR, each candidate scored by the held-out
/// user-level average AUC after fine-tuning the group with those labels.
fn build_hard_policy(
    cfg: &ExperimentConfig,
    splits: &[UserSplit],
    global: &ModelParams,
    global_ctr: f64,
    out: &Path,
) -> Result<CorrectionPolicy, PipelineError> {
    let section = cfg
        .hard
        .as_ref()
        .ok_or_else(|| PipelineError::Config("policy \"hard\" needs a [hard] section".into()))?;
    let edges = &section.intervals;
    if edges.len() < 2 || edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
        return Err(PipelineError::Config(
            "hard.intervals must cover [0, 1]".to_string(),
        ));
    }
    let opt = cfg.finetune.to_config()?;
    let loss = cfg.loss_kind()?;
    let scope = cfg.finetune.update_scope()?;

    let n_groups = edges.len() - 1;
    let mut members: Vec<Vec<&UserSplit>> = vec![Vec::new(); n_groups];
    for s in splits {
        let w = s.train.local_ctr();
        let mut g = n_groups - 1;
        for k in 0..n_groups {
            if w >= edges[k] && w < edges[k + 1] {
                g = k;
                break;
            }
        }
        members[g].push(s);
    }
    let groups: Vec<HardGroup> = (0..n_groups)
        .map(|g| {
            let n = members[g].len();
            let mean = if n == 0 {
                0.0
            } else {
                members[g].iter().map(|s| s.train.local_ctr()).sum::<f64>() / n as f64
            };
            HardGroup {
                lo: edges[g],
                hi: edges[g + 1],
                mean_local_ctr: mean,
                user_count: n,
            }
        })
        .collect();

    let table = build_hard_table(&groups, &section.grid(), global_ctr, |gi, labels| {
        let mut entries = Vec::new();
        for split in &members[gi] {
            let corrected = crate::correction::apply_correction(&split.train, &labels)?;
            let tuned = finetune_user(global, split.user_id(), &corrected, &opt, loss, scope)
                .map_err(|e| CorrectionError::Eval(e.to_string()))?;
            let entry = eval_user(&tuned.params, split, "hard-search", false)
                .map_err(|e| CorrectionError::Eval(e.to_string()))?;
            entries.push(entry);
        }
        // A group whose users all lack a defined AUC scores worst and the
        // alignment tie-break picks among candidates.
        Ok(user_avg_auc(&entries).unwrap_or(f64::NEG_INFINITY))
    })?;
    table.write_file(&out.join("hard_table.txt"))?;
    Ok(CorrectionPolicy::Hard(table))
}

/// Fine-tunes the fleet under every configured policy, evaluates each user
/// on the held-out side, and writes one per-user store per policy plus a
/// `cloud` baseline store.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    out: &Path,
    policy_filter: Option<&[String]>,
) -> Result<FinetuneSummary, PipelineError> {
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
        return pool.install(|| run_finetune_inner(cfg, out, policy_filter));
    }
    run_finetune_inner(cfg, out, policy_filter)
}

fn run_finetune_inner(
    cfg: &ExperimentConfig,
    out: &Path,
    policy_filter: Option<&[String]>,
) -> Result<FinetuneSummary, PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let checkpoint_path = out.join("checkpoint.bin");
    if !checkpoint_path.exists() {
        return Err(PipelineError::MissingArtifact(
            checkpoint_path.display().to_string(),
        ));
    }
    let global = load_checkpoint(&checkpoint_path)?;
    let data_path = existing_data_path(cfg, out)?;
    let datasets = load_tsv(&data_path, TsvSchema::V1)?;
    let pool = train_pool(&datasets, cfg.split_cutoff);
    let global_ctr = global_stats(&pool)?.global_ctr;
    let splits = fleet_splits(cfg, &datasets);
    if splits.is_empty() {
        return Err(PipelineError::Data(DataError::Empty));
    }
    let opt = cfg.finetune.to_config()?;
    let loss = cfg.loss_kind()?;
    let scope = cfg.finetune.update_scope()?;

    let policy_names = match policy_filter {
        Some(filter) => {
            let mut names = Vec::new();
            for name in filter {
                let _: CorrectionPolicy =
                    name.parse().map_err(|e: String| PipelineError::Config(e))?;
                if !names.contains(name) {
                    names.push(name.clone());
                }
            }
            names
        }
        None => cfg.policy_names()?,
    };

    // Cloud baseline: the un-tuned global model on every fleet user.
    let cloud_entries: Result<Vec<UserEval>, PipelineError> = splits
        .iter()
        .map(|s| eval_user(&global, s, "cloud", false))
        .collect();
    let cloud_entries = cloud_entries?;
    let cloud_store = store_path(out, "cloud");
    fs::write(&cloud_store, per_user_csv(&cloud_entries)).map_err(io_err(&cloud_store))?;

    let train_sets: Vec<UserDataset> = splits.iter().map(|s| s.train.clone()).collect();
    let by_id: BTreeMap<usize, &UserSplit> = splits.iter().map(|s| (s.user_id(), s)).collect();

    let mut summary = Vec::new();
    let mut manifest_entries: Vec<(&str, String)> = vec![
        ("command", "\"finetune\"".to_string()),
        (
            "checkpoint_sha256",
            format!("\"{}\"", hash_file(&checkpoint_path)?),
        ),
        ("data_sha256", format!("\"{}\"", hash_file(&data_path)?)),
        ("global_ctr", global_ctr.to_string()),
        ("fleet_users", splits.len().to_string()),
        ("finetune_seed", opt.seed.to_string()),
    ];

    for name in &policy_names {
        let policy = if name == "hard" {
            build_hard_policy(cfg, &splits, &global, global_ctr, out)?
        } else {
            name.parse::<CorrectionPolicy>()
                .map_err(PipelineError::Config)?
        };
        let fleet = run_lcft(&train_sets, &policy, &global, global_ctr, &opt, loss, scope);
        let mut entries = Vec::with_capacity(splits.len());
        for (user_id, result) in &fleet.results {
            entries.push(eval_user(&result.params, by_id[user_id], name, false)?);
        }
        for user_id in fleet.failures.keys() {
            entries.push(eval_user(&global, by_id[user_id], name, true)?);
        }
        entries.sort_by_key(|e| e.user_id);
        let path = store_path(out, name);
        fs::write(&path, per_user_csv(&entries)).map_err(io_err(&path))?;
        summary.push((
            name.clone(),
            path,
            fleet.results.len(),
            fleet.failures.len(),
        ));
    }

    let store_list = summary
        .iter()
        .map(|(n, _, _, _)| format!("\"{n}\""))
        .collect::<Vec<_>>()
        .join(", ");
    manifest_entries.push(("policies", format!("[{store_list}]")));
    for (name, path, _, failures) in &summary {
        manifest_entries.push((
            Box::leak(format!("store_{name}_sha256").into_boxed_str()),
            format!("\"{}\"", hash_file(path)?),
        ));
        if *failures > 0 {
            manifest_entries.push((
                Box::leak(format!("failures_{name}").into_boxed_str()),
                failures.to_string(),
            ));
        }
    }
    let manifest_path = out.join("finetune_manifest.txt");
    write_manifest(&manifest_path, &manifest_entries)?;
    Ok(FinetuneSummary {
        policies: summary,
        fleet_users: splits.len(),
        global_ctr,
        manifest_path,
    })
}

// ---------------------------------------------------------------------------
// Stage: report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PolicyRow {
    pub policy: String,
    pub auc_avg: f64,
    pub excluded_users: usize,
    pub vs_cloud: Option<String>,
    pub vs_local: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub rows: Vec<PolicyRow>,
    pub summary_path: PathBuf,
    pub per_user_path: PathBuf,
    pub fig2_path: PathBuf,
    pub fig3_path: PathBuf,
}

/// Relative improvement of `new` over `base`, Table-style: percent with
/// two decimals and an explicit sign.
pub fn relative_improvement_pct(new: f64, base: f64) -> String {
    format!("{:+.2}%", 100.0 * (new - base) / base)
}

fn load_store(out: &Path, policy: &str) -> Result<Vec<UserEval>, PipelineError> {
    let path = store_path(out, policy);
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.display().to_string()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(parse_per_user_csv(&text)?)
}

/// Reads the per-policy stores and emits the comparison CSVs: a summary
/// table (cloud vs local vs corrected policies with relative improvements),
/// the combined per-user rows, drift-bucket data, and win/tie/loss data.
pub fn run_report(cfg: &ExperimentConfig, out: &Path) -> Result<ReportSummary, PipelineError> {
    let global_ctr: f64 = read_manifest_value(&out.join("finetune_manifest.txt"), "global_ctr")?
        .parse()
        .map_err(|_| PipelineError::Config("bad global_ctr in finetune manifest".to_string()))?;
    let policy_names = cfg.policy_names()?;
    let cloud = load_store(out, "cloud")?;
    let local = load_store(out, "none")?;

    let mut stores: Vec<(String, Vec<UserEval>)> = vec![("cloud".to_string(), cloud.clone())];
    for name in &policy_names {
        stores.push((name.clone(), load_store(out, name)?));
    }

    let cloud_avg = user_avg_auc(&cloud)?;
    let local_avg = user_avg_auc(&local)?;

    let mut rows = Vec::new();
    let mut summary_csv = String::from(
        "policy,auc_avg,excluded_users,vs_cloud,vs_local,win_tie_loss_vs_cloud,win_tie_loss_vs_none\n",
    );
    let mut per_user_all = String::from("user_id,test_size,auc,local_ctr,policy,fallback\n");
    let mut fig2_csv =
        String::from("policy,bucket_lo,bucket_hi,users,mean_abs_drift,mean_improvement_vs_local\n");
    let mut fig3_csv = String::from("comparison,wins,ties,losses,win_prop,tie_prop,loss_prop\n");

    let push_fig3 = |label: &str, wtl: WinTieLoss, fig3_csv: &mut String| {
        let n = wtl.compared().max(1) as f64;
        writeln!(
            fig3_csv,
            "{label},{},{},{},{},{},{}",
            wtl.wins,
            wtl.ties,
            wtl.losses,
            wtl.wins as f64 / n,
            wtl.ties as f64 / n,
            wtl.losses as f64 / n
        )
        .expect("string write");
    };

    for (name, entries) in &stores {
        let avg = user_avg_auc(entries)?;
        let excluded = undefined_auc_count(entries);
        let vs_cloud = (name != "cloud").then(|| relative_improvement_pct(avg, cloud_avg));
        let vs_local =
            (name != "cloud" && name != "none").then(|| relative_improvement_pct(avg, local_avg));
        let wtl_str = |base: &[UserEval]| -> Result<String, PipelineError> {
            let wtl = win_tie_loss(entries, base, TIE_TOLERANCE)?;
            Ok(format!("{}/{}/{}", wtl.wins, wtl.ties, wtl.losses))
        };
        let wtl_cloud = if name != "cloud" {
            wtl_str(&cloud)?
        } else {
            "NA".to_string()
        };
        let wtl_local = if name != "cloud" && name != "none" {
            wtl_str(&local)?
        } else {
            "NA".to_string()
        };
        writeln!(
            summary_csv,
            "{name},{avg},{excluded},{},{},{wtl_cloud},{wtl_local}",
            vs_cloud.as_deref().unwrap_or("NA"),
            vs_local.as_deref().unwrap_or("NA")
        )
        .expect("string write");
        rows.push(PolicyRow {
            policy: name.clone(),
            auc_avg: avg,
            excluded_users: excluded,
            vs_cloud,
            vs_local,
        });

        for line in per_user_csv(entries).lines().skip(1) {
            per_user_all.push_str(line);
            per_user_all.push('\n');
        }

        if name != "cloud" {
            push_fig3(
                &format!("{name}-vs-cloud"),
                win_tie_loss(entries, &cloud, TIE_TOLERANCE)?,
                &mut fig3_csv,
            );
        }
        if name != "cloud" && name != "none" {
            push_fig3(
                &format!("{name}-vs-none"),
                win_tie_loss(entries, &local, TIE_TOLERANCE)?,
                &mut fig3_csv,
            );
            for b in drift_buckets(entries, &local, &cfg.bucket_edges, global_ctr)? {
                writeln!(
                    fig2_csv,
                    "{name},{},{},{},{},{}",
                    b.lo, b.hi, b.count, b.mean_abs_drift, b.mean_improvement
                )
                .expect("string write");
            }
        }
    }

    let summary_path = out.join("report_summary.csv");
    let per_user_path = out.join("report_per_user.csv");
    let fig2_path = out.join("fig2_data.csv");
    let fig3_path = out.join("fig3_data.csv");
    fs::write(&summary_path, summary_csv).map_err(io_err(&summary_path))?;
    fs::write(&per_user_path, per_user_all).map_err(io_err(&per_user_path))?;
    fs::write(&fig2_path, fig2_csv).map_err(io_err(&fig2_path))?;
    fs::write(&fig3_path, fig3_csv).map_err(io_err(&fig3_path))?;
    write_manifest(
        &out.join("report_manifest.txt"),
        &[
            ("command", "\"report\"".to_string()),
            (
                "summary_sha256",
                format!("\"{}\"", hash_file(&summary_path)?),
            ),
            (
                "per_user_sha256",
                format!("\"{}\"", hash_file(&per_user_path)?),
            ),
            ("fig2_sha256", format!("\"{}\"", hash_file(&fig2_path)?)),
            ("fig3_sha256", format!("\"{}\"", hash_file(&fig3_path)?)),
        ],
    )?;
    Ok(ReportSummary {
        rows,
        summary_path,
        per_user_path,
        fig2_path,
        fig3_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema = 1
split_cutoff = 20

[data]
source = "synth"

[data.synth]
num_users = 30
num_items = 20
num_categories = 5
samples_per_user = [24, 30]

[model]
kind = "lr"
embed_dim = 4
hidden = []

[cloud]
kind = "sgd"
learning_rate = 0.1
batch_size = 16
epochs = 2

[finetune]
kind = "sgd"
learning_rate = 0.05
batch_size = 8
epochs = 1
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.schema, 1);
        assert_eq!(cfg.loss_kind().unwrap(), LossKind::CrossEntropy);
        assert_eq!(cfg.policy_names().unwrap(), vec!["none", "soft1"]);
        assert_eq!(cfg.min_train_samples, 8);
        assert_eq!(cfg.bucket_edges.len(), 11);
    }

    #[test]
    fn schema_version_is_enforced() {
        let text = MINIMAL.replace("schema = 1", "schema = 2");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(PipelineError::Config(_))
        ));
    }

    fn with_top_level(extra: &str) -> String {
        MINIMAL.replace("split_cutoff = 20", &format!("split_cutoff = 20\n{extra}"))
    }

    #[test]
    fn policies_must_include_none_and_a_correction() {
        assert!(ExperimentConfig::from_toml_str(&with_top_level("policies = [\"none\"]")).is_err());
        assert!(
            ExperimentConfig::from_toml_str(&with_top_level("policies = [\"soft1\"]")).is_err()
        );
        assert!(ExperimentConfig::from_toml_str(&with_top_level(
            "policies = [\"none\", \"soft2\"]"
        ))
        .is_ok());
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        assert!(matches!(
            ExperimentConfig::from_toml_str(&with_top_level("bogus_field = 3")),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn seed_override_touches_every_stage_seed() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.override_seed(100);
        assert_eq!(cfg.data.synth.as_ref().unwrap().seed, 100);
        assert_eq!(cfg.init_seed, 101);
        assert_eq!(cfg.cloud.seed, 102);
        assert_eq!(cfg.finetune.seed, 103);
    }

    #[test]
    fn improvement_formatting_matches_convention() {
        assert_eq!(relative_improvement_pct(0.660, 0.652), "+1.23%");
        assert_eq!(relative_improvement_pct(0.652, 0.652), "+0.00%");
        assert_eq!(relative_improvement_pct(0.610, 0.614), "-0.65%");
    }

    #[test]
    fn pipeline_end_to_end_and_idempotent() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let dir = std::env::temp_dir().join("lcft-pipeline-test");
        let _ = fs::remove_dir_all(&dir);

        let synth = run_synth(&cfg, &dir).unwrap();
        assert_eq!(synth.num_users, 30);
        // Stats file global CTR equals global_stats of the written TSV.
        let back = load_tsv(&synth.data_path, TsvSchema::V1).unwrap();
        let recomputed = global_stats(&back).unwrap().global_ctr;
        let stored: f64 = read_manifest_value(&synth.stats_path, "global_ctr")
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(stored.to_bits(), recomputed.to_bits());

        let train = run_train(&cfg, &dir).unwrap();
        assert_eq!(train.epoch_losses.len(), 2);
        let tune = run_finetune(&cfg, &dir, None).unwrap();
        assert!(tune.fleet_users > 0);
        let report = run_report(&cfg, &dir).unwrap();
        assert_eq!(report.rows.len(), 3); // cloud, none, soft1

        // Re-running every stage reproduces identical output hashes.
        let h1 = [
            hash_file(&dir.join("checkpoint.bin")).unwrap(),
            hash_file(&dir.join("store_none.csv")).unwrap(),
            hash_file(&dir.join("store_soft1.csv")).unwrap(),
            hash_file(&dir.join("report_summary.csv")).unwrap(),
        ];
        run_train(&cfg, &dir).unwrap();
        run_finetune(&cfg, &dir, None).unwrap();
        run_report(&cfg, &dir).unwrap();
        let h2 = [
            hash_file(&dir.join("checkpoint.bin")).unwrap(),
            hash_file(&dir.join("store_none.csv")).unwrap(),
            hash_file(&dir.join("store_soft1.csv")).unwrap(),
            hash_file(&dir.join("report_summary.csv")).unwrap(),
        ];
        assert_eq!(h1, h2);
    }

    #[test]
    fn comparing_a_store_to_itself_reports_zero_improvement() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let dir = std::env::temp_dir().join("lcft-pipeline-self");
        let _ = fs::remove_dir_all(&dir);
        run_synth(&cfg, &dir).unwrap();
        run_train(&cfg, &dir).unwrap();
        run_finetune(&cfg, &dir, None).unwrap();
        // Overwrite the soft1 store with the none store, policy renamed:
        // all improvements vs local must read +0.00%.
        let mut entries = load_store(&dir, "none").unwrap();
        for e in &mut entries {
            e.policy = "soft1".to_string();
        }
        fs::write(store_path(&dir, "soft1"), per_user_csv(&entries)).unwrap();
        let report = run_report(&cfg, &dir).unwrap();
        let soft1 = report.rows.iter().find(|r| r.policy == "soft1").unwrap();
        assert_eq!(soft1.vs_local.as_deref(), Some("+0.00%"));
        // fig3 proportions sum to 1 per comparison.
        let fig3 = fs::read_to_string(&report.fig3_path).unwrap();
        for line in fig3.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let total: f64 = f[4].parse::<f64>().unwrap()
                + f[5].parse::<f64>().unwrap()
                + f[6].parse::<f64>().unwrap();
            assert!((total - 1.0).abs() < 1e-12, "{line}");
        }
    }

    #[test]
    fn hard_policy_builds_and_applies_a_table() {
        let text = MINIMAL
            .replace(
                "split_cutoff = 20",
                "split_cutoff = 20\npolicies = [\"none\", \"hard\"]\n\n[hard]\nalphas = [1.0, 2.0]\nbetas = [0.0]\nintervals = [0.0, 0.5, 1.0]",
            )
            .replace("num_users = 30", "num_users = 12");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let dir = std::env::temp_dir().join("lcft-pipeline-hard");
        let _ = fs::remove_dir_all(&dir);
        run_synth(&cfg, &dir).unwrap();
        run_train(&cfg, &dir).unwrap();
        let summary = run_finetune(&cfg, &dir, None).unwrap();
        assert!(summary.policies.iter().any(|(n, _, _, _)| n == "hard"));
        assert!(dir.join("store_hard.csv").exists());
        // The written table parses back and partitions [0, 1] with the
        // configured interval edges.
        let table = crate::correction::CorrectionTable::read_file(&dir.join("hard_table.txt"))
            .expect("table parses");
        assert_eq!(table.entries().len(), 2);
        assert_eq!(table.entries()[0].lo, 0.0);
        assert_eq!(table.entries()[0].hi, 0.5);
        assert_eq!(table.entries()[1].hi, 1.0);
        let report = run_report(&cfg, &dir).unwrap();
        assert!(report.rows.iter().any(|r| r.policy == "hard"));
    }

    #[test]
    fn soft1_store_is_byte_identical_to_none_on_a_zero_drift_fleet() {
        // Every user's train side is exactly half positive, so each local
        // CTR equals the global CTR and soft1 degenerates to identity
        // labels; the per-user stores must then match byte for byte.
        let dir = std::env::temp_dir().join("lcft-pipeline-zero-drift");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let mut tsv = String::new();
        for uid in 0..5 {
            for k in 0..20 {
                let item = (uid * 3 + k) % 11;
                tsv.push_str(&format!("{uid}\t{item}\t{}\t-\t{}\t{k}\n", item % 4, k % 2));
            }
            for k in 0..4 {
                let item = (uid + k) % 11;
                tsv.push_str(&format!(
                    "{uid}\t{item}\t{}\t-\t{}\t{}\n",
                    item % 4,
                    (uid + k) % 2,
                    100 + k
                ));
            }
        }
        let tsv_path = dir.join("fleet.tsv");
        fs::write(&tsv_path, tsv).unwrap();
        let text = MINIMAL
            .replace(
                "source = \"synth\"",
                &format!("source = \"tsv\"\npath = \"{}\"", tsv_path.display()),
            )
            .replace("split_cutoff = 20", "split_cutoff = 50");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        run_train(&cfg, &dir).unwrap();
        run_finetune(&cfg, &dir, None).unwrap();
        let none = fs::read_to_string(dir.join("store_none.csv")).unwrap();
        let soft1 = fs::read_to_string(dir.join("store_soft1.csv")).unwrap();
        assert_eq!(none.replace(",none,", ",soft1,"), soft1);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let dir1 = std::env::temp_dir().join("lcft-pipeline-threads-1");
        let dir2 = std::env::temp_dir().join("lcft-pipeline-threads-4");
        for (dir, threads) in [(&dir1, "1"), (&dir2, "4")] {
            let _ = fs::remove_dir_all(dir);
            let text = MINIMAL.replace(
                "split_cutoff = 20",
                &format!("split_cutoff = 20\nthreads = {threads}"),
            );
            let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
            run_synth(&cfg, dir).unwrap();
            run_train(&cfg, dir).unwrap();
            run_finetune(&cfg, dir, None).unwrap();
        }
        for f in ["store_none.csv", "store_soft1.csv"] {
            assert_eq!(
                hash_file(&dir1.join(f)).unwrap(),
                hash_file(&dir2.join(f)).unwrap(),
                "{f} differs across thread counts"
            );
        }
    }

    #[test]
    fn missing_store_is_reported() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let dir = std::env::temp_dir().join("lcft-pipeline-missing");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        assert!(matches!(
            run_report(&cfg, &dir),
            Err(PipelineError::MissingArtifact(_) | PipelineError::Io { .. })
        ));
    }
}
