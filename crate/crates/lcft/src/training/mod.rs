//! Cloud-phase training over pooled data, per-user fine-tuning, and the
//! label-corrected fleet loop.
//!
//! The cloud phase fits one global model over every user's training samples
//! with raw labels. Fine-tuning copies those parameters per user, rewrites
//! the user's labels under a correction policy, and continues optimizing on
//! the local samples only. Users are independent: each gets its own
//! shuffle stream seeded from (seed, user_id), so a user's result does not
//! depend on which other users run in the same fleet.

mod optim;

pub use optim::{adam_step, sgd_step, OptKind, OptState, OptimizerConfig};

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_pcg::Pcg64Mcg;
use rayon::prelude::*;
use thiserror::Error;

use crate::correction::{apply_correction, CorrectionError, CorrectionPolicy};
use crate::data::{Sample, UserDataset};
use crate::kernel::{Gradients, KernelError, LossKind, Tensor};
use crate::models::{ModelError, ModelParams, ModelSpec, TouchedSet};

#[derive(Debug, Clone, Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("divergence at step {step}: {message}")]
    Divergence { step: usize, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error("model error: {0}")]
    Model(String),
}

/// Which parameters fine-tuning may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateScope {
    /// Every parameter reached by a gradient (embeddings and dense layers).
    #[default]
    AllTouched,
    /// Embedding rows only; dense layers stay at the global values.
    EmbeddingsOnly,
}

/// Outcome of one user's fine-tuning run.
#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub user_id: usize,
    pub params: ModelParams,
    /// Everything any step actually updated.
    pub touched: TouchedSet,
    /// Mean per-sample training loss over the final epoch.
    pub final_loss: f64,
    pub steps: usize,
}

/// Global model plus the per-epoch training losses.
#[derive(Debug, Clone)]
pub struct CloudTrainResult {
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
}

/// Per-user outcomes of a fleet run. Failures do not abort the fleet; the
/// affected users fall back to the global model at evaluation time.
#[derive(Debug, Default)]
pub struct FleetResult {
    pub results: BTreeMap<usize, FinetuneResult>,
    pub failures: BTreeMap<usize, TrainingError>,
}

fn map_model_err(e: ModelError) -> TrainingError {
    match e {
        ModelError::Kernel(k) => TrainingError::Kernel(k),
        other => TrainingError::Model(other.to_string()),
    }
}

fn labels_of(batch: &[Sample]) -> Tensor {
    Tensor::column(&batch.iter().map(|s| s.label).collect::<Vec<f64>>())
}

/// One forward/backward/update step. Returns the batch-mean loss.
#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut ModelParams,
    batch: &[Sample],
    loss: LossKind,
    opt: &OptimizerConfig,
    state: &mut OptState,
    scope: UpdateScope,
    lr: f64,
    step: usize,
    touched: Option<&mut TouchedSet>,
) -> Result<f64, TrainingError> {
    let diverged = |e| match e {
        KernelError::NonFinite { context } => TrainingError::Divergence {
            step,
            message: format!("non-finite value in {context}"),
        },
        other => TrainingError::Kernel(other),
    };
    let (pred, mut tape) = params.forward(batch).map_err(|e| match e {
        ModelError::Kernel(k) => diverged(k),
        other => map_model_err(other),
    })?;
    let labels = labels_of(batch);
    let (batch_loss, mut grads) = tape.backward(pred, loss, &labels).map_err(diverged)?;
    if scope == UpdateScope::EmbeddingsOnly {
        grads.dense.clear();
    }
    if let Some(touched) = touched {
        touched.merge(&TouchedSet::from_gradients(&grads));
    }
    apply_update(params, &grads, opt, state, lr)?;
    Ok(batch_loss)
}

fn apply_update(
    params: &mut ModelParams,
    grads: &Gradients,
    opt: &OptimizerConfig,
    state: &mut OptState,
    lr: f64,
) -> Result<(), TrainingError> {
    match opt.kind {
        OptKind::Sgd => sgd_step(params.param_set_mut(), grads, lr),
        OptKind::Adam => adam_step(params.param_set_mut(), grads, state, opt),
    }
}

/// Shuffled minibatch index ranges for one epoch.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut Pcg64Mcg) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Trains the global model over the pooled samples of every dataset,
/// deterministically per (init_seed, opt.seed).
pub fn train_cloud(
    datasets: &[UserDataset],
    spec: &ModelSpec,
    opt: &OptimizerConfig,
    loss: LossKind,
    init_seed: u64,
) -> Result<CloudTrainResult, TrainingError> {
    opt.validate()?;
    let pool: Vec<&Sample> = datasets.iter().flat_map(|d| d.samples()).collect();
    if pool.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let mut params = ModelParams::init(spec, init_seed);
    let mut state = OptState::new();
    let mut rng = Pcg64Mcg::seed_from_u64(opt.seed);
    let mut epoch_losses = Vec::with_capacity(opt.epochs);
    let mut step = 0;
    for epoch in 0..opt.epochs {
        let lr = opt.learning_rate * opt.lr_decay.powi(epoch as i32);
        let mut weighted = 0.0;
        for batch_idx in epoch_batches(pool.len(), opt.batch_size, &mut rng) {
            let batch: Vec<Sample> = batch_idx.iter().map(|&i| pool[i].clone()).collect();
            step += 1;
            let batch_loss = train_step(
                &mut params,
                &batch,
                loss,
                opt,
                &mut state,
                UpdateScope::AllTouched,
                lr,
                step,
                None,
            )?;
            weighted += batch_loss * batch.len() as f64;
        }
        epoch_losses.push(weighted / pool.len() as f64);
    }
    Ok(CloudTrainResult {
        params,
        epoch_losses,
    })
}

/// Mixes a fleet seed with a user id into an independent stream seed.
fn mix_seed(seed: u64, user_id: u64) -> u64 {
    let mut z = seed ^ user_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fine-tunes a copy of the global model on one user's (possibly
/// label-corrected) samples. Deterministic per (opt.seed, user_id).
pub fn finetune_user(
    global: &ModelParams,
    user_id: usize,
    samples: &[Sample],
    opt: &OptimizerConfig,
    loss: LossKind,
    scope: UpdateScope,
) -> Result<FinetuneResult, TrainingError> {
    opt.validate()?;
    if samples.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let mut params = global.clone();
    let mut state = OptState::new();
    let mut touched = TouchedSet::default();
    let mut rng = Pcg64Mcg::seed_from_u64(mix_seed(opt.seed, user_id as u64));
    let mut steps = 0;
    let mut last_epoch_loss = 0.0;
    for epoch in 0..opt.epochs {
        let lr = opt.learning_rate * opt.lr_decay.powi(epoch as i32);
        let mut weighted = 0.0;
        for batch_idx in epoch_batches(samples.len(), opt.batch_size, &mut rng) {
            let batch: Vec<Sample> = batch_idx.iter().map(|&i| samples[i].clone()).collect();
            steps += 1;
            let batch_loss = train_step(
                &mut params,
                &batch,
                loss,
                opt,
                &mut state,
                scope,
                lr,
                steps,
                Some(&mut touched),
            )?;
            weighted += batch_loss * batch.len() as f64;
        }
        last_epoch_loss = weighted / samples.len() as f64;
    }
    Ok(FinetuneResult {
        user_id,
        params,
        touched,
        final_loss: last_epoch_loss,
        steps,
    })
}

/// The label-corrected fine-tuning loop: per user, derive corrected labels
/// from the frozen local CTR, rewrite the samples, and fine-tune a private
/// copy of the global model. Users run independently (and in parallel);
/// per-user failures are collected, not propagated.
pub fn run_lcft(
    datasets: &[UserDataset],
    policy: &CorrectionPolicy,
    global: &ModelParams,
    global_ctr: f64,
    opt: &OptimizerConfig,
    loss: LossKind,
    scope: UpdateScope,
) -> FleetResult {
    let outcomes: Vec<(usize, Result<FinetuneResult, TrainingError>)> = datasets
        .par_iter()
        .map(|ds| {
            let run = || -> Result<FinetuneResult, TrainingError> {
                let labels = policy.labels_for(ds.local_ctr(), global_ctr)?;
                let corrected = apply_correction(ds, &labels)?;
                finetune_user(global, ds.user_id(), &corrected, opt, loss, scope)
            };
            (ds.user_id(), run())
        })
        .collect();
    let mut fleet = FleetResult::default();
    for (user_id, outcome) in outcomes {
        match outcome {
            Ok(r) => {
                fleet.results.insert(user_id, r);
            }
            Err(e) => {
                fleet.failures.insert(user_id, e);
            }
        }
    }
    fleet
}
