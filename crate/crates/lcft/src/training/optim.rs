//! SGD and Adam steps over sparse-plus-dense gradients.
//!
//! Dense gradients update whole arrays; embedding gradients arrive as
//! per-row maps and update only the touched rows. Adam keeps its moment
//! state in the same shape: dense moments per array, sparse moments
//! allocated lazily per touched row, with bias correction driven by the
//! global step count.

use std::collections::BTreeMap;

use crate::kernel::{Gradients, ParamSet, Tensor};

use super::TrainingError;

/// Which update rule a training phase uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

/// Optimizer and schedule settings for one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub learning_rate: f64,
    /// Per-epoch learning-rate multiplier; SGD only, 1.0 disables decay.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Shuffle seed; fine-tuning mixes the user id in.
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        OptimizerConfig {
            kind: OptKind::Sgd,
            learning_rate,
            lr_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size,
            epochs,
            seed,
        }
    }

    pub fn adam(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        OptimizerConfig {
            kind: OptKind::Adam,
            ..OptimizerConfig::sgd(learning_rate, batch_size, epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(TrainingError::Config(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::Config("batch size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainingError::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam moment state; empty (and unused) for SGD.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    step: u64,
    dense_m: BTreeMap<String, Tensor>,
    dense_v: BTreeMap<String, Tensor>,
    sparse_m: BTreeMap<String, BTreeMap<usize, Vec<f64>>>,
    sparse_v: BTreeMap<String, BTreeMap<usize, Vec<f64>>>,
}

impl OptState {
    pub fn new() -> Self {
        OptState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn shape_check(param: &Tensor, grad: &Tensor, name: &str) -> Result<(), TrainingError> {
    if param.shape() != grad.shape() {
        return Err(TrainingError::Contract(format!(
            "gradient shape {:?} does not match parameter '{name}' shape {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    Ok(())
}

/// Plain SGD: `p -= lr * g`, applied only where gradients exist.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &Gradients,
    learning_rate: f64,
) -> Result<(), TrainingError> {
    for (name, grad) in &grads.dense {
        let p = params.get_mut(name)?;
        shape_check(p, grad, name)?;
        for (pv, gv) in p.data_mut().iter_mut().zip(grad.data()) {
            *pv -= learning_rate * gv;
        }
    }
    for (name, rows) in &grads.sparse {
        let p = params.get_mut(name)?;
        if p.ncols() != rows.dim {
            return Err(TrainingError::Contract(format!(
                "sparse gradient dim {} does not match table '{name}' dim {}",
                rows.dim,
                p.ncols()
            )));
        }
        for (&row, grad) in &rows.rows {
            for (pv, gv) in p.row_mut(row).iter_mut().zip(grad) {
                *pv -= learning_rate * gv;
            }
        }
    }
    Ok(())
}

/// Bias-corrected Adam. Sparse rows get moment slots on first touch; the
/// bias correction uses the shared step count.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut OptState,
    cfg: &OptimizerConfig,
) -> Result<(), TrainingError> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, lr) = (cfg.beta1, cfg.beta2, cfg.eps, cfg.learning_rate);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);

    for (name, grad) in &grads.dense {
        let p = params.get_mut(name)?;
        shape_check(p, grad, name)?;
        let m = state
            .dense_m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = state
            .dense_v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        for k in 0..grad.len() {
            let g = grad.data()[k];
            let mk = &mut m.data_mut()[k];
            *mk = b1 * *mk + (1.0 - b1) * g;
            let vk = &mut v.data_mut()[k];
            *vk = b2 * *vk + (1.0 - b2) * g * g;
            let m_hat = *mk / bc1;
            let v_hat = *vk / bc2;
            p.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    for (name, rows) in &grads.sparse {
        let p = params.get_mut(name)?;
        if p.ncols() != rows.dim {
            return Err(TrainingError::Contract(format!(
                "sparse gradient dim {} does not match table '{name}' dim {}",
                rows.dim,
                p.ncols()
            )));
        }
        let m_table = state.sparse_m.entry(name.clone()).or_default();
        let v_table = state.sparse_v.entry(name.clone()).or_default();
        for (&row, grad) in &rows.rows {
            let m = m_table.entry(row).or_insert_with(|| vec![0.0; rows.dim]);
            let v = v_table.entry(row).or_insert_with(|| vec![0.0; rows.dim]);
            let pr = p.row_mut(row);
            for k in 0..rows.dim {
                let g = grad[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                pr[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{ParamArrayKind, SparseRows};

    fn scalar_params(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(
            "p",
            Tensor::from_vec(&[1], vec![v]).unwrap(),
            ParamArrayKind::Dense,
        );
        ps
    }

    fn scalar_grads(g: f64) -> Gradients {
        let mut grads = Gradients::default();
        grads
            .dense
            .insert("p".to_string(), Tensor::from_vec(&[1], vec![g]).unwrap());
        grads
    }

    #[test]
    fn sgd_scalar_definition() {
        let mut ps = scalar_params(1.0);
        sgd_step(&mut ps, &scalar_grads(0.5), 0.1).unwrap();
        assert_eq!(ps.get("p").unwrap().data()[0], 0.95);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut ps = scalar_params(1.0);
        sgd_step(&mut ps, &Gradients::default(), 0.1).unwrap();
        assert_eq!(ps.get("p").unwrap().data()[0], 1.0);
        let mut state = OptState::new();
        let cfg = OptimizerConfig::adam(0.01, 1, 1, 0);
        adam_step(&mut ps, &Gradients::default(), &mut state, &cfg).unwrap();
        assert_eq!(ps.get("p").unwrap().data()[0], 1.0);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // Hand evaluation of the recurrence at t = 1: m_hat / sqrt(v_hat)
        // equals 1 up to eps, for any positive gradient.
        let cfg = OptimizerConfig::adam(0.01, 1, 1, 0);
        for g in [1e-3, 0.5, 10.0] {
            let mut ps = scalar_params(2.0);
            let mut state = OptState::new();
            adam_step(&mut ps, &scalar_grads(g), &mut state, &cfg).unwrap();
            let delta = 2.0 - ps.get("p").unwrap().data()[0];
            assert!(
                (delta - cfg.learning_rate).abs() / cfg.learning_rate < 1e-4,
                "g={g}: delta {delta}"
            );
        }
    }

    #[test]
    fn sparse_rows_update_only_touched_entries() {
        let mut ps = ParamSet::new();
        ps.insert(
            "emb",
            Tensor::from_vec(&[3, 2], vec![1.0; 6]).unwrap(),
            ParamArrayKind::Embedding,
        );
        let mut grads = Gradients::default();
        let mut rows = BTreeMap::new();
        rows.insert(1usize, vec![0.5, -0.5]);
        grads
            .sparse
            .insert("emb".to_string(), SparseRows { dim: 2, rows });
        sgd_step(&mut ps, &grads, 1.0).unwrap();
        let t = ps.get("emb").unwrap();
        assert_eq!(t.row(0), &[1.0, 1.0]);
        assert_eq!(t.row(1), &[0.5, 1.5]);
        assert_eq!(t.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut ps = scalar_params(1.0);
        let mut grads = Gradients::default();
        grads.dense.insert(
            "p".to_string(),
            Tensor::from_vec(&[2], vec![0.1, 0.1]).unwrap(),
        );
        assert!(matches!(
            sgd_step(&mut ps, &grads, 0.1),
            Err(TrainingError::Contract(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::sgd(0.1, 32, 1, 0).validate().is_ok());
        assert!(OptimizerConfig::sgd(0.0, 32, 1, 0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 0, 1, 0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 32, 0, 0).validate().is_err());
    }
}
