//! Deterministic numeric kernel: dense tensors, the forward ops the CTR
//! models need, both training losses with generalized labels, and exact
//! reverse-mode gradients with sparse embedding updates.
//!
//! Everything here is immutable after construction except the gradient
//! tape, which is single-use and belongs to one forward/backward pair;
//! distinct (parameter copy, tape) pairs run on different threads freely.

mod loss;
mod tape;
mod tensor;

pub use loss::{loss_grad, loss_mse, loss_value, loss_xent_generalized, LossKind, PRED_CLAMP};
pub use tape::{GradientTape, NodeId, PoolKind};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    tape::sigmoid(x)
}

/// Inverse of the logistic function; `p` must lie strictly inside (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum KernelError {
    #[error("non-finite value produced in {context}")]
    NonFinite { context: &'static str },
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("index {index} out of range for table '{table}' with {rows} rows")]
    IndexOutOfRange {
        table: String,
        index: usize,
        rows: usize,
    },
    #[error("unknown parameter '{name}'")]
    UnknownParam { name: String },
    #[error("parameter '{name}' is not an embedding table")]
    NotAnEmbedding { name: String },
    #[error("backward called twice on the same tape")]
    TapeConsumed,
}

/// Whether a named array is updated densely or row by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamArrayKind {
    /// Whole array participates in every update that touches it.
    Dense,
    /// Rows are looked up by id; gradients exist only for looked-up rows.
    Embedding,
}

/// Named parameter arrays. The kernel reads them during the forward pass and
/// keys gradients by the same names.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, (Tensor, ParamArrayKind)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, kind: ParamArrayKind) {
        self.entries.insert(name.to_string(), (tensor, kind));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, KernelError> {
        self.entries
            .get(name)
            .map(|(t, _)| t)
            .ok_or_else(|| KernelError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, KernelError> {
        self.entries
            .get_mut(name)
            .map(|(t, _)| t)
            .ok_or_else(|| KernelError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn kind(&self, name: &str) -> Option<ParamArrayKind> {
        self.entries.get(name).map(|(_, k)| *k)
    }

    /// Embedding-table accessor that also checks the kind.
    pub fn embedding(&self, name: &str) -> Result<&Tensor, KernelError> {
        let (t, k) = self
            .entries
            .get(name)
            .ok_or_else(|| KernelError::UnknownParam {
                name: name.to_string(),
            })?;
        if *k != ParamArrayKind::Embedding {
            return Err(KernelError::NotAnEmbedding {
                name: name.to_string(),
            });
        }
        Ok(t)
    }

    /// Names in deterministic (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamArrayKind)> {
        self.entries.iter().map(|(n, (t, k))| (n.as_str(), t, *k))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|(t, _)| t.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-row gradients for one embedding table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    pub dim: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl SparseRows {
    fn accumulate(&mut self, row: usize, grad: &[f64]) {
        let slot = self.rows.entry(row).or_insert_with(|| vec![0.0; self.dim]);
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }
}

/// Gradients keyed by parameter name: full arrays for dense parameters,
/// touched rows only for embedding tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub dense: BTreeMap<String, Tensor>,
    pub sparse: BTreeMap<String, SparseRows>,
}

impl Gradients {
    fn dense_slot(&mut self, name: &str, shape: &[usize]) -> &mut Tensor {
        self.dense
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape))
    }

    fn sparse_slot(&mut self, name: &str, dim: usize) -> &mut SparseRows {
        self.sparse
            .entry(name.to_string())
            .or_insert_with(|| SparseRows {
                dim,
                rows: BTreeMap::new(),
            })
    }

    /// Materializes the gradient of one parameter as a full dense array,
    /// with zeros at untouched embedding rows. Test and oracle helper.
    pub fn to_dense(&self, name: &str, shape: &[usize]) -> Tensor {
        if let Some(t) = self.dense.get(name) {
            return t.clone();
        }
        let mut out = Tensor::zeros(shape);
        if let Some(sr) = self.sparse.get(name) {
            for (&row, grad) in &sr.rows {
                out.row_mut(row).copy_from_slice(grad);
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.dense.is_empty() && self.sparse.is_empty()
    }
}
