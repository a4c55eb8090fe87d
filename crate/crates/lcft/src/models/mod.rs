//! The three CTR prediction models, sharing one interface: predict a click
//! probability from (user, item, category, history).
//!
//! Architectures are deliberately small. `Lr` is a factorized linear model
//! over summed feature embeddings. `WideDeepLite` adds an MLP over the
//! concatenated embeddings with mean-pooled history. `DinLite` swaps the
//! mean pooling for dot-product attention against the candidate item,
//! through a learned projection.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_pcg::Pcg64Mcg;
use thiserror::Error;

use crate::data::Sample;
use crate::kernel::{
    GradientTape, Gradients, KernelError, NodeId, ParamArrayKind, ParamSet, PoolKind, Tensor,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which model family to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Lr,
    WideDeepLite,
    DinLite,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::WideDeepLite => "wide-deep-lite",
            ModelKind::DinLite => "din-lite",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lr" => Ok(ModelKind::Lr),
            "wide-deep-lite" | "widedeep" => Ok(ModelKind::WideDeepLite),
            "din-lite" | "din" => Ok(ModelKind::DinLite),
            other => Err(format!("unknown model kind '{other}'")),
        }
    }
}

/// Vocabulary sizes and layer dimensions of one model instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub user_vocab: usize,
    pub item_vocab: usize,
    pub cat_vocab: usize,
    pub embed_dim: usize,
    /// Hidden MLP widths for the deep part; the final 1-wide output layer
    /// is implicit.
    pub hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, user_vocab: usize, item_vocab: usize, cat_vocab: usize) -> Self {
        ModelSpec {
            kind,
            user_vocab,
            item_vocab,
            cat_vocab,
            embed_dim: 16,
            hidden: vec![64, 32],
        }
    }
}

/// Named parameter arrays of a global or per-user model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    params: ParamSet,
}

/// Embedding rows (by table) and dense arrays updated during fine-tuning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TouchedSet {
    rows: BTreeMap<String, BTreeSet<usize>>,
    dense: BTreeSet<String>,
}

impl TouchedSet {
    pub fn rows(&self, table: &str) -> Option<&BTreeSet<usize>> {
        self.rows.get(table)
    }

    pub fn dense_touched(&self, name: &str) -> bool {
        self.dense.contains(name)
    }

    pub fn dense_names(&self) -> impl Iterator<Item = &str> {
        self.dense.iter().map(|s| s.as_str())
    }

    pub fn insert_row(&mut self, table: &str, row: usize) {
        self.rows.entry(table.to_string()).or_default().insert(row);
    }

    pub fn mark_dense(&mut self, name: &str) {
        self.dense.insert(name.to_string());
    }

    /// Parameters actually carrying gradient in one backward pass.
    pub fn from_gradients(grads: &Gradients) -> Self {
        let mut t = TouchedSet::default();
        for name in grads.dense.keys() {
            t.mark_dense(name);
        }
        for (table, rows) in &grads.sparse {
            let slot = t.rows.entry(table.clone()).or_default();
            slot.extend(rows.rows.keys().copied());
        }
        t
    }

    pub fn merge(&mut self, other: &TouchedSet) {
        for name in &other.dense {
            self.dense.insert(name.clone());
        }
        for (table, rows) in &other.rows {
            self.rows.entry(table.clone()).or_default().extend(rows);
        }
    }

    /// True when `other` touches nothing this set does not.
    pub fn contains(&self, other: &TouchedSet) -> bool {
        for name in &other.dense {
            if !self.dense.contains(name) {
                return false;
            }
        }
        self.rows_contain(other)
    }

    /// True when every embedding row of `other` is also in this set;
    /// dense arrays are ignored.
    pub fn rows_contain(&self, other: &TouchedSet) -> bool {
        for (table, rows) in &other.rows {
            match self.rows.get(table) {
                Some(mine) => {
                    if !rows.is_subset(mine) {
                        return false;
                    }
                }
                None => {
                    if !rows.is_empty() {
                        return false;
                    }
                }
            }
        }
        true
    }
}

const EMBED_INIT: f64 = 0.01;

impl ModelParams {
    /// Seeded initialization: embeddings uniform in (-0.01, 0.01), affine
    /// weights Glorot-uniform, biases zero.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = spec.embed_dim;

        let embed = |params: &mut ParamSet, rng: &mut Pcg64Mcg, name: &str, rows: usize| {
            let data = (0..rows * d)
                .map(|_| rng.random_range(-EMBED_INIT..EMBED_INIT))
                .collect();
            params.insert(
                name,
                Tensor::from_vec(&[rows, d], data).expect("sized init"),
                ParamArrayKind::Embedding,
            );
        };
        embed(&mut params, &mut rng, "user_embed", spec.user_vocab);
        embed(&mut params, &mut rng, "item_embed", spec.item_vocab);
        embed(&mut params, &mut rng, "cat_embed", spec.cat_vocab);

        let glorot = |rng: &mut Pcg64Mcg, rows: usize, cols: usize| -> Tensor {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Tensor::from_vec(&[rows, cols], data).expect("sized init")
        };

        match spec.kind {
            ModelKind::Lr => {
                params.insert("head_w", glorot(&mut rng, d, 1), ParamArrayKind::Dense);
                params.insert("head_b", Tensor::zeros(&[1]), ParamArrayKind::Dense);
            }
            ModelKind::WideDeepLite | ModelKind::DinLite => {
                if spec.kind == ModelKind::DinLite {
                    params.insert("attn_proj", glorot(&mut rng, d, d), ParamArrayKind::Dense);
                }
                let concat = 4 * d;
                params.insert("wide_w", glorot(&mut rng, concat, 1), ParamArrayKind::Dense);
                params.insert("wide_b", Tensor::zeros(&[1]), ParamArrayKind::Dense);
                let mut d_in = concat;
                for (i, &h) in spec.hidden.iter().enumerate() {
                    params.insert(
                        &format!("deep_w{i}"),
                        glorot(&mut rng, d_in, h),
                        ParamArrayKind::Dense,
                    );
                    params.insert(
                        &format!("deep_b{i}"),
                        Tensor::zeros(&[h]),
                        ParamArrayKind::Dense,
                    );
                    d_in = h;
                }
                let last = spec.hidden.len();
                params.insert(
                    &format!("deep_w{last}"),
                    glorot(&mut rng, d_in, 1),
                    ParamArrayKind::Dense,
                );
                params.insert(
                    &format!("deep_b{last}"),
                    Tensor::zeros(&[1]),
                    ParamArrayKind::Dense,
                );
            }
        }
        ModelParams {
            spec: spec.clone(),
            params,
        }
    }

    /// All-zero parameters of the same layout; test and probe helper.
    pub fn init_zeroed(spec: &ModelSpec) -> Self {
        let mut p = Self::init(spec, 0);
        for name in p.params.names().map(str::to_string).collect::<Vec<_>>() {
            let t = p.params.get_mut(&name).expect("known name");
            t.data_mut().fill(0.0);
        }
        p
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn param_set(&self) -> &ParamSet {
        &self.params
    }

    pub fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn from_parts(spec: ModelSpec, params: ParamSet) -> Self {
        ModelParams { spec, params }
    }

    /// Total scalar parameter count.
    pub fn num_values(&self) -> usize {
        self.params.num_values()
    }

    /// Records the forward pass of a batch and returns the prediction node
    /// plus the tape, for training.
    pub fn forward(&self, batch: &[Sample]) -> Result<(NodeId, GradientTape), ModelError> {
        let users: Vec<usize> = batch.iter().map(|s| s.user_id).collect();
        let items: Vec<usize> = batch.iter().map(|s| s.item_id).collect();
        let cats: Vec<usize> = batch.iter().map(|s| s.category_id).collect();
        let hists: Vec<Vec<usize>> = batch.iter().map(|s| s.history.clone()).collect();

        let ps = &self.params;
        let mut tape = GradientTape::new();
        let e_user = tape.lookup(ps, "user_embed", &users)?;
        let e_item = tape.lookup(ps, "item_embed", &items)?;
        let e_cat = tape.lookup(ps, "cat_embed", &cats)?;

        let pred = match self.spec.kind {
            ModelKind::Lr => {
                let hist = tape.pool(ps, "item_embed", &hists, PoolKind::Mean)?;
                let sum = tape.add_n(&[e_user, e_item, e_cat, hist])?;
                let logit = tape.affine(ps, sum, "head_w", Some("head_b"))?;
                tape.sigmoid(logit)?
            }
            ModelKind::WideDeepLite | ModelKind::DinLite => {
                let hist = match self.spec.kind {
                    ModelKind::DinLite => {
                        let query = tape.affine(ps, e_item, "attn_proj", None)?;
                        tape.attn_pool(ps, "item_embed", &hists, query)?
                    }
                    _ => tape.pool(ps, "item_embed", &hists, PoolKind::Mean)?,
                };
                let x = tape.concat(&[e_user, e_item, e_cat, hist])?;
                let wide = tape.affine(ps, x, "wide_w", Some("wide_b"))?;
                let mut h = x;
                for i in 0..self.spec.hidden.len() {
                    let z =
                        tape.affine(ps, h, &format!("deep_w{i}"), Some(&format!("deep_b{i}")))?;
                    h = tape.relu(z)?;
                }
                let last = self.spec.hidden.len();
                let deep = tape.affine(
                    ps,
                    h,
                    &format!("deep_w{last}"),
                    Some(&format!("deep_b{last}")),
                )?;
                let logit = tape.add_n(&[wide, deep])?;
                tape.sigmoid(logit)?
            }
        };
        Ok((pred, tape))
    }

    /// Click probabilities for a batch; a pure function of (params, batch).
    pub fn predict(&self, batch: &[Sample]) -> Result<Vec<f64>, ModelError> {
        let (pred, tape) = self.forward(batch)?;
        Ok(tape.value(pred).data().to_vec())
    }

    /// Embedding rows the batch can reach: user/item/category ids plus
    /// every history entry.
    pub fn touched_rows(&self, batch: &[Sample]) -> TouchedSet {
        let mut t = TouchedSet::default();
        for s in batch {
            t.insert_row("user_embed", s.user_id);
            t.insert_row("item_embed", s.item_id);
            t.insert_row("cat_embed", s.category_id);
            for &h in &s.history {
                t.insert_row("item_embed", h);
            }
        }
        t
    }

    /// Checks that every embedding row outside `touched` is bitwise equal
    /// between the two parameter sets. Dense arrays are ignored here; they
    /// are expected to differ after fine-tuning.
    pub fn untouched_rows_equal(&self, other: &ModelParams, touched: &TouchedSet) -> bool {
        for (name, tensor, kind) in self.params.iter() {
            if kind != ParamArrayKind::Embedding {
                continue;
            }
            let Ok(theirs) = other.params.get(name) else {
                return false;
            };
            let empty = BTreeSet::new();
            let touched_rows = touched.rows(name).unwrap_or(&empty);
            for r in 0..tensor.nrows() {
                if touched_rows.contains(&r) {
                    continue;
                }
                let a = tensor.row(r);
                let b = theirs.row(r);
                if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    return false;
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(user: usize, item: usize, cat: usize, hist: &[usize]) -> Sample {
        Sample {
            user_id: user,
            item_id: item,
            category_id: cat,
            history: hist.to_vec(),
            label: 1.0,
            timestamp: 0,
        }
    }

    fn small_spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            user_vocab: 4,
            item_vocab: 6,
            cat_vocab: 3,
            embed_dim: 5,
            hidden: vec![7, 4],
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = small_spec(ModelKind::DinLite);
        let a = ModelParams::init(&spec, 42);
        let b = ModelParams::init(&spec, 42);
        assert_eq!(a, b);
        let c = ModelParams::init(&spec, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_at_zero() {
        let p = ModelParams::init(&small_spec(ModelKind::WideDeepLite), 1);
        for name in ["wide_b", "deep_b0", "deep_b1", "deep_b2"] {
            assert!(p
                .param_set()
                .get(name)
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lr_parameter_count_matches_hand_formula() {
        let spec = small_spec(ModelKind::Lr);
        let p = ModelParams::init(&spec, 0);
        let d = spec.embed_dim;
        let expect = (spec.user_vocab + spec.item_vocab + spec.cat_vocab) * d + d + 1;
        assert_eq!(p.num_values(), expect);
    }

    #[test]
    fn zeroed_din_lite_predicts_half() {
        let p = ModelParams::init_zeroed(&small_spec(ModelKind::DinLite));
        let batch = vec![sample(0, 1, 2, &[3, 4]), sample(1, 2, 0, &[])];
        let preds = p.predict(&batch).unwrap();
        assert_eq!(preds, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_history_is_handled_by_all_kinds() {
        for kind in [ModelKind::Lr, ModelKind::WideDeepLite, ModelKind::DinLite] {
            let p = ModelParams::init(&small_spec(kind), 5);
            let preds = p.predict(&[sample(0, 0, 0, &[])]).unwrap();
            assert!(preds[0] > 0.0 && preds[0] < 1.0);
        }
    }

    #[test]
    fn out_of_vocab_id_is_an_input_error() {
        let p = ModelParams::init(&small_spec(ModelKind::Lr), 5);
        let err = p.predict(&[sample(0, 99, 0, &[])]);
        assert!(matches!(
            err,
            Err(ModelError::Kernel(KernelError::IndexOutOfRange { .. }))
        ));
    }

    #[test]
    fn predict_is_pure() {
        let p = ModelParams::init(&small_spec(ModelKind::DinLite), 9);
        let batch = vec![sample(2, 3, 1, &[0, 5, 3]), sample(0, 1, 2, &[2])];
        let a = p.predict(&batch).unwrap();
        let b = p.predict(&batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wide_deep_prediction_matches_independent_recomputation() {
        // Straight re-evaluation of the documented closed form with plain
        // loops, no tape.
        let spec = ModelSpec {
            kind: ModelKind::WideDeepLite,
            user_vocab: 3,
            item_vocab: 4,
            cat_vocab: 2,
            embed_dim: 3,
            hidden: vec![4],
        };
        let p = ModelParams::init(&spec, 77);
        let s = sample(1, 2, 0, &[0, 3]);
        let got = p.predict(std::slice::from_ref(&s)).unwrap()[0];

        let ps = p.param_set();
        let row = |name: &str, r: usize| ps.get(name).unwrap().row(r).to_vec();
        let mut x = Vec::new();
        x.extend(row("user_embed", 1));
        x.extend(row("item_embed", 2));
        x.extend(row("cat_embed", 0));
        let h0 = row("item_embed", 0);
        let h3 = row("item_embed", 3);
        let hist: Vec<f64> = h0.iter().zip(&h3).map(|(a, b)| (a + b) / 2.0).collect();
        x.extend(hist);

        let matvec = |x: &[f64], w: &Tensor, b: Option<&Tensor>| -> Vec<f64> {
            let cols = w.ncols();
            let mut out = vec![0.0; cols];
            for (i, xi) in x.iter().enumerate() {
                for (o, wv) in out.iter_mut().zip(w.row(i)) {
                    *o += xi * wv;
                }
            }
            if let Some(b) = b {
                for (o, bv) in out.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        };
        let wide = matvec(
            &x,
            ps.get("wide_w").unwrap(),
            Some(ps.get("wide_b").unwrap()),
        )[0];
        let mut h = matvec(
            &x,
            ps.get("deep_w0").unwrap(),
            Some(ps.get("deep_b0").unwrap()),
        );
        for v in h.iter_mut() {
            *v = v.max(0.0);
        }
        let deep = matvec(
            &h,
            ps.get("deep_w1").unwrap(),
            Some(ps.get("deep_b1").unwrap()),
        )[0];
        let expect = crate::kernel::sigmoid_scalar(wide + deep);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn din_attention_matches_independent_recomputation() {
        let spec = ModelSpec {
            kind: ModelKind::DinLite,
            user_vocab: 3,
            item_vocab: 5,
            cat_vocab: 2,
            embed_dim: 4,
            hidden: vec![3],
        };
        let p = ModelParams::init(&spec, 41);
        let s = sample(0, 2, 1, &[1, 4, 0]);
        let got = p.predict(std::slice::from_ref(&s)).unwrap()[0];

        let ps = p.param_set();
        let row = |name: &str, r: usize| ps.get(name).unwrap().row(r).to_vec();
        let matvec = |x: &[f64], w: &Tensor, b: Option<&Tensor>| -> Vec<f64> {
            let mut out = vec![0.0; w.ncols()];
            for (i, xi) in x.iter().enumerate() {
                for (o, wv) in out.iter_mut().zip(w.row(i)) {
                    *o += xi * wv;
                }
            }
            if let Some(b) = b {
                for (o, bv) in out.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        };

        let e_item = row("item_embed", 2);
        // Attention: query is the projected candidate embedding; weights
        // are a softmax over dot products with the history rows.
        let query = matvec(&e_item, ps.get("attn_proj").unwrap(), None);
        let hist_rows = [
            row("item_embed", 1),
            row("item_embed", 4),
            row("item_embed", 0),
        ];
        let scores: Vec<f64> = hist_rows
            .iter()
            .map(|r| r.iter().zip(&query).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        let mut pooled = vec![0.0; spec.embed_dim];
        for (w, r) in exps.iter().zip(&hist_rows) {
            for (o, v) in pooled.iter_mut().zip(r) {
                *o += (w / norm) * v;
            }
        }

        let mut x = Vec::new();
        x.extend(row("user_embed", 0));
        x.extend(e_item);
        x.extend(row("cat_embed", 1));
        x.extend(pooled);
        let wide = matvec(
            &x,
            ps.get("wide_w").unwrap(),
            Some(ps.get("wide_b").unwrap()),
        )[0];
        let mut h = matvec(
            &x,
            ps.get("deep_w0").unwrap(),
            Some(ps.get("deep_b0").unwrap()),
        );
        for v in h.iter_mut() {
            *v = v.max(0.0);
        }
        let deep = matvec(
            &h,
            ps.get("deep_w1").unwrap(),
            Some(ps.get("deep_b1").unwrap()),
        )[0];
        let expect = crate::kernel::sigmoid_scalar(wide + deep);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn touched_rows_match_brute_force_id_scan() {
        let p = ModelParams::init(&small_spec(ModelKind::Lr), 3);
        let batch = vec![sample(0, 3, 1, &[3]), sample(2, 5, 1, &[0, 3])];
        let t = p.touched_rows(&batch);
        let items: Vec<usize> = t.rows("item_embed").unwrap().iter().copied().collect();
        assert_eq!(items, vec![0, 3, 5]);
        let users: Vec<usize> = t.rows("user_embed").unwrap().iter().copied().collect();
        assert_eq!(users, vec![0, 2]);
        let cats: Vec<usize> = t.rows("cat_embed").unwrap().iter().copied().collect();
        assert_eq!(cats, vec![1]);
    }

    #[test]
    fn lr_prediction_increases_with_present_feature_weight() {
        let spec = small_spec(ModelKind::Lr);
        let mut p = ModelParams::init(&spec, 8);
        // Make the summed feature vector strictly positive so a head-weight
        // bump must raise the logit.
        for name in ["user_embed", "item_embed", "cat_embed"] {
            for v in p.param_set_mut().get_mut(name).unwrap().data_mut() {
                *v = v.abs() + 0.01;
            }
        }
        let s = sample(1, 2, 0, &[4]);
        let before = p.predict(std::slice::from_ref(&s)).unwrap()[0];
        p.param_set_mut().get_mut("head_w").unwrap().data_mut()[2] += 0.5;
        let after = p.predict(std::slice::from_ref(&s)).unwrap()[0];
        assert!(after > before, "{after} <= {before}");
    }
}
