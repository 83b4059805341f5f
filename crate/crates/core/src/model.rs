//! The two-facet model.
//!
//! * Facet 1 treats the `d` normalized features (task ID column included) as
//!   a token sequence; each token carries its value plus the task's one-hot
//!   code. One causal block over the sequence yields `T1 = b × (d·e1)`.
//! * Facet 2 groups examples into blocks of `t` and treats each example's
//!   feature vector as one token. One causal block over the block yields
//!   `T2 = b × e2`.
//! * `[T1, T2]` is fed through two linear layers with a GELU in between to a
//!   single logit per example.
//!
//! Facet 2 is causal along the block, so the example at block position 0 is
//! scored exactly as if it were served alone (`block_len = 1`).

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward, BlockConfig, BlockParams, LinearIds};
use crate::encoding::{
    append_task_id, apply_norm, assemble_facet1_input, one_hot_tasks, FeatureBatch, NormStats, TaskEncodedBatch,
    Variant,
};
use crate::error::{ConfigError, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature count including the appended task-ID column.
    pub d: usize,
    /// Number of trained tasks; IDs `1..=n_tasks`, 0 is the unknown task.
    pub n_tasks: usize,
    pub e1: usize,
    pub e2: usize,
    /// Maximum task-block length `t` (size of the facet-2 position table).
    pub block_len: usize,
    pub heads1: usize,
    pub heads2: usize,
    pub fusion_hidden: usize,
    pub layers: usize,
    pub variant: Variant,
    pub init_std: f64,
}

impl ModelConfig {
    /// Defaults: `e2 = d·e1`, 2 facet-1 heads, 4 facet-2 heads, fusion width
    /// `e2`, one layer per facet.
    pub fn new(d: usize, n_tasks: usize, e1: usize, block_len: usize) -> Self {
        let e2 = d * e1;
        ModelConfig {
            d,
            n_tasks,
            e1,
            e2,
            block_len,
            heads1: 2,
            heads2: 4,
            fusion_hidden: e2,
            layers: 1,
            variant: Variant::Full,
            init_std: DEFAULT_INIT_STD,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d < 2 {
            return Err(ConfigError::invalid("d", "need at least one feature plus the task-id column"));
        }
        if self.e2 != self.d * self.e1 {
            return Err(ConfigError::EmbedMismatch {
                d: self.d,
                e1: self.e1,
                e2: self.e2,
                expected: self.d * self.e1,
            });
        }
        if self.block_len == 0 {
            return Err(ConfigError::invalid("block_len", "must be at least 1"));
        }
        if self.fusion_hidden == 0 {
            return Err(ConfigError::invalid("fusion_hidden", "must be at least 1"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(ConfigError::invalid("init_std", "must be finite and non-negative"));
        }
        if self.e1 < 2 {
            return Err(ConfigError::invalid("e1", "layer norm needs an embedding of at least 2"));
        }
        self.facet1().validate("facet1")?;
        self.facet2().validate("facet2")?;
        Ok(())
    }

    pub fn facet1(&self) -> BlockConfig {
        BlockConfig {
            in_dim: self.n_tasks + 1,
            embed_dim: self.e1,
            max_seq: self.d,
            n_heads: self.heads1,
            layers: self.layers,
        }
    }

    pub fn facet2(&self) -> BlockConfig {
        BlockConfig {
            in_dim: self.d,
            embed_dim: self.e2,
            max_seq: self.block_len,
            n_heads: self.heads2,
            layers: self.layers,
        }
    }

    /// Closed-form parameter count: both blocks (see
    /// [`BlockConfig::param_count`]) plus the fusion head
    /// `2·e2·h + h + h + 1`.
    pub fn param_count(&self) -> usize {
        let h = self.fusion_hidden;
        self.facet1().param_count() + self.facet2().param_count() + 2 * self.e2 * h + h + h + 1
    }

    /// Names of fields whose values differ from `other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => { $( if self.$f != other.$f { out.push(stringify!($f)); } )* };
        }
        cmp!(d, n_tasks, e1, e2, block_len, heads1, heads2, fusion_hidden, layers, variant, init_std);
        out
    }
}

/// Task ID used at encoding time: trained IDs pass through, anything outside
/// `1..=n_tasks` is served as the unknown task 0.
pub fn serving_task_id(id: usize, n_tasks: usize) -> usize {
    if id > n_tasks {
        0
    } else {
        id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Facet1,
    Facet2,
    Fusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    pub facet1: BlockParams,
    pub facet2: BlockParams,
    pub fusion_in: LinearIds,
    pub fusion_out: LinearIds,
    facet1_range: Range<usize>,
    facet2_range: Range<usize>,
}

impl ModelLayout {
    fn build<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let start = store.len();
        let facet1 = BlockParams::init(config.facet1(), store, "facet1", std, &mut rng);
        let mid = store.len();
        let facet2 = BlockParams::init(config.facet2(), store, "facet2", std, &mut rng);
        let end = store.len();
        let e2 = config.e2;
        let h = config.fusion_hidden;
        let fusion_in = LinearIds {
            weight: store.push("fusion.in.weight", Tensor::randn(&[2 * e2, h], std, &mut rng)),
            bias: store.push("fusion.in.bias", Tensor::zeros(&[h])),
        };
        let fusion_out = LinearIds {
            weight: store.push("fusion.out.weight", Tensor::randn(&[h, 1], std, &mut rng)),
            bias: store.push("fusion.out.bias", Tensor::zeros(&[1])),
        };
        ModelLayout {
            facet1,
            facet2,
            fusion_in,
            fusion_out,
            facet1_range: start..mid,
            facet2_range: mid..end,
        }
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        if self.facet1_range.contains(&index) {
            ParamGroup::Facet1
        } else if self.facet2_range.contains(&index) {
            ParamGroup::Facet2
        } else {
            ParamGroup::Fusion
        }
    }
}

/// Normalized inputs for both facets.
#[derive(Clone, Debug)]
pub struct ModelInputs<T> {
    /// `b × d` normalized features with the task-ID column.
    pub x: Tensor<T>,
    /// `b × d × (N+1)` facet-1 tokens.
    pub encoded: TaskEncodedBatch<T>,
}

/// Appends the task ID, applies the variant's ablations and normalization, and
/// assembles the facet-1 tokens.
pub fn prepare_inputs<T: Scalar>(config: &ModelConfig, norm: &NormStats, batch: &FeatureBatch) -> Result<ModelInputs<T>> {
    if batch.is_empty() {
        return Err(ConfigError::invalid("batch", "empty batch").into());
    }
    if batch.raw_width() + 1 != config.d {
        return Err(ConfigError::invalid(
            "features",
            format!("expected {} raw features, got {}", config.d - 1, batch.raw_width()),
        )
        .into());
    }
    if let Some(&id) = batch.task_ids.iter().find(|&&id| id > config.n_tasks) {
        return Err(ConfigError::TaskIdOutOfRange { id, max: config.n_tasks }.into());
    }
    let mut x = append_task_id(batch);
    if !config.variant.keeps_id_column() {
        let d = config.d;
        for row in x.data_mut().chunks_mut(d) {
            row[d - 1] = 0.0;
        }
    }
    let x: Tensor<T> = apply_norm(&x, norm)?.cast();
    let onehot = if config.n_tasks == 0 {
        None
    } else if config.variant.uses_one_hot() {
        Some(one_hot_tasks::<T>(&batch.task_ids, config.n_tasks)?)
    } else {
        Some(one_hot_tasks::<T>(&vec![0; batch.len()], config.n_tasks)?)
    };
    let encoded = assemble_facet1_input(&x, onehot.as_ref(), &batch.task_ids)?;
    Ok(ModelInputs { x, encoded })
}

/// Facet 1: `[b, d, N+1]` tokens → `T1 = [b, d·e1]`, flattened
/// position-major.
pub fn facet1_forward<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], layout: &ModelLayout, tokens: Var) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let cfg = layout.facet1.config;
    if shape.len() != 3 || shape[2] != cfg.in_dim {
        return Err(ConfigError::invalid(
            "facet1 tokens",
            format!("expected width {} (N+1), got shape {shape:?}", cfg.in_dim),
        )
        .into());
    }
    let h = block_forward(tape, vars, &layout.facet1, tokens)?;
    Ok(tape.reshape(h, &[shape[0], shape[1] * cfg.embed_dim])?)
}

/// Groups consecutive rows of `[b, d]` into task blocks `[b/t, t, d]`.
pub fn task_blocks<T: Scalar>(tape: &mut Tape<T>, x: Var, block_len: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let b = shape[0];
    if block_len == 0 || !b.is_multiple_of(block_len) {
        return Err(ConfigError::NotBlockAligned { batch: b, block_len }.into());
    }
    Ok(tape.reshape(x, &[b / block_len, block_len, shape[1]])?)
}

/// Facet 2: `[b, d]` → blocks `[b/t, t, d]` → causal block → `T2 = [b, e2]`.
pub fn facet2_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    layout: &ModelLayout,
    x: Var,
    block_len: usize,
) -> Result<Var> {
    let cfg = layout.facet2.config;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.in_dim {
        return Err(ConfigError::invalid("facet2 input", format!("expected [b, {}], got {shape:?}", cfg.in_dim)).into());
    }
    let b = shape[0];
    let blocks = task_blocks(tape, x, block_len)?;
    let h = block_forward(tape, vars, &layout.facet2, blocks)?;
    Ok(tape.reshape(h, &[b, cfg.embed_dim])?)
}

/// Concatenates `T1` and `T2` and maps them through
/// `linear → gelu → linear` to logits `[b]` and scores `sigmoid(logits)`.
pub fn fuse_and_score<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    layout: &ModelLayout,
    t1: Var,
    t2: Var,
) -> Result<(Var, Var)> {
    let expect = layout.facet2.config.embed_dim;
    for (name, v) in [("t1", t1), ("t2", t2)] {
        let s = tape.shape(v);
        if s.len() != 2 || s[1] != expect {
            return Err(ConfigError::invalid(name, format!("expected width {expect}, got shape {s:?}")).into());
        }
    }
    let b = tape.shape(t1)[0];
    let joined = tape.concat(t1, t2)?;
    let h = layout.fusion_in.forward(tape, vars, joined)?;
    let h = tape.gelu(h)?;
    let z = layout.fusion_out.forward(tape, vars, h)?;
    let logits = tape.reshape(z, &[b])?;
    let scores = tape.sigmoid(logits)?;
    Ok((logits, scores))
}

/// Variables produced by one full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub t1: Var,
    pub t2: Var,
    pub logits: Var,
    pub scores: Var,
}

pub fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    layout: &ModelLayout,
    inputs: &ModelInputs<T>,
    block_len: usize,
) -> Result<ForwardVars> {
    let tokens = tape.constant(inputs.encoded.tokens.clone());
    let x = tape.constant(inputs.x.clone());
    let t1 = facet1_forward(tape, vars, layout, tokens)?;
    let t2 = facet2_forward(tape, vars, layout, x, block_len)?;
    let (logits, scores) = fuse_and_score(tape, vars, layout, t1, t2)?;
    Ok(ForwardVars { t1, t2, logits, scores })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub scores: Vec<f32>,
}

/// The trained model: configuration, normalization statistics and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoTaskModel {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub store: ParamStore<f32>,
    pub layout: ModelLayout,
}

impl AutoTaskModel {
    /// Builds a freshly initialized model. Rejects `e2 ≠ d·e1` and any other
    /// invalid configuration.
    pub fn new(config: ModelConfig, norm: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        if norm.width() != config.d {
            return Err(ConfigError::invalid(
                "norm_stats",
                format!("width {} does not match d = {}", norm.width(), config.d),
            )
            .into());
        }
        let mut store = ParamStore::new();
        let layout = ModelLayout::build(&config, &mut store, seed);
        Ok(AutoTaskModel { config, norm, store, layout })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Scores a batch. `block_len = 1` is the serving path; larger values
    /// group consecutive rows into facet-2 blocks.
    pub fn predict(&self, batch: &FeatureBatch, block_len: usize) -> Result<Prediction> {
        let inputs = prepare_inputs::<f32>(&self.config, &self.norm, batch)?;
        self.predict_inputs(&inputs, block_len)
    }

    pub fn predict_inputs(&self, inputs: &ModelInputs<f32>, block_len: usize) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = self.store.register(&mut tape, false);
        let out = forward_graph(&mut tape, &vars, &self.layout, inputs, block_len)?;
        Ok(Prediction {
            logits: tape.value(out.logits).data().to_vec(),
            scores: tape.value(out.scores).data().to_vec(),
        })
    }

    /// Intermediate representations `(T1, T2)` for inspection.
    pub fn representations(&self, batch: &FeatureBatch, block_len: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let inputs = prepare_inputs::<f32>(&self.config, &self.norm, batch)?;
        let mut tape = Tape::new();
        let vars = self.store.register(&mut tape, false);
        let out = forward_graph(&mut tape, &vars, &self.layout, &inputs, block_len)?;
        Ok((tape.value(out.t1).clone(), tape.value(out.t2).clone()))
    }

    /// Mean binary cross-entropy of the scores against `targets`.
    pub fn loss(&self, batch: &FeatureBatch, targets: &[f32], block_len: usize) -> Result<f32> {
        let inputs = prepare_inputs::<f32>(&self.config, &self.norm, batch)?;
        let mut tape = Tape::new();
        let vars = self.store.register(&mut tape, false);
        let out = forward_graph(&mut tape, &vars, &self.layout, &inputs, block_len)?;
        let loss = tape.bce_with_logits(out.logits, targets)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Loss and gradients for every parameter tensor, in store order.
    pub fn loss_and_grads(
        &self,
        batch: &FeatureBatch,
        targets: &[f32],
        block_len: usize,
    ) -> Result<(f32, Vec<Tensor<f32>>)> {
        let inputs = prepare_inputs::<f32>(&self.config, &self.norm, batch)?;
        let mut tape = Tape::new();
        let vars = self.store.register(&mut tape, true);
        let out = forward_graph(&mut tape, &vars, &self.layout, &inputs, block_len)?;
        let loss = tape.bce_with_logits(out.logits, targets)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Finite-difference check of the full model's loss gradient in 64-bit
    /// precision.
    pub fn grad_check(
        &self,
        batch: &FeatureBatch,
        targets: &[f32],
        block_len: usize,
        cfg: &GradCheckConfig,
    ) -> Result<GradCheckReport> {
        let inputs = prepare_inputs::<f64>(&self.config, &self.norm, batch)?;
        let targets: Vec<f64> = targets.iter().map(|&y| f64::from(y)).collect();
        let store = self.store.cast::<f64>();
        let params: Vec<_> = store
            .names()
            .iter()
            .cloned()
            .zip(store.tensors().iter().cloned())
            .collect();
        grad_check(
            |tape, vars| {
                let out = forward_graph(tape, vars, &self.layout, &inputs, block_len)?;
                Ok(tape.bce_with_logits(out.logits, &targets)?)
            },
            &params,
            cfg,
        )
    }

    /// Adds `N(0, std²)` noise to every parameter, giving a generic
    /// (non-initialization) parameter setting.
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.store.tensors_mut() {
            let noise = Tensor::<f32>::randn(t.shape(), std, &mut rng);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }
}
