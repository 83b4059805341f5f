//! The shared causal transformer block: continuous token projection, learned
//! position table and pre-norm decoder layers.
//!
//! Both facets use this block. Inputs are `[b', s, in_dim]` token sequences;
//! position `j` can only attend to positions `≤ j`, so the output at a prefix
//! never depends on what follows it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_dim: usize,
    pub embed_dim: usize,
    pub max_seq: usize,
    pub n_heads: usize,
    pub layers: usize,
}

impl BlockConfig {
    pub fn validate(&self, name: &'static str) -> Result<(), ConfigError> {
        if self.in_dim == 0 || self.embed_dim == 0 {
            return Err(ConfigError::invalid(name, "widths must be positive"));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(ConfigError::invalid(
                name,
                format!("{} heads do not divide embed dim {}", self.n_heads, self.embed_dim),
            ));
        }
        if self.max_seq == 0 {
            return Err(ConfigError::invalid(name, "max_seq must be at least 1"));
        }
        if self.layers == 0 {
            return Err(ConfigError::invalid(name, "at least one layer is required"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Closed-form parameter count:
    /// `in·e + e + max_seq·e + layers·(12e² + 13e)`.
    pub fn param_count(&self) -> usize {
        let e = self.embed_dim;
        self.in_dim * e + e + self.max_seq * e + self.layers * (12 * e * e + 13 * e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearIds {
    pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.push(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        LinearIds { weight, bias }
    }

    /// `x · W + b` over the last axis of `x`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.weight.0])?;
        Ok(tape.add_broadcast(y, vars[self.bias.0])?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub query: LinearIds,
    pub key: LinearIds,
    pub value: LinearIds,
    pub out: LinearIds,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_in: LinearIds,
    pub mlp_out: LinearIds,
}

/// Parameter layout of one block. Tensors live in a [`ParamStore`] in the
/// order: token projection, position table, then per layer
/// `ln1, q, k, v, o, ln2, mlp_in, mlp_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub config: BlockConfig,
    pub token: LinearIds,
    pub position: ParamId,
    pub layers: Vec<LayerIds>,
}

impl BlockParams {
    /// Appends freshly initialized block parameters to `store`: weights from
    /// `N(0, std²)`, biases 0, layer-norm gains 1.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        config: BlockConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let e = config.embed_dim;
        let token = LinearIds::init(store, &format!("{prefix}.token"), config.in_dim, e, std, rng);
        let position = store.push(format!("{prefix}.position"), Tensor::randn(&[config.max_seq, e], std, rng));
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                let ln1_gain = store.push(format!("{p}.ln1.gain"), Tensor::ones(&[e]));
                let ln1_bias = store.push(format!("{p}.ln1.bias"), Tensor::zeros(&[e]));
                let query = LinearIds::init(store, &format!("{p}.attn.query"), e, e, std, rng);
                let key = LinearIds::init(store, &format!("{p}.attn.key"), e, e, std, rng);
                let value = LinearIds::init(store, &format!("{p}.attn.value"), e, e, std, rng);
                let out = LinearIds::init(store, &format!("{p}.attn.out"), e, e, std, rng);
                let ln2_gain = store.push(format!("{p}.ln2.gain"), Tensor::ones(&[e]));
                let ln2_bias = store.push(format!("{p}.ln2.bias"), Tensor::zeros(&[e]));
                let mlp_in = LinearIds::init(store, &format!("{p}.mlp.in"), e, 4 * e, std, rng);
                let mlp_out = LinearIds::init(store, &format!("{p}.mlp.out"), 4 * e, e, std, rng);
                LayerIds {
                    ln1_gain,
                    ln1_bias,
                    query,
                    key,
                    value,
                    out,
                    ln2_gain,
                    ln2_bias,
                    mlp_in,
                    mlp_out,
                }
            })
            .collect();
        BlockParams {
            config,
            token,
            position,
            layers,
        }
    }
}

/// `out[k, j, :] = tokens[k, j, :] · W_tok + b_tok + P[j, :]`.
pub fn embed_sequence<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], block: &BlockParams, tokens: Var) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 || shape[2] != block.config.in_dim {
        return Err(ConfigError::invalid(
            "tokens",
            format!("expected [b, s, {}], got {shape:?}", block.config.in_dim),
        )
        .into());
    }
    let s = shape[1];
    if s > block.config.max_seq {
        return Err(ConfigError::invalid(
            "sequence length",
            format!("{s} exceeds the position table of {}", block.config.max_seq),
        )
        .into());
    }
    let h = block.token.forward(tape, vars, tokens)?;
    let pos = tape.take_rows(vars[block.position.0], s)?;
    Ok(tape.add_broadcast(h, pos)?)
}

/// Multi-head scaled dot-product attention with a causal mask. Returns the
/// projected output and the `[b'·H, s, s]` attention weights.
pub fn causal_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    layer: &LayerIds,
    n_heads: usize,
    h: Var,
) -> Result<(Var, Var)> {
    let e = tape.shape(h)[2];
    let head_dim = e / n_heads;
    let q = layer.query.forward(tape, vars, h)?;
    // The key bias shifts every score in a query row by the same `q·b_k`,
    // which softmax cancels exactly. It is kept in the layout but not applied,
    // so the computed function is unchanged and free of that rounding noise.
    let k = tape.matmul(h, vars[layer.key.weight.0])?;
    let v = layer.value.forward(tape, vars, h)?;
    let q = tape.split_heads(q, n_heads)?;
    let k = tape.split_heads(k, n_heads)?;
    let v = tape.split_heads(v, n_heads)?;
    let scores = tape.batched_matmul(q, k, true)?;
    let scores = tape.scale(scores, T::c(1.0 / (head_dim as f64).sqrt()))?;
    let masked = tape.causal_mask(scores)?;
    let weights = tape.softmax_rows(masked)?;
    let ctx = tape.batched_matmul(weights, v, false)?;
    let merged = tape.merge_heads(ctx, n_heads)?;
    let out = layer.out.forward(tape, vars, merged)?;
    Ok((out, weights))
}

/// Pre-norm residual layer: `h + Attn(LN₁(h))`, then `+ MLP(LN₂(·))` with a
/// 4× GELU hidden layer.
pub fn transformer_layer<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    layer: &LayerIds,
    n_heads: usize,
    h: Var,
) -> Result<Var> {
    let eps = T::c(LAYER_NORM_EPS);
    let a = tape.layer_norm(h, vars[layer.ln1_gain.0], vars[layer.ln1_bias.0], eps)?;
    let (attn, _) = causal_self_attention(tape, vars, layer, n_heads, a)?;
    let h = tape.add(h, attn)?;
    let m = tape.layer_norm(h, vars[layer.ln2_gain.0], vars[layer.ln2_bias.0], eps)?;
    let m = layer.mlp_in.forward(tape, vars, m)?;
    let m = tape.gelu(m)?;
    let m = layer.mlp_out.forward(tape, vars, m)?;
    Ok(tape.add(h, m)?)
}

/// Embedding followed by every layer of the block.
pub fn block_forward<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], block: &BlockParams, tokens: Var) -> Result<Var> {
    let mut h = embed_sequence(tape, vars, block, tokens)?;
    for layer in &block.layers {
        h = transformer_layer(tape, vars, layer, block.config.n_heads, h)?;
    }
    Ok(h)
}
