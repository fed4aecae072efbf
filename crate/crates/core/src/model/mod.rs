//! The subtype-discovery autoencoder: a symmetric MLP encoder/decoder with a
//! multi-head self-attention block and residual connection on each side.
//!
//! One sample flows through a stage as
//! `Linear -> LayerNorm -> ReLU -> (reshape to tokens) -> MultiHeadAttention
//! + residual -> LayerNorm -> (flatten) -> Linear`.
//! The encoder's final linear maps to the latent width, the decoder mirrors
//! it back to the input width with no output activation. The hidden
//! activation of width `hidden_width` is reshaped into `token_count` tokens
//! of width `num_heads * head_dim`, which is what gives the attention block a
//! sequence to attend over: with a single token the softmax is identically 1
//! and attention degenerates to a linear map.

mod train;

pub use train::{train, TrainReport};

use crate::error::{Error, Result};
use crate::numcore::{derive_seed, tags, Matrix, NodeId, Rng, Tape};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Epsilon used by every layer-norm in the network.
pub const LN_EPS: f64 = 1e-5;

fn default_hidden_width() -> usize {
    1024
}
fn default_latent_dim() -> usize {
    64
}
fn default_num_heads() -> usize {
    2
}
fn default_head_dim() -> usize {
    64
}
fn default_token_count() -> usize {
    8
}
fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    64
}
fn default_learning_rate() -> f64 {
    1e-3
}

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    /// Per-head query/key/value width (d_k = d_v).
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    /// Number of tokens the hidden activation is split into.
    #[serde(default = "default_token_count")]
    pub token_count: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for everything but the data width.
    pub fn with_input_dim(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_width: default_hidden_width(),
            latent_dim: default_latent_dim(),
            num_heads: default_num_heads(),
            head_dim: default_head_dim(),
            token_count: default_token_count(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            seed: 0,
        }
    }

    /// Token width seen by the attention block.
    pub fn d_model(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_width", self.hidden_width),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("token_count", self.token_count),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.latent_dim < 2 {
            return Err(Error::Config(format!(
                "latent_dim must be >= 2, got {}",
                self.latent_dim
            )));
        }
        if self.hidden_width != self.token_count * self.d_model() {
            return Err(Error::Config(format!(
                "hidden_width ({}) must equal token_count * num_heads * head_dim ({} * {} = {})",
                self.hidden_width,
                self.token_count,
                self.d_model(),
                self.token_count * self.d_model()
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Scale and shift of one layer-norm, both 1 x width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNormParams {
    fn identity(width: usize) -> Self {
        LayerNormParams {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
        }
    }
}

/// One attention head's projections: query/key (d_model x d_k) and value
/// (d_model x d_v).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// Multi-head attention parameters; `output` is the (num_heads * d_v) x
/// d_model projection applied to the concatenated heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: Vec<AttentionHead>,
    pub output: Matrix,
}

impl AttentionParams {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.query.cols())
    }

    pub fn d_model(&self) -> usize {
        self.heads.first().map_or(0, |h| h.query.rows())
    }
}

/// One side of the autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub input_weight: Matrix,
    pub input_bias: Matrix,
    pub norm_pre: LayerNormParams,
    pub attention: AttentionParams,
    pub norm_post: LayerNormParams,
    pub output_weight: Matrix,
    pub output_bias: Matrix,
}

/// All learnable weights plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderParams {
    pub config: ModelConfig,
    pub encoder: StageParams,
    pub decoder: StageParams,
}

impl AutoencoderParams {
    /// Every parameter matrix in the canonical order used by the optimizer
    /// and by gradient collection.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for stage in [&self.encoder, &self.decoder] {
            out.push(&stage.input_weight);
            out.push(&stage.input_bias);
            out.push(&stage.norm_pre.gamma);
            out.push(&stage.norm_pre.beta);
            for head in &stage.attention.heads {
                out.push(&head.query);
                out.push(&head.key);
                out.push(&head.value);
            }
            out.push(&stage.attention.output);
            out.push(&stage.norm_post.gamma);
            out.push(&stage.norm_post.beta);
            out.push(&stage.output_weight);
            out.push(&stage.output_bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for stage in [&mut self.encoder, &mut self.decoder] {
            out.push(&mut stage.input_weight);
            out.push(&mut stage.input_bias);
            out.push(&mut stage.norm_pre.gamma);
            out.push(&mut stage.norm_pre.beta);
            for head in &mut stage.attention.heads {
                out.push(&mut head.query);
                out.push(&mut head.key);
                out.push(&mut head.value);
            }
            out.push(&mut stage.attention.output);
            out.push(&mut stage.norm_post.gamma);
            out.push(&mut stage.norm_post.beta);
            out.push(&mut stage.output_weight);
            out.push(&mut stage.output_bias);
        }
        out
    }
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.uniform_in(-bound, bound))
}

fn init_attention(rng: &mut Rng, config: &ModelConfig) -> AttentionParams {
    let d_model = config.d_model();
    let heads = (0..config.num_heads)
        .map(|_| AttentionHead {
            query: glorot(rng, d_model, config.head_dim),
            key: glorot(rng, d_model, config.head_dim),
            value: glorot(rng, d_model, config.head_dim),
        })
        .collect();
    let output = glorot(rng, config.num_heads * config.head_dim, d_model);
    AttentionParams { heads, output }
}

fn init_stage(rng: &mut Rng, config: &ModelConfig, in_dim: usize, out_dim: usize) -> StageParams {
    StageParams {
        input_weight: glorot(rng, in_dim, config.hidden_width),
        input_bias: Matrix::zeros(1, config.hidden_width),
        norm_pre: LayerNormParams::identity(config.hidden_width),
        attention: init_attention(rng, config),
        norm_post: LayerNormParams::identity(config.d_model()),
        output_weight: glorot(rng, config.hidden_width, out_dim),
        output_bias: Matrix::zeros(1, out_dim),
    }
}

/// Fresh parameters: scaled-uniform weights, zero biases, identity
/// layer-norms. Deterministic for a given `config.seed`.
pub fn init(config: &ModelConfig) -> Result<AutoencoderParams> {
    config.validate()?;
    let mut rng = Rng::new(derive_seed(config.seed, tags::MODEL_INIT, 0));
    let encoder = init_stage(&mut rng, config, config.input_dim, config.latent_dim);
    let decoder = init_stage(&mut rng, config, config.latent_dim, config.input_dim);
    Ok(AutoencoderParams {
        config: config.clone(),
        encoder,
        decoder,
    })
}

/// Tape handles for one stage's parameters, leafed in canonical order.
pub(crate) struct StageIds {
    input_weight: NodeId,
    input_bias: NodeId,
    gamma_pre: NodeId,
    beta_pre: NodeId,
    heads: Vec<(NodeId, NodeId, NodeId)>,
    output_proj: NodeId,
    gamma_post: NodeId,
    beta_post: NodeId,
    output_weight: NodeId,
    output_bias: NodeId,
}

pub(crate) struct ParamIds {
    encoder: StageIds,
    decoder: StageIds,
}

impl ParamIds {
    /// Flat handle list matching [`AutoencoderParams::params`] order.
    pub(crate) fn flat(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for stage in [&self.encoder, &self.decoder] {
            out.push(stage.input_weight);
            out.push(stage.input_bias);
            out.push(stage.gamma_pre);
            out.push(stage.beta_pre);
            for &(q, k, v) in &stage.heads {
                out.push(q);
                out.push(k);
                out.push(v);
            }
            out.push(stage.output_proj);
            out.push(stage.gamma_post);
            out.push(stage.beta_post);
            out.push(stage.output_weight);
            out.push(stage.output_bias);
        }
        out
    }
}

fn bind_stage(tape: &mut Tape, stage: &StageParams) -> StageIds {
    StageIds {
        input_weight: tape.leaf(stage.input_weight.clone()),
        input_bias: tape.leaf(stage.input_bias.clone()),
        gamma_pre: tape.leaf(stage.norm_pre.gamma.clone()),
        beta_pre: tape.leaf(stage.norm_pre.beta.clone()),
        heads: stage
            .attention
            .heads
            .iter()
            .map(|h| {
                (
                    tape.leaf(h.query.clone()),
                    tape.leaf(h.key.clone()),
                    tape.leaf(h.value.clone()),
                )
            })
            .collect(),
        output_proj: tape.leaf(stage.attention.output.clone()),
        gamma_post: tape.leaf(stage.norm_post.gamma.clone()),
        beta_post: tape.leaf(stage.norm_post.beta.clone()),
        output_weight: tape.leaf(stage.output_weight.clone()),
        output_bias: tape.leaf(stage.output_bias.clone()),
    }
}

pub(crate) fn bind_params(tape: &mut Tape, params: &AutoencoderParams) -> ParamIds {
    ParamIds {
        encoder: bind_stage(tape, &params.encoder),
        decoder: bind_stage(tape, &params.decoder),
    }
}

/// Multi-head attention over a stacked token matrix holding `n_samples`
/// blocks of `token_count` tokens each. Attention never crosses sample
/// boundaries. Returns the output node and, optionally, the per-sample
/// per-head softmax weight nodes.
fn attention_forward(
    tape: &mut Tape,
    tokens: NodeId,
    heads: &[(NodeId, NodeId, NodeId)],
    output_proj: NodeId,
    n_samples: usize,
    token_count: usize,
    head_dim: usize,
    mut weight_sink: Option<&mut Vec<NodeId>>,
) -> Result<NodeId> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    // Project all samples' tokens at once, then attend per sample.
    let projected: Vec<(NodeId, NodeId, NodeId)> = heads
        .iter()
        .map(|&(wq, wk, wv)| {
            Ok((
                tape.matmul(tokens, wq)?,
                tape.matmul(tokens, wk)?,
                tape.matmul(tokens, wv)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut per_sample = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let start = i * token_count;
        let mut head_outputs = Vec::with_capacity(heads.len());
        for &(q_all, k_all, v_all) in &projected {
            let q = tape.slice_rows(q_all, start, token_count)?;
            let k = tape.slice_rows(k_all, start, token_count)?;
            let v = tape.slice_rows(v_all, start, token_count)?;
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scaled);
            if let Some(sink) = weight_sink.as_deref_mut() {
                sink.push(weights);
            }
            head_outputs.push(tape.matmul(weights, v)?);
        }
        per_sample.push(tape.concat_cols(&head_outputs)?);
    }
    let stacked = tape.concat_rows(&per_sample)?;
    tape.matmul(stacked, output_proj)
}

/// One stage: linear, norm, relu, tokenized attention with residual, norm,
/// linear.
pub(crate) fn stage_forward(
    tape: &mut Tape,
    ids: &StageIds,
    config: &ModelConfig,
    x: NodeId,
) -> Result<NodeId> {
    let n = tape.value(x).rows();
    let d_model = config.d_model();

    let lin = tape.matmul(x, ids.input_weight)?;
    let lin = tape.add_row_vec(lin, ids.input_bias)?;
    let normed = tape.layer_norm(lin, ids.gamma_pre, ids.beta_pre, LN_EPS)?;
    let activated = tape.relu(normed);

    let tokens = tape.reshape(activated, n * config.token_count, d_model)?;
    let attn = attention_forward(
        tape,
        tokens,
        &ids.heads,
        ids.output_proj,
        n,
        config.token_count,
        config.head_dim,
        None,
    )?;
    let residual = tape.add(tokens, attn)?;
    let post = tape.layer_norm(residual, ids.gamma_post, ids.beta_post, LN_EPS)?;

    let flat = tape.reshape(post, n, config.hidden_width)?;
    let out = tape.matmul(flat, ids.output_weight)?;
    tape.add_row_vec(out, ids.output_bias)
}

fn check_input_cols(x: &Matrix, expected: usize, op: &'static str) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::Shape {
            op,
            left_rows: x.rows(),
            left_cols: x.cols(),
            right_rows: x.rows(),
            right_cols: expected,
        });
    }
    Ok(())
}

/// Latent factors for a batch of samples (rows).
pub fn encode(params: &AutoencoderParams, x: &Matrix) -> Result<Matrix> {
    check_input_cols(x, params.config.input_dim, "encode")?;
    if x.rows() == 0 {
        return Ok(Matrix::zeros(0, params.config.latent_dim));
    }
    let mut tape = Tape::new();
    let ids = bind_stage(&mut tape, &params.encoder);
    let x_id = tape.leaf(x.clone());
    let out = stage_forward(&mut tape, &ids, &params.config, x_id)?;
    Ok(tape.value(out).clone())
}

/// Reconstructions from latent factors; mirror of [`encode`] with no output
/// activation.
pub fn decode(params: &AutoencoderParams, latent: &Matrix) -> Result<Matrix> {
    check_input_cols(latent, params.config.latent_dim, "decode")?;
    if latent.rows() == 0 {
        return Ok(Matrix::zeros(0, params.config.input_dim));
    }
    let mut tape = Tape::new();
    let ids = bind_stage(&mut tape, &params.decoder);
    let m_id = tape.leaf(latent.clone());
    let out = stage_forward(&mut tape, &ids, &params.config, m_id)?;
    Ok(tape.value(out).clone())
}

/// Output of [`multi_head_attention`]: the projected output block and the
/// per-head softmax weight matrices for inspection.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Matrix,
    pub weights: Vec<Matrix>,
}

/// Run one attention block over a single token matrix (token_count x
/// d_model).
pub fn multi_head_attention(params: &AttentionParams, tokens: &Matrix) -> Result<AttentionOutput> {
    let d_model = params.d_model();
    check_input_cols(tokens, d_model, "multi_head_attention")?;
    let mut tape = Tape::new();
    let head_ids: Vec<(NodeId, NodeId, NodeId)> = params
        .heads
        .iter()
        .map(|h| {
            (
                tape.leaf(h.query.clone()),
                tape.leaf(h.key.clone()),
                tape.leaf(h.value.clone()),
            )
        })
        .collect();
    let output_proj = tape.leaf(params.output.clone());
    let tokens_id = tape.leaf(tokens.clone());
    let mut weight_ids = Vec::new();
    let out = attention_forward(
        &mut tape,
        tokens_id,
        &head_ids,
        output_proj,
        1,
        tokens.rows(),
        params.head_dim(),
        Some(&mut weight_ids),
    )?;
    Ok(AttentionOutput {
        output: tape.value(out).clone(),
        weights: weight_ids.iter().map(|&w| tape.value(w).clone()).collect(),
    })
}

/// Mean squared reconstruction error over all elements of the batch.
pub fn mse_loss(x: &Matrix, x_rec: &Matrix) -> Result<f64> {
    crate::numcore::mean_sq_diff(x, x_rec)
}

/// Forward pass producing the reconstruction loss for `x`.
pub fn reconstruction_loss(params: &AutoencoderParams, x: &Matrix) -> Result<f64> {
    let (loss_node, tape, _) = forward_loss(params, x)?;
    Ok(tape.value(loss_node).get(0, 0))
}

/// Loss and gradients for every parameter, in [`AutoencoderParams::params`]
/// order.
pub fn reconstruction_gradients(
    params: &AutoencoderParams,
    x: &Matrix,
) -> Result<(f64, Vec<Matrix>)> {
    let (loss_node, tape, ids) = forward_loss(params, x)?;
    let grads = tape.backward(loss_node)?;
    let flat = ids.flat().iter().map(|&id| grads.wrt(id)).collect();
    Ok((tape.value(loss_node).get(0, 0), flat))
}

pub(crate) fn forward_loss(
    params: &AutoencoderParams,
    x: &Matrix,
) -> Result<(NodeId, Tape, ParamIds)> {
    check_input_cols(x, params.config.input_dim, "train")?;
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, params);
    let x_id = tape.leaf(x.clone());
    let latent = stage_forward(&mut tape, &ids.encoder, &params.config, x_id)?;
    let recon = stage_forward(&mut tape, &ids.decoder, &params.config, latent)?;
    let loss = tape.mean_sq_diff(x_id, recon)?;
    Ok((loss, tape, ids))
}

/// Write a checkpoint (config + weights) as self-describing JSON. f64 values
/// round-trip bit-exactly through serde_json's shortest-representation
/// encoding.
pub fn save_checkpoint(params: &AutoencoderParams, path: &Path) -> Result<()> {
    let json = serde_json::to_string(params)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AutoencoderParams> {
    let json = std::fs::read_to_string(path)?;
    let params: AutoencoderParams = serde_json::from_str(&json)?;
    params.config.validate()?;
    Ok(params)
}
