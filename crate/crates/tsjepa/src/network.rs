//! Patch transformer backbone: tokenizer embedding, encoder blocks,
//! latent predictor, EMA target weights, task heads and checkpoints.
//!
//! Parameters live in named [`Params`] maps; forward functions build a
//! [`Tape`] graph from mounted parameters so the same code serves both
//! the differentiable online branch and the frozen target branch.
//!
//! ```
//! use tsjepa::autodiff::{Params, Tensor};
//! use tsjepa::network::EmaState;
//!
//! let mut online = Params::new();
//! online.insert("w", Tensor::zeros((1, 1, 2)));
//! let mut ema = EmaState::new(&online, 0.998);
//!
//! // One step toward w = 1 moves the shadow by 1 − m = 0.002.
//! online.get_mut("w").fill(1.0);
//! ema.update(&online).unwrap();
//! assert!((ema.shadow.get("w")[[0, 0, 0]] - 0.002).abs() < 1e-15);
//! ```

use crate::autodiff::{MountedParams, Params, Tape, Tensor};
use crate::numerics::truncated_normal;
use crate::tokenizer::{positional_rows, MaskPlan, PatchConfig};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum NetworkError {
    #[error("embed dim {0} not divisible by {1} heads")]
    HeadsMismatch(usize, usize),
    #[error("classification head needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("shape mismatch between shadow and online parameters at `{0}`")]
    EmaShapeMismatch(String),
    #[error("non-finite value in input batch")]
    NonFiniteInput,
    #[error("mask plan expects {expected} context tokens, batch has {found}")]
    PlanMismatch { expected: usize, found: usize },
    #[error("checkpoint io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Transformer stack shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub causal: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { embed_dim: 128, num_heads: 2, num_layers: 2, ffn_dim: 512, causal: false }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.embed_dim % self.num_heads != 0 {
            return Err(NetworkError::HeadsMismatch(self.embed_dim, self.num_heads));
        }
        Ok(())
    }
}

const INIT_STD: f64 = 0.02;

fn trunc_normal_tensor(shape: (usize, usize, usize), rng: &mut impl Rng) -> Tensor {
    scaled_normal_tensor(shape, INIT_STD, rng)
}

fn scaled_normal_tensor(shape: (usize, usize, usize), std: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.iter_mut() {
        *v = truncated_normal(rng, std);
    }
    t
}

fn insert_block_params(
    params: &mut Params,
    prefix: &str,
    cfg: &TransformerConfig,
    rng: &mut impl Rng,
) {
    let d = cfg.embed_dim;
    let f = cfg.ffn_dim;
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}/{name}"), trunc_normal_tensor((1, d, d), rng));
        params.insert(format!("{prefix}/b{}", &name[1..]), Tensor::zeros((1, 1, d)));
    }
    params.insert(format!("{prefix}/ln1_g"), Tensor::ones((1, 1, d)));
    params.insert(format!("{prefix}/ln1_b"), Tensor::zeros((1, 1, d)));
    params.insert(format!("{prefix}/ln2_g"), Tensor::ones((1, 1, d)));
    params.insert(format!("{prefix}/ln2_b"), Tensor::zeros((1, 1, d)));
    params.insert(format!("{prefix}/ffn_w1"), trunc_normal_tensor((1, d, f), rng));
    params.insert(format!("{prefix}/ffn_b1"), Tensor::zeros((1, 1, f)));
    params.insert(format!("{prefix}/ffn_w2"), trunc_normal_tensor((1, f, d), rng));
    params.insert(format!("{prefix}/ffn_b2"), Tensor::zeros((1, 1, d)));
}

fn insert_final_ln(params: &mut Params, cfg: &TransformerConfig) {
    if cfg.num_layers > 0 {
        params.insert("final/ln_g", Tensor::ones((1, 1, cfg.embed_dim)));
        params.insert("final/ln_b", Tensor::zeros((1, 1, cfg.embed_dim)));
    }
}

/// Encoder parameters: patch tokenizer plus transformer blocks.
pub fn init_encoder_params(
    patch: &PatchConfig,
    cfg: &TransformerConfig,
    rng: &mut impl Rng,
) -> Params {
    let mut p = Params::new();
    let ch = patch.conv_channels;
    // The tokenizer uses fan-in-scaled init rather than the residual-stack
    // 0.02: the input signal has to survive conv → GELU → pool at unit
    // scale, or every series embeds to the same position-dominated token.
    let conv_std = 1.0 / (patch.conv_kernel as f64).sqrt();
    let proj_std = 1.0 / (ch as f64).sqrt();
    p.insert("tok/conv_w", scaled_normal_tensor((patch.conv_kernel, 1, ch), conv_std, rng));
    p.insert("tok/conv_b", Tensor::zeros((1, 1, ch)));
    p.insert("tok/proj_w", scaled_normal_tensor((1, ch, patch.embed_dim), proj_std, rng));
    p.insert("tok/proj_b", Tensor::zeros((1, 1, patch.embed_dim)));
    for i in 0..cfg.num_layers {
        insert_block_params(&mut p, &format!("layer{i}"), cfg, rng);
    }
    insert_final_ln(&mut p, cfg);
    p
}

/// Predictor parameters: learnable mask token plus transformer blocks.
pub fn init_predictor_params(cfg: &TransformerConfig, rng: &mut impl Rng) -> Params {
    let mut p = Params::new();
    p.insert("mask_token", trunc_normal_tensor((1, 1, cfg.embed_dim), rng));
    for i in 0..cfg.num_layers {
        insert_block_params(&mut p, &format!("layer{i}"), cfg, rng);
    }
    insert_final_ln(&mut p, cfg);
    p
}

/// Reconstruction decoder for the masked-autoencoder baseline: a
/// predictor-shaped stack plus a linear projection back to raw patch
/// values.
pub fn init_decoder_params(
    cfg: &TransformerConfig,
    patch_len: usize,
    rng: &mut impl Rng,
) -> Params {
    let mut p = init_predictor_params(cfg, rng);
    p.insert("out/w", trunc_normal_tensor((1, cfg.embed_dim, patch_len), rng));
    p.insert("out/b", Tensor::zeros((1, 1, patch_len)));
    p
}

/// Single linear head on (mean-pooled) latents.
pub fn init_head_params(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Params {
    let mut p = Params::new();
    p.insert("w", trunc_normal_tensor((1, in_dim, out_dim), rng));
    p.insert("b", Tensor::zeros((1, 1, out_dim)));
    p
}

/// Classification head; rejects degenerate class counts.
pub fn init_classification_head(
    in_dim: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<Params, NetworkError> {
    if classes < 2 {
        return Err(NetworkError::TooFewClasses(classes));
    }
    Ok(init_head_params(in_dim, classes, rng))
}

/// Embed raw patches `[batch, n, patch_len]` into tokens
/// `[batch, n, embed_dim]`: per-patch 1-D conv, GELU, temporal mean-pool,
/// linear projection, plus the sin-cos encoding of each patch position.
pub fn embed_patches(
    tape: &mut Tape,
    enc: &MountedParams,
    patches: &Tensor,
    positions: &[usize],
    patch_cfg: &PatchConfig,
) -> crate::autodiff::NodeId {
    let (b, n, l) = {
        let d = patches.dim();
        (d.0, d.1, d.2)
    };
    assert_eq!(n, positions.len(), "one position per patch token");
    let x = tape.constant(patches.clone());
    let x = tape.reshape(x, (b * n, l, 1));
    let conv = tape.conv1d_same(x, enc.id("tok/conv_w"), enc.id("tok/conv_b"));
    let act = tape.gelu(conv);
    let pooled = tape.mean_tokens(act); // [b*n, 1, channels]
    let proj = tape.linear(pooled, enc.id("tok/proj_w"), Some(enc.id("tok/proj_b")));
    let tokens = tape.reshape(proj, (b, n, patch_cfg.embed_dim));
    let posenc = positional_rows(positions, patch_cfg.embed_dim);
    tape.add_const(tokens, posenc)
}

fn causal_mask(tokens: usize) -> Tensor {
    let mut m = Tensor::zeros((1, tokens, tokens));
    for i in 0..tokens {
        for j in i + 1..tokens {
            m[[0, i, j]] = -1e30;
        }
    }
    m
}

/// Pre-layer-norm transformer block stack with a final layer norm
/// (identity when `num_layers == 0`).
pub fn transformer_core(
    tape: &mut Tape,
    mp: &MountedParams,
    mut x: crate::autodiff::NodeId,
    cfg: &TransformerConfig,
) -> crate::autodiff::NodeId {
    let tokens = tape.value(x).dim().1;
    let dk = cfg.embed_dim / cfg.num_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    for i in 0..cfg.num_layers {
        let p = |n: &str| mp.id(&format!("layer{i}/{n}"));
        let h = tape.layer_norm(x, p("ln1_g"), p("ln1_b"));
        let q = tape.linear(h, p("wq"), Some(p("bq")));
        let k = tape.linear(h, p("wk"), Some(p("bk")));
        let v = tape.linear(h, p("wv"), Some(p("bv")));
        let qh = tape.split_heads(q, cfg.num_heads);
        let kh = tape.split_heads(k, cfg.num_heads);
        let vh = tape.split_heads(v, cfg.num_heads);
        let scores = tape.matmul_nt(qh, kh);
        let mut scores = tape.scale(scores, scale);
        if cfg.causal {
            scores = tape.add_const(scores, causal_mask(tokens));
        }
        let att = tape.softmax(scores);
        let ctx = tape.matmul_nn(att, vh);
        let merged = tape.merge_heads(ctx, cfg.num_heads);
        let o = tape.linear(merged, p("wo"), Some(p("bo")));
        x = tape.add(x, o);

        let h2 = tape.layer_norm(x, p("ln2_g"), p("ln2_b"));
        let f1 = tape.linear(h2, p("ffn_w1"), Some(p("ffn_b1")));
        let g = tape.gelu(f1);
        let f2 = tape.linear(g, p("ffn_w2"), Some(p("ffn_b2")));
        x = tape.add(x, f2);
    }
    if cfg.num_layers > 0 {
        x = tape.layer_norm(x, mp.id("final/ln_g"), mp.id("final/ln_b"));
    }
    x
}

/// Full encoder pass: tokenize `patches` at `positions`, run the block
/// stack, return the latent node `[batch, n, embed_dim]`.
pub fn encoder_forward(
    tape: &mut Tape,
    enc: &MountedParams,
    patches: &Tensor,
    positions: &[usize],
    patch_cfg: &PatchConfig,
    cfg: &TransformerConfig,
) -> Result<crate::autodiff::NodeId, NetworkError> {
    cfg.validate()?;
    if patches.iter().any(|v| !v.is_finite()) {
        return Err(NetworkError::NonFiniteInput);
    }
    let tokens = embed_patches(tape, enc, patches, positions, patch_cfg);
    Ok(transformer_core(tape, enc, tokens, cfg))
}

/// Predict latents for the masked positions from context latents: build
/// a full-length sequence from the context tokens plus a learnable mask
/// token (carrying the sin-cos encoding of its target position) at each
/// masked slot, run the predictor stack, return the masked outputs.
pub fn predictor_forward(
    tape: &mut Tape,
    pred: &MountedParams,
    context: crate::autodiff::NodeId,
    plan: &MaskPlan,
    cfg: &TransformerConfig,
) -> Result<crate::autodiff::NodeId, NetworkError> {
    cfg.validate()?;
    let (b, n, d) = {
        let dd = tape.value(context).dim();
        (dd.0, dd.1, dd.2)
    };
    if n != plan.num_context() {
        return Err(NetworkError::PlanMismatch { expected: plan.num_context(), found: n });
    }
    let total = plan.num_patches;
    let ctx_full = tape.scatter(context, &plan.context, total);
    let mask_tok = tape.broadcast(pred.id("mask_token"), b, plan.num_masked());
    let mask_full = tape.scatter(mask_tok, &plan.masked, total);
    let seq = tape.add(ctx_full, mask_full);
    // positional encoding for the masked slots only; context tokens were
    // position-tagged when they were embedded
    let mut posenc = Tensor::zeros((1, total, d));
    for &pos in &plan.masked {
        let row = crate::tokenizer::sincos_positional(pos, d).expect("even embed dim");
        for (di, v) in row.iter().enumerate() {
            posenc[[0, pos, di]] = *v;
        }
    }
    let seq = tape.add_const(seq, posenc);
    let out = transformer_core(tape, pred, seq, cfg);
    Ok(tape.gather(out, &plan.masked))
}

/// Class logits from mean-pooled latents: `[batch, 1, classes]`.
pub fn classification_head(
    tape: &mut Tape,
    head: &MountedParams,
    latents: crate::autodiff::NodeId,
) -> crate::autodiff::NodeId {
    let pooled = tape.mean_tokens(latents);
    tape.linear(pooled, head.id("w"), Some(head.id("b")))
}

/// Next-patch values from mean-pooled latents: `[batch, 1, patch_len]`.
pub fn forecast_head_pooled(
    tape: &mut Tape,
    head: &MountedParams,
    latents: crate::autodiff::NodeId,
) -> crate::autodiff::NodeId {
    let pooled = tape.mean_tokens(latents);
    tape.linear(pooled, head.id("w"), Some(head.id("b")))
}

/// Per-token next-patch prediction: `[batch, tokens, patch_len]`.
pub fn forecast_head_per_token(
    tape: &mut Tape,
    head: &MountedParams,
    latents: crate::autodiff::NodeId,
) -> crate::autodiff::NodeId {
    tape.linear(latents, head.id("w"), Some(head.id("b")))
}

/// Shadow copy of the encoder weights, tracked as an exponential moving
/// average. Initialized as an exact copy.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub shadow: Params,
    pub momentum: f64,
}

impl EmaState {
    pub fn new(online: &Params, momentum: f64) -> Self {
        Self { shadow: online.clone(), momentum }
    }

    /// `w̄ ← m·w̄ + (1−m)·w`, elementwise.
    pub fn update(&mut self, online: &Params) -> Result<(), NetworkError> {
        let m = self.momentum;
        for (name, shadow) in self.shadow.iter_mut() {
            let w = online.get(name);
            if w.dim() != shadow.dim() {
                return Err(NetworkError::EmaShapeMismatch(name.clone()));
            }
            shadow.zip_mut_with(w, |s, &v| *s = m * *s + (1.0 - m) * v);
        }
        Ok(())
    }

    /// Encode masked patches with the shadow weights on a private tape;
    /// no gradient can reach the shadow parameters.
    pub fn encode(
        &self,
        patches: &Tensor,
        positions: &[usize],
        patch_cfg: &PatchConfig,
        cfg: &TransformerConfig,
    ) -> Result<Tensor, NetworkError> {
        let mut tape = Tape::new();
        let mp = MountedParams::mount_frozen(&mut tape, &self.shadow);
        let out = encoder_forward(&mut tape, &mp, patches, positions, patch_cfg, cfg)?;
        Ok(tape.value(out).clone())
    }
}

/// SHA-256 over parameter names and value bytes; used to assert the
/// frozen-probe protocol left the encoder untouched.
pub fn params_hash(params: &Params) -> String {
    hex::encode(Sha256::digest(params.byte_digest_input()))
}

/// Checkpoint metadata stored ahead of the tensor records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub method: String,
    pub patch: PatchConfig,
    pub model: TransformerConfig,
    pub patch_len: usize,
    pub seed: u64,
}

const CKPT_MAGIC: &[u8; 8] = b"TSJCKPT\n";

/// Write named parameter sections as flat `(name, shape, f64-LE)` records
/// behind a config header. Round-trips exactly.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    header: &CheckpointHeader,
    sections: &[(&str, &Params)],
) -> Result<(), NetworkError> {
    let path = path.as_ref();
    let io = |source| NetworkError::Io { path: path.display().to_string(), source };
    let header_bytes =
        toml::to_string(header).map_err(|e| NetworkError::Corrupt(e.to_string()))?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(header_bytes.as_bytes());
    let n_records: usize = sections.iter().map(|(_, p)| p.len()).sum();
    buf.extend_from_slice(&(n_records as u64).to_le_bytes());
    for (section, params) in sections {
        for (name, tensor) in params.iter() {
            let full = format!("{section}/{name}");
            buf.extend_from_slice(&(full.len() as u64).to_le_bytes());
            buf.extend_from_slice(full.as_bytes());
            let d = tensor.dim();
            for dim in [d.0, d.1, d.2] {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in tensor.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

/// Read a checkpoint back into per-section parameter maps.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(CheckpointHeader, IndexMap<String, Params>), NetworkError> {
    let path = path.as_ref();
    let io = |source| NetworkError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::new();
    File::open(path).map_err(io)?.read_to_end(&mut buf).map_err(io)?;
    let corrupt = |m: &str| NetworkError::Corrupt(m.to_string());
    if buf.len() < 8 || &buf[..8] != CKPT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut at = 8usize;
    let read_u64 = |buf: &[u8], at: &mut usize| -> Result<u64, NetworkError> {
        let end = *at + 8;
        if end > buf.len() {
            return Err(NetworkError::Corrupt("truncated".into()));
        }
        let v = u64::from_le_bytes(buf[*at..end].try_into().unwrap());
        *at = end;
        Ok(v)
    };
    let header_len = read_u64(&buf, &mut at)? as usize;
    if at + header_len > buf.len() {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader =
        toml::from_str(std::str::from_utf8(&buf[at..at + header_len])
            .map_err(|_| corrupt("header not utf-8"))?)
            .map_err(|e| corrupt(&e.to_string()))?;
    at += header_len;
    let n_records = read_u64(&buf, &mut at)? as usize;
    let mut sections: IndexMap<String, Params> = IndexMap::new();
    for _ in 0..n_records {
        let name_len = read_u64(&buf, &mut at)? as usize;
        if at + name_len > buf.len() {
            return Err(corrupt("truncated record name"));
        }
        let full = String::from_utf8(buf[at..at + name_len].to_vec())
            .map_err(|_| corrupt("record name not utf-8"))?;
        at += name_len;
        let d0 = read_u64(&buf, &mut at)? as usize;
        let d1 = read_u64(&buf, &mut at)? as usize;
        let d2 = read_u64(&buf, &mut at)? as usize;
        let count = d0 * d1 * d2;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_bits(read_u64(&buf, &mut at)?));
        }
        let tensor = Tensor::from_shape_vec((d0, d1, d2), values)
            .map_err(|e| corrupt(&e.to_string()))?;
        let (section, name) = full
            .split_once('/')
            .ok_or_else(|| corrupt("record name missing section"))?;
        sections
            .entry(section.to_string())
            .or_default()
            .insert(name.to_string(), tensor);
    }
    Ok((header, sections))
}

/// Hex SHA-256 of a file's bytes (checkpoint content hash).
pub fn file_hash(path: impl AsRef<Path>) -> Result<String, NetworkError> {
    let path = path.as_ref();
    let io = |source| NetworkError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::new();
    File::open(path).map_err(io)?.read_to_end(&mut buf).map_err(io)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}
