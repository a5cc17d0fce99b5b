//! Small BERT-style classifier: token + position embeddings, a stack of
//! bidirectional multi-head self-attention blocks, a tanh pooler over the
//! `[CLS]` position and a three-way polarity head.
//!
//! Segment embeddings are left out; every input is a single sentence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Polarity;
use crate::nn::{self, NnError, Tape, Tensor, Var};
use crate::tokenizer::TokenizedSequence;

pub const NUM_CLASSES: usize = 3;
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Added to attention scores at padded key positions.
pub const MASK_BIAS: f64 = -1e9;
const INIT_STD: f64 = 0.02;
const CHECKPOINT_FORMAT: &str = "survey-sentiment-encoder";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    /// Embedding / hidden width.
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            max_len: 64,
            dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            num_classes: NUM_CLASSES,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.num_heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "dim {} must be a positive multiple of num_heads {}",
                self.dim, self.num_heads
            ));
        }
        if self.max_len < 3 {
            return fail(format!("max_len {} < 3", self.max_len));
        }
        if self.vocab_size < 7 {
            return fail(format!("vocab_size {} < 7", self.vocab_size));
        }
        if self.num_classes != NUM_CLASSES {
            return fail(format!("num_classes must be {NUM_CLASSES}"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.num_layers == 0 || self.ffn_dim == 0 {
            return fail("num_layers and ffn_dim must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub query_w: Tensor,
    pub query_b: Tensor,
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub output_w: Tensor,
    pub output_b: Tensor,
    pub attn_ln_gamma: Tensor,
    pub attn_ln_beta: Tensor,
    pub ffn_in_w: Tensor,
    pub ffn_in_b: Tensor,
    pub ffn_out_w: Tensor,
    pub ffn_out_b: Tensor,
    pub ffn_ln_gamma: Tensor,
    pub ffn_ln_beta: Tensor,
}

/// All learnable weights. Matrices are stored `[in, out]` so a dense layer is
/// `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embed_ln_gamma: Tensor,
    pub embed_ln_beta: Tensor,
    pub layers: Vec<LayerParams>,
    pub pooler_w: Tensor,
    pub pooler_b: Tensor,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            query_w,
            query_b,
            key_w,
            key_b,
            value_w,
            value_b,
            output_w,
            output_b,
            attn_ln_gamma,
            attn_ln_beta,
            ffn_in_w,
            ffn_in_b,
            ffn_out_w,
            ffn_out_b,
            ffn_ln_gamma,
            ffn_ln_beta
        )
    };
}

impl EncoderParams {
    /// Shapes in canonical (checkpoint and optimizer) order.
    fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (n, f) = (cfg.dim, cfg.ffn_dim);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![cfg.vocab_size, n]),
            ("embeddings.position".to_string(), vec![cfg.max_len, n]),
            ("embeddings.ln.gamma".to_string(), vec![n]),
            ("embeddings.ln.beta".to_string(), vec![n]),
        ];
        for l in 0..cfg.num_layers {
            let shapes: [(&str, Vec<usize>); 16] = [
                ("query_w", vec![n, n]),
                ("query_b", vec![n]),
                ("key_w", vec![n, n]),
                ("key_b", vec![n]),
                ("value_w", vec![n, n]),
                ("value_b", vec![n]),
                ("output_w", vec![n, n]),
                ("output_b", vec![n]),
                ("attn_ln_gamma", vec![n]),
                ("attn_ln_beta", vec![n]),
                ("ffn_in_w", vec![n, f]),
                ("ffn_in_b", vec![f]),
                ("ffn_out_w", vec![f, n]),
                ("ffn_out_b", vec![n]),
                ("ffn_ln_gamma", vec![n]),
                ("ffn_ln_beta", vec![n]),
            ];
            out.extend(
                shapes
                    .into_iter()
                    .map(|(k, s)| (format!("layer.{l}.{k}"), s)),
            );
        }
        out.push(("pooler.w".into(), vec![n, n]));
        out.push(("pooler.b".into(), vec![n]));
        out.push(("classifier.w".into(), vec![n, NUM_CLASSES]));
        out.push(("classifier.b".into(), vec![NUM_CLASSES]));
        out
    }

    /// Rebuilds from tensors in [`EncoderParams::named`] order.
    fn from_ordered(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        let layout = Self::layout(cfg);
        if layout.len() != tensors.len() {
            return Err(ModelError::Mismatch(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Mismatch(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let embed_ln_gamma = next();
        let embed_ln_beta = next();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            macro_rules! build {
                ($($f:ident),*) => { LayerParams { $($f: next()),* } };
            }
            layers.push(layer_fields!(build));
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            embed_ln_gamma,
            embed_ln_beta,
            layers,
            pooler_w: next(),
            pooler_b: next(),
            classifier_w: next(),
            classifier_b: next(),
        })
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embeddings.token".into(), &self.token_embedding),
            ("embeddings.position".into(), &self.position_embedding),
            ("embeddings.ln.gamma".into(), &self.embed_ln_gamma),
            ("embeddings.ln.beta".into(), &self.embed_ln_beta),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => { $(out.push((format!("layer.{l}.{}", stringify!($f)), &layer.$f));)* };
            }
            layer_fields!(push);
        }
        out.push(("pooler.w".into(), &self.pooler_w));
        out.push(("pooler.b".into(), &self.pooler_b));
        out.push(("classifier.w".into(), &self.classifier_w));
        out.push(("classifier.b".into(), &self.classifier_b));
        out
    }

    /// Mutable tensors in canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embed_ln_gamma,
            &mut self.embed_ln_beta,
        ];
        for layer in &mut self.layers {
            macro_rules! push {
                ($($f:ident),*) => { $(out.push(&mut layer.$f);)* };
            }
            layer_fields!(push);
        }
        out.extend([
            &mut self.pooler_w,
            &mut self.pooler_b,
            &mut self.classifier_w,
            &mut self.classifier_b,
        ]);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Puts every tensor on `tape`, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars::from_ordered(vars, self.layers.len())
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub query_w: Var,
    pub query_b: Var,
    pub key_w: Var,
    pub key_b: Var,
    pub value_w: Var,
    pub value_b: Var,
    pub output_w: Var,
    pub output_b: Var,
    pub attn_ln_gamma: Var,
    pub attn_ln_beta: Var,
    pub ffn_in_w: Var,
    pub ffn_in_b: Var,
    pub ffn_out_w: Var,
    pub ffn_out_b: Var,
    pub ffn_ln_gamma: Var,
    pub ffn_ln_beta: Var,
}

/// Tape handles mirroring [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub embed_ln_gamma: Var,
    pub embed_ln_beta: Var,
    pub layers: Vec<LayerVars>,
    pub pooler_w: Var,
    pub pooler_b: Var,
    pub classifier_w: Var,
    pub classifier_b: Var,
    ordered: Vec<Var>,
}

impl ParamVars {
    /// Builds from handles in canonical order (`4 + 16 * layers + 4`).
    pub fn from_ordered(ordered: Vec<Var>, num_layers: usize) -> Self {
        assert_eq!(ordered.len(), 8 + 16 * num_layers, "parameter count");
        let mut it = ordered.iter().copied();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let embed_ln_gamma = next();
        let embed_ln_beta = next();
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            macro_rules! build {
                ($($f:ident),*) => { LayerVars { $($f: next()),* } };
            }
            layers.push(layer_fields!(build));
        }
        Self {
            token_embedding,
            position_embedding,
            embed_ln_gamma,
            embed_ln_beta,
            layers,
            pooler_w: next(),
            pooler_b: next(),
            classifier_w: next(),
            classifier_b: next(),
            ordered,
        }
    }

    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }
}

/// Weights ~ N(0, 0.02²) truncated at ±2σ; biases and layer-norm β zero;
/// layer-norm γ one. Drawn in canonical order from `ChaCha8Rng(seed)`.
pub fn init_params(cfg: &ModelConfig) -> Result<EncoderParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = EncoderParams::layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with("gamma") {
                Tensor::ones(&shape)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let count = shape.iter().product();
                let data = (0..count)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break v;
                        }
                    })
                    .collect();
                Tensor::new(&shape, data).expect("layout shape")
            }
        })
        .collect();
    EncoderParams::from_ordered(cfg, tensors)
}

fn check_len(seq: &TokenizedSequence, cfg: &ModelConfig) -> Result<(), ModelError> {
    if seq.ids.len() > cfg.max_len || seq.ids.len() != seq.mask.len() {
        return Err(ModelError::SequenceTooLong {
            len: seq.ids.len(),
            max_len: cfg.max_len,
        });
    }
    Ok(())
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn maybe_dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var, NnError> {
    match rng {
        Some(r) => tape.dropout(x, rate, &mut **r),
        None => Ok(x),
    }
}

/// Token plus position embedding for every position (padding included),
/// then layer norm and dropout. Output is `[seq_len, dim]`.
pub fn embed(
    tape: &mut Tape,
    pv: &ParamVars,
    seq: &TokenizedSequence,
    cfg: &ModelConfig,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    check_len(seq, cfg)?;
    let len = seq.ids.len();
    let tokens = tape.gather_rows(pv.token_embedding, &seq.ids)?;
    let positions = tape.slice(pv.position_embedding, 0, 0, len)?;
    let sum = tape.add(tokens, positions)?;
    let normed = tape.layer_norm(sum, pv.embed_ln_gamma, pv.embed_ln_beta, LAYER_NORM_EPS)?;
    Ok(maybe_dropout(tape, normed, cfg.dropout_rate, &mut dropout)?)
}

/// Output of one encoder block, with the per-head attention weights
/// (`[seq_len, seq_len]`, rows = queries) before dropout.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

/// Additive key mask: 0 for real keys and [`MASK_BIAS`] for padding, the
/// same for every query row.
pub fn mask_bias(mask: &[u8]) -> Tensor {
    let len = mask.len();
    let mut data = Vec::with_capacity(len * len);
    for _ in 0..len {
        data.extend(mask.iter().map(|&m| if m == 0 { MASK_BIAS } else { 0.0 }));
    }
    Tensor::new(&[len, len], data).expect("square mask")
}

/// Bidirectional multi-head self-attention with residual + layer norm,
/// followed by a GELU feed-forward with residual + layer norm.
pub fn attention_block(
    tape: &mut Tape,
    x: Var,
    mask: &[u8],
    lv: &LayerVars,
    cfg: &ModelConfig,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<BlockOutput, ModelError> {
    let shape = tape.shape(x).to_vec();
    if shape != [mask.len(), cfg.dim] {
        return Err(NnError::Shape {
            op: "attention_block",
            lhs: shape,
            rhs: vec![mask.len(), cfg.dim],
        }
        .into());
    }
    let rate = cfg.dropout_rate;
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let bias = tape.constant(mask_bias(mask));

    let q = dense(tape, x, lv.query_w, lv.query_b)?;
    let k = dense(tape, x, lv.key_w, lv.key_b)?;
    let v = dense(tape, x, lv.value_w, lv.value_b)?;

    let mut contexts = Vec::with_capacity(cfg.num_heads);
    let mut attention = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice(q, 1, h * head_dim, head_dim)?;
        let kh = tape.slice(k, 1, h * head_dim, head_dim)?;
        let vh = tape.slice(v, 1, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.add(scores, bias)?;
        let weights = tape.softmax(scores, 1)?;
        attention.push(weights);
        let weights = maybe_dropout(tape, weights, rate, &mut dropout)?;
        contexts.push(tape.matmul(weights, vh)?);
    }
    let context = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat(&contexts, 1)?
    };
    let attn_out = dense(tape, context, lv.output_w, lv.output_b)?;
    let attn_out = maybe_dropout(tape, attn_out, rate, &mut dropout)?;
    let res = tape.add(x, attn_out)?;
    let h1 = tape.layer_norm(res, lv.attn_ln_gamma, lv.attn_ln_beta, LAYER_NORM_EPS)?;

    let inner = dense(tape, h1, lv.ffn_in_w, lv.ffn_in_b)?;
    let inner = tape.gelu(inner)?;
    let ffn = dense(tape, inner, lv.ffn_out_w, lv.ffn_out_b)?;
    let ffn = maybe_dropout(tape, ffn, rate, &mut dropout)?;
    let res = tape.add(h1, ffn)?;
    let hidden = tape.layer_norm(res, lv.ffn_ln_gamma, lv.ffn_ln_beta, LAYER_NORM_EPS)?;
    Ok(BlockOutput { hidden, attention })
}

/// Full forward pass to `[1, 3]` logits. `dropout = None` is inference mode.
pub fn forward(
    tape: &mut Tape,
    pv: &ParamVars,
    seq: &TokenizedSequence,
    cfg: &ModelConfig,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<BlockOutput>), ModelError> {
    let mut x = embed(tape, pv, seq, cfg, dropout.as_deref_mut())?;
    let mut blocks = Vec::with_capacity(pv.layers.len());
    for lv in &pv.layers {
        let out = attention_block(tape, x, &seq.mask, lv, cfg, dropout.as_deref_mut())?;
        x = out.hidden;
        blocks.push(out);
    }
    let cls = tape.slice(x, 0, 0, 1)?;
    let pooled = dense(tape, cls, pv.pooler_w, pv.pooler_b)?;
    let pooled = tape.tanh(pooled)?;
    let logits = dense(tape, pooled, pv.classifier_w, pv.classifier_b)?;
    Ok((logits, blocks))
}

/// Inference-mode logits for one sequence.
pub fn classify(
    seq: &TokenizedSequence,
    params: &EncoderParams,
    cfg: &ModelConfig,
) -> Result<[f64; NUM_CLASSES], ModelError> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let (logits, _) = forward(&mut tape, &pv, seq, cfg, None)?;
    let d = tape.value(logits).data();
    Ok([d[0], d[1], d[2]])
}

/// Argmax with ties resolved toward the lower class index.
pub fn argmax_polarity(logits: &[f64; NUM_CLASSES]) -> Polarity {
    let mut best = 0;
    for i in 1..NUM_CLASSES {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    Polarity::from_index(best).expect("three classes")
}

pub fn predict(
    seq: &TokenizedSequence,
    params: &EncoderParams,
    cfg: &ModelConfig,
) -> Result<Polarity, ModelError> {
    classify(seq, params, cfg).map(|l| argmax_polarity(&l))
}

/// Class probabilities from logits.
pub fn probabilities(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let p = nn::softmax_along(logits, &[NUM_CLASSES], 0);
    [p[0], p[1], p[2]]
}

/// A trained model plus the fingerprint of the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: EncoderParams,
    pub vocab_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: ModelConfig,
    vocab_sha256: String,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: W) -> Result<(), ModelError> {
        let meta = serde_json::to_value(CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            vocab_sha256: self.vocab_sha256.clone(),
        })
        .map_err(|e| ModelError::Mismatch(e.to_string()))?;
        nn::write_params(w, &meta, &self.params.named())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, ModelError> {
        let (meta, tensors) = nn::read_params(r)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| ModelError::Mismatch(e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Mismatch(format!(
                "unknown format {:?}",
                meta.format
            )));
        }
        meta.config.validate()?;
        let layout = EncoderParams::layout(&meta.config);
        for ((want, _), (got, _)) in layout.iter().zip(&tensors) {
            if want != got {
                return Err(ModelError::Mismatch(format!(
                    "expected tensor {want}, found {got}"
                )));
            }
        }
        let params = EncoderParams::from_ordered(
            &meta.config,
            tensors.into_iter().map(|(_, t)| t).collect(),
        )?;
        Ok(Self {
            config: meta.config,
            params,
            vocab_sha256: meta.vocab_sha256,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io)?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = File::open(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(BufReader::new(file))
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS_ID, SEP_ID};
    use approx::assert_abs_diff_eq;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            max_len: 8,
            dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            dropout_rate: 0.0,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn seq(ids: &[u32], max_len: usize) -> TokenizedSequence {
        TokenizedSequence::from_ids(ids, max_len)
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        for bad in [
            ModelConfig { dim: 9, ..tiny() },
            ModelConfig {
                max_len: 2,
                ..tiny()
            },
            ModelConfig {
                vocab_size: 6,
                ..tiny()
            },
            ModelConfig {
                num_classes: 2,
                ..tiny()
            },
            ModelConfig {
                dropout_rate: 1.0,
                ..tiny()
            },
            ModelConfig {
                num_layers: 0,
                ..tiny()
            },
        ] {
            assert!(
                matches!(init_params(&bad), Err(ModelError::Config(_))),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn init_is_seeded_and_structured() {
        let a = init_params(&tiny()).unwrap();
        let b = init_params(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = init_params(&ModelConfig { seed: 6, ..tiny() }).unwrap();
        assert_ne!(a, c);
        for layer in &a.layers {
            assert!(layer.attn_ln_gamma.data().iter().all(|&v| v == 1.0));
            assert!(layer.ffn_ln_beta.data().iter().all(|&v| v == 0.0));
            assert!(layer.query_b.data().iter().all(|&v| v == 0.0));
        }
        assert!(a.embed_ln_gamma.data().iter().all(|&v| v == 1.0));
        let bound = 2.0 * INIT_STD;
        assert!(a
            .tensors()
            .iter()
            .all(|t| t.data().iter().all(|v| v.abs() <= bound || *v == 1.0)));
        assert_eq!(a.named().len(), 8 + 16 * 2);
    }

    #[test]
    fn init_std_close_to_target() {
        let cfg = ModelConfig {
            vocab_size: 200,
            dim: 64,
            num_heads: 4,
            ..tiny()
        };
        let p = init_params(&cfg).unwrap();
        let d = p.token_embedding.data();
        assert!(d.len() >= 10_000);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.2 * 0.02, "std {std}");
    }

    #[test]
    fn embed_is_additive_before_norm() {
        let cfg = tiny();
        let p = init_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let pv = p.register(&mut tape, false);
        let s = seq(&[CLS_ID, 9, 9, SEP_ID], 8);
        let tokens = tape.gather_rows(pv.token_embedding, &s.ids).unwrap();
        let pos = tape.slice(pv.position_embedding, 0, 0, 8).unwrap();
        let sum = tape.add(tokens, pos).unwrap();
        let (r1, r2) = (
            tape.value(sum).row(1).to_vec(),
            tape.value(sum).row(2).to_vec(),
        );
        for j in 0..cfg.dim {
            let dpos = p.position_embedding.row(1)[j] - p.position_embedding.row(2)[j];
            assert_abs_diff_eq!(r1[j] - r2[j], dpos, epsilon = 1e-15);
        }
        let out = embed(&mut tape, &pv, &s, &cfg, None).unwrap();
        assert_eq!(tape.shape(out), &[8, 8]);
        // padded rows still get vectors
        assert!(tape.value(out).row(6).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn embed_rejects_bad_ids() {
        let cfg = tiny();
        let p = init_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let pv = p.register(&mut tape, false);
        let err = embed(&mut tape, &pv, &seq(&[CLS_ID, 30, SEP_ID], 8), &cfg, None).unwrap_err();
        assert!(matches!(
            err,
            ModelError::Nn(NnError::Index { index: 30, .. })
        ));
        let err = embed(&mut tape, &pv, &seq(&[CLS_ID, SEP_ID], 9), &cfg, None).unwrap_err();
        assert!(matches!(err, ModelError::SequenceTooLong { .. }));
    }

    #[test]
    fn attention_rows_are_distributions_over_real_keys() {
        let cfg = tiny();
        let p = init_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let pv = p.register(&mut tape, false);
        let s = seq(&[CLS_ID, 7, 8, SEP_ID], 8);
        let (_, blocks) = forward(&mut tape, &pv, &s, &cfg, None).unwrap();
        for b in &blocks {
            for &w in &b.attention {
                let t = tape.value(w);
                for r in 0..8 {
                    let row = t.row(r);
                    assert_abs_diff_eq!(row[..4].iter().sum::<f64>(), 1.0, epsilon = 1e-9);
                    assert!(row[4..].iter().all(|&v| v < 1e-30));
                }
            }
        }
    }

    /// Q = K = V = I on a 2-token input, one head, width 2, no padding.
    #[test]
    fn attention_matches_hand_oracle() {
        let cfg = ModelConfig {
            vocab_size: 7,
            max_len: 2,
            dim: 2,
            num_layers: 1,
            num_heads: 1,
            ffn_dim: 2,
            ..tiny()
        };
        let x_val = Tensor::new(&[2, 2], vec![1.0, 0.5, -0.25, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(x_val.clone());
        let eye = tape.constant(Tensor::eye(2));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let one = tape.constant(Tensor::ones(&[2]));
        let zero_ffn = tape.constant(Tensor::zeros(&[2, 2]));
        let lv = LayerVars {
            query_w: eye,
            query_b: zero,
            key_w: eye,
            key_b: zero,
            value_w: eye,
            value_b: zero,
            output_w: eye,
            output_b: zero,
            attn_ln_gamma: one,
            attn_ln_beta: zero,
            ffn_in_w: zero_ffn,
            ffn_in_b: zero,
            ffn_out_w: zero_ffn,
            ffn_out_b: zero,
            ffn_ln_gamma: one,
            ffn_ln_beta: zero,
        };
        let out = attention_block(&mut tape, x, &[1, 1], &lv, &cfg, None).unwrap();

        // brute force: weights[i][j] = softmax_j(x_i · x_j / sqrt(2)), ctx = weights · x
        let xv = |i: usize, j: usize| x_val.data()[i * 2 + j];
        let mut ctx = [[0.0; 2]; 2];
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (xv(i, 0) * xv(j, 0) + xv(i, 1) * xv(j, 1)) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            let w: Vec<f64> = s.iter().map(|v| v.exp() / z).collect();
            let got = tape.value(out.attention[0]).row(i);
            for j in 0..2 {
                assert_abs_diff_eq!(got[j], w[j], epsilon = 1e-9);
                for c in 0..2 {
                    ctx[i][c] += w[j] * xv(j, c);
                }
            }
        }
        // residual + layer norm on a width-2 row is sign(a - b) * [1, -1]
        // (up to eps); the zero FFN then leaves it unchanged.
        for i in 0..2 {
            let r = [xv(i, 0) + ctx[i][0], xv(i, 1) + ctx[i][1]];
            let mean = (r[0] + r[1]) / 2.0;
            let sd =
                (((r[0] - mean).powi(2) + (r[1] - mean).powi(2)) / 2.0 + LAYER_NORM_EPS).sqrt();
            let h = [(r[0] - mean) / sd, (r[1] - mean) / sd];
            let sd2 = ((h[0].powi(2) + h[1].powi(2)) / 2.0 + LAYER_NORM_EPS).sqrt();
            let row = tape.value(out.hidden).row(i);
            assert_abs_diff_eq!(row[0], h[0] / sd2, epsilon = 1e-9);
            assert_abs_diff_eq!(row[1], h[1] / sd2, epsilon = 1e-9);
        }
    }

    #[test]
    fn classify_shape_and_masking() {
        let cfg = ModelConfig {
            max_len: 32,
            ..tiny()
        };
        let p = init_params(&cfg).unwrap();
        let ids = [CLS_ID, 11, 12, 13, SEP_ID];
        let short = classify(&seq(&ids, 16), &p, &cfg).unwrap();
        let long = classify(&seq(&ids, 32), &p, &cfg).unwrap();
        for c in 0..3 {
            assert_abs_diff_eq!(short[c], long[c], epsilon = 1e-12);
        }
        let mut garbage = seq(&ids, 16);
        for (i, id) in garbage.ids.iter_mut().enumerate().skip(5) {
            *id = (i as u32 * 7) % 30;
        }
        let g = classify(&garbage, &p, &cfg).unwrap();
        assert_eq!(g, short);
    }

    #[test]
    fn predict_tie_break_and_shift() {
        assert_eq!(argmax_polarity(&[0.1, 0.1, 0.9]), Polarity::Positive);
        assert_eq!(argmax_polarity(&[0.5, 0.5, 0.1]), Polarity::Negative);
        assert_eq!(argmax_polarity(&[0.0, 0.0, 0.0]), Polarity::Negative);
        assert_eq!(argmax_polarity(&[0.1, 0.7, 0.7]), Polarity::Neutral);
        let l = [0.3, -1.2, 0.29];
        assert_eq!(argmax_polarity(&l), argmax_polarity(&l.map(|v| v + 5.0)));
    }

    #[test]
    fn dropout_training_is_reproducible() {
        let cfg = ModelConfig {
            dropout_rate: 0.3,
            ..tiny()
        };
        let p = init_params(&cfg).unwrap();
        let s = seq(&[CLS_ID, 7, 8, SEP_ID], 8);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let pv = p.register(&mut tape, true);
            let (l, _) = forward(&mut tape, &pv, &s, &cfg, Some(&mut rng)).unwrap();
            tape.value(l).data().to_vec()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        // inference ignores the rate
        assert_eq!(
            classify(&s, &p, &cfg).unwrap(),
            classify(&s, &p, &cfg).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let cfg = tiny();
        let ck = Checkpoint {
            config: cfg.clone(),
            params: init_params(&cfg).unwrap(),
            vocab_sha256: "abc".into(),
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(buf.as_slice()).unwrap(), ck);

        // same tensors under a config that disagrees on shapes
        let wrong = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            config: ModelConfig { ffn_dim: 12, ..cfg },
            vocab_sha256: "abc".into(),
        };
        let mut buf = Vec::new();
        nn::write_params(
            &mut buf,
            &serde_json::to_value(wrong).unwrap(),
            &ck.params.named(),
        )
        .unwrap();
        assert!(matches!(
            Checkpoint::read_from(buf.as_slice()),
            Err(ModelError::Mismatch(_))
        ));
    }
}
