//! Model parameters, the forward pass, the NLL loss, and model-file
//! persistence.
//!
//! The network encodes each document independently (sparse embedding, then
//! two tanh layers), pools the per-document representations into one
//! encounter vector, and classifies that vector with a two-class softmax.
//! Pooling is where the two modes diverge: `eldan` scores each document with
//! a small attention head and takes the softmax-weighted sum; `eldn` simply
//! averages. Everything is `f64` — gradient checking needs the headroom, and
//! the models here are small enough that speed is not worth the precision.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeId, Encounter, Label, SparseDocVector};
use crate::linalg::{self, Matrix};

/// Pooling mode: learned attention or uniform averaging.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Attention-weighted pooling (the full model).
    Eldan,
    /// Uniform-average pooling (the ablation baseline).
    Eldn,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Eldan => write!(f, "eldan"),
            Mode::Eldn => write!(f, "eldn"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eldan" => Ok(Mode::Eldan),
            "eldn" => Ok(Mode::Eldn),
            other => Err(format!("unknown mode {other:?} (expected \"eldan\" or \"eldn\")")),
        }
    }
}

/// Layer widths. The output layer is always two classes (one-vs-all).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Sparse input dimensionality D.
    pub feature_dim: usize,
    /// Document embedding width.
    pub embed_dim: usize,
    /// First encoder layer width.
    pub enc1_dim: usize,
    /// Second encoder layer width — the document representation the pooler
    /// and the classifier both consume.
    pub enc2_dim: usize,
    /// Attention head width (unused tensors in `eldn` mode, but kept in the
    /// header so both modes share one layout).
    pub attn_dim: usize,
}

pub const N_CLASSES: usize = 2;

impl Dims {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("enc1_dim", self.enc1_dim),
            ("enc2_dim", self.enc2_dim),
            ("attn_dim", self.attn_dim),
        ];
        for (name, v) in all {
            if v == 0 {
                return Err(ModelError::BadDims { dim: name });
            }
        }
        Ok(())
    }
}

/// The attention head: a tanh transform of each document representation
/// scored against a learned context vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub context: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub mode: Mode,
    /// The code this model detects; `None` until a trainer assigns one.
    pub target: Option<CodeId>,
    /// Seed the parameters were drawn from (provenance, not behaviour).
    pub seed: u64,
    pub w_embed: Matrix,
    pub enc1_w: Matrix,
    pub enc1_b: Vec<f64>,
    pub enc2_w: Matrix,
    pub enc2_b: Vec<f64>,
    pub attention: Option<AttentionParams>,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

impl ModelParams {
    /// Errors unless the model was trained for `feature_dim`-wide inputs —
    /// the first thing every evaluation entry point checks.
    pub fn check_feature_dim(&self, corpus_feature_dim: usize) -> Result<(), ModelError> {
        if self.dims.feature_dim != corpus_feature_dim {
            return Err(ModelError::FeatureDimMismatch {
                model: self.dims.feature_dim,
                corpus: corpus_feature_dim,
            });
        }
        Ok(())
    }
}

/// Per-document activations kept around for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DocTrace {
    /// Sparse embedding output (no bias, no nonlinearity).
    pub embedding: Vec<f64>,
    /// First encoder layer activation.
    pub hidden: Vec<f64>,
    /// Document representation (second encoder layer activation).
    pub repr: Vec<f64>,
    /// Attention head activation; `None` in uniform-pooling mode.
    pub attn_hidden: Option<Vec<f64>>,
}

/// Everything the forward pass computed for one encounter.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub docs: Vec<DocTrace>,
    /// Pooling weights; nonnegative, one per document, summing to 1.
    pub attention: Vec<f64>,
    /// Pooled encounter representation.
    pub pooled: Vec<f64>,
    pub logits: [f64; N_CLASSES],
    pub probs: [f64; N_CLASSES],
}

impl ForwardTrace {
    /// Predicted label: positive iff the positive class strictly wins.
    pub fn predicted(&self) -> Label {
        Label::from_bool(self.probs[1] > self.probs[0])
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension {dim} must be positive")]
    BadDims { dim: &'static str },
    #[error("encounter {encounter_id:?} has no documents")]
    EmptyEncounter { encounter_id: String },
    #[error("doc {doc_id:?}: feature {feature} is out of range for feature_dim {feature_dim}")]
    FeatureOutOfRange { doc_id: String, feature: u32, feature_dim: usize },
    #[error("non-finite value in {stage} for encounter {encounter_id:?}")]
    NonFinite { stage: &'static str, encounter_id: String },
    #[error("attention weights requested from a uniform-pooling (eldn) model")]
    NoAttentionHead,
    #[error("pooling got {n_weights} weights for {n_docs} documents")]
    PoolLengthMismatch { n_docs: usize, n_weights: usize },
    #[error("model expects feature_dim {model} but the corpus has feature_dim {corpus}")]
    FeatureDimMismatch { model: usize, corpus: usize },
    #[error("I/O error on model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model file version {found} (this build reads version 1)")]
    UnsupportedVersion { found: u8 },
    #[error("model header is not valid JSON: {0}")]
    HeaderJson(String),
    #[error("unsupported value width {width} (this build reads 64-bit values)")]
    UnsupportedValueWidth { width: u8 },
    #[error("model file is truncated inside tensor {tensor}")]
    Truncated { tensor: &'static str },
    #[error("model file has {extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
}

/// Draws Uniform(−b, b) with b = √(6 / (fan_in + fan_out)).
fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| bound * (2.0 * rng.gen::<f64>() - 1.0))
}

/// Fresh parameters for the given shape. Weight matrices are Glorot-uniform,
/// biases zero. The draw sequence is fixed (embedding, encoder 1, encoder 2,
/// attention transform, context vector, output) so a seed pins every entry;
/// `eldn` models simply skip the attention draws.
pub fn init_params(dims: Dims, mode: Mode, seed: u64) -> ModelParams {
    dims.validate().expect("init_params requires valid dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims;
    let w_embed = glorot(&mut rng, d.embed_dim, d.feature_dim, d.feature_dim, d.embed_dim);
    let enc1_w = glorot(&mut rng, d.enc1_dim, d.embed_dim, d.embed_dim, d.enc1_dim);
    let enc2_w = glorot(&mut rng, d.enc2_dim, d.enc1_dim, d.enc1_dim, d.enc2_dim);
    let attention = match mode {
        Mode::Eldan => {
            let w = glorot(&mut rng, d.attn_dim, d.enc2_dim, d.enc2_dim, d.attn_dim);
            let context = {
                let bound = (6.0 / (d.attn_dim + 1) as f64).sqrt();
                (0..d.attn_dim).map(|_| bound * (2.0 * rng.gen::<f64>() - 1.0)).collect()
            };
            Some(AttentionParams { w, b: vec![0.0; d.attn_dim], context })
        }
        Mode::Eldn => None,
    };
    let out_w = glorot(&mut rng, N_CLASSES, d.enc2_dim, d.enc2_dim, N_CLASSES);
    ModelParams {
        dims,
        mode,
        target: None,
        seed,
        w_embed,
        enc1_w,
        enc1_b: vec![0.0; d.enc1_dim],
        enc2_w,
        enc2_b: vec![0.0; d.enc2_dim],
        attention,
        out_w,
        out_b: vec![0.0; N_CLASSES],
    }
}

/// Sparse embedding: the weighted sum of the matrix columns named by the
/// document's features. No bias, no nonlinearity.
pub fn embed_document(x: &SparseDocVector, w_embed: &Matrix) -> Result<Vec<f64>, ModelError> {
    let feature_dim = w_embed.cols();
    for &(crate::corpus::FeatureId(f), _) in &x.entries {
        if f as usize >= feature_dim {
            return Err(ModelError::FeatureOutOfRange {
                doc_id: x.doc_id.clone(),
                feature: f,
                feature_dim,
            });
        }
    }
    let mut h0 = vec![0.0; w_embed.rows()];
    for (e, out) in h0.iter_mut().enumerate() {
        let row = w_embed.row(e);
        let mut acc = 0.0;
        for &(crate::corpus::FeatureId(f), v) in &x.entries {
            acc += v * row[f as usize];
        }
        *out = acc;
    }
    Ok(h0)
}

/// Runs one document through the embedding and both encoder layers.
pub fn encode_document(x: &SparseDocVector, params: &ModelParams) -> Result<DocTrace, ModelError> {
    let embedding = embed_document(x, &params.w_embed)?;
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { stage: "document embedding", encounter_id: x.doc_id.clone() });
    }
    let mut z1 = params.enc1_w.matvec(&embedding);
    linalg::add_assign_vec(&mut z1, &params.enc1_b);
    let hidden = linalg::tanh_vec(&z1);
    let mut z2 = params.enc2_w.matvec(&hidden);
    linalg::add_assign_vec(&mut z2, &params.enc2_b);
    let repr = linalg::tanh_vec(&z2);
    Ok(DocTrace { embedding, hidden, repr, attn_hidden: None })
}

/// Attention head internals: per-document tanh activations and the softmax
/// of their dot products with the context vector.
fn attention_scores(reprs: &[&[f64]], attn: &AttentionParams) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut hiddens = Vec::with_capacity(reprs.len());
    let mut scores = Vec::with_capacity(reprs.len());
    for repr in reprs {
        let mut z = attn.w.matvec(repr);
        linalg::add_assign_vec(&mut z, &attn.b);
        let u = linalg::tanh_vec(&z);
        scores.push(linalg::dot(&u, &attn.context));
        hiddens.push(u);
    }
    let a = linalg::softmax(&scores);
    (hiddens, a)
}

/// Attention weights over a document list. Only meaningful for `eldan`
/// models; a uniform-pooling model has no attention head to ask.
pub fn attention_weights(reprs: &[Vec<f64>], params: &ModelParams) -> Result<Vec<f64>, ModelError> {
    if reprs.is_empty() {
        return Err(ModelError::EmptyEncounter { encounter_id: String::new() });
    }
    let attn = params.attention.as_ref().ok_or(ModelError::NoAttentionHead)?;
    let refs: Vec<&[f64]> = reprs.iter().map(|r| r.as_slice()).collect();
    let (_, a) = attention_scores(&refs, attn);
    Ok(a)
}

/// Weighted sum of document representations.
pub fn pool_encounter(reprs: &[Vec<f64>], a: &[f64]) -> Result<Vec<f64>, ModelError> {
    if reprs.len() != a.len() {
        return Err(ModelError::PoolLengthMismatch { n_docs: reprs.len(), n_weights: a.len() });
    }
    debug_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9, "pooling weights must sum to 1");
    let width = reprs.first().map_or(0, |r| r.len());
    let mut pooled = vec![0.0; width];
    for (repr, &w) in reprs.iter().zip(a) {
        linalg::axpy(&mut pooled, w, repr);
    }
    Ok(pooled)
}

/// Full forward pass over one encounter.
pub fn predict(enc: &Encounter, params: &ModelParams) -> Result<ForwardTrace, ModelError> {
    if enc.documents.is_empty() {
        return Err(ModelError::EmptyEncounter { encounter_id: enc.encounter_id.clone() });
    }
    let mut docs: Vec<DocTrace> = enc
        .documents
        .iter()
        .map(|x| encode_document(x, params))
        .collect::<Result<_, _>>()?;
    let m = docs.len();
    let attention = match (params.mode, &params.attention) {
        (Mode::Eldan, Some(attn)) => {
            let reprs: Vec<&[f64]> = docs.iter().map(|t| t.repr.as_slice()).collect();
            let (hiddens, a) = attention_scores(&reprs, attn);
            for (t, u) in docs.iter_mut().zip(hiddens) {
                t.attn_hidden = Some(u);
            }
            a
        }
        (Mode::Eldan, None) => return Err(ModelError::NoAttentionHead),
        (Mode::Eldn, _) => vec![1.0 / m as f64; m],
    };
    let reprs: Vec<Vec<f64>> = docs.iter().map(|t| t.repr.clone()).collect();
    let pooled = pool_encounter(&reprs, &attention)?;
    let mut z = params.out_w.matvec(&pooled);
    linalg::add_assign_vec(&mut z, &params.out_b);
    let logits = [z[0], z[1]];
    if !logits[0].is_finite() || !logits[1].is_finite() {
        return Err(ModelError::NonFinite { stage: "logits", encounter_id: enc.encounter_id.clone() });
    }
    let p = linalg::softmax(&logits);
    Ok(ForwardTrace { docs, attention, pooled, logits, probs: [p[0], p[1]] })
}

/// Negative log-likelihood of the true label, computed in the log domain
/// from the logits (never by logging an already-rounded probability).
pub fn nll_loss(trace: &ForwardTrace, y: Label) -> f64 {
    linalg::log_sum_exp(&trace.logits) - trace.logits[y.class_index()]
}

const MAGIC: &[u8; 5] = b"ELDAN";
const FORMAT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    feature_dim: usize,
    embed_dim: usize,
    enc1_dim: usize,
    enc2_dim: usize,
    attn_dim: usize,
    mode: Mode,
    target: Option<String>,
    seed: u64,
    value_width: u8,
}

/// Tensors in on-disk order, shared by save and load so they cannot drift.
fn tensor_layout(params: &ModelParams) -> Vec<(&'static str, usize)> {
    let d = &params.dims;
    let mut layout = vec![
        ("embedding", d.embed_dim * d.feature_dim),
        ("encoder-1 weights", d.enc1_dim * d.embed_dim),
        ("encoder-1 bias", d.enc1_dim),
        ("encoder-2 weights", d.enc2_dim * d.enc1_dim),
        ("encoder-2 bias", d.enc2_dim),
    ];
    if params.mode == Mode::Eldan {
        layout.push(("attention weights", d.attn_dim * d.enc2_dim));
        layout.push(("attention bias", d.attn_dim));
        layout.push(("attention context", d.attn_dim));
    }
    layout.push(("output weights", N_CLASSES * d.enc2_dim));
    layout.push(("output bias", N_CLASSES));
    layout
}

fn tensor_slices(params: &ModelParams) -> Vec<&[f64]> {
    let mut slices = vec![
        params.w_embed.as_slice(),
        params.enc1_w.as_slice(),
        params.enc1_b.as_slice(),
        params.enc2_w.as_slice(),
        params.enc2_b.as_slice(),
    ];
    if let Some(attn) = &params.attention {
        slices.push(attn.w.as_slice());
        slices.push(attn.b.as_slice());
        slices.push(attn.context.as_slice());
    }
    slices.push(params.out_w.as_slice());
    slices.push(params.out_b.as_slice());
    slices
}

/// Writes `magic ‖ version ‖ header-length ‖ JSON header ‖ tensors`, where
/// the tensors are little-endian f64 in a fixed row-major order.
pub fn save_model(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let header = ModelHeader {
        feature_dim: params.dims.feature_dim,
        embed_dim: params.dims.embed_dim,
        enc1_dim: params.dims.enc1_dim,
        enc2_dim: params.dims.enc2_dim,
        attn_dim: params.dims.attn_dim,
        mode: params.mode,
        target: params.target.as_ref().map(|c| c.as_str().to_string()),
        seed: params.seed,
        value_width: 64,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| ModelError::HeaderJson(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for slice in tensor_slices(params) {
        for v in slice {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R, len: usize, name: &'static str) -> Result<Vec<f64>, ModelError> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf).map_err(|_| ModelError::Truncated { tensor: name })?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn load_model(path: &Path) -> Result<ModelParams, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| ModelError::BadMagic)?;
    if &magic != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version).map_err(|_| ModelError::BadMagic)?;
    if version[0] != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion { found: version[0] });
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|_| ModelError::Truncated { tensor: "header" })?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| ModelError::Truncated { tensor: "header" })?;
    let header: ModelHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| ModelError::HeaderJson(e.to_string()))?;
    if header.value_width != 64 {
        return Err(ModelError::UnsupportedValueWidth { width: header.value_width });
    }
    let dims = Dims {
        feature_dim: header.feature_dim,
        embed_dim: header.embed_dim,
        enc1_dim: header.enc1_dim,
        enc2_dim: header.enc2_dim,
        attn_dim: header.attn_dim,
    };
    dims.validate()?;

    let mut params = ModelParams {
        dims,
        mode: header.mode,
        target: header.target.map(CodeId::new),
        seed: header.seed,
        w_embed: Matrix::zeros(dims.embed_dim, dims.feature_dim),
        enc1_w: Matrix::zeros(dims.enc1_dim, dims.embed_dim),
        enc1_b: vec![0.0; dims.enc1_dim],
        enc2_w: Matrix::zeros(dims.enc2_dim, dims.enc1_dim),
        enc2_b: vec![0.0; dims.enc2_dim],
        attention: match header.mode {
            Mode::Eldan => Some(AttentionParams {
                w: Matrix::zeros(dims.attn_dim, dims.enc2_dim),
                b: vec![0.0; dims.attn_dim],
                context: vec![0.0; dims.attn_dim],
            }),
            Mode::Eldn => None,
        },
        out_w: Matrix::zeros(N_CLASSES, dims.enc2_dim),
        out_b: vec![0.0; N_CLASSES],
    };
    let layout = tensor_layout(&params);
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, len) in &layout {
        tensors.push(read_tensor(&mut r, *len, name)?);
    }
    let mut extra = Vec::new();
    r.read_to_end(&mut extra)?;
    if !extra.is_empty() {
        return Err(ModelError::TrailingBytes { extra: extra.len() });
    }

    let mut it = tensors.into_iter();
    let mut fill = |slot: &mut [f64]| {
        let t = it.next().expect("layout and slot list must agree");
        slot.copy_from_slice(&t);
    };
    fill(params.w_embed.as_mut_slice());
    fill(params.enc1_w.as_mut_slice());
    fill(&mut params.enc1_b);
    fill(params.enc2_w.as_mut_slice());
    fill(&mut params.enc2_b);
    if let Some(attn) = params.attention.as_mut() {
        fill(attn.w.as_mut_slice());
        fill(&mut attn.b);
        fill(&mut attn.context);
    }
    fill(params.out_w.as_mut_slice());
    fill(&mut params.out_b);
    Ok(params)
}

/// Distinct feature columns an encounter touches — the embedding gradient's
/// support, and the only columns a finite-difference check needs to probe.
pub fn touched_columns(enc: &Encounter) -> BTreeSet<u32> {
    let mut cols = BTreeSet::new();
    for doc in &enc.documents {
        for &(crate::corpus::FeatureId(f), _) in &doc.entries {
            cols.insert(f);
        }
    }
    cols
}
