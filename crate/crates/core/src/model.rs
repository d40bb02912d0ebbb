//! Small deterministic decoder-only transformer.
//!
//! Llama-style blocks: pre-norm grouped-query attention with rotary positions,
//! then a pre-norm SwiGLU MLP (`down(silu(gate(x)) · up(x))`), both residual.
//! The engine drives the model one layer at a time so that it can decide, per
//! layer, which tokens are processed and which cached keys are visible.

use crate::kv::{BandView, KvGeometry};
use crate::par::{self, Exec};
use crate::policy::TokenRef;
use crate::tensor::{self, dot, matmul_with, rms_norm_into, rope_apply, softmax_in_place, Matrix, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Byte-level vocabulary: ids 0..=255 are bytes, 256 is BoS.
pub const BOS_ID: u32 = 256;
pub const BYTE_VOCAB: usize = 257;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token {token} outside vocabulary of {vocab}")]
    Token { token: u32, vocab: usize },
    #[error("query {query} has no visible keys")]
    EmptyVisibleSet { query: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub theta_base: f32,
    pub init_seed: u64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
}

fn default_norm_eps() -> f32 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 16,
            d_ff: 128,
            vocab_size: BYTE_VOCAB,
            theta_base: 10_000.0,
            init_seed: 123,
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_layers < 2 {
            return bad(format!("need at least 2 layers, got {}", self.n_layers));
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!("{} heads not divisible by {} kv heads", self.n_heads, self.n_kv_heads));
        }
        if self.d_head == 0 || !self.d_head.is_multiple_of(2) {
            return bad(format!("head dim {} must be even and positive", self.d_head));
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_ff == 0 || self.vocab_size == 0 {
            return bad("d_ff and vocab_size must be positive".into());
        }
        if [self.theta_base, self.norm_eps].iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return bad("theta_base and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// KV geometry for byte accounting at `bytes_per_scalar` (2 = bf16).
    pub fn kv_geometry(&self, bytes_per_scalar: usize) -> KvGeometry {
        KvGeometry::new(self.n_kv_heads, self.d_head, bytes_per_scalar)
    }

    /// Short stable fingerprint of the config, for report metadata.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub unembed: Matrix,
}

impl ModelWeights {
    /// Every tensor with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        fn m(name: String, t: &Matrix) -> (String, Vec<usize>, &[f32]) {
            (name, vec![t.rows(), t.cols()], t.data())
        }
        out.push(m("embed".into(), &self.embed));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), vec![l.attn_norm.len()], &l.attn_norm));
            out.push(m(format!("layers.{i}.wq"), &l.wq));
            out.push(m(format!("layers.{i}.wk"), &l.wk));
            out.push(m(format!("layers.{i}.wv"), &l.wv));
            out.push(m(format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.mlp_norm"), vec![l.mlp_norm.len()], &l.mlp_norm));
            out.push(m(format!("layers.{i}.w_gate"), &l.w_gate));
            out.push(m(format!("layers.{i}.w_up"), &l.w_up));
            out.push(m(format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm));
        out.push(m("unembed".into(), &self.unembed));
        out
    }
}

/// Deterministic Gaussian init; projections scaled by `1/sqrt(fan_in)`.
pub fn init_weights(config: &ModelConfig) -> Result<ModelWeights, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut mat = |rows: usize, cols: usize, scale: f32| -> Matrix {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized by construction")
    };
    let d = config.d_model;
    let proj = 1.0 / (d as f32).sqrt();
    let embed = mat(config.vocab_size, d, 1.0);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: mat(d, config.q_width(), proj),
            wk: mat(d, config.kv_width(), proj),
            wv: mat(d, config.kv_width(), proj),
            wo: mat(config.q_width(), d, 1.0 / (config.q_width() as f32).sqrt()),
            mlp_norm: vec![1.0; d],
            w_gate: mat(d, config.d_ff, proj),
            w_up: mat(d, config.d_ff, proj),
            w_down: mat(config.d_ff, d, 1.0 / (config.d_ff as f32).sqrt()),
        })
        .collect();
    let unembed = mat(d, config.vocab_size, proj);
    Ok(ModelWeights { embed, layers, final_norm: vec![1.0; d], unembed })
}

/// Supplies one visibility row per query over `cached ++ batch` keys.
pub trait AttentionMask: Sync {
    fn fill_row(&self, query: usize, row: &mut [bool]);
}

/// Explicit rows, mainly for tests and the reference path.
#[derive(Debug, Clone)]
pub struct DenseMask(pub Vec<Vec<bool>>);

impl AttentionMask for DenseMask {
    fn fill_row(&self, query: usize, row: &mut [bool]) {
        row.copy_from_slice(&self.0[query]);
    }
}

/// Result of one layer over a batch of query tokens.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub hidden: Matrix,
    /// Rotated keys for the batch tokens, `n_q × n_kv·d_head`.
    pub keys: Matrix,
    pub values: Matrix,
    /// Head-averaged post-softmax rows over `cached ++ batch`, when captured.
    pub attn: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
    exec: Exec,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let weights = init_weights(&config)?;
        Ok(Self { config, weights, exec: Exec::default() })
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = init_shapes(&config);
        let got: Vec<Vec<usize>> = weights.named_tensors().into_iter().map(|(_, s, _)| s).collect();
        if expected != got {
            return Err(ModelError::Config("weight shapes do not match config".into()));
        }
        Ok(Self { config, weights, exec: Exec::default() })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix, ModelError> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::Token { token: t, vocab: self.config.vocab_size });
            }
            data.extend_from_slice(self.weights.embed.row(t as usize));
        }
        Ok(Matrix::from_vec(tokens.len(), d, data)?)
    }

    pub fn final_norm(&self, h: &[f32]) -> Result<Vec<f32>, ModelError> {
        let mut out = vec![0.0; h.len()];
        rms_norm_into(h, &self.weights.final_norm, self.config.norm_eps, &mut out)?;
        Ok(out)
    }

    /// Unembedding product of an already-normalized final hidden state.
    pub fn logits(&self, h_final: &[f32]) -> Result<Vec<f32>, ModelError> {
        if h_final.len() != self.config.d_model {
            return Err(TensorError::Shape(format!(
                "hidden state of {} for d_model {}",
                h_final.len(),
                self.config.d_model
            ))
            .into());
        }
        let mut out = vec![0.0; self.config.vocab_size];
        tensor::vec_mat_into(h_final, &self.weights.unembed, &mut out);
        Ok(out)
    }

    fn norm_rows(&self, h: &Matrix, gain: &[f32]) -> Result<Matrix, ModelError> {
        let mut out = Matrix::zeros(h.rows(), h.cols());
        for i in 0..h.rows() {
            rms_norm_into(h.row(i), gain, self.config.norm_eps, out.row_mut(i))?;
        }
        Ok(out)
    }

    /// Runs 1-based `layer` for the batch `h_in`, whose rows are the tokens
    /// in `queries`. Keys are `cached` followed by the batch itself; the
    /// mask row for query `i` spans all of them.
    pub fn layer_forward(
        &self,
        layer: usize,
        h_in: &Matrix,
        queries: &[TokenRef],
        cached: BandView<'_>,
        mask: &dyn AttentionMask,
        capture: bool,
    ) -> Result<LayerOutput, ModelError> {
        let cfg = &self.config;
        if layer == 0 || layer > cfg.n_layers {
            return Err(ModelError::Config(format!("layer {layer} outside 1..={}", cfg.n_layers)));
        }
        if h_in.rows() != queries.len() || h_in.cols() != cfg.d_model {
            return Err(TensorError::Shape(format!(
                "{}x{} hidden batch for {} queries",
                h_in.rows(),
                h_in.cols(),
                queries.len()
            ))
            .into());
        }
        if cached.width() != cfg.kv_width() && !cached.is_empty() {
            return Err(TensorError::Shape("cached key width".into()).into());
        }
        let w = &self.weights.layers[layer - 1];
        let exec = self.exec;
        let n_q = queries.len();

        let x = self.norm_rows(h_in, &w.attn_norm)?;
        let mut q = matmul_with(exec, &x, &w.wq)?;
        let mut k = matmul_with(exec, &x, &w.wk)?;
        let v = matmul_with(exec, &x, &w.wv)?;
        for (i, t) in queries.iter().enumerate() {
            rope_apply(q.row_mut(i), cfg.d_head, t.position, cfg.theta_base)?;
            rope_apply(k.row_mut(i), cfg.d_head, t.position, cfg.theta_base)?;
        }

        let n_cached = cached.len();
        let width = n_cached + n_q;
        let kvw = cfg.kv_width();
        let dh = cfg.d_head;
        let group = cfg.n_heads / cfg.n_kv_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut keys = Vec::with_capacity(width * kvw);
        keys.extend_from_slice(cached.keys_flat());
        keys.extend_from_slice(k.data());
        let mut values = Vec::with_capacity(width * kvw);
        values.extend_from_slice(cached.values_flat());
        values.extend_from_slice(v.data());

        let per_query = par::map_indices(exec, n_q, |i| -> Result<(Vec<f32>, Option<Vec<f32>>), ModelError> {
            let mut visible = vec![false; width];
            mask.fill_row(i, &mut visible);
            // visible keys in ascending order; everything below works on this list
            let idx: Vec<usize> = (0..width).filter(|&j| visible[j]).collect();
            if idx.is_empty() {
                return Err(ModelError::EmptyVisibleSet { query: i });
            }
            let mut probs = vec![0.0f32; idx.len()];
            let mut out = vec![0.0f32; cfg.q_width()];
            let mut avg = capture.then(|| vec![0.0f32; width]);
            for h in 0..cfg.n_heads {
                let off = (h / group) * dh;
                let qh = &q.row(i)[h * dh..(h + 1) * dh];
                for (s, &j) in probs.iter_mut().zip(&idx) {
                    *s = dot(qh, &keys[j * kvw + off..j * kvw + off + dh]) * scale;
                }
                softmax_in_place(&mut probs);
                let oh = &mut out[h * dh..(h + 1) * dh];
                for (&p, &j) in probs.iter().zip(&idx) {
                    let vj = &values[j * kvw + off..j * kvw + off + dh];
                    for (o, &x) in oh.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
                if let Some(avg) = avg.as_mut() {
                    for (&p, &j) in probs.iter().zip(&idx) {
                        avg[j] += p;
                    }
                }
            }
            if let Some(avg) = avg.as_mut() {
                let inv = 1.0 / cfg.n_heads as f32;
                avg.iter_mut().for_each(|a| *a *= inv);
            }
            Ok((out, avg))
        });

        let mut attn_out = Matrix::zeros(n_q, cfg.q_width());
        let mut rows = capture.then(|| Vec::with_capacity(n_q));
        for (i, r) in per_query.into_iter().enumerate() {
            let (out, avg) = r?;
            attn_out.row_mut(i).copy_from_slice(&out);
            if let (Some(rows), Some(avg)) = (rows.as_mut(), avg) {
                rows.push(avg);
            }
        }

        let o = matmul_with(exec, &attn_out, &w.wo)?;
        let mut h_mid = h_in.clone();
        for (a, b) in h_mid.data_mut().iter_mut().zip(o.data()) {
            *a += b;
        }

        let x2 = self.norm_rows(&h_mid, &w.mlp_norm)?;
        let mut gate = matmul_with(exec, &x2, &w.w_gate)?;
        let up = matmul_with(exec, &x2, &w.w_up)?;
        for (g, u) in gate.data_mut().iter_mut().zip(up.data()) {
            *g = silu(*g) * u;
        }
        let down = matmul_with(exec, &gate, &w.w_down)?;
        let mut hidden = h_mid;
        for (a, b) in hidden.data_mut().iter_mut().zip(down.data()) {
            *a += b;
        }

        Ok(LayerOutput { hidden, keys: k, values: v, attn: rows })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut f, &self.config, &self.weights)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (config, weights) = read_checkpoint(&mut f)?;
        Self::from_weights(config, weights)
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn init_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let d = config.d_model;
    let mut s = vec![vec![config.vocab_size, d]];
    for _ in 0..config.n_layers {
        s.extend([
            vec![d],
            vec![d, config.q_width()],
            vec![d, config.kv_width()],
            vec![d, config.kv_width()],
            vec![config.q_width(), d],
            vec![d],
            vec![d, config.d_ff],
            vec![d, config.d_ff],
            vec![config.d_ff, d],
        ]);
    }
    s.push(vec![d]);
    s.push(vec![d, config.vocab_size]);
    s
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KVDWGT01";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    byte_order: String,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

/// Offsets and lengths count f32 elements from the start of the data block.
#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Layout: 8-byte magic, u64 LE header length, JSON header, then every tensor
/// as little-endian f32 in header order.
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    config: &ModelConfig,
    weights: &ModelWeights,
) -> Result<(), ModelError> {
    let tensors = weights.named_tensors();
    let mut offset = 0;
    let records = tensors
        .iter()
        .map(|(name, shape, data)| {
            let r = TensorRecord { name: name.clone(), shape: shape.clone(), offset, len: data.len() };
            offset += data.len();
            r
        })
        .collect();
    let header = CheckpointHeader { byte_order: "little".into(), config: config.clone(), tensors: records };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, data) in &tensors {
        for x in *data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelConfig, ModelWeights), ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.byte_order != "little" {
        return Err(ModelError::Checkpoint(format!("unsupported byte order {}", header.byte_order)));
    }
    header.config.validate()?;
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    let mut raw = vec![0u8; total * 4];
    r.read_exact(&mut raw)?;
    let floats: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();

    let expected = init_shapes(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(ModelError::Checkpoint("tensor count does not match config".into()));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (t, shape) in header.tensors.iter().zip(expected) {
        if t.shape != shape || t.len != shape.iter().product::<usize>() || t.offset + t.len > floats.len() {
            return Err(ModelError::Checkpoint(format!("tensor {} has inconsistent shape or offset", t.name)));
        }
        tensors.push((shape, floats[t.offset..t.offset + t.len].to_vec()));
    }
    // shapes were checked against the config, so the order below is known
    let mut it = tensors.into_iter();
    let mut vector = || it.next().expect("count checked").1;
    let embed = Matrix::from_vec(header.config.vocab_size, header.config.d_model, vector())?;
    let d = header.config.d_model;
    let (q, kv, ff) = (header.config.q_width(), header.config.kv_width(), header.config.d_ff);
    let mut layers = Vec::with_capacity(header.config.n_layers);
    for _ in 0..header.config.n_layers {
        layers.push(LayerWeights {
            attn_norm: vector(),
            wq: Matrix::from_vec(d, q, vector())?,
            wk: Matrix::from_vec(d, kv, vector())?,
            wv: Matrix::from_vec(d, kv, vector())?,
            wo: Matrix::from_vec(q, d, vector())?,
            mlp_norm: vector(),
            w_gate: Matrix::from_vec(d, ff, vector())?,
            w_up: Matrix::from_vec(d, ff, vector())?,
            w_down: Matrix::from_vec(ff, d, vector())?,
        });
    }
    let final_norm = vector();
    let unembed = Matrix::from_vec(d, header.config.vocab_size, vector())?;
    Ok((header.config, ModelWeights { embed, layers, final_norm, unembed }))
}
