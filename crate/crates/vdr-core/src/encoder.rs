//! The weighting function: token embedding lookup followed by a
//! head that turns hidden states into a dense positive vocabulary-space
//! vector (layer norm, linear projection, `elu1p`, max pooling over token
//! positions), plus the three embedding entry points used at inference.
//!
//! The base encoder here is a bare embedding lookup; everything downstream
//! of the hidden states (head, gating, losses) is independent of how the
//! hidden states were produced.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{format_err, read_err, CountingReader};
use crate::sparsevec::{apply_gate, elu1p, gate_union, l2_normalize, top_k_dims, SparseVector};
use crate::vocab::{bow_vector, tokenize, TokenSeq, Vocabulary};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"VDRC";
const CHECKPOINT_VERSION: u32 = 1;
pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Activation applied after the projection. `Relu` exists as a training
/// ablation; inference always uses `Elu1p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu1p,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu1p => elu1p(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative recovered from the activation's output value. For `elu1p`,
    /// output < 1 implies the exponential branch where the derivative equals
    /// the output itself. For `relu` the subgradient at 0 is 0.
    #[inline]
    pub fn grad_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Elu1p => out.min(1.0),
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Target-side gate size: a top-k budget or full activation of every
/// dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetGate {
    Full,
    TopK(usize),
}

/// Learnable state of the weighting function.
///
/// `embedding` is `|V| x d` row-major; `projection` is `d x |V|` row-major
/// and absent when `tied` (the projection is then the embedding transpose).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    vocab_size: usize,
    d: usize,
    tied: bool,
    pub embedding: Vec<f64>,
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    pub projection: Option<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl EncoderParams {
    /// Seeded initialization: embedding entries uniform in `[-0.5/d, 0.5/d]`,
    /// layer norm at identity, untied projection uniform in
    /// `[-0.5/sqrt(d), 0.5/sqrt(d)]`, bias zero.
    pub fn init(vocab_size: usize, d: usize, tied: bool, seed: u64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::VocabTooSmall { count: vocab_size });
        }
        if d < 2 {
            return Err(Error::invalid(format!(
                "hidden width d must be >= 2, got {d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_scale = 0.5 / d as f64;
        let embedding = (0..vocab_size * d)
            .map(|_| rng.gen_range(-emb_scale..=emb_scale))
            .collect();
        let projection = if tied {
            None
        } else {
            let proj_scale = 0.5 / (d as f64).sqrt();
            Some(
                (0..d * vocab_size)
                    .map(|_| rng.gen_range(-proj_scale..=proj_scale))
                    .collect(),
            )
        };
        Ok(Self {
            vocab_size,
            d,
            tied,
            embedding,
            ln_gamma: vec![1.0; d],
            ln_beta: vec![0.0; d],
            projection,
            bias: vec![0.0; vocab_size],
        })
    }

    #[allow(clippy::too_many_arguments)] // mirrors the checkpoint layout
    pub fn from_parts(
        vocab_size: usize,
        d: usize,
        tied: bool,
        embedding: Vec<f64>,
        ln_gamma: Vec<f64>,
        ln_beta: Vec<f64>,
        projection: Option<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if vocab_size < 2 || d < 2 {
            return Err(Error::invalid("need vocab_size >= 2 and d >= 2"));
        }
        if embedding.len() != vocab_size * d
            || ln_gamma.len() != d
            || ln_beta.len() != d
            || bias.len() != vocab_size
        {
            return Err(Error::invalid("parameter shape mismatch"));
        }
        match (&projection, tied) {
            (Some(p), false) if p.len() == d * vocab_size => {}
            (None, true) => {}
            _ => {
                return Err(Error::invalid(
                    "projection shape inconsistent with tied flag",
                ))
            }
        }
        Ok(Self {
            vocab_size,
            d,
            tied,
            embedding,
            ln_gamma,
            ln_beta,
            projection,
            bias,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn embedding_row(&self, token_id: u32) -> &[f64] {
        let start = token_id as usize * self.d;
        &self.embedding[start..start + self.d]
    }
}

/// Per-token hidden states: one `d`-vector column per input position.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    d: usize,
    /// Column-major storage: column `j` occupies `[j*d, (j+1)*d)`.
    data: Vec<f64>,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.d..(j + 1) * self.d]
    }
}

/// Dense head output: one positive value per vocabulary dimension, plus the
/// token position that won the max pool for each dimension.
#[derive(Debug, Clone)]
pub struct LexicalWeights {
    pub values: Vec<f64>,
    pub argmax_source: Vec<u32>,
}

/// Embedding lookup: column `j` is the embedding row of token `j`.
pub fn forward_hidden(params: &EncoderParams, seq: &TokenSeq) -> Result<HiddenStates> {
    if seq.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = params.d;
    let mut data = Vec::with_capacity(seq.len() * d);
    for &id in seq.ids() {
        if id as usize >= params.vocab_size {
            return Err(Error::TokenIdOutOfRange {
                id,
                vocab_size: params.vocab_size,
            });
        }
        data.extend_from_slice(params.embedding_row(id));
    }
    Ok(HiddenStates { d, data })
}

/// Per-column layer norm caches retained for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ColumnCache {
    pub xhat: Vec<f64>,
    pub z: Vec<f64>,
    pub inv_std: f64,
}

/// Full head forward with caches: layer-normed columns, projected and
/// activated values, and the max-pool routing.
#[derive(Debug, Clone)]
pub(crate) struct DstForward {
    pub columns: Vec<ColumnCache>,
    pub values: Vec<f64>,
    pub argmax_source: Vec<u32>,
}

pub(crate) fn layer_norm_column(params: &EncoderParams, x: &[f64]) -> ColumnCache {
    let d = params.d as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let z: Vec<f64> = xhat
        .iter()
        .zip(params.ln_gamma.iter().zip(&params.ln_beta))
        .map(|(xh, (g, b))| xh * g + b)
        .collect();
    ColumnCache { xhat, z, inv_std }
}

/// `y[i] = sum_a z[a] * P[a][i] + bias[i]`, with `P = embedding^T` when tied.
pub(crate) fn project_column(params: &EncoderParams, z: &[f64], out: &mut [f64]) {
    let v = params.vocab_size;
    out.copy_from_slice(&params.bias);
    match &params.projection {
        Some(proj) => {
            for (a, &za) in z.iter().enumerate() {
                let row = &proj[a * v..(a + 1) * v];
                for (yi, &pa) in out.iter_mut().zip(row) {
                    *yi += za * pa;
                }
            }
        }
        None => {
            let d = params.d;
            for (i, yi) in out.iter_mut().enumerate() {
                let row = &params.embedding[i * d..(i + 1) * d];
                let mut acc = 0.0;
                for (za, pa) in z.iter().zip(row) {
                    acc += za * pa;
                }
                *yi += acc;
            }
        }
    }
}

pub(crate) fn dst_forward(
    params: &EncoderParams,
    hidden: &HiddenStates,
    activation: Activation,
) -> DstForward {
    let v = params.vocab_size;
    let len = hidden.len();
    let mut columns = Vec::with_capacity(len);
    let mut values = vec![f64::NEG_INFINITY; v];
    let mut argmax_source = vec![0u32; v];
    let mut y = vec![0.0; v];
    for j in 0..len {
        let cache = layer_norm_column(params, hidden.column(j));
        project_column(params, &cache.z, &mut y);
        for i in 0..v {
            let a = activation.apply(y[i]);
            // Strict greater-than keeps the lowest column index on ties.
            if a > values[i] {
                values[i] = a;
                argmax_source[i] = j as u32;
            }
        }
        columns.push(cache);
    }
    DstForward {
        columns,
        values,
        argmax_source,
    }
}

/// Head forward: layer norm, projection, `elu1p`, max pooling. Output values
/// are strictly positive.
pub fn dst_head(params: &EncoderParams, hidden: &HiddenStates) -> LexicalWeights {
    let fwd = dst_forward(params, hidden, Activation::Elu1p);
    LexicalWeights {
        values: fwd.values,
        argmax_source: fwd.argmax_source,
    }
}

/// Convenience: full dense weighting of a token sequence.
pub fn lexical_weights(params: &EncoderParams, seq: &TokenSeq) -> Result<LexicalWeights> {
    Ok(dst_head(params, &forward_hidden(params, seq)?))
}

/// Parametric query embedding: weights gated by `top_k(V) ∪ bow(text)`.
pub fn embed_query(
    params: &EncoderParams,
    vocab: &Vocabulary,
    text: &str,
    k: usize,
    normalize: bool,
) -> Result<SparseVector> {
    let seq = tokenize(vocab, text);
    embed_query_seq(params, &seq, k, normalize)
}

/// As [`embed_query`], from an already-tokenized sequence.
pub fn embed_query_seq(
    params: &EncoderParams,
    seq: &TokenSeq,
    k: usize,
    normalize: bool,
) -> Result<SparseVector> {
    let lw = lexical_weights(params, seq)?;
    let gate = gate_union(&top_k_dims(&lw.values, k), &seq.distinct_dims());
    let gated = apply_gate(&lw.values, &gate);
    if normalize {
        l2_normalize(&gated)
    } else {
        Ok(gated)
    }
}

/// Target embedding: as the query side, except the gate budget may be
/// `Full` (every dimension). Bag-of-words dimensions are always included.
pub fn embed_target(
    params: &EncoderParams,
    vocab: &Vocabulary,
    text: &str,
    gate: TargetGate,
    normalize: bool,
) -> Result<SparseVector> {
    let seq = tokenize(vocab, text);
    embed_target_seq(params, &seq, gate, normalize)
}

/// As [`embed_target`], from an already-tokenized sequence.
pub fn embed_target_seq(
    params: &EncoderParams,
    seq: &TokenSeq,
    gate: TargetGate,
    normalize: bool,
) -> Result<SparseVector> {
    let k = match gate {
        TargetGate::Full => params.vocab_size,
        TargetGate::TopK(k) => k,
    };
    embed_query_seq(params, seq, k, normalize)
}

/// Nonparametric query embedding: a normalized bag-of-words indicator. No
/// encoder forward is involved; all-OOV text yields the empty vector.
pub fn embed_nonparametric(vocab: &Vocabulary, text: &str) -> SparseVector {
    bow_vector(&tokenize(vocab, text), true)
}

fn embed_doc(
    params: &EncoderParams,
    vocab: &Vocabulary,
    id: &str,
    text: &str,
    gate: TargetGate,
    normalize: bool,
) -> Result<(String, SparseVector)> {
    let vec = embed_target(params, vocab, text, gate, normalize).map_err(|e| match e {
        Error::EmptyInput => Error::invalid(format!("document {id:?}: cannot encode empty input")),
        other => other,
    })?;
    Ok((id.to_string(), vec))
}

/// Embed `(id, text)` documents one after another on the calling thread.
pub fn embed_corpus_seq(
    params: &EncoderParams,
    vocab: &Vocabulary,
    docs: &[(String, String)],
    gate: TargetGate,
    normalize: bool,
) -> Result<Vec<(String, SparseVector)>> {
    docs.iter()
        .map(|(id, text)| embed_doc(params, vocab, id, text, gate, normalize))
        .collect()
}

/// As [`embed_corpus_seq`], data-parallel over documents when the
/// `parallel` feature is enabled. Each document's embedding is independent,
/// so the output is identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn embed_corpus(
    params: &EncoderParams,
    vocab: &Vocabulary,
    docs: &[(String, String)],
    gate: TargetGate,
    normalize: bool,
) -> Result<Vec<(String, SparseVector)>> {
    use rayon::prelude::*;
    docs.par_iter()
        .map(|(id, text)| embed_doc(params, vocab, id, text, gate, normalize))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn embed_corpus(
    params: &EncoderParams,
    vocab: &Vocabulary,
    docs: &[(String, String)],
    gate: TargetGate,
    normalize: bool,
) -> Result<Vec<(String, SparseVector)>> {
    embed_corpus_seq(params, vocab, docs, gate, normalize)
}

fn write_f32_slice<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

/// Serialize parameters to the binary checkpoint layout: magic `VDRC`,
/// version, `|V|`, `d`, tied flag, then little-endian f32 arrays for the
/// embedding (row-major), layer-norm gamma and beta, the projection
/// (row-major, untied only), and the bias.
pub fn write_checkpoint<W: Write>(params: &EncoderParams, w: &mut W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(params.vocab_size as u32)?;
    w.write_u32::<LittleEndian>(params.d as u32)?;
    w.write_u8(u8::from(params.tied))?;
    write_f32_slice(w, &params.embedding)?;
    write_f32_slice(w, &params.ln_gamma)?;
    write_f32_slice(w, &params.ln_beta)?;
    if let Some(proj) = &params.projection {
        write_f32_slice(w, proj)?;
    }
    write_f32_slice(w, &params.bias)?;
    Ok(())
}

pub fn save_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(params, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_f32_array<R: Read>(
    r: &mut CountingReader<R>,
    path: &Path,
    len: usize,
    what: &str,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let start = r.offset();
        let v = r
            .read_f32::<LittleEndian>()
            .map_err(|e| read_err(path, start, e))?;
        if !v.is_finite() {
            return Err(format_err(path, start, format!("non-finite {what} value")));
        }
        out.push(f64::from(v));
    }
    Ok(out)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = CountingReader::new(BufReader::new(file));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| read_err(path, 0, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(path, 0, "bad magic"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, 4, e))?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(
            path,
            4,
            format!("unsupported version {version}"),
        ));
    }
    let vocab_size = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, 8, e))? as usize;
    let d = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, 12, e))? as usize;
    let tied_byte = r.read_u8().map_err(|e| read_err(path, 16, e))?;
    let tied = match tied_byte {
        0 => false,
        1 => true,
        other => {
            return Err(format_err(path, 16, format!("bad tied flag {other}")));
        }
    };
    if vocab_size < 2 || d < 2 {
        return Err(format_err(path, 8, "need vocab_size >= 2 and d >= 2"));
    }
    if vocab_size > 1 << 24 || d > 1 << 16 {
        return Err(format_err(path, 8, "implausible header dimensions"));
    }

    let embedding = read_f32_array(&mut r, path, vocab_size * d, "embedding")?;
    let ln_gamma = read_f32_array(&mut r, path, d, "ln_gamma")?;
    let ln_beta = read_f32_array(&mut r, path, d, "ln_beta")?;
    let projection = if tied {
        None
    } else {
        Some(read_f32_array(&mut r, path, d * vocab_size, "projection")?)
    };
    let bias = read_f32_array(&mut r, path, vocab_size, "bias")?;

    let end = r.offset();
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(format_err(path, end, "trailing bytes")),
        Err(e) => return Err(read_err(path, end, e)),
    }

    EncoderParams::from_parts(
        vocab_size, d, tied, embedding, ln_gamma, ln_beta, projection, bias,
    )
}
