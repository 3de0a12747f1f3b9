//! Transformer encoder math: scaled dot-product attention, the
//! positionally re-parametrized variant with a relative-offset score term,
//! the pre-norm block, and the attention-diagonal profile used for
//! analysis.
//!
//! Parameter storage lives in [`crate::model`]; the functions here operate
//! on tape nodes so they can be driven with hand-set tensors in tests.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, TensorId};
use crate::Rng;

/// Encoder hyperparameters. Defaults follow the best-performing grid
/// values: 512-dim embeddings, 8 heads, 8 layers, 256-token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub sequence_length: usize,
    pub ffn_dim: usize,
    /// Relative offsets are clipped to `[-window, window]`.
    pub rel_pos_window: usize,
    pub use_pos_tags: bool,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embedding_dim: 512,
            num_heads: 8,
            num_layers: 8,
            sequence_length: 256,
            ffn_dim: 4 * 512,
            rel_pos_window: 256,
            use_pos_tags: false,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    /// A small configuration for tests and desk-scale runs.
    pub fn toy(sequence_length: usize) -> Self {
        EncoderConfig {
            embedding_dim: 64,
            num_heads: 2,
            num_layers: 2,
            sequence_length,
            ffn_dim: 128,
            rel_pos_window: sequence_length,
            use_pos_tags: false,
            dropout_rate: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embedding_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Parameter("encoder dimensions must be positive".into()));
        }
        if self.embedding_dim % self.num_heads != 0 {
            return Err(Error::Parameter(format!(
                "embedding_dim {} not divisible by num_heads {}",
                self.embedding_dim, self.num_heads
            )));
        }
        if self.embedding_dim % 8 != 0 {
            return Err(Error::Parameter(format!(
                "embedding_dim {} must be divisible by 8 (BiLSTM halves, adaptive tail projections)",
                self.embedding_dim
            )));
        }
        if self.sequence_length == 0 {
            return Err(Error::Parameter("sequence_length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Rows of the relative-position table: offsets -window..=window.
    pub fn rel_table_rows(&self) -> usize {
        2 * self.rel_pos_window + 1
    }
}

/// Single-head attention output plus its weight matrix.
pub struct AttentionOut {
    pub output: TensorId,
    pub weights: TensorId,
}

/// Standard scaled dot-product attention for one head:
/// `softmax(Q K^T / sqrt(d_k) + mask) V`.
pub fn attention_standard<T: Element>(
    g: &mut Graph<T>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    mask: Option<TensorId>,
) -> Result<AttentionOut> {
    let scores = g.matmul_nt(q, k)?;
    finish_attention(g, scores, q, v, mask)
}

/// Re-parametrized attention with a query/relative-position score term:
/// `softmax((Q K^T + Q K_pos^T) / sqrt(d_k) + mask) V`.
///
/// `k_pos` is the relative-offset table already projected into this head's
/// key space, shaped `[(2*window+1) x d_k]`; its scores are spread onto the
/// square score matrix with offset clipping.
pub fn attention_positional<T: Element>(
    g: &mut Graph<T>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    k_pos: TensorId,
    window: usize,
    mask: Option<TensorId>,
) -> Result<AttentionOut> {
    let content = g.matmul_nt(q, k)?;
    let rel = g.matmul_nt(q, k_pos)?;
    let rel_square = g.rel_gather(rel, window)?;
    let scores = g.add(content, rel_square)?;
    finish_attention(g, scores, q, v, mask)
}

fn finish_attention<T: Element>(
    g: &mut Graph<T>,
    scores: TensorId,
    q: TensorId,
    v: TensorId,
    mask: Option<TensorId>,
) -> Result<AttentionOut> {
    let d_k = g.shape(q)[1];
    let scaled = g.scale(scores, T::ONE / T::from_f64((d_k as f64).sqrt()));
    let masked = match mask {
        Some(m) => g.add(scaled, m)?,
        None => scaled,
    };
    let weights = g.softmax_rows(masked)?;
    let output = g.matmul(weights, v)?;
    Ok(AttentionOut { output, weights })
}

/// Additive attention mask: 0 where attending is allowed, -inf elsewhere.
/// `causal` hides the right context; `pad_from` (when set) hides key
/// columns at positions `>= pad_from`.
pub fn build_mask<T: Element>(
    g: &mut Graph<T>,
    sl: usize,
    causal: bool,
    pad_from: Option<usize>,
) -> TensorId {
    let neg = T::neg_infinity();
    let mut values = vec![T::ZERO; sl * sl];
    for i in 0..sl {
        for j in 0..sl {
            let hidden = (causal && j > i) || pad_from.is_some_and(|p| j >= p);
            if hidden {
                values[i * sl + j] = neg;
            }
        }
    }
    g.constant(vec![sl, sl], values)
}

/// Tape node ids for one encoder block's parameters.
pub struct BlockNodes {
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    /// Relative-offset embedding table `[(2w+1) x d]`, shared across heads.
    pub rel_table: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
}

/// One pre-norm block: `x + MHA(LN(x))`, then `x + Dropout(FFN(LN(x)))`
/// with a GELU feed-forward. Returns the new hidden state and, when
/// `capture_weights`, each head's attention matrix.
#[allow(clippy::too_many_arguments)]
pub fn encoder_block<T: Element>(
    g: &mut Graph<T>,
    x: TensorId,
    blk: &BlockNodes,
    cfg: &EncoderConfig,
    mask: Option<TensorId>,
    training: bool,
    rng: &mut Rng,
    capture_weights: bool,
) -> Result<(TensorId, Option<Vec<TensorId>>)> {
    let eps = T::from_f64(1e-5);
    let d_k = cfg.head_dim();

    // attention sublayer
    let normed = g.layer_norm(x, blk.ln1_gain, blk.ln1_bias, eps)?;
    let q = g.matmul(normed, blk.wq)?;
    let q = g.add_row(q, blk.bq)?;
    let k = g.matmul(normed, blk.wk)?;
    let k = g.add_row(k, blk.bk)?;
    let v = g.matmul(normed, blk.wv)?;
    let v = g.add_row(v, blk.bv)?;
    // positional keys share the content key projection, without its bias,
    // so an all-zero table reduces bit-for-bit to standard attention
    let k_pos_full = g.matmul(blk.rel_table, blk.wk)?;

    let mut head_outputs = Vec::with_capacity(cfg.num_heads);
    let mut head_weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (from, to) = (h * d_k, (h + 1) * d_k);
        let qh = g.slice_cols(q, from, to)?;
        let kh = g.slice_cols(k, from, to)?;
        let vh = g.slice_cols(v, from, to)?;
        let k_pos_h = g.slice_cols(k_pos_full, from, to)?;
        let out = attention_positional(g, qh, kh, vh, k_pos_h, cfg.rel_pos_window, mask)?;
        head_outputs.push(out.output);
        if capture_weights {
            head_weights.push(out.weights);
        }
    }
    let mut concat = head_outputs[0];
    for &h in &head_outputs[1..] {
        concat = g.concat_cols(concat, h)?;
    }
    let proj = g.matmul(concat, blk.wo)?;
    let proj = g.add_row(proj, blk.bo)?;
    let x = g.add(x, proj)?;

    // feed-forward sublayer
    let normed = g.layer_norm(x, blk.ln2_gain, blk.ln2_bias, eps)?;
    let h1 = g.matmul(normed, blk.ffn_w1)?;
    let h1 = g.add_row(h1, blk.ffn_b1)?;
    let h1 = g.gelu(h1);
    let h2 = g.matmul(h1, blk.ffn_w2)?;
    let h2 = g.add_row(h2, blk.ffn_b2)?;
    let h2 = g.dropout(h2, cfg.dropout_rate, training, rng)?;
    let x = g.add(x, h2)?;

    Ok((x, capture_weights.then_some(head_weights)))
}

/// Mean over documents of each head's attention-matrix diagonal.
/// `weights_per_doc[d][h]` is a row-major square matrix; the result is one
/// positional profile per head.
pub fn attention_diagonals<T: Element>(weights_per_doc: &[Vec<Vec<T>>], sl: usize) -> Result<Vec<Vec<T>>> {
    if weights_per_doc.is_empty() {
        return Err(Error::Contract("attention_diagonals: no documents".into()));
    }
    let num_heads = weights_per_doc[0].len();
    let mut profiles = vec![vec![T::ZERO; sl]; num_heads];
    for doc in weights_per_doc {
        if doc.len() != num_heads {
            return Err(Error::Contract(format!(
                "attention_diagonals: ragged head counts ({} vs {num_heads})",
                doc.len()
            )));
        }
        for (h, w) in doc.iter().enumerate() {
            if w.len() != sl * sl {
                return Err(Error::Contract(format!(
                    "attention_diagonals: matrix size {} is not {sl}x{sl}",
                    w.len()
                )));
            }
            for i in 0..sl {
                profiles[h][i] += w[i * sl + i];
            }
        }
    }
    let inv = T::ONE / T::from_f64(weights_per_doc.len() as f64);
    for p in &mut profiles {
        for v in p.iter_mut() {
            *v *= inv;
        }
    }
    Ok(profiles)
}
