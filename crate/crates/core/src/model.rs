//! The assembled model: token (and optional POS-tag) embeddings, the
//! encoder stack, and one active head. Parameters are named so encoder
//! weights transfer between the language-model and tagging phases.

use crate::encoder::{self, BlockNodes, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{
    self, AdaptiveSoftmaxNodes, BiLstmNodes, ClassifierNodes, ClusterBounds, LstmDirNodes,
    TailClusterNodes, CRF_START, NUM_CLASSES,
};
use crate::tensor::{normal_sample, Element, Graph, Parameter, TensorId};
use crate::Rng;
use std::collections::HashMap;

/// Which head sits on top of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Adaptive-softmax language model head (pretraining).
    Lm,
    /// Plain token-classification head.
    Classifier,
    /// Classification head fed through the two-layer BiLSTM residual encoder.
    ClassifierBiLstm,
    /// One BiLSTM layer into a CRF.
    BiLstmCrf,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Lm => "lm",
            HeadKind::Classifier => "classifier",
            HeadKind::ClassifierBiLstm => "classifier+bilstm",
            HeadKind::BiLstmCrf => "bilstm-crf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lm" => Ok(HeadKind::Lm),
            "classifier" => Ok(HeadKind::Classifier),
            "classifier+bilstm" => Ok(HeadKind::ClassifierBiLstm),
            "bilstm-crf" => Ok(HeadKind::BiLstmCrf),
            other => Err(Error::Parameter(format!("unknown head kind `{other}`"))),
        }
    }

    pub fn is_crf(self) -> bool {
        matches!(self, HeadKind::BiLstmCrf)
    }
}

/// Everything needed to rebuild the model's parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    /// Absolute adaptive-softmax boundaries (specials included).
    pub head_end: usize,
    pub mid_end: usize,
    /// 0 when POS tags are not used.
    pub tag_vocab_size: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn bounds(&self) -> Result<ClusterBounds> {
        ClusterBounds::new(self.head_end, self.mid_end, self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size == 0 {
            return Err(Error::Parameter("vocab_size must be positive".into()));
        }
        if self.encoder.use_pos_tags && self.tag_vocab_size == 0 {
            return Err(Error::Parameter("use_pos_tags requires a tag vocabulary".into()));
        }
        self.bounds()?;
        Ok(())
    }
}

/// Parameter bindings recorded during one forward pass: which tape node
/// each parameter was materialized as.
#[derive(Debug, Default)]
pub struct Bindings {
    pairs: Vec<(usize, TensorId)>,
}

pub struct EncoderModel<T: Element> {
    pub config: ModelConfig,
    pub params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

// shorthand for normal(0, 0.02) weight init
fn init_weight<T: Element>(rng: &mut Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| T::from_f64(normal_sample(rng, 0.0, 0.02))).collect()
}

impl<T: Element> EncoderModel<T> {
    /// Fresh model with normal(0, 0.02) projection/embedding weights, zero
    /// biases and transitions, unit layer-norm gains.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params: Vec<Parameter<T>> = Vec::new();
        let d = config.encoder.embedding_dim;
        let weight = |rng: &mut Rng, name: String, shape: Vec<usize>, params: &mut Vec<Parameter<T>>| {
            let n = shape.iter().product();
            params.push(Parameter::new(name, shape, init_weight(rng, n)));
        };
        let zeros = |name: String, shape: Vec<usize>, params: &mut Vec<Parameter<T>>| {
            let n: usize = shape.iter().product();
            params.push(Parameter::new(name, shape, vec![T::ZERO; n]));
        };
        let ones = |name: String, shape: Vec<usize>, params: &mut Vec<Parameter<T>>| {
            let n: usize = shape.iter().product();
            params.push(Parameter::new(name, shape, vec![T::ONE; n]));
        };

        weight(rng, "embed.token".into(), vec![config.vocab_size, d], &mut params);
        if config.encoder.use_pos_tags {
            weight(rng, "embed.tag".into(), vec![config.tag_vocab_size, d], &mut params);
        }
        for layer in 0..config.encoder.num_layers {
            let p = |suffix: &str| format!("encoder.layer{layer}.{suffix}");
            ones(p("ln1.gain"), vec![d], &mut params);
            zeros(p("ln1.bias"), vec![d], &mut params);
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                weight(rng, p(w), vec![d, d], &mut params);
            }
            for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
                zeros(p(b), vec![d], &mut params);
            }
            weight(rng, p("attn.rel_table"), vec![config.encoder.rel_table_rows(), d], &mut params);
            ones(p("ln2.gain"), vec![d], &mut params);
            zeros(p("ln2.bias"), vec![d], &mut params);
            weight(rng, p("ffn.w1"), vec![d, config.encoder.ffn_dim], &mut params);
            zeros(p("ffn.b1"), vec![config.encoder.ffn_dim], &mut params);
            weight(rng, p("ffn.w2"), vec![config.encoder.ffn_dim, d], &mut params);
            zeros(p("ffn.b2"), vec![d], &mut params);
        }
        ones("encoder.final_ln.gain".into(), vec![d], &mut params);
        zeros("encoder.final_ln.bias".into(), vec![d], &mut params);

        match config.head {
            HeadKind::Lm => {
                let bounds = config.bounds()?;
                let head_cols = bounds.head_end + bounds.num_gates();
                weight(rng, "head.lm.w_head".into(), vec![d, head_cols], &mut params);
                zeros("head.lm.b_head".into(), vec![head_cols], &mut params);
                if bounds.has_mid() {
                    let width = bounds.mid_end - bounds.head_end;
                    weight(rng, "head.lm.mid.w_proj".into(), vec![d, d / 4], &mut params);
                    weight(rng, "head.lm.mid.w_out".into(), vec![d / 4, width], &mut params);
                    zeros("head.lm.mid.b_out".into(), vec![width], &mut params);
                }
                if bounds.has_tail() {
                    let width = bounds.size - bounds.mid_end;
                    weight(rng, "head.lm.tail.w_proj".into(), vec![d, d / 8], &mut params);
                    weight(rng, "head.lm.tail.w_out".into(), vec![d / 8, width], &mut params);
                    zeros("head.lm.tail.b_out".into(), vec![width], &mut params);
                }
            }
            HeadKind::Classifier | HeadKind::ClassifierBiLstm => {
                weight(rng, "head.cls.w".into(), vec![d, NUM_CLASSES], &mut params);
                zeros("head.cls.b".into(), vec![NUM_CLASSES], &mut params);
                if config.head == HeadKind::ClassifierBiLstm {
                    let half = d / 2;
                    for layer in [1usize, 2] {
                        let d_in = d; // both layers consume full-width inputs
                        for dir in ["fwd", "bwd"] {
                            let p = |s: &str| format!("head.bilstm.l{layer}.{dir}.{s}");
                            weight(rng, p("w_x"), vec![d_in, 4 * half], &mut params);
                            weight(rng, p("w_h"), vec![half, 4 * half], &mut params);
                            zeros(p("b"), vec![4 * half], &mut params);
                        }
                    }
                }
            }
            HeadKind::BiLstmCrf => {
                let half = d / 2;
                for dir in ["fwd", "bwd"] {
                    let p = |s: &str| format!("head.crf.bilstm.{dir}.{s}");
                    weight(rng, p("w_x"), vec![d, 4 * half], &mut params);
                    weight(rng, p("w_h"), vec![half, 4 * half], &mut params);
                    zeros(p("b"), vec![4 * half], &mut params);
                }
                weight(rng, "head.crf.emit.w".into(), vec![d, NUM_CLASSES], &mut params);
                zeros("head.crf.emit.b".into(), vec![NUM_CLASSES], &mut params);
                zeros("head.crf.transitions".into(), vec![CRF_START + 1, NUM_CLASSES], &mut params);
            }
        }

        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(EncoderModel {
            config,
            params,
            index,
        })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> &Parameter<T> {
        &self.params[self.index[name]]
    }

    /// True for tensors shared between the LM and tagging phases.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("embed.") || name.starts_with("encoder.")
    }

    /// Copy same-named, same-shaped parameters from another model (used to
    /// transfer pretrained encoder weights into a fresh tagging model).
    pub fn load_matching(&mut self, other: &EncoderModel<T>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(&j) = other.index.get(&p.name) {
                if other.params[j].shape == p.shape {
                    p.values.clone_from(&other.params[j].values);
                    copied += 1;
                }
            }
        }
        copied
    }

    fn bind(&self, g: &mut Graph<T>, binds: &mut Bindings, name: &str) -> TensorId {
        let idx = self.index[name];
        let node = g.param(&self.params[idx]);
        binds.pairs.push((idx, node));
        node
    }

    fn block_nodes(&self, g: &mut Graph<T>, binds: &mut Bindings, layer: usize) -> BlockNodes {
        let p = |s: &str| format!("encoder.layer{layer}.{s}");
        BlockNodes {
            ln1_gain: self.bind(g, binds, &p("ln1.gain")),
            ln1_bias: self.bind(g, binds, &p("ln1.bias")),
            wq: self.bind(g, binds, &p("attn.wq")),
            bq: self.bind(g, binds, &p("attn.bq")),
            wk: self.bind(g, binds, &p("attn.wk")),
            bk: self.bind(g, binds, &p("attn.bk")),
            wv: self.bind(g, binds, &p("attn.wv")),
            bv: self.bind(g, binds, &p("attn.bv")),
            wo: self.bind(g, binds, &p("attn.wo")),
            bo: self.bind(g, binds, &p("attn.bo")),
            rel_table: self.bind(g, binds, &p("attn.rel_table")),
            ln2_gain: self.bind(g, binds, &p("ln2.gain")),
            ln2_bias: self.bind(g, binds, &p("ln2.bias")),
            ffn_w1: self.bind(g, binds, &p("ffn.w1")),
            ffn_b1: self.bind(g, binds, &p("ffn.b1")),
            ffn_w2: self.bind(g, binds, &p("ffn.w2")),
            ffn_b2: self.bind(g, binds, &p("ffn.b2")),
        }
    }

    /// Embed, run every block, apply the final layer norm. `n_real` is the
    /// count of non-pad positions (pad keys are masked out); `causal`
    /// additionally hides the right context. Returns the hidden states and
    /// the last layer's attention matrices when `capture_attention`.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_sequence(
        &self,
        g: &mut Graph<T>,
        binds: &mut Bindings,
        token_ids: &[u32],
        tag_ids: Option<&[u32]>,
        n_real: usize,
        causal: bool,
        training: bool,
        rng: &mut Rng,
        capture_attention: bool,
    ) -> Result<(TensorId, Option<Vec<TensorId>>)> {
        let cfg = &self.config.encoder;
        let sl = cfg.sequence_length;
        if token_ids.len() != sl {
            return Err(Error::Contract(format!(
                "encode_sequence: {} ids for sequence length {sl} (pad or truncate first)",
                token_ids.len()
            )));
        }
        let ids: Vec<usize> = token_ids.iter().map(|&i| i as usize).collect();
        let embed = self.bind(g, binds, "embed.token");
        let mut x = g.gather_rows(embed, &ids)?;
        if cfg.use_pos_tags {
            let tag_ids = tag_ids.ok_or_else(|| {
                Error::Contract("encode_sequence: use_pos_tags set but no tag ids supplied".into())
            })?;
            if tag_ids.len() != sl {
                return Err(Error::Contract(format!(
                    "encode_sequence: {} tag ids for sequence length {sl}",
                    tag_ids.len()
                )));
            }
            let tags: Vec<usize> = tag_ids.iter().map(|&i| i as usize).collect();
            let tag_embed = self.bind(g, binds, "embed.tag");
            let te = g.gather_rows(tag_embed, &tags)?;
            x = g.add(x, te)?;
        }

        let mask = (causal || n_real < sl)
            .then(|| encoder::build_mask(g, sl, causal, (n_real < sl).then_some(n_real)));
        let mut attn = None;
        for layer in 0..cfg.num_layers {
            let blk = self.block_nodes(g, binds, layer);
            let capture = capture_attention && layer + 1 == cfg.num_layers;
            let (next, weights) = encoder::encoder_block(g, x, &blk, cfg, mask, training, rng, capture)?;
            x = next;
            if capture {
                attn = weights;
            }
        }
        let gain = self.bind(g, binds, "encoder.final_ln.gain");
        let bias = self.bind(g, binds, "encoder.final_ln.bias");
        let hidden = g.layer_norm(x, gain, bias, T::from_f64(1e-5))?;
        Ok((hidden, attn))
    }

    fn adaptive_nodes(&self, g: &mut Graph<T>, binds: &mut Bindings) -> Result<AdaptiveSoftmaxNodes> {
        let bounds = self.config.bounds()?;
        let cluster = |model: &Self, g: &mut Graph<T>, binds: &mut Bindings, prefix: &str| TailClusterNodes {
            w_proj: model.bind(g, binds, &format!("{prefix}.w_proj")),
            w_out: model.bind(g, binds, &format!("{prefix}.w_out")),
            b_out: model.bind(g, binds, &format!("{prefix}.b_out")),
        };
        Ok(AdaptiveSoftmaxNodes {
            w_head: self.bind(g, binds, "head.lm.w_head"),
            b_head: self.bind(g, binds, "head.lm.b_head"),
            mid: bounds.has_mid().then(|| cluster(self, g, binds, "head.lm.mid")),
            tail: bounds.has_tail().then(|| cluster(self, g, binds, "head.lm.tail")),
        })
    }

    /// Adaptive-softmax log-probability of each target, `[n]`.
    pub fn lm_target_log_probs(
        &self,
        g: &mut Graph<T>,
        binds: &mut Bindings,
        hidden: TensorId,
        targets: &[u32],
        training: bool,
        rng: &mut Rng,
    ) -> Result<TensorId> {
        let nodes = self.adaptive_nodes(g, binds)?;
        let dropped = g.dropout(hidden, self.config.encoder.dropout_rate, training, rng)?;
        heads::lm_log_probs(g, dropped, targets, &nodes, self.config.bounds()?)
    }

    /// Full `[n x |V|]` log-probability matrix (inference/validation path).
    pub fn lm_full_log_probs(
        &self,
        g: &mut Graph<T>,
        binds: &mut Bindings,
        hidden: TensorId,
    ) -> Result<TensorId> {
        let nodes = self.adaptive_nodes(g, binds)?;
        heads::lm_full_log_probs(g, hidden, &nodes, self.config.bounds()?)
    }

    fn bilstm_nodes(&self, g: &mut Graph<T>, binds: &mut Bindings, prefix: &str) -> BiLstmNodes {
        let dir = |model: &Self, g: &mut Graph<T>, binds: &mut Bindings, d: &str| LstmDirNodes {
            w_x: model.bind(g, binds, &format!("{prefix}.{d}.w_x")),
            w_h: model.bind(g, binds, &format!("{prefix}.{d}.w_h")),
            b: model.bind(g, binds, &format!("{prefix}.{d}.b")),
        };
        BiLstmNodes {
            fwd: dir(self, g, binds, "fwd"),
            bwd: dir(self, g, binds, "bwd"),
        }
    }

    /// Per-position class log-probabilities `[SL x 2]` through the active
    /// classification head (with the BiLSTM residual when configured).
    pub fn tagging_log_probs(
        &self,
        g: &mut Graph<T>,
        binds: &mut Bindings,
        hidden: TensorId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<TensorId> {
        let rate = self.config.encoder.dropout_rate;
        let hidden = match self.config.head {
            HeadKind::ClassifierBiLstm => {
                let l1 = self.bilstm_nodes(g, binds, "head.bilstm.l1");
                let l2 = self.bilstm_nodes(g, binds, "head.bilstm.l2");
                heads::bilstm_residual(g, hidden, &l1, &l2, rate, training, rng)?
            }
            HeadKind::Classifier => hidden,
            other => {
                return Err(Error::Contract(format!(
                    "tagging_log_probs: head {} is not a softmax classifier",
                    other.as_str()
                )))
            }
        };
        let nodes = ClassifierNodes {
            w: self.bind(g, binds, "head.cls.w"),
            b: self.bind(g, binds, "head.cls.b"),
        };
        heads::token_classification(g, hidden, &nodes, rate, training, rng)
    }

    /// CRF emissions `[n_real x 2]` (BiLSTM over the real positions, then
    /// the emission projection), plus the transition node.
    pub fn crf_emissions(
        &self,
        g: &mut Graph<T>,
        binds: &mut Bindings,
        hidden: TensorId,
        n_real: usize,
    ) -> Result<(TensorId, TensorId)> {
        if self.config.head != HeadKind::BiLstmCrf {
            return Err(Error::Contract("crf_emissions: model has no CRF head".into()));
        }
        let real = g.slice_rows(hidden, 0, n_real)?;
        let nodes = self.bilstm_nodes(g, binds, "head.crf.bilstm");
        let half = self.config.encoder.embedding_dim / 2;
        let rec = heads::bilstm(g, real, &nodes, half)?;
        let w = self.bind(g, binds, "head.crf.emit.w");
        let b = self.bind(g, binds, "head.crf.emit.b");
        let logits = g.matmul(rec, w)?;
        let emissions = g.add_row(logits, b)?;
        let transitions = self.bind(g, binds, "head.crf.transitions");
        Ok((emissions, transitions))
    }

    /// CRF transition values for plain-math decoding.
    pub fn crf_transition_values(&self) -> Result<&[T]> {
        let idx = self
            .param_index("head.crf.transitions")
            .ok_or_else(|| Error::Contract("model has no CRF transitions".into()))?;
        Ok(&self.params[idx].values)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Harvest gradients from a finished backward pass into the parameter
    /// buffers (allocating them if needed).
    pub fn accumulate_grads(&mut self, g: &Graph<T>, binds: &Bindings) {
        for &(idx, node) in &binds.pairs {
            if let Some(src) = g.grad(node) {
                let p = &mut self.params[idx];
                let dst = p.grad.get_or_insert_with(|| vec![T::ZERO; src.len()]);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}
