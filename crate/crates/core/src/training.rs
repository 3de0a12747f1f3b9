//! Training: language-model pretraining (autoregressive and masked), the
//! recall-oriented two-set tagging loss, gold-phrase labeling, and the
//! fine-tuning loop with best-epoch selection by validation F1@10.

use crate::checkpoint::{vocabulary_hash, Checkpoint};
use crate::corpus::CorpusRecord;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::evaluate_corpus;
use crate::extraction::{extract, fit_to_length};
use crate::heads::crf_log_prob;
use crate::model::{Bindings, EncoderModel, HeadKind, ModelConfig};
use crate::optim::Adam;
use crate::stem::stem_fixpoint;
use crate::tensor::{Element, Graph, TensorId};
use crate::tokenizer::{
    word_tokenize, BpeModel, Scheme, TagVocab, TokenizedDoc, Tokenizer, Vocabulary, EOS, MASK_ID,
    NUM_SPECIALS,
};
use crate::{rng_from_seed, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

/// Pretraining objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Autoregressive,
    Masked,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Autoregressive => "autoregressive",
            Objective::Masked => "masked",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "autoregressive" | "ar" | "lm" => Ok(Objective::Autoregressive),
            "masked" | "maskedlm" => Ok(Objective::Masked),
            other => Err(Error::Parameter(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            objective: Objective::Autoregressive,
            epochs: 10,
            lr: 3e-4,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub head: HeadKind,
    /// Validation selection metric is F1 at this cutoff (the protocol
    /// fixes it to 10).
    pub selection_k: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            lr: 3e-4,
            batch_size: 16,
            head: HeadKind::Classifier,
            selection_k: 10,
            seed: 0,
        }
    }
}

fn validate_common(epochs: usize, lr: f64, batch_size: usize) -> Result<()> {
    if epochs == 0 {
        return Err(Error::Parameter("epochs must be at least 1".into()));
    }
    if lr <= 0.0 {
        return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be at least 1".into()));
    }
    Ok(())
}

// ── losses ──────────────────────────────────────────────────────────────

/// Mean negative log-likelihood over unmasked target positions.
pub fn nll_lm_loss<T: Element>(g: &mut Graph<T>, target_log_probs: TensorId, mask: &[bool]) -> Result<TensorId> {
    let n = g.values(target_log_probs).len();
    if mask.len() != n {
        return Err(Error::Contract(format!("nll_lm_loss: {} mask bits for {n} targets", mask.len())));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Contract("nll_lm_loss: no unmasked targets".into()));
    }
    let weights: Vec<T> = mask.iter().map(|&m| if m { T::ONE } else { T::ZERO }).collect();
    let w = g.constant(vec![n], weights);
    let flat = g.reshape(target_log_probs, vec![n])?;
    let kept = g.mul(flat, w)?;
    let total = g.sum_all(kept);
    Ok(g.scale(total, -T::ONE / T::from_f64(count as f64)))
}

/// Two-set tagging loss: `L+ + L-`, each the mean negative true-class
/// log-probability over its class's included positions. An empty set
/// contributes zero; both sets empty is a contract error.
pub fn tagging_loss<T: Element>(
    g: &mut Graph<T>,
    log_probs: TensorId,
    labels: &[u8],
    include: &[bool],
) -> Result<TensorId> {
    let n = g.shape(log_probs)[0];
    if labels.len() != n || include.len() != n {
        return Err(Error::Contract(format!(
            "tagging_loss: {n} positions, {} labels, {} include bits",
            labels.len(),
            include.len()
        )));
    }
    let mut positive: Vec<(usize, usize)> = Vec::new();
    let mut negative: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        if !include[i] {
            continue;
        }
        match labels[i] {
            1 => positive.push((i, 1)),
            0 => negative.push((i, 0)),
            other => return Err(Error::Contract(format!("tagging_loss: label {other} not binary"))),
        }
    }
    if positive.is_empty() && negative.is_empty() {
        return Err(Error::Contract("tagging_loss: both classes empty".into()));
    }
    let mut loss: Option<TensorId> = None;
    for coords in [&positive, &negative] {
        if coords.is_empty() {
            continue;
        }
        let picks = g.gather_entries(log_probs, coords)?;
        let s = g.sum_all(picks);
        let part = g.scale(s, -T::ONE / T::from_f64(coords.len() as f64));
        loss = Some(match loss {
            Some(l) => g.add(l, part)?,
            None => part,
        });
    }
    Ok(loss.expect("at least one class present"))
}

// ── masking ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingOutcome {
    pub corrupted: Vec<u32>,
    pub target_positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// The masked-LM corruption recipe: 15 percent of eligible (non-special)
/// tokens become prediction targets; of those, 80 percent are replaced by
/// `<mask>`, 10 percent by a random non-special word, 10 percent kept.
pub fn apply_masking(token_ids: &[u32], vocab_size: usize, rng: &mut Rng) -> MaskingOutcome {
    let mut corrupted = token_ids.to_vec();
    let mut target_positions = Vec::new();
    let mut targets = Vec::new();
    let lo = NUM_SPECIALS as u32;
    let hi = vocab_size as u32;
    for (i, &id) in token_ids.iter().enumerate() {
        if id < lo {
            continue; // specials (eos, pad, mask, unk) are never selected
        }
        if rng.gen::<f64>() >= 0.15 {
            continue;
        }
        target_positions.push(i);
        targets.push(id);
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            corrupted[i] = MASK_ID;
        } else if roll < 0.9 && hi > lo {
            corrupted[i] = rng.gen_range(lo..hi);
        } // else: keep the original token
    }
    MaskingOutcome {
        corrupted,
        target_positions,
        targets,
    }
}

// ── labeling ────────────────────────────────────────────────────────────

/// Binary keyword labels per piece: every occurrence of every gold phrase,
/// matched as a contiguous stemmed word sequence, is labeled 1 (union
/// over phrases); everything else, eos included, is 0.
pub fn label_sequence(doc: &TokenizedDoc, gold: &[String]) -> Vec<u8> {
    let stemmed: Vec<String> = doc
        .words
        .iter()
        .map(|w| if w == EOS { w.clone() } else { stem_fixpoint(w) })
        .collect();
    let mut marked = vec![false; doc.words.len()];
    for phrase in gold {
        let needle: Vec<String> = word_tokenize(phrase)
            .into_iter()
            .filter(|t| t != EOS)
            .map(|t| stem_fixpoint(&t))
            .collect();
        if needle.is_empty() || needle.len() > stemmed.len() {
            continue;
        }
        for start in 0..=stemmed.len() - needle.len() {
            if stemmed[start..start + needle.len()] == needle[..] {
                for m in &mut marked[start..start + needle.len()] {
                    *m = true;
                }
            }
        }
    }
    doc.word_of_piece.iter().map(|&g| u8::from(marked[g])).collect()
}

/// Map word-aligned POS tag strings onto piece positions, padded to `sl`.
/// Tags align with non-eos word tokens; eos and pad positions carry the
/// null tag.
pub fn expand_pos_tags(
    doc: &TokenizedDoc,
    word_tags: &[String],
    tokenizer: &Tokenizer,
    sl: usize,
) -> Result<Vec<u32>> {
    let tag_vocab = tokenizer
        .tags
        .as_ref()
        .ok_or_else(|| Error::Contract("tokenizer has no tag vocabulary".into()))?;
    let non_eos = doc.words.iter().filter(|w| *w != EOS).count();
    if word_tags.len() != non_eos {
        return Err(Error::Data(format!(
            "{} pos tags for {non_eos} word tokens",
            word_tags.len()
        )));
    }
    let mut group_tag = Vec::with_capacity(doc.words.len());
    let mut next = 0usize;
    for w in &doc.words {
        if w == EOS {
            group_tag.push(0u32);
        } else {
            group_tag.push(tag_vocab.id(&word_tags[next]));
            next += 1;
        }
    }
    let mut out: Vec<u32> = doc.word_of_piece.iter().map(|&g| group_tag[g]).collect();
    out.truncate(sl);
    out.resize(sl, 0);
    Ok(out)
}

// ── tokenizer construction ──────────────────────────────────────────────

/// Vocabulary caps and cluster fractions.
#[derive(Debug, Clone)]
pub struct VocabConfig {
    pub max_size: usize,
    pub head_fraction: f64,
    pub mid_fraction: f64,
    /// Target size for a trained BPE inventory.
    pub bpe_vocab_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: 50_000,
            head_fraction: 0.1,
            mid_fraction: 0.3,
            bpe_vocab_size: 5_000,
        }
    }
}

/// Build the tokenization bundle (word or BPE scheme, optional POS tag
/// vocabulary) from a corpus.
pub fn build_tokenizer(
    records: &[CorpusRecord],
    scheme: Scheme,
    use_pos: bool,
    cfg: &VocabConfig,
) -> Result<Tokenizer> {
    let texts: Vec<String> = records.iter().map(|r| r.model_text()).collect();
    let mut word_stream: Vec<String> = Vec::new();
    for t in &texts {
        word_stream.extend(word_tokenize(t));
    }
    if word_stream.is_empty() {
        return Err(Error::Data("corpus has no tokens".into()));
    }
    let (vocab, bpe) = match scheme {
        Scheme::Word => {
            let vocab = Vocabulary::build(
                word_stream.iter().map(String::as_str),
                cfg.max_size,
                cfg.head_fraction,
                cfg.mid_fraction,
            )?;
            (vocab, None)
        }
        Scheme::Bpe => {
            let bpe = BpeModel::train(
                word_stream.iter().map(String::as_str),
                cfg.bpe_vocab_size,
            )?;
            let mut piece_stream: Vec<String> = Vec::new();
            for w in &word_stream {
                if crate::tokenizer::is_special(w) {
                    piece_stream.push(w.clone());
                } else {
                    piece_stream.extend(bpe.segment(w));
                }
            }
            let vocab = Vocabulary::build_with_required(
                piece_stream.iter().map(String::as_str),
                &bpe.symbol_inventory(),
                cfg.max_size.max(cfg.bpe_vocab_size),
                cfg.head_fraction,
                cfg.mid_fraction,
            )?;
            (vocab, Some(bpe))
        }
    };
    let tags = if use_pos {
        let mut tag_stream: Vec<&str> = Vec::new();
        for r in records {
            if let Some(tags) = &r.pos_tags {
                tag_stream.extend(tags.iter().map(String::as_str));
            }
        }
        if tag_stream.is_empty() {
            return Err(Error::Data("use_pos set but no record carries pos_tags".into()));
        }
        Some(TagVocab::build(tag_stream))
    } else {
        None
    };
    Ok(Tokenizer {
        scheme,
        vocab,
        bpe,
        tags,
    })
}

/// Model configuration derived from a tokenizer plus encoder settings.
pub fn model_config(tokenizer: &Tokenizer, encoder: EncoderConfig, head: HeadKind) -> ModelConfig {
    let (head_end, mid_end, _) = tokenizer.vocab.cluster_bounds();
    ModelConfig {
        encoder,
        vocab_size: tokenizer.vocab.size(),
        head_end,
        mid_end,
        tag_vocab_size: tokenizer.tags.as_ref().map_or(0, TagVocab::size),
        head,
    }
}

// ── pretraining ─────────────────────────────────────────────────────────

struct Window {
    ids: Vec<u32>,
    tag_ids: Option<Vec<u32>>,
    n_real: usize,
}

/// Chunk each document's pieces into non-overlapping windows of the
/// sequence length (never packing across document boundaries); the last
/// partial window is padded. Windows shorter than two tokens are dropped.
fn pack_windows(records: &[CorpusRecord], tokenizer: &Tokenizer, sl: usize, use_pos: bool) -> Result<Vec<Window>> {
    let mut windows = Vec::new();
    for rec in records {
        let text = rec.model_text();
        let doc = tokenizer.tokenize(&text);
        let mut piece_ids: Vec<u32> = doc.pieces.iter().map(|p| tokenizer.vocab.id(p)).collect();
        let mut tag_ids: Option<Vec<u32>> = None;
        if use_pos {
            let tags = rec.pos_tags.as_ref().ok_or_else(|| {
                Error::Data(format!("document `{}` lacks pos_tags required by use_pos", rec.id))
            })?;
            tag_ids = Some(expand_pos_tags(&doc, tags, tokenizer, piece_ids.len())?);
        }
        while !piece_ids.is_empty() {
            let take = piece_ids.len().min(sl);
            let chunk: Vec<u32> = piece_ids.drain(..take).collect();
            let tag_chunk: Option<Vec<u32>> = tag_ids.as_mut().map(|t| t.drain(..take).collect());
            if chunk.len() < 2 {
                break;
            }
            let n_real = chunk.len();
            let (ids, _) = fit_to_length(&chunk, sl);
            let tag_ids_win = tag_chunk.map(|tc| {
                let mut t = tc;
                t.resize(sl, 0);
                t
            });
            windows.push(Window {
                ids,
                tag_ids: tag_ids_win,
                n_real,
            });
        }
    }
    Ok(windows)
}

/// Pretrain an LM-headed model. Returns the model and the per-epoch mean
/// loss (per target token).
pub fn pretrain(
    records: &[CorpusRecord],
    tokenizer: &Tokenizer,
    encoder_cfg: EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<(EncoderModel<f32>, Vec<f64>)> {
    validate_common(cfg.epochs, cfg.lr, cfg.batch_size)?;
    let sl = encoder_cfg.sequence_length;
    let use_pos = encoder_cfg.use_pos_tags;
    let windows = pack_windows(records, tokenizer, sl, use_pos)?;
    if windows.is_empty() {
        return Err(Error::Data("pretraining corpus yields no training windows".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mcfg = model_config(tokenizer, encoder_cfg, HeadKind::Lm);
    let mut model = EncoderModel::new(mcfg, &mut rng)?;
    let mut opt = Adam::new(cfg.lr, &model.params);
    let causal = cfg.objective == Objective::Autoregressive;
    let vocab_size = tokenizer.vocab.size();

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut target_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grads();
            let mut batch_used = 0usize;
            let mut pending: Vec<(Graph<f32>, Bindings, TensorId, usize)> = Vec::new();
            for &wi in batch {
                let w = &windows[wi];
                let (input_ids, positions, targets): (Vec<u32>, Vec<usize>, Vec<u32>) = match cfg.objective {
                    Objective::Autoregressive => {
                        let positions: Vec<usize> = (0..w.n_real - 1).collect();
                        let targets: Vec<u32> = (1..w.n_real).map(|i| w.ids[i]).collect();
                        (w.ids.clone(), positions, targets)
                    }
                    Objective::Masked => {
                        let outcome = apply_masking(&w.ids, vocab_size, &mut rng);
                        (outcome.corrupted, outcome.target_positions, outcome.targets)
                    }
                };
                if positions.is_empty() {
                    continue; // a window may draw zero masking targets
                }
                let mut g: Graph<f32> = Graph::new();
                let mut binds = Bindings::default();
                let (hidden, _) = model.encode_sequence(
                    &mut g,
                    &mut binds,
                    &input_ids,
                    w.tag_ids.as_deref(),
                    w.n_real,
                    causal,
                    true,
                    &mut rng,
                    false,
                )?;
                let rows = g.gather_rows(hidden, &positions)?;
                let picks = model.lm_target_log_probs(&mut g, &mut binds, rows, &targets, true, &mut rng)?;
                let mask = vec![true; targets.len()];
                let loss = nll_lm_loss(&mut g, picks, &mask)?;
                loss_sum += g.scalar(loss) as f64 * targets.len() as f64;
                target_count += targets.len();
                pending.push((g, binds, loss, targets.len()));
                batch_used += 1;
            }
            if batch_used == 0 {
                continue;
            }
            for (mut g, binds, loss, _) in pending {
                let scaled = g.scale(loss, 1.0 / batch_used as f32);
                g.backward(scaled)?;
                model.accumulate_grads(&g, &binds);
            }
            opt.step(&mut model.params)?;
        }
        epoch_losses.push(if target_count == 0 {
            f64::NAN
        } else {
            loss_sum / target_count as f64
        });
    }
    Ok((model, epoch_losses))
}

// ── fine-tuning ─────────────────────────────────────────────────────────

/// Build the tagging-phase model, transferring encoder weights from a
/// pretrained checkpoint when given. The checkpoint's vocabulary hash must
/// match the tokenizer.
pub fn init_tagging_model(
    init: Option<&Checkpoint>,
    tokenizer: &Tokenizer,
    encoder_cfg: EncoderConfig,
    head: HeadKind,
    seed: u64,
) -> Result<EncoderModel<f32>> {
    let mut rng = rng_from_seed(seed);
    let mcfg = model_config(tokenizer, encoder_cfg, head);
    let mut model = EncoderModel::new(mcfg, &mut rng)?;
    if let Some(ckpt) = init {
        let expected = vocabulary_hash(tokenizer);
        match ckpt.vocab_hash() {
            Some(h) if h == expected => {}
            Some(h) => {
                return Err(Error::Compatibility(format!(
                    "checkpoint was built with vocabulary {h}, corpus tokenizer hashes to {expected}"
                )))
            }
            None => return Err(Error::Compatibility("checkpoint carries no vocabulary hash".into())),
        }
        let source = ckpt.to_model()?;
        if source.config.encoder != model.config.encoder {
            return Err(Error::Compatibility(
                "checkpoint encoder configuration differs from the requested one".into(),
            ));
        }
        model.load_matching(&source);
    }
    Ok(model)
}

struct TaggingDoc {
    ids: Vec<u32>,
    tag_ids: Option<Vec<u32>>,
    labels: Vec<u8>,
    include: Vec<bool>,
    n_real: usize,
}

fn prepare_tagging_doc(
    rec: &CorpusRecord,
    tokenizer: &Tokenizer,
    sl: usize,
    use_pos: bool,
) -> Result<TaggingDoc> {
    let text = rec.model_text();
    let doc = tokenizer.tokenize(&text);
    let piece_ids: Vec<u32> = doc.pieces.iter().map(|p| tokenizer.vocab.id(p)).collect();
    let (ids, n_real) = fit_to_length(&piece_ids, sl);
    let mut labels = label_sequence(&doc, rec.gold());
    labels.truncate(sl);
    labels.resize(sl, 0);
    // pads and eos are excluded from the loss sets; eos keeps label 0
    let mut include = vec![false; sl];
    for i in 0..n_real {
        include[i] = doc.pieces[i] != EOS;
    }
    let tag_ids = if use_pos {
        let tags = rec
            .pos_tags
            .as_ref()
            .ok_or_else(|| Error::Data(format!("document `{}` lacks pos_tags", rec.id)))?;
        Some(expand_pos_tags(&doc, tags, tokenizer, sl)?)
    } else {
        None
    };
    Ok(TaggingDoc {
        ids,
        tag_ids,
        labels,
        include,
        n_real,
    })
}

/// Ranked top-`k` surfaces for each document, in corpus order (documents
/// are independent, so this fans out across threads).
pub fn predict_corpus(
    model: &EncoderModel<f32>,
    tokenizer: &Tokenizer,
    records: &[CorpusRecord],
    k: usize,
) -> Result<Vec<Vec<String>>> {
    records
        .par_iter()
        .map(|rec| {
            let phrases = extract(model, tokenizer, &rec.model_text(), rec.pos_tags.as_deref(), Some(k))?;
            Ok(phrases.iter().map(|p| p.surface()).collect())
        })
        .collect()
}

/// Macro F1@k of the model's extractions over a labeled set.
pub fn corpus_f1(
    model: &EncoderModel<f32>,
    tokenizer: &Tokenizer,
    records: &[CorpusRecord],
    k: usize,
) -> Result<f64> {
    let texts: Vec<String> = records.iter().map(|r| r.model_text()).collect();
    let gold: Vec<Vec<String>> = records.iter().map(|r| r.gold().to_vec()).collect();
    let preds = predict_corpus(model, tokenizer, records, k)?;
    let report = evaluate_corpus(&texts, &preds, &gold, &[k])?;
    Ok(report.f1_at(k).expect("requested cutoff present"))
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    /// Validation F1@k after each epoch.
    pub curve: Vec<f64>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
}

/// Train the tagging model for up to `cfg.epochs` epochs, evaluating
/// validation F1 after each and keeping the best epoch's weights
/// (earliest epoch wins ties). The CRF head trains with sequence NLL,
/// the softmax heads with the two-set tagging loss.
pub fn finetune_model(
    model: &mut EncoderModel<f32>,
    train: &[CorpusRecord],
    valid: &[CorpusRecord],
    tokenizer: &Tokenizer,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    validate_common(cfg.epochs, cfg.lr, cfg.batch_size)?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("finetune needs non-empty train and validation sets".into()));
    }
    let sl = model.config.encoder.sequence_length;
    let use_pos = model.config.encoder.use_pos_tags;
    let docs: Vec<TaggingDoc> = train
        .iter()
        .map(|r| prepare_tagging_doc(r, tokenizer, sl, use_pos))
        .collect::<Result<_>>()?;

    let extra = checkpoint_metadata(tokenizer);
    let mut rng = rng_from_seed(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(cfg.lr, &model.params);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grads();
            let mut pending: Vec<(Graph<f32>, Bindings, TensorId)> = Vec::new();
            for &di in batch {
                let doc = &docs[di];
                let mut g: Graph<f32> = Graph::new();
                let mut binds = Bindings::default();
                let (hidden, _) = model.encode_sequence(
                    &mut g,
                    &mut binds,
                    &doc.ids,
                    doc.tag_ids.as_deref(),
                    doc.n_real,
                    false,
                    true,
                    &mut rng,
                    false,
                )?;
                let loss = if model.config.head.is_crf() {
                    let (emissions, transitions) = model.crf_emissions(&mut g, &mut binds, hidden, doc.n_real)?;
                    let labels: Vec<usize> = doc.labels[..doc.n_real].iter().map(|&l| l as usize).collect();
                    let lp = crf_log_prob(&mut g, emissions, &labels, transitions)?;
                    g.scale(lp, -1.0)
                } else {
                    let log_probs = model.tagging_log_probs(&mut g, &mut binds, hidden, true, &mut rng)?;
                    tagging_loss(&mut g, log_probs, &doc.labels, &doc.include)?
                };
                pending.push((g, binds, loss));
            }
            let batch_used = pending.len().max(1);
            for (mut g, binds, loss) in pending {
                let scaled = g.scale(loss, 1.0 / batch_used as f32);
                g.backward(scaled)?;
                model.accumulate_grads(&g, &binds);
            }
            opt.step(&mut model.params)?;
        }
        let f1 = corpus_f1(model, tokenizer, valid, cfg.selection_k)?;
        curve.push(f1);
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, Checkpoint::from_model(model, &extra)));
        }
    }
    let (_, best_epoch, checkpoint) = best.expect("at least one epoch ran");
    Ok(FinetuneOutcome {
        checkpoint,
        curve,
        best_epoch,
    })
}

/// Metadata stored in every checkpoint written by the training loops.
pub fn checkpoint_metadata(tokenizer: &Tokenizer) -> Vec<(&'static str, String)> {
    vec![
        ("vocab_hash", vocabulary_hash(tokenizer)),
        ("scheme", tokenizer.scheme.as_str().to_string()),
    ]
}

/// End-to-end fine-tuning from an optional pretrained checkpoint.
pub fn finetune(
    init: Option<&Checkpoint>,
    train: &[CorpusRecord],
    valid: &[CorpusRecord],
    tokenizer: &Tokenizer,
    encoder_cfg: EncoderConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let mut model = init_tagging_model(init, tokenizer, encoder_cfg, cfg.head, cfg.seed)?;
    finetune_model(&mut model, train, valid, tokenizer, cfg)
}

/// Mean last-layer attention diagonal per head over a corpus (the
/// position-profile analysis).
pub fn attention_profiles(
    model: &EncoderModel<f32>,
    tokenizer: &Tokenizer,
    records: &[CorpusRecord],
) -> Result<Vec<Vec<f32>>> {
    let sl = model.config.encoder.sequence_length;
    let use_pos = model.config.encoder.use_pos_tags;
    let per_doc: Vec<Vec<Vec<f32>>> = records
        .par_iter()
        .map(|rec| {
            let text = rec.model_text();
            let doc = tokenizer.tokenize(&text);
            let piece_ids: Vec<u32> = doc.pieces.iter().map(|p| tokenizer.vocab.id(p)).collect();
            let (ids, n_real) = fit_to_length(&piece_ids, sl);
            let tag_ids = if use_pos {
                let tags = rec
                    .pos_tags
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("document `{}` lacks pos_tags", rec.id)))?;
                Some(expand_pos_tags(&doc, tags, tokenizer, sl)?)
            } else {
                None
            };
            let mut g: Graph<f32> = Graph::new();
            let mut binds = Bindings::default();
            let mut rng = rng_from_seed(0);
            let (_, attn) = model.encode_sequence(
                &mut g,
                &mut binds,
                &ids,
                tag_ids.as_deref(),
                n_real,
                false,
                false,
                &mut rng,
                true,
            )?;
            let heads = attn.expect("capture requested");
            Ok(heads.into_iter().map(|id| g.values(id).to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    crate::encoder::attention_diagonals(&per_doc, sl)
}
