//! Turning per-token predictions into ranked keyphrases: contiguous-run
//! decoding, stemmed deduplication, the length/punctuation filters, and
//! score ranking.

use crate::error::{Error, Result};
use crate::evaluation::stem_normalize;
use crate::heads;
use crate::model::{Bindings, EncoderModel, HeadKind};
use crate::rng_from_seed;
use crate::tensor::{Element, Graph};
use crate::tokenizer::{is_punctuation, is_special, Tokenizer, TokenizedDoc, END_OF_WORD, PAD_ID};

/// Maximum keyphrase length in words; longer runs are discarded.
pub const MAX_PHRASE_WORDS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Keyphrase {
    /// Surface words of the phrase, in document order.
    pub words: Vec<String>,
    /// Piece index of the first occurrence in the document.
    pub first_token: usize,
    /// Aggregated keyword-class probability (mean over the run's tokens).
    pub score: f64,
}

impl Keyphrase {
    pub fn surface(&self) -> String {
        self.words.join(" ")
    }

    fn stem_key(&self) -> String {
        stem_normalize(&self.surface())
    }
}

/// Decode maximal runs of tag 1 into candidate phrases. A run never crosses
/// an eos token (phrases do not span sentences). Duplicates under stemmed
/// lowercase equality are merged, keeping the highest score and the
/// earliest first occurrence.
pub fn decode_tags(doc: &TokenizedDoc, tags: &[u8], probs: &[f64]) -> Result<Vec<Keyphrase>> {
    let n = doc.pieces.len();
    if tags.len() != n || probs.len() != n {
        return Err(Error::Contract(format!(
            "decode_tags: {} pieces, {} tags, {} probs",
            n,
            tags.len(),
            probs.len()
        )));
    }
    let mut phrases: Vec<Keyphrase> = Vec::new();
    let mut i = 0;
    while i < n {
        if tags[i] == 0 || is_special(&doc.pieces[i]) {
            i += 1;
            continue;
        }
        let start = i;
        let mut j = i;
        while j < n && tags[j] == 1 && !is_special(&doc.pieces[j]) {
            j += 1;
        }
        // rebuild surface words from the covered word groups
        let mut words: Vec<String> = Vec::new();
        let mut cur_group = usize::MAX;
        for p in start..j {
            if doc.word_of_piece[p] != cur_group {
                cur_group = doc.word_of_piece[p];
                words.push(String::new());
            }
            let piece = &doc.pieces[p];
            let text = piece.strip_suffix(END_OF_WORD).unwrap_or(piece);
            words.last_mut().expect("group opened").push_str(text);
        }
        let score = probs[start..j].iter().sum::<f64>() / (j - start) as f64;
        phrases.push(Keyphrase {
            words,
            first_token: start,
            score,
        });
        i = j;
    }

    // merge duplicates under stemmed equality
    let mut merged: Vec<Keyphrase> = Vec::new();
    for phrase in phrases {
        let key = phrase.stem_key();
        match merged.iter_mut().find(|m| m.stem_key() == key) {
            Some(existing) => {
                if phrase.score > existing.score {
                    existing.score = phrase.score;
                }
            }
            None => merged.push(phrase),
        }
    }
    Ok(merged)
}

/// Length and punctuation filters, order-preserving: phrases longer than
/// four words are discarded, and so is any phrase containing a standalone
/// punctuation token (dashes and apostrophes live inside word tokens and
/// survive).
pub fn filter_keyphrases(candidates: Vec<Keyphrase>) -> Vec<Keyphrase> {
    candidates
        .into_iter()
        .filter(|p| p.words.len() <= MAX_PHRASE_WORDS && !p.words.is_empty())
        .filter(|p| !p.words.iter().any(|w| is_punctuation(w)))
        .collect()
}

/// Stable descending sort by score; ties break toward the earlier first
/// occurrence, making the order deterministic under input permutation.
pub fn rank_keyphrases(mut candidates: Vec<Keyphrase>) -> Vec<Keyphrase> {
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.first_token.cmp(&b.first_token))
    });
    candidates
}

/// Per-position keyword tags and probabilities from the active head, over
/// the first `n_real` pieces.
pub fn predict_tags<T: Element>(
    model: &EncoderModel<T>,
    ids: &[u32],
    tag_ids: Option<&[u32]>,
    n_real: usize,
) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut g: Graph<T> = Graph::new();
    let mut binds = Bindings::default();
    // dropout is inactive at inference; the rng is never sampled
    let mut rng = rng_from_seed(0);
    let (hidden, _) =
        model.encode_sequence(&mut g, &mut binds, ids, tag_ids, n_real, false, false, &mut rng, false)?;
    match model.config.head {
        HeadKind::BiLstmCrf => {
            let (emissions, _) = model.crf_emissions(&mut g, &mut binds, hidden, n_real)?;
            let e = g.values(emissions);
            let t = model.crf_transition_values()?;
            let (labels, _) = heads::viterbi_decode(e, t);
            let probs = heads::crf_marginals(e, t);
            Ok((
                labels.iter().map(|&l| l as u8).collect(),
                probs.iter().map(|p| p.to_f64()).collect(),
            ))
        }
        _ => {
            let lp = model.tagging_log_probs(&mut g, &mut binds, hidden, false, &mut rng)?;
            let vals = g.values(lp);
            let mut tags = Vec::with_capacity(n_real);
            let mut probs = Vec::with_capacity(n_real);
            for i in 0..n_real {
                let (lp0, lp1) = (vals[i * 2], vals[i * 2 + 1]);
                tags.push(u8::from(lp1 > lp0));
                probs.push(lp1.to_f64().exp());
            }
            Ok((tags, probs))
        }
    }
}

/// Pad or truncate piece ids to the model's sequence length. Returns the
/// padded ids and the count of real positions.
pub fn fit_to_length(ids: &[u32], sl: usize) -> (Vec<u32>, usize) {
    let n_real = ids.len().min(sl);
    let mut out = ids[..n_real].to_vec();
    out.resize(sl, PAD_ID);
    (out, n_real)
}

/// Truncate a tokenized document to its first `n_real` pieces.
pub fn truncate_doc(doc: &TokenizedDoc, n_real: usize) -> TokenizedDoc {
    TokenizedDoc {
        pieces: doc.pieces[..n_real].to_vec(),
        word_of_piece: doc.word_of_piece[..n_real].to_vec(),
        words: doc.words.clone(),
    }
}

/// End-to-end extraction: tokenize, predict, decode, filter, rank, and
/// truncate to `k` when given.
pub fn extract<T: Element>(
    model: &EncoderModel<T>,
    tokenizer: &Tokenizer,
    text: &str,
    pos_tags: Option<&[String]>,
    k: Option<usize>,
) -> Result<Vec<Keyphrase>> {
    if k == Some(0) {
        return Ok(Vec::new());
    }
    let doc = tokenizer.tokenize(text);
    if doc.pieces.is_empty() {
        return Ok(Vec::new());
    }
    let sl = model.config.encoder.sequence_length;
    let piece_ids: Vec<u32> = doc.pieces.iter().map(|p| tokenizer.vocab.id(p)).collect();
    let (ids, n_real) = fit_to_length(&piece_ids, sl);
    let tag_ids = match (model.config.encoder.use_pos_tags, pos_tags) {
        (true, Some(tags)) => Some(crate::training::expand_pos_tags(&doc, tags, tokenizer, sl)?),
        (true, None) => {
            return Err(Error::Contract("model expects POS tags but none were supplied".into()))
        }
        (false, _) => None,
    };
    let (tags, probs) = predict_tags(model, &ids, tag_ids.as_deref(), n_real)?;
    let truncated = truncate_doc(&doc, n_real);
    let candidates = decode_tags(&truncated, &tags, &probs)?;
    let ranked = rank_keyphrases(filter_keyphrases(candidates));
    Ok(match k {
        Some(k) => ranked.into_iter().take(k).collect(),
        None => ranked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::word_tokenize;

    fn word_doc(text: &str) -> TokenizedDoc {
        let words = word_tokenize(text);
        TokenizedDoc {
            pieces: words.clone(),
            word_of_piece: (0..words.len()).collect(),
            words,
        }
    }

    fn uniform(doc: &TokenizedDoc, marked: &[&str]) -> (Vec<u8>, Vec<f64>) {
        let tags: Vec<u8> = doc
            .pieces
            .iter()
            .map(|p| u8::from(marked.contains(&p.as_str())))
            .collect();
        let probs = vec![0.9; doc.pieces.len()];
        (tags, probs)
    }

    #[test]
    fn decode_figure_style_stream() {
        // ones on "distributed interactions" and "uddi"
        let doc = word_doc("The advantage of this is to introduce distributed interactions between the UDDI clients.");
        let (tags, probs) = uniform(&doc, &["distributed", "interactions", "uddi"]);
        let phrases = decode_tags(&doc, &tags, &probs).unwrap();
        let surfaces: Vec<String> = phrases.iter().map(|p| p.surface()).collect();
        assert_eq!(surfaces, vec!["distributed interactions".to_string(), "uddi".to_string()]);
    }

    #[test]
    fn decode_all_zero_and_boundary_run() {
        let doc = word_doc("alpha beta gamma");
        let zero = vec![0u8; doc.pieces.len()];
        let probs = vec![0.5; doc.pieces.len()];
        assert!(decode_tags(&doc, &zero, &probs).unwrap().is_empty());

        // run touching the sequence end (last non-eos token tagged)
        let mut tags = vec![0u8; doc.pieces.len()];
        let last_word = doc.pieces.len() - 2; // before <eos>
        tags[last_word] = 1;
        let phrases = decode_tags(&doc, &tags, &probs).unwrap();
        assert_eq!(phrases.len(), 1);
        assert_eq!(phrases[0].surface(), "gamma");
    }

    #[test]
    fn decode_merges_stemmed_duplicates_keeping_best() {
        let doc = word_doc("markets fall. market rises.");
        let mut tags = vec![0u8; doc.pieces.len()];
        let mut probs = vec![0.0; doc.pieces.len()];
        let m1 = doc.pieces.iter().position(|p| p == "markets").unwrap();
        let m2 = doc.pieces.iter().position(|p| p == "market").unwrap();
        tags[m1] = 1;
        probs[m1] = 0.4;
        tags[m2] = 1;
        probs[m2] = 0.8;
        let phrases = decode_tags(&doc, &tags, &probs).unwrap();
        assert_eq!(phrases.len(), 1);
        assert_eq!(phrases[0].surface(), "markets"); // earliest occurrence
        assert_eq!(phrases[0].score, 0.8); // best score
        assert_eq!(phrases[0].first_token, m1);
    }

    #[test]
    fn runs_break_at_eos() {
        let doc = word_doc("alpha beta. gamma delta");
        let mut tags = vec![1u8; doc.pieces.len()];
        let probs = vec![0.9; doc.pieces.len()];
        // punctuation token also tagged; phrase containing "." would be
        // filtered later, but the eos break keeps sentences apart
        for (i, p) in doc.pieces.iter().enumerate() {
            if p == "." {
                tags[i] = 0;
            }
        }
        let phrases = decode_tags(&doc, &tags, &probs).unwrap();
        let surfaces: Vec<String> = phrases.iter().map(|p| p.surface()).collect();
        assert_eq!(surfaces, vec!["alpha beta".to_string(), "gamma delta".to_string()]);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let doc = word_doc("alpha beta");
        assert!(decode_tags(&doc, &[1], &[0.5, 0.5, 0.5]).is_err());
    }

    fn kp(words: &[&str], first: usize, score: f64) -> Keyphrase {
        Keyphrase {
            words: words.iter().map(|s| s.to_string()).collect(),
            first_token: first,
            score,
        }
    }

    #[test]
    fn filter_rules() {
        let cands = vec![
            kp(&["one", "two", "three", "four", "five"], 0, 0.9),
            kp(&["state-of-the-art"], 5, 0.8),
            kp(&["o'neill"], 7, 0.7),
            kp(&["bad", ",", "phrase"], 9, 0.6),
            kp(&["fine", "phrase"], 12, 0.5),
        ];
        let kept = filter_keyphrases(cands);
        let surfaces: Vec<String> = kept.iter().map(|p| p.surface()).collect();
        assert_eq!(
            surfaces,
            vec!["state-of-the-art".to_string(), "o'neill".to_string(), "fine phrase".to_string()]
        );
    }

    #[test]
    fn ranking_is_deterministic_total_order() {
        let a = kp(&["a"], 3, 0.9);
        let b = kp(&["b"], 1, 0.5);
        let c = kp(&["c"], 0, 0.5);
        let ranked = rank_keyphrases(vec![b.clone(), a.clone(), c.clone()]);
        assert_eq!(ranked, vec![a.clone(), c.clone(), b.clone()]);
        // permuted input yields the identical order
        for perm in [vec![a.clone(), b.clone(), c.clone()], vec![c.clone(), a.clone(), b.clone()]] {
            assert_eq!(rank_keyphrases(perm), ranked);
        }
    }
}
