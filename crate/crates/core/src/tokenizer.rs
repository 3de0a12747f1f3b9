//! Word-level and byte-pair tokenization plus the frequency-ordered
//! vocabulary that the adaptive softmax clusters are built on.
//!
//! All text is lowercased before any processing. Words keep internal
//! dashes and apostrophes; every other non-alphanumeric character becomes
//! a standalone punctuation token. Sentence terminators emit an `<eos>`
//! token after the terminator run.

use crate::error::{Error, Result};
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const MASK: &str = "<mask>";
pub const UNK: &str = "<unk>";
pub const NUM_SPECIALS: usize = 4;
/// BPE end-of-word sentinel appended to each word's symbol sequence.
pub const END_OF_WORD: &str = "</w>";

pub const EOS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub fn special_tokens() -> [&'static str; NUM_SPECIALS] {
    [EOS, PAD, MASK, UNK]
}

pub fn is_special(token: &str) -> bool {
    special_tokens().contains(&token)
}

/// True for standalone punctuation tokens (no alphanumeric content).
pub fn is_punctuation(token: &str) -> bool {
    !is_special(token) && !token.chars().any(|c| c.is_alphanumeric())
}

fn is_sentence_terminator(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

/// Lowercase and split into word / punctuation tokens, emitting `<eos>`
/// after each sentence-terminator run and at the end of non-empty text.
pub fn word_tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut raw: Vec<String> = Vec::new();
    let mut cur = String::new();
    for i in 0..chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            cur.push(c);
        } else if (c == '-' || c == '\'')
            && !cur.is_empty()
            && i + 1 < chars.len()
            && chars[i + 1].is_alphanumeric()
        {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                raw.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                raw.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        raw.push(cur);
    }

    let mut tokens = Vec::with_capacity(raw.len() + 8);
    let mut i = 0;
    while i < raw.len() {
        tokens.push(raw[i].clone());
        if is_sentence_terminator(&raw[i]) {
            // swallow the rest of the terminator run, then close the sentence
            while i + 1 < raw.len() && is_sentence_terminator(&raw[i + 1]) {
                i += 1;
                tokens.push(raw[i].clone());
            }
            tokens.push(EOS.to_string());
        }
        i += 1;
    }
    if !tokens.is_empty() && tokens.last().map(String::as_str) != Some(EOS) {
        tokens.push(EOS.to_string());
    }
    tokens
}

// ── byte-pair encoding ──────────────────────────────────────────────────

/// Merge-ranked BPE model over lowercased words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    /// Symbol pairs in merge order.
    pub merges: Vec<(String, String)>,
    /// Single-character base symbols (the end-of-word marker is implicit).
    pub alphabet: BTreeSet<String>,
}

impl BpeModel {
    /// Train on word-level tokens (specials are skipped). Merges greedily
    /// by pair count until the implied vocabulary would exceed
    /// `target_vocab_size` (= specials + alphabet + marker + merges) or no
    /// pair occurs at least twice. Count ties break toward the
    /// lexicographically smaller pair.
    pub fn train<'a, I>(words: I, target_vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut word_counts: HashMap<Vec<String>, u64> = HashMap::new();
        let mut alphabet: BTreeSet<String> = BTreeSet::new();
        let mut n_words = 0usize;
        for w in words {
            if is_special(w) {
                continue;
            }
            n_words += 1;
            let mut symbols: Vec<String> = w.chars().map(|c| c.to_string()).collect();
            for s in &symbols {
                alphabet.insert(s.clone());
            }
            symbols.push(END_OF_WORD.to_string());
            *word_counts.entry(symbols).or_insert(0) += 1;
        }
        if n_words == 0 {
            return Err(Error::Data("bpe training corpus is empty".into()));
        }

        let base = NUM_SPECIALS + alphabet.len() + 1; // +1 for the marker
        let budget = target_vocab_size.saturating_sub(base);
        let mut words: Vec<(Vec<String>, u64)> = word_counts.into_iter().collect();
        words.sort(); // deterministic iteration order for all later passes
        let mut merges = Vec::with_capacity(budget);

        for _ in 0..budget {
            let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
            for (symbols, count) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += count;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let Some((pair, _)) = best else { break };
            for (symbols, _) in &mut words {
                merge_in_place(symbols, &pair);
            }
            merges.push(pair);
        }
        Ok(BpeModel { merges, alphabet })
    }

    /// Segment one word into BPE symbols (with end-of-word marker).
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        symbols.push(END_OF_WORD.to_string());
        for pair in &self.merges {
            merge_in_place(&mut symbols, pair);
        }
        symbols
    }

    /// Every symbol this model can emit.
    pub fn symbol_inventory(&self) -> Vec<String> {
        let mut out: Vec<String> = self.alphabet.iter().cloned().collect();
        out.push(END_OF_WORD.to_string());
        for (a, b) in &self.merges {
            out.push(format!("{a}{b}"));
        }
        out
    }
}

fn merge_in_place(symbols: &mut Vec<String>, pair: &(String, String)) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = merged;
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

// ── vocabulary ──────────────────────────────────────────────────────────

/// Frequency-ordered token map with special tokens at the lowest ids and
/// head/mid/tail cluster boundaries for the adaptive softmax.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    frequencies: Vec<u64>,
    /// Cutoffs counted over non-special ids: the first `cutoffs.0`
    /// non-special tokens form the head tail of cluster one, etc.
    cluster_cutoffs: (usize, usize),
}

impl Vocabulary {
    /// Build from a token stream. Non-special tokens are sorted by
    /// descending frequency (ties: first appearance) and truncated so the
    /// total size (including specials) does not exceed `max_size`.
    pub fn build<'a, I>(stream: I, max_size: usize, head_fraction: f64, mid_fraction: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::build_with_required(stream, &[], max_size, head_fraction, mid_fraction)
    }

    /// Like [`Vocabulary::build`], but guarantees an id for every token in
    /// `required` even when it never occurs in the stream (the BPE symbol
    /// inventory needs this so alphabet-covered text can never hit unk).
    pub fn build_with_required<'a, I>(
        stream: I,
        required: &[String],
        max_size: usize,
        head_fraction: f64,
        mid_fraction: f64,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if head_fraction <= 0.0 || mid_fraction <= 0.0 || head_fraction + mid_fraction >= 1.0 {
            return Err(Error::Parameter(format!(
                "cluster fractions must be positive and sum below 1, got {head_fraction} + {mid_fraction}"
            )));
        }
        if max_size <= NUM_SPECIALS {
            return Err(Error::Parameter(format!(
                "max_size {max_size} leaves no room beyond {NUM_SPECIALS} specials"
            )));
        }
        let mut counts: HashMap<&str, (u64, usize)> = HashMap::new(); // (freq, first index)
        let mut special_counts = [0u64; NUM_SPECIALS];
        let mut n_stream = 0usize;
        for (i, tok) in stream.into_iter().enumerate() {
            n_stream += 1;
            if let Some(k) = special_tokens().iter().position(|&s| s == tok) {
                special_counts[k] += 1;
                continue;
            }
            let e = counts.entry(tok).or_insert((0, i));
            e.0 += 1;
        }
        if n_stream == 0 {
            return Err(Error::Data("vocabulary stream is empty".into()));
        }
        for (k, tok) in required.iter().enumerate() {
            if !is_special(tok) {
                counts.entry(tok).or_insert((0, n_stream + k));
            }
        }

        let mut ordered: Vec<(&str, u64, usize)> =
            counts.into_iter().map(|(t, (f, i))| (t, f, i)).collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ordered.truncate(max_size - NUM_SPECIALS);

        let mut id_to_token: Vec<String> = special_tokens().iter().map(|s| s.to_string()).collect();
        let mut frequencies: Vec<u64> = special_counts.to_vec();
        for (t, f, _) in &ordered {
            id_to_token.push(t.to_string());
            frequencies.push(*f);
        }
        let n = ordered.len();
        let c1 = ((head_fraction * n as f64).ceil() as usize).clamp(1, n);
        let c2 = (((head_fraction + mid_fraction) * n as f64).ceil() as usize).clamp(c1, n);
        Ok(Self::assemble(id_to_token, frequencies, (c1, c2)))
    }

    fn assemble(id_to_token: Vec<String>, frequencies: Vec<u64>, cluster_cutoffs: (usize, usize)) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            frequencies,
            cluster_cutoffs,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Cutoffs over non-special ids (head count, head+mid count).
    pub fn cutoffs(&self) -> (usize, usize) {
        self.cluster_cutoffs
    }

    /// Absolute id boundaries `(head_end, mid_end, size)`: cluster one is
    /// `[0, head_end)` (specials included), cluster two `[head_end,
    /// mid_end)`, cluster three `[mid_end, size)`.
    pub fn cluster_bounds(&self) -> (usize, usize, usize) {
        (
            NUM_SPECIALS + self.cluster_cutoffs.0,
            NUM_SPECIALS + self.cluster_cutoffs.1,
            self.size(),
        )
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.frequencies[id as usize]
    }

    /// Canonical text serialization: header with counts and cutoffs, then
    /// one `token<TAB>frequency` line per id in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "keytag-vocab v1 size={} specials={} cutoff1={} cutoff2={}",
            self.size(),
            NUM_SPECIALS,
            self.cluster_cutoffs.0,
            self.cluster_cutoffs.1
        )
        .unwrap();
        for (tok, freq) in self.id_to_token.iter().zip(&self.frequencies) {
            writeln!(out, "{tok}\t{freq}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty vocabulary file".into()))?;
        let fields = parse_header(header, "keytag-vocab v1")?;
        let size: usize = header_field(&fields, "size")?;
        let c1: usize = header_field(&fields, "cutoff1")?;
        let c2: usize = header_field(&fields, "cutoff2")?;
        let mut id_to_token = Vec::with_capacity(size);
        let mut frequencies = Vec::with_capacity(size);
        for (i, line) in lines.enumerate() {
            let (tok, freq) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("vocabulary line {}: missing tab", i + 2)))?;
            id_to_token.push(tok.to_string());
            frequencies.push(
                freq.parse::<u64>()
                    .map_err(|_| Error::Data(format!("vocabulary line {}: bad frequency", i + 2)))?,
            );
        }
        if id_to_token.len() != size {
            return Err(Error::Data(format!(
                "vocabulary header says {size} tokens, file has {}",
                id_to_token.len()
            )));
        }
        Ok(Self::assemble(id_to_token, frequencies, (c1, c2)))
    }
}

fn parse_header(line: &str, magic: &str) -> Result<HashMap<String, String>> {
    let rest = line
        .strip_prefix(magic)
        .ok_or_else(|| Error::Data(format!("bad header: expected `{magic}...`, got `{line}`")))?;
    Ok(rest
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn header_field<T: std::str::FromStr>(fields: &HashMap<String, String>, key: &str) -> Result<T> {
    fields
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data(format!("header field `{key}` missing or invalid")))
}

impl BpeModel {
    /// Canonical text serialization: header, alphabet lines, merge lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "keytag-merges v1 alphabet={} merges={}",
            self.alphabet.len(),
            self.merges.len()
        )
        .unwrap();
        for s in &self.alphabet {
            writeln!(out, "{s}").unwrap();
        }
        for (a, b) in &self.merges {
            writeln!(out, "{a} {b}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty merges file".into()))?;
        let fields = parse_header(header, "keytag-merges v1")?;
        let n_alpha: usize = header_field(&fields, "alphabet")?;
        let n_merges: usize = header_field(&fields, "merges")?;
        let mut alphabet = BTreeSet::new();
        for _ in 0..n_alpha {
            let line = lines.next().ok_or_else(|| Error::Data("merges file truncated".into()))?;
            alphabet.insert(line.to_string());
        }
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| Error::Data("merges file truncated".into()))?;
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Data(format!("bad merge line `{line}`")))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(BpeModel { merges, alphabet })
    }
}

// ── POS tag vocabulary ──────────────────────────────────────────────────

/// Small id map for part-of-speech tag strings. Id 0 is reserved for the
/// `<none>` tag carried by eos and pad positions.
#[derive(Debug, Clone)]
pub struct TagVocab {
    tags: Vec<String>,
    map: HashMap<String, u32>,
}

pub const NO_TAG: &str = "<none>";

impl TagVocab {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(stream: I) -> Self {
        let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
        for (i, t) in stream.into_iter().enumerate() {
            let e = counts.entry(t).or_insert((0, i));
            e.0 += 1;
        }
        let mut ordered: Vec<(&str, u64, usize)> =
            counts.into_iter().map(|(t, (f, i))| (t, f, i)).collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let mut tags = vec![NO_TAG.to_string()];
        tags.extend(ordered.into_iter().map(|(t, _, _)| t.to_string()));
        Self::assemble(tags)
    }

    fn assemble(tags: Vec<String>) -> Self {
        let map = tags.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        TagVocab { tags, map }
    }

    pub fn size(&self) -> usize {
        self.tags.len()
    }

    pub fn id(&self, tag: &str) -> u32 {
        self.map.get(tag).copied().unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "keytag-tags v1 size={}", self.tags.len()).unwrap();
        for t in &self.tags {
            writeln!(out, "{t}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty tags file".into()))?;
        let fields = parse_header(header, "keytag-tags v1")?;
        let size: usize = header_field(&fields, "size")?;
        let tags: Vec<String> = lines.map(|l| l.to_string()).collect();
        if tags.len() != size {
            return Err(Error::Data("tags file truncated".into()));
        }
        Ok(Self::assemble(tags))
    }
}

// ── scheme-level tokenizer ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Word,
    Bpe,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Word => "word",
            Scheme::Bpe => "bpe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Scheme::Word),
            "bpe" => Ok(Scheme::Bpe),
            other => Err(Error::Parameter(format!("unknown tokenization scheme `{other}`"))),
        }
    }
}

/// A document tokenized at scheme granularity, keeping the word-group
/// structure needed for labeling and detokenization.
#[derive(Debug, Clone)]
pub struct TokenizedDoc {
    /// Scheme-level tokens (for BPE these are subword symbols).
    pub pieces: Vec<String>,
    /// Word-group index of each piece; eos/punctuation form their own groups.
    pub word_of_piece: Vec<usize>,
    /// Word-level tokens, one per group (includes `<eos>` groups).
    pub words: Vec<String>,
}

/// Tokenization scheme + vocabulary bundle used by the model.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub scheme: Scheme,
    pub vocab: Vocabulary,
    pub bpe: Option<BpeModel>,
    pub tags: Option<TagVocab>,
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> TokenizedDoc {
        let words = word_tokenize(text);
        match (&self.scheme, &self.bpe) {
            (Scheme::Word, _) => {
                let word_of_piece = (0..words.len()).collect();
                TokenizedDoc {
                    pieces: words.clone(),
                    word_of_piece,
                    words,
                }
            }
            (Scheme::Bpe, Some(bpe)) => {
                let mut pieces = Vec::with_capacity(words.len() * 2);
                let mut word_of_piece = Vec::with_capacity(words.len() * 2);
                for (g, w) in words.iter().enumerate() {
                    if is_special(w) {
                        pieces.push(w.clone());
                        word_of_piece.push(g);
                    } else {
                        for sym in bpe.segment(w) {
                            pieces.push(sym);
                            word_of_piece.push(g);
                        }
                    }
                }
                TokenizedDoc {
                    pieces,
                    word_of_piece,
                    words,
                }
            }
            (Scheme::Bpe, None) => panic!("bpe scheme without a trained model"),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.tokenize(text).pieces.iter().map(|p| self.vocab.id(p)).collect()
    }

    /// Write the canonical text artifacts (`vocab.txt`, plus `merges.txt`
    /// and `tags.txt` when present) into a directory.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("vocab.txt"), self.vocab.to_text())?;
        if let Some(bpe) = &self.bpe {
            std::fs::write(dir.join("merges.txt"), bpe.to_text())?;
        }
        if let Some(tags) = &self.tags {
            std::fs::write(dir.join("tags.txt"), tags.to_text())?;
        }
        Ok(())
    }

    /// Load the artifacts written by [`Tokenizer::save`].
    pub fn load(dir: &std::path::Path, scheme: Scheme, use_pos: bool) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Data(format!("cannot read {}/{name}: {e}", dir.display())))
        };
        let vocab = Vocabulary::from_text(&read("vocab.txt")?)?;
        let bpe = match scheme {
            Scheme::Bpe => Some(BpeModel::from_text(&read("merges.txt")?)?),
            Scheme::Word => None,
        };
        let tags = if use_pos {
            Some(TagVocab::from_text(&read("tags.txt")?)?)
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

    /// Reconstruct surface text (space-joined words) from piece ids,
    /// dropping eos/pad. Inverse of `encode` up to whitespace.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut cur = String::new();
        for &id in ids {
            let tok = self.vocab.token(id);
            if tok == EOS || tok == PAD || tok == MASK {
                continue;
            }
            match self.scheme {
                Scheme::Word => words.push(tok.to_string()),
                Scheme::Bpe => {
                    if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                        cur.push_str(stem);
                        words.push(std::mem::take(&mut cur));
                    } else {
                        cur.push_str(tok);
                    }
                }
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_empty() {
        assert!(word_tokenize("").is_empty());
    }

    #[test]
    fn tokenize_sentence_with_terminator() {
        assert_eq!(
            word_tokenize("The UDDI clients."),
            vec!["the", "uddi", "clients", ".", EOS]
        );
    }

    #[test]
    fn tokenize_keeps_internal_dashes_and_apostrophes() {
        assert_eq!(word_tokenize("state-of-the-art"), vec!["state-of-the-art", EOS]);
        assert_eq!(word_tokenize("O'Neill"), vec!["o'neill", EOS]);
        // leading/trailing marks split off
        assert_eq!(word_tokenize("-abc-"), vec!["-", "abc", "-", EOS]);
    }

    #[test]
    fn tokenize_punctuation_standalone() {
        assert_eq!(
            word_tokenize("a, b! c"),
            vec!["a", ",", "b", "!", EOS, "c", EOS]
        );
    }

    #[test]
    fn bpe_zero_merges_when_target_is_alphabet() {
        let words = ["ab", "ba"];
        let model = BpeModel::train(words.iter().copied(), 2).unwrap();
        assert!(model.merges.is_empty());
    }

    #[test]
    fn bpe_first_merge_is_most_frequent_pair() {
        // brute-force pair counting over "aaab aaab": (a,a) occurs 4 times
        let words = ["aaab", "aaab"];
        let model = BpeModel::train(words.iter().copied(), 100).unwrap();
        assert_eq!(model.merges[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn bpe_tie_breaks_lexicographically() {
        // "ab" and "cd" both occur twice; (a,b) < (c,d)
        let words = ["ab", "cd", "ab", "cd"];
        let model = BpeModel::train(words.iter().copied(), NUM_SPECIALS + 4 + 1 + 1).unwrap();
        assert_eq!(model.merges.len(), 1);
        assert_eq!(model.merges[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn bpe_empty_corpus_is_data_error() {
        let words: [&str; 0] = [];
        assert!(BpeModel::train(words.iter().copied(), 100).is_err());
    }

    #[test]
    fn bpe_determinism() {
        let words = ["lower", "lowest", "newer", "newest", "wider", "widest"];
        let a = BpeModel::train(words.iter().copied(), 40).unwrap();
        let b = BpeModel::train(words.iter().copied(), 40).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocabulary_cutoffs_match_fraction_rule() {
        // 100 distinct non-special tokens, head 0.1 mid 0.3 -> 10 / 40
        let tokens: Vec<String> = (0..100).map(|i| format!("tok{i}")).collect();
        let vocab = Vocabulary::build(tokens.iter().map(|s| s.as_str()), 1000, 0.1, 0.3).unwrap();
        assert_eq!(vocab.cutoffs(), (10, 40));
        let (h, m, s) = vocab.cluster_bounds();
        assert_eq!((h, m, s), (14, 44, 104));
    }

    #[test]
    fn vocabulary_frequency_order_with_tie_break() {
        let stream = ["a", "a", "a", "b", "b", "c"];
        let vocab = Vocabulary::build(stream.iter().copied(), 100, 0.4, 0.3).unwrap();
        assert!(vocab.id("a") < vocab.id("b"));
        assert!(vocab.id("b") < vocab.id("c"));
        assert_eq!(vocab.id("a") as usize, NUM_SPECIALS);

        // equal frequencies fall back to first appearance
        let stream2 = ["z", "y", "x"];
        let vocab2 = Vocabulary::build(stream2.iter().copied(), 100, 0.4, 0.3).unwrap();
        assert!(vocab2.id("z") < vocab2.id("y"));
        assert!(vocab2.id("y") < vocab2.id("x"));
    }

    #[test]
    fn vocabulary_empty_stream_is_data_error() {
        let stream: [&str; 0] = [];
        assert!(Vocabulary::build(stream.iter().copied(), 100, 0.1, 0.3).is_err());
    }

    #[test]
    fn vocabulary_frequency_monotone_over_nonspecials() {
        let stream: Vec<&str> = "the cat sat on the mat the cat".split(' ').collect();
        let vocab = Vocabulary::build(stream.iter().copied(), 100, 0.3, 0.3).unwrap();
        for id in NUM_SPECIALS + 1..vocab.size() {
            assert!(vocab.frequency(id as u32 - 1) >= vocab.frequency(id as u32));
        }
    }

    #[test]
    fn vocabulary_roundtrips_through_text() {
        let stream = ["a", "b", "a", EOS, "c", "a"];
        let vocab = Vocabulary::build(stream.iter().copied(), 100, 0.4, 0.3).unwrap();
        let text = vocab.to_text();
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.cutoffs(), vocab.cutoffs());
    }

    fn word_tokenizer_for(texts: &[&str]) -> Tokenizer {
        let mut stream = Vec::new();
        for t in texts {
            stream.extend(word_tokenize(t));
        }
        let vocab = Vocabulary::build(stream.iter().map(|s| s.as_str()), 1000, 0.2, 0.3).unwrap();
        Tokenizer {
            scheme: Scheme::Word,
            vocab,
            bpe: None,
            tags: None,
        }
    }

    #[test]
    fn encode_known_sentence_is_words_plus_eos() {
        let tk = word_tokenizer_for(&["alpha beta gamma"]);
        let ids = tk.encode("alpha beta gamma");
        assert_eq!(ids.len(), 4);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        assert!(ids[..3].iter().all(|&id| id != UNK_ID));
    }

    #[test]
    fn encode_unknown_word_maps_to_unk() {
        let tk = word_tokenizer_for(&["alpha beta"]);
        let ids = tk.encode("alpha zzz beta");
        assert_eq!(ids[1], UNK_ID);
        assert_ne!(ids[0], UNK_ID);
    }

    #[test]
    fn encode_decode_roundtrip_word_scheme() {
        let tk = word_tokenizer_for(&["the quick brown fox. jumps again!"]);
        let text = "The quick brown fox. Jumps again!";
        let decoded = tk.decode(&tk.encode(text));
        // equality up to lowercasing and whitespace normalization
        let norm: Vec<String> = word_tokenize(text).into_iter().filter(|t| t != EOS).collect();
        assert_eq!(decoded.split(' ').collect::<Vec<_>>(), norm.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn encode_decode_roundtrip_bpe_scheme() {
        let corpus = "lower lowest newer newest";
        let words: Vec<String> = word_tokenize(corpus).into_iter().filter(|t| !is_special(t)).collect();
        let bpe = BpeModel::train(words.iter().map(|s| s.as_str()), 30).unwrap();
        let mut stream = Vec::new();
        for w in word_tokenize(corpus) {
            if is_special(&w) {
                stream.push(w);
            } else {
                stream.extend(bpe.segment(&w));
            }
        }
        let vocab = Vocabulary::build_with_required(
            stream.iter().map(|s| s.as_str()),
            &bpe.symbol_inventory(),
            1000,
            0.2,
            0.3,
        )
        .unwrap();
        let tk = Tokenizer {
            scheme: Scheme::Bpe,
            vocab,
            bpe: Some(bpe),
            tags: None,
        };
        assert_eq!(tk.decode(&tk.encode("lowest newer")), "lowest newer");
        // alphabet-covered unseen word still encodes without unk
        assert!(tk.encode("renew").iter().all(|&id| id != UNK_ID));
    }

    #[test]
    fn bpe_merges_roundtrip_through_text() {
        let words = ["banana", "bandana", "cabana"];
        let model = BpeModel::train(words.iter().copied(), 40).unwrap();
        let text = model.to_text();
        assert_eq!(BpeModel::from_text(&text).unwrap(), model);
    }
}
