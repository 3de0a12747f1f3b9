//! Deterministic synthetic corpora for tests and desk-scale runs:
//! template sentences with pseudo-word topic phrases that double as gold
//! keyphrases. Topic words appear only in keyword slots, so distributional
//! structure is learnable from raw text alone.

use crate::corpus::CorpusRecord;
use crate::rng_from_seed;
use crate::tokenizer::{word_tokenize, EOS};
use crate::Rng;
use rand::seq::SliceRandom;
use rand::Rng as _;
use std::collections::BTreeSet;

const SYLLABLES: &[&str] = &[
    "qua", "zen", "mek", "tor", "vel", "dra", "pix", "sol", "gri", "fen", "lum", "bar", "cor",
    "dul", "eka", "fos", "gan", "hil", "jor", "kan",
];

const KEYWORD_TEMPLATES: &[&str] = &[
    "we propose {} for {}",
    "the method of {} is evaluated against {}",
    "our approach to {} uses {}",
    "experiments on {} confirm the benefit of {}",
    "{} clearly outperforms the baseline",
    "a framework for {} is presented",
    "training with {} reduces the observed error",
];

const FILLER_SENTENCES: &[&str] = &[
    "the results are discussed in detail",
    "this work extends several earlier studies",
    "performance is measured on standard data",
    "the analysis covers a range of settings",
    "further evaluation remains future work",
    "related methods are reviewed briefly",
];

// Background frames that only dud words ever occupy; they give duds a
// second context family so their embeddings separate from topic words
// during language-model pretraining.
const DUD_FRAMES: &[&str] = &[
    "see also {} and {} in the appendix",
    "the symbols {} and {} are reserved",
    "footnotes mention {} and {} briefly",
    "earlier drafts used {} instead of {}",
];

/// Generation knobs. A small `topic_pool` makes documents easy to
/// memorize. `dud_pool` words share the keyword slots (so slot context
/// cannot decide keyword-ness) but are never gold; `dud_slot_prob`
/// controls how often a top-up slot sentence hosts duds instead of this
/// document's topic phrases.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_docs: usize,
    pub topic_pool: usize,
    pub common_topics: usize,
    pub dud_pool: usize,
    pub dud_slot_prob: f64,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub seed: u64,
}

fn pseudo_words(count: usize, rng: &mut Rng, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut words = Vec::with_capacity(count);
    while words.len() < count {
        let mut w = String::new();
        let syllables = if rng.gen::<f64>() < 0.3 { 3 } else { 2 };
        for _ in 0..syllables {
            w.push_str(SYLLABLES.choose(rng).expect("non-empty"));
        }
        if taken.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn sample_phrase(words: &[String], common: usize, rng: &mut Rng) -> String {
    let pick = |rng: &mut Rng| -> String {
        if rng.gen::<f64>() < 0.3 {
            words[rng.gen_range(0..common.min(words.len()))].clone()
        } else {
            words[rng.gen_range(0..words.len())].clone()
        }
    };
    if rng.gen::<f64>() < 0.6 {
        pick(rng)
    } else {
        format!("{} {}", pick(rng), pick(rng))
    }
}

fn fill_template(template: &str, phrases: &mut impl Iterator<Item = String>) -> String {
    let mut out = String::new();
    let mut rest = template;
    while let Some(pos) = rest.find("{}") {
        out.push_str(&rest[..pos]);
        out.push_str(&phrases.next().expect("phrase supply"));
        rest = &rest[pos + 2..];
    }
    out.push_str(rest);
    out
}

/// Deterministic labeled corpus of templated documents.
pub fn generate(spec: &SynthSpec) -> Vec<CorpusRecord> {
    let mut rng = rng_from_seed(spec.seed);
    let mut taken = BTreeSet::new();
    let words = pseudo_words(spec.topic_pool, &mut rng, &mut taken);
    let duds = pseudo_words(spec.dud_pool, &mut rng, &mut taken);
    let mut records = Vec::with_capacity(spec.n_docs);
    for doc_idx in 0..spec.n_docs {
        // distinct topic phrases for this document
        let n_phrases = rng.gen_range(2..=4usize);
        let mut phrases: Vec<String> = Vec::new();
        while phrases.len() < n_phrases {
            let p = sample_phrase(&words, spec.common_topics, &mut rng);
            if !phrases.contains(&p) {
                phrases.push(p);
            }
        }

        let title = fill_template("a study of {}", &mut phrases.iter().cloned());
        let n_sentences = rng.gen_range(spec.min_sentences..=spec.max_sentences);
        let mut sentences = Vec::with_capacity(n_sentences);
        // the title covers the first phrase; place every other phrase in at
        // least one keyword-template sentence
        let mut pending: Vec<String> = phrases[1..].to_vec();
        pending.reverse();
        while !pending.is_empty() {
            let template = KEYWORD_TEMPLATES.choose(&mut rng).expect("non-empty");
            let slots = template.matches("{}").count();
            let fill: Vec<String> = (0..slots)
                .map(|_| {
                    pending
                        .pop()
                        .unwrap_or_else(|| phrases.choose(&mut rng).expect("non-empty").clone())
                })
                .collect();
            sentences.push(fill_template(template, &mut fill.into_iter()));
        }
        while sentences.len() < n_sentences {
            let roll: f64 = rng.gen();
            if roll < spec.dud_slot_prob {
                // same slot contexts, non-keyword fillers
                let template = KEYWORD_TEMPLATES.choose(&mut rng).expect("non-empty");
                let slots = template.matches("{}").count();
                let fill: Vec<String> = (0..slots)
                    .map(|_| duds.choose(&mut rng).expect("non-empty").clone())
                    .collect();
                sentences.push(fill_template(template, &mut fill.into_iter()));
            } else if roll < spec.dud_slot_prob + 0.5 * (1.0 - spec.dud_slot_prob) {
                let template = KEYWORD_TEMPLATES.choose(&mut rng).expect("non-empty");
                let slots = template.matches("{}").count();
                let fill: Vec<String> = (0..slots)
                    .map(|_| phrases.choose(&mut rng).expect("non-empty").clone())
                    .collect();
                sentences.push(fill_template(template, &mut fill.into_iter()));
            } else {
                sentences.push((*FILLER_SENTENCES.choose(&mut rng).expect("non-empty")).to_string());
            }
        }
        if !duds.is_empty() {
            // a dud-revealing background frame; never hosts topic words
            let frame = DUD_FRAMES.choose(&mut rng).expect("non-empty");
            let fill: Vec<String> = (0..2)
                .map(|_| duds.choose(&mut rng).expect("non-empty").clone())
                .collect();
            sentences.push(fill_template(frame, &mut fill.into_iter()));
        }
        sentences.shuffle(&mut rng);
        let text = sentences
            .iter()
            .map(|s| format!("{s}."))
            .collect::<Vec<_>>()
            .join(" ");

        let mut record = CorpusRecord {
            id: format!("doc{doc_idx:04}"),
            title: Some(title),
            text,
            keywords: Some(phrases),
            pos_tags: None,
        };
        let mut nouns = words.clone();
        nouns.extend(duds.iter().cloned());
        record.pos_tags = Some(pos_tags_for(&record, &nouns));
        records.push(record);
    }
    records
}

/// Word-aligned POS-style tags: topic words tag `NN`, punctuation `PU`,
/// everything else `XX`.
fn pos_tags_for(record: &CorpusRecord, topic_words: &[String]) -> Vec<String> {
    let topics: BTreeSet<&str> = topic_words.iter().map(String::as_str).collect();
    word_tokenize(&record.model_text())
        .iter()
        .filter(|t| *t != EOS)
        .map(|t| {
            if topics.contains(t.as_str()) {
                "NN".to_string()
            } else if t.chars().any(|c| c.is_alphanumeric()) {
                "XX".to_string()
            } else {
                "PU".to_string()
            }
        })
        .collect()
}

/// Small memorizable corpus (tight topic pool, short documents).
pub fn keyword_corpus(n_docs: usize, seed: u64) -> Vec<CorpusRecord> {
    generate(&SynthSpec {
        n_docs,
        topic_pool: 40,
        common_topics: 15,
        dud_pool: 0,
        dud_slot_prob: 0.0,
        min_sentences: 2,
        max_sentences: 3,
        seed,
    })
}

/// Larger corpus with wide topic and dud pools. Keyword slots host both
/// families, so deciding keyword-ness needs token identity; duds get their
/// own background frames so identity is recoverable from raw text. This is
/// where language-model pretraining pays off.
pub fn benefit_corpus(n_docs: usize, seed: u64) -> Vec<CorpusRecord> {
    generate(&SynthSpec {
        n_docs,
        topic_pool: 600,
        common_topics: 40,
        dud_pool: 200,
        dud_slot_prob: 0.5,
        min_sentences: 3,
        max_sentences: 5,
        seed,
    })
}

/// Unlabeled sentence-only corpus for LM smoke tests.
pub fn sentence_corpus(n_docs: usize, sentences_per_doc: usize) -> Vec<CorpusRecord> {
    let mut records = generate(&SynthSpec {
        n_docs,
        topic_pool: 30,
        common_topics: 10,
        dud_pool: 0,
        dud_slot_prob: 0.0,
        min_sentences: sentences_per_doc,
        max_sentences: sentences_per_doc,
        seed: 1234,
    });
    for r in &mut records {
        r.keywords = None;
        r.pos_tags = None;
    }
    records
}
