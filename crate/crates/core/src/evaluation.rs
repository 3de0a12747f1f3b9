//! Scoring protocol: stemmed lowercased matching, present-keyword gold
//! construction, P@k / R@k with macro averaging, F1@k from the averaged
//! precision and recall, and corpus statistics.

use crate::corpus::CorpusRecord;
use crate::error::{Error, Result};
use crate::stem::stem_fixpoint;
use crate::tokenizer::{word_tokenize, EOS};
use std::collections::BTreeSet;
use std::fmt::Write as _;

/// Lowercase, Porter-stem each whitespace-separated word, join with single
/// spaces. Idempotent.
pub fn stem_normalize(phrase: &str) -> String {
    phrase
        .to_lowercase()
        .split_whitespace()
        .map(stem_fixpoint)
        .collect::<Vec<_>>()
        .join(" ")
}

fn stemmed_tokens(text: &str) -> Vec<String> {
    word_tokenize(text)
        .into_iter()
        .map(|t| if t == EOS { t } else { stem_fixpoint(&t) })
        .collect()
}

fn contains_contiguous(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Gold keyphrases whose stemmed token sequence occurs contiguously in the
/// stemmed document token stream. Documents whose result is empty are
/// skipped by the scorer.
pub fn present_gold(text: &str, gold: &[String]) -> Vec<String> {
    let doc_tokens = stemmed_tokens(text);
    gold.iter()
        .filter(|phrase| {
            let needle: Vec<String> = word_tokenize(phrase)
                .into_iter()
                .filter(|t| t != EOS)
                .map(|t| stem_fixpoint(&t))
                .collect();
            contains_contiguous(&doc_tokens, &needle)
        })
        .cloned()
        .collect()
}

/// Precision/recall/F1 of the top-`k` predictions against present gold.
/// Predictions are stem-normalized and deduplicated before truncation so
/// duplicates cannot pad precision. Returns `None` when gold is empty (the
/// document is skipped); empty predictions give all-zero scores.
pub fn precision_recall_f1_at_k(
    predicted: &[String],
    gold: &[String],
    k: usize,
) -> Option<(f64, f64, f64)> {
    if gold.is_empty() {
        return None;
    }
    let gold_set: BTreeSet<String> = gold.iter().map(|g| stem_normalize(g)).collect();
    let mut seen = BTreeSet::new();
    let mut returned: Vec<String> = Vec::new();
    for p in predicted {
        let key = stem_normalize(p);
        if seen.insert(key.clone()) {
            returned.push(key);
        }
        if returned.len() == k {
            break;
        }
    }
    if returned.is_empty() {
        return Some((0.0, 0.0, 0.0));
    }
    let correct = returned.iter().filter(|p| gold_set.contains(*p)).count();
    let p = correct as f64 / returned.len() as f64;
    let r = correct as f64 / gold_set.len() as f64;
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Some((p, r, f1))
}

/// F1 from macro-averaged precision and recall (not the mean of
/// per-document F1 scores).
pub fn macro_f1(per_doc: &[(f64, f64)]) -> Result<f64> {
    if per_doc.is_empty() {
        return Err(Error::Data("macro_f1: no scored documents".into()));
    }
    let n = per_doc.len() as f64;
    let p: f64 = per_doc.iter().map(|d| d.0).sum::<f64>() / n;
    let r: f64 = per_doc.iter().map(|d| d.1).sum::<f64>() / n;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Corpus scores at one cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct KScores {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Full evaluation over a corpus.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scores: Vec<KScores>,
    /// `(P@k, R@k)` per scored document, in corpus order, per cutoff.
    pub per_doc: Vec<Vec<(f64, f64)>>,
    pub scored_documents: usize,
    pub skipped_documents: usize,
}

/// Score ranked predictions against gold keyphrases document by document.
/// `gold` is reduced to present keywords against `texts`; documents with
/// no present gold are skipped.
pub fn evaluate_corpus(
    texts: &[String],
    predictions: &[Vec<String>],
    gold: &[Vec<String>],
    ks: &[usize],
) -> Result<EvalReport> {
    if texts.len() != predictions.len() || texts.len() != gold.len() {
        return Err(Error::Contract(format!(
            "evaluate_corpus: {} texts, {} predictions, {} gold lists",
            texts.len(),
            predictions.len(),
            gold.len()
        )));
    }
    let mut per_doc: Vec<Vec<(f64, f64)>> = vec![Vec::new(); ks.len()];
    let mut skipped = 0usize;
    for ((text, preds), gold_list) in texts.iter().zip(predictions).zip(gold) {
        let present = present_gold(text, gold_list);
        if present.is_empty() {
            skipped += 1;
            continue;
        }
        for (ki, &k) in ks.iter().enumerate() {
            let (p, r, _) = precision_recall_f1_at_k(preds, &present, k).expect("gold non-empty");
            per_doc[ki].push((p, r));
        }
    }
    let scored = per_doc.first().map_or(0, Vec::len);
    if scored == 0 {
        return Err(Error::Data("evaluate_corpus: every document was skipped".into()));
    }
    let mut scores = Vec::with_capacity(ks.len());
    for (ki, &k) in ks.iter().enumerate() {
        let n = per_doc[ki].len() as f64;
        let p = per_doc[ki].iter().map(|d| d.0).sum::<f64>() / n;
        let r = per_doc[ki].iter().map(|d| d.1).sum::<f64>() / n;
        scores.push(KScores {
            k,
            precision: p,
            recall: r,
            f1: macro_f1(&per_doc[ki])?,
        });
    }
    Ok(EvalReport {
        scores,
        per_doc,
        scored_documents: scored,
        skipped_documents: skipped,
    })
}

impl EvalReport {
    pub fn f1_at(&self, k: usize) -> Option<f64> {
        self.scores.iter().find(|s| s.k == k).map(|s| s.f1)
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:>4} {:>10} {:>10} {:>10}", "k", "P@k", "R@k", "F1@k").unwrap();
        for s in &self.scores {
            writeln!(
                out,
                "{:>4} {:>10.4} {:>10.4} {:>10.4}",
                s.k, s.precision, s.recall, s.f1
            )
            .unwrap();
        }
        writeln!(
            out,
            "documents scored: {}, skipped (no present gold): {}",
            self.scored_documents, self.skipped_documents
        )
        .unwrap();
        out
    }

    /// Machine-readable `key=value` lines for regression diffing.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        for s in &self.scores {
            writeln!(out, "precision@{}={:.6}", s.k, s.precision).unwrap();
            writeln!(out, "recall@{}={:.6}", s.k, s.recall).unwrap();
            writeln!(out, "f1@{}={:.6}", s.k, s.f1).unwrap();
        }
        writeln!(out, "documents_scored={}", self.scored_documents).unwrap();
        writeln!(out, "documents_skipped={}", self.skipped_documents).unwrap();
        out
    }
}

/// Dataset-statistics row: document count, average token length, average
/// gold keywords, percentage of gold keywords present in their document,
/// and average present keywords per document.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub num_docs: usize,
    pub avg_doc_length: f64,
    pub avg_keywords: f64,
    pub pct_present: f64,
    pub avg_present: f64,
}

pub fn dataset_stats(records: &[CorpusRecord]) -> DatasetStats {
    let num_docs = records.len();
    let mut tokens = 0usize;
    let mut keywords = 0usize;
    let mut present = 0usize;
    for rec in records {
        let text = rec.model_text();
        tokens += word_tokenize(&text).iter().filter(|t| *t != EOS).count();
        if let Some(gold) = &rec.keywords {
            keywords += gold.len();
            present += present_gold(&text, gold).len();
        }
    }
    let nd = num_docs.max(1) as f64;
    DatasetStats {
        num_docs,
        avg_doc_length: tokens as f64 / nd,
        avg_keywords: keywords as f64 / nd,
        pct_present: if keywords == 0 {
            0.0
        } else {
            100.0 * present as f64 / keywords as f64
        },
        avg_present: present as f64 / nd,
    }
}

impl DatasetStats {
    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:>10} {:>16} {:>10} {:>14} {:>16}",
            "No. docs", "Avg. doc. length", "Avg. kw.", "% present kw.", "Avg. present kw."
        )
        .unwrap();
        writeln!(
            out,
            "{:>10} {:>16.2} {:>10.2} {:>14.2} {:>16.2}",
            self.num_docs, self.avg_doc_length, self.avg_keywords, self.pct_present, self.avg_present
        )
        .unwrap();
        out
    }

    pub fn key_values(&self) -> String {
        format!(
            "num_docs={}\navg_doc_length={:.4}\navg_keywords={:.4}\npct_present={:.4}\navg_present={:.4}\n",
            self.num_docs, self.avg_doc_length, self.avg_keywords, self.pct_present, self.avg_present
        )
    }
}
