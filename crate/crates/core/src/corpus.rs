//! JSON-lines corpus ingestion and the deterministic train/validation
//! split.

use crate::error::{Error, Result};
use crate::tokenizer::{word_tokenize, EOS};
use crate::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tags: Option<Vec<String>>,
}

impl CorpusRecord {
    /// Modeling text: the title as its own sentence, then the body.
    pub fn model_text(&self) -> String {
        match &self.title {
            Some(t) if !t.trim().is_empty() => {
                let t = t.trim();
                if t.ends_with(['.', '!', '?']) {
                    format!("{t} {}", self.text)
                } else {
                    format!("{t}. {}", self.text)
                }
            }
            _ => self.text.clone(),
        }
    }

    pub fn gold(&self) -> &[String] {
        self.keywords.as_deref().unwrap_or(&[])
    }
}

/// Parse a JSON-lines corpus. Rejects malformed lines (with the line
/// number), duplicate ids, and POS tag sequences that do not align with
/// the word-level tokenization of the modeling text.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open corpus {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: malformed record: {e}", path.display(), lineno + 1))
        })?;
        if !ids.insert(record.id.clone()) {
            return Err(Error::Data(format!(
                "{}:{}: duplicate document id `{}`",
                path.display(),
                lineno + 1,
                record.id
            )));
        }
        if let Some(tags) = &record.pos_tags {
            let expected = word_tokenize(&record.model_text())
                .iter()
                .filter(|t| *t != EOS)
                .count();
            if tags.len() != expected {
                return Err(Error::Data(format!(
                    "{}:{}: document `{}` has {} pos tags for {} word tokens",
                    path.display(),
                    lineno + 1,
                    record.id,
                    tags.len(),
                    expected
                )));
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Require gold keywords on every record (finetune/eval inputs).
pub fn require_keywords(records: &[CorpusRecord]) -> Result<()> {
    for rec in records {
        if rec.keywords.is_none() {
            return Err(Error::Data(format!(
                "document `{}` has no keywords field; finetune/eval corpora need gold keyphrases",
                rec.id
            )));
        }
    }
    Ok(())
}

/// Deterministic 80/20 split: train gets `ceil(0.8 n)` documents.
pub fn split_train_valid(records: &[CorpusRecord], seed: u64) -> Result<(Vec<CorpusRecord>, Vec<CorpusRecord>)> {
    if records.len() < 5 {
        return Err(Error::Data(format!(
            "need at least 5 documents to split, got {}",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng: Rng = crate::rng_from_seed(seed);
    order.shuffle(&mut rng);
    let n_train = (0.8 * records.len() as f64).ceil() as usize;
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let valid = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, valid))
}

/// Write records back out as JSON lines.
pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = write_lines(&[]);
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn fixture_parses_field_for_field() {
        let f = write_lines(&[
            r#"{"id":"a","title":"T one","text":"body one.","keywords":["k1","k two"]}"#,
            r#"{"id":"b","text":"body two"}"#,
            r#"{"id":"c","text":"tagged body","pos_tags":["JJ","NN"]}"#,
        ]);
        let recs = load_corpus(f.path()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].id, "a");
        assert_eq!(recs[0].title.as_deref(), Some("T one"));
        assert_eq!(recs[0].keywords.as_ref().unwrap().len(), 2);
        assert_eq!(recs[1].keywords, None);
        assert_eq!(recs[2].pos_tags.as_ref().unwrap().len(), 2);
        assert_eq!(recs[0].model_text(), "T one. body one.");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[r#"{"id":"a","text":"ok"}"#, "{not json"]);
        let err = load_corpus(f.path()).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn duplicate_id_is_data_error() {
        let f = write_lines(&[r#"{"id":"a","text":"x"}"#, r#"{"id":"a","text":"y"}"#]);
        assert!(load_corpus(f.path()).is_err());
    }

    #[test]
    fn misaligned_pos_tags_are_rejected() {
        let f = write_lines(&[r#"{"id":"a","text":"two words","pos_tags":["NN"]}"#]);
        assert!(load_corpus(f.path()).is_err());
    }

    #[test]
    fn missing_keywords_rejected_for_eval() {
        let f = write_lines(&[r#"{"id":"a","text":"x"}"#]);
        let recs = load_corpus(f.path()).unwrap();
        let err = require_keywords(&recs).unwrap_err().to_string();
        assert!(err.contains("keywords"), "{err}");
    }

    fn n_records(n: usize) -> Vec<CorpusRecord> {
        (0..n)
            .map(|i| CorpusRecord {
                id: format!("d{i}"),
                title: None,
                text: format!("text {i}"),
                keywords: None,
                pos_tags: None,
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let recs = n_records(10);
        let (train, valid) = split_train_valid(&recs, 7).unwrap();
        assert_eq!((train.len(), valid.len()), (8, 2));

        let (train2, valid2) = split_train_valid(&recs, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(valid, valid2);

        let (train3, _) = split_train_valid(&recs, 8).unwrap();
        assert_ne!(train, train3, "different seed should reshuffle");
    }

    #[test]
    fn split_is_a_partition() {
        let recs = n_records(23);
        let (train, valid) = split_train_valid(&recs, 3).unwrap();
        let mut ids: Vec<&str> = train.iter().chain(&valid).map(|r| r.id.as_str()).collect();
        ids.sort();
        let mut expected: Vec<String> = (0..23).map(|i| format!("d{i}")).collect();
        expected.sort();
        assert_eq!(ids, expected.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_records_is_data_error() {
        assert!(split_train_valid(&n_records(4), 1).is_err());
    }
}
