//! One function per subcommand, all returning the core error type so the
//! binary can map variants onto exit codes.

use crate::config::Settings;
use keytag_core::checkpoint::{vocabulary_hash, Checkpoint};
use keytag_core::corpus::{load_corpus, require_keywords, split_train_valid, CorpusRecord};
use keytag_core::evaluation::dataset_stats;
use keytag_core::extraction::extract;
use keytag_core::model::EncoderModel;
use keytag_core::tokenizer::{Scheme, Tokenizer};
use keytag_core::training::{
    attention_profiles, build_tokenizer, checkpoint_metadata, finetune, pretrain, FinetuneConfig,
    PretrainConfig,
};
use keytag_core::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Load checkpoint + tokenizer from a model directory, verifying that the
/// vocabulary files beside the checkpoint are the ones it was built with.
pub fn load_model_dir(ckpt_path: &Path) -> Result<(EncoderModel<f32>, Tokenizer, Checkpoint)> {
    let ckpt = Checkpoint::read(ckpt_path)?;
    let scheme = Scheme::parse(
        ckpt.config
            .get("scheme")
            .ok_or_else(|| Error::Compatibility("checkpoint lacks a scheme entry".into()))?,
    )?;
    let use_pos = ckpt.config.get("use_pos_tags").map(String::as_str) == Some("true");
    let dir = ckpt_path.parent().unwrap_or_else(|| Path::new("."));
    let tokenizer = Tokenizer::load(dir, scheme, use_pos)?;
    let expected = vocabulary_hash(&tokenizer);
    match ckpt.vocab_hash() {
        Some(h) if h == expected => {}
        Some(h) => {
            return Err(Error::Compatibility(format!(
                "vocabulary files in {} hash to {expected}, checkpoint expects {h}",
                dir.display()
            )))
        }
        None => return Err(Error::Compatibility("checkpoint carries no vocabulary hash".into())),
    }
    let model = ckpt.to_model()?;
    Ok((model, tokenizer, ckpt))
}

pub fn cmd_pretrain(s: &Settings) -> Result<()> {
    let corpus_path = s.require_corpus()?;
    let out = s.require_out()?.clone();
    let records = load_corpus(corpus_path)?;
    let tokenizer = build_tokenizer(&records, s.scheme(), s.pos, &s.vocab_config())?;
    let cfg = PretrainConfig {
        objective: s.objective,
        epochs: s.epochs,
        lr: s.lr,
        batch_size: s.batch_size,
        seed: s.seed,
    };
    let (model, losses) = pretrain(&records, &tokenizer, s.encoder_config(), &cfg)?;

    std::fs::create_dir_all(&out)?;
    tokenizer.save(&out)?;
    let mut extra = checkpoint_metadata(&tokenizer);
    extra.push(("objective", s.objective.as_str().to_string()));
    let ckpt = Checkpoint::from_model(&model, &extra);
    ckpt.write(&out.join("pretrain.ckpt"))?;

    let mut curve = String::from("epoch\tloss\n");
    for (i, loss) in losses.iter().enumerate() {
        writeln!(curve, "{}\t{loss:.6}", i + 1).expect("string write");
        println!("epoch {:>2}: lm loss {loss:.4}", i + 1);
    }
    write_text(&out.join("pretrain_loss.tsv"), &curve)?;
    println!("checkpoint written to {}", out.join("pretrain.ckpt").display());
    Ok(())
}

pub fn cmd_finetune(s: &Settings) -> Result<()> {
    let corpus_path = s.require_corpus()?;
    let out = s.require_out()?.clone();
    let records = load_corpus(corpus_path)?;
    require_keywords(&records)?;
    let (train, valid) = split_train_valid(&records, s.seed)?;

    let (init, tokenizer, encoder_cfg) = match &s.checkpoint {
        Some(ckpt_path) => {
            let (model, tokenizer, ckpt) = load_model_dir(ckpt_path)?;
            // the pretrained encoder fixes the architecture and scheme
            (Some(ckpt), tokenizer, model.config.encoder.clone())
        }
        None => {
            let tokenizer = build_tokenizer(&records, s.scheme(), s.pos, &s.vocab_config())?;
            (None, tokenizer, s.encoder_config())
        }
    };

    let cfg = FinetuneConfig {
        epochs: s.epochs,
        lr: s.lr,
        batch_size: s.batch_size,
        head: s.head_kind()?,
        selection_k: 10,
        seed: s.seed,
    };
    let outcome = finetune(init.as_ref(), &train, &valid, &tokenizer, encoder_cfg, &cfg)?;

    std::fs::create_dir_all(&out)?;
    tokenizer.save(&out)?;
    outcome.checkpoint.write(&out.join("model.ckpt"))?;
    let mut curve = String::from("epoch\tvalid_f1@10\n");
    for (i, f1) in outcome.curve.iter().enumerate() {
        writeln!(curve, "{}\t{f1:.6}", i + 1).expect("string write");
        println!("epoch {:>2}: validation F1@10 {f1:.4}", i + 1);
    }
    write_text(&out.join("valid_curve.tsv"), &curve)?;
    println!(
        "best epoch {} kept; checkpoint written to {}",
        outcome.best_epoch + 1,
        out.join("model.ckpt").display()
    );
    Ok(())
}

pub fn cmd_extract(s: &Settings) -> Result<()> {
    let corpus_path = s.require_corpus()?;
    let out = s.require_out()?.clone();
    let (model, tokenizer, _) = load_model_dir(s.require_checkpoint()?)?;
    let records = load_corpus(corpus_path)?;

    let mut lines = String::new();
    for rec in &records {
        let phrases = extract(&model, &tokenizer, &rec.model_text(), rec.pos_tags.as_deref(), s.k)?;
        let items: Vec<serde_json::Value> = phrases
            .iter()
            .map(|p| {
                serde_json::json!({
                    "phrase": p.surface(),
                    "score": p.score,
                    "first_token": p.first_token,
                })
            })
            .collect();
        let line = serde_json::json!({ "id": rec.id, "keyphrases": items });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    write_text(&out.join("extracted.jsonl"), &lines)?;
    println!(
        "extracted keyphrases for {} documents into {}",
        records.len(),
        out.join("extracted.jsonl").display()
    );
    Ok(())
}

pub fn cmd_eval(s: &Settings) -> Result<()> {
    let corpus_path = s.require_corpus()?;
    let (model, tokenizer, _) = load_model_dir(s.require_checkpoint()?)?;
    let records = load_corpus(corpus_path)?;
    require_keywords(&records)?;

    let ks = [5usize, 10];
    let max_k = *ks.iter().max().expect("non-empty");
    let preds = keytag_core::training::predict_corpus(&model, &tokenizer, &records, max_k)?;
    let texts: Vec<String> = records.iter().map(CorpusRecord::model_text).collect();
    let gold: Vec<Vec<String>> = records.iter().map(|r| r.gold().to_vec()).collect();
    let report = keytag_core::evaluation::evaluate_corpus(&texts, &preds, &gold, &ks)?;

    print!("{}", report.table());
    if let Some(out) = &s.out {
        write_text(&out.join("report.txt"), &report.table())?;
        write_text(&out.join("report.kv"), &report.key_values())?;
    }
    Ok(())
}

pub fn cmd_stats(s: &Settings) -> Result<()> {
    let records = load_corpus(s.require_corpus()?)?;
    let stats = dataset_stats(&records);
    print!("{}", stats.table());
    if let Some(out) = &s.out {
        write_text(&out.join("stats.kv"), &stats.key_values())?;
    }
    Ok(())
}

pub fn cmd_attn_dump(s: &Settings) -> Result<()> {
    let corpus_path = s.require_corpus()?;
    let out = s.require_out()?.clone();
    let (model, tokenizer, _) = load_model_dir(s.require_checkpoint()?)?;
    let records = load_corpus(corpus_path)?;
    if records.is_empty() {
        return Err(Error::Data("attn-dump needs at least one document".into()));
    }
    let profiles = attention_profiles(&model, &tokenizer, &records)?;
    let mut tsv = String::from("position\thead\tmean_diagonal\n");
    for pos in 0..model.config.encoder.sequence_length {
        for (h, profile) in profiles.iter().enumerate() {
            writeln!(tsv, "{pos}\t{h}\t{:.6}", profile[pos]).expect("string write");
        }
    }
    write_text(&out.join("attention_diagonals.tsv"), &tsv)?;
    println!(
        "attention diagonals for {} heads over {} documents written to {}",
        profiles.len(),
        records.len(),
        out.join("attention_diagonals.tsv").display()
    );
    Ok(())
}
