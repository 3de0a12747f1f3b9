//! End-to-end checks of the `keytag` binary: artifacts, exit codes, and
//! byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn keytag() -> Command {
    Command::new(env!("CARGO_BIN_EXE_keytag"))
}

fn run(args: &[&str]) -> Output {
    keytag().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_corpus(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn tiny_corpus(dir: &Path) -> PathBuf {
    // 6 documents so the 80/20 split is legal; phrases repeat so the
    // vocabulary is shared
    let lines: Vec<String> = (0..6)
        .map(|i| {
            format!(
                r#"{{"id":"d{i}","title":"a study of relay gating","text":"we propose relay gating for signal control. relay gating beats the baseline. extra words pad document {i}.","keywords":["relay gating","signal control"]}}"#
            )
        })
        .collect();
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    write_corpus(dir, "tiny.jsonl", &refs)
}

const TINY_DIMS: &[&str] = &[
    "--embedding-dim",
    "32",
    "--num-heads",
    "2",
    "--num-layers",
    "1",
    "--sequence-length",
    "32",
    "--batch-size",
    "4",
];

#[test]
fn stats_reproduces_hand_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(
        dir.path(),
        "stats.jsonl",
        &[
            r#"{"id":"a","text":"alpha beta gamma.","keywords":["alpha beta","missing"]}"#,
            r#"{"id":"b","text":"delta","keywords":["delta"]}"#,
        ],
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "stats",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let kv = std::fs::read_to_string(out_dir.join("stats.kv")).unwrap();
    assert!(kv.contains("num_docs=2"), "{kv}");
    // tokens: [alpha, beta, gamma, .] = 4 and [delta] = 1 -> avg 2.5
    assert!(kv.contains("avg_doc_length=2.5000"), "{kv}");
    assert!(kv.contains("avg_keywords=1.5000"), "{kv}");
    // present: "alpha beta" and "delta" of 3 total
    assert!(kv.contains("pct_present=66.66"), "{kv}");
    assert!(kv.contains("avg_present=1.0000"), "{kv}");
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();

    // usage: unknown subcommand, missing required flag, bad flag combo
    assert_code(&run(&["bogus"]), 1);
    assert_code(&run(&["extract", "--corpus", "x.jsonl"]), 1);

    // data: missing corpus file, malformed line, missing keywords for eval
    assert_code(&run(&["stats", "--corpus", "/definitely/not/here.jsonl"]), 2);
    let bad = write_corpus(dir.path(), "bad.jsonl", &["{not json"]);
    assert_code(&run(&["stats", "--corpus", bad.to_str().unwrap()]), 2);

    // help is not an error
    assert_code(&run(&["--help"]), 0);
}

#[test]
fn pipeline_round_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let corpus = corpus.to_str().unwrap();

    let pretrain = |out: &str| {
        let mut args = vec![
            "pretrain",
            "--corpus",
            corpus,
            "--out",
            out,
            "--epochs",
            "1",
            "--seed",
            "3",
        ];
        args.extend_from_slice(TINY_DIMS);
        assert_code(&run(&args), 0);
    };
    let pre_a = dir.path().join("pre_a");
    let pre_b = dir.path().join("pre_b");
    pretrain(pre_a.to_str().unwrap());
    pretrain(pre_b.to_str().unwrap());

    // identical seed + config => byte-identical checkpoints and vocab
    for name in ["pretrain.ckpt", "vocab.txt", "pretrain_loss.tsv"] {
        let a = std::fs::read(pre_a.join(name)).unwrap();
        let b = std::fs::read(pre_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    let fine = dir.path().join("fine");
    let ckpt = pre_a.join("pretrain.ckpt");
    let out = run(&[
        "finetune",
        "--corpus",
        corpus,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        fine.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "4",
        "--seed",
        "3",
    ]);
    assert_code(&out, 0);
    assert!(fine.join("model.ckpt").exists());
    assert!(fine.join("valid_curve.tsv").exists());

    // extract with k=2 emits at most 2 phrases per document
    let ex = dir.path().join("ex");
    let out = run(&[
        "extract",
        "--corpus",
        corpus,
        "--checkpoint",
        fine.join("model.ckpt").to_str().unwrap(),
        "--out",
        ex.to_str().unwrap(),
        "--k",
        "2",
    ]);
    assert_code(&out, 0);
    let extracted = std::fs::read_to_string(ex.join("extracted.jsonl")).unwrap();
    assert_eq!(extracted.lines().count(), 6);
    for line in extracted.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["keyphrases"].as_array().unwrap().len() <= 2, "{line}");
    }

    // eval produces both report flavors
    let ev = dir.path().join("ev");
    let out = run(&[
        "eval",
        "--corpus",
        corpus,
        "--checkpoint",
        fine.join("model.ckpt").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let kv = std::fs::read_to_string(ev.join("report.kv")).unwrap();
    for key in ["precision@5=", "recall@5=", "f1@5=", "f1@10=", "documents_scored="] {
        assert!(kv.contains(key), "missing {key} in {kv}");
    }

    // attn-dump emits plot-ready TSV
    let attn = dir.path().join("attn");
    let out = run(&[
        "attn-dump",
        "--corpus",
        corpus,
        "--checkpoint",
        fine.join("model.ckpt").to_str().unwrap(),
        "--out",
        attn.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let tsv = std::fs::read_to_string(attn.join("attention_diagonals.tsv")).unwrap();
    assert!(tsv.starts_with("position\thead\tmean_diagonal\n"));
    // 32 positions x 2 heads + header
    assert_eq!(tsv.lines().count(), 1 + 32 * 2);

    // tampering with the vocabulary beside the checkpoint is a
    // compatibility error
    let vocab_path = fine.join("vocab.txt");
    let vocab = std::fs::read_to_string(&vocab_path).unwrap();
    std::fs::write(&vocab_path, vocab.replace("relay", "rewired")).unwrap();
    let out = run(&[
        "extract",
        "--corpus",
        corpus,
        "--checkpoint",
        fine.join("model.ckpt").to_str().unwrap(),
        "--out",
        ex.to_str().unwrap(),
    ]);
    assert_code(&out, 3);
}

#[test]
fn config_file_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "epochs=1\nseed=5\nembedding_dim=32\nnum_heads=2\nnum_layers=1\nsequence_length=32\nbatch_size=4\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    // flag --seed 3 overrides the file's seed=5; everything else from file
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_code(&out, 0);

    // the same run expressed entirely as flags must reproduce it
    let flag_dir = dir.path().join("flags");
    let mut args = vec![
        "pretrain",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        flag_dir.to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "3",
    ];
    args.extend_from_slice(TINY_DIMS);
    assert_code(&run(&args), 0);
    assert_eq!(
        std::fs::read(out_dir.join("pretrain.ckpt")).unwrap(),
        std::fs::read(flag_dir.join("pretrain.ckpt")).unwrap()
    );

    // unknown config key is a usage error
    std::fs::write(&cfg, "bogus_key=1\n").unwrap();
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 1);
}
