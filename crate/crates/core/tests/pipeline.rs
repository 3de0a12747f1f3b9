//! Pipeline integration: every ablation switch combination (pretraining
//! on/off, objective, BPE, POS tags, BiLSTM residual, CRF head) runs end
//! to end on a tiny corpus, and the artifacts stay mutually compatible.

use keytag_core::checkpoint::Checkpoint;
use keytag_core::corpus::split_train_valid;
use keytag_core::encoder::EncoderConfig;
use keytag_core::extraction::extract;
use keytag_core::model::HeadKind;
use keytag_core::synth;
use keytag_core::tokenizer::Scheme;
use keytag_core::training::{
    build_tokenizer, checkpoint_metadata, finetune, pretrain, FinetuneConfig, Objective,
    PretrainConfig, VocabConfig,
};

fn tiny_encoder(use_pos: bool) -> EncoderConfig {
    EncoderConfig {
        embedding_dim: 32,
        num_heads: 2,
        num_layers: 1,
        sequence_length: 32,
        ffn_dim: 64,
        rel_pos_window: 32,
        use_pos_tags: use_pos,
        dropout_rate: 0.1,
    }
}

struct Variant {
    name: &'static str,
    pretrain: Option<Objective>,
    scheme: Scheme,
    use_pos: bool,
    head: HeadKind,
}

#[test]
fn ablation_matrix_runs_end_to_end() {
    let variants = [
        Variant { name: "nolm", pretrain: None, scheme: Scheme::Word, use_pos: false, head: HeadKind::Classifier },
        Variant { name: "lm", pretrain: Some(Objective::Autoregressive), scheme: Scheme::Word, use_pos: false, head: HeadKind::Classifier },
        Variant { name: "maskedlm", pretrain: Some(Objective::Masked), scheme: Scheme::Word, use_pos: false, head: HeadKind::Classifier },
        Variant { name: "lm+bpe", pretrain: Some(Objective::Autoregressive), scheme: Scheme::Bpe, use_pos: false, head: HeadKind::Classifier },
        Variant { name: "lm+pos", pretrain: Some(Objective::Autoregressive), scheme: Scheme::Word, use_pos: true, head: HeadKind::Classifier },
        Variant { name: "lm+rnn", pretrain: Some(Objective::Autoregressive), scheme: Scheme::Word, use_pos: false, head: HeadKind::ClassifierBiLstm },
        Variant { name: "lm+bpe+rnn", pretrain: Some(Objective::Autoregressive), scheme: Scheme::Bpe, use_pos: false, head: HeadKind::ClassifierBiLstm },
        Variant { name: "lm+bpe+crf", pretrain: Some(Objective::Autoregressive), scheme: Scheme::Bpe, use_pos: false, head: HeadKind::BiLstmCrf },
    ];

    let records = synth::keyword_corpus(10, 31);
    let (train, valid) = split_train_valid(&records, 1).unwrap();
    let vocab_cfg = VocabConfig {
        max_size: 2000,
        bpe_vocab_size: 120,
        ..VocabConfig::default()
    };

    for v in &variants {
        let tokenizer = build_tokenizer(&records, v.scheme, v.use_pos, &vocab_cfg)
            .unwrap_or_else(|e| panic!("{}: tokenizer: {e}", v.name));
        let encoder = tiny_encoder(v.use_pos);

        let init = v.pretrain.map(|objective| {
            let pcfg = PretrainConfig {
                objective,
                epochs: 1,
                lr: 1e-3,
                batch_size: 8,
                seed: 7,
            };
            let (model, losses) = pretrain(&records, &tokenizer, encoder.clone(), &pcfg)
                .unwrap_or_else(|e| panic!("{}: pretrain: {e}", v.name));
            assert!(losses[0].is_finite(), "{}: non-finite LM loss", v.name);
            Checkpoint::from_model(&model, &checkpoint_metadata(&tokenizer))
        });

        let fcfg = FinetuneConfig {
            epochs: 1,
            lr: 1e-3,
            batch_size: 8,
            head: v.head,
            selection_k: 10,
            seed: 7,
        };
        let outcome = finetune(init.as_ref(), &train, &valid, &tokenizer, encoder, &fcfg)
            .unwrap_or_else(|e| panic!("{}: finetune: {e}", v.name));
        assert!(outcome.curve[0].is_finite(), "{}: non-finite validation F1", v.name);

        // the produced checkpoint drives extraction
        let model = outcome.checkpoint.to_model().unwrap();
        let rec = &records[0];
        let phrases = extract(&model, &tokenizer, &rec.model_text(), rec.pos_tags.as_deref(), Some(5))
            .unwrap_or_else(|e| panic!("{}: extract: {e}", v.name));
        assert!(phrases.len() <= 5, "{}: k not honored", v.name);
    }
}

#[test]
fn masked_and_autoregressive_checkpoints_interchange_for_transfer() {
    let records = synth::keyword_corpus(10, 13);
    let tokenizer = build_tokenizer(&records, Scheme::Word, false, &VocabConfig::default()).unwrap();
    let (train, valid) = split_train_valid(&records, 3).unwrap();
    for objective in [Objective::Autoregressive, Objective::Masked] {
        let pcfg = PretrainConfig {
            objective,
            epochs: 1,
            lr: 1e-3,
            batch_size: 8,
            seed: 2,
        };
        let (model, _) = pretrain(&records, &tokenizer, tiny_encoder(false), &pcfg).unwrap();
        let ckpt = Checkpoint::from_model(&model, &checkpoint_metadata(&tokenizer));
        let fcfg = FinetuneConfig {
            epochs: 1,
            lr: 1e-3,
            batch_size: 8,
            head: HeadKind::Classifier,
            selection_k: 10,
            seed: 2,
        };
        finetune(Some(&ckpt), &train, &valid, &tokenizer, tiny_encoder(false), &fcfg)
            .unwrap_or_else(|e| panic!("{}: {e}", objective.as_str()));
    }
}
