//! Merged run settings: command-line flags override the `key=value` config
//! file, which overrides the built-in defaults.

use keytag_core::model::HeadKind;
use keytag_core::tokenizer::Scheme;
use keytag_core::training::{Objective, VocabConfig};
use keytag_core::{encoder::EncoderConfig, Error, Result};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone)]
pub struct Settings {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub k: Option<usize>,

    // ablation switches
    pub objective: Objective,
    pub bpe: bool,
    pub pos: bool,
    pub bilstm: bool,
    pub crf: bool,

    // optimization
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,

    // encoder
    pub embedding_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub sequence_length: usize,
    pub rel_pos_window: Option<usize>,
    pub dropout: f64,

    // vocabulary
    pub max_vocab: usize,
    pub bpe_vocab: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            corpus: None,
            checkpoint: None,
            out: None,
            seed: 0,
            k: None,
            objective: Objective::Autoregressive,
            bpe: false,
            pos: false,
            bilstm: false,
            crf: false,
            epochs: 10,
            lr: 3e-4,
            batch_size: 16,
            embedding_dim: 512,
            num_heads: 8,
            num_layers: 8,
            sequence_length: 256,
            rel_pos_window: None,
            dropout: 0.1,
            max_vocab: 50_000,
            bpe_vocab: 5_000,
        }
    }
}

impl Settings {
    pub fn head_kind(&self) -> Result<HeadKind> {
        match (self.bilstm, self.crf) {
            (false, false) => Ok(HeadKind::Classifier),
            (true, false) => Ok(HeadKind::ClassifierBiLstm),
            (false, true) => Ok(HeadKind::BiLstmCrf),
            (true, true) => Err(Error::Parameter(
                "--bilstm and --crf are mutually exclusive (the CRF head carries its own BiLSTM)".into(),
            )),
        }
    }

    pub fn scheme(&self) -> Scheme {
        if self.bpe {
            Scheme::Bpe
        } else {
            Scheme::Word
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            embedding_dim: self.embedding_dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            sequence_length: self.sequence_length,
            ffn_dim: 4 * self.embedding_dim,
            rel_pos_window: self.rel_pos_window.unwrap_or(self.sequence_length),
            use_pos_tags: self.pos,
            dropout_rate: self.dropout,
        }
    }

    pub fn vocab_config(&self) -> VocabConfig {
        VocabConfig {
            max_size: self.max_vocab,
            bpe_vocab_size: self.bpe_vocab,
            ..VocabConfig::default()
        }
    }

    pub fn require_corpus(&self) -> Result<&PathBuf> {
        self.corpus
            .as_ref()
            .ok_or_else(|| Error::Parameter("--corpus is required for this command".into()))
    }

    pub fn require_out(&self) -> Result<&PathBuf> {
        self.out
            .as_ref()
            .ok_or_else(|| Error::Parameter("--out is required for this command".into()))
    }

    pub fn require_checkpoint(&self) -> Result<&PathBuf> {
        self.checkpoint
            .as_ref()
            .ok_or_else(|| Error::Parameter("--checkpoint is required for this command".into()))
    }

    /// Apply one `key=value` setting (from the config file).
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::Parameter(format!("config: bad value `{v}` for `{k}`"));
        let parse_bool = |v: &str| match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad("bool", v)),
        };
        match key {
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "k" => self.k = Some(value.parse().map_err(|_| bad(key, value))?),
            "objective" => self.objective = Objective::parse(value)?,
            "bpe" => self.bpe = parse_bool(value)?,
            "pos" => self.pos = parse_bool(value)?,
            "bilstm" => self.bilstm = parse_bool(value)?,
            "crf" => self.crf = parse_bool(value)?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key, value))?,
            "lr" => self.lr = value.parse().map_err(|_| bad(key, value))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key, value))?,
            "embedding_dim" => self.embedding_dim = value.parse().map_err(|_| bad(key, value))?,
            "num_heads" => self.num_heads = value.parse().map_err(|_| bad(key, value))?,
            "num_layers" => self.num_layers = value.parse().map_err(|_| bad(key, value))?,
            "sequence_length" => self.sequence_length = value.parse().map_err(|_| bad(key, value))?,
            "rel_pos_window" => self.rel_pos_window = Some(value.parse().map_err(|_| bad(key, value))?),
            "dropout" => self.dropout = value.parse().map_err(|_| bad(key, value))?,
            "max_vocab" => self.max_vocab = value.parse().map_err(|_| bad(key, value))?,
            "bpe_vocab" => self.bpe_vocab = value.parse().map_err(|_| bad(key, value))?,
            other => return Err(Error::Parameter(format!("config: unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Load a plain `key=value` config file (`#` starts a comment).
    pub fn load_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parameter(format!("cannot read config {}: {e}", path.display())))?;
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parameter(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        for (k, v) in kv {
            self.apply(&k, &v)?;
        }
        Ok(())
    }
}
