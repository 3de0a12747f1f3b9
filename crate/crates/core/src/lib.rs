//! From-scratch keyword identification: a transformer token tagger with
//! relative-position attention, language-model pretraining (autoregressive
//! and masked), a recall-oriented two-set tagging loss, keyphrase decoding
//! and the standard F1@k evaluation protocol.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff
//! engine ([`tensor`]), word/BPE tokenization ([`tokenizer`]), the encoder
//! stack ([`encoder`]), interchangeable output heads ([`heads`]), training
//! loops ([`training`]), keyphrase extraction ([`extraction`]) and scoring
//! ([`evaluation`]).

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod heads;
pub mod model;
pub mod optim;
pub mod stem;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Parameter, Tensor, TensorId};

/// Deterministic RNG used for every stochastic choice in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seed helper so call sites don't need the `SeedableRng` import.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
