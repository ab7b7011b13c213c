// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod attribution;
pub mod baselines;
pub mod data;
pub mod editor;
pub mod error;
pub mod experiment;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::data::corpus::{generate_synthetic_corpus, CorpusSpec, SyntheticCorpus};
    use crate::model::{ModelConfig, ToyLM, Vocab};

    /// Small corpus and an untrained tiny model over its vocabulary.
    pub(crate) fn toy_world(profile: Vec<usize>) -> (SyntheticCorpus, ToyLM) {
        let spec = CorpusSpec {
            n_subjects: 24,
            profile,
            object_pool: 60,
            ..CorpusSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let vocab = Vocab::build(corpus.sentences.iter().map(String::as_str));
        let cfg = ModelConfig {
            n_layers: 3,
            max_seq_len: 32,
            ..ModelConfig::tiny(vocab.len())
        };
        let model = ToyLM::new(cfg, vocab).unwrap();
        (corpus, model)
    }
}
