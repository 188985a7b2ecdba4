//! Benchmark fixtures. The benches themselves live in `benches/`.

use dapo_core::data::{generate_corpus, CorpusSpec};
use dapo_core::{BackboneWeights, Corpus, EncoderConfig, RngHandle, RunConfig, Vocabulary};

/// A small corpus at the default image size.
pub fn small_corpus() -> Corpus {
    let spec = CorpusSpec {
        train_count: 16,
        target_count: 8,
        caption_count: 12,
        ..CorpusSpec::default()
    };
    generate_corpus(&spec).expect("default spec is valid")
}

/// A randomly initialized, frozen backbone for the default encoder.
pub fn frozen_backbone(cfg: &EncoderConfig) -> (BackboneWeights, Vocabulary) {
    let vocab = Vocabulary::builtin();
    let mut w = BackboneWeights::init(cfg, vocab.len(), &mut RngHandle::derive(11, 0));
    w.frozen = true;
    (w, vocab)
}

/// Default run settings with a training batch of `batch`.
pub fn run_config(batch: usize) -> RunConfig {
    RunConfig {
        batch_size: batch,
        ..RunConfig::default()
    }
}
