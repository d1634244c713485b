//! Shared fixtures for the benchmarks.

use neurank::concept::{build_concept_dataset, ConceptDataset};
use neurank::evaluator::{synth_generate, SynthConfig, CONCEPT_LABEL};
use neurank::store::ActivationMatrix;

/// A planted synthetic layer and its concept dataset.
pub fn fixture(neurons: usize, tokens: usize, seed: u64) -> (ActivationMatrix, ConceptDataset) {
    let cfg = SynthConfig {
        neurons,
        tokens,
        planted: (neurons / 10).max(1),
        seed,
        ..SynthConfig::default()
    };
    let (matrix, table) = synth_generate(&cfg).expect("valid fixture config");
    let ds = build_concept_dataset(&table, CONCEPT_LABEL, seed).expect("concept is frequent enough");
    (matrix, ds)
}
