//! Neuron ranking for concept probing.
//!
//! Loads per-layer activation dumps, builds balanced concept datasets, ranks
//! neurons with several methods and scores how well the methods agree.

pub mod concept;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod gaussian;
pub mod probe;
pub mod rankers;
pub mod rng;
pub mod store;
pub mod voting;

pub use concept::{build_concept_dataset, frequent_concepts, ConceptDataset, ConceptError, Split, Standardizer};
pub use error::{Error, Result};
pub use evaluator::{accuracy_sweep, recovery_score, synth_generate, AccuracyTable, EvalError, SynthConfig};
pub use experiment::{rank_method, run_experiment, ExperimentConfig, ExperimentError, RankOptions, RunSummary};
pub use gaussian::{fit_gaussian, gaussian_greedy_rank, GaussianConfig, GaussianError, GaussianModel};
pub use probe::{train_eval_classifier, train_probe, ProbeError, ProbeModel, TrainConfig};
pub use rankers::{top_s, Method, NeuronRanking, NeuronSet, RankError};
pub use store::{load_dataset, save_dataset, validate_dataset, ActivationMatrix, StoreError, TokenRecord, TokenTable};
pub use voting::{
    aggregate_cells, avg_overlap, borda_aggregate, leave_one_out_report, neuron_vote, overlap, AggregateReport,
    BordaOrder, CompatibilityReport, MethodPool, VoteError,
};
