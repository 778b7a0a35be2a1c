//! Experiment harness: synthetic data, two-stage training, re-ranking,
//! input perturbations and rank-change diagnostics.

pub mod dataset;
pub mod formats;
pub mod rerank;
pub mod synth;
pub mod train;

pub use dataset::Dataset;
pub use formats::{
    parse_corpus, parse_qrels, parse_queries, parse_run, rankings, validate_run, write_corpus,
    write_qrels, write_queries, write_run, Document, RunEntry,
};
pub use rerank::{matrix_csv, perturb, rank_change_matrix, rerank, PerturbMode};
pub use synth::{generate_synthetic, SyntheticConfig};
pub use train::{
    mean_duplicate_bce, mean_listwise_loss, train_stage1, train_stage2, ModelBundle, Stage1Config,
    Stage1Loss, Stage2Config, Stage2Loss, TrainLog,
};
