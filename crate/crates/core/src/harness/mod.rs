//! Data ingestion, the training loop with metric taps, and run persistence.

pub mod analysis;
pub mod config;
pub mod data;
pub mod train;

pub use analysis::{
    analyze_tensor, checkpoint_steps, compare, plot_csv, quantize_run, read_run, spearman, summarize, verify_run, CompareReport,
    RunData, RunSummary, TensorAnalysis, VerifyReport,
};
pub use config::{DatasetSpec, MatrixSpec, Precision, ProbeSpec, RunConfig, Seeds};
pub use data::{synth_corpus, tokenize_bytes, Corpus, Hmm};
pub use train::{decomposition_probe, execute, train, ProbeRow, RunManifest, RunOutcome, RunState, RunStatus};

#[cfg(test)]
mod tests;
