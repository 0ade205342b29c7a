//! Variational mutual-information bounds, critics and Gaussian oracles.

pub mod bench;
pub mod bound;
pub mod critic;
pub mod oracle;
pub mod train;
pub mod tuba;

pub use bench::{mi_bench_csv, run_mi_bench, MiBenchRow, MiBenchSettings};
pub use bound::{mi_alpha_bound, mi_alpha_bound_var, mi_alpha_terms, tuba_bound, BoundTerms, ScoreMatrix};
pub use critic::{CriticArch, CriticPair};
pub use oracle::gaussian_mi_oracle;
pub use train::{bound_spread_by_alpha, train_mi_alpha, FixedPairs, GaussianPairs, MiTrainSettings, PairedSource};
pub use tuba::{plugin_scores, tuba_plugin_bound, PluginCritic};
