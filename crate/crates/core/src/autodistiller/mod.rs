//! Predicting the distillation ratio of a config on a dataset, and
//! recommending configs from the prediction.

pub mod features;
pub mod gbdt;
pub mod meta;

pub use features::{
    baseline_score, corpus_words, description_words, featurize_dataset, token_word, DatasetFeatures, EmbeddingTable,
    IdfTable,
};
pub use gbdt::{Gbdt, GbdtSettings};
pub use meta::{lodo_eval, recommend, spearman, train_meta, LodoFold, LodoReport, MetaModel, MetaRow, Recommendation};
