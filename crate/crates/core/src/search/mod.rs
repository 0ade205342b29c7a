//! Random search over distillation configs and importance analysis.

pub mod fanova;
pub mod random;
pub mod space;

pub use fanova::{
    brute_force_anova, fanova_from_records, fanova_importance, mean_report, AxisImportance, FactorTable,
    ForestSettings, ImportanceReport, PairImportance,
};
pub use random::{failed_record, random_search, sample_configs};
pub use space::{aug_policies, config_labels, SearchPoint, SearchSpace, AXES};
