//! Search orchestration: the joint weight/architecture update, genotype
//! derivation, random baselines and ablation suites.

pub mod ablation;
pub mod config;
pub mod derive;
pub mod random;
pub mod search;

pub use ablation::{mean_var, run_ablation, AblationReport, AblationRow, AblationRun, AblationSuite, BETA_SWEEP, D_SWEEP};
pub use config::{DeriveFrom, SearchConfig, SgdConfig, TemperatureConfig};
pub use derive::derive_genotype;
pub use random::{random_search, RandomSetting, REJECTION_CAP};
pub use search::{
    load_checkpoint, run_search, run_search_with, save_checkpoint, search_step, RunOptions, SearchResult, SearchState,
    StepMetrics,
};
