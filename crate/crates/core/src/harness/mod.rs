//! Monte-Carlo experiments over the coefficient ensemble, their configuration
//! and on-disk reports.

pub mod config;
pub mod ledger;
pub mod run;
pub mod trials;

pub use config::{CheckMode, Experiment, ExperimentConfig, SCHEMA_VERSION, SEED_ENV};
pub use ledger::{BoundKind, LedgerSummary, TrialLedger, TrialRow};
pub use run::{run_experiment, RunSummary};
pub use trials::{
    separation_probability_trial, spacing_probability_trial, theta_goodness_profile, trial_seeds,
    wegner_minami_trial, wegner_minami_trials, Setup,
};
