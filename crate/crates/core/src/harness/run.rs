use std::path::Path;

use serde::Serialize;

use super::config::{Experiment, ExperimentConfig, SCHEMA_VERSION};
use super::ledger::{write_atomic, LedgerSummary, TrialLedger};
use super::trials::{
    induction_trials, localization_trials, separation_probability_trial, spacing_probability_trial,
    theta_profile_trials, wegner_minami_trials, ProfileOptions, Setup, WegnerSetup, INTERVAL_SLACK,
};
use crate::error::Result;
use crate::logmag::LogMagnitude;
use crate::msa::InductionOptions;
use crate::schedule::{ScheduleRow, ValidationReport};
use crate::torus::TorusPoint;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSummary {
    pub index: usize,
    pub kind: &'static str,
    pub ledgers: Vec<LedgerSummary>,
    /// Kind-specific per-sample details, if any were written.
    pub details: Option<String>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub code_version: &'static str,
    pub config: ExperimentConfig,
    pub l0: u64,
    pub parameter_checks: ValidationReport,
    pub schedule_file: String,
    pub experiments: Vec<ExperimentSummary>,
}

impl RunSummary {
    /// Every ledger with an explicit bound respects it.
    pub fn bounds_consistent(&self) -> bool {
        self.experiments
            .iter()
            .flat_map(|e| &e.ledgers)
            .all(|l| l.bound_consistent != Some(false))
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_ledgers(dir: &Path, stem: &str, ledgers: &[TrialLedger]) -> Result<Vec<LedgerSummary>> {
    ledgers
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let file = format!("{stem}_{k:02}.csv");
            write_atomic(&dir.join(&file), &l.to_csv_bytes()?)?;
            Ok(l.summary(&file))
        })
        .collect()
}

fn run_one(setup: &Setup, dir: &Path, index: usize, e: &Experiment) -> Result<ExperimentSummary> {
    let stem = format!("{index:02}_{}", e.kind());
    let mut notes = Vec::new();
    let mut details = None;
    let mut write_details = |bytes: Vec<u8>| -> Result<()> {
        let file = format!("{stem}_details.json");
        write_atomic(&dir.join(&file), &bytes)?;
        details = Some(file);
        Ok(())
    };
    let ledgers = match e {
        Experiment::Wegner {
            radius,
            diagonal,
            intervals,
            j,
            samples,
            omega,
        } => {
            let w = WegnerSetup {
                radius: *radius,
                diagonal: *diagonal,
                omega: omega.clone().map(TorusPoint::new),
            };
            let cells: Vec<_> = intervals.iter().flat_map(|iv| j.iter().map(move |&j| (*iv, j))).collect();
            notes.push(format!("closed intervals with endpoint slack {INTERVAL_SLACK:e}"));
            wegner_minami_trials(setup, &w, &cells, *samples)?
        }
        Experiment::Separation { widths, samples } => {
            notes.push("probability bound is the shape L_0^{8d} beta_0; its constant is unknown".into());
            separation_probability_trial(setup, widths, *samples)?
        }
        Experiment::Spacing {
            j,
            samples,
            omega_samples,
            width,
            omega_sampling,
        } => {
            if width.is_some() {
                notes.push("practical width overrides g delta_j".into());
            }
            vec![spacing_probability_trial(setup, *j, *samples, *omega_samples, *width, *omega_sampling)?]
        }
        Experiment::ThetaProfile {
            samples,
            j_max,
            omega_samples,
            widths,
            pair_budget,
            omega_sampling,
        } => {
            if widths.is_some() {
                notes.push("practical widths override 4 g delta_j".into());
            }
            let opts = ProfileOptions {
                j_max: *j_max,
                omega_samples: *omega_samples,
                widths: widths.clone(),
                pair_budget: *pair_budget,
                sampling: *omega_sampling,
            };
            let (ledgers, profiles) = theta_profile_trials(setup, *samples, &opts)?;
            write_details(to_json_bytes(&profiles)?)?;
            ledgers
        }
        Experiment::Localization {
            radius,
            samples,
            m,
            margin,
            times,
            kernel_const,
        } => {
            let opts = super::trials::LocalizationOptions {
                radius: *radius,
                m: *m,
                margin: *margin,
                times: *times,
                kernel_const: *kernel_const,
            };
            let (ledger, out) = localization_trials(setup, *samples, &opts)?;
            write_details(to_json_bytes(&out)?)?;
            vec![ledger]
        }
        Experiment::Induction {
            samples,
            j_max,
            widths,
            probe_cubes,
            budget,
        } => {
            let opts = InductionOptions {
                j_max: *j_max,
                widths: widths.iter().map(|w| w.map(LogMagnitude::from_f64)).collect(),
                probe_cubes: *probe_cubes,
                budget: *budget,
            };
            if widths.iter().any(Option::is_some) {
                notes.push("practical widths override g delta_j where given".into());
            }
            let (ledger, out) = induction_trials(setup, *samples, &opts)?;
            write_details(to_json_bytes(&out)?)?;
            vec![ledger]
        }
    };
    Ok(ExperimentSummary {
        index,
        kind: e.kind(),
        ledgers: write_ledgers(dir, &stem, &ledgers)?,
        details,
        notes,
    })
}

pub fn setup_of(config: &ExperimentConfig) -> Result<Setup> {
    Ok(Setup {
        params: config.model,
        alpha: config.frequencies()?,
        schedule: config.schedule()?,
        master: config.seeds.master,
        first_trial: config.seeds.first_trial,
    })
}

pub fn schedule_rows(config: &ExperimentConfig) -> Result<Vec<ScheduleRow>> {
    Ok(config.schedule()?.dump(config.schedule.j_max, &config.model))
}

/// Validates `config`, runs every experiment and writes `summary.json`, the
/// schedule dump and one CSV per ledger into `dir`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let parameter_checks = config.validate()?;
    let setup = setup_of(config)?;
    std::fs::create_dir_all(dir)?;
    let schedule_file = "schedule.json".to_string();
    write_atomic(&dir.join(&schedule_file), &to_json_bytes(&schedule_rows(config)?)?)?;
    let experiments = config
        .experiments
        .iter()
        .enumerate()
        .map(|(i, e)| run_one(&setup, dir, i, e))
        .collect::<Result<Vec<_>>>()?;
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        code_version: CODE_VERSION,
        config: config.clone(),
        l0: setup.schedule.length(0)?,
        parameter_checks,
        schedule_file,
        experiments,
    };
    write_atomic(&dir.join("summary.json"), &to_json_bytes(&summary)?)?;
    Ok(summary)
}
