use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::DEFAULT_SIZE_CAP;
use crate::schedule::{l0_of_g, validate_params, ModelParams, ScaleSchedule, ValidationReport};
use crate::torus::FrequencyMatrix;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding `seeds.master`.
pub const SEED_ENV: &str = "HAARSH_SEED";

/// Checks from the parameter table that reject a config in strict mode. The
/// Minami-exponent condition is never satisfiable with the stated `B`, so it
/// is only ever reported.
const HARD_CHECKS: [(&str, &str); 6] = [
    ("b_min", "model.b"),
    ("b_star", "model.b"),
    ("positive_constants", "model.A"),
    ("mass", "model.m"),
    ("coupling", "model.g"),
    ("l0", "schedule.l0"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub name: String,
    pub model: ModelParams,
    #[serde(default)]
    pub checks: CheckMode,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Rows of the frequency matrix, one per lattice direction.
    #[serde(default = "golden")]
    pub alpha: Vec<Vec<f64>>,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub experiments: Vec<Experiment>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn golden() -> Vec<Vec<f64>> {
    FrequencyMatrix::golden_mean().rows().to_vec()
}

/// How parameter-table violations are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    /// Violations are validation errors.
    #[default]
    Strict,
    /// Violations are recorded in the summary; desk-scale runs need this.
    Report,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Initial scale; derived from `g` when absent.
    pub l0: Option<u64>,
    /// Last scale listed in the schedule dump.
    #[serde(default = "one")]
    pub j_max: i32,
}

fn one() -> i32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub master: u64,
    /// Index of the first trial, so any window of trials can be replayed.
    #[serde(default)]
    pub first_trial: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub center: f64,
    pub width: f64,
}

impl Interval {
    pub fn lo(&self) -> f64 {
        self.center - 0.5 * self.width
    }

    pub fn hi(&self) -> f64 {
        self.center + 0.5 * self.width
    }
}

/// Diagonal disorder used by the Wegner/Minami trials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalModel {
    /// `g V(x; omega; theta)` from the hull.
    #[default]
    Hull,
    /// IID uniform `[0, 1)` values times `g`, the reference random model.
    IidUniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaSampling {
    #[default]
    Uniform,
    /// One point per equal slab of the first torus coordinate.
    Stratified,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Frequency of `Tr Pi_I(H_{B_L(0)}) >= J`.
    Wegner {
        radius: u64,
        #[serde(default)]
        diagonal: DiagonalModel,
        intervals: Vec<Interval>,
        j: Vec<u32>,
        samples: usize,
        /// Fixed phase; sampled per trial when absent.
        #[serde(default)]
        omega: Option<Vec<f64>>,
    },
    /// Frequency of `Sep(gV, B_{L_0^4}(0)) < w`.
    Separation {
        widths: Vec<f64>,
        samples: usize,
    },
    /// Per theta, the smallest spectral gap of `H_{B_{L_j}(0)}` over sampled phases.
    Spacing {
        j: i32,
        samples: usize,
        omega_samples: usize,
        /// Practical width; `g delta_j` when absent.
        #[serde(default)]
        width: Option<f64>,
        #[serde(default)]
        omega_sampling: OmegaSampling,
    },
    /// Per theta and scale, membership of the good set at sampled phases.
    ThetaProfile {
        samples: usize,
        j_max: i32,
        omega_samples: usize,
        /// Practical widths for `j = 0..=j_max`; `4 g delta_j` when absent.
        #[serde(default)]
        widths: Option<Vec<f64>>,
        #[serde(default)]
        pair_budget: Option<usize>,
        #[serde(default)]
        omega_sampling: OmegaSampling,
    },
    /// Eigenstate localization, center bijection, gaps and the dynamical kernel.
    Localization {
        radius: u64,
        samples: usize,
        /// Decay rate required of interior eigenstates.
        m: f64,
        margin: u64,
        times: TimeGrid,
        kernel_const: f64,
    },
    /// Sparseness certificates and the non-resonance implication per scale.
    Induction {
        samples: usize,
        j_max: i32,
        /// Practical widths for `j = -1..=j_max`; `g delta_j` where null.
        #[serde(default)]
        widths: Vec<Option<f64>>,
        #[serde(default = "three")]
        probe_cubes: usize,
        #[serde(default)]
        budget: Option<usize>,
    },
}

fn three() -> usize {
    3
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Wegner { .. } => "wegner",
            Self::Separation { .. } => "separation",
            Self::Spacing { .. } => "spacing",
            Self::ThetaProfile { .. } => "theta_profile",
            Self::Localization { .. } => "localization",
            Self::Induction { .. } => "induction",
        }
    }
}

/// Largest region the harness will tabulate a potential on.
pub const MAX_REGION_SITES: u64 = 1 << 22;

fn invalid(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| invalid(e.path().to_string(), e.inner().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `HAARSH_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seeds.master = v
                .trim()
                .parse()
                .map_err(|_| invalid("seeds.master", format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn frequencies(&self) -> Result<FrequencyMatrix> {
        FrequencyMatrix::new(self.alpha.clone()).map_err(|e| invalid("alpha", e.to_string()))
    }

    /// The configured `L_0`, or the largest one the coupling admits.
    pub fn l0(&self) -> Result<u64> {
        match self.schedule.l0 {
            Some(l0) => Ok(l0),
            None => l0_of_g(self.model.g, self.model.m, &self.model)
                .map(|c| c.l0)
                .map_err(|e| invalid("schedule.l0", format!("{e}; set it explicitly"))),
        }
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        ScaleSchedule::new(self.l0()?).map_err(|e| invalid("schedule.l0", e.to_string()))
    }

    pub fn parameter_report(&self) -> Result<ValidationReport> {
        Ok(validate_params(&self.model, Some(&self.schedule()?)))
    }

    /// Structural checks, then the parameter table according to `checks`.
    pub fn validate(&self) -> Result<ValidationReport> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        let m = &self.model;
        if m.d == 0 {
            return Err(invalid("model.d", "lattice dimension must be at least 1"));
        }
        if m.nu == 0 {
            return Err(invalid("model.nu", "torus dimension must be at least 1"));
        }
        if !(m.b > 0.0 && m.b.is_finite()) {
            return Err(invalid("model.b", format!("b = {} must be positive", m.b)));
        }
        if !(m.amp_factor > 0.0 && m.amp_factor.is_finite()) {
            return Err(invalid("model.amp_factor", "must be positive"));
        }
        if !m.g.is_finite() || m.g < 0.0 {
            return Err(invalid("model.g", format!("g = {} must be finite and non-negative", m.g)));
        }
        if !(m.m > 0.0 && m.m.is_finite()) {
            return Err(invalid("model.m", format!("m = {} must be positive", m.m)));
        }
        if self.alpha.len() != m.d {
            return Err(invalid("alpha", format!("{} rows for lattice dimension {}", self.alpha.len(), m.d)));
        }
        if let Some(i) = self.alpha.iter().position(|r| r.len() != m.nu) {
            return Err(invalid(format!("alpha[{i}]"), format!("row length must equal nu = {}", m.nu)));
        }
        self.frequencies()?;
        let schedule = self.schedule()?;
        for (i, e) in self.experiments.iter().enumerate() {
            validate_experiment(e, m.d, &schedule)
                .map_err(|(field, msg)| invalid(format!("experiments[{i}].{}.{field}", e.kind()), msg))?;
        }
        let report = validate_params(m, Some(&schedule));
        if self.checks == CheckMode::Strict {
            for (name, path) in HARD_CHECKS {
                if let Some(c) = report.get(name).filter(|c| !c.pass) {
                    return Err(invalid(
                        path,
                        format!(
                            "parameter table condition `{}` fails ({} vs {}); set \"checks\": \"report\" for desk-scale runs",
                            c.inequality, c.lhs, c.rhs
                        ),
                    ));
                }
            }
        }
        Ok(report)
    }
}

fn positive_count(field: &str, n: usize) -> std::result::Result<(), (String, String)> {
    if n == 0 {
        Err((field.into(), "must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn region_fits(field: &str, radius: u64, d: usize) -> std::result::Result<(), (String, String)> {
    let side = radius.checked_mul(2).and_then(|s| s.checked_add(1));
    let sites = side.and_then(|s| s.checked_pow(d as u32));
    match sites {
        Some(n) if n <= MAX_REGION_SITES => Ok(()),
        _ => Err((field.into(), format!("region of radius {radius} exceeds {MAX_REGION_SITES} sites"))),
    }
}

fn box_fits(field: &str, radius: u64, d: usize) -> std::result::Result<(), (String, String)> {
    let side = (2 * radius + 1) as usize;
    match side.checked_pow(d as u32) {
        Some(n) if n <= DEFAULT_SIZE_CAP => Ok(()),
        _ => Err((field.into(), format!("box of radius {radius} exceeds the {DEFAULT_SIZE_CAP}-site cap"))),
    }
}

fn positive_widths<'a>(field: &str, ws: impl IntoIterator<Item = &'a f64>) -> std::result::Result<(), (String, String)> {
    for (k, &w) in ws.into_iter().enumerate() {
        if !(w >= 0.0 && w.is_finite()) {
            return Err((format!("{field}[{k}]"), format!("width {w} must be finite and non-negative")));
        }
    }
    Ok(())
}

fn scale_length(field: &str, schedule: &ScaleSchedule, j: i32) -> std::result::Result<u64, (String, String)> {
    schedule.length(j).map_err(|e| (field.into(), e.to_string()))
}

fn validate_experiment(e: &Experiment, d: usize, schedule: &ScaleSchedule) -> std::result::Result<(), (String, String)> {
    match e {
        Experiment::Wegner {
            radius,
            intervals,
            j,
            samples,
            omega,
            ..
        } => {
            positive_count("samples", *samples)?;
            box_fits("radius", *radius, d)?;
            if intervals.is_empty() {
                return Err(("intervals".into(), "at least one interval is required".into()));
            }
            for (k, iv) in intervals.iter().enumerate() {
                if !(iv.width > 0.0 && iv.width.is_finite()) {
                    return Err((format!("intervals[{k}].width"), "|I| must be positive".into()));
                }
                if !iv.center.is_finite() {
                    return Err((format!("intervals[{k}].center"), "must be finite".into()));
                }
            }
            if j.is_empty() {
                return Err(("j".into(), "at least one J is required".into()));
            }
            if let Some(k) = j.iter().position(|&v| v == 0) {
                return Err((format!("j[{k}]"), "J must be at least 1".into()));
            }
            if let Some(w) = omega {
                if let Some(k) = w.iter().position(|c| !c.is_finite()) {
                    return Err((format!("omega[{k}]"), "must be finite".into()));
                }
            }
        }
        Experiment::Separation { widths, samples } => {
            positive_count("samples", *samples)?;
            positive_widths("widths", widths)?;
            let l0 = scale_length("widths", schedule, 0)?;
            region_fits("samples", l0.pow(4), d)?;
        }
        Experiment::Spacing {
            j,
            samples,
            omega_samples,
            width,
            ..
        } => {
            positive_count("samples", *samples)?;
            positive_count("omega_samples", *omega_samples)?;
            positive_widths("width", width.iter())?;
            box_fits("j", scale_length("j", schedule, *j)?, d)?;
        }
        Experiment::ThetaProfile {
            samples,
            j_max,
            omega_samples,
            widths,
            ..
        } => {
            positive_count("samples", *samples)?;
            positive_count("omega_samples", *omega_samples)?;
            if *j_max < 0 {
                return Err(("j_max".into(), "must be non-negative".into()));
            }
            let l = scale_length("j_max", schedule, *j_max)?;
            region_fits("j_max", l.checked_pow(4).unwrap_or(u64::MAX), d)?;
            if let Some(ws) = widths {
                if ws.len() != *j_max as usize + 1 {
                    return Err(("widths".into(), format!("need {} entries, one per scale", j_max + 1)));
                }
                positive_widths("widths", ws)?;
            }
        }
        Experiment::Localization {
            radius,
            samples,
            m,
            margin,
            times,
            kernel_const,
        } => {
            positive_count("samples", *samples)?;
            box_fits("radius", *radius, d)?;
            if margin >= radius {
                return Err(("margin".into(), "must be smaller than the radius".into()));
            }
            if !m.is_finite() || *m <= 0.0 {
                return Err(("m".into(), "must be positive".into()));
            }
            if !(times.t0 > 0.0 && times.t1 >= times.t0) || times.n == 0 {
                return Err(("times".into(), "need 0 < t0 <= t1 and n >= 1".into()));
            }
            if !kernel_const.is_finite() || *kernel_const <= 0.0 {
                return Err(("kernel_const".into(), "must be positive".into()));
            }
        }
        Experiment::Induction {
            samples,
            j_max,
            widths,
            ..
        } => {
            positive_count("samples", *samples)?;
            if *j_max < 0 {
                return Err(("j_max".into(), "must be non-negative".into()));
            }
            let l = scale_length("j_max", schedule, *j_max)?;
            region_fits("j_max", l.checked_pow(4).unwrap_or(u64::MAX), d)?;
            if widths.len() > *j_max as usize + 2 {
                return Err(("widths".into(), format!("at most {} entries (j = -1..={j_max})", j_max + 2)));
            }
            positive_widths("widths", widths.iter().flatten())?;
        }
    }
    Ok(())
}
