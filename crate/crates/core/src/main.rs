use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use haarsh::eigenstate::{center_bijection, kernel_sup, log_time_grid, radial_profile, PhaseTable};
use haarsh::harness::config::{DiagonalModel, Experiment, ExperimentConfig, Interval, OmegaSampling, SEED_ENV};
use haarsh::harness::ledger::write_atomic;
use haarsh::harness::run::{run_experiment, schedule_rows, setup_of, to_json_bytes};
use haarsh::harness::trials::{sample_omegas, trial_seeds, Setup};
use haarsh::hull::{amplitude, hull, hull_truncated, DEFAULT_TOL};
use haarsh::lattice::{max_norm_dist, LatticeCube, LocalOperator};
use haarsh::logmag::LogMagnitude;
use haarsh::msa::{scale_induction_report, InductionOptions, PotentialField};
use haarsh::torus::{cell_index, haar_sign, TorusPoint};
use haarsh::{Error, Result};

const QUICKSTART: &str = include_str!("../configs/quickstart.json");

#[derive(Parser)]
#[command(name = "haarsh", version, about = "Haar-wavelet quasi-periodic potentials and localization certificates")]
struct Cli {
    /// Experiment config; the bundled quickstart config when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,
    /// Directory for outputs; stdout when absent (except `run` and `sweep`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    model: ModelOverrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelOverrides {
    #[arg(long, global = true)]
    b: Option<f64>,
    #[arg(long, global = true)]
    g: Option<f64>,
    #[arg(long, global = true)]
    m: Option<f64>,
    #[arg(long, global = true)]
    l0: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the hull at one or more torus points.
    HullEval {
        /// Torus coordinates, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        omega: Vec<f64>,
        /// Fixed truncation level instead of the tolerance rule.
        #[arg(long)]
        n_max: Option<u32>,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Spectrum of the operator on a centered box.
    Spectrum {
        #[arg(long)]
        radius: u64,
        #[arg(long, value_delimiter = ',')]
        omega: Option<Vec<f64>>,
        #[arg(long)]
        vectors: bool,
    },
    /// Sparseness certificates and non-resonance checks for scales -1..=j_max.
    MsaCertify {
        #[arg(long, default_value_t = 1)]
        j_max: i32,
        /// Practical widths for j = -1..=j_max; `exact` keeps g delta_j.
        #[arg(long, value_delimiter = ',')]
        widths: Vec<String>,
        #[arg(long, default_value_t = 3)]
        probe_cubes: usize,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Localization centers, decay fits and radial profiles of all eigenstates.
    Eigenstates {
        #[arg(long)]
        radius: u64,
        #[arg(long, default_value_t = 0)]
        margin: u64,
    },
    /// Sup over a log time grid of |<delta_x, e^{-itH} delta_y>| from one site.
    Dynamics {
        #[arg(long)]
        radius: u64,
        /// Source site offset from the center.
        #[arg(long, default_value_t = 0)]
        x: i64,
        #[arg(long, default_value_t = 0.1)]
        t0: f64,
        #[arg(long, default_value_t = 1e4)]
        t1: f64,
        #[arg(long, default_value_t = 50)]
        n: usize,
    },
    /// Wegner/Minami frequencies on one interval.
    Wegner {
        #[arg(long)]
        radius: u64,
        #[arg(long)]
        center: f64,
        #[arg(long)]
        width: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        j: Vec<u32>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        iid: bool,
    },
    /// Smallest spectral gaps at scale j over sampled phases.
    Spacing {
        #[arg(long)]
        j: i32,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        omega_samples: usize,
        #[arg(long)]
        width: Option<f64>,
    },
    /// Run the config once per coupling, into subdirectories.
    Sweep {
        #[arg(long = "couplings", value_delimiter = ',', required = true)]
        couplings: Vec<f64>,
    },
    /// Length scales, widths and radii for j = -1..=j_max.
    ScheduleDump {
        #[arg(long)]
        j_max: Option<i32>,
    },
    /// Validate the config; exits with status 2 when it is rejected.
    Validate,
    /// Run every experiment in the config.
    Run,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_json(QUICKSTART)?,
    };
    if let Some(s) = cli.seed {
        cfg.seeds.master = s;
    }
    let o = &cli.model;
    if let Some(b) = o.b {
        cfg.model.b = b;
    }
    if let Some(g) = o.g {
        cfg.model.g = g;
    }
    if let Some(m) = o.m {
        cfg.model.m = m;
    }
    if o.l0.is_some() {
        cfg.schedule.l0 = o.l0;
    }
    Ok(cfg)
}

fn emit<T: Serialize>(out_dir: Option<&Path>, name: &str, value: &T) -> Result<()> {
    let bytes = to_json_bytes(value)?;
    match out_dir {
        Some(dir) => write_atomic(&dir.join(name), &bytes),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
            Ok(())
        }
    }
}

fn emit_csv(out_dir: Option<&Path>, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let Some(dir) = out_dir else {
        return Ok(());
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&dir.join(name), &bytes)
}

/// The potential and phase of the first trial under the master seed.
fn first_sample(setup: &Setup, omega: Option<Vec<f64>>) -> (haarsh::hull::HaarshPotential, TorusPoint, u64) {
    let s = trial_seeds(setup.master, setup.first_trial);
    let pot = setup.potential(s.theta, None);
    let om = omega
        .map(TorusPoint::new)
        .unwrap_or_else(|| sample_omegas(s.omega, setup.params.nu, 1, OmegaSampling::Uniform).remove(0));
    (pot, om, s.theta)
}

fn parse_widths(raw: &[String]) -> Result<Vec<Option<LogMagnitude>>> {
    raw.iter()
        .enumerate()
        .map(|(i, w)| match w.trim() {
            "exact" | "" => Ok(None),
            s => s
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0)
                .map(|v| Some(LogMagnitude::from_f64(v)))
                .ok_or_else(|| Error::Config {
                    path: format!("--widths[{i}]"),
                    message: format!("{s:?} is neither a non-negative number nor `exact`"),
                }),
        })
        .collect()
}

fn single(cfg: &ExperimentConfig, e: Experiment) -> ExperimentConfig {
    ExperimentConfig {
        experiments: vec![e],
        ..cfg.clone()
    }
}

fn out_dir_for_run(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn execute(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let out = cli.out_dir.as_deref();
    match &cli.command {
        Command::HullEval { omega, n_max, tol } => {
            let setup = setup_of(&cfg)?;
            let s = trial_seeds(setup.master, setup.first_trial);
            let theta = setup.potential(s.theta, None).theta;
            let hp = cfg.model.hull();
            if omega.len() % cfg.model.nu != 0 {
                return Err(Error::Dimension {
                    expected: cfg.model.nu,
                    got: omega.len(),
                });
            }
            let points: Vec<_> = omega
                .chunks(cfg.model.nu)
                .map(|c| {
                    let p = TorusPoint::new(c.iter().copied());
                    let (value, truncation) = match n_max {
                        Some(n) => (hull_truncated(&p, &theta, *n, &hp), *n),
                        None => {
                            let h = hull(&p, &theta, &hp, *tol);
                            (h.value, h.truncation)
                        }
                    };
                    let levels: Vec<_> = (0..=truncation)
                        .map(|n| {
                            let idx = cell_index(&p, n);
                            json!({
                                "n": n,
                                "cell": idx.k.iter().map(|k| k.to_string()).collect::<Vec<_>>(),
                                "sign": haar_sign(&p, n),
                                "theta": theta.value(&idx),
                                "amplitude": amplitude(n, &hp),
                            })
                        })
                        .collect();
                    json!({"omega": p.coords(), "value": value, "truncation": truncation, "levels": levels})
                })
                .collect();
            emit(out, "hull.json", &json!({"theta_seed": s.theta, "hull": hp, "points": points}))?;
        }
        Command::Spectrum { radius, omega, vectors } => {
            let setup = setup_of(&cfg)?;
            let (pot, om, _) = first_sample(&setup, omega.clone());
            let op = LocalOperator::from_potential(LatticeCube::centered(cfg.model.d, *radius), &pot, &om, cfg.model.g)?;
            let sys = op.eigensystem()?;
            let mut v = sys.to_json(*vectors, op.meta());
            v["omega"] = json!(om.coords());
            emit(out, "spectrum.json", &v)?;
        }
        Command::MsaCertify {
            j_max,
            widths,
            probe_cubes,
            budget,
        } => {
            let setup = setup_of(&cfg)?;
            let s = trial_seeds(setup.master, setup.first_trial);
            let big = setup.schedule.length((*j_max).max(0))?.checked_pow(4).ok_or(Error::ScaleOverflow { j: *j_max })?;
            let field: PotentialField = setup.field(&s, big)?;
            let opts = InductionOptions {
                j_max: *j_max,
                widths: parse_widths(widths)?,
                probe_cubes: *probe_cubes,
                budget: *budget,
            };
            let report = scale_induction_report(&field, &cfg.model, &setup.schedule, &opts)?;
            emit(out, "msa.json", &json!({"theta_seed": s.theta, "omega_seed": s.omega, "report": report}))?;
        }
        Command::Eigenstates { radius, margin } => {
            let setup = setup_of(&cfg)?;
            let (pot, om, theta_seed) = first_sample(&setup, None);
            let cube = LatticeCube::centered(cfg.model.d, *radius);
            let op = LocalOperator::from_potential(cube.clone(), &pot, &om, cfg.model.g)?;
            let sys = op.eigensystem()?;
            let rep = center_bijection(&sys, &cube, cfg.model.m, *margin)?;
            let mut rows = Vec::new();
            for (i, pr) in rep.profiles.iter().enumerate() {
                let psi = sys.vector(i).expect("eigenvector");
                for (r, v) in radial_profile(&psi, &cube, cube.index_of(&pr.centers[0]).expect("center in cube")).iter().enumerate() {
                    rows.push(vec![i.to_string(), r.to_string(), format!("{v:e}")]);
                }
            }
            emit_csv(out, "eigenstate_profiles.csv", &["state", "radius", "max_abs"], &rows)?;
            emit(out, "eigenstates.json", &json!({"theta_seed": theta_seed, "omega": om.coords(), "report": rep}))?;
        }
        Command::Dynamics { radius, x, t0, t1, n } => {
            let setup = setup_of(&cfg)?;
            let (pot, om, theta_seed) = first_sample(&setup, None);
            let cube = LatticeCube::centered(cfg.model.d, *radius);
            let mut src = cube.center().to_vec();
            src[0] += x;
            let xi = cube.index_of(&src).ok_or(Error::SiteOutsideCube(src.clone()))?;
            let op = LocalOperator::from_potential(cube.clone(), &pot, &om, cfg.model.g)?;
            let sys = op.eigensystem()?;
            let table = PhaseTable::new(&sys.eigenvalues, &log_time_grid(*t0, *t1, *n));
            let mut rows = Vec::new();
            let mut kernel = Vec::new();
            for y in 0..cube.len() {
                let k = kernel_sup(&sys, &table, xi, y)?;
                let dist = max_norm_dist(&src, &cube.site(y));
                rows.push(vec![y.to_string(), dist.to_string(), format!("{k:e}")]);
                kernel.push(json!({"site": cube.site(y), "distance": dist, "sup_kernel": k}));
            }
            emit_csv(out, "dynamics.csv", &["site", "distance", "sup_kernel"], &rows)?;
            emit(out, "dynamics.json", &json!({"theta_seed": theta_seed, "omega": om.coords(), "x": src, "times": table.times(), "kernel": kernel}))?;
        }
        Command::Wegner {
            radius,
            center,
            width,
            j,
            samples,
            iid,
        } => {
            let e = Experiment::Wegner {
                radius: *radius,
                diagonal: if *iid { DiagonalModel::IidUniform } else { DiagonalModel::Hull },
                intervals: vec![Interval {
                    center: *center,
                    width: *width,
                }],
                j: j.clone(),
                samples: *samples,
                omega: None,
            };
            let c = single(&cfg, e);
            let summary = run_experiment(&c, &out_dir_for_run(cli, &c))?;
            emit(None, "", &summary.experiments)?;
        }
        Command::Spacing {
            j,
            samples,
            omega_samples,
            width,
        } => {
            let e = Experiment::Spacing {
                j: *j,
                samples: *samples,
                omega_samples: *omega_samples,
                width: *width,
                omega_sampling: OmegaSampling::Uniform,
            };
            let c = single(&cfg, e);
            let summary = run_experiment(&c, &out_dir_for_run(cli, &c))?;
            emit(None, "", &summary.experiments)?;
        }
        Command::Sweep { couplings } => {
            let root = out_dir_for_run(cli, &cfg);
            let mut index = Vec::new();
            for (i, &g) in couplings.iter().enumerate() {
                let mut c = cfg.clone();
                c.model.g = g;
                let sub = format!("g{i:02}");
                let s = run_experiment(&c, &root.join(&sub))?;
                index.push(json!({"g": g, "dir": sub, "bounds_consistent": s.bounds_consistent()}));
            }
            emit(Some(&root), "sweep.json", &index)?;
        }
        Command::ScheduleDump { j_max } => {
            let mut c = cfg.clone();
            if let Some(j) = j_max {
                c.schedule.j_max = *j;
            }
            emit(out, "schedule.json", &schedule_rows(&c)?)?;
        }
        Command::Validate => match cfg.validate() {
            Ok(report) => emit(out, "validation.json", &json!({"valid": true, "parameter_checks": report}))?,
            Err(Error::Config { path, message }) => {
                emit(out, "validation.json", &json!({"valid": false, "path": path, "message": message}))?;
                eprintln!("invalid config at `{path}`: {message}");
                return Ok(ExitCode::from(2));
            }
            Err(e) => return Err(e),
        },
        Command::Run => {
            let dir = out_dir_for_run(cli, &cfg);
            let summary = run_experiment(&cfg, &dir)?;
            eprintln!("wrote {} experiments to {}", summary.experiments.len(), dir.display());
            if !summary.bounds_consistent() {
                eprintln!("an explicit probability bound was exceeded by more than 3 standard errors");
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
