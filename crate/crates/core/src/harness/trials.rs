use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DiagonalModel, Interval, OmegaSampling, TimeGrid};
use super::ledger::{BoundKind, TrialLedger, TrialRow};
use crate::eigenstate::{center_bijection, kernel_sup, log_time_grid, PhaseTable};
use crate::error::Result;
use crate::hull::{amplitude, splitmix, value_separation, HaarshPotential, ThetaField};
use crate::lattice::{
    max_norm_dist, min_pair_spectra_distance, spectral_separation, subcube_spectra, LatticeCube, LocalOperator,
    PairDistance,
};
use crate::logmag::LogMagnitude;
use crate::msa::{scale_induction_report, InductionOptions, PotentialField, Verdict};
use crate::schedule::{ModelParams, ScaleSchedule};
use crate::torus::{FrequencyMatrix, TorusPoint};

/// Closed-interval slack when counting eigenvalues in `I`.
pub const INTERVAL_SLACK: f64 = 1e-12;

const THETA_STREAM: u64 = 0x7468_6574_6100_0001;
const OMEGA_STREAM: u64 = 0x6f6d_6567_6100_0002;

/// Seeds of one trial, a pure function of the master seed and the index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSeeds {
    pub trial: u64,
    pub theta: u64,
    pub omega: u64,
}

pub fn trial_seeds(master: u64, trial: u64) -> TrialSeeds {
    TrialSeeds {
        trial,
        theta: splitmix(splitmix(master ^ THETA_STREAM) ^ trial),
        omega: splitmix(splitmix(master ^ OMEGA_STREAM) ^ trial),
    }
}

/// Everything a trial needs besides its own knobs.
#[derive(Clone, Debug)]
pub struct Setup {
    pub params: ModelParams,
    pub alpha: FrequencyMatrix,
    pub schedule: ScaleSchedule,
    pub master: u64,
    pub first_trial: u64,
}

impl Setup {
    pub fn seeds(&self, samples: usize) -> Vec<TrialSeeds> {
        (0..samples as u64)
            .map(|i| trial_seeds(self.master, self.first_trial + i))
            .collect()
    }

    pub fn potential(&self, theta_seed: u64, truncation: Option<u32>) -> HaarshPotential {
        HaarshPotential::new(ThetaField::new(theta_seed), self.alpha.clone(), self.params.hull(), truncation)
    }

    pub fn field(&self, seeds: &TrialSeeds, radius: u64) -> Result<PotentialField> {
        let pot = self.potential(seeds.theta, None);
        let omega = sample_omegas(seeds.omega, self.params.nu, 1, OmegaSampling::Uniform).remove(0);
        PotentialField::from_potential(LatticeCube::centered(self.params.d, radius), &pot, &omega, self.params.g)
    }
}

/// `count` phases drawn from the stream keyed by `seed`.
pub fn sample_omegas(seed: u64, nu: usize, count: usize, sampling: OmegaSampling) -> Vec<TorusPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let p = TorusPoint::random(&mut rng, nu);
            match sampling {
                OmegaSampling::Uniform => p,
                OmegaSampling::Stratified => {
                    let mut c = p.coords().to_vec();
                    c[0] = (k as f64 + c[0]) / count as f64;
                    TorusPoint::new(c)
                }
            }
        })
        .collect()
}

/// `(pi rho |I| |Lambda|)^J / J!` in log base 2, for a box of `volume` sites.
pub fn minami_bound_log2(density: LogMagnitude, width: f64, j: u32, volume: usize) -> f64 {
    let jf = f64::from(j);
    let log2_fact: f64 = (2..=j).map(|k| f64::from(k).log2()).sum();
    jf * (std::f64::consts::PI.log2() + density.log2_abs() + width.log2() + (volume as f64).log2()) - log2_fact
}

/// Sup of the conditional density of one diagonal entry: `1/g` for the IID
/// model, `1/(g a_N)` for the hull with `N = N~(L)`. `None` at `g = 0`,
/// where the diagonal is deterministic and no density exists.
pub fn density_bound(params: &ModelParams, model: DiagonalModel, radius: u64) -> Option<LogMagnitude> {
    let g = LogMagnitude::from_f64(params.g);
    if g.is_zero() {
        return None;
    }
    Some(match model {
        DiagonalModel::IidUniform => g.recip(),
        DiagonalModel::Hull => {
            let n = params.n_tilde_of_log2((radius.max(2) as f64).log2());
            (g * amplitude(n, &params.hull())).recip()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WegnerSetup {
    pub radius: u64,
    pub diagonal: DiagonalModel,
    /// Fixed phase; sampled per trial when absent.
    pub omega: Option<TorusPoint>,
}

fn wegner_spectrum(setup: &Setup, w: &WegnerSetup, seeds: &TrialSeeds) -> Result<Vec<f64>> {
    let cube = LatticeCube::centered(setup.params.d, w.radius);
    let op = match w.diagonal {
        DiagonalModel::IidUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds.theta);
            let v: Vec<f64> = (0..cube.len()).map(|_| rng.random::<f64>()).collect();
            LocalOperator::assemble(cube, setup.params.g, &v)?
        }
        DiagonalModel::Hull => {
            // the conditional-density argument needs generation N~(L) present
            let n = setup.params.n_tilde_of_log2((w.radius.max(2) as f64).log2());
            let default = setup.potential(seeds.theta, None).truncation;
            let pot = setup.potential(seeds.theta, Some(default.max(n)));
            let omega = match &w.omega {
                Some(p) => p.clone(),
                None => sample_omegas(seeds.omega, setup.params.nu, 1, OmegaSampling::Uniform).remove(0),
            };
            LocalOperator::from_potential(cube, &pot, &omega, setup.params.g)?
        }
    };
    op.eigenvalues()
}

/// One ledger per `(I, J)` cell; spectra are shared across cells.
pub fn wegner_minami_trials(
    setup: &Setup,
    w: &WegnerSetup,
    cells: &[(Interval, u32)],
    samples: usize,
) -> Result<Vec<TrialLedger>> {
    let seeds = setup.seeds(samples);
    let spectra = seeds
        .par_iter()
        .map(|s| wegner_spectrum(setup, w, s))
        .collect::<Result<Vec<_>>>()?;
    let density = density_bound(&setup.params, w.diagonal, w.radius);
    let volume = LatticeCube::centered(setup.params.d, w.radius).len();
    Ok(cells
        .iter()
        .map(|(iv, j)| {
            let bound = density.map(|rho| minami_bound_log2(rho, iv.width, *j, volume));
            let (lo, hi) = (iv.lo() - INTERVAL_SLACK, iv.hi() + INTERVAL_SLACK);
            let rows = seeds
                .iter()
                .zip(&spectra)
                .map(|(s, ev)| {
                    let count = ev.iter().filter(|&&e| lo <= e && e <= hi).count();
                    TrialRow {
                        trial: s.trial,
                        theta_seed: s.theta,
                        omega_seed: s.omega,
                        statistic: count as f64,
                        bound_log2: bound.unwrap_or(f64::INFINITY),
                        flag: count >= *j as usize,
                    }
                })
                .collect();
            TrialLedger::new(
                format!("wegner c={} |I|={} J={}", iv.center, iv.width, j),
                BoundKind::Explicit,
                bound,
                rows,
            )
        })
        .collect())
}

pub fn wegner_minami_trial(
    setup: &Setup,
    w: &WegnerSetup,
    interval: Interval,
    j: u32,
    samples: usize,
) -> Result<TrialLedger> {
    Ok(wegner_minami_trials(setup, w, &[(interval, j)], samples)?.remove(0))
}

/// `Sep(gV, B_{L_0^4}(0))` per trial against each width. The first ledger
/// uses the exact width `4 g delta_0`; the probability bound is reported as
/// the shape `L_0^{8d} beta_0` since its constant is unknown.
pub fn separation_probability_trial(setup: &Setup, widths: &[f64], samples: usize) -> Result<Vec<TrialLedger>> {
    let p = &setup.params;
    let l0 = setup.schedule.length(0)?;
    let cube = LatticeCube::centered(p.d, l0.pow(4));
    let sites: Vec<Vec<i64>> = cube.sites().collect();
    let seeds = setup.seeds(samples);
    let seps = seeds
        .par_iter()
        .map(|s| {
            let pot = setup.potential(s.theta, None);
            let omega = sample_omegas(s.omega, p.nu, 1, OmegaSampling::Uniform).remove(0);
            let values = pot.values(&omega, sites.iter().map(Vec::as_slice));
            Ok(p.g * value_separation(&values)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (_, beta0) = setup.schedule.delta_beta(0, p);
    let shape = 8.0 * p.d as f64 * (l0 as f64).log2() + beta0.log2_abs();
    let exact = setup.schedule.width(0, p).scale(4.0);
    let mut thresholds = vec![("4 g delta_0".to_string(), exact)];
    thresholds.extend(widths.iter().map(|&w| (format!("{w}"), LogMagnitude::from_f64(w))));
    Ok(thresholds
        .into_iter()
        .map(|(name, w)| {
            let rows = seeds
                .iter()
                .zip(&seps)
                .map(|(s, &sep)| TrialRow {
                    trial: s.trial,
                    theta_seed: s.theta,
                    omega_seed: s.omega,
                    statistic: sep,
                    bound_log2: shape,
                    flag: LogMagnitude::from_f64(sep) < w,
                })
                .collect();
            TrialLedger::new(format!("separation width={name}"), BoundKind::Shape, Some(shape), rows)
        })
        .collect())
}

/// Per theta: `min_omega Sep(H_{B_{L_j}(0)})` over sampled phases, flagged
/// when below the width. One minus the frequency estimates membership.
pub fn spacing_probability_trial(
    setup: &Setup,
    j: i32,
    samples: usize,
    omega_samples: usize,
    width: Option<f64>,
    sampling: OmegaSampling,
) -> Result<TrialLedger> {
    let p = &setup.params;
    let lj = setup.schedule.length(j)?;
    let width = width.map_or_else(|| setup.schedule.width(j, p), LogMagnitude::from_f64);
    let seeds = setup.seeds(samples);
    let gaps = seeds
        .par_iter()
        .map(|s| {
            let pot = setup.potential(s.theta, None);
            sample_omegas(s.omega, p.nu, omega_samples, sampling)
                .iter()
                .map(|om| {
                    let op = LocalOperator::from_potential(LatticeCube::centered(p.d, lj), &pot, om, p.g)?;
                    spectral_separation(&op.eigenvalues()?)
                })
                .try_fold(f64::INFINITY, |acc, g| g.map(|g| acc.min(g)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows = seeds
        .iter()
        .zip(&gaps)
        .map(|(s, &gap)| TrialRow {
            trial: s.trial,
            theta_seed: s.theta,
            omega_seed: s.omega,
            statistic: gap,
            bound_log2: width.log2_abs(),
            flag: LogMagnitude::from_f64(gap) < width,
        })
        .collect();
    Ok(TrialLedger::new(
        format!("spacing j={j} L={lj}"),
        BoundKind::Threshold,
        None,
        rows,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleMembership {
    pub j: i32,
    pub length: u64,
    pub width: LogMagnitude,
    /// `min_omega D(L_j, omega, theta)` over the sampled phases.
    pub distance: f64,
    pub witness: PairDistance,
    pub omega: Vec<f64>,
    pub member: bool,
    /// `log2(D / width)`.
    pub margin_log2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaProfile {
    pub theta_seed: u64,
    pub scales: Vec<ScaleMembership>,
    /// Membership at every scale checked.
    pub all_scales: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileOptions {
    pub j_max: i32,
    pub omega_samples: usize,
    /// Per-scale widths; `4 g delta_j` when absent.
    pub widths: Option<Vec<f64>>,
    pub pair_budget: Option<usize>,
    pub sampling: OmegaSampling,
}

pub fn theta_goodness_profile(setup: &Setup, seeds: &TrialSeeds, opts: &ProfileOptions) -> Result<ThetaProfile> {
    let p = &setup.params;
    let pot = setup.potential(seeds.theta, None);
    let omegas = sample_omegas(seeds.omega, p.nu, opts.omega_samples, opts.sampling);
    let mut scales = Vec::new();
    for j in 0..=opts.j_max {
        let lj = setup.schedule.length(j)?;
        let outer = LatticeCube::centered(p.d, lj.pow(4));
        let width = match &opts.widths {
            Some(ws) => LogMagnitude::from_f64(ws[j as usize]),
            None => setup.schedule.width(j, p).scale(4.0),
        };
        let mut best: Option<(PairDistance, &TorusPoint)> = None;
        for om in &omegas {
            let field = PotentialField::from_potential(outer.clone(), &pot, om, p.g)?;
            let (cubes, spectra) = subcube_spectra(&outer, lj, |c| field.operator(&c))?;
            let pd = min_pair_spectra_distance(&cubes, &spectra, opts.pair_budget)?;
            if best.as_ref().is_none_or(|(b, _)| pd.value < b.value) {
                best = Some((pd, om));
            }
        }
        let (witness, om) = best.expect("at least one phase");
        let d = LogMagnitude::from_f64(witness.value);
        scales.push(ScaleMembership {
            j,
            length: lj,
            width,
            distance: witness.value,
            omega: om.coords().to_vec(),
            member: d >= width,
            margin_log2: d.log2_abs() - width.log2_abs(),
            witness,
        });
    }
    Ok(ThetaProfile {
        theta_seed: seeds.theta,
        all_scales: scales.iter().all(|s| s.member),
        scales,
    })
}

/// Ledgers per scale (flag = not a member) plus one for the conjunction.
/// Per-scale bounds are the shape `L_j^{-bA}`.
pub fn theta_profile_trials(setup: &Setup, samples: usize, opts: &ProfileOptions) -> Result<(Vec<TrialLedger>, Vec<ThetaProfile>)> {
    let seeds = setup.seeds(samples);
    let profiles = seeds
        .par_iter()
        .map(|s| theta_goodness_profile(setup, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let p = &setup.params;
    let mut ledgers = Vec::new();
    for j in 0..=opts.j_max {
        let shape = -p.b * f64::from(p.aper_exp) * setup.schedule.log2_length(j);
        let rows = seeds
            .iter()
            .zip(&profiles)
            .map(|(s, prof)| {
                let sc = &prof.scales[j as usize];
                TrialRow {
                    trial: s.trial,
                    theta_seed: s.theta,
                    omega_seed: s.omega,
                    statistic: sc.distance,
                    bound_log2: shape,
                    flag: !sc.member,
                }
            })
            .collect();
        ledgers.push(TrialLedger::new(format!("theta_profile j={j}"), BoundKind::Shape, Some(shape), rows));
    }
    let rows = seeds
        .iter()
        .zip(&profiles)
        .map(|(s, prof)| TrialRow {
            trial: s.trial,
            theta_seed: s.theta,
            omega_seed: s.omega,
            statistic: prof.scales.iter().map(|x| x.distance).fold(f64::INFINITY, f64::min),
            bound_log2: f64::NEG_INFINITY,
            flag: !prof.all_scales,
        })
        .collect();
    ledgers.push(TrialLedger::new("theta_profile all scales", BoundKind::Threshold, None, rows));
    Ok((ledgers, profiles))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationOptions {
    pub radius: u64,
    pub m: f64,
    pub margin: u64,
    pub times: TimeGrid,
    pub kernel_const: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSample {
    pub seeds: TrialSeeds,
    /// Every interior eigenstate is uniformly `m`-localized with fitted rate at least `m`.
    pub localized: bool,
    pub interior_bijection: bool,
    pub min_gap: f64,
    pub min_m_fit: Option<f64>,
    /// Smallest uniform decay rate among interior eigenstates.
    pub min_m_uniform: f64,
    /// `max kernel / (|x-y| e^{-m|x-y|})` with `m = min_m_uniform`; only
    /// evaluated for localized samples.
    pub kernel_ratio: Option<f64>,
    pub kernel_ok: Option<bool>,
    pub pass: bool,
}

pub fn localization_sample(setup: &Setup, seeds: &TrialSeeds, opts: &LocalizationOptions) -> Result<LocalizationSample> {
    let p = &setup.params;
    let pot = setup.potential(seeds.theta, None);
    let omega = sample_omegas(seeds.omega, p.nu, 1, OmegaSampling::Uniform).remove(0);
    let cube = LatticeCube::centered(p.d, opts.radius);
    let op = LocalOperator::from_potential(cube.clone(), &pot, &omega, p.g)?;
    let sys = op.eigensystem()?;
    let rep = center_bijection(&sys, &cube, opts.m, opts.margin)?;
    let interior = || rep.interior_states.iter().map(|&s| &rep.profiles[s]);
    let localized = !rep.interior_states.is_empty()
        && interior().all(|pr| pr.localized && pr.fit.m_fit.is_some_and(|m| m >= opts.m));
    let min_m_fit = interior().filter_map(|pr| pr.fit.m_fit).reduce(f64::min);
    let min_m_uniform = interior().map(|pr| pr.m_uniform).fold(f64::INFINITY, f64::min);
    let kernel_ratio = if localized {
        let table = PhaseTable::new(&sys.eigenvalues, &log_time_grid(opts.times.t0, opts.times.t1, opts.times.n));
        let sites = cube.interior(opts.margin);
        let mut worst = 0.0f64;
        for &x in &sites {
            for &y in &sites {
                if x == y {
                    continue;
                }
                let r = max_norm_dist(&cube.site(x), &cube.site(y)) as f64;
                let bound = r * (-min_m_uniform * r).exp();
                if bound > 0.0 {
                    worst = worst.max(kernel_sup(&sys, &table, x, y)? / bound);
                }
            }
        }
        Some(worst)
    } else {
        None
    };
    let kernel_ok = kernel_ratio.map(|k| k <= opts.kernel_const);
    let gap_positive = rep.min_gap > 0.0;
    Ok(LocalizationSample {
        seeds: *seeds,
        localized,
        interior_bijection: rep.interior_bijection,
        min_gap: rep.min_gap,
        min_m_fit,
        min_m_uniform,
        kernel_ratio,
        kernel_ok,
        pass: localized && rep.interior_bijection && gap_positive && kernel_ok == Some(true),
    })
}

/// Flag = the sample passes every localization check.
pub fn localization_trials(setup: &Setup, samples: usize, opts: &LocalizationOptions) -> Result<(TrialLedger, Vec<LocalizationSample>)> {
    let seeds = setup.seeds(samples);
    // the kernel loop inside each sample is serial, so parallelize across samples
    let out = seeds
        .par_iter()
        .map(|s| localization_sample(setup, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let rows = out
        .iter()
        .map(|s| TrialRow {
            trial: s.seeds.trial,
            theta_seed: s.seeds.theta,
            omega_seed: s.seeds.omega,
            statistic: s.min_m_uniform,
            bound_log2: opts.m.log2(),
            flag: s.pass,
        })
        .collect();
    let label = format!("localization L={} g={}", opts.radius, setup.params.g);
    Ok((TrialLedger::new(label, BoundKind::Threshold, None, rows), out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionSample {
    pub seeds: TrialSeeds,
    /// Sparseness verdict per scale, starting at `j = -1`.
    pub verdicts: Vec<Verdict>,
    pub probes_good: usize,
    pub probes_certified: usize,
    pub energies_checked: usize,
    pub counterexamples: usize,
}

pub fn induction_sample(setup: &Setup, seeds: &TrialSeeds, opts: &InductionOptions) -> Result<InductionSample> {
    let big = setup.schedule.length(opts.j_max)?.pow(4);
    let field = setup.field(seeds, big)?;
    let report = scale_induction_report(&field, &setup.params, &setup.schedule, opts)?;
    let probes = || report.rows.iter().flat_map(|r| &r.probes);
    Ok(InductionSample {
        seeds: *seeds,
        verdicts: report.rows.iter().map(|r| r.certificate.verdict).collect(),
        probes_good: probes().filter(|l| l.goodness == crate::msa::Goodness::Good).count(),
        probes_certified: probes().filter(|l| l.certified).count(),
        energies_checked: probes().map(|l| l.energies_checked).sum(),
        counterexamples: report.counterexamples(),
    })
}

/// Flag = a counterexample to "non-resonant and good implies non-singular".
pub fn induction_trials(setup: &Setup, samples: usize, opts: &InductionOptions) -> Result<(TrialLedger, Vec<InductionSample>)> {
    let seeds = setup.seeds(samples);
    let out = seeds
        .iter()
        .map(|s| induction_sample(setup, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let rows = out
        .iter()
        .map(|s| TrialRow {
            trial: s.seeds.trial,
            theta_seed: s.seeds.theta,
            omega_seed: s.seeds.omega,
            statistic: s.counterexamples as f64,
            bound_log2: f64::NEG_INFINITY,
            flag: s.counterexamples > 0,
        })
        .collect();
    Ok((
        TrialLedger::new(format!("induction j_max={}", opts.j_max), BoundKind::Threshold, None, rows),
        out,
    ))
}
