//! Localization centers, uniform decay, the center-to-site correspondence,
//! spectral simplicity and the dynamical kernel of finite-box eigensystems.

use nalgebra::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{max_norm_dist, spectral_separation, LatticeCube, SpectrumReport};
use crate::logmag::LogMagnitude;

/// Relative tolerance under which two entries of `|psi|` tie for the peak.
pub const CENTER_TIE: f64 = 1e-12;

/// Smallest profile value used by decay fits of vectors whose small entries
/// are only accurate to absolute precision.
pub const FIT_FLOOR: f64 = 1e-14;

/// Floor for vectors computed with componentwise relative accuracy.
pub const REFINED_FIT_FLOOR: f64 = 1e-280;

fn check_normalized(psi: &[f64]) -> Result<()> {
    let norm2: f64 = psi.iter().map(|x| x * x).sum();
    if norm2 == 0.0 {
        return Err(Error::Precondition("zero vector".into()));
    }
    if (norm2.sqrt() - 1.0).abs() > 1e-10 {
        return Err(Error::Precondition(format!("vector norm {} is not 1", norm2.sqrt())));
    }
    Ok(())
}

/// Site indices where `|psi|` attains its maximum, up to [`CENTER_TIE`],
/// in lexicographic site order.
pub fn localization_centers(psi: &[f64]) -> Result<Vec<usize>> {
    check_normalized(psi)?;
    let peak = psi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok((0..psi.len())
        .filter(|&i| psi[i].abs() >= peak * (1.0 - CENTER_TIE))
        .collect())
}

/// Largest `m` with `|psi(y)| <= e^{-m|y-c|}` for every `y != c`;
/// infinite when `psi` vanishes off `c`.
pub fn m_uniform(psi: &[f64], cube: &LatticeCube, c: usize) -> f64 {
    let xc = cube.site(c);
    cube.sites()
        .enumerate()
        .filter(|&(i, _)| i != c && psi[i] != 0.0)
        .map(|(i, y)| -psi[i].abs().ln() / max_norm_dist(&y, &xc) as f64)
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub localized: bool,
    pub center: Option<Vec<i64>>,
    pub peak_mass: f64,
    /// A site breaking the decay bound, or the center when its mass is too small.
    pub witness: Option<Vec<i64>>,
}

/// Whether `psi` is uniformly `m`-localized: a center carrying more than half
/// the mass, and `|psi(y)| <= e^{-m|y-c|}` everywhere else.
pub fn is_uniformly_localized(psi: &[f64], cube: &LatticeCube, m: f64) -> Result<Localization> {
    let centers = localization_centers(psi)?;
    let c = centers[0];
    let peak_mass = psi[c] * psi[c];
    let xc = cube.site(c);
    if centers.len() > 1 || peak_mass <= 0.5 {
        return Ok(Localization {
            localized: false,
            center: None,
            peak_mass,
            witness: Some(xc),
        });
    }
    let witness = cube
        .sites()
        .enumerate()
        .find(|(i, y)| *i != c && psi[*i].abs() > (-m * max_norm_dist(y, &xc) as f64).exp())
        .map(|(_, y)| y);
    Ok(Localization {
        localized: witness.is_none(),
        center: Some(xc),
        peak_mass,
        witness,
    })
}

/// Least-squares fit of `ln max_{|y-c|=r} |psi(y)| ~ ln C - m r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// `None` when fewer than three radii clear the floor.
    pub m_fit: Option<f64>,
    pub log_c: Option<f64>,
    /// Root-mean-square residual of the fit in natural-log units.
    pub residual: f64,
    pub radii: usize,
}

/// `max_{|y-c|=r} |psi(y)|` for `r = 0, 1, ...`.
pub fn radial_profile(psi: &[f64], cube: &LatticeCube, c: usize) -> Vec<f64> {
    let xc = cube.site(c);
    let mut out: Vec<f64> = Vec::new();
    for (i, y) in cube.sites().enumerate() {
        let r = max_norm_dist(&y, &xc) as usize;
        if out.len() <= r {
            out.resize(r + 1, 0.0);
        }
        out[r] = out[r].max(psi[i].abs());
    }
    out
}

pub fn decay_exponent_fit(psi: &[f64], cube: &LatticeCube, c: usize, floor: f64) -> DecayFit {
    let pts: Vec<(f64, f64)> = radial_profile(psi, cube, c)
        .into_iter()
        .enumerate()
        .skip(1)
        .filter(|&(_, v)| v > floor)
        .map(|(r, v)| (r as f64, v.ln()))
        .collect();
    let n = pts.len();
    if n < 3 {
        return DecayFit {
            m_fit: None,
            log_c: None,
            residual: f64::NAN,
            radii: n,
        };
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - icept - slope * p.0).powi(2)).sum::<f64>() / nf).sqrt();
    DecayFit {
        m_fit: Some(-slope),
        log_c: Some(icept),
        residual,
        radii: n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenstateProfile {
    pub eigenvalue: f64,
    pub centers: Vec<Vec<i64>>,
    pub peak_mass: f64,
    pub fit: DecayFit,
    /// See [`m_uniform`]; measured from the first center.
    pub m_uniform: f64,
    pub localized: bool,
    pub profile: Vec<f64>,
}

pub fn eigenstate_profile(psi: &[f64], eigenvalue: f64, cube: &LatticeCube, m: f64, floor: f64) -> Result<EigenstateProfile> {
    let centers = localization_centers(psi)?;
    let c = centers[0];
    let loc = is_uniformly_localized(psi, cube, m)?;
    Ok(EigenstateProfile {
        eigenvalue,
        centers: centers.iter().map(|&i| cube.site(i)).collect(),
        peak_mass: psi[c] * psi[c],
        fit: decay_exponent_fit(psi, cube, c, floor),
        m_uniform: m_uniform(psi, cube, c),
        localized: loc.localized,
        profile: radial_profile(psi, cube, c),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisReport {
    pub m: f64,
    pub profiles: Vec<EigenstateProfile>,
    /// Site index of each uniformly localized state's center.
    pub center_of: Vec<Option<usize>>,
    /// The state centered at each site, when exactly one is.
    pub state_at: Vec<Option<usize>>,
    pub injective: bool,
    /// Injective and every site of the box is a center.
    pub bijection: bool,
    pub interior_margin: u64,
    /// States whose first center lies in the interior.
    pub interior_states: Vec<usize>,
    pub boundary_states: Vec<usize>,
    pub nonlocalized: Vec<usize>,
    /// Every interior state is localized and the interior sites are covered
    /// exactly once.
    pub interior_bijection: bool,
    pub min_gap: f64,
}

/// Profiles every state of a full eigensystem and matches centers to sites.
/// Interior sites are those more than `margin` from the inner boundary.
pub fn center_bijection(sys: &SpectrumReport, cube: &LatticeCube, m: f64, margin: u64) -> Result<BasisReport> {
    let vecs = sys
        .vectors
        .as_ref()
        .ok_or_else(|| Error::Precondition("eigenvectors required".into()))?;
    let n = cube.len();
    if vecs.nrows() != n || sys.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: vecs.nrows(),
        });
    }
    let profiles = (0..n)
        .into_par_iter()
        .map(|i| {
            let psi: Vec<f64> = vecs.column(i).iter().copied().collect();
            let floor = if sys.refined.get(i).copied().unwrap_or(false) {
                REFINED_FIT_FLOOR
            } else {
                FIT_FLOOR
            };
            eigenstate_profile(&psi, sys.eigenvalues[i], cube, m, floor)
        })
        .collect::<Result<Vec<_>>>()?;
    let center_of: Vec<Option<usize>> = profiles
        .iter()
        .map(|p| p.localized.then(|| cube.index_of(&p.centers[0]).expect("center in cube")))
        .collect();
    let mut hits = vec![0usize; n];
    let mut state_at = vec![None; n];
    for (s, c) in center_of.iter().enumerate() {
        if let Some(c) = *c {
            hits[c] += 1;
            state_at[c] = Some(s);
        }
    }
    for (site, h) in hits.iter().enumerate() {
        if *h > 1 {
            state_at[site] = None;
        }
    }
    let injective = hits.iter().all(|&h| h <= 1);
    let bijection = injective && hits.iter().all(|&h| h == 1);
    let interior = cube.interior(margin);
    let mut is_interior = vec![false; n];
    interior.iter().for_each(|&i| is_interior[i] = true);
    let (interior_states, boundary_states): (Vec<usize>, Vec<usize>) = (0..n).partition(|&s| {
        let c = cube.index_of(&profiles[s].centers[0]).expect("center in cube");
        is_interior[c]
    });
    let nonlocalized: Vec<usize> = (0..n).filter(|&s| !profiles[s].localized).collect();
    let interior_bijection = interior_states.iter().all(|&s| profiles[s].localized)
        && interior.iter().all(|&site| hits[site] == 1);
    let min_gap = if n > 1 { spectral_separation(&sys.eigenvalues)? } else { f64::INFINITY };
    Ok(BasisReport {
        m,
        profiles,
        center_of,
        state_at,
        injective,
        bijection,
        interior_margin: margin,
        interior_states,
        boundary_states,
        nonlocalized,
        interior_bijection,
        min_gap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplicityReport {
    pub min_gap: f64,
    /// `min_gap` exceeds the rounding level of the spectrum.
    pub simple: bool,
    pub width: LogMagnitude,
    pub above_width: bool,
    /// `C e^{-m L} L^{d/2}`; absent without a usable decay fit.
    pub km_threshold: Option<LogMagnitude>,
    pub above_km: Option<bool>,
}

/// Decay constants `(C, m)` for the two-eigenvector threshold, taken as the
/// worst case over fitted states: largest prefactor, smallest exponent.
pub fn km_constants(profiles: &[EigenstateProfile]) -> Option<(f64, f64)> {
    let fits: Vec<(f64, f64)> = profiles
        .iter()
        .filter_map(|p| Some((p.fit.log_c?, p.fit.m_fit?)))
        .collect();
    if fits.is_empty() {
        return None;
    }
    let log_c = fits.iter().map(|f| f.0).fold(f64::NEG_INFINITY, f64::max);
    let m = fits.iter().map(|f| f.1).fold(f64::INFINITY, f64::min);
    Some((log_c.exp(), m))
}

/// Gap test of a box spectrum against a resonance width and, given decay
/// constants `(C, m)`, against `C e^{-mL} L^{d/2}` for a box of radius `l`.
pub fn simplicity_report(eigenvalues: &[f64], width: LogMagnitude, decay: Option<(f64, f64)>, l: u64, d: usize) -> Result<SimplicityReport> {
    let min_gap = spectral_separation(eigenvalues)?;
    let scale = eigenvalues.iter().fold(1.0f64, |m, e| m.max(e.abs()));
    let gap = LogMagnitude::from_f64(min_gap);
    let km_threshold = decay.map(|(c, m)| {
        let lf = l.max(1) as f64;
        LogMagnitude::from_f64(c) * LogMagnitude::exp(-m * lf) * LogMagnitude::from_f64(lf).powf(d as f64 / 2.0)
    });
    Ok(SimplicityReport {
        min_gap,
        simple: min_gap > 4.0 * f64::EPSILON * scale,
        width,
        above_width: gap > width,
        above_km: km_threshold.map(|t| gap > t),
        km_threshold,
    })
}

/// `|sum_i psi_i(x) phi_i psi_i(y)|` for `phi` given on the eigenvalues.
pub fn kernel_with(sys: &SpectrumReport, x: usize, y: usize, phi: &[Complex<f64>]) -> Result<f64> {
    let v = sys
        .vectors
        .as_ref()
        .ok_or_else(|| Error::Precondition("eigenvectors required".into()))?;
    if phi.len() != sys.len() {
        return Err(Error::Dimension {
            expected: sys.len(),
            got: phi.len(),
        });
    }
    if phi.iter().any(|z| z.norm() > 1.0 + 1e-12) {
        return Err(Error::Precondition("phi must be bounded by 1".into()));
    }
    let sum: Complex<f64> = (0..sys.len()).map(|i| phi[i] * (v[(x, i)] * v[(y, i)])).sum();
    Ok(sum.norm())
}

/// `|<1_x| e^{-iHt} |1_y>|`.
pub fn dynamical_kernel(sys: &SpectrumReport, x: usize, y: usize, t: f64) -> Result<f64> {
    let phi: Vec<Complex<f64>> = sys
        .eigenvalues
        .iter()
        .map(|&l| Complex::from_polar(1.0, -l * t))
        .collect();
    kernel_with(sys, x, y, &phi)
}

/// Phases `e^{-i lambda_k t}` of a spectrum on a time grid, shared by every
/// pair of sites.
pub struct PhaseTable {
    times: Vec<f64>,
    // phases[k * times.len() + t]
    phases: Vec<Complex<f64>>,
}

impl PhaseTable {
    pub fn new(eigenvalues: &[f64], times: &[f64]) -> Self {
        let phases = eigenvalues
            .iter()
            .flat_map(|&l| times.iter().map(move |&t| Complex::from_polar(1.0, -l * t)))
            .collect();
        Self {
            times: times.to_vec(),
            phases,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// `max_t |<1_x| e^{-iHt} |1_y>|` over the table's times; eigenstates with
/// `psi_k(x) psi_k(y) = 0` are skipped.
pub fn kernel_sup(sys: &SpectrumReport, table: &PhaseTable, x: usize, y: usize) -> Result<f64> {
    let v = sys
        .vectors
        .as_ref()
        .ok_or_else(|| Error::Precondition("eigenvectors required".into()))?;
    let nt = table.times.len();
    if table.phases.len() != sys.len() * nt {
        return Err(Error::Dimension {
            expected: sys.len() * nt,
            got: table.phases.len(),
        });
    }
    let mut acc = vec![Complex::new(0.0, 0.0); nt];
    for k in 0..sys.len() {
        let p = v[(x, k)] * v[(y, k)];
        if p == 0.0 {
            continue;
        }
        let row = &table.phases[k * nt..(k + 1) * nt];
        acc.iter_mut().zip(row).for_each(|(a, z)| *a += z * p);
    }
    Ok(acc.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// `n` log-spaced times from `t0` to `t1`.
pub fn log_time_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![t0];
    }
    let (a, b) = (t0.ln(), t1.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}
