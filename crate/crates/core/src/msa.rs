//! Certification predicates of the multiscale analysis: resonant and
//! singular cubes, dominated decay, Combes-Thomas bounds, good and bad cubes,
//! and the sparseness property `SS(L_j)`.
//!
//! Whether a cube is `(E,m)`-singular depends on `E` through a resolvent, so
//! no finite energy list settles a statement "for all E". Scans here use
//! danger windows instead. With eigenpairs `(lambda_i, psi_i)` and
//! `w_i = |psi_i(x)| max_{y in boundary} |psi_i(y)|`,
//!
//! ```text
//! |G(x, y; E)| <= sum_i w_i / |lambda_i - E|,
//! ```
//!
//! so a cube with `n` sites and threshold `T` can only be singular inside
//! `lambda_i +- n w_i / T`. Two disjoint cubes can only be singular at one
//! energy where their windows overlap, and only those overlaps are resolved
//! by direct Green evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hull::HaarshPotential;
use crate::lattice::{max_norm_dist, min_pair_spectra_distance, LatticeCube, LocalOperator, SamplingPlan};
use crate::logmag::LogMagnitude;
use crate::schedule::{gamma, ModelParams, ScaleSchedule};
use crate::torus::TorusPoint;

/// Relative slack allowed on Green bounds that are theorems.
pub const GREEN_SLACK: f64 = 1e-9;

/// Overlapping window pairs resolved per scan before the rest are left
/// unresolved.
const MAX_OVERLAPS: usize = 50_000;

/// Sub-cubes a scan enumerates before it insists on a sampling budget.
const MAX_EXHAUSTIVE_SUBCUBES: usize = 1 << 21;

/// `gV` tabulated on a cube; operators on sub-cubes are cut from it.
#[derive(Clone, Debug)]
pub struct PotentialField {
    cube: LatticeCube,
    diagonal: Vec<f64>,
}

impl PotentialField {
    pub fn from_potential(cube: LatticeCube, pot: &HaarshPotential, omega: &TorusPoint, g: f64) -> Result<Self> {
        if pot.lattice_dim() != cube.dim() {
            return Err(Error::Dimension {
                expected: pot.lattice_dim(),
                got: cube.dim(),
            });
        }
        let diagonal = (0..cube.len())
            .into_par_iter()
            .map(|i| g * pot.value(omega, &cube.site(i)))
            .collect();
        Ok(Self { cube, diagonal })
    }

    pub fn from_diagonal(cube: LatticeCube, diagonal: Vec<f64>) -> Result<Self> {
        if diagonal.len() != cube.len() {
            return Err(Error::Dimension {
                expected: cube.len(),
                got: diagonal.len(),
            });
        }
        Ok(Self { cube, diagonal })
    }

    pub fn cube(&self) -> &LatticeCube {
        &self.cube
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn at(&self, x: &[i64]) -> Option<f64> {
        self.cube.index_of(x).map(|i| self.diagonal[i])
    }

    pub fn restrict(&self, sub: &LatticeCube) -> Result<Self> {
        if !self.cube.contains_cube(sub) {
            return Err(Error::Precondition(format!(
                "cube of radius {} at {:?} is not inside the tabulated region",
                sub.radius(),
                sub.center()
            )));
        }
        let diagonal = sub
            .sites()
            .map(|x| self.diagonal[self.cube.index_of(&x).expect("contained")])
            .collect();
        Ok(Self {
            cube: sub.clone(),
            diagonal,
        })
    }

    pub fn operator(&self, sub: &LatticeCube) -> Result<LocalOperator> {
        let part = self.restrict(sub)?;
        LocalOperator::with_diagonal(part.cube, part.diagonal)
    }
}

/// Center-to-boundary Green bound for a cube of radius `l`:
/// `(3l)^{-d} e^{-gamma(m,l)}`, or `(2d)^{-1} e^{-gamma(m,0)}` for a single site.
pub fn ns_threshold(d: usize, l: u64, m: f64) -> LogMagnitude {
    let pre = if l == 0 {
        LogMagnitude::from_f64(2.0 * d as f64)
    } else {
        LogMagnitude::from_f64(3.0 * l as f64).powf(d as f64)
    };
    pre.recip() * LogMagnitude::exp(-gamma(m, l as f64))
}

/// `(resonant, min_i |lambda_i - E|)` for a sorted spectrum.
pub fn is_e_resonant(eigenvalues: &[f64], energy: f64, width: LogMagnitude) -> (bool, f64) {
    let distance = nearest_distance(eigenvalues, energy);
    (LogMagnitude::from_f64(distance) < width, distance)
}

fn nearest_distance(sorted: &[f64], e: f64) -> f64 {
    let k = sorted.partition_point(|&l| l < e);
    let mut best = f64::INFINITY;
    if k < sorted.len() {
        best = best.min(sorted[k] - e);
    }
    if k > 0 {
        best = best.min(e - sorted[k - 1]);
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsCheck {
    pub non_singular: bool,
    /// `max_{y in inner boundary} |G(x, y; E)|` with `x` the center.
    pub max_green: f64,
    pub threshold: LogMagnitude,
    /// `E` hit the spectrum; the cube is singular.
    pub in_spectrum: bool,
    /// The Green values flushed to zero while the threshold lies below the
    /// smallest double, so the verdict rests on the underflow.
    pub underflow: bool,
}

fn boundary_green(op: &LocalOperator, center: usize, boundary: &[usize], energy: f64) -> Option<f64> {
    let col = op.green_column(center, energy).ok()?;
    Some(boundary.iter().map(|&y| col[y].abs()).fold(0.0, f64::max))
}

fn center_and_boundary(cube: &LatticeCube) -> (usize, Vec<usize>) {
    let c = cube.index_of(cube.center()).expect("center is in its cube");
    (c, cube.inner_boundary())
}

pub fn is_em_ns(op: &LocalOperator, energy: f64, m: f64) -> NsCheck {
    let cube = op.cube();
    let threshold = ns_threshold(cube.dim(), cube.radius(), m);
    let (c, boundary) = center_and_boundary(cube);
    match boundary_green(op, c, &boundary, energy) {
        None => NsCheck {
            non_singular: false,
            max_green: f64::INFINITY,
            threshold,
            in_spectrum: true,
            underflow: false,
        },
        Some(g) => NsCheck {
            non_singular: LogMagnitude::from_f64(g) <= threshold,
            max_green: g,
            threshold,
            in_spectrum: false,
            underflow: g == 0.0 && !threshold.fits_f64(),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeVerdict {
    pub cube: LatticeCube,
    pub energy: f64,
    pub resonant: bool,
    pub non_singular: bool,
    pub min_distance: f64,
    pub max_green: f64,
    pub width: LogMagnitude,
    pub threshold: LogMagnitude,
    pub in_spectrum: bool,
    pub underflow: bool,
}

pub fn cube_verdict(op: &LocalOperator, energy: f64, m: f64, width: LogMagnitude) -> Result<CubeVerdict> {
    let ev = op.eigenvalues()?;
    let (resonant, min_distance) = is_e_resonant(&ev, energy, width);
    let ns = is_em_ns(op, energy, m);
    Ok(CubeVerdict {
        cube: op.cube().clone(),
        energy,
        resonant,
        non_singular: ns.non_singular,
        min_distance,
        max_green: ns.max_green,
        width,
        threshold: ns.threshold,
        in_spectrum: ns.in_spectrum,
        underflow: ns.underflow,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombesThomas {
    pub holds: bool,
    /// Largest `|G(x,y;E)| / (2/eta e^{-mu |x-y|})` over all pairs.
    pub worst_ratio: f64,
    pub mu: f64,
    pub eta: f64,
}

/// Checks `|G(x,y;E)| <= 2/eta e^{-mu|x-y|}` with `mu = ln(eta/4d)/2` for
/// every pair of sites, given `dist(E, spectrum) >= eta > 4d`.
pub fn combes_thomas_check(op: &LocalOperator, energy: f64, eta: f64) -> Result<CombesThomas> {
    let d = op.cube().dim() as f64;
    if eta <= 4.0 * d {
        return Err(Error::Precondition(format!("eta = {eta} must exceed 4d = {}", 4.0 * d)));
    }
    let ev = op.eigenvalues()?;
    let dist = nearest_distance(&ev, energy);
    if dist < eta {
        return Err(Error::Precondition(format!(
            "dist(E, spectrum) = {dist} is below eta = {eta}"
        )));
    }
    let mu = 0.5 * (eta / (4.0 * d)).ln();
    let cube = op.cube();
    let sites: Vec<Vec<i64>> = cube.sites().collect();
    let worst = (0..op.len())
        .into_par_iter()
        .map(|y| -> Result<f64> {
            let col = op.green_column(y, energy)?;
            Ok(col
                .iter()
                .enumerate()
                .map(|(x, gxy)| {
                    let r = max_norm_dist(&sites[x], &sites[y]) as f64;
                    (LogMagnitude::from_f64(*gxy).abs() / LogMagnitude::from_f64(2.0 / eta) * LogMagnitude::exp(mu * r))
                        .to_f64()
                })
                .fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(CombesThomas {
        holds: worst <= 1.0 + GREEN_SLACK,
        worst_ratio: worst,
        mu,
        eta,
    })
}

/// `q^{floor((L+1)/(l+1))} M`: the value an `(l,q)`-dominated function can
/// keep at the center of a radius-`L` cube when bounded by `M` on its
/// one-site enlargement.
pub fn dominated_bound(q: f64, ell: u64, l: u64, m: f64) -> f64 {
    m * q.powf(((l + 1) / (ell + 1)) as f64)
}

/// First center `x` with `B_l(x)` inside `cube` where
/// `|f(x)| > q max_{|y-x| <= l+1} |f(y)|`, or `None` when `f` is
/// `(l,q)`-dominated in `cube`. `f` is indexed by the sites of `ambient`.
pub fn is_dominated(f: &[f64], ambient: &LatticeCube, cube: &LatticeCube, ell: u64, q: f64) -> Result<Option<Vec<i64>>> {
    if f.len() != ambient.len() {
        return Err(Error::Dimension {
            expected: ambient.len(),
            got: f.len(),
        });
    }
    let grown = LatticeCube::new(cube.center().to_vec(), cube.radius() + 1);
    if !ambient.contains_cube(&grown) {
        return Err(Error::Precondition("ambient cube must contain the one-site enlargement".into()));
    }
    if ell > cube.radius() {
        return Err(Error::Precondition(format!("l = {ell} exceeds L = {}", cube.radius())));
    }
    let inner = LatticeCube::new(cube.center().to_vec(), cube.radius() - ell);
    for x in inner.sites() {
        let ball = LatticeCube::new(x.clone(), ell + 1);
        let peak = ball
            .sites()
            .map(|y| f[ambient.index_of(&y).expect("inside ambient")].abs())
            .fold(0.0, f64::max);
        if f[ambient.index_of(&x).expect("inside ambient")].abs() > q * peak {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Some overlap of danger windows could not be settled either way.
    Unresolved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goodness {
    Good,
    Bad,
    Unresolved,
}

/// Energies at which `(E,m)`-singularity is examined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergySet {
    /// Danger windows of every sub-cube, covering all of `R`.
    Windows,
    /// An explicit list, for audits.
    Grid { energies: Vec<f64> },
}

/// Two disjoint cubes both `(E,m)`-singular at one energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularPair {
    pub first: LatticeCube,
    pub second: LatticeCube,
    pub energy: f64,
    pub green: (f64, f64),
    pub threshold: LogMagnitude,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanStats {
    pub subcubes: usize,
    pub windows: usize,
    pub overlaps: usize,
    pub energies_tested: usize,
    pub unresolved: usize,
    /// Nothing was tested at all.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoubleScan {
    pub outer: LatticeCube,
    pub radius: u64,
    pub m: f64,
    pub witness: Option<SingularPair>,
    pub stats: ScanStats,
    pub plan: SamplingPlan,
    /// Sorted spectra of the sub-cubes used, in `cubes` order.
    #[serde(skip)]
    pub spectra: Vec<Vec<f64>>,
    #[serde(skip)]
    pub cubes: Vec<LatticeCube>,
}

impl DoubleScan {
    pub fn verdict(&self) -> Verdict {
        if self.witness.is_some() {
            Verdict::Fail
        } else if self.stats.unresolved > 0 {
            Verdict::Unresolved
        } else {
            Verdict::Pass
        }
    }

    pub fn goodness(&self) -> Goodness {
        match self.verdict() {
            Verdict::Pass => Goodness::Good,
            Verdict::Fail => Goodness::Bad,
            Verdict::Unresolved => Goodness::Unresolved,
        }
    }
}

struct Sub {
    op: LocalOperator,
    center: usize,
    boundary: Vec<usize>,
    threshold: LogMagnitude,
}

impl Sub {
    fn new(op: LocalOperator, m: f64) -> Self {
        let (center, boundary) = center_and_boundary(op.cube());
        let threshold = ns_threshold(op.cube().dim(), op.cube().radius(), m);
        Self {
            op,
            center,
            boundary,
            threshold,
        }
    }

    /// `(singular, max boundary Green value)`.
    fn singular_at(&self, energy: f64, slack: f64) -> (bool, f64) {
        match boundary_green(&self.op, self.center, &self.boundary, energy) {
            None => (true, f64::INFINITY),
            Some(g) => (LogMagnitude::from_f64(g) > self.threshold.scale(1.0 + slack), g),
        }
    }

    /// Sorted spectrum and the danger window radius of each eigenvalue.
    fn windows(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.op.len();
        if n == 1 {
            let rho = self.threshold.recip().to_f64();
            return Ok((vec![self.op.diagonal()[0]], vec![rho]));
        }
        let s = self.op.eigensystem()?;
        let vecs = s.vectors.as_ref().expect("eigensystem carries vectors");
        let norm = self.op.norm_bound();
        let radii = (0..n)
            .map(|i| {
                let gap = nearest_other(&s.eigenvalues, i);
                let err = if s.refined[i] {
                    0.0
                } else {
                    n as f64 * f64::EPSILON * norm / gap.max(f64::EPSILON * norm)
                };
                let at_center = vecs[(self.center, i)].abs() + err;
                let at_edge = self.boundary.iter().map(|&y| vecs[(y, i)].abs()).fold(0.0, f64::max) + err;
                let w = LogMagnitude::from_f64(at_center) * LogMagnitude::from_f64(at_edge);
                (w.scale(n as f64 * (1.0 + 1e-6)) / self.threshold).to_f64()
            })
            .collect();
        Ok((s.eigenvalues, radii))
    }
}

fn nearest_other(sorted: &[f64], i: usize) -> f64 {
    let left = if i > 0 { sorted[i] - sorted[i - 1] } else { f64::INFINITY };
    let right = sorted.get(i + 1).map_or(f64::INFINITY, |r| r - sorted[i]);
    left.min(right)
}

fn select_subcubes(outer: &LatticeCube, r: u64, budget: Option<usize>) -> Result<(Vec<LatticeCube>, SamplingPlan)> {
    if outer.radius() < r {
        return Err(Error::NotProperSubset);
    }
    let side = (2 * (outer.radius() - r) + 1) as u128;
    let total = side.checked_pow(outer.dim() as u32).unwrap_or(u128::MAX);
    let total = usize::try_from(total).unwrap_or(usize::MAX);
    let stride = match budget {
        Some(b) if total > b => total.div_ceil(b.max(1)),
        Some(_) => 1,
        None if total > MAX_EXHAUSTIVE_SUBCUBES => {
            return Err(Error::SizeCap {
                sites: total,
                cap: MAX_EXHAUSTIVE_SUBCUBES,
            })
        }
        None => 1,
    };
    let all = outer.subcubes(r);
    let cubes: Vec<LatticeCube> = all.into_iter().step_by(stride).collect();
    let plan = SamplingPlan {
        exhaustive: stride == 1,
        stride,
        cubes_used: cubes.len(),
        cubes_total: total,
    };
    Ok((cubes, plan))
}

/// Searches the radius-`r` sub-cubes of `field`'s cube for two disjoint ones
/// that are `(E,m)`-singular at a common energy.
pub fn double_singularity_scan(
    field: &PotentialField,
    r: u64,
    m: f64,
    energies: &EnergySet,
    budget: Option<usize>,
) -> Result<DoubleScan> {
    let outer = field.cube().clone();
    let (cubes, plan) = select_subcubes(&outer, r, budget)?;
    let subs: Vec<Sub> = cubes
        .par_iter()
        .map(|c| Ok(Sub::new(field.operator(c)?, m)))
        .collect::<Result<_>>()?;
    let mut stats = ScanStats {
        subcubes: subs.len(),
        ..ScanStats::default()
    };
    let (spectra, witness) = match energies {
        EnergySet::Windows => {
            let per_cube: Vec<(Vec<f64>, Vec<f64>)> = subs.par_iter().map(Sub::windows).collect::<Result<_>>()?;
            let witness = scan_windows(&subs, &per_cube, &mut stats);
            (per_cube.into_iter().map(|(ev, _)| ev).collect(), witness)
        }
        EnergySet::Grid { energies } => {
            stats.degenerate = energies.is_empty();
            let spectra = subs.par_iter().map(|s| s.op.eigenvalues()).collect::<Result<_>>()?;
            (spectra, scan_grid(&subs, energies, &mut stats))
        }
    };
    Ok(DoubleScan {
        outer,
        radius: r,
        m,
        witness,
        stats,
        plan,
        spectra,
        cubes,
    })
}

fn pair_at(subs: &[Sub], a: usize, b: usize, energy: f64) -> Option<SingularPair> {
    let (sa, ga) = subs[a].singular_at(energy, 0.0);
    if !sa {
        return None;
    }
    let (sb, gb) = subs[b].singular_at(energy, 0.0);
    sb.then(|| SingularPair {
        first: subs[a].op.cube().clone(),
        second: subs[b].op.cube().clone(),
        energy,
        green: (ga, gb),
        threshold: subs[a].threshold,
    })
}

fn scan_windows(subs: &[Sub], per_cube: &[(Vec<f64>, Vec<f64>)], stats: &mut ScanStats) -> Option<SingularPair> {
    // (lo, hi, lambda, cube)
    let mut win: Vec<(f64, f64, f64, usize)> = per_cube
        .iter()
        .enumerate()
        .flat_map(|(c, (ev, rho))| ev.iter().zip(rho).map(move |(&l, &r)| (l - r, l + r, l, c)))
        .filter(|w| w.0 <= w.1)
        .collect();
    win.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.3.cmp(&b.3)));
    stats.windows = win.len();
    let mut overlaps = Vec::new();
    for (i, a) in win.iter().enumerate() {
        for b in &win[i + 1..] {
            // closed windows: a radius below one ulp still marks lambda itself
            if b.0 > a.1 {
                break;
            }
            if subs[a.3].op.cube().is_disjoint(subs[b.3].op.cube()) {
                overlaps.push((*a, *b));
            }
        }
    }
    stats.overlaps = overlaps.len();
    if overlaps.len() > MAX_OVERLAPS {
        stats.unresolved += overlaps.len() - MAX_OVERLAPS;
        overlaps.truncate(MAX_OVERLAPS);
    }
    let outcomes: Vec<(usize, Option<SingularPair>)> = overlaps
        .par_iter()
        .map(|(a, b)| {
            let probes = overlap_probes(a, b);
            let found = probes.iter().find_map(|&e| pair_at(subs, a.3, b.3, e));
            (probes.len(), found)
        })
        .collect();
    let mut witness = None;
    for (n, found) in outcomes {
        stats.energies_tested += n;
        match found {
            Some(p) if witness.is_none() => witness = Some(p),
            Some(_) => {}
            None => stats.unresolved += 1,
        }
    }
    witness
}

/// Eigenvalues inside the overlap plus an even grid across it.
fn overlap_probes(a: &(f64, f64, f64, usize), b: &(f64, f64, f64, usize)) -> Vec<f64> {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let mut out: Vec<f64> = [a.2, b.2].into_iter().filter(|e| *e >= lo && *e <= hi).collect();
    if lo == hi {
        out.push(lo);
        out.dedup();
        return out;
    }
    let (glo, ghi) = if lo.is_finite() && hi.is_finite() {
        (lo, hi)
    } else {
        let c = 0.5 * (a.2 + b.2);
        let span = (a.2 - b.2).abs().max(1.0);
        (lo.max(c - 4.0 * span), hi.min(c + 4.0 * span))
    };
    out.extend((1..8).map(|k| glo + (ghi - glo) * f64::from(k) / 8.0));
    out
}

fn scan_grid(subs: &[Sub], energies: &[f64], stats: &mut ScanStats) -> Option<SingularPair> {
    stats.energies_tested = energies.len();
    energies.iter().find_map(|&e| {
        let singular: Vec<(usize, f64)> = subs
            .par_iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let (hit, g) = s.singular_at(e, 0.0);
                hit.then_some((i, g))
            })
            .collect();
        singular.iter().enumerate().find_map(|(k, &(a, ga))| {
            singular[k + 1..]
                .iter()
                .find(|&&(b, _)| subs[a].op.cube().is_disjoint(subs[b].op.cube()))
                .map(|&(b, gb)| SingularPair {
                    first: subs[a].op.cube().clone(),
                    second: subs[b].op.cube().clone(),
                    energy: e,
                    green: (ga, gb),
                    threshold: subs[a].threshold,
                })
        })
    })
}

/// m-good / m-bad verdict for a cube from its radius-`r` sub-cubes.
pub fn classify_good_bad(field: &PotentialField, super_cube: &LatticeCube, r: u64, m: f64, energies: &EnergySet) -> Result<DoubleScan> {
    double_singularity_scan(&field.restrict(super_cube)?, r, m, energies, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProximityCheck {
    /// `min |gV(x) - gV(y)|` over distinct sites.
    pub separation: f64,
    pub pair: (Vec<i64>, Vec<i64>),
    /// No two sites come within `2 width` of one energy, i.e. `separation >= 4 width`.
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonantPairCheck {
    pub distance: f64,
    pub pair: (LatticeCube, LatticeCube),
    /// No disjoint pair is resonant at one energy: `distance >= 2 width`.
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsenessCertificate {
    pub j: i32,
    pub super_cube: LatticeCube,
    pub sub_radius: u64,
    pub m: f64,
    pub width: LogMagnitude,
    pub energy_set: EnergySet,
    pub verdict: Verdict,
    pub witness: Option<SingularPair>,
    pub stats: ScanStats,
    pub plan: SamplingPlan,
    pub proximity: Option<ProximityCheck>,
    pub resonant_pair: Option<ResonantPairCheck>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsenessOptions {
    /// Resonance width; `g delta_j` when absent.
    pub width: Option<LogMagnitude>,
    pub energies: EnergySet,
    /// Sub-cube budget; beyond it sub-cubes are subsampled with a stride.
    pub budget: Option<usize>,
}

impl Default for SparsenessOptions {
    fn default() -> Self {
        Self {
            width: None,
            energies: EnergySet::Windows,
            budget: None,
        }
    }
}

/// `SS(L_j)` on the cube tabulated by `field`, normally `B_{L_j^4}(u)`.
pub fn verify_sparseness(
    j: i32,
    field: &PotentialField,
    params: &ModelParams,
    schedule: &ScaleSchedule,
    opts: &SparsenessOptions,
) -> Result<SparsenessCertificate> {
    let r = if j < 0 { 0 } else { schedule.length(j)? };
    let width = opts.width.unwrap_or_else(|| schedule.width(j, params));
    let scan = double_singularity_scan(field, r, params.m, &opts.energies, opts.budget)?;
    let (proximity, resonant_pair) = if r == 0 {
        (proximity_check(field, width)?, None)
    } else {
        (None, resonant_pair_check(&scan, width)?)
    };
    Ok(SparsenessCertificate {
        j,
        super_cube: field.cube().clone(),
        sub_radius: r,
        m: params.m,
        width,
        energy_set: opts.energies.clone(),
        verdict: scan.verdict(),
        witness: scan.witness,
        stats: scan.stats,
        plan: scan.plan,
        proximity,
        resonant_pair,
    })
}

fn proximity_check(field: &PotentialField, width: LogMagnitude) -> Result<Option<ProximityCheck>> {
    if field.diagonal().len() < 2 {
        return Ok(None);
    }
    let (sep, (a, b)) = crate::hull::value_separation(field.diagonal())?;
    Ok(Some(ProximityCheck {
        separation: sep,
        pair: (field.cube().site(a), field.cube().site(b)),
        pass: LogMagnitude::from_f64(sep) >= width.scale(4.0),
    }))
}

fn resonant_pair_check(scan: &DoubleScan, width: LogMagnitude) -> Result<Option<ResonantPairCheck>> {
    let any_disjoint = scan
        .cubes
        .first()
        .is_some_and(|c| scan.cubes.iter().any(|o| c.is_disjoint(o)));
    if !any_disjoint {
        return Ok(None);
    }
    let pd = min_pair_spectra_distance(&scan.cubes, &scan.spectra, None)?;
    Ok(Some(ResonantPairCheck {
        distance: pd.value,
        pass: LogMagnitude::from_f64(pd.value) >= width.scale(2.0),
        pair: pd.pair,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub energy: f64,
    pub distance: f64,
    pub max_green: f64,
    pub threshold: LogMagnitude,
}

/// Direct test of "m-good and E-non-resonant implies (E,m)-non-singular" on
/// one cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicationCheck {
    pub cube: LatticeCube,
    pub goodness: Goodness,
    /// Every danger window of the cube lies inside its resonant zone, so the
    /// implication holds at every energy, not only the probed ones.
    pub certified: bool,
    pub energies_checked: usize,
    pub counterexamples: Vec<Counterexample>,
}

/// Checks the implication on `cube` (radius `L_{j+1}`) with sub-cubes of
/// radius `r = L_j`.
pub fn nr_good_check(field: &PotentialField, cube: &LatticeCube, r: u64, m: f64, width: LogMagnitude) -> Result<ImplicationCheck> {
    let goodness = classify_good_bad(field, cube, r, m, &EnergySet::Windows)?.goodness();
    if goodness != Goodness::Good {
        return Ok(ImplicationCheck {
            cube: cube.clone(),
            goodness,
            certified: false,
            energies_checked: 0,
            counterexamples: Vec::new(),
        });
    }
    let sub = Sub::new(field.operator(cube)?, m);
    let (ev, rho) = sub.windows()?;
    let certified = rho.iter().all(|&p| LogMagnitude::from_f64(p) <= width);
    let w = width.to_f64();
    let mut probes = Vec::new();
    for (i, (&l, &p)) in ev.iter().zip(&rho).enumerate() {
        let edge = w * (1.0 + GREEN_SLACK);
        probes.extend([l - edge, l + edge]);
        if let Some(next) = ev.get(i + 1) {
            probes.push(0.5 * (l + next));
        }
        if p > w && p.is_finite() {
            probes.extend((1..=8).flat_map(|k| {
                let off = w + (p - w) * f64::from(k) / 8.0;
                [l - off, l + off]
            }));
        }
    }
    let nr: Vec<f64> = probes
        .into_iter()
        .filter(|&e| !is_e_resonant(&ev, e, width).0)
        .collect();
    let counterexamples = nr
        .par_iter()
        .filter_map(|&e| {
            let (s, g) = sub.singular_at(e, GREEN_SLACK);
            s.then(|| Counterexample {
                energy: e,
                distance: nearest_distance(&ev, e),
                max_green: g,
                threshold: sub.threshold,
            })
        })
        .collect();
    Ok(ImplicationCheck {
        cube: cube.clone(),
        goodness,
        certified,
        energies_checked: nr.len(),
        counterexamples,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InductionOptions {
    pub j_max: i32,
    /// Widths for `j = -1, 0, ..., j_max`; `g delta_j` where absent.
    pub widths: Vec<Option<LogMagnitude>>,
    /// Cubes of radius `L_{j+1}` on which the non-resonance implication is
    /// checked at each scale, laid side by side along the first axis.
    pub probe_cubes: usize,
    pub budget: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub j: i32,
    pub length: u64,
    pub certificate: SparsenessCertificate,
    pub probes: Vec<ImplicationCheck>,
    /// For a pair found at this scale while the previous scale passed:
    /// whether each cube of the pair is resonant or bad at the pair's energy.
    pub witness_explained: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionReport {
    pub m: f64,
    pub rows: Vec<ScaleRow>,
}

impl InductionReport {
    pub fn counterexamples(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| &r.probes)
            .map(|l| l.counterexamples.len())
            .sum()
    }
}

/// Runs the sparseness certificate for `j = -1..=j_max` around the center of
/// `field`, which must cover `B_{L_{j_max}^4}`.
pub fn scale_induction_report(
    field: &PotentialField,
    params: &ModelParams,
    schedule: &ScaleSchedule,
    opts: &InductionOptions,
) -> Result<InductionReport> {
    if opts.j_max < 0 {
        return Err(Error::Precondition("j_max must be non-negative".into()));
    }
    let u = field.cube().center().to_vec();
    let mut rows: Vec<ScaleRow> = Vec::new();
    for j in -1..=opts.j_max {
        let lj = if j < 0 { 0 } else { schedule.length(j)? };
        let big = schedule.length(j.max(0))?.checked_pow(4).ok_or(Error::ScaleOverflow { j })?;
        let region = field.restrict(&LatticeCube::new(u.clone(), big))?;
        let width = opts
            .widths
            .get((j + 1) as usize)
            .copied()
            .flatten()
            .unwrap_or_else(|| schedule.width(j, params));
        let sopts = SparsenessOptions {
            width: Some(width),
            energies: EnergySet::Windows,
            budget: opts.budget,
        };
        let certificate = verify_sparseness(j, &region, params, schedule, &sopts)?;
        let probes = if j >= 0 {
            let next = schedule.length(j + 1)?;
            probe_cubes(&u, next, big, opts.probe_cubes)
                .iter()
                .map(|c| nr_good_check(&region, c, lj, params.m, width))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let witness_explained = match (rows.last(), &certificate.witness) {
            (Some(prev), Some(pair)) if prev.certificate.verdict == Verdict::Pass => {
                Some(explained(&region, pair, prev.length, params.m, width)?)
            }
            _ => None,
        };
        rows.push(ScaleRow {
            j,
            length: lj,
            certificate,
            probes,
            witness_explained,
        });
    }
    Ok(InductionReport { m: params.m, rows })
}

fn probe_cubes(u: &[i64], radius: u64, room: u64, count: usize) -> Vec<LatticeCube> {
    let step = (2 * radius + 1) as i64;
    let reach = room.saturating_sub(radius) as i64;
    let mut out = Vec::new();
    for k in 0..count as i64 {
        // 0, +1, -1, +2, -2, ...
        let off = if k % 2 == 1 { (k + 1) / 2 } else { -(k / 2) } * step;
        if off.abs() > reach {
            break;
        }
        let mut c = u.to_vec();
        c[0] += off;
        out.push(LatticeCube::new(c, radius));
    }
    out
}

fn explained(field: &PotentialField, pair: &SingularPair, prev: u64, m: f64, width: LogMagnitude) -> Result<bool> {
    for cube in [&pair.first, &pair.second] {
        let ev = field.operator(cube)?.eigenvalues()?;
        if is_e_resonant(&ev, pair.energy, width).0 {
            continue;
        }
        if classify_good_bad(field, cube, prev, m, &EnergySet::Windows)?.goodness() != Goodness::Good {
            continue;
        }
        return Ok(false);
    }
    Ok(true)
}
