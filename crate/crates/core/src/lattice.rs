//! Lattice cubes, Dirichlet restrictions `H_Lambda = Delta + gV`, their
//! eigensystems and resolvents, and distances between local spectra.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hull::HaarshPotential;
use crate::torus::TorusPoint;

/// Largest operator the dense solvers accept by default.
pub const DEFAULT_SIZE_CAP: usize = 8192;

pub fn max_norm_dist(x: &[i64], y: &[i64]) -> u64 {
    x.iter().zip(y).map(|(a, b)| a.abs_diff(*b)).max().unwrap_or(0)
}

/// The max-norm cube `{x : |x - u| <= L}`. Sites are indexed
/// lexicographically with the first coordinate most significant.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticeCube {
    center: Vec<i64>,
    radius: u64,
}

impl LatticeCube {
    pub fn new(center: Vec<i64>, radius: u64) -> Self {
        assert!(!center.is_empty(), "cube needs at least one dimension");
        Self { center, radius }
    }

    pub fn centered(d: usize, radius: u64) -> Self {
        Self::new(vec![0; d], radius)
    }

    pub fn center(&self) -> &[i64] {
        &self.center
    }

    pub fn radius(&self) -> u64 {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn side(&self) -> usize {
        2 * self.radius as usize + 1
    }

    pub fn len(&self) -> usize {
        self.side().pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn site(&self, mut i: usize) -> Vec<i64> {
        let side = self.side();
        let r = self.radius as i64;
        let mut x = vec![0i64; self.dim()];
        for (k, c) in x.iter_mut().enumerate().rev() {
            *c = self.center[k] - r + (i % side) as i64;
            i /= side;
        }
        x
    }

    pub fn index_of(&self, x: &[i64]) -> Option<usize> {
        if x.len() != self.dim() || !self.contains(x) {
            return None;
        }
        let side = self.side();
        let r = self.radius as i64;
        Some(
            x.iter()
                .zip(&self.center)
                .fold(0usize, |acc, (&xk, &uk)| acc * side + (xk - uk + r) as usize),
        )
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        max_norm_dist(x, &self.center) <= self.radius
    }

    pub fn contains_cube(&self, other: &Self) -> bool {
        max_norm_dist(&self.center, &other.center) + other.radius <= self.radius
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        max_norm_dist(&self.center, &other.center) > self.radius + other.radius
    }

    pub fn sites(&self) -> impl ExactSizeIterator<Item = Vec<i64>> + '_ {
        (0..self.len()).map(move |i| self.site(i))
    }

    /// Max-norm distance from a site to the center.
    pub fn depth(&self, x: &[i64]) -> u64 {
        max_norm_dist(x, &self.center)
    }

    /// All cubes of radius `r` contained in `self`, in site order of their centers.
    pub fn subcubes(&self, r: u64) -> Vec<LatticeCube> {
        if r > self.radius {
            return Vec::new();
        }
        let inner = LatticeCube::new(self.center.clone(), self.radius - r);
        inner.sites().map(|c| LatticeCube::new(c, r)).collect()
    }

    /// Index pairs of nearest neighbours inside the cube, each listed once.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let side = self.side();
        let d = self.dim();
        let mut out = Vec::with_capacity(self.len() * d);
        for i in 0..self.len() {
            let mut stride = 1usize;
            let mut rest = i;
            for _ in 0..d {
                if rest % side + 1 < side {
                    out.push((i, i + stride));
                }
                rest /= side;
                stride *= side;
            }
        }
        out
    }

    /// Indices of sites with a neighbour outside the cube.
    pub fn inner_boundary(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.depth(&self.site(i)) == self.radius)
            .collect()
    }

    /// Sites at max-norm distance more than `margin` from the complement.
    pub fn interior(&self, margin: u64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.radius - self.depth(&self.site(i)) > margin)
            .collect()
    }
}

fn neighbours(x: &[i64]) -> impl Iterator<Item = Vec<i64>> + '_ {
    (0..x.len()).flat_map(move |k| {
        [-1i64, 1].into_iter().map(move |s| {
            let mut y = x.to_vec();
            y[k] += s;
            y
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    /// Sites of the cube with a neighbour outside it.
    pub inner: Vec<Vec<i64>>,
    /// Sites outside the cube with a neighbour inside it.
    pub outer: Vec<Vec<i64>>,
    /// Edges `(inside, outside)` crossing the boundary.
    pub edges: Vec<(Vec<i64>, Vec<i64>)>,
}

/// Inner, outer and edge boundaries of `cube` relative to `ambient`
/// (the whole lattice when `None`).
pub fn boundaries(cube: &LatticeCube, ambient: Option<&LatticeCube>) -> Result<BoundarySet> {
    if let Some(amb) = ambient {
        if amb.dim() != cube.dim() {
            return Err(Error::Dimension {
                expected: amb.dim(),
                got: cube.dim(),
            });
        }
        if !amb.contains_cube(cube) || amb == cube {
            return Err(Error::NotProperSubset);
        }
    }
    let in_ambient = |y: &[i64]| ambient.is_none_or(|a| a.contains(y));
    let mut set = BoundarySet {
        inner: Vec::new(),
        outer: Vec::new(),
        edges: Vec::new(),
    };
    for x in cube.sites() {
        let mut on_boundary = false;
        for y in neighbours(&x) {
            if !cube.contains(&y) && in_ambient(&y) {
                on_boundary = true;
                set.edges.push((x.clone(), y.clone()));
                set.outer.push(y);
            }
        }
        if on_boundary {
            set.inner.push(x);
        }
    }
    set.outer.sort();
    set.outer.dedup();
    Ok(set)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorMeta {
    pub g: f64,
    pub truncation: Option<u32>,
    pub theta_seed: Option<u64>,
}

/// `H_Lambda = Delta + gV` restricted to a cube with Dirichlet conditions;
/// `Delta` is the bare adjacency operator.
#[derive(Clone, Debug)]
pub struct LocalOperator {
    cube: LatticeCube,
    diagonal: Vec<f64>,
    edges: Vec<(usize, usize)>,
    meta: OperatorMeta,
}

impl LocalOperator {
    /// `potential[i]` is `V` at `cube.site(i)`; the diagonal is `g V`.
    pub fn assemble(cube: LatticeCube, g: f64, potential: &[f64]) -> Result<Self> {
        if potential.len() != cube.len() {
            return Err(Error::Dimension {
                expected: cube.len(),
                got: potential.len(),
            });
        }
        if g < 0.0 {
            return Err(Error::Precondition(format!("coupling g = {g} must be non-negative")));
        }
        Ok(Self {
            edges: cube.edges(),
            diagonal: potential.iter().map(|v| g * v).collect(),
            cube,
            meta: OperatorMeta {
                g,
                ..OperatorMeta::default()
            },
        })
    }

    pub fn from_fn(cube: LatticeCube, g: f64, v: impl Fn(&[i64]) -> f64) -> Result<Self> {
        let values: Vec<f64> = cube.sites().map(|x| v(&x)).collect();
        Self::assemble(cube, g, &values)
    }

    pub fn from_potential(cube: LatticeCube, pot: &HaarshPotential, omega: &TorusPoint, g: f64) -> Result<Self> {
        if pot.lattice_dim() != cube.dim() {
            return Err(Error::Dimension {
                expected: pot.lattice_dim(),
                got: cube.dim(),
            });
        }
        let mut op = Self::from_fn(cube, g, |x| pot.value(omega, x))?;
        op.meta.truncation = Some(pot.truncation);
        op.meta.theta_seed = Some(pot.theta.seed());
        Ok(op)
    }

    /// Same cube, diagonal taken from `values` directly (already scaled).
    pub fn with_diagonal(cube: LatticeCube, diagonal: Vec<f64>) -> Result<Self> {
        let mut op = Self::assemble(cube, 1.0, &diagonal)?;
        op.meta.g = f64::NAN;
        Ok(op)
    }

    pub fn cube(&self) -> &LatticeCube {
        &self.cube
    }

    pub fn len(&self) -> usize {
        self.diagonal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diagonal.is_empty()
    }

    /// `g V(x)` at each site.
    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn meta(&self) -> &OperatorMeta {
        &self.meta
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::from_diagonal(&DVector::from_column_slice(&self.diagonal));
        for &(i, j) in &self.edges {
            debug_assert!(i < n && j < n);
            m[(i, j)] = 1.0;
            m[(j, i)] = 1.0;
        }
        m
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        apply_graph(&self.diagonal, &self.edges, v)
    }

    /// Upper bound on the operator norm: `max |gV| + 2d`.
    pub fn norm_bound(&self) -> f64 {
        self.diagonal.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 2.0 * self.cube.dim() as f64
    }

    fn check_cap(&self, cap: usize) -> Result<()> {
        if self.len() > cap {
            return Err(Error::SizeCap {
                sites: self.len(),
                cap,
            });
        }
        Ok(())
    }

    /// Sorted eigenvalues only.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        self.check_cap(DEFAULT_SIZE_CAP)?;
        if self.len() == 1 {
            return Ok(vec![self.diagonal[0]]);
        }
        let mut ev: Vec<f64> = self.matrix().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }

    pub fn eigensystem(&self) -> Result<SpectrumReport> {
        self.eigensystem_capped(DEFAULT_SIZE_CAP)
    }

    pub fn eigensystem_capped(&self, cap: usize) -> Result<SpectrumReport> {
        self.check_cap(cap)?;
        graph_eigensystem(&self.diagonal, &self.edges)
    }

    /// LU factorization of `H - E` for repeated resolvent queries.
    pub fn green_solver(&self, energy: f64) -> Result<GreenSolver> {
        self.check_cap(DEFAULT_SIZE_CAP)?;
        let mut m = self.matrix();
        for i in 0..self.len() {
            m[(i, i)] -= energy;
        }
        let lu = m.lu();
        let pivots: Vec<f64> = (0..self.len()).map(|i| lu.u()[(i, i)].abs()).collect();
        let (lo, hi) = pivots
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        if lo == 0.0 || lo <= f64::EPSILON * hi {
            return Err(Error::Singular { energy });
        }
        Ok(GreenSolver {
            lu,
            energy,
            condition: hi / lo,
        })
    }

    /// `G(., y; E)` as a vector over the cube. On a one-dimensional cube the
    /// column comes from continued fractions swept in from both ends, which
    /// keeps relative accuracy in exponentially small entries; otherwise it
    /// is an LU solve.
    pub fn green_column(&self, y: usize, energy: f64) -> Result<Vec<f64>> {
        if is_path(self.len(), &self.edges) {
            self.check_cap(DEFAULT_SIZE_CAP)?;
            return path_green_column(&self.diagonal, y, energy, self.norm_bound());
        }
        Ok(self.green_solver(energy)?.column(y).iter().copied().collect())
    }

    /// `G(x, y; E) = (H - E)^{-1}(x, y)`.
    pub fn green(&self, x: &[i64], y: &[i64], energy: f64) -> Result<GreenValue> {
        let xi = self.cube.index_of(x).ok_or_else(|| Error::SiteOutsideCube(x.to_vec()))?;
        let yi = self.cube.index_of(y).ok_or_else(|| Error::SiteOutsideCube(y.to_vec()))?;
        let solver = self.green_solver(energy)?;
        let col = solver.column(yi);
        Ok(GreenValue {
            value: col[xi],
            condition: solver.condition,
        })
    }
}

/// Whether `edges` is exactly the chain `0-1-...-(n-1)` in order.
fn is_path(n: usize, edges: &[(usize, usize)]) -> bool {
    n >= 2 && edges.len() == n - 1 && edges.iter().enumerate().all(|(k, &e)| e == (k, k + 1))
}

/// Ratios `psi(k)/psi(k+1)` left of `c` and `psi(k)/psi(k-1)` right of it for
/// a solution of `(diag - z) psi = 0` away from `c`.
fn path_ratios(diag: &[f64], c: usize, z: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = diag.len();
    let mut left = vec![0.0; n];
    let mut prev = 0.0;
    for k in 0..c {
        let den = diag[k] - z + prev;
        if den == 0.0 {
            return None;
        }
        prev = -1.0 / den;
        left[k] = prev;
    }
    let mut right = vec![0.0; n];
    let mut prev = 0.0;
    for k in (c + 1..n).rev() {
        let den = diag[k] - z + prev;
        if den == 0.0 {
            return None;
        }
        prev = -1.0 / den;
        right[k] = prev;
    }
    Some((left, right))
}

fn unfold_from(c: usize, peak: f64, left: &[f64], right: &[f64]) -> Vec<f64> {
    let n = left.len();
    let mut v = vec![0.0; n];
    v[c] = peak;
    for k in (0..c).rev() {
        v[k] = left[k] * v[k + 1];
    }
    for k in c + 1..n {
        v[k] = right[k] * v[k - 1];
    }
    v
}

fn path_green_column(diag: &[f64], y: usize, energy: f64, norm: f64) -> Result<Vec<f64>> {
    let (left, right) = path_ratios(diag, y, energy).ok_or(Error::Singular { energy })?;
    let l = if y > 0 { left[y - 1] } else { 0.0 };
    let r = right.get(y + 1).copied().unwrap_or(0.0);
    let den = diag[y] - energy + l + r;
    if den.abs() <= f64::EPSILON * norm {
        return Err(Error::Singular { energy });
    }
    Ok(unfold_from(y, 1.0 / den, &left, &right))
}

fn neighbour_lists(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut nb = vec![Vec::new(); n];
    for &(i, j) in edges {
        nb[i].push(j);
        nb[j].push(i);
    }
    nb
}

fn apply_graph(diag: &[f64], edges: &[(usize, usize)], v: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = diag.iter().zip(v).map(|(d, x)| d * x).collect();
    for &(i, j) in edges {
        out[i] += v[j];
        out[j] += v[i];
    }
    out
}

/// Full eigensystem of `diag + adjacency(edges)`, eigenvalues ascending and
/// each eigenvector signed so that its largest entry is positive.
pub fn graph_eigensystem(diag: &[f64], edges: &[(usize, usize)]) -> Result<SpectrumReport> {
    let n = diag.len();
    let mut m = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
    for &(i, j) in edges {
        m[(i, j)] = 1.0;
        m[(j, i)] = 1.0;
    }
    let eig = nalgebra::linalg::SymmetricEigen::try_new(m, f64::EPSILON, 0).ok_or(Error::NonConvergence {
        max_residual: f64::NAN,
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let nb = neighbour_lists(n, edges);
    let path = is_path(n, edges);
    let mut vectors = DMatrix::zeros(n, n);
    let mut residuals = Vec::with_capacity(n);
    let mut refined_flags = Vec::with_capacity(n);
    for (col, &k) in order.iter().enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let refined = if path {
            refine_path_eigenvector(diag, eigenvalues[col], &v)
        } else {
            refine_eigenvector(diag, &nb, eigenvalues[col], &v)
        };
        refined_flags.push(refined.is_some() || n == 1);
        if let Some(r) = refined {
            v = r;
        }
        fix_sign(&mut v);
        let hv = apply_graph(diag, edges, &v);
        residuals.push(
            hv.iter()
                .zip(&v)
                .map(|(a, b)| (a - eigenvalues[col] * b).powi(2))
                .sum::<f64>()
                .sqrt(),
        );
        vectors.set_column(col, &DVector::from_vec(v));
    }
    let worst = residuals.iter().fold(0.0f64, |m, &r| m.max(r));
    let max_deg = nb.iter().map(Vec::len).max().unwrap_or(0) as f64;
    let norm = diag.iter().fold(0.0f64, |m, v| m.max(v.abs())) + max_deg;
    if worst > 1e-10 * norm.max(1.0) {
        return Err(Error::NonConvergence { max_residual: worst });
    }
    Ok(SpectrumReport {
        eigenvalues,
        vectors: Some(vectors),
        residuals,
        refined: refined_flags,
    })
}

/// Largest-magnitude entry made positive.
fn fix_sign(v: &mut [f64]) {
    let (mut best, mut idx) = (0.0f64, 0usize);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Recompute an eigenvector of a strongly diagonal operator with
/// componentwise accuracy.
///
/// The dense solver gets small entries right only up to `eps * |H|`. When
/// every off-center diagonal entry is far from `lambda`, pinning `psi(c) = 1`
/// at the peak turns the eigen-equation into a contraction that is iterated
/// to a fixed point; tails then carry relative rather than absolute error.
fn refine_eigenvector(diag: &[f64], nb: &[Vec<usize>], lambda: f64, dense: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    if n < 2 {
        return None;
    }
    let c = (0..n).max_by(|&a, &b| dense[a].abs().total_cmp(&dense[b].abs()))?;
    let max_deg = nb.iter().map(Vec::len).max().unwrap_or(0) as f64;
    let min_gap = (0..n)
        .filter(|&y| y != c)
        .map(|y| (diag[y] - lambda).abs())
        .fold(f64::INFINITY, f64::min);
    if min_gap <= 1.5 * max_deg {
        return None;
    }
    let mut z = vec![0.0; n];
    z[c] = 1.0;
    let mut next = z.clone();
    for _ in 0..500 {
        let mut delta = 0.0f64;
        for y in (0..n).filter(|&y| y != c) {
            let s: f64 = nb[y].iter().map(|&w| z[w]).sum();
            let v = -s / (diag[y] - lambda);
            if v != z[y] {
                let scale = v.abs().max(z[y].abs());
                delta = delta.max((v - z[y]).abs() / scale);
            }
            next[y] = v;
        }
        std::mem::swap(&mut z, &mut next);
        next[c] = 1.0;
        if delta <= 4.0 * f64::EPSILON {
            break;
        }
    }
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sign = dense[c].signum();
    z.iter_mut().for_each(|x| *x *= sign / norm);
    let drift = z.iter().zip(dense).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    (drift <= 1e-8).then_some(z)
}

/// Chain version of [`refine_eigenvector`]: the eigen-equation is swept in
/// from both ends as continued fractions and unfolded from the peak. This
/// works even when other sites are close to resonance, but a second peak of
/// comparable size breaks it and the dense vector is kept.
fn refine_path_eigenvector(diag: &[f64], lambda: f64, dense: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let c = (0..n).max_by(|&a, &b| dense[a].abs().total_cmp(&dense[b].abs()))?;
    let (left, right) = path_ratios(diag, c, lambda)?;
    let mut z = unfold_from(c, 1.0, &left, &right);
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return None;
    }
    let sign = dense[c].signum();
    z.iter_mut().for_each(|x| *x *= sign / norm);
    let drift = z.iter().zip(dense).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    (drift <= 1e-8).then_some(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenValue {
    pub value: f64,
    /// Ratio of the largest to the smallest LU pivot of `H - E`.
    pub condition: f64,
}

pub struct GreenSolver {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    energy: f64,
    condition: f64,
}

impl GreenSolver {
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// `G(., y; E)` as a vector over the cube.
    pub fn column(&self, y: usize) -> DVector<f64> {
        let mut e = DVector::zeros(self.lu.l().nrows());
        e[y] = 1.0;
        self.lu.solve(&e).expect("pivots checked at factorization")
    }
}

/// Eigenvalues sorted ascending with matching orthonormal eigenvectors in
/// the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    pub vectors: Option<DMatrix<f64>>,
    pub residuals: Vec<f64>,
    /// Per vector: whether its small entries carry relative accuracy.
    pub refined: Vec<bool>,
}

impl SpectrumReport {
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>) -> Self {
        eigenvalues.sort_by(f64::total_cmp);
        Self {
            residuals: vec![0.0; eigenvalues.len()],
            refined: Vec::new(),
            eigenvalues,
            vectors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn vector(&self, i: usize) -> Option<Vec<f64>> {
        self.vectors.as_ref().map(|v| v.column(i).iter().copied().collect())
    }

    /// `sum_i psi_i(x) psi_i(y) / (lambda_i - E)`.
    pub fn green_spectral(&self, x: usize, y: usize, energy: f64) -> Option<f64> {
        let v = self.vectors.as_ref()?;
        Some(
            self.eigenvalues
                .iter()
                .enumerate()
                .map(|(i, &l)| v[(x, i)] * v[(y, i)] / (l - energy))
                .sum(),
        )
    }

    pub fn to_json(&self, with_vectors: bool, meta: &OperatorMeta) -> serde_json::Value {
        let vectors = self.vectors.as_ref().filter(|_| with_vectors).map(|v| {
            (0..v.ncols())
                .map(|c| v.column(c).iter().copied().collect::<Vec<f64>>())
                .collect::<Vec<_>>()
        });
        serde_json::json!({
            "eigenvalues": self.eigenvalues,
            "residuals": self.residuals,
            "eigenvectors": vectors,
            "meta": meta,
        })
    }
}

/// Smallest gap in a spectrum.
pub fn spectral_separation(eigenvalues: &[f64]) -> Result<f64> {
    if eigenvalues.len() < 2 {
        return Err(Error::TooFew {
            need: 2,
            got: eigenvalues.len(),
        });
    }
    let mut ev = eigenvalues.to_vec();
    ev.sort_by(f64::total_cmp);
    Ok(ev.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min))
}

/// `min |E - E'|` over two sorted spectra, by a merge scan.
pub fn spectra_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::TooFew { need: 1, got: 0 });
    }
    let (mut i, mut j) = (0, 0);
    let mut best = f64::INFINITY;
    while i < a.len() && j < b.len() {
        best = best.min((a[i] - b[j]).abs());
        if a[i] < b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub exhaustive: bool,
    pub stride: usize,
    pub cubes_used: usize,
    pub cubes_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub value: f64,
    pub pair: (LatticeCube, LatticeCube),
    pub energies: (f64, f64),
    pub plan: SamplingPlan,
}

/// Number of unordered disjoint pairs among `cubes`.
fn disjoint_pair_count(cubes: &[&LatticeCube]) -> usize {
    let mut count = 0;
    for (i, a) in cubes.iter().enumerate() {
        count += cubes[i + 1..].iter().filter(|b| a.is_disjoint(b)).count();
    }
    count
}

/// Minimum of [`spectra_distance`] over disjoint pairs of cubes, given their
/// sorted spectra. When the number of disjoint pairs exceeds `budget`, every
/// `stride`-th cube is used and the plan says so.
pub fn min_pair_spectra_distance(
    cubes: &[LatticeCube],
    spectra: &[Vec<f64>],
    budget: Option<usize>,
) -> Result<PairDistance> {
    assert_eq!(cubes.len(), spectra.len());
    let total = cubes.len();
    let mut stride = 1;
    if let Some(budget) = budget {
        // pair counts shrink roughly quadratically with the stride
        loop {
            let picked: Vec<&LatticeCube> = cubes.iter().step_by(stride).collect();
            let pairs = if picked.len() > 4000 {
                picked.len() * picked.len() / 2
            } else {
                disjoint_pair_count(&picked)
            };
            if pairs <= budget || picked.len() <= 2 {
                break;
            }
            stride += 1;
        }
    }
    let used: Vec<usize> = (0..total).step_by(stride).collect();
    let mut entries: Vec<(f64, usize)> = used
        .iter()
        .flat_map(|&c| spectra[c].iter().map(move |&e| (e, c)))
        .collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let best = entries
        .par_iter()
        .enumerate()
        .filter_map(|(i, &(e, c))| {
            entries[i + 1..]
                .iter()
                .find(|&&(_, c2)| cubes[c].is_disjoint(&cubes[c2]))
                .map(|&(e2, c2)| (e2 - e, i, c.min(c2), c.max(c2), e, e2))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .ok_or_else(|| Error::Precondition("no pair of disjoint cubes fits".into()))?;
    let (value, _, a, b, ea, eb) = best;
    Ok(PairDistance {
        value,
        pair: (cubes[a].clone(), cubes[b].clone()),
        energies: (ea, eb),
        plan: SamplingPlan {
            exhaustive: stride == 1,
            stride,
            cubes_used: used.len(),
            cubes_total: total,
        },
    })
}

/// Eigenvalues of every radius-`r` sub-cube of `outer`, computed in parallel.
pub fn subcube_spectra(
    outer: &LatticeCube,
    r: u64,
    op: impl Fn(LatticeCube) -> Result<LocalOperator> + Sync,
) -> Result<(Vec<LatticeCube>, Vec<Vec<f64>>)> {
    let cubes = outer.subcubes(r);
    let spectra = cubes
        .par_iter()
        .map(|c| op(c.clone())?.eigenvalues())
        .collect::<Result<Vec<_>>>()?;
    Ok((cubes, spectra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hull::{HullParams, ThetaField};
    use crate::torus::FrequencyMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_op(rng: &mut ChaCha8Rng, d: usize, r: u64, g: f64) -> LocalOperator {
        let cube = LatticeCube::centered(d, r);
        let v: Vec<f64> = (0..cube.len()).map(|_| rng.random()).collect();
        LocalOperator::assemble(cube, g, &v).unwrap()
    }

    #[test]
    fn site_indexing_round_trips() {
        let c = LatticeCube::new(vec![3, -2], 2);
        assert_eq!(c.len(), 25);
        assert_eq!(c.site(0), vec![1, -4]);
        assert_eq!(c.site(1), vec![1, -3]);
        for i in 0..c.len() {
            assert_eq!(c.index_of(&c.site(i)), Some(i));
        }
        assert_eq!(c.index_of(&[6, 0]), None);
    }

    #[test]
    fn boundary_examples() {
        let b = boundaries(&LatticeCube::centered(1, 2), None).unwrap();
        assert_eq!(b.inner, vec![vec![-2], vec![2]]);
        assert_eq!(b.outer, vec![vec![-3], vec![3]]);
        let b0 = boundaries(&LatticeCube::new(vec![5, 5], 0), None).unwrap();
        assert_eq!(b0.inner, vec![vec![5, 5]]);
        assert_eq!(b0.outer.len(), 4);
        let b2 = boundaries(&LatticeCube::centered(2, 1), None).unwrap();
        assert_eq!(b2.inner.len(), 8);
        assert_eq!(b2.outer.len(), 12);
        assert_eq!(LatticeCube::centered(2, 1).inner_boundary().len(), 8);
        for (x, y) in &b2.edges {
            assert_eq!(x.iter().zip(y).map(|(a, b)| a.abs_diff(*b)).sum::<u64>(), 1);
        }
        let c = LatticeCube::centered(1, 2);
        assert!(matches!(boundaries(&c, Some(&c)), Err(Error::NotProperSubset)));
        let amb = LatticeCube::new(vec![2], 4);
        let rel = boundaries(&c, Some(&amb)).unwrap();
        assert_eq!(rel.inner, vec![vec![2]]);
        assert_eq!(rel.outer, vec![vec![3]]);
    }

    #[test]
    fn assemble_examples() {
        let seg = LocalOperator::assemble(LatticeCube::centered(1, 1), 0.0, &[0.0; 3]).unwrap();
        assert_eq!(seg.edges(), &[(0, 1), (1, 2)]);
        let one = LocalOperator::assemble(LatticeCube::centered(1, 0), 3.0, &[2.0]).unwrap();
        assert_eq!(one.matrix()[(0, 0)], 6.0);
        assert_eq!(one.eigenvalues().unwrap(), vec![6.0]);
        // path spectrum 2 cos(k pi / (n+1))
        let n = 9;
        let path = LocalOperator::assemble(LatticeCube::centered(1, 4), 0.0, &vec![0.0; n]).unwrap();
        let mut oracle: Vec<f64> = (1..=n)
            .map(|k| 2.0 * (k as f64 * std::f64::consts::PI / (n as f64 + 1.0)).cos())
            .collect();
        oracle.sort_by(f64::total_cmp);
        for (a, b) in path.eigenvalues().unwrap().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_site_eigensystem() {
        let s = graph_eigensystem(&[0.0, 0.0], &[(0, 1)]).unwrap();
        assert!((s.eigenvalues[0] + 1.0).abs() < 1e-12);
        assert!((s.eigenvalues[1] - 1.0).abs() < 1e-12);
        let v0 = s.vector(0).unwrap();
        assert!((v0[0].abs() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((v0[0] + v0[1]).abs() < 1e-12);
    }

    #[test]
    fn eigensystem_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (d, r, g) in [(1, 10, 1.0), (2, 3, 5.0), (1, 20, 1e6), (2, 2, 1e6)] {
            let op = random_op(&mut rng, d, r, g);
            let s = op.eigensystem().unwrap();
            let v = s.vectors.as_ref().unwrap();
            let gram = v.transpose() * v;
            let n = op.len();
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[(i, j)] - want).abs() < 1e-10);
                }
            }
            let trace: f64 = op.diagonal().iter().sum();
            let sum: f64 = s.eigenvalues.iter().sum();
            assert!((trace - sum).abs() <= 1e-9 * trace.abs().max(1.0));
            let lo = op.diagonal().iter().copied().fold(f64::INFINITY, f64::min) - 2.0 * d as f64;
            let hi = op.diagonal().iter().copied().fold(f64::NEG_INFINITY, f64::max) + 2.0 * d as f64;
            assert!(s.eigenvalues.iter().all(|&e| e >= lo - 1e-9 && e <= hi + 1e-9));
            assert!(s.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn strong_disorder_is_perturbative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let op = random_op(&mut rng, 1, 12, 1e6);
        let s = op.eigensystem().unwrap();
        let mut diag = op.diagonal().to_vec();
        diag.sort_by(f64::total_cmp);
        for (e, v) in s.eigenvalues.iter().zip(&diag) {
            assert!((e - v).abs() <= 2.0);
        }
        for i in 0..op.len() {
            let v = s.vector(i).unwrap();
            assert!(v.iter().fold(0.0f64, |m, x| m.max(x.abs())) > 0.999);
        }
    }

    #[test]
    fn refined_tails_follow_perturbation_theory() {
        // psi(c +- 1) ~ -1 / (gV(c+-1) - lambda) at first order
        let diag = vec![3e6, 1e6, 0.0, 2e6, 5e6];
        let op = LocalOperator::with_diagonal(LatticeCube::centered(1, 2), diag.clone()).unwrap();
        let s = op.eigensystem().unwrap();
        let k = s.eigenvalues.iter().position(|e| e.abs() < 10.0).unwrap();
        let v = s.vector(k).unwrap();
        assert!((v[1] * -(diag[1] - s.eigenvalues[k]) - 1.0).abs() < 1e-5);
        // two steps out: product of the two denominators, far below eps
        let two = 1.0 / ((diag[0] - s.eigenvalues[k]) * (diag[1] - s.eigenvalues[k]));
        assert!((v[0] / two - 1.0).abs() < 1e-5);
        assert!(v[0].abs() < 1e-12);
    }

    #[test]
    fn green_examples() {
        let one = LocalOperator::assemble(LatticeCube::centered(1, 0), 1.0, &[5.0]).unwrap();
        assert!((one.green(&[0], &[0], 3.0).unwrap().value - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = random_op(&mut rng, 1, 6, 3.0);
        let s = op.eigensystem().unwrap();
        let e = 0.1234;
        for x in -6i64..=6 {
            for y in -6i64..=6 {
                let gxy = op.green(&[x], &[y], e).unwrap().value;
                let gyx = op.green(&[y], &[x], e).unwrap().value;
                assert!((gxy - gyx).abs() < 1e-10);
                let spectral = s.green_spectral((x + 6) as usize, (y + 6) as usize, e).unwrap();
                assert!((gxy - spectral).abs() < 1e-8);
            }
        }
        assert!(matches!(one.green(&[0], &[0], 5.0), Err(Error::Singular { .. })));
        assert!(matches!(op.green(&[9], &[0], 0.5), Err(Error::SiteOutsideCube(_))));
    }

    #[test]
    fn chain_green_column_matches_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let op = random_op(&mut rng, 1, 7, 2.0);
            let e = rng.random_range(-3.0..3.0);
            let solver = op.green_solver(e).unwrap();
            for y in [0usize, 3, 7, 14] {
                let lu = solver.column(y);
                let chain = op.green_column(y, e).unwrap();
                for x in 0..op.len() {
                    assert!((lu[x] - chain[x]).abs() < 1e-9 * (1.0 + lu[x].abs()));
                }
            }
        }
    }

    #[test]
    fn chain_green_column_keeps_deep_tails() {
        // far from every diagonal entry the column is a product of ratios
        let diag: Vec<f64> = (0..41).map(|k| 1e4 * (1.0 + (k % 5) as f64)).collect();
        let op = LocalOperator::with_diagonal(LatticeCube::centered(1, 20), diag.clone()).unwrap();
        let col = op.green_column(20, 0.0).unwrap();
        let first_order: f64 = (21..41).map(|k| -1.0 / diag[k]).product::<f64>() / diag[20];
        assert!(col[40].abs() < 1e-80);
        assert!((col[40] / first_order - 1.0).abs() < 1e-6);
    }

    #[test]
    fn chain_refinement_survives_a_distant_resonance() {
        // site 0 sits within 1 of the eigenvalue localized at site 6
        let mut diag = vec![5e3; 13];
        diag[6] = 0.0;
        diag[0] = 0.5;
        diag[12] = 7e3;
        let op = LocalOperator::with_diagonal(LatticeCube::centered(1, 6), diag).unwrap();
        let s = op.eigensystem().unwrap();
        let k = s
            .eigenvalues
            .iter()
            .position(|e| e.abs() < 0.01)
            .unwrap();
        let v = s.vector(k).unwrap();
        assert!(v[6] > 0.99);
        assert!(v[3].abs() < 1e-10 && v[3] != 0.0);
        let ratio = v[2] / v[3];
        assert!((ratio * -5e3 - 1.0).abs() < 1e-3);
        // the resonant end site obeys its own equation to full relative accuracy
        let expect = -v[1] / (0.5 - s.eigenvalues[k]);
        assert!((v[0] / expect - 1.0).abs() < 1e-12);
        assert!(v[0].abs() < 1e-17);
    }

    #[test]
    fn separation_examples() {
        assert!((spectral_separation(&[0.0, 1.0, 1.4]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(spectral_separation(&[2.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(spectral_separation(&[1.0]).is_err());
        assert!((spectra_distance(&[0.0, 1.0], &[1.4, 3.0]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(spectra_distance(&[0.0, 1.0], &[1.0, 3.0]).unwrap(), 0.0);
        assert!(spectra_distance(&[], &[1.0]).is_err());
    }

    #[test]
    fn min_pair_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let outer = LatticeCube::centered(1, 4);
        let values: Vec<f64> = (0..outer.len()).map(|_| rng.random()).collect();
        let (cubes, spectra) = subcube_spectra(&outer, 1, |c| {
            LocalOperator::from_fn(c, 4.0, |x| values[outer.index_of(x).unwrap()])
        })
        .unwrap();
        let got = min_pair_spectra_distance(&cubes, &spectra, None).unwrap();
        let mut brute = f64::INFINITY;
        for i in 0..cubes.len() {
            for j in 0..cubes.len() {
                if cubes[i].is_disjoint(&cubes[j]) {
                    brute = brute.min(spectra_distance(&spectra[i], &spectra[j]).unwrap());
                }
            }
        }
        assert_eq!(got.value, brute);
        assert!(got.plan.exhaustive);
        assert!(got.pair.0.is_disjoint(&got.pair.1));
        let sampled = min_pair_spectra_distance(&cubes, &spectra, Some(3)).unwrap();
        assert!(!sampled.plan.exhaustive);
        assert!(sampled.value >= got.value);
        let tight = LatticeCube::centered(1, 2).subcubes(1);
        let sp = vec![vec![0.0]; tight.len()];
        assert!(min_pair_spectra_distance(&tight, &sp, None).is_err());
    }

    #[test]
    fn operator_is_covariant() {
        let pot = HaarshPotential::new(ThetaField::new(2), FrequencyMatrix::golden_mean(), HullParams::new(2.0, 1), None);
        let w = TorusPoint::new([0.3]);
        let a = LocalOperator::from_potential(LatticeCube::new(vec![7], 3), &pot, &w, 10.0).unwrap();
        let shifted = pot.alpha.shift(&w, &[7]);
        let b = LocalOperator::from_potential(LatticeCube::centered(1, 3), &pot, &shifted, 10.0).unwrap();
        assert_eq!(a.matrix(), b.matrix());
    }

    #[test]
    fn truncation_moves_eigenvalues_by_at_most_the_tail() {
        let hp = HullParams::new(2.0, 1);
        let alpha = FrequencyMatrix::golden_mean();
        let theta = ThetaField::new(6);
        let w = TorusPoint::new([0.61]);
        let g = 100.0;
        let full = HaarshPotential::new(theta.clone(), alpha.clone(), hp, Some(8));
        for n in 0..=3u32 {
            let trunc = HaarshPotential::new(theta.clone(), alpha.clone(), hp, Some(n));
            let cube = LatticeCube::centered(1, 6);
            let a = LocalOperator::from_potential(cube.clone(), &full, &w, g).unwrap();
            let b = LocalOperator::from_potential(cube, &trunc, &w, g).unwrap();
            let bound = g * crate::hull::tail_bound(n, &hp).to_f64();
            for (x, y) in a.diagonal().iter().zip(b.diagonal()) {
                assert!((x - y).abs() <= bound * (1.0 + 1e-12));
            }
            for (x, y) in a.eigenvalues().unwrap().iter().zip(b.eigenvalues().unwrap()) {
                assert!((x - y).abs() <= bound * (1.0 + 1e-9) + 1e-12);
            }
        }
    }

    #[test]
    fn cap_is_enforced() {
        let op = LocalOperator::assemble(LatticeCube::centered(1, 5), 1.0, &[0.0; 11]).unwrap();
        assert!(matches!(op.eigensystem_capped(10), Err(Error::SizeCap { sites: 11, cap: 10 })));
    }

    proptest! {
        #[test]
        fn merge_scan_matches_quadratic(mut a in prop::collection::vec(-10.0f64..10.0, 1..30),
                                        mut b in prop::collection::vec(-10.0f64..10.0, 1..30)) {
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let brute = a.iter().flat_map(|x| b.iter().map(move |y| (x - y).abs())).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(spectra_distance(&a, &b).unwrap(), brute);
        }

        #[test]
        fn subcubes_are_contained(r in 0u64..4, extra in 0u64..4, d in 1usize..3) {
            let outer = LatticeCube::centered(d, r + extra);
            let subs = outer.subcubes(r);
            prop_assert_eq!(subs.len(), (2 * extra as usize + 1).pow(d as u32));
            prop_assert!(subs.iter().all(|s| outer.contains_cube(s)));
        }
    }
}
