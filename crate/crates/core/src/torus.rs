//! The torus `T^nu`, its shift dynamics and dyadic partitions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduce to `[0, 1)`, folding the `1.0` that `x - floor(x)` can produce
/// for tiny negative inputs back to `0.0`.
#[inline]
pub fn frac(x: f64) -> f64 {
    let f = x - x.floor();
    if f >= 1.0 {
        0.0
    } else {
        f
    }
}

/// `frac(z * a)` without losing the low bits of the product.
#[inline]
fn frac_mul(z: i64, a: f64) -> f64 {
    let zf = z as f64;
    let p = zf * a;
    let err = zf.mul_add(a, -p);
    frac(frac(p) + err)
}

#[inline]
fn circle_distance(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    d.min(1.0 - d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TorusPoint(Vec<f64>);

impl TorusPoint {
    pub fn new(coords: impl IntoIterator<Item = f64>) -> Self {
        Self(coords.into_iter().map(frac).collect())
    }

    pub fn origin(nu: usize) -> Self {
        Self(vec![0.0; nu])
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, nu: usize) -> Self {
        Self((0..nu).map(|_| rng.random::<f64>()).collect())
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Max-norm distance on the torus, in `[0, 1/2]`.
    pub fn distance(&self, other: &Self) -> f64 {
        torus_distance(self, other)
    }
}

pub fn torus_distance(a: &TorusPoint, b: &TorusPoint) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.0.iter()
        .zip(&b.0)
        .map(|(&x, &y)| circle_distance(x, y))
        .fold(0.0, f64::max)
}

/// One frequency vector in `R^nu` per lattice direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrequencyMatrix(Vec<Vec<f64>>);

impl FrequencyMatrix {
    pub fn new(alphas: Vec<Vec<f64>>) -> Result<Self> {
        let nu = alphas.first().map_or(0, Vec::len);
        if alphas.is_empty() || nu == 0 {
            return Err(Error::Precondition("frequency matrix must be non-empty".into()));
        }
        if let Some(bad) = alphas.iter().find(|a| a.len() != nu) {
            return Err(Error::Dimension {
                expected: nu,
                got: bad.len(),
            });
        }
        if alphas.iter().flatten().any(|a| !a.is_finite()) {
            return Err(Error::Precondition("frequencies must be finite".into()));
        }
        Ok(Self(alphas))
    }

    /// `alpha = (sqrt 5 - 1) / 2` for `d = nu = 1`.
    pub fn golden_mean() -> Self {
        Self(vec![vec![(5f64.sqrt() - 1.0) / 2.0]])
    }

    /// Lattice dimension `d`.
    pub fn lattice_dim(&self) -> usize {
        self.0.len()
    }

    /// Torus dimension `nu`.
    pub fn torus_dim(&self) -> usize {
        self.0[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.0
    }

    /// `T^x omega = omega + sum_j x_j alpha^j (mod 1)`.
    pub fn shift(&self, omega: &TorusPoint, x: &[i64]) -> TorusPoint {
        debug_assert_eq!(x.len(), self.lattice_dim());
        let coords = (0..omega.dim()).map(|i| {
            let s = x
                .iter()
                .zip(&self.0)
                .fold(omega.0[i], |acc, (&xj, a)| acc + frac_mul(xj, a[i]));
            frac(s)
        });
        TorusPoint(coords.collect())
    }
}

pub fn shift(omega: &TorusPoint, x: &[i64], alpha: &FrequencyMatrix) -> TorusPoint {
    alpha.shift(omega, x)
}

/// Dyadic cell `C_{n,k}` with 1-based per-axis indices `1 <= k_j <= 2^n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub n: u32,
    pub k: Vec<u128>,
}

/// Largest generation whose indices fit the `u128` cell coordinates.
pub const MAX_GENERATION: u32 = 127;

impl CellIndex {
    /// Row-major 1-based index in `1..=2^(nu n)`, first axis most
    /// significant; `None` when it does not fit in 128 bits.
    pub fn flat(&self) -> Option<u128> {
        let bits = self.n as usize * self.k.len();
        if bits > 127 {
            return None;
        }
        let acc = self
            .k
            .iter()
            .fold(0u128, |acc, &kj| (acc << self.n) | (kj - 1));
        Some(acc + 1)
    }
}

#[inline]
fn axis_index(w: f64, n: u32) -> u128 {
    // Scaling by a power of two is exact, so the floor is exact as well.
    ((w * (n as f64).exp2()).floor() as u128).min((1u128 << n) - 1)
}

pub fn cell_index(omega: &TorusPoint, n: u32) -> CellIndex {
    assert!(n <= MAX_GENERATION, "generation {n} exceeds {MAX_GENERATION}");
    CellIndex {
        n,
        k: omega.0.iter().map(|&w| 1 + axis_index(w, n)).collect(),
    }
}

/// `+1` on the lower half of `C_{n,k}`, `-1` on the upper half, tensored
/// over axes; `0` off the support. Generation 0 is the constant `1`.
pub fn haar_value(omega: &TorusPoint, idx: &CellIndex) -> i8 {
    if idx.n == 0 {
        return 1;
    }
    let mut sign = 1i8;
    for (&w, &k) in omega.0.iter().zip(&idx.k) {
        if 1 + axis_index(w, idx.n) != k {
            return 0;
        }
        if axis_index(w, idx.n + 1) & 1 == 1 {
            sign = -sign;
        }
    }
    sign
}

/// Haar sign of `omega` in its own generation-`n` cell.
pub fn haar_sign(omega: &TorusPoint, n: u32) -> i8 {
    if n == 0 {
        return 1;
    }
    omega.0.iter().fold(1i8, |s, &w| {
        if axis_index(w, n + 1) & 1 == 1 {
            -s
        } else {
            s
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiophantineScan {
    /// Smallest integer `C` with `dist(T^z w, w) >= C^{-1} |z|^{-A}` on the range.
    pub c_a: u64,
    pub max_ratio: f64,
    pub argmax: Vec<i64>,
    pub min_distance: f64,
}

/// Visits every `z != 0` in `[-radius, radius]^d` in lexicographic order.
fn for_each_nonzero(d: usize, radius: i64, mut f: impl FnMut(&[i64])) {
    let mut z = vec![-radius; d];
    'cube: loop {
        if z.iter().any(|&c| c != 0) {
            f(&z);
        }
        for i in (0..d).rev() {
            if z[i] < radius {
                z[i] += 1;
                continue 'cube;
            }
            z[i] = -radius;
        }
        break;
    }
}

fn max_norm(z: &[i64]) -> i64 {
    z.iter().map(|c| c.abs()).max().unwrap_or(0)
}

/// Empirical aperiodicity constant of a toral shift over `0 < |z| <= radius`.
/// The orbit distance depends only on `z`, so `omega = 0` is used.
pub fn diophantine_scan(alpha: &FrequencyMatrix, a: f64, radius: i64) -> Result<DiophantineScan> {
    if radius < 1 {
        return Err(Error::Precondition("scan radius must be >= 1".into()));
    }
    let origin = TorusPoint::origin(alpha.torus_dim());
    let mut best = DiophantineScan {
        c_a: 0,
        max_ratio: 0.0,
        argmax: Vec::new(),
        min_distance: f64::INFINITY,
    };
    let mut zero: Option<Vec<i64>> = None;
    for_each_nonzero(alpha.lattice_dim(), radius, |z| {
        let dist = torus_distance(&alpha.shift(&origin, z), &origin);
        let norm = max_norm(z);
        if dist == 0.0 {
            if zero.as_ref().is_none_or(|w| norm < max_norm(w)) {
                zero = Some(z.to_vec());
            }
            return;
        }
        let ratio = (norm as f64).powf(-a) / dist;
        best.min_distance = best.min_distance.min(dist);
        if ratio > best.max_ratio {
            best.max_ratio = ratio;
            best.argmax = z.to_vec();
        }
    });
    if let Some(shift) = zero {
        return Err(Error::ZeroDistance { shift });
    }
    best.c_a = best.max_ratio.ceil().max(1.0) as u64;
    Ok(best)
}

/// `(A', C_{A'})` for the divergence condition. Shifts are isometries, so
/// the answer is `(0, 1)`.
pub fn divergence_constants(_alpha: &FrequencyMatrix) -> (u32, u32) {
    (0, 1)
}

/// Whether the orbit points `T^x omega`, `x` in `[-radius, radius]^d`, sit in
/// pairwise distinct generation-`n` cells. Returns the first colliding pair.
pub fn trajectory_collision(
    omega: &TorusPoint,
    alpha: &FrequencyMatrix,
    radius: i64,
    n: u32,
) -> Option<(Vec<i64>, Vec<i64>)> {
    let d = alpha.lattice_dim();
    let side = (2 * radius + 1) as usize;
    let count = side.pow(d as u32);
    let site = |mut i: usize| -> Vec<i64> {
        let mut x = vec![0i64; d];
        for c in x.iter_mut().rev() {
            *c = (i % side) as i64 - radius;
            i /= side;
        }
        x
    };
    let flat_fits = n as usize * omega.dim() <= 127;
    if flat_fits {
        let flat_key = |i: usize, x: &mut [i64]| -> u128 {
            let mut r = i;
            for c in x.iter_mut().rev() {
                *c = (r % side) as i64 - radius;
                r /= side;
            }
            (0..omega.dim()).fold(0u128, |acc, ax| {
                let w = x
                    .iter()
                    .zip(&alpha.0)
                    .fold(omega.0[ax], |s, (&xj, a)| s + frac_mul(xj, a[ax]));
                (acc << n) | axis_index(frac(w), n)
            })
        };
        let mut x = vec![0i64; d];
        let mut keys: Vec<u128> = (0..count).map(|i| flat_key(i, &mut x)).collect();
        keys.sort_unstable();
        // collisions are rare, so locate the pair only when one exists
        let dup = keys.windows(2).find(|w| w[0] == w[1]).map(|w| w[0])?;
        let mut hits = (0..count).filter(|&i| flat_key(i, &mut x) == dup);
        let (a, b) = (hits.next().expect("first"), hits.next().expect("second"));
        Some((site(a), site(b)))
    } else {
        let mut keys: Vec<(CellIndex, usize)> = (0..count)
            .map(|i| (cell_index(&alpha.shift(omega, &site(i)), n), i))
            .collect();
        keys.sort_unstable();
        keys.windows(2)
            .find(|w| w[0].0 == w[1].0)
            .map(|w| (site(w[0].1), site(w[1].1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(c: &[f64]) -> TorusPoint {
        TorusPoint::new(c.iter().copied())
    }

    #[test]
    fn distance_examples() {
        assert!((torus_distance(&p(&[0.9]), &p(&[0.05])) - 0.15).abs() < 1e-15);
        assert_eq!(torus_distance(&p(&[0.3]), &p(&[0.3])), 0.0);
        let d = torus_distance(&p(&[0.1, 0.9]), &p(&[0.2, 0.1]));
        assert!((d - 0.2).abs() < 1e-15);
    }

    #[test]
    fn shift_examples() {
        let alpha = FrequencyMatrix::new(vec![vec![0.618034]]).unwrap();
        let w = p(&[0.9]);
        assert!((alpha.shift(&w, &[1]).coords()[0] - 0.518034).abs() < 1e-12);
        assert_eq!(alpha.shift(&w, &[0]), w);
        let back = alpha.shift(&alpha.shift(&w, &[12345]), &[-12345]);
        assert!(torus_distance(&back, &w) < 1e-12);
    }

    #[test]
    fn frac_folds_to_zero() {
        assert_eq!(frac(-1e-20), 0.0);
        assert_eq!(frac(3.0), 0.0);
        assert!((frac(-0.25) - 0.75).abs() < 1e-16);
    }

    #[test]
    fn cell_examples() {
        assert_eq!(cell_index(&p(&[0.3]), 2).k, vec![2]);
        assert_eq!(cell_index(&p(&[0.77]), 0).k, vec![1]);
        assert_eq!(cell_index(&p(&[0.6, 0.1]), 1).k, vec![2, 1]);
        // dyadic boundary belongs to the upper cell
        assert_eq!(cell_index(&p(&[0.5]), 1).k, vec![2]);
        let c = CellIndex { n: 2, k: vec![3, 2] };
        assert_eq!(c.flat(), Some(2 * 4 + 1 + 1));
    }

    #[test]
    fn haar_examples() {
        let c11 = CellIndex { n: 1, k: vec![1] };
        assert_eq!(haar_value(&p(&[0.1]), &c11), 1);
        assert_eq!(haar_value(&p(&[0.3]), &c11), -1);
        assert_eq!(haar_value(&p(&[0.3]), &CellIndex { n: 1, k: vec![2] }), 0);
        assert_eq!(haar_value(&p(&[0.3]), &CellIndex { n: 0, k: vec![1] }), 1);
    }

    #[test]
    fn haar_mean_zero_on_midpoint_grid() {
        for nu in 1..=2usize {
            for n in 1..=3u32 {
                let res = 4u32.pow(n) as usize;
                let mut cell = vec![1u128; nu];
                cell[0] = 2;
                let idx = CellIndex { n, k: cell };
                let mut total = 0i64;
                let mut multi = vec![0usize; nu];
                loop {
                    let coords = multi.iter().map(|&m| (m as f64 + 0.5) / res as f64);
                    total += haar_value(&TorusPoint::new(coords), &idx) as i64;
                    let mut i = 0;
                    while i < nu {
                        multi[i] += 1;
                        if multi[i] < res {
                            break;
                        }
                        multi[i] = 0;
                        i += 1;
                    }
                    if i == nu {
                        break;
                    }
                }
                assert_eq!(total, 0, "nu={nu} n={n}");
            }
        }
    }

    #[test]
    fn golden_mean_scan() {
        let scan = diophantine_scan(&FrequencyMatrix::golden_mean(), 1.0, 100_000).unwrap();
        assert_eq!(scan.c_a, 3);
        assert_eq!(scan.argmax.iter().map(|z| z.abs()).max(), Some(1));
        // brute-force oracle over positive z only
        let alpha = (5f64.sqrt() - 1.0) / 2.0;
        let worst = (1..=100_000i64)
            .map(|z| {
                let f = frac_mul(z, alpha);
                1.0 / (z as f64 * f.min(1.0 - f))
            })
            .fold(0.0, f64::max);
        assert_eq!(worst.ceil() as u64, scan.c_a);
        // |z| = 1 dominates for every exponent, so C_A stays at 3
        let steep = diophantine_scan(&FrequencyMatrix::golden_mean(), 3.0, 2000).unwrap();
        assert_eq!(steep.c_a, 3);
    }

    #[test]
    fn rational_frequency_hits_zero() {
        let alpha = FrequencyMatrix::new(vec![vec![0.5]]).unwrap();
        match diophantine_scan(&alpha, 1.0, 10) {
            Err(Error::ZeroDistance { shift }) => assert_eq!(shift[0].abs(), 2),
            other => panic!("expected zero distance, got {other:?}"),
        }
    }

    #[test]
    fn enumeration_covers_the_cube() {
        let mut seen = Vec::new();
        for_each_nonzero(2, 2, |z| seen.push(z.to_vec()));
        assert_eq!(seen.len(), 24);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn shifts_are_isometries() {
        let alpha = FrequencyMatrix::new(vec![vec![0.618, 0.414], vec![0.732, 0.236]]).unwrap();
        assert_eq!(divergence_constants(&alpha), (0, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = TorusPoint::random(&mut rng, 2);
            let b = TorusPoint::random(&mut rng, 2);
            let x = [rng.random_range(-50..50), rng.random_range(-50..50)];
            let before = torus_distance(&a, &b);
            let after = torus_distance(&alpha.shift(&a, &x), &alpha.shift(&b, &x));
            assert!((before - after).abs() < 1e-15);
        }
    }

    #[test]
    fn small_trajectory_is_separated() {
        let alpha = FrequencyMatrix::golden_mean();
        let w = p(&[0.123]);
        // N~(3) = 1 + floor(16 log2 3 + 1 - log2 3) = 26 for A = 1, C_A = 3
        assert!(trajectory_collision(&w, &alpha, 81, 26).is_none());
        assert!(trajectory_collision(&w, &alpha, 81, 3).is_some());
    }

    proptest! {
        #[test]
        fn refinement(w in 0.0f64..1.0, v in 0.0f64..1.0, n in 0u32..60) {
            let pt = p(&[w, v]);
            let fine = cell_index(&pt, n + 1);
            let coarse = cell_index(&pt, n);
            let parent: Vec<u128> = fine.k.iter().map(|&k| (k - 1) / 2 + 1).collect();
            prop_assert_eq!(parent, coarse.k);
        }

        #[test]
        fn shift_is_additive(w in 0.0f64..1.0, x in -10_000i64..10_000, y in -10_000i64..10_000) {
            let alpha = FrequencyMatrix::golden_mean();
            let pt = p(&[w]);
            let two = alpha.shift(&alpha.shift(&pt, &[x]), &[y]);
            let one = alpha.shift(&pt, &[x + y]);
            prop_assert!(torus_distance(&one, &two) < 1e-12);
        }

        #[test]
        fn coordinates_stay_in_unit_interval(w in -5.0f64..5.0, x in -1_000_000i64..1_000_000) {
            let q = FrequencyMatrix::golden_mean().shift(&p(&[w]), &[x]);
            prop_assert!((0.0..1.0).contains(&q.coords()[0]));
        }
    }
}
