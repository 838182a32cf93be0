//! The Haar-wavelet hull `v(omega; theta)` and the lattice potential it
//! generates along shift orbits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logmag::LogMagnitude;
use crate::torus::{cell_index, haar_sign, CellIndex, FrequencyMatrix, TorusPoint, MAX_GENERATION};

/// Default absolute tolerance for [`hull`].
pub const DEFAULT_TOL: f64 = 1e-15;

#[inline]
pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Lazily evaluated IID uniform coefficients `theta_{n,k}`.
///
/// Values come from a keyed hash of `(seed, n, k)`, so nothing is stored and
/// any coefficient can be looked up in constant time. Individual values can
/// be pinned with [`ThetaField::set`] to engineer degenerate samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ThetaField {
    seed: u64,
    overrides: BTreeMap<CellIndex, f64>,
}

impl ThetaField {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            overrides: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `theta_{n,k}` in `[0, 1)`.
    pub fn value(&self, idx: &CellIndex) -> f64 {
        if !self.overrides.is_empty() {
            if let Some(&v) = self.overrides.get(idx) {
                return v;
            }
        }
        let mut h = splitmix(self.seed ^ 0x6a09_e667_f3bc_c909);
        h = splitmix(h ^ u64::from(idx.n));
        for &k in &idx.k {
            h = splitmix(h ^ k as u64);
            h = splitmix(h ^ (k >> 64) as u64);
        }
        (h >> 11) as f64 * (-53f64).exp2()
    }

    pub fn set(&mut self, idx: CellIndex, value: f64) {
        assert!((0.0..=1.0).contains(&value), "theta must lie in [0, 1]");
        self.overrides.insert(idx, value);
    }

    pub fn overrides(&self) -> impl Iterator<Item = (&CellIndex, f64)> {
        self.overrides.iter().map(|(k, &v)| (k, v))
    }

    /// Pin coefficients so that `v_N(p) == v_N(q)` bit for bit.
    pub fn force_collision(&mut self, p: &TorusPoint, q: &TorusPoint, levels: u32) {
        for n in 1..=levels {
            let (kp, kq) = (cell_index(p, n), cell_index(q, n));
            let (sp, sq) = (haar_sign(p, n), haar_sign(q, n));
            if sp != sq {
                self.set(kp, 0.0);
                self.set(kq, 0.0);
            } else if kp != kq {
                let v = self.value(&kp);
                self.set(kq, v);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullParams {
    /// Decay exponent `b`.
    pub b: f64,
    /// `c_a` in `a_n = 2^{-c_a b n^2}`.
    pub amp_factor: f64,
    /// Torus dimension.
    pub nu: usize,
}

impl HullParams {
    pub fn new(b: f64, nu: usize) -> Self {
        Self {
            b,
            amp_factor: 2.0,
            nu,
        }
    }

    pub fn with_amp_factor(self, amp_factor: f64) -> Self {
        Self { amp_factor, ..self }
    }
}

/// `a_n = 2^{-c_a b n^2}`.
pub fn amplitude(n: u32, p: &HullParams) -> LogMagnitude {
    let n = f64::from(n);
    LogMagnitude::pow2(-p.amp_factor * p.b * n * n)
}

/// Upper bound on `sup |v - v_N|`.
///
/// For `b >= 2` this is `2^{-2bN-1} a_N`. Below that the closed form can fail,
/// so the geometric bound `a_{N+1} / (1 - 2^{-c_a b (2N+3)})` is used.
pub fn tail_bound(n: u32, p: &HullParams) -> LogMagnitude {
    if p.b >= 2.0 {
        LogMagnitude::pow2(-2.0 * p.b * f64::from(n) - 1.0) * amplitude(n, p)
    } else {
        let ratio = (-p.amp_factor * p.b * (2.0 * f64::from(n) + 3.0)).exp2();
        amplitude(n + 1, p).scale(1.0 / (1.0 - ratio))
    }
}

/// Smallest `N` with `tail_bound(N) < tol`.
pub fn hull_level(tol: f64, p: &HullParams) -> u32 {
    assert!(tol > 0.0, "tolerance must be positive");
    let t = LogMagnitude::from_f64(tol);
    (0..MAX_GENERATION)
        .find(|&n| tail_bound(n, p) < t)
        .unwrap_or(MAX_GENERATION - 1)
}

/// `v_N(omega; theta)`. Only the generation-`n` cell containing `omega`
/// contributes, so this costs one lookup per generation.
pub fn hull_truncated(omega: &TorusPoint, theta: &ThetaField, n_max: u32, p: &HullParams) -> f64 {
    let mut v = 0.0;
    for n in 0..=n_max.min(MAX_GENERATION - 1) {
        let a = amplitude(n, p).to_f64();
        if a == 0.0 {
            break;
        }
        let idx = cell_index(omega, n);
        v += a * theta.value(&idx) * f64::from(haar_sign(omega, n));
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullValue {
    pub value: f64,
    pub truncation: u32,
}

pub fn hull(omega: &TorusPoint, theta: &ThetaField, p: &HullParams, tol: f64) -> HullValue {
    let truncation = hull_level(tol, p);
    HullValue {
        value: hull_truncated(omega, theta, truncation, p),
        truncation,
    }
}

/// `V(x; omega; theta) = v_N(T^x omega; theta)` along the orbit of a toral
/// shift, with a fixed truncation level.
#[derive(Clone, Debug)]
pub struct HaarshPotential {
    pub theta: ThetaField,
    pub alpha: FrequencyMatrix,
    pub params: HullParams,
    pub truncation: u32,
}

impl HaarshPotential {
    /// `truncation = None` picks the level reaching [`DEFAULT_TOL`].
    pub fn new(theta: ThetaField, alpha: FrequencyMatrix, params: HullParams, truncation: Option<u32>) -> Self {
        let truncation = truncation.unwrap_or_else(|| hull_level(DEFAULT_TOL, &params));
        Self {
            theta,
            alpha,
            params,
            truncation,
        }
    }

    pub fn lattice_dim(&self) -> usize {
        self.alpha.lattice_dim()
    }

    pub fn value(&self, omega: &TorusPoint, x: &[i64]) -> f64 {
        let p = self.alpha.shift(omega, x);
        hull_truncated(&p, &self.theta, self.truncation, &self.params)
    }

    pub fn values<'a>(&self, omega: &TorusPoint, sites: impl IntoIterator<Item = &'a [i64]>) -> Vec<f64> {
        sites.into_iter().map(|x| self.value(omega, x)).collect()
    }
}

/// Smallest pairwise gap with the indices of the minimizing pair.
pub fn value_separation(values: &[f64]) -> Result<(f64, (usize, usize))> {
    if values.len() < 2 {
        return Err(Error::TooFew {
            need: 2,
            got: values.len(),
        });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let (gap, i, j) = order
        .windows(2)
        .map(|w| (values[w[1]] - values[w[0]], w[0].min(w[1]), w[0].max(w[1])))
        .min_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))))
        .expect("at least one pair");
    Ok((gap, (i, j)))
}

/// `min_{x != y} |V(x) - V(y)|` over the given sites.
pub fn potential_separation(pot: &HaarshPotential, omega: &TorusPoint, sites: &[Vec<i64>]) -> Result<f64> {
    let values = pot.values(omega, sites.iter().map(Vec::as_slice));
    value_separation(&values).map(|(gap, _)| gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::haar_value;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(c: &[f64]) -> TorusPoint {
        TorusPoint::new(c.iter().copied())
    }

    /// Every cell of every generation, not just the one containing omega.
    fn full_sum(omega: &TorusPoint, theta: &ThetaField, n_max: u32, hp: &HullParams) -> f64 {
        let nu = omega.dim();
        let mut v = 0.0;
        for n in 0..=n_max {
            let a = amplitude(n, hp).to_f64();
            let per_axis = 1u128 << n;
            let mut k = vec![1u128; nu];
            loop {
                let idx = CellIndex { n, k: k.clone() };
                v += a * theta.value(&idx) * f64::from(haar_value(omega, &idx));
                let mut i = 0;
                while i < nu {
                    if k[i] < per_axis {
                        k[i] += 1;
                        break;
                    }
                    k[i] = 1;
                    i += 1;
                }
                if i == nu {
                    break;
                }
            }
        }
        v
    }

    #[test]
    fn amplitude_examples() {
        let hp = HullParams::new(2.0, 1);
        assert_eq!(amplitude(0, &hp).to_f64(), 1.0);
        assert_eq!(amplitude(1, &hp).to_f64(), 0.0625);
        assert!((amplitude(2, &hp).to_f64() - 1.52588e-5).abs() < 1e-10);
    }

    #[test]
    fn tail_bound_examples() {
        let hp = HullParams::new(2.0, 1);
        assert_eq!(tail_bound(1, &hp).log2_abs(), -9.0);
        assert_eq!(tail_bound(0, &hp).to_f64(), 0.5);
        for hp in [HullParams::new(2.0, 1), HullParams::new(3.0, 1).with_amp_factor(1.0), HullParams::new(0.05, 1)] {
            for n in 0..=5u32 {
                let tail = (n + 1..=n + 50)
                    .map(|k| amplitude(k, &hp))
                    .fold(LogMagnitude::ZERO, LogMagnitude::add);
                assert!(tail <= tail_bound(n, &hp), "b={} N={n}", hp.b);
            }
        }
    }

    #[test]
    fn truncation_levels() {
        let hp = HullParams::new(2.0, 1);
        assert_eq!(hull_level(1e-18, &hp), 4);
        assert_eq!(hull_level(0.5 + 1e-9, &hp), 0);
        assert_eq!(tail_bound(3, &hp).log2_abs(), -49.0);
        let theta = ThetaField::new(3);
        let h = hull(&p(&[0.4]), &theta, &hp, 0.75);
        assert_eq!(h.truncation, 0);
        assert_eq!(h.value, theta.value(&CellIndex { n: 0, k: vec![1] }));
    }

    #[test]
    fn two_term_example() {
        let hp = HullParams::new(2.0, 1);
        let mut theta = ThetaField::new(0);
        theta.set(CellIndex { n: 0, k: vec![1] }, 0.7);
        theta.set(CellIndex { n: 1, k: vec![1] }, 0.5);
        let v = hull_truncated(&p(&[0.1]), &theta, 1, &hp);
        assert!((v - 0.73125).abs() < 1e-15);
    }

    #[test]
    fn theta_is_deterministic_and_uniformish() {
        let a = ThetaField::new(11);
        let b = ThetaField::new(11);
        let c = ThetaField::new(12);
        let idx = CellIndex { n: 5, k: vec![17] };
        assert_eq!(a.value(&idx), b.value(&idx));
        assert_ne!(a.value(&idx), c.value(&idx));
        let mean = (1..=20_000u128)
            .map(|k| a.value(&CellIndex { n: 20, k: vec![k] }))
            .sum::<f64>()
            / 20_000.0;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn single_cell_matches_full_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for nu in 1..=2 {
            let hp = HullParams::new(2.0, nu).with_amp_factor(1.0);
            for _ in 0..40 {
                let omega = TorusPoint::random(&mut rng, nu);
                let theta = ThetaField::new(rng.random());
                let n = rng.random_range(0..=6);
                let fast = hull_truncated(&omega, &theta, n, &hp);
                let slow = full_sum(&omega, &theta, n, &hp);
                assert!((fast - slow).abs() <= 1e-12 * slow.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn forced_collision_equalizes_values() {
        let hp = HullParams::new(2.0, 1);
        let mut theta = ThetaField::new(5);
        let (a, b) = (p(&[0.13]), p(&[0.71]));
        theta.force_collision(&a, &b, 6);
        assert_eq!(hull_truncated(&a, &theta, 6, &hp), hull_truncated(&b, &theta, 6, &hp));
    }

    #[test]
    fn separation_examples() {
        assert_eq!(value_separation(&[0.0, 0.5, 0.8]).unwrap().1, (1, 2));
        assert!((value_separation(&[0.0, 0.5, 0.8]).unwrap().0 - 0.3).abs() < 1e-15);
        assert_eq!(value_separation(&[0.2, 0.4, 0.2]).unwrap(), (0.0, (0, 2)));
        assert!(matches!(value_separation(&[1.0]), Err(Error::TooFew { .. })));
    }

    #[test]
    fn potential_is_covariant() {
        let pot = HaarshPotential::new(ThetaField::new(9), FrequencyMatrix::golden_mean(), HullParams::new(2.0, 1), None);
        let w = p(&[0.37]);
        let shifted = pot.alpha.shift(&w, &[17]);
        assert_eq!(pot.value(&w, &[17]), pot.value(&shifted, &[0]));
        assert_eq!(pot.value(&w, &[0]), hull(&w, &pot.theta, &pot.params, DEFAULT_TOL).value);
    }

    #[test]
    fn conditional_structure_is_affine_in_one_generation() {
        // Freezing every coefficient except generation n, V(x) moves with slope
        // +-a_n in theta_{n, k(x)}.
        let hp = HullParams::new(0.3, 1);
        let alpha = FrequencyMatrix::golden_mean();
        let w = p(&[0.2]);
        let n = 6;
        let base = ThetaField::new(4);
        for x in -20i64..=20 {
            let pt = alpha.shift(&w, &[x]);
            let idx = cell_index(&pt, n);
            let at = |t: f64| {
                let mut th = base.clone();
                th.set(idx.clone(), t);
                hull_truncated(&pt, &th, 10, &hp)
            };
            let (v0, v1, vh) = (at(0.0), at(1.0), at(0.5));
            let slope = v1 - v0;
            let expect = amplitude(n, &hp).to_f64() * f64::from(haar_sign(&pt, n));
            assert!((slope - expect).abs() < 1e-14);
            assert!((vh - (v0 + 0.5 * slope)).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn hull_range(w in 0.0f64..1.0, seed in any::<u64>()) {
            let hp = HullParams::new(2.0, 1);
            let v = hull(&p(&[w]), &ThetaField::new(seed), &hp, DEFAULT_TOL).value;
            let tail: f64 = (1..10).map(|n| amplitude(n, &hp).to_f64()).sum();
            prop_assert!(v >= -tail && v <= 1.0 + tail);
        }

        #[test]
        fn tail_domination(w in 0.0f64..1.0, seed in any::<u64>(), n in 0u32..5) {
            let hp = HullParams::new(2.0, 1);
            let th = ThetaField::new(seed);
            let pt = p(&[w]);
            let diff = (hull_truncated(&pt, &th, n + 10, &hp) - hull_truncated(&pt, &th, n, &hp)).abs();
            prop_assert!(LogMagnitude::from_f64(diff) <= tail_bound(n, &hp));
        }
    }
}
