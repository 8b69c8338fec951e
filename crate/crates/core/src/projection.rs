//! Galerkin projections `P_N^(1)`, `P_N^(2)` and the massive heat semigroup.
//!
//! `P_N^(i)` multiplies `e_k` by `ψ_i(2^{-N}|k_1|) ψ_i(2^{-N}|k_2|) ψ_i(2^{-N}|k_3|)`.
//! Some proofs write the argument as `N^{-1}|k_i|`; the `2^{-N}` scaling is
//! used throughout here. `P_N^(1)` is then supported on `|k_i| < 2^{N+1}`
//! and `P_N^(2)` on `|k_i| < 2^{N+2}`.

use crate::besov::smooth_step;
use crate::error::{Error, Result};
use crate::spectral::{LatticePoint, SpectralField};

/// Which of the two projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Smooth,
    Rough,
}

impl Projection {
    pub fn index(self) -> u8 {
        match self {
            Projection::Smooth => 1,
            Projection::Rough => 2,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Projection::Smooth),
            2 => Ok(Projection::Rough),
            _ => Err(Error::InvalidParameter(format!("projection index {i} is not 1 or 2"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Shape {
    Standard,
    /// Samples `(r, ψ1, ψ2)` on increasing radii, interpolated linearly.
    Tabulated(Vec<[f64; 3]>),
}

/// The one-dimensional profiles `ψ1` (smooth, 1 on `[0,1]`, 0 from 2) and
/// `ψ2` (1 on `[0,2]`, 0 from 4).
///
/// The standard `ψ2` is the linear ramp `clamp((4 - r)/2, 0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CutoffProfile {
    shape: Shape,
}

impl Default for CutoffProfile {
    fn default() -> Self {
        CutoffProfile::standard()
    }
}

impl CutoffProfile {
    pub fn standard() -> Self {
        CutoffProfile { shape: Shape::Standard }
    }

    pub fn psi1(&self, r: f64) -> f64 {
        match &self.shape {
            Shape::Standard => 1.0 - smooth_step(r - 1.0),
            Shape::Tabulated(t) => interpolate(t, r, 1),
        }
    }

    pub fn psi2(&self, r: f64) -> f64 {
        match &self.shape {
            Shape::Standard => ((4.0 - r) / 2.0).clamp(0.0, 1.0),
            Shape::Tabulated(t) => interpolate(t, r, 2),
        }
    }

    pub fn psi(&self, which: Projection, r: f64) -> f64 {
        match which {
            Projection::Smooth => self.psi1(r),
            Projection::Rough => self.psi2(r),
        }
    }

    /// Tensor multiplier of `P_N^(i)` at `k`.
    pub fn weight(&self, which: Projection, n: u32, k: LatticePoint) -> f64 {
        let scale = (-(n as f64)).exp2();
        k.0.iter()
            .map(|&c| self.psi(which, scale * c.unsigned_abs() as f64))
            .product()
    }

    /// Largest `|k_i|` with nonzero weight under `P_N^(i)`.
    pub fn support_radius(&self, which: Projection, n: u32) -> usize {
        let scale = (-(n as f64)).exp2();
        let mut r = 0usize;
        while self.psi(which, scale * (r + 1) as f64) != 0.0 {
            r += 1;
        }
        r
    }

    /// `r,psi1,psi2` samples at `samples` uniform radii in `[0, 5]`.
    pub fn to_csv(&self, samples: usize) -> String {
        let mut out = String::from("r,psi1,psi2\n");
        for i in 0..samples {
            let r = 5.0 * i as f64 / (samples - 1).max(1) as f64;
            out.push_str(&format!("{r:.17e},{:.17e},{:.17e}\n", self.psi1(r), self.psi2(r)));
        }
        out
    }

    /// Parses a table written by [`Self::to_csv`] and checks the profile
    /// constraints on the samples.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().unwrap_or_default();
        if header.trim() != "r,psi1,psi2" {
            return Err(Error::MissingColumn(format!("expected header r,psi1,psi2, got {header}")));
        }
        for line in lines {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidParameter(format!("profile row {line:?}: {e}")))?;
            if vals.len() != 3 {
                return Err(Error::InvalidParameter(format!("profile row {line:?} needs 3 values")));
            }
            rows.push([vals[0], vals[1], vals[2]]);
        }
        validate_table(&rows)?;
        Ok(CutoffProfile { shape: Shape::Tabulated(rows) })
    }
}

fn validate_table(rows: &[[f64; 3]]) -> Result<()> {
    let bad = |msg: &str| Err(Error::InvalidParameter(format!("profile table: {msg}")));
    if rows.len() < 2 || rows[0][0] != 0.0 {
        return bad("needs at least two rows starting at r = 0");
    }
    if rows.last().map(|r| r[0]).unwrap_or(0.0) < 4.0 {
        return bad("must extend to r >= 4");
    }
    for w in rows.windows(2) {
        if w[1][0] <= w[0][0] {
            return bad("radii must increase");
        }
        if w[1][1] > w[0][1] || w[1][2] > w[0][2] {
            return bad("profiles must be nonincreasing");
        }
    }
    for &[r, p1, p2] in rows {
        if (r <= 1.0 && p1 != 1.0) || (r >= 2.0 && p1 != 0.0) {
            return bad("psi1 must be 1 on [0,1] and 0 on [2,∞)");
        }
        if (r <= 2.0 && p2 != 1.0) || (r >= 4.0 && p2 != 0.0) {
            return bad("psi2 must be 1 on [0,2] and 0 on [4,∞)");
        }
    }
    Ok(())
}

fn interpolate(t: &[[f64; 3]], r: f64, col: usize) -> f64 {
    let i = t.partition_point(|row| row[0] <= r);
    if i == 0 {
        return t[0][col];
    }
    if i == t.len() {
        return t[t.len() - 1][col];
    }
    let (a, b) = (t[i - 1], t[i]);
    let w = (r - a[0]) / (b[0] - a[0]);
    if a[col] == b[col] {
        a[col]
    } else {
        a[col] + w * (b[col] - a[col])
    }
}

/// Mass `m0 > 0` of `-Δ + m0²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassParam(f64);

impl MassParam {
    pub fn new(m0: f64) -> Result<Self> {
        if m0.is_finite() && m0 > 0.0 {
            Ok(MassParam(m0))
        } else {
            Err(Error::InvalidParameter(format!("mass {m0} must be positive")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn squared(self) -> f64 {
        self.0 * self.0
    }

    /// `|k|² + m0²`.
    pub fn eigenvalue(self, k: LatticePoint) -> f64 {
        k.norm_sq() as f64 + self.squared()
    }
}

/// `P_N^(i) f`. The output keeps the input cutoff.
pub fn project(which: Projection, n: u32, f: &SpectralField, profile: &CutoffProfile) -> SpectralField {
    f.apply_real_multiplier(|k| profile.weight(which, n, k))
}

/// `(P_N^(i))² f`.
pub fn project_twice(which: Projection, n: u32, f: &SpectralField, profile: &CutoffProfile) -> SpectralField {
    f.apply_real_multiplier(|k| profile.weight(which, n, k).powi(2))
}

/// `e^{t(Δ - m0²)} f`; `m0 = 0` gives the pure heat semigroup.
pub fn semigroup(t: f64, m0: f64, f: &SpectralField) -> Result<SpectralField> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("semigroup time {t} must be nonnegative")));
    }
    if !(m0 >= 0.0 && m0.is_finite()) {
        return Err(Error::InvalidParameter(format!("mass {m0} must be nonnegative")));
    }
    let m2 = m0 * m0;
    Ok(f.apply_real_multiplier(|k| (-t * (k.norm_sq() as f64 + m2)).exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::besov::{dyadic_block, DyadicPartition};
    use crate::spectral::random_field;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn profile_shape() {
        let p = CutoffProfile::standard();
        for i in 0..=5000 {
            let r = i as f64 * 1e-3;
            let (a, b) = (p.psi1(r), p.psi2(r));
            if r <= 1.0 {
                assert_eq!(a, 1.0);
            }
            if r >= 2.0 {
                assert_eq!(a, 0.0);
            }
            if r <= 2.0 {
                assert_eq!(b, 1.0);
            }
            if r >= 4.0 {
                assert_eq!(b, 0.0);
            }
            assert!(a <= b);
            let r2 = r + 1e-3;
            assert!(p.psi1(r2) <= a && p.psi2(r2) <= b);
        }
    }

    #[test]
    fn support_radii() {
        let p = CutoffProfile::standard();
        assert_eq!(p.support_radius(Projection::Smooth, 0), 1);
        assert_eq!(p.support_radius(Projection::Rough, 0), 3);
        for n in 1..5 {
            assert_eq!(p.support_radius(Projection::Smooth, n), (1 << (n + 1)) - 1);
            assert_eq!(p.support_radius(Projection::Rough, n), (1 << (n + 2)) - 1);
        }
    }

    #[test]
    fn sharp_at_level_zero() {
        // At N = 0 the integer lattice only sees ψ1 ∈ {0, 1}.
        let p = CutoffProfile::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field(4, 0.0, &mut rng);
        let once = project(Projection::Smooth, 0, &f, &p);
        assert_eq!(project(Projection::Smooth, 0, &once, &p), once);
        let kept = once.iter().filter(|(_, c)| c.norm() > 0.0).count();
        assert_eq!(kept, 27);
    }

    #[test]
    fn identity_for_large_level() {
        let p = CutoffProfile::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(6, 0.0, &mut rng);
        assert_eq!(project(Projection::Smooth, 3, &f, &p), f);
        assert_eq!(project(Projection::Rough, 2, &f, &p), f);
    }

    #[test]
    fn ramp_kills_outside_support() {
        let p = CutoffProfile::standard();
        for n in 0..3u32 {
            let k = LatticePoint::new(3 << n, 0, 0);
            let e = SpectralField::basis(k, 3 << n).unwrap();
            assert_eq!(project(Projection::Smooth, n, &e, &p).l2_norm(), 0.0);
        }
    }

    #[test]
    fn semigroup_on_basis() {
        let k = LatticePoint::new(1, 2, -2);
        let e = SpectralField::basis(k, 2).unwrap();
        let t = 0.13;
        let out = semigroup(t, 1.5, &e).unwrap();
        let want = (-t * (9.0 + 2.25f64)).exp();
        assert!((out.get(k).re - want).abs() < 1e-15);
        assert_eq!(semigroup(0.0, 1.0, &e).unwrap(), e);
        assert!(semigroup(-1.0, 1.0, &e).is_err());
    }

    #[test]
    fn mass_param_validation() {
        assert!(MassParam::new(0.0).is_err());
        assert!(MassParam::new(f64::NAN).is_err());
        let m = MassParam::new(2.0).unwrap();
        assert_eq!(m.eigenvalue(LatticePoint::new(1, 1, 1)), 7.0);
    }

    #[test]
    fn csv_round_trip() {
        let p = CutoffProfile::standard();
        let text = p.to_csv(501);
        let q = CutoffProfile::from_csv(&text).unwrap();
        for r in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 3.99, 4.0, 6.0] {
            assert!((q.psi1(r) - p.psi1(r)).abs() < 1e-3);
            assert!((q.psi2(r) - p.psi2(r)).abs() < 1e-12);
        }
        assert!(CutoffProfile::from_csv("r,psi1,psi2\n0,1,1\n4,0.5,0\n").is_err());
        assert!(CutoffProfile::from_csv("x,y\n").is_err());
    }

    #[test]
    fn tabulated_profile_keeps_composition_identity() {
        let q = CutoffProfile::from_csv(&CutoffProfile::standard().to_csv(201)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(8, 0.0, &mut rng);
        for n in 0..3 {
            let a = project(Projection::Smooth, n, &project(Projection::Rough, n, &f, &q), &q);
            assert_eq!(a, project(Projection::Smooth, n, &f, &q));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn composition_identity(seed in any::<u64>(), n in 0u32..3) {
            let p = CutoffProfile::standard();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(8, -0.5, &mut rng);
            let p1 = project(Projection::Smooth, n, &f, &p);
            let a = project(Projection::Smooth, n, &project(Projection::Rough, n, &f, &p), &p);
            let b = project(Projection::Rough, n, &p1, &p);
            prop_assert!(a.max_abs_diff(&p1) <= 1e-14 * p1.max_amplitude().max(1.0));
            prop_assert!(b.max_abs_diff(&p1) <= 1e-14 * p1.max_amplitude().max(1.0));
        }

        #[test]
        fn commutes_with_blocks(seed in any::<u64>(), n in 0u32..3, j in -1i32..5) {
            let p = CutoffProfile::standard();
            let part = DyadicPartition::build().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(6, 0.0, &mut rng);
            let a = project(Projection::Rough, n, &dyadic_block(j, &f, &part), &p);
            let b = dyadic_block(j, &project(Projection::Rough, n, &f, &p), &part);
            prop_assert!(a.max_abs_diff(&b) <= 1e-15);
        }

        #[test]
        fn semigroup_property(seed in any::<u64>(), s in 0.0f64..0.5, t in 0.0f64..0.5, m0 in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(5, 0.0, &mut rng);
            let a = semigroup(s, m0, &semigroup(t, m0, &f).unwrap()).unwrap();
            let b = semigroup(s + t, m0, &f).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }
}
