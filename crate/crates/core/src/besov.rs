//! Littlewood–Paley blocks and Besov norms on the torus.
//!
//! The profiles are built from the smooth step
//! `step(x) = σ(x) / (σ(x) + σ(1 - x))`, `σ(x) = exp(-1/x)` for `x > 0`:
//!
//! * `χ(r) = 1 - step((r - 3/4) / (4/3 - 3/4))`, so `χ = 1` on `[0, 3/4]` and
//!   `χ = 0` on `[4/3, ∞)`;
//! * `φ(r) = χ(r/2) - χ(r)`, supported in `[3/4, 8/3]`.
//!
//! `χ(r) + Σ_{j<J} φ(2^{-j} r) = χ(2^{-J} r)` telescopes, which gives the
//! partition of unity; the support constraints give almost-orthogonality.
//!
//! `B^s_{p,p}` coincides with `W^{s,p}` for non-integer `s`; no separate
//! Sobolev norm is provided.

use crate::error::{Error, Result};
use crate::spectral::{inverse_transform, SpectralField};

/// An integrability or summability exponent in `[1, ∞]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinite,
}

impl Exponent {
    pub fn finite(p: f64) -> Result<Self> {
        if p.is_finite() && p >= 1.0 {
            Ok(Exponent::Finite(p))
        } else {
            Err(Error::InvalidParameter(format!("exponent {p} is not in [1, ∞)")))
        }
    }
}

impl std::str::FromStr for Exponent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Exponent::Infinite),
            other => {
                let v = if let Some((a, b)) = other.split_once('/') {
                    let num: f64 = a.trim().parse().map_err(|_| Error::InvalidParameter(other.into()))?;
                    let den: f64 = b.trim().parse().map_err(|_| Error::InvalidParameter(other.into()))?;
                    num / den
                } else {
                    other.parse().map_err(|_| Error::InvalidParameter(other.into()))?
                };
                Exponent::finite(v)
            }
        }
    }
}

/// Smoothness `s`, integrability `p` and summability `r` of `B^s_{p,r}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BesovParams {
    pub s: f64,
    pub p: Exponent,
    pub r: Exponent,
}

impl BesovParams {
    pub fn new(s: f64, p: Exponent, r: Exponent) -> Self {
        BesovParams { s, p, r }
    }

    /// `B^s_p := B^s_{p,∞}`.
    pub fn holder_type(s: f64, p: Exponent) -> Self {
        BesovParams { s, p, r: Exponent::Infinite }
    }
}

const CHI_FLAT: f64 = 0.75;
const CHI_END: f64 = 4.0 / 3.0;

fn sigma(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// `C^∞` step: 0 for `x <= 0`, 1 for `x >= 1`.
pub(crate) fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let a = sigma(x);
        a / (a + sigma(1.0 - x))
    }
}

/// The profiles `χ`, `φ` realizing the dyadic blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DyadicPartition {
    _private: (),
}

impl DyadicPartition {
    /// Builds the partition and checks the partition of unity on a sample grid.
    pub fn build() -> Result<Self> {
        let p = DyadicPartition { _private: () };
        let residual = p.unity_residual(4096.0, 20_000);
        if residual > 1e-12 {
            return Err(Error::PartitionCheck(residual));
        }
        Ok(p)
    }

    pub fn chi(&self, r: f64) -> f64 {
        1.0 - smooth_step((r - CHI_FLAT) / (CHI_END - CHI_FLAT))
    }

    pub fn phi(&self, r: f64) -> f64 {
        self.chi(0.5 * r) - self.chi(r)
    }

    /// Multiplier of `Δ_j` at radius `r`.
    pub fn block_weight(&self, j: i32, r: f64) -> f64 {
        match j {
            j if j < -1 => 0.0,
            -1 => self.chi(r),
            j => self.phi(r * (-j as f64).exp2()),
        }
    }

    /// `χ(r) + Σ_j φ(2^{-j} r)` summed over every block that can be nonzero.
    pub fn unity_sum(&self, r: f64) -> f64 {
        let mut total = self.chi(r);
        let mut j = 0;
        // φ(2^{-j} r) = 0 once 2^{-j} r < 3/4.
        while r * (-j as f64).exp2() >= CHI_FLAT {
            total += self.phi(r * (-j as f64).exp2());
            j += 1;
        }
        total
    }

    /// `sup |unity_sum(r) - 1|` over `samples` uniform radii in `[0, r_max]`.
    pub fn unity_residual(&self, r_max: f64, samples: usize) -> f64 {
        (0..samples)
            .map(|i| {
                let r = r_max * i as f64 / (samples - 1).max(1) as f64;
                (self.unity_sum(r) - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Largest block index that can act on a cutoff-`K` field:
    /// `ceil(log2(√3 K)) + 1`.
    pub fn j_max(&self, cutoff: usize) -> i32 {
        if cutoff == 0 {
            return -1;
        }
        ((3f64.sqrt() * cutoff as f64).log2().ceil() as i32 + 1).max(0)
    }
}

/// Block and partial-sum weights tabulated by `|k|²`, per thread.
#[derive(Default)]
struct WeightCache {
    /// `blocks[j + 1][n]` is the `Δ_j` weight at `|k|² = n`.
    blocks: Vec<Vec<f64>>,
    /// `partial[j][n]` is the `S_j` weight at `|k|² = n`.
    partial: Vec<Vec<f64>>,
}

thread_local! {
    static WEIGHTS: std::cell::RefCell<WeightCache> = std::cell::RefCell::new(WeightCache::default());
}

fn cached_multiplier(
    f: &SpectralField,
    slot: usize,
    pick: fn(&mut WeightCache) -> &mut Vec<Vec<f64>>,
    weight: impl Fn(f64) -> f64,
) -> SpectralField {
    let cutoff = f.cutoff() as i64;
    let n_max = (3 * cutoff * cutoff) as usize;
    WEIGHTS.with(|cell| {
        let mut cache = cell.borrow_mut();
        let tables = pick(&mut cache);
        if tables.len() <= slot {
            tables.resize(slot + 1, Vec::new());
        }
        let table = &mut tables[slot];
        for n in table.len()..=n_max {
            table.push(weight((n as f64).sqrt()));
        }
        f.apply_real_multiplier(|k| table[k.norm_sq() as usize])
    })
}

/// `Δ_j f`.
pub fn dyadic_block(j: i32, f: &SpectralField, partition: &DyadicPartition) -> SpectralField {
    if j < -1 {
        return SpectralField::zeros(f.cutoff());
    }
    cached_multiplier(f, (j + 1) as usize, |c| &mut c.blocks, |r| partition.block_weight(j, r))
}

/// `S_j f = Σ_{k=-1}^{j-1} Δ_k f`, with `S_{-1} f = 0`.
pub fn s_partial(j: i32, f: &SpectralField, partition: &DyadicPartition) -> SpectralField {
    if j <= -1 {
        return SpectralField::zeros(f.cutoff());
    }
    cached_multiplier(f, j as usize, |c| &mut c.partial, |r| s_weight(partition, j, r))
}

fn s_weight(partition: &DyadicPartition, j: i32, r: f64) -> f64 {
    (-1..j).map(|i| partition.block_weight(i, r)).sum()
}

/// Grid resolution used for `L^p` quadrature of cutoff-`K` fields.
pub fn quadrature_resolution(cutoff: usize) -> usize {
    2 * (2 * cutoff + 1)
}

/// `‖f‖_{L^p}`: Parseval for `p = 2`, grid quadrature at `2(2K+1)` points
/// per axis otherwise (exact for `p = 4`; for `p = ∞` the grid maximum).
pub fn lp_norm(f: &SpectralField, p: Exponent) -> f64 {
    match p {
        Exponent::Finite(v) if v == 2.0 => f.l2_norm(),
        Exponent::Finite(v) => grid_of(f).lp_norm(v),
        Exponent::Infinite => grid_of(f).max_abs(),
    }
}

fn grid_of(f: &SpectralField) -> crate::spectral::GridField {
    let real = if f.is_real() {
        f.clone()
    } else {
        f.clone().try_into_real().expect("L^p norms are defined for real fields")
    };
    inverse_transform(&real, quadrature_resolution(f.cutoff())).expect("quadrature grid is large enough")
}

/// `(j, ‖Δ_j f‖_{L^p})` for `j = -1 ..= j_max(K)`.
pub fn block_norms(f: &SpectralField, p: Exponent, partition: &DyadicPartition) -> Vec<(i32, f64)> {
    (-1..=partition.j_max(f.cutoff()))
        .map(|j| (j, lp_norm(&dyadic_block(j, f, partition), p)))
        .collect()
}

/// `‖f‖_{B^s_{p,r}}`.
pub fn besov_norm(f: &SpectralField, params: BesovParams, partition: &DyadicPartition) -> f64 {
    let weighted = block_norms(f, params.p, partition)
        .into_iter()
        .map(|(j, n)| (params.s * j as f64).exp2() * n);
    match params.r {
        Exponent::Infinite => weighted.fold(0.0, f64::max),
        Exponent::Finite(r) => weighted.map(|w| w.powf(r)).sum::<f64>().powf(1.0 / r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::LatticePoint;
    use crate::spectral::{random_field, BASIS_NORM};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn partition() -> DyadicPartition {
        DyadicPartition::build().unwrap()
    }

    #[test]
    fn profile_values() {
        let p = partition();
        assert_eq!(p.chi(0.0), 1.0);
        assert_eq!(p.chi(0.75), 1.0);
        assert_eq!(p.chi(4.0 / 3.0), 0.0);
        assert_eq!(p.phi(0.74), 0.0);
        assert_eq!(p.phi(8.0 / 3.0), 0.0);
        assert_eq!(p.chi(1.5) + p.phi(1.5), 1.0);
        assert_eq!(p.phi(1.5 / 4.0), 0.0);
        assert_eq!(p.phi(1.5 / 8.0), 0.0);
    }

    #[test]
    fn supports_and_disjointness() {
        let p = partition();
        for i in 0..20_000 {
            let r = i as f64 * 1e-3;
            if r >= 4.0 / 3.0 {
                assert_eq!(p.chi(r), 0.0);
            }
            if !(0.75..=8.0 / 3.0).contains(&r) {
                assert_eq!(p.phi(r), 0.0);
            }
            for j in 0..6 {
                for k in j + 2..8 {
                    assert_eq!(p.block_weight(j, r) * p.block_weight(k, r), 0.0);
                }
                if j >= 1 {
                    assert_eq!(p.chi(r) * p.block_weight(j, r), 0.0);
                }
            }
        }
    }

    #[test]
    fn j_max_formula() {
        let p = partition();
        assert_eq!(p.j_max(0), -1);
        assert_eq!(p.j_max(1), 2);
        assert_eq!(p.j_max(8), 5);
        // Blocks beyond j_max vanish on the whole cube.
        for k in [1usize, 3, 8, 16] {
            let rmax = 3f64.sqrt() * k as f64;
            assert_eq!(p.block_weight(p.j_max(k) + 1, rmax), 0.0);
            assert_eq!(p.block_weight(p.j_max(k) + 1, 1.0), 0.0);
        }
    }

    #[test]
    fn constant_field_survives_low_block() {
        let p = partition();
        let c = SpectralField::constant(2.0, 3);
        assert_eq!(dyadic_block(-1, &c, &p), c);
        for j in 0..4 {
            assert_eq!(dyadic_block(j, &c, &p).l2_norm(), 0.0);
        }
    }

    #[test]
    fn basis_function_hits_three_blocks_at_most() {
        let p = partition();
        let k = LatticePoint::new(4, 0, 0);
        let e = SpectralField::basis(k, 4).unwrap();
        for j in -1..6 {
            let n = dyadic_block(j, &e, &p).l2_norm();
            if !(1..=3).contains(&j) {
                assert_eq!(n, 0.0, "j = {j}");
            }
        }
    }

    #[test]
    fn resolution_of_identity() {
        let p = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_field(8, 0.0, &mut rng);
        let mut sum = SpectralField::zeros(8);
        for j in -1..=p.j_max(8) {
            sum.add_scaled(1.0, &dyadic_block(j, &f, &p));
        }
        assert!(sum.max_abs_diff(&f) < 1e-12);
        assert!(s_partial(p.j_max(8) + 2, &f, &p).max_abs_diff(&f) < 1e-12);
        assert_eq!(s_partial(-1, &f, &p).l2_norm(), 0.0);
    }

    #[test]
    fn s_partial_covers_low_modes() {
        let p = partition();
        // Once 2^{j-1}·(4/3) > |k| the partial sum is the identity on e_k.
        let k = LatticePoint::new(2, 1, 0);
        let e = SpectralField::basis(k, 2).unwrap();
        let j = (1..10).find(|&j| (j as f64 - 1.0).exp2() * 4.0 / 3.0 > k.norm()).unwrap();
        assert!(s_partial(j, &e, &p).max_abs_diff(&e) < 1e-15);
    }

    #[test]
    fn almost_orthogonality_exact() {
        let p = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random_field(6, 0.0, &mut rng);
        for i in -1i32..=4 {
            for j in -1..=4 {
                if (i - j).abs() >= 2 {
                    let g = dyadic_block(i, &dyadic_block(j, &f, &p), &p);
                    assert_eq!(g.l2_norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn besov_norm_of_constant() {
        let p = partition();
        let c = 1.7;
        let f = SpectralField::constant(c * BASIS_NORM, 2);
        for pe in [1.0, 2.0, 4.0, 3.0] {
            for s in [-1.0, 0.0, 2.5] {
                let bp = BesovParams::new(s, Exponent::Finite(pe), Exponent::Infinite);
                // Only the j = -1 block is nonzero, weighted by 2^{-s}.
                let want = (-s).exp2() * c * (2.0 * std::f64::consts::PI).powf(3.0 / pe - 1.5);
                let got = besov_norm(&f, bp, &p);
                assert!((got - want).abs() <= 1e-8 * want, "p={pe} s={s}: {got} vs {want}");
            }
        }
        let sup = besov_norm(&f, BesovParams::holder_type(0.0, Exponent::Infinite), &p);
        assert!((sup - c * BASIS_NORM).abs() < 1e-12);
    }

    #[test]
    fn besov_norm_of_basis_function() {
        let p = partition();
        for k in [LatticePoint::new(1, 1, 0), LatticePoint::new(3, 0, 2), LatticePoint::new(2, 2, 2)] {
            let e = SpectralField::basis(k, 3).unwrap();
            // Weights of at most two neighbouring blocks sum to one.
            let two = Exponent::Finite(2.0);
            let sup = besov_norm(&e, BesovParams::new(0.0, two, Exponent::Infinite), &p);
            assert!((0.5..=1.0).contains(&sup), "{sup}");
            let l1 = besov_norm(&e, BesovParams::new(0.0, two, Exponent::Finite(1.0)), &p);
            assert!((l1 - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn blockwise_smoothness_ordering() {
        let p = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_field(6, 0.0, &mut rng);
        let two = Exponent::Finite(2.0);
        for (j, n) in block_norms(&f, two, &p) {
            if j >= 0 {
                assert!((-(j as f64)).exp2() * n <= (j as f64).exp2() * n);
            }
        }
        let rough = besov_norm(&f, BesovParams::holder_type(-1.0, two), &p);
        let smooth = besov_norm(&f, BesovParams::holder_type(1.0, two), &p);
        // Only the j = -1 block is weighted more heavily at s = -1.
        assert!(rough <= 4.0 * smooth);
    }

    #[test]
    fn homogeneity() {
        let p = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = random_field(4, 0.3, &mut rng);
        for bp in [
            BesovParams::new(0.5, Exponent::Finite(2.0), Exponent::Finite(2.0)),
            BesovParams::new(-0.5, Exponent::Finite(4.0), Exponent::Infinite),
            BesovParams::new(1.0, Exponent::Finite(4.0 / 3.0), Exponent::Finite(1.0)),
        ] {
            let a = besov_norm(&f, bp, &p);
            let b = besov_norm(&f.scaled(-3.5), bp, &p);
            assert!((b - 3.5 * a).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn exponent_parsing() {
        assert_eq!("inf".parse::<Exponent>().unwrap(), Exponent::Infinite);
        assert_eq!("4/3".parse::<Exponent>().unwrap(), Exponent::Finite(4.0 / 3.0));
        assert!("0.5".parse::<Exponent>().is_err());
    }
}
