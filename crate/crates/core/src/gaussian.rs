//! Moments of real and complex Gaussian vectors.
//!
//! Covariances are bilinear, `Cov(Z_i, Z_j) = E[(Z_i - EZ_i)(Z_j - EZ_j)]`,
//! with no conjugation. A spec is stored as `Z = mean + A g` with `g` a real
//! standard normal vector, so `Cov = A Aᵀ`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Largest moment order accepted by the pairing recursion.
pub const MAX_ORDER: usize = 12;
/// Largest order for the permutation-sum formula (`8! = 40320` terms).
pub const MAX_PERMUTATION_ORDER: usize = 8;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    mean: Vec<Complex64>,
    /// Row-major `n × r`.
    factor: Vec<Complex64>,
    rank: usize,
    cov: Vec<Complex64>,
}

impl GaussianSpec {
    /// `Z = mean + A g` with `A` given row-major as `n × rank`.
    pub fn from_factor(mean: Vec<Complex64>, factor: Vec<Complex64>, rank: usize) -> Result<Self> {
        let n = mean.len();
        if factor.len() != n * rank {
            return Err(Error::Dimension(format!(
                "factor has {} entries, expected {n} × {rank}",
                factor.len()
            )));
        }
        let mut cov = vec![ZERO; n * n];
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] = (0..rank).map(|r| factor[i * rank + r] * factor[j * rank + r]).sum();
            }
        }
        Ok(GaussianSpec { mean, factor, rank, cov })
    }

    /// Real Gaussian with a symmetric positive semidefinite covariance.
    pub fn from_real_covariance(mean: Vec<f64>, cov: &[f64]) -> Result<Self> {
        let n = mean.len();
        if cov.len() != n * n {
            return Err(Error::Dimension(format!("covariance has {} entries, expected {}", cov.len(), n * n)));
        }
        let l = cholesky_psd(cov, n)?;
        GaussianSpec::from_factor(
            mean.into_iter().map(|m| Complex64::new(m, 0.0)).collect(),
            l.into_iter().map(|v| Complex64::new(v, 0.0)).collect(),
            n,
        )
    }

    /// A random complex spec of dimension `n`.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let rank = n + 1;
        let mut draw = || Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
        let mean: Vec<Complex64> = (0..n).map(|_| draw() * 0.5).collect();
        let factor: Vec<Complex64> = (0..n * rank).map(|_| draw() * 0.5).collect();
        GaussianSpec::from_factor(mean, factor, rank).expect("dimensions match")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[Complex64] {
        &self.mean
    }

    pub fn cov(&self, i: usize, j: usize) -> Complex64 {
        self.cov[i * self.dim() + j]
    }

    /// The spec of `B Z + b` for a `m × n` matrix `B` (row-major).
    pub fn transform(&self, b: &[Complex64], shift: &[Complex64]) -> Result<Self> {
        let n = self.dim();
        let m = shift.len();
        if b.len() != m * n {
            return Err(Error::Dimension(format!("transform has {} entries, expected {m} × {n}", b.len())));
        }
        let mean = (0..m)
            .map(|i| shift[i] + (0..n).map(|j| b[i * n + j] * self.mean[j]).sum::<Complex64>())
            .collect();
        let mut factor = vec![ZERO; m * self.rank];
        for i in 0..m {
            for r in 0..self.rank {
                factor[i * self.rank + r] = (0..n).map(|j| b[i * n + j] * self.factor[j * self.rank + r]).sum();
            }
        }
        GaussianSpec::from_factor(mean, factor, self.rank)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Complex64> {
        let g: Vec<f64> = (0..self.rank).map(|_| rng.sample(StandardNormal)).collect();
        (0..self.dim())
            .map(|i| {
                self.mean[i]
                    + (0..self.rank)
                        .map(|r| self.factor[i * self.rank + r] * g[r])
                        .sum::<Complex64>()
            })
            .collect()
    }

    fn check_indices(&self, indices: &[usize], max: usize) -> Result<()> {
        if indices.len() > max {
            return Err(Error::MomentOrder { order: indices.len(), max });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.dim()) {
            return Err(Error::Dimension(format!("index {bad} out of range for dimension {}", self.dim())));
        }
        Ok(())
    }
}

/// Lower-triangular `L` with `L Lᵀ = C`; zero pivots are allowed for
/// semidefinite input.
fn cholesky_psd(c: &[f64], n: usize) -> Result<Vec<f64>> {
    let scale = (0..n).map(|i| c[i * n + i].abs()).fold(0.0, f64::max).max(1e-300);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = c[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s < -1e-12 * scale {
                    return Err(Error::InvalidParameter("covariance is not positive semidefinite".into()));
                }
                l[i * n + i] = s.max(0.0).sqrt();
            } else if l[j * n + j] > 1e-14 * scale.sqrt() {
                l[i * n + j] = s / l[j * n + j];
            } else if s.abs() > 1e-10 * scale {
                return Err(Error::InvalidParameter("covariance is not positive semidefinite".into()));
            }
        }
    }
    Ok(l)
}

/// `E[Π_p Z_{indices[p]}]` by recursive pairing with memoization.
///
/// Expanding the first factor, `E[Z_i R] = E[Z_i] E[R] + Σ_j Cov(Z_i, Z_j) E[R \ Z_j]`.
pub fn isserlis_moment(spec: &GaussianSpec, indices: &[usize]) -> Result<Complex64> {
    spec.check_indices(indices, MAX_ORDER)?;
    let m = indices.len();
    let full = (1usize << m) - 1;
    let mut memo: Vec<Option<Complex64>> = vec![None; 1 << m];
    Ok(pairing(spec, indices, full, &mut memo))
}

fn pairing(spec: &GaussianSpec, idx: &[usize], set: usize, memo: &mut [Option<Complex64>]) -> Complex64 {
    if set == 0 {
        return ONE;
    }
    if let Some(v) = memo[set] {
        return v;
    }
    let p = set.trailing_zeros() as usize;
    let rest = set & !(1 << p);
    let mut total = spec.mean[idx[p]] * pairing(spec, idx, rest, memo);
    let mut bits = rest;
    while bits != 0 {
        let q = bits.trailing_zeros() as usize;
        bits &= bits - 1;
        let c = spec.cov(idx[p], idx[q]);
        if c != ZERO {
            total += c * pairing(spec, idx, rest & !(1 << q), memo);
        }
    }
    memo[set] = Some(total);
    total
}

/// `E[Π_p Z_{indices[p]}]` by the permutation sum
/// `Σ_i 1/(i! ((m-i)/2)! 2^{(m-i)/2}) Σ_σ Π_{j≤i} E[Z_σ(j)] Π_pairs Cov(Z_σ(·), Z_σ(·))`,
/// where `i` runs over the number of mean factors with `m - i` even.
pub fn isserlis_by_permutations(spec: &GaussianSpec, indices: &[usize]) -> Result<Complex64> {
    spec.check_indices(indices, MAX_PERMUTATION_ORDER)?;
    let m = indices.len();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut sums = vec![ZERO; m + 1];
    loop {
        for i in (m % 2..=m).step_by(2) {
            let mut term = ONE;
            for &p in &perm[..i] {
                term *= spec.mean[indices[p]];
            }
            for pair in perm[i..].chunks(2) {
                term *= spec.cov(indices[pair[0]], indices[pair[1]]);
            }
            sums[i] += term;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    Ok((m % 2..=m)
        .step_by(2)
        .map(|i| {
            let pairs = (m - i) / 2;
            sums[i] / (fact(i) * fact(pairs) * (pairs as f64).exp2())
        })
        .sum())
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Monte-Carlo moment with standard errors of the real and imaginary parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: Complex64,
    pub se_re: f64,
    pub se_im: f64,
}

impl McEstimate {
    /// Largest of the two component z-scores against `target`.
    pub fn z_against(&self, target: Complex64) -> f64 {
        let z = |d: f64, se: f64| if se > 0.0 { d.abs() / se } else if d == 0.0 { 0.0 } else { f64::INFINITY };
        z(self.value.re - target.re, self.se_re).max(z(self.value.im - target.im, self.se_im))
    }
}

pub fn mc_moment<R: Rng + ?Sized>(
    spec: &GaussianSpec,
    indices: &[usize],
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    spec.check_indices(indices, usize::MAX)?;
    if samples < 100 {
        return Err(Error::InvalidParameter(format!("{samples} samples; need at least 100")));
    }
    let (mut s, mut s2re, mut s2im) = (ZERO, 0.0, 0.0);
    for _ in 0..samples {
        let z = spec.sample(rng);
        let v: Complex64 = indices.iter().map(|&i| z[i]).product();
        s += v;
        s2re += v.re * v.re;
        s2im += v.im * v.im;
    }
    let n = samples as f64;
    let mean = s / n;
    let var = |s2: f64, m: f64| ((s2 / n - m * m) * n / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        value: mean,
        se_re: (var(s2re, mean.re) / n).sqrt(),
        se_im: (var(s2im, mean.im) / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn scalar_fourth_moment() {
        let s = GaussianSpec::from_real_covariance(vec![0.0], &[2.5]).unwrap();
        let m = isserlis_moment(&s, &[0, 0, 0, 0]).unwrap();
        assert!((m.re - 3.0 * 2.5 * 2.5).abs() < 1e-12);
        assert_eq!(isserlis_moment(&s, &[0, 0, 0]).unwrap(), ZERO);
    }

    #[test]
    fn four_point_pairings() {
        let cov = [
            2.0, 0.3, 0.1, -0.2, //
            0.3, 1.5, 0.4, 0.05, //
            0.1, 0.4, 1.0, 0.2, //
            -0.2, 0.05, 0.2, 1.2,
        ];
        let s = GaussianSpec::from_real_covariance(vec![0.0; 4], &cov).unwrap();
        let want = s.cov(0, 1) * s.cov(2, 3) + s.cov(0, 2) * s.cov(1, 3) + s.cov(0, 3) * s.cov(1, 2);
        let got = isserlis_moment(&s, &[0, 1, 2, 3]).unwrap();
        assert!((got - want).norm() < 1e-14);
        assert!((s.cov(1, 2) - c(0.4)).norm() < 1e-14);
    }

    #[test]
    fn moments_with_mean() {
        // X ~ N(μ, σ²): E[X³] = μ³ + 3μσ², E[X⁴] = μ⁴ + 6μ²σ² + 3σ⁴.
        let (mu, var) = (0.7, 1.3);
        let s = GaussianSpec::from_real_covariance(vec![mu], &[var]).unwrap();
        let m3 = isserlis_moment(&s, &[0; 3]).unwrap().re;
        let m4 = isserlis_moment(&s, &[0; 4]).unwrap().re;
        assert!((m3 - (mu.powi(3) + 3.0 * mu * var)).abs() < 1e-12);
        assert!((m4 - (mu.powi(4) + 6.0 * mu * mu * var + 3.0 * var * var)).abs() < 1e-12);
        let p3 = isserlis_by_permutations(&s, &[0; 3]).unwrap().re;
        assert!((p3 - m3).abs() < 1e-12);
    }

    #[test]
    fn implementations_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=6 {
            let s = GaussianSpec::random(n, &mut rng);
            for order in 1..=8 {
                let idx: Vec<usize> = (0..order).map(|_| rng.gen_range(0..n)).collect();
                let a = isserlis_moment(&s, &idx).unwrap();
                let b = isserlis_by_permutations(&s, &idx).unwrap();
                assert!((a - b).norm() <= 1e-12 * a.norm().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rank_one_collapses() {
        // Z_i = a_i g: E[Π Z] = Π a_i · E[g^m].
        let a = [Complex64::new(0.5, 0.2), Complex64::new(-1.0, 0.3), Complex64::new(0.8, -0.1)];
        let s = GaussianSpec::from_factor(vec![ZERO; 3], a.to_vec(), 1).unwrap();
        let idx = [0, 1, 2, 2, 1, 0];
        let want = idx.iter().map(|&i| a[i]).product::<Complex64>() * 15.0;
        assert!((isserlis_moment(&s, &idx).unwrap() - want).norm() < 1e-12);
    }

    #[test]
    fn monte_carlo_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = GaussianSpec::random(3, &mut rng);
        let idx = [0, 1, 2, 2];
        let exact = isserlis_moment(&s, &idx).unwrap();
        let mc = mc_moment(&s, &idx, 100_000, &mut rng).unwrap();
        assert!(mc.z_against(exact) < 4.0, "{mc:?} vs {exact}");
    }

    #[test]
    fn transform_two_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = GaussianSpec::random(3, &mut rng);
        let b: Vec<Complex64> = (0..6).map(|i| Complex64::new(0.3 * i as f64 - 0.5, 0.1)).collect();
        let shift = [Complex64::new(0.2, 0.0), Complex64::new(0.0, -0.4)];
        let t = s.transform(&b, &shift).unwrap();
        // Expand E[W_0 W_1 W_1] in moments of Z.
        let w = |i: usize| -> Vec<(Complex64, Option<usize>)> {
            let mut terms = vec![(shift[i], None)];
            terms.extend((0..3).map(|j| (b[i * 3 + j], Some(j))));
            terms
        };
        let mut expanded = ZERO;
        for (ca, ia) in w(0) {
            for (cb, ib) in w(1) {
                for (cc, ic) in w(1) {
                    let idx: Vec<usize> = [ia, ib, ic].into_iter().flatten().collect();
                    expanded += ca * cb * cc * isserlis_moment(&s, &idx).unwrap();
                }
            }
        }
        let direct = isserlis_moment(&t, &[0, 1, 1]).unwrap();
        assert!((direct - expanded).norm() < 1e-10);
    }

    #[test]
    fn rejects_bad_requests() {
        let s = GaussianSpec::from_real_covariance(vec![0.0; 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(isserlis_moment(&s, &[0; 14]), Err(Error::MomentOrder { .. })));
        assert!(isserlis_by_permutations(&s, &[0; 10]).is_err());
        assert!(isserlis_moment(&s, &[2]).is_err());
        assert!(GaussianSpec::from_real_covariance(vec![0.0; 2], &[1.0, 2.0, 2.0, 1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(mc_moment(&s, &[0], 10, &mut rng).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn permutation_symmetric(seed in any::<u64>(), order in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = GaussianSpec::random(4, &mut rng);
            let mut idx: Vec<usize> = (0..order).map(|_| rng.gen_range(0..4)).collect();
            let a = isserlis_moment(&s, &idx).unwrap();
            idx.reverse();
            idx.rotate_left(1);
            let b = isserlis_moment(&s, &idx).unwrap();
            prop_assert!((a - b).norm() <= 1e-12 * a.norm().max(1.0));
        }

        #[test]
        fn complex_reduces_to_real(seed in any::<u64>(), order in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 3;
            let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut cov = vec![0.0; n * n];
            for i in 0..n { for j in 0..n {
                cov[i * n + j] = (0..n).map(|r| a[i * n + r] * a[j * n + r]).sum();
            }}
            let mean: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let real = GaussianSpec::from_real_covariance(mean.clone(), &cov).unwrap();
            let cplx = GaussianSpec::from_factor(
                mean.iter().map(|&m| c(m)).collect(),
                a.iter().map(|&v| c(v)).collect(),
                n,
            ).unwrap();
            let idx: Vec<usize> = (0..order).map(|_| rng.gen_range(0..n)).collect();
            let x = isserlis_moment(&real, &idx).unwrap();
            let y = isserlis_moment(&cplx, &idx).unwrap();
            prop_assert!((x - y).norm() <= 1e-10 * x.norm().max(1.0));
            prop_assert!(y.im.abs() <= 1e-12 * y.norm().max(1.0));
        }
    }
}
