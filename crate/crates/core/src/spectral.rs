//! Fields on the torus `(R / 2πZ)^3` in the orthonormal Fourier basis
//! `e_k(x) = exp(i k·x) / (2π)^{3/2}`.
//!
//! Every constant downstream (renormalization sums, covariances, the
//! scalar-to-`e_0` conversion) is expressed in this normalization, so
//! [`BASIS_NORM`] and [`INV_BASIS_NORM`] are the single source of truth.
//!
//! A [`SpectralField`] stores the dense cube `|k_i| <= K` of amplitudes
//! `c_k = <f, e_k>` in row-major order with `kx` slowest.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftDirection;

use crate::error::{Error, Result};
use crate::fft::{fft3, smooth_size};

/// `(2π)^{-3/2}`, the modulus of every basis function.
pub const BASIS_NORM: f64 = 0.063_493_635_934_240_97;
/// `(2π)^{3/2}`, the `e_0` amplitude of the constant function 1.
pub const INV_BASIS_NORM: f64 = 15.749_609_945_722_419;
/// Volume of the torus, `(2π)^3`.
pub const VOLUME: f64 = 8.0 * PI * PI * PI;

/// Tolerance used to accept a field as Hermitian on construction.
pub const SYMMETRY_TOL: f64 = 1e-10;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// A mode index `k ∈ Z^3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatticePoint(pub [i32; 3]);

impl LatticePoint {
    pub const ORIGIN: LatticePoint = LatticePoint([0, 0, 0]);

    pub fn new(kx: i32, ky: i32, kz: i32) -> Self {
        LatticePoint([kx, ky, kz])
    }

    /// `|k|^2`.
    pub fn norm_sq(self) -> i64 {
        self.0.iter().map(|&c| (c as i64) * (c as i64)).sum()
    }

    pub fn norm(self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    /// `max_i |k_i|`.
    pub fn max_abs(self) -> u32 {
        self.0.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }

    pub fn is_origin(self) -> bool {
        self.0 == [0, 0, 0]
    }

    /// True for one representative of each `{k, -k}` pair (the origin excluded):
    /// the first nonzero component is positive.
    pub fn in_upper_half(self) -> bool {
        match self.0.iter().find(|&&c| c != 0) {
            Some(&c) => c > 0,
            None => false,
        }
    }
}

impl Neg for LatticePoint {
    type Output = LatticePoint;
    fn neg(self) -> LatticePoint {
        LatticePoint([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl Add for LatticePoint {
    type Output = LatticePoint;
    fn add(self, o: LatticePoint) -> LatticePoint {
        LatticePoint([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for LatticePoint {
    type Output = LatticePoint;
    fn sub(self, o: LatticePoint) -> LatticePoint {
        LatticePoint([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

/// Iterates the cube `|k_i| <= cutoff` in storage order.
pub fn lattice_cube(cutoff: usize) -> impl Iterator<Item = LatticePoint> {
    let k = cutoff as i32;
    (-k..=k).flat_map(move |x| (-k..=k).flat_map(move |y| (-k..=k).map(move |z| LatticePoint([x, y, z]))))
}

#[inline]
fn side(cutoff: usize) -> usize {
    2 * cutoff + 1
}

#[inline]
fn flat_index(cutoff: usize, k: LatticePoint) -> usize {
    let s = side(cutoff);
    let c = cutoff as i32;
    (((k.0[0] + c) as usize * s) + (k.0[1] + c) as usize) * s + (k.0[2] + c) as usize
}

/// Fourier coefficients of a periodic field on a truncated lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    cutoff: usize,
    real: bool,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    /// The zero field, flagged real.
    pub fn zeros(cutoff: usize) -> Self {
        SpectralField {
            cutoff,
            real: true,
            coeffs: vec![ZERO; side(cutoff).pow(3)],
        }
    }

    /// Builds a field from a dense coefficient array.
    ///
    /// With `real = true` the array must be Hermitian to within
    /// [`SYMMETRY_TOL`] (relative to the largest amplitude); it is then
    /// symmetrized exactly.
    pub fn from_coeffs(cutoff: usize, coeffs: Vec<Complex64>, real: bool) -> Result<Self> {
        let expected = side(cutoff).pow(3);
        if coeffs.len() != expected {
            return Err(Error::ShapeMismatch {
                got: coeffs.len(),
                expected,
                cutoff,
            });
        }
        let mut field = SpectralField { cutoff, real: false, coeffs };
        for (k, c) in field.iter() {
            if !(c.re.is_finite() && c.im.is_finite()) {
                return Err(Error::NonFinite(k.0));
            }
        }
        if real {
            let (defect, at) = field.symmetry_defect_at();
            if defect > SYMMETRY_TOL * field.max_amplitude().max(1.0) {
                return Err(Error::SymmetryViolation { deviation: defect, at: at.0 });
            }
            field.symmetrize();
        }
        Ok(field)
    }

    /// Real field filled in storage order: `value(true)` once for the origin
    /// (imaginary part dropped), then `value(false)` for each index past it,
    /// mirrored onto `-k`.
    pub fn from_half(cutoff: usize, mut value: impl FnMut(bool) -> Complex64) -> SpectralField {
        let n = side(cutoff).pow(3);
        let mut coeffs = vec![ZERO; n];
        let origin = n / 2;
        coeffs[origin] = Complex64::new(value(true).re, 0.0);
        for i in origin + 1..n {
            let c = value(false);
            coeffs[i] = c;
            coeffs[n - 1 - i] = c.conj();
        }
        SpectralField { cutoff, real: true, coeffs }
    }

    /// Builds a field by evaluating `f` on every lattice point of the cube.
    pub fn from_fn(cutoff: usize, real: bool, f: impl Fn(LatticePoint) -> Complex64) -> Result<Self> {
        let coeffs = lattice_cube(cutoff).map(f).collect();
        Self::from_coeffs(cutoff, coeffs, real)
    }

    /// The basis function `e_k` on a cube of the given cutoff.
    pub fn basis(k: LatticePoint, cutoff: usize) -> Result<Self> {
        if k.max_abs() as usize > cutoff {
            return Err(Error::InvalidParameter(format!("{k:?} lies outside cutoff {cutoff}")));
        }
        let mut field = SpectralField::zeros(cutoff);
        field.coeffs[flat_index(cutoff, k)] = Complex64::new(1.0, 0.0);
        field.real = k.is_origin();
        Ok(field)
    }

    /// The constant function with value `value` everywhere.
    pub fn constant(value: f64, cutoff: usize) -> Self {
        let mut field = SpectralField::zeros(cutoff);
        field.coeffs[flat_index(cutoff, LatticePoint::ORIGIN)] = Complex64::new(value * INV_BASIS_NORM, 0.0);
        field
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<Complex64> {
        self.coeffs
    }

    /// Amplitude at `k`; zero outside the stored cube.
    pub fn get(&self, k: LatticePoint) -> Complex64 {
        if k.max_abs() as usize > self.cutoff {
            ZERO
        } else {
            self.coeffs[flat_index(self.cutoff, k)]
        }
    }

    /// `(k, c_k)` pairs in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (LatticePoint, Complex64)> + '_ {
        lattice_cube(self.cutoff).zip(self.coeffs.iter().copied())
    }

    /// Mean value of the field over the torus.
    pub fn mean(&self) -> f64 {
        self.get(LatticePoint::ORIGIN).re * BASIS_NORM
    }

    /// Truncates to, or zero-pads up to, a new cutoff.
    pub fn with_cutoff(&self, cutoff: usize) -> SpectralField {
        if cutoff == self.cutoff {
            return self.clone();
        }
        let mut out = SpectralField::zeros(cutoff);
        out.real = self.real;
        let common = cutoff.min(self.cutoff);
        for k in lattice_cube(common) {
            out.coeffs[flat_index(cutoff, k)] = self.coeffs[flat_index(self.cutoff, k)];
        }
        out
    }

    /// `Σ |c_k|^2 = ‖f‖²_{L²}`.
    pub fn l2_norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_sq().sqrt()
    }

    pub fn max_amplitude(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Largest coefficient difference, treating missing modes as zero.
    pub fn max_abs_diff(&self, other: &SpectralField) -> f64 {
        let k = self.cutoff.max(other.cutoff);
        lattice_cube(k)
            .map(|p| (self.get(p) - other.get(p)).norm())
            .fold(0.0, f64::max)
    }

    /// `max_k |c_{-k} - conj(c_k)|`.
    pub fn symmetry_defect(&self) -> f64 {
        self.symmetry_defect_at().0
    }

    fn symmetry_defect_at(&self) -> (f64, LatticePoint) {
        let mut worst = (0.0, LatticePoint::ORIGIN);
        for (k, c) in self.iter() {
            let d = (self.coeffs[flat_index(self.cutoff, -k)] - c.conj()).norm();
            if d > worst.0 {
                worst = (d, k);
            }
        }
        worst
    }

    /// Replaces `c_k` by `(c_k + conj(c_{-k})) / 2`; the result is
    /// Hermitian bit-for-bit and flagged real.
    fn symmetrize(&mut self) {
        let n = self.coeffs.len();
        for i in 0..n {
            let j = n - 1 - i;
            if i > j {
                break;
            }
            if i == j {
                self.coeffs[i].im = 0.0;
                continue;
            }
            let a = self.coeffs[i];
            let b = self.coeffs[j];
            let sym = (a + b.conj()) * 0.5;
            self.coeffs[i] = sym;
            self.coeffs[j] = sym.conj();
        }
        self.real = true;
    }

    /// Drops the real flag check: re-derives it from the coefficients.
    pub fn try_into_real(mut self) -> Result<SpectralField> {
        let (defect, at) = self.symmetry_defect_at();
        if defect > SYMMETRY_TOL * self.max_amplitude().max(1.0) {
            return Err(Error::SymmetryViolation { deviation: defect, at: at.0 });
        }
        self.symmetrize();
        Ok(self)
    }

    /// Subtracts the constant function `value` (shifts `c_0` by `value·(2π)^{3/2}`).
    pub fn sub_constant(mut self, value: f64) -> SpectralField {
        let i = flat_index(self.cutoff, LatticePoint::ORIGIN);
        self.coeffs[i].re -= value * INV_BASIS_NORM;
        self
    }

    /// `self += a * other`, zero-padding `self` if `other` has a larger cutoff.
    pub fn add_scaled(&mut self, a: f64, other: &SpectralField) {
        if other.cutoff > self.cutoff {
            *self = self.with_cutoff(other.cutoff);
        }
        if other.cutoff == self.cutoff {
            for (x, y) in self.coeffs.iter_mut().zip(&other.coeffs) {
                *x += y * a;
            }
        } else {
            for (k, c) in other.iter() {
                self.coeffs[flat_index(self.cutoff, k)] += c * a;
            }
        }
        self.real &= other.real;
    }

    pub fn scaled(&self, a: f64) -> SpectralField {
        SpectralField {
            cutoff: self.cutoff,
            real: self.real,
            coeffs: self.coeffs.iter().map(|c| c * a).collect(),
        }
    }

    /// Coefficient-wise product with a real multiplier `h(k)`.
    ///
    /// The real flag survives exactly when `h(-k) = h(k)` on the lattice.
    pub fn apply_real_multiplier(&self, h: impl Fn(LatticePoint) -> f64) -> SpectralField {
        let weights: Vec<f64> = lattice_cube(self.cutoff).map(&h).collect();
        let n = weights.len();
        let even = (0..n).all(|i| weights[i] == weights[n - 1 - i]);
        let coeffs = self.coeffs.iter().zip(&weights).map(|(c, w)| c * *w).collect();
        SpectralField {
            cutoff: self.cutoff,
            real: self.real && even,
            coeffs,
        }
    }

    /// Coefficient-wise product with a complex multiplier `h(k)`; the real
    /// flag is kept iff `h(-k) = conj(h(k))` to within 1e-14.
    pub fn apply_multiplier(&self, h: impl Fn(LatticePoint) -> Complex64) -> SpectralField {
        let weights: Vec<Complex64> = lattice_cube(self.cutoff).map(&h).collect();
        let n = weights.len();
        let scale = weights.iter().map(|w| w.norm()).fold(1.0, f64::max);
        let symmetric = (0..n).all(|i| (weights[n - 1 - i] - weights[i].conj()).norm() <= 1e-14 * scale);
        let coeffs = self.coeffs.iter().zip(&weights).map(|(c, w)| c * w).collect();
        let mut out = SpectralField {
            cutoff: self.cutoff,
            real: false,
            coeffs,
        };
        if self.real && symmetric {
            out.symmetrize();
        }
        out
    }

    /// Like [`apply_multiplier`](Self::apply_multiplier) but fails when a real
    /// input would lose its real flag.
    pub fn try_apply_multiplier(&self, h: impl Fn(LatticePoint) -> Complex64) -> Result<SpectralField> {
        let out = self.apply_multiplier(h);
        if self.real && !out.real {
            return Err(Error::RealityLost);
        }
        Ok(out)
    }
}

/// A real multiplier tabulated once on a lattice cube, for hot loops.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiplierTable {
    cutoff: usize,
    weights: Vec<f64>,
    even: bool,
}

impl MultiplierTable {
    pub fn new(cutoff: usize, h: impl Fn(LatticePoint) -> f64) -> Self {
        let weights: Vec<f64> = lattice_cube(cutoff).map(h).collect();
        let n = weights.len();
        let even = (0..n).all(|i| weights[i] == weights[n - 1 - i]);
        MultiplierTable { cutoff, weights, even }
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, k: LatticePoint) -> f64 {
        if k.max_abs() as usize > self.cutoff {
            return 0.0;
        }
        self.weights[flat_index(self.cutoff, k)]
    }

    /// `h(k) c_k` on the table's cube (`f` is padded or truncated first).
    pub fn apply(&self, f: &SpectralField) -> SpectralField {
        let src;
        let f = if f.cutoff == self.cutoff {
            f
        } else {
            src = f.with_cutoff(self.cutoff);
            &src
        };
        SpectralField {
            cutoff: self.cutoff,
            real: f.real && self.even,
            coeffs: f.coeffs.iter().zip(&self.weights).map(|(c, w)| c * *w).collect(),
        }
    }

    /// `acc += a · h(k) c_k`; `acc` must live on the table's cube.
    pub fn apply_add(&self, a: f64, f: &SpectralField, acc: &mut SpectralField) {
        assert_eq!(acc.cutoff, self.cutoff, "accumulator cutoff");
        if f.cutoff == self.cutoff {
            for ((x, c), w) in acc.coeffs.iter_mut().zip(&f.coeffs).zip(&self.weights) {
                *x += c * (a * w);
            }
        } else {
            for (k, c) in f.iter() {
                if k.max_abs() as usize <= self.cutoff {
                    let i = flat_index(self.cutoff, k);
                    acc.coeffs[i] += c * (a * self.weights[i]);
                }
            }
        }
        acc.real &= f.real && self.even;
    }
}

impl Add for &SpectralField {
    type Output = SpectralField;
    fn add(self, rhs: &SpectralField) -> SpectralField {
        let mut out = self.with_cutoff(self.cutoff.max(rhs.cutoff));
        out.add_scaled(1.0, rhs);
        out
    }
}

impl Sub for &SpectralField {
    type Output = SpectralField;
    fn sub(self, rhs: &SpectralField) -> SpectralField {
        let mut out = self.with_cutoff(self.cutoff.max(rhs.cutoff));
        out.add_scaled(-1.0, rhs);
        out
    }
}

impl Mul<f64> for &SpectralField {
    type Output = SpectralField;
    fn mul(self, a: f64) -> SpectralField {
        self.scaled(a)
    }
}

impl Neg for &SpectralField {
    type Output = SpectralField;
    fn neg(self) -> SpectralField {
        self.scaled(-1.0)
    }
}

/// Samples of a real field on the uniform grid `x_j = 2π j / M`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    m: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != m * m * m {
            return Err(Error::Dimension(format!("{} values for a {m}^3 grid", values.len())));
        }
        Ok(GridField { m, values })
    }

    /// Samples `f` at the grid points.
    pub fn from_fn(m: usize, f: impl Fn([f64; 3]) -> f64) -> Self {
        let h = 2.0 * PI / m as f64;
        let mut values = Vec::with_capacity(m * m * m);
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    values.push(f([a as f64 * h, b as f64 * h, c as f64 * h]));
                }
            }
        }
        GridField { m, values }
    }

    pub fn resolution(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Grid quadrature of `|f|^p` raised to `1/p`.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let cell = VOLUME / self.values.len() as f64;
        (self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * cell).powf(1.0 / p)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &GridField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn wrap(k: i32, m: usize) -> usize {
    k.rem_euclid(m as i32) as usize
}

/// Evaluates `Σ c_k e_k(x_j)` on an `m^3` grid as complex values.
pub fn synthesize(f: &SpectralField, m: usize) -> Result<Vec<Complex64>> {
    let required = 2 * f.cutoff + 1;
    if m < required {
        return Err(Error::ResolutionTooSmall { grid: m, cutoff: f.cutoff, required });
    }
    Ok(synthesize_unchecked(f, m))
}

fn synthesize_unchecked(f: &SpectralField, m: usize) -> Vec<Complex64> {
    let mut buf = vec![ZERO; m * m * m];
    let wraps = wrapped_axis(f.cutoff, m);
    let mut src = f.coeffs.iter();
    for &x in &wraps {
        for &y in &wraps {
            let row = (x * m + y) * m;
            for &z in &wraps {
                buf[row + z] += src.next().expect("cube size") * BASIS_NORM;
            }
        }
    }
    fft3(&mut buf, m, FftDirection::Inverse);
    buf
}

/// Grid index along one axis of each wavenumber `-K..=K`.
fn wrapped_axis(cutoff: usize, m: usize) -> Vec<usize> {
    let c = cutoff as i32;
    (-c..=c).map(|k| wrap(k, m)).collect()
}

/// Quadrature coefficients `<g, e_k>` for `|k_i| <= cutoff` from complex grid
/// samples; exact when `g` is band-limited to `B` and `m > B + cutoff`.
fn analyze_unchecked(mut buf: Vec<Complex64>, m: usize, cutoff: usize) -> Vec<Complex64> {
    fft3(&mut buf, m, FftDirection::Forward);
    let scale = INV_BASIS_NORM / (m * m * m) as f64;
    let wraps = wrapped_axis(cutoff, m);
    let mut out = Vec::with_capacity(wraps.len().pow(3));
    for &x in &wraps {
        for &y in &wraps {
            let row = (x * m + y) * m;
            out.extend(wraps.iter().map(|&z| buf[row + z] * scale));
        }
    }
    out
}

/// Coefficients `c_k = <g, e_k>` of grid samples, `|k_i| <= cutoff`.
pub fn forward_transform(g: &GridField, cutoff: usize) -> Result<SpectralField> {
    let required = 2 * cutoff + 1;
    if g.m < required {
        return Err(Error::ResolutionTooSmall { grid: g.m, cutoff, required });
    }
    let buf = g.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    SpectralField::from_coeffs(cutoff, analyze_unchecked(buf, g.m, cutoff), true)
}

/// Pointwise synthesis of a real field on an `m^3` grid.
pub fn inverse_transform(f: &SpectralField, m: usize) -> Result<GridField> {
    if !f.real {
        let (defect, at) = f.symmetry_defect_at();
        if defect > SYMMETRY_TOL * f.max_amplitude().max(1.0) {
            return Err(Error::SymmetryViolation { deviation: defect, at: at.0 });
        }
    }
    let values = synthesize(f, m)?.into_iter().map(|c| c.re).collect();
    Ok(GridField { m, values })
}

/// `<f, g> = Σ f_k conj(g_k)`, the smaller cube zero-padded.
pub fn inner_product(f: &SpectralField, g: &SpectralField) -> Complex64 {
    if f.cutoff == g.cutoff {
        return f.coeffs.iter().zip(&g.coeffs).map(|(a, b)| a * b.conj()).sum();
    }
    let common = f.cutoff.min(g.cutoff);
    lattice_cube(common).map(|k| f.get(k) * g.get(k).conj()).sum()
}

/// Accumulates sums of pointwise products on one padded grid and transforms
/// once at the end.
///
/// The retained coefficients (`|k_i| <= out_cutoff`) are exact provided every
/// product added has total band limit `B` with `m > B + out_cutoff`.
pub struct ProductAccumulator {
    m: usize,
    out_cutoff: usize,
    max_band: usize,
    real: bool,
    buf: Vec<Complex64>,
}

impl ProductAccumulator {
    /// `max_band` is the largest `Σ K_i` over the products that will be added.
    pub fn new(max_band: usize, out_cutoff: usize) -> Self {
        let m = smooth_size(max_band + out_cutoff + 1).max(smooth_size(2 * out_cutoff + 1));
        ProductAccumulator {
            m,
            out_cutoff,
            max_band,
            real: true,
            buf: vec![ZERO; m * m * m],
        }
    }

    pub fn resolution(&self) -> usize {
        self.m
    }

    /// Adds `Π factors` (pointwise).
    pub fn add_product(&mut self, factors: &[&SpectralField]) {
        self.add_scaled_product(1.0, factors)
    }

    pub fn add_scaled_product(&mut self, scale: f64, factors: &[&SpectralField]) {
        let band: usize = factors.iter().map(|f| f.cutoff).sum();
        assert!(band <= self.max_band, "product band {band} exceeds accumulator band {}", self.max_band);
        let mut iter = factors.iter();
        let Some(first) = iter.next() else { return };
        let mut prod = synthesize_unchecked(first, self.m);
        for f in iter {
            let g = synthesize_unchecked(f, self.m);
            for (p, v) in prod.iter_mut().zip(&g) {
                *p *= v;
            }
        }
        for (b, p) in self.buf.iter_mut().zip(&prod) {
            *b += p * scale;
        }
        self.real &= factors.iter().all(|f| f.real);
    }

    /// Adds `Π factors` given pre-synthesized grids (each from [`Self::grid_of`]).
    pub fn add_grid_product(&mut self, grids: &[&[Complex64]], real: bool) {
        for (i, b) in self.buf.iter_mut().enumerate() {
            let mut p = Complex64::new(1.0, 0.0);
            for g in grids {
                p *= g[i];
            }
            *b += p;
        }
        self.real &= real;
    }

    /// Grid samples of `f` at this accumulator's resolution.
    pub fn grid_of(&self, f: &SpectralField) -> Vec<Complex64> {
        synthesize_unchecked(f, self.m)
    }

    pub fn finish(self) -> SpectralField {
        let coeffs = analyze_unchecked(self.buf, self.m, self.out_cutoff);
        let mut out = SpectralField {
            cutoff: self.out_cutoff,
            real: false,
            coeffs,
        };
        if self.real {
            out.symmetrize();
        }
        out
    }
}

/// Exact coefficients of `f · g` up to `|k_i| <= K_f + K_g` (no aliasing).
pub fn pointwise_product(f: &SpectralField, g: &SpectralField) -> SpectralField {
    product_truncated(&[f, g], f.cutoff + g.cutoff)
}

/// Exact coefficients of `Π factors` for `|k_i| <= out_cutoff`.
pub fn product_truncated(factors: &[&SpectralField], out_cutoff: usize) -> SpectralField {
    let band = factors.iter().map(|f| f.cutoff).sum();
    let mut acc = ProductAccumulator::new(band, out_cutoff);
    acc.add_product(factors);
    acc.finish()
}

/// Exact coefficients of `f^n` for `|k_i| <= out_cutoff`.
pub fn power_truncated(f: &SpectralField, n: usize, out_cutoff: usize) -> SpectralField {
    let mut acc = ProductAccumulator::new(n * f.cutoff, out_cutoff);
    let mut grid = acc.grid_of(f);
    for v in grid.iter_mut() {
        *v = v.powu(n as u32);
    }
    acc.add_grid_product(&[&grid], f.real);
    acc.finish()
}

/// `f³` truncated back to the cube of `f`, by direct convolution.
///
/// Cheaper than the FFT route for the small cubes of the interacting modes.
/// Uses Hermitian symmetry, so inputs must be real.
#[derive(Clone, Debug)]
pub struct CubicPower {
    cutoff: usize,
    /// `(i, j, target, multiplicity)` for `i <= j`, target in the doubled cube.
    square: Vec<(u32, u32, u32, f64)>,
    /// Per output `k` (origin and upper half): `(k - l, l)` index pairs.
    cube: Vec<(u32, Vec<(u32, u32)>)>,
}

impl CubicPower {
    pub fn new(cutoff: usize) -> Self {
        let pts: Vec<LatticePoint> = lattice_cube(cutoff).collect();
        let mut square = Vec::new();
        for (i, a) in pts.iter().enumerate() {
            for (j, b) in pts.iter().enumerate().skip(i) {
                let t = flat_index(2 * cutoff, *a + *b) as u32;
                square.push((i as u32, j as u32, t, if i == j { 1.0 } else { 2.0 }));
            }
        }
        let c = cutoff as u32;
        let cube = pts
            .iter()
            .enumerate()
            .filter(|(_, k)| k.is_origin() || k.in_upper_half())
            .map(|(i, k)| {
                let terms = pts
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| (*k - **l).max_abs() <= 2 * c)
                    .map(|(j, l)| (flat_index(2 * cutoff, *k - *l) as u32, j as u32))
                    .collect();
                (i as u32, terms)
            })
            .collect();
        CubicPower { cutoff, square, cube }
    }

    pub fn apply(&self, f: &SpectralField) -> SpectralField {
        assert_eq!(f.cutoff, self.cutoff, "cubic power cutoff");
        if !f.real {
            return power_truncated(f, 3, self.cutoff);
        }
        let p = &f.coeffs;
        let mut sq = vec![ZERO; side(2 * self.cutoff).pow(3)];
        for &(i, j, t, mult) in &self.square {
            sq[t as usize] += p[i as usize] * p[j as usize] * (mult * BASIS_NORM);
        }
        let n = p.len();
        let mut out = vec![ZERO; n];
        for (i, terms) in &self.cube {
            let mut acc = ZERO;
            for &(a, b) in terms {
                acc += sq[a as usize] * p[b as usize];
            }
            let i = *i as usize;
            out[i] = acc * BASIS_NORM;
            out[n - 1 - i] = out[i].conj();
        }
        let origin = n / 2;
        out[origin].im = 0.0;
        SpectralField { cutoff: self.cutoff, real: true, coeffs: out }
    }
}

/// A real random field with independent Gaussian amplitudes of standard
/// deviation `(1 + |k|^2)^{-(s + 3/2)/2}`, so that dyadic blocks scale like
/// `2^{-js}` in `L^2`.
pub fn random_field<R: Rng + ?Sized>(cutoff: usize, s: f64, rng: &mut R) -> SpectralField {
    let mut coeffs = vec![ZERO; side(cutoff).pow(3)];
    for k in lattice_cube(cutoff) {
        let sd = (1.0 + k.norm_sq() as f64).powf(-(s + 1.5) / 2.0);
        if k.is_origin() {
            let x: f64 = rng.sample(StandardNormal);
            coeffs[flat_index(cutoff, k)] = Complex64::new(sd * x, 0.0);
        } else if k.in_upper_half() {
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            let c = Complex64::new(a, b) * (sd / std::f64::consts::SQRT_2);
            coeffs[flat_index(cutoff, k)] = c;
            coeffs[flat_index(cutoff, -k)] = c.conj();
        }
    }
    SpectralField {
        cutoff,
        real: true,
        coeffs,
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"PHI4";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Writes the little-endian binary snapshot: magic, version, cutoff, real
/// flag, then `(2K+1)^3` complex doubles (re, im) in storage order.
pub fn write_snapshot<W: Write>(f: &SpectralField, mut w: W) -> Result<()> {
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&(f.cutoff as u32).to_le_bytes())?;
    w.write_all(&[f.real as u8])?;
    for c in &f.coeffs {
        w.write_all(&c.re.to_le_bytes())?;
        w.write_all(&c.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<SpectralField> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let cutoff = u32::from_le_bytes(word) as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let n = side(cutoff).pow(3);
    let mut bytes = vec![0u8; n * 16];
    r.read_exact(&mut bytes)?;
    let coeffs = bytes
        .chunks_exact(16)
        .map(|ch| {
            let re = f64::from_le_bytes(ch[..8].try_into().unwrap());
            let im = f64::from_le_bytes(ch[8..].try_into().unwrap());
            Complex64::new(re, im)
        })
        .collect();
    SpectralField::from_coeffs(cutoff, coeffs, flag[0] != 0)
}

/// CSV rows `kx,ky,kz,re,im` in storage order, with a header line.
pub fn to_csv(f: &SpectralField) -> String {
    let mut out = String::from("kx,ky,kz,re,im\n");
    for (k, c) in f.iter() {
        out.push_str(&format!("{},{},{},{:e},{:e}\n", k.0[0], k.0[1], k.0[2], c.re, c.im));
    }
    out
}
