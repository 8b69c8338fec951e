//! The Ornstein–Uhlenbeck field `dZ = dW - (-Δ + m0²) Z dt`, the
//! renormalization constants and the stochastic trees built from `Z`.
//!
//! Noise convention: for `k` in the upper half-lattice `Re ξ_k` and `Im ξ_k`
//! are independent with variance `t/2` each, `ξ_{-k} = conj(ξ_k)`, and `ξ_0`
//! is real with variance `t`. Then `E[ξ_k ξ_l] = t·1{k + l = 0}` and the
//! stationary law has `E|c_k|² = 1/(2(|k|² + m0²))`.
//!
//! Scalar counterterms are subtracted from the constant mode, which carries
//! the factor `(2π)^{3/2}` of the `e_0` normalization.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::paraproduct::{paraproduct, ParaKind};
use crate::besov::DyadicPartition;
use crate::projection::{project, semigroup, CutoffProfile, Projection};
use crate::spectral::{lattice_cube, power_truncated, LatticePoint, MultiplierTable, SpectralField, VOLUME};

/// Default ceiling on evaluated `C₂` summands.
pub const DEFAULT_C2_BUDGET: u64 = 200_000_000;

/// Gaussian increments for one chain, drawn in fixed lattice order.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    /// Stream `stream` of master seed `seed`.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NoiseStream { rng }
    }

    /// Field with `E[ξ_k ξ_l] = 1{k + l = 0}`.
    pub fn standard_field(&mut self, cutoff: usize) -> SpectralField {
        let rng = &mut self.rng;
        SpectralField::from_half(cutoff, |origin| {
            let a: f64 = rng.sample(StandardNormal);
            if origin {
                Complex64::new(a, 0.0)
            } else {
                let b: f64 = rng.sample(StandardNormal);
                Complex64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
            }
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// `|k|² + m0²`.
pub fn eigenvalue(k: LatticePoint, m0: f64) -> f64 {
    k.norm_sq() as f64 + m0 * m0
}

/// `(1 - e^{-a h}) / a`, stable for small `a h`.
pub fn phi1(a: f64, h: f64) -> f64 {
    let x = a * h;
    if x.abs() < 1e-8 {
        h * (1.0 - 0.5 * x)
    } else {
        -(-x).exp_m1() / a
    }
}

/// Exact OU transition over one step `h` at a fixed cutoff. Multipliers are
/// tabulated on the kernel's cube; inputs on other cubes are padded or
/// truncated to it.
#[derive(Clone, Debug)]
pub struct OuKernel {
    cutoff: usize,
    m0: f64,
    h: f64,
    decay: MultiplierTable,
    integral: MultiplierTable,
    noise_sd: MultiplierTable,
}

impl OuKernel {
    pub fn new(cutoff: usize, m0: f64, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!("step {h} must be positive")));
        }
        if !(m0 > 0.0 && m0.is_finite()) {
            return Err(Error::InvalidParameter(format!("mass {m0} must be positive")));
        }
        Ok(OuKernel {
            cutoff,
            m0,
            h,
            decay: MultiplierTable::new(cutoff, |k| (-h * eigenvalue(k, m0)).exp()),
            integral: MultiplierTable::new(cutoff, |k| phi1(eigenvalue(k, m0), h)),
            noise_sd: MultiplierTable::new(cutoff, |k| ou_noise_variance(eigenvalue(k, m0), h).sqrt()),
        })
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn mass(&self) -> f64 {
        self.m0
    }

    /// `e^{-a h} c_k`.
    pub fn decay(&self, f: &SpectralField) -> SpectralField {
        self.decay.apply(f)
    }

    /// `((1 - e^{-a h}) / a) c_k`.
    pub fn integrate(&self, f: &SpectralField) -> SpectralField {
        self.integral.apply(f)
    }

    /// `acc += a · ((1 - e^{-a h}) / a) f`.
    pub fn integrate_into(&self, scale: f64, f: &SpectralField, acc: &mut SpectralField) {
        self.integral.apply_add(scale, f, acc)
    }

    /// Variance of the stochastic integral over one step.
    pub fn noise_variance(&self, k: LatticePoint) -> f64 {
        ou_noise_variance(eigenvalue(k, self.m0), self.h)
    }

    /// Scales a standard field into an exact one-step increment.
    pub fn increment(&self, standard: &SpectralField) -> SpectralField {
        self.noise_sd.apply(standard)
    }

    pub fn draw_increment(&self, noise: &mut NoiseStream) -> SpectralField {
        self.increment(&noise.standard_field(self.cutoff))
    }

    /// `e^{-a h} z + ξ`.
    pub fn apply(&self, z: &SpectralField, increment: &SpectralField) -> SpectralField {
        let mut out = self.decay(z);
        out.add_scaled(1.0, increment);
        out
    }

    /// Increment over `2h` from two consecutive increments over `h`:
    /// `e^{-a h} ξ₁ + ξ₂`.
    pub fn compose(&self, first: &SpectralField, second: &SpectralField) -> SpectralField {
        self.apply(first, second)
    }

    /// Kernel for step `2h`.
    pub fn doubled(&self) -> OuKernel {
        OuKernel::new(self.cutoff, self.m0, 2.0 * self.h).expect("validated")
    }

    pub fn halved(&self) -> OuKernel {
        OuKernel::new(self.cutoff, self.m0, 0.5 * self.h).expect("validated")
    }
}

/// `(1 - e^{-2 a h}) / (2a)`.
pub fn ou_noise_variance(a: f64, h: f64) -> f64 {
    -(-2.0 * a * h).exp_m1() / (2.0 * a)
}

/// A stationary draw: independent modes with `E|c_k|² = 1/(2(|k|² + m0²))`.
pub fn stationary_field(cutoff: usize, m0: f64, noise: &mut NoiseStream) -> SpectralField {
    noise
        .standard_field(cutoff)
        .apply_real_multiplier(|k| (0.5 / eigenvalue(k, m0)).sqrt())
}

/// `C₁`, `C₂` for one `(N, m0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenormConstants {
    pub level: u32,
    pub m0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl RenormConstants {
    pub fn compute(level: u32, m0: f64, profile: &CutoffProfile, budget: u64) -> Result<Self> {
        Ok(RenormConstants {
            level,
            m0,
            c1: renorm_c1(level, m0, profile),
            c2: renorm_c2(level, m0, profile, budget)?,
        })
    }

    /// `C₁ - 3λC₂`.
    pub fn effective(&self, lambda: f64) -> f64 {
        self.c1 - 3.0 * lambda * self.c2
    }
}

/// `C₁ = (1/(2(2π)³)) Σ_k w(k)² / (|k|² + m0²)` with `w` the `P_N^(1)` weight.
pub fn renorm_c1(level: u32, m0: f64, profile: &CutoffProfile) -> f64 {
    let r = profile.support_radius(Projection::Smooth, level);
    let sum: f64 = lattice_cube(r)
        .map(|k| profile.weight(Projection::Smooth, level, k).powi(2) / eigenvalue(k, m0))
        .sum();
    sum / (2.0 * VOLUME)
}

/// `C₂ = (1/(2(2π)⁶)) Σ_{l1,l2} w(l1)² w(l2)² w(l1+l2)² /
/// ((l1² + m0²)(l2² + m0²)(l1² + l2² + (l1+l2)² + 3m0²))`.
///
/// The summand is symmetric in `(l1, l2)`, so only `l1 <= l2` (in storage
/// order) is visited. Fails with [`Error::Budget`] if that exceeds `budget`.
pub fn renorm_c2(level: u32, m0: f64, profile: &CutoffProfile, budget: u64) -> Result<f64> {
    let r = profile.support_radius(Projection::Smooth, level) as i32;
    // ψ1(2^{-N}|i|)² for |i| <= 2r.
    let scale = (-(level as f64)).exp2();
    let table: Vec<f64> = (-2 * r..=2 * r)
        .map(|i| profile.psi1(scale * i.unsigned_abs() as f64).powi(2))
        .collect();
    let w2 = |k: [i32; 3]| -> f64 { k.iter().map(|&c| table[(c + 2 * r) as usize]).product() };
    let points: Vec<([i32; 3], f64, f64)> = lattice_cube(r as usize)
        .map(|k| (k.0, w2(k.0), k.norm_sq() as f64))
        .filter(|p| p.1 != 0.0)
        .collect();
    let n = points.len() as u64;
    let terms = n * (n + 1) / 2;
    if terms > budget {
        return Err(Error::Budget { terms, budget });
    }
    let m2 = m0 * m0;
    let mut total = 0.0;
    for (i, &(l1, w1, n1)) in points.iter().enumerate() {
        let mut row = 0.0;
        for (j, &(l2, w2v, n2)) in points.iter().enumerate().skip(i) {
            let s = [l1[0] + l2[0], l1[1] + l2[1], l1[2] + l2[2]];
            let w12 = w2(s);
            if w12 == 0.0 {
                continue;
            }
            let n12 = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]) as f64;
            let term = w1 * w2v * w12 / ((n1 + m2) * (n2 + m2) * (n1 + n2 + n12 + 3.0 * m2));
            row += if j == i { term } else { 2.0 * term };
        }
        total += row;
    }
    Ok(total / (2.0 * VOLUME * VOLUME))
}

/// `V ← e^{-a h} V + ((1 - e^{-a h})/a) F` with `F` sampled at the midpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvolutionAccumulator {
    value: SpectralField,
    m0: f64,
}

impl ConvolutionAccumulator {
    pub fn new(cutoff: usize, m0: f64) -> Self {
        ConvolutionAccumulator { value: SpectralField::zeros(cutoff), m0 }
    }

    pub fn value(&self) -> &SpectralField {
        &self.value
    }

    pub fn set(&mut self, value: SpectralField) {
        self.value = value;
    }

    pub fn advance(&mut self, h: f64, forcing: &SpectralField) {
        let m0 = self.m0;
        let f = forcing.with_cutoff(self.value.cutoff());
        let mut next = self.value.apply_real_multiplier(|k| (-h * eigenvalue(k, m0)).exp());
        next.add_scaled(1.0, &f.apply_real_multiplier(|k| phi1(eigenvalue(k, m0), h)));
        self.value = next;
    }
}

/// Static ingredients of the trees at one level.
#[derive(Clone, Debug)]
pub struct TreeContext {
    pub level: u32,
    pub m0: f64,
    pub profile: CutoffProfile,
    pub consts: RenormConstants,
    pub partition: DyadicPartition,
}

impl TreeContext {
    pub fn new(level: u32, m0: f64, profile: CutoffProfile, budget: u64) -> Result<Self> {
        let consts = RenormConstants::compute(level, m0, &profile, budget)?;
        Ok(TreeContext {
            level,
            m0,
            profile,
            consts,
            partition: DyadicPartition::build()?,
        })
    }

    /// Largest `|k_i|` kept by `P_N^(1)`.
    pub fn smooth_radius(&self) -> usize {
        self.profile.support_radius(Projection::Smooth, self.level)
    }

    /// `𝒵^(1) = P_N^(1) Z`, truncated to the support of `P_N^(1)`.
    pub fn wick1(&self, z: &SpectralField) -> SpectralField {
        project(Projection::Smooth, self.level, &z.with_cutoff(self.smooth_radius()), &self.profile)
    }

    /// `𝒵^(2) = (P_N^(1) Z)² - C₁`, exact up to `|k_i| <= out`.
    pub fn wick2_from(&self, z1: &SpectralField, out: usize) -> SpectralField {
        power_truncated(z1, 2, out).sub_constant(self.consts.c1)
    }

    /// `𝒵^(3) = (P_N^(1) Z)³ - 3C₁ P_N^(1) Z`, exact up to `|k_i| <= out`.
    pub fn wick3_from(&self, z1: &SpectralField, out: usize) -> SpectralField {
        let mut f = power_truncated(z1, 3, out);
        f.add_scaled(-3.0 * self.consts.c1, z1);
        f.with_cutoff(out)
    }

    /// Forcings of the three running convolutions at one instant:
    /// `(P1 𝒵^(2), P1 𝒵^(3), P1² 𝒵^(2))`, all on the `P_N^(1)` support.
    fn forcings(&self, z: &SpectralField) -> [SpectralField; 3] {
        let r = self.smooth_radius();
        let z1 = self.wick1(z);
        let z2 = self.wick2_from(&z1, r);
        let z3 = self.wick3_from(&z1, r);
        let p = |f: &SpectralField| project(Projection::Smooth, self.level, f, &self.profile);
        let pz2 = p(&z2);
        let ppz2 = p(&pz2);
        [pz2, p(&z3), ppz2]
    }
}

/// Snapshot of every tree at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct Trees {
    pub z1: SpectralField,
    pub z2: SpectralField,
    pub z3: SpectralField,
    pub z02: SpectralField,
    pub z03: SpectralField,
    pub z22: SpectralField,
    pub z23: SpectralField,
    /// `∫_{-∞}^t e^{(t-s)(Δ-m0²)} (P1)² 𝒵^(2)_s ds`.
    pub conv22: SpectralField,
}

impl Trees {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &SpectralField)> {
        [
            ("z1", &self.z1),
            ("z2", &self.z2),
            ("z3", &self.z3),
            ("z02", &self.z02),
            ("z03", &self.z03),
            ("z22", &self.z22),
            ("z23", &self.z23),
        ]
        .into_iter()
    }
}

/// One OU path together with the running tree convolutions.
#[derive(Clone, Debug)]
pub struct OuEnsemble {
    ctx: TreeContext,
    t: f64,
    z: SpectralField,
    z02: ConvolutionAccumulator,
    z03: ConvolutionAccumulator,
    conv22: ConvolutionAccumulator,
    /// `conv22` at `t = 0`, for the pre-history term `e^{tL} conv22(0)`.
    conv22_origin: SpectralField,
    burn_in: f64,
}

impl OuEnsemble {
    /// Stationary `Z` on cutoff `max(cutoff, P1 radius)`, convolutions at 0.
    pub fn init_stationary(ctx: TreeContext, cutoff: usize, noise: &mut NoiseStream) -> Self {
        let r = ctx.smooth_radius();
        let k = cutoff.max(r);
        let z = stationary_field(k, ctx.m0, noise);
        let m0 = ctx.m0;
        OuEnsemble {
            t: 0.0,
            z,
            z02: ConvolutionAccumulator::new(r, m0),
            z03: ConvolutionAccumulator::new(r, m0),
            conv22: ConvolutionAccumulator::new(r, m0),
            conv22_origin: SpectralField::zeros(r),
            burn_in: 0.0,
            ctx,
        }
    }

    /// Replaces the `(-∞, 0]` history by a run of length `duration` started
    /// from zero convolutions, then resets the clock to 0.
    pub fn burn_in(&mut self, duration: f64, h: f64, noise: &mut NoiseStream) -> Result<()> {
        let m2 = self.ctx.m0 * self.ctx.m0;
        if duration < 10.0 / m2 {
            log::warn!(
                "burn-in {duration} is shorter than 10/m0² = {}; stationarity bias e^(-m0² T) = {:.3e}",
                10.0 / m2,
                (-m2 * duration).exp()
            );
        }
        let kernel = OuKernel::new(self.z.cutoff(), self.ctx.m0, 0.5 * h)?;
        let steps = (duration / h).round() as usize;
        for _ in 0..steps {
            let a = kernel.draw_increment(noise);
            let b = kernel.draw_increment(noise);
            self.advance(&kernel, &a, &b);
        }
        self.restart_clock(steps as f64 * h);
        Ok(())
    }

    /// Declares the path run so far to be history: the clock goes back to
    /// 0 and `conv22` is recorded as the pre-history term.
    pub fn restart_clock(&mut self, elapsed: f64) {
        self.burn_in += elapsed;
        self.t = 0.0;
        self.conv22_origin = self.conv22.value().clone();
    }

    /// Default burn-in length `20/m0²`.
    pub fn default_burn_in(m0: f64) -> f64 {
        20.0 / (m0 * m0)
    }

    pub fn context(&self) -> &TreeContext {
        &self.ctx
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn burn_in_length(&self) -> f64 {
        self.burn_in
    }

    pub fn z(&self) -> &SpectralField {
        &self.z
    }

    /// Advances by `2 h` using two half-step increments from `half` (a
    /// kernel with step `h`). Returns the composed full-step increment,
    /// which drives any field sharing this noise path.
    pub fn advance(&mut self, half: &OuKernel, first: &SpectralField, second: &SpectralField) -> SpectralField {
        let dt = 2.0 * half.step_size();
        let mid = half.apply(&self.z, first);
        let [f02, f03, f22] = self.ctx.forcings(&mid);
        self.z02.advance(dt, &f02);
        self.z03.advance(dt, &f03);
        self.conv22.advance(dt, &f22);
        self.z = half.apply(&mid, second);
        self.t += dt;
        half.compose(first, second)
    }

    /// One step of size `dt` drawing fresh noise; returns the increment.
    pub fn step(&mut self, dt: f64, noise: &mut NoiseStream) -> Result<SpectralField> {
        let half = OuKernel::new(self.z.cutoff(), self.ctx.m0, 0.5 * dt)?;
        let a = half.draw_increment(noise);
        let b = half.draw_increment(noise);
        Ok(self.advance(&half, &a, &b))
    }

    pub fn z02(&self) -> &SpectralField {
        self.z02.value()
    }

    pub fn z03(&self) -> &SpectralField {
        self.z03.value()
    }

    pub fn conv22(&self) -> &SpectralField {
        self.conv22.value()
    }

    /// `e^{t(Δ-m0²)} conv22(0)`: the part of `conv22` from before time 0.
    pub fn conv22_history(&self) -> SpectralField {
        semigroup(self.t, self.ctx.m0, &self.conv22_origin).expect("t >= 0")
    }

    /// `𝒵^(2)` on its full band `2R`.
    pub fn wick2(&self) -> SpectralField {
        let z1 = self.ctx.wick1(&self.z);
        self.ctx.wick2_from(&z1, 2 * self.ctx.smooth_radius())
    }

    /// `𝒵^(3)` on its full band `3R`.
    pub fn wick3(&self) -> SpectralField {
        let z1 = self.ctx.wick1(&self.z);
        self.ctx.wick3_from(&z1, 3 * self.ctx.smooth_radius())
    }

    /// `(𝒵^(2,2), 𝒵^(2,3))`.
    pub fn resonant(&self) -> (SpectralField, SpectralField) {
        let z2 = self.wick2();
        self.resonant_with(&z2, &self.ctx.wick1(&self.z))
    }

    fn resonant_with(&self, z2: &SpectralField, z1: &SpectralField) -> (SpectralField, SpectralField) {
        let c2 = self.ctx.consts.c2;
        let part = &self.ctx.partition;
        let z22 = paraproduct(z2, self.conv22(), ParaKind::Res, part).sub_constant(c2);
        let mut z23 = paraproduct(z2, self.z03(), ParaKind::Res, part);
        z23.add_scaled(-3.0 * c2, z1);
        (z22, z23)
    }

    pub fn trees(&self) -> Trees {
        let r = self.ctx.smooth_radius();
        let z1 = self.ctx.wick1(&self.z);
        let z2 = self.ctx.wick2_from(&z1, 2 * r);
        let z3 = self.ctx.wick3_from(&z1, 3 * r);
        let (z22, z23) = self.resonant_with(&z2, &z1);
        Trees {
            z1,
            z2,
            z3,
            z02: self.z02().clone(),
            z03: self.z03().clone(),
            z22,
            z23,
            conv22: self.conv22().clone(),
        }
    }
}

/// Independent replicas of stationary `Z`, for ensemble statistics.
pub fn stationary_samples(cutoff: usize, m0: f64, count: usize, seed: u64) -> Vec<SpectralField> {
    (0..count)
        .map(|i| stationary_field(cutoff, m0, &mut NoiseStream::new(seed, i as u64)))
        .collect()
}

/// Samples a real scalar standard normal from a stream.
pub fn normal(noise: &mut NoiseStream) -> f64 {
    noise.rng().sample(StandardNormal)
}
