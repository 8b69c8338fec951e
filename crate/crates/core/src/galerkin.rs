//! Galerkin dynamics of the cut-off model
//! `dY = dW - (-Δ + m0²)Y dt - λ P1[(P1 Y)³ - 3(C₁ - 3λC₂) P1 Y] dt`,
//! its Gibbs measure, and the invariance experiment.
//!
//! With the noise convention of [`crate::ou`] (`E|c_k|² = 1/(2a)` for the
//! free field) the dynamics leaves `exp(-2U)·μ̃₀` invariant, where `μ̃₀` is
//! the free field law. The sampler targets that density.

use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ou::{eigenvalue, stationary_field, NoiseStream, OuKernel, RenormConstants};
use crate::projection::{CutoffProfile, Projection};
use crate::spectral::{lattice_cube, power_truncated, CubicPower, LatticePoint, MultiplierTable, SpectralField};
use crate::stats::{batch_means, bonferroni_threshold, linear_fit, two_sided_level, welch_z, BatchEstimate};

/// Stream index reserved for the Gibbs sampler; chains use `0..chains`.
pub const GIBBS_STREAM: u64 = u64::MAX;

/// Ceiling on `dt · (3K² + m0²)` for the tamed scheme.
pub const TAMED_STABILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Linear part exact per mode, drift frozen over the step.
    ExponentialEuler,
    /// Explicit Euler with the nonlinearity tamed by `1/(1 + dt‖N‖)`.
    TamedEuler,
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential-euler" => Ok(Scheme::ExponentialEuler),
            "tamed-euler" => Ok(Scheme::TamedEuler),
            _ => Err(Error::InvalidParameter(format!("unknown scheme `{s}`"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::ExponentialEuler => "exponential-euler",
            Scheme::TamedEuler => "tamed-euler",
        })
    }
}

/// Which noise drives the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseFilter {
    /// Plain cylindrical noise.
    White,
    /// Noise filtered by `P_N^(2)`; the state is then `P_N^(2)` of the white one.
    Rough,
}

impl FromStr for NoiseFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseFilter::White),
            "rough" => Ok(NoiseFilter::Rough),
            _ => Err(Error::InvalidParameter(format!("unknown noise filter `{s}`"))),
        }
    }
}

impl std::fmt::Display for NoiseFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseFilter::White => "white",
            NoiseFilter::Rough => "rough",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub level: u32,
    pub m0: f64,
    /// `λ = 0` is accepted as the free-field control.
    pub lambda: f64,
    pub lambda0: f64,
    pub dt: f64,
    pub horizon: f64,
    pub scheme: Scheme,
    pub seed: u64,
    /// Real-space resolution for exports; 0 picks `2(2K+1)`.
    pub grid: usize,
    pub chains: usize,
    pub burn_in: f64,
    /// State cube; defaults to the `P_N^(2)` support.
    pub cutoff: Option<usize>,
    pub blowup_ceiling: f64,
    pub noise: NoiseFilter,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            level: 0,
            m0: 1.0,
            lambda: 0.1,
            lambda0: 1.0,
            dt: 1e-3,
            horizon: 1.0,
            scheme: Scheme::ExponentialEuler,
            seed: 0,
            grid: 0,
            chains: 1000,
            burn_in: 0.0,
            cutoff: None,
            blowup_ceiling: 1e6,
            noise: NoiseFilter::White,
        }
    }
}

impl SimConfig {
    pub fn state_cutoff(&self, profile: &CutoffProfile) -> usize {
        let r1 = profile.support_radius(Projection::Smooth, self.level);
        let r2 = profile.support_radius(Projection::Rough, self.level);
        self.cutoff.unwrap_or(r2).max(r1)
    }

    pub fn grid_resolution(&self, profile: &CutoffProfile) -> usize {
        if self.grid == 0 {
            2 * (2 * self.state_cutoff(profile) + 1)
        } else {
            self.grid
        }
    }

    pub fn validate(&self, profile: &CutoffProfile) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.m0 > 0.0 && self.m0.is_finite()) {
            return bad(format!("m0 = {} must be positive", self.m0));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return bad(format!("lambda0 = {} must be positive", self.lambda0));
        }
        if !(0.0..=self.lambda0).contains(&self.lambda) {
            return bad(format!("lambda = {} must lie in [0, lambda0 = {}]", self.lambda, self.lambda0));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon = {} must be non-negative", self.horizon));
        }
        if !(self.burn_in >= 0.0) {
            return bad(format!("burn_in = {} must be non-negative", self.burn_in));
        }
        if !(self.blowup_ceiling > 0.0) {
            return bad("blow-up ceiling must be positive".into());
        }
        let k = self.state_cutoff(profile);
        if self.grid != 0 && self.grid < 2 * k + 1 {
            return Err(Error::ResolutionTooSmall { grid: self.grid, cutoff: k, required: 2 * k + 1 });
        }
        if self.scheme == Scheme::TamedEuler {
            let c = self.dt * (3.0 * (k * k) as f64 + self.m0 * self.m0);
            if c >= TAMED_STABILITY {
                return Err(Error::Unstable(c));
            }
        }
        Ok(())
    }

    /// Number of steps to reach `horizon`; fails unless `horizon/dt` is an integer.
    pub fn steps(&self) -> Result<usize> {
        whole_steps(self.horizon, self.dt)
    }
}

fn whole_steps(horizon: f64, dt: f64) -> Result<usize> {
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > 1e-9 * horizon.max(dt) {
        return Err(Error::InvalidParameter(format!("horizon {horizon} is not a multiple of dt {dt}")));
    }
    Ok(n as usize)
}

/// The cut-off energy
/// `U_N(φ) = ∫ (λ/4)(P1 φ)⁴ - (3λ/2)(C₁ - 3λC₂)(P1 φ)² dx`, computed exactly.
pub fn energy_u(phi: &SpectralField, level: u32, lambda: f64, consts: &RenormConstants, profile: &CutoffProfile) -> f64 {
    let r1 = profile.support_radius(Projection::Smooth, level);
    let w = MultiplierTable::new(r1, |k| profile.weight(Projection::Smooth, level, k));
    quartic_energy(&w.apply(phi), lambda, consts.effective(lambda))
}

fn quartic_energy(p1phi: &SpectralField, lambda: f64, c_eff: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let r1 = p1phi.cutoff();
    let sq = power_truncated(p1phi, 2, 2 * r1);
    0.25 * lambda * sq.l2_norm_sq() - 1.5 * lambda * c_eff * p1phi.l2_norm_sq()
}

/// Full drift `-(-Δ + m0²)Y - λP1[(P1Y)³ - 3(C₁ - 3λC₂)P1Y]`.
pub fn drift(y: &SpectralField, cfg: &SimConfig, consts: &RenormConstants, profile: &CutoffProfile) -> Result<SpectralField> {
    let sys = Galerkin::new(&SimConfig { cutoff: Some(y.cutoff()), ..cfg.clone() }, profile.clone(), *consts)?;
    Ok(sys.drift(y))
}

/// The discretized system at one `(N, m0, λ, dt)` on a fixed state cube.
#[derive(Clone, Debug)]
pub struct Galerkin {
    cfg: SimConfig,
    profile: CutoffProfile,
    consts: RenormConstants,
    cutoff: usize,
    r1: usize,
    c_eff: f64,
    smooth: MultiplierTable,
    smooth_sq: MultiplierTable,
    rough: MultiplierTable,
    neg_eigen: MultiplierTable,
    kernel: OuKernel,
    cubic: std::sync::Arc<CubicPower>,
}

impl Galerkin {
    pub fn new(cfg: &SimConfig, profile: CutoffProfile, consts: RenormConstants) -> Result<Self> {
        cfg.validate(&profile)?;
        if consts.level != cfg.level || consts.m0 != cfg.m0 {
            return Err(Error::InvalidParameter(format!(
                "constants for (N={}, m0={}) used with (N={}, m0={})",
                consts.level, consts.m0, cfg.level, cfg.m0
            )));
        }
        let (n, m0) = (cfg.level, cfg.m0);
        let cutoff = cfg.state_cutoff(&profile);
        let r1 = profile.support_radius(Projection::Smooth, n);
        let w1 = |k| profile.weight(Projection::Smooth, n, k);
        Ok(Galerkin {
            cutoff,
            r1,
            c_eff: consts.effective(cfg.lambda),
            smooth: MultiplierTable::new(r1, w1),
            smooth_sq: MultiplierTable::new(r1, |k| w1(k).powi(2)),
            rough: MultiplierTable::new(cutoff, |k| profile.weight(Projection::Rough, n, k)),
            neg_eigen: MultiplierTable::new(cutoff, |k| -eigenvalue(k, m0)),
            kernel: OuKernel::new(cutoff, m0, cfg.dt)?,
            cubic: std::sync::Arc::new(CubicPower::new(r1)),
            cfg: cfg.clone(),
            profile,
            consts,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn constants(&self) -> &RenormConstants {
        &self.consts
    }

    pub fn profile(&self) -> &CutoffProfile {
        &self.profile
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn smooth_radius(&self) -> usize {
        self.r1
    }

    /// The linear-part kernel used by the exponential scheme.
    pub fn kernel(&self) -> &OuKernel {
        &self.kernel
    }

    /// Same system with another step size.
    pub fn with_dt(&self, dt: f64) -> Result<Galerkin> {
        let cfg = SimConfig { dt, ..self.cfg.clone() };
        cfg.validate(&self.profile)?;
        Ok(Galerkin { kernel: OuKernel::new(self.cutoff, cfg.m0, dt)?, cfg, ..self.clone() })
    }

    /// `P_N^(1) f` on the `P_N^(1)` cube.
    pub fn smooth(&self, f: &SpectralField) -> SpectralField {
        self.smooth.apply(f)
    }

    /// `P_N^(2) f` on the state cube.
    pub fn rough(&self, f: &SpectralField) -> SpectralField {
        self.rough.apply(f)
    }

    pub fn energy(&self, phi: &SpectralField) -> f64 {
        quartic_energy(&self.smooth.apply(phi), self.cfg.lambda, self.c_eff)
    }

    /// `-λP1[(P1Y)³] + 3λ(C₁ - 3λC₂)P1²Y` on the `P_N^(1)` cube.
    pub fn interaction(&self, y: &SpectralField) -> SpectralField {
        let lambda = self.cfg.lambda;
        if lambda == 0.0 {
            return SpectralField::zeros(self.r1);
        }
        let p1y = self.smooth.apply(y);
        let cube = self.cubic.apply(&p1y);
        let mut out = self.smooth.apply(&cube).scaled(-lambda);
        self.smooth_sq.apply_add(3.0 * lambda * self.c_eff, y, &mut out);
        out
    }

    pub fn drift(&self, y: &SpectralField) -> SpectralField {
        let mut out = self.neg_eigen.apply(y);
        out.add_scaled(1.0, &self.interaction(y));
        out
    }

    /// Noise over one step from a standard field on the state cube.
    pub fn increment(&self, standard: &SpectralField) -> SpectralField {
        let inc = match self.cfg.scheme {
            Scheme::ExponentialEuler => self.kernel.increment(standard),
            Scheme::TamedEuler => standard.with_cutoff(self.cutoff).scaled(self.cfg.dt.sqrt()),
        };
        match self.cfg.noise {
            NoiseFilter::White => inc,
            NoiseFilter::Rough => self.rough.apply(&inc),
        }
    }

    pub fn draw_increment(&self, noise: &mut NoiseStream) -> SpectralField {
        self.increment(&noise.standard_field(self.cutoff))
    }

    /// The increment over `2 dt` equivalent to two consecutive ones.
    pub fn combine_increments(&self, first: &SpectralField, second: &SpectralField) -> SpectralField {
        match self.cfg.scheme {
            Scheme::ExponentialEuler => self.kernel.compose(first, second),
            Scheme::TamedEuler => first + second,
        }
    }

    /// One step. Fails with [`Error::BlowUp`] (step index 0) when the new
    /// state is non-finite or its norm exceeds the ceiling.
    pub fn step(&self, y: &SpectralField, increment: &SpectralField) -> Result<SpectralField> {
        let out = match self.cfg.scheme {
            Scheme::ExponentialEuler => {
                let mut out = self.kernel.apply(y, increment);
                if self.cfg.lambda != 0.0 {
                    self.kernel.integrate_into(1.0, &self.interaction(y), &mut out);
                }
                out
            }
            Scheme::TamedEuler => {
                let dt = self.cfg.dt;
                let n = self.interaction(y);
                let tame = dt / (1.0 + dt * n.l2_norm());
                let mut out = y.with_cutoff(self.cutoff);
                out.add_scaled(dt, &self.neg_eigen.apply(y));
                out.add_scaled(tame, &n);
                out.add_scaled(1.0, increment);
                out
            }
        };
        let norm = out.l2_norm();
        if !norm.is_finite() || norm > self.cfg.blowup_ceiling {
            return Err(Error::BlowUp { step: 0, norm, ceiling: self.cfg.blowup_ceiling });
        }
        Ok(out)
    }

    /// `steps` steps with fresh noise, recording every `record_every`-th state.
    pub fn simulate(
        &self,
        y0: &SpectralField,
        steps: usize,
        record_every: usize,
        noise: &mut NoiseStream,
    ) -> Result<Trajectory> {
        let every = record_every.max(1);
        let mut y = y0.with_cutoff(self.cutoff);
        let mut traj = Trajectory { times: vec![0.0], states: vec![y.clone()] };
        for n in 1..=steps {
            let inc = self.draw_increment(noise);
            y = self.step(&y, &inc).map_err(|e| at_step(e, n))?;
            if n % every == 0 || n == steps {
                traj.times.push(n as f64 * self.cfg.dt);
                traj.states.push(y.clone());
            }
        }
        Ok(traj)
    }
}

fn at_step(e: Error, n: usize) -> Error {
    match e {
        Error::BlowUp { norm, ceiling, .. } => {
            log::error!("blow-up at step {n}: norm {norm:e} > ceiling {ceiling:e}");
            Error::BlowUp { step: n, norm, ceiling }
        }
        other => other,
    }
}

/// Recorded states of one path.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SpectralField>,
}

impl Trajectory {
    pub fn observe(&self, f: impl Fn(&SpectralField) -> f64) -> Vec<f64> {
        self.states.iter().map(f).collect()
    }
}

/// Trapezoidal time average `(1/(t_n - t_0)) ∫ f dt` of a sampled path.
pub fn kb_average(times: &[f64], values: &[f64]) -> Result<f64> {
    if times.is_empty() || times.len() != values.len() {
        return Err(Error::InvalidParameter("time average needs matching, non-empty series".into()));
    }
    if times.len() == 1 {
        return Ok(values[0]);
    }
    let span = times[times.len() - 1] - times[0];
    if !(span > 0.0) {
        return Err(Error::InvalidParameter("times must increase".into()));
    }
    let integral: f64 = times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum();
    Ok(integral / span)
}

/// Scalar summaries compared in the invariance experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum Observable {
    /// `‖X‖²_{L²}`.
    L2NormSq,
    /// `∫ (P_N^(1) X)⁴`.
    Quartic,
    /// `|⟨X, e_k⟩|²`.
    Mode(LatticePoint),
}

impl Observable {
    pub fn name(&self) -> String {
        match self {
            Observable::L2NormSq => "l2_norm_sq".into(),
            Observable::Quartic => "quartic".into(),
            Observable::Mode(k) => format!("mode_{}_{}_{}", k.0[0], k.0[1], k.0[2]),
        }
    }

    /// `‖X‖²`, `∫(P1 X)⁴` and the `modes` lowest second moments (one per
    /// `±k` pair, ordered by `|k|` then storage order).
    pub fn standard_set(modes: usize) -> Vec<Observable> {
        let mut ks: Vec<LatticePoint> = lattice_cube(2)
            .filter(|k| k.is_origin() || k.in_upper_half())
            .collect();
        ks.sort_by_key(|k| k.norm_sq());
        let mut out = vec![Observable::L2NormSq, Observable::Quartic];
        out.extend(ks.into_iter().take(modes).map(Observable::Mode));
        out
    }
}

/// Evaluates observables on `X = P_N^(2)` of a state.
#[derive(Clone, Debug)]
pub struct Observer {
    smooth: MultiplierTable,
    rough: MultiplierTable,
}

impl Observer {
    pub fn new(level: u32, cutoff: usize, profile: &CutoffProfile) -> Self {
        let r1 = profile.support_radius(Projection::Smooth, level);
        Observer {
            smooth: MultiplierTable::new(r1, |k| profile.weight(Projection::Smooth, level, k)),
            rough: MultiplierTable::new(cutoff, |k| profile.weight(Projection::Rough, level, k)),
        }
    }

    pub fn eval(&self, obs: &Observable, state: &SpectralField) -> f64 {
        match obs {
            Observable::L2NormSq => self.rough.apply(state).l2_norm_sq(),
            Observable::Quartic => {
                let p = self.smooth.apply(state);
                power_truncated(&p, 2, 2 * p.cutoff()).l2_norm_sq()
            }
            Observable::Mode(k) => (self.rough.get(*k) * state.get(*k)).norm_sqr(),
        }
    }

    pub fn eval_all(&self, obs: &[Observable], state: &SpectralField) -> Vec<f64> {
        obs.iter().map(|o| self.eval(o, state)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GibbsConfig {
    /// Time step of the Langevin proposal.
    pub mala_step: f64,
    /// Samples emitted by [`GibbsSampler::collect_samples`].
    pub samples: usize,
    pub thinning: usize,
    pub warmup: usize,
    /// Target acceptance band.
    pub band: (f64, f64),
    /// Tune `mala_step` during warm-up.
    pub adapt: bool,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            mala_step: 0.5,
            samples: 1000,
            thinning: 5,
            warmup: 2000,
            band: (0.4, 0.8),
            adapt: true,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mala_step > 0.0 && self.mala_step.is_finite()) {
            return Err(Error::InvalidParameter(format!("mala_step = {} must be positive", self.mala_step)));
        }
        if self.thinning == 0 {
            return Err(Error::InvalidParameter("thinning must be at least 1".into()));
        }
        let (lo, hi) = self.band;
        if !(0.0 < lo && lo < hi && hi <= 1.0) {
            return Err(Error::InvalidParameter(format!("acceptance band ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Largest Langevin step the warm-up tuner will use; at this step the
/// proposal is an independent draw from the free field to within `e^{-10}`.
const MAX_MALA_STEP: f64 = 10.0;

/// Metropolis-adjusted Langevin sampler for `exp(-2U_N) μ̃₀`.
///
/// Only the `P_N^(1)` cube interacts; it is sampled by MALA with an
/// exponential-integrator proposal (exact for the free part). Every other
/// mode of the state cube is drawn exactly from the free field.
#[derive(Clone, Debug)]
pub struct GibbsSampler {
    block: Galerkin,
    cutoff: usize,
    cfg: GibbsConfig,
    eigen: MultiplierTable,
    inv_var: MultiplierTable,
    state: SpectralField,
    mean: SpectralField,
    log_pi: f64,
    noise: NoiseStream,
    proposed: usize,
    accepted: usize,
}

impl GibbsSampler {
    /// Starts from `0` and runs the warm-up.
    pub fn new(
        sim: &SimConfig,
        cfg: &GibbsConfig,
        consts: RenormConstants,
        profile: CutoffProfile,
        noise: NoiseStream,
    ) -> Result<Self> {
        cfg.validate()?;
        let cutoff = sim.state_cutoff(&profile);
        let r1 = profile.support_radius(Projection::Smooth, sim.level);
        let block_cfg = SimConfig {
            cutoff: Some(r1),
            dt: cfg.mala_step,
            scheme: Scheme::ExponentialEuler,
            noise: NoiseFilter::White,
            blowup_ceiling: f64::INFINITY,
            ..sim.clone()
        };
        let block = Galerkin::new(&block_cfg, profile, consts)?;
        let m0 = sim.m0;
        let mut s = GibbsSampler {
            eigen: MultiplierTable::new(r1, |k| eigenvalue(k, m0)),
            inv_var: MultiplierTable::new(r1, |_| 0.0),
            state: SpectralField::zeros(r1),
            mean: SpectralField::zeros(r1),
            log_pi: 0.0,
            block,
            cutoff,
            cfg: cfg.clone(),
            noise,
            proposed: 0,
            accepted: 0,
        };
        s.set_step(cfg.mala_step)?;
        s.warm_up()?;
        Ok(s)
    }

    fn set_step(&mut self, h: f64) -> Result<()> {
        self.block = self.block.with_dt(h)?;
        let k = self.block.kernel().clone();
        self.inv_var = MultiplierTable::new(self.block.cutoff(), |p| 1.0 / k.noise_variance(p));
        self.log_pi = self.log_target(&self.state);
        self.mean = self.proposal_mean(&self.state);
        Ok(())
    }

    fn warm_up(&mut self) -> Result<()> {
        const WINDOW: usize = 50;
        let (lo, hi) = self.cfg.band;
        let target = 0.5 * (lo + hi);
        let mut done = 0;
        while done < self.cfg.warmup {
            let n = WINDOW.min(self.cfg.warmup - done);
            let mut acc = 0;
            for _ in 0..n {
                acc += self.mala_step() as usize;
            }
            done += n;
            if self.cfg.adapt {
                let rate = acc as f64 / n as f64;
                let h = self.step_size();
                let next = if rate > target { (h * 1.5).min(MAX_MALA_STEP) } else { h / 1.5 };
                if next != h {
                    self.set_step(next)?;
                }
            }
        }
        self.proposed = 0;
        self.accepted = 0;
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.block.config().dt
    }

    /// `log π(x) = -Σ_k (|k|² + m0²)|x_k|² - 2U(x)` up to a constant.
    pub fn log_target(&self, x: &SpectralField) -> f64 {
        let gauss: f64 = x
            .coeffs()
            .iter()
            .zip(self.eigen.weights())
            .map(|(c, a)| a * c.norm_sqr())
            .sum();
        -gauss - 2.0 * self.block.energy(x)
    }

    fn proposal_mean(&self, x: &SpectralField) -> SpectralField {
        let k = self.block.kernel();
        let mut m = k.decay(x);
        k.integrate_into(1.0, &self.block.interaction(x), &mut m);
        m
    }

    /// `log q(x → y)` up to a constant.
    fn log_proposal(&self, mean_x: &SpectralField, y: &SpectralField) -> f64 {
        let s: f64 = y
            .coeffs()
            .iter()
            .zip(mean_x.coeffs())
            .zip(self.inv_var.weights())
            .map(|((a, b), w)| (a - b).norm_sqr() * w)
            .sum();
        -0.5 * s
    }

    /// Log Metropolis–Hastings ratio for the move `x → y`.
    pub fn log_acceptance(&self, x: &SpectralField, y: &SpectralField) -> f64 {
        let (mx, my) = (self.proposal_mean(x), self.proposal_mean(y));
        self.log_target(y) - self.log_target(x) + self.log_proposal(&my, x) - self.log_proposal(&mx, y)
    }

    fn mala_step(&mut self) -> bool {
        let xi = self.noise.standard_field(self.block.cutoff());
        let mut y = self.block.kernel().increment(&xi);
        y.add_scaled(1.0, &self.mean);
        let log_pi_y = self.log_target(&y);
        let mean_y = self.proposal_mean(&y);
        let log_alpha = log_pi_y - self.log_pi + self.log_proposal(&mean_y, &self.state)
            - self.log_proposal(&self.mean, &y);
        self.proposed += 1;
        let u: f64 = self.noise.rng().gen();
        if u.ln() < log_alpha {
            self.state = y;
            self.mean = mean_y;
            self.log_pi = log_pi_y;
            self.accepted += 1;
            true
        } else {
            false
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Warns (and returns the hint) when acceptance left the band.
    pub fn check_acceptance(&self) -> Option<String> {
        let rate = self.acceptance_rate();
        let (lo, hi) = self.cfg.band;
        let h = self.step_size();
        let hint = if rate < lo {
            format!("MALA acceptance {rate:.3} below {lo}: decrease mala_step (now {h})")
        } else if rate > hi && h < MAX_MALA_STEP {
            format!("MALA acceptance {rate:.3} above {hi}: increase mala_step (now {h})")
        } else {
            return None;
        };
        log::warn!("{hint}");
        Some(hint)
    }

    /// Current interacting block.
    pub fn block_state(&self) -> &SpectralField {
        &self.state
    }

    /// Advances `thinning` steps and returns a full sample on the state cube.
    pub fn draw(&mut self) -> SpectralField {
        for _ in 0..self.cfg.thinning {
            self.mala_step();
        }
        let free = stationary_field(self.cutoff, self.block.config().m0, &mut self.noise);
        let mut out = outside(&free, self.block.cutoff());
        out.add_scaled(1.0, &self.state);
        out
    }

    pub fn collect_samples(&mut self) -> Vec<SpectralField> {
        let out = (0..self.cfg.samples).map(|_| self.draw()).collect();
        self.check_acceptance();
        out
    }
}

impl Iterator for GibbsSampler {
    type Item = SpectralField;
    fn next(&mut self) -> Option<SpectralField> {
        Some(self.draw())
    }
}

/// `f` with the modes of the cube of radius `r` removed.
fn outside(f: &SpectralField, r: usize) -> SpectralField {
    f - &f.with_cutoff(r).with_cutoff(f.cutoff())
}

/// Knobs of the invariance experiment beyond [`SimConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceConfig {
    /// Step sizes `dt·2^j`, `j < ladder`, compared against a `dt/2` reference.
    pub ladder: usize,
    /// Intermediate times at which `E‖X_t‖²` is recorded.
    pub checkpoints: usize,
    pub batches: usize,
    /// Family-wise level of the before/after comparison.
    pub alpha: f64,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        InvarianceConfig {
            ladder: 3,
            checkpoints: 5,
            batches: crate::stats::DEFAULT_BATCHES,
            alpha: two_sided_level(3.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservableTest {
    pub name: String,
    pub before: BatchEstimate,
    pub after: BatchEstimate,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTest {
    pub time: f64,
    pub estimate: BatchEstimate,
    /// Welch z against `t = 0`.
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadderEntry {
    pub dt: f64,
    /// `‖X_T‖² - ‖X_0‖²` averaged over chains.
    pub drift: BatchEstimate,
    /// `‖X_T^{dt}‖² - ‖X_T^{ref}‖²` on common noise.
    pub residual: BatchEstimate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceReport {
    pub lambda: f64,
    pub dt: f64,
    pub reference_dt: f64,
    pub chains: usize,
    pub threshold: f64,
    pub observables: Vec<ObservableTest>,
    pub checkpoints: Vec<CheckpointTest>,
    /// Ordered by decreasing `dt`.
    pub ladder: Vec<LadderEntry>,
    /// Intercept of a linear fit of the mean drift against `dt`.
    pub extrapolated_drift: f64,
    pub acceptance: f64,
}

impl InvarianceReport {
    pub fn max_abs_z(&self) -> f64 {
        self.observables.iter().map(|o| o.z.abs()).fold(0.0, f64::max)
    }

    pub fn observables_pass(&self) -> bool {
        self.max_abs_z() < self.threshold
    }

    pub fn checkpoints_pass(&self, z0: f64) -> bool {
        self.checkpoints.iter().all(|c| c.z.abs() < z0)
    }

    /// `|residual|` strictly decreases as `dt` decreases.
    pub fn residual_monotone(&self) -> bool {
        self.ladder
            .windows(2)
            .all(|w| w[1].residual.mean.abs() < w[0].residual.mean.abs())
    }
}

/// Draws `sim.chains` initial states from the Gibbs measure, evolves each to
/// `sim.horizon`, and compares observables before and after.
///
/// The interacting cube is stepped at `dt·2^j` and at a `dt/2` reference,
/// all on one noise path; the free modes are advanced exactly between
/// checkpoints and shared by every step size.
pub fn invariance_test(
    sim: &SimConfig,
    gibbs: &GibbsConfig,
    inv: &InvarianceConfig,
    observables: &[Observable],
    profile: &CutoffProfile,
    consts: RenormConstants,
) -> Result<InvarianceReport> {
    if inv.ladder == 0 || inv.checkpoints == 0 || sim.chains < 2 {
        return Err(Error::InvalidParameter("invariance test needs ladder, checkpoints and 2+ chains".into()));
    }
    let cutoff = sim.state_cutoff(profile);
    let r1 = profile.support_radius(Projection::Smooth, sim.level);
    let block_cfg = SimConfig { cutoff: Some(r1), noise: NoiseFilter::White, ..sim.clone() };
    let level0 = Galerkin::new(&block_cfg, profile.clone(), consts)?;
    let fine = level0.with_dt(0.5 * sim.dt)?;
    let levels: Vec<Galerkin> = (0..inv.ladder)
        .map(|j| level0.with_dt(sim.dt * (1u64 << j) as f64))
        .collect::<Result<_>>()?;
    let coarse_steps = sim.steps()?;
    let top = 1usize << (inv.ladder - 1);
    if coarse_steps == 0 || coarse_steps % top != 0 || coarse_steps % inv.checkpoints != 0 {
        return Err(Error::InvalidParameter(format!(
            "{coarse_steps} steps must be a positive multiple of {top} and of {} checkpoints",
            inv.checkpoints
        )));
    }
    let fine_steps = 2 * coarse_steps;
    let per_checkpoint = fine_steps / inv.checkpoints;
    let free_kernel = OuKernel::new(cutoff, sim.m0, sim.horizon / inv.checkpoints as f64)?;
    let observer = Observer::new(sim.level, cutoff, profile);
    let mut sampler = GibbsSampler::new(sim, gibbs, consts, profile.clone(), NoiseStream::new(sim.seed, GIBBS_STREAM))?;

    let n_obs = observables.len();
    let mut before = vec![Vec::with_capacity(sim.chains); n_obs];
    let mut after = vec![Vec::with_capacity(sim.chains); n_obs];
    let mut l2_at = vec![Vec::with_capacity(sim.chains); inv.checkpoints + 1];
    let mut drift = vec![Vec::with_capacity(sim.chains); inv.ladder];
    let mut resid = vec![Vec::with_capacity(sim.chains); inv.ladder];
    let l2 = |s: &SpectralField| observer.eval(&Observable::L2NormSq, s);
    let join = |free: &SpectralField, inner: &SpectralField| {
        let mut x = free.clone();
        x.add_scaled(1.0, inner);
        x
    };

    for chain in 0..sim.chains {
        let mut noise = NoiseStream::new(sim.seed, chain as u64);
        let x0 = sampler.draw();
        let inner0 = x0.with_cutoff(r1);
        let mut free = outside(&x0, r1);
        for (i, o) in observables.iter().enumerate() {
            before[i].push(observer.eval(o, &x0));
        }
        let l2_0 = l2(&x0);
        l2_at[0].push(l2_0);

        let mut y_fine = inner0.clone();
        let mut ys = vec![inner0; inv.ladder];
        let mut pending: Vec<Option<SpectralField>> = vec![None; inv.ladder];
        for n in 1..=fine_steps {
            let inc = fine.draw_increment(&mut noise);
            y_fine = fine.step(&y_fine, &inc).map_err(|e| at_step(e, n))?;
            let mut cur = inc;
            for j in 0..inv.ladder {
                match pending[j].take() {
                    None => {
                        pending[j] = Some(cur);
                        break;
                    }
                    Some(first) => {
                        let below = if j == 0 { &fine } else { &levels[j - 1] };
                        cur = below.combine_increments(&first, &cur);
                        ys[j] = levels[j].step(&ys[j], &cur).map_err(|e| at_step(e, n))?;
                    }
                }
            }
            if n % per_checkpoint == 0 {
                let inc = outside(&free_kernel.draw_increment(&mut noise), r1);
                free = free_kernel.apply(&free, &inc);
                l2_at[n / per_checkpoint].push(l2(&join(&free, &ys[0])));
            }
        }
        let x_t = join(&free, &ys[0]);
        for (i, o) in observables.iter().enumerate() {
            after[i].push(observer.eval(o, &x_t));
        }
        let l2_ref = l2(&join(&free, &y_fine));
        for j in 0..inv.ladder {
            let v = l2(&join(&free, &ys[j]));
            drift[j].push(v - l2_0);
            resid[j].push(v - l2_ref);
        }
    }

    let b = inv.batches;
    let obs_tests = observables
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let (pre, post) = (batch_means(&before[i], b), batch_means(&after[i], b));
            ObservableTest { name: o.name(), z: welch_z(post.mean, post.se, pre.mean, pre.se), before: pre, after: post }
        })
        .collect();
    let base = batch_means(&l2_at[0], b);
    let checkpoints = (1..=inv.checkpoints)
        .map(|i| {
            let e = batch_means(&l2_at[i], b);
            CheckpointTest {
                time: sim.horizon * i as f64 / inv.checkpoints as f64,
                z: welch_z(e.mean, e.se, base.mean, base.se),
                estimate: e,
            }
        })
        .collect();
    let mut ladder: Vec<LadderEntry> = (0..inv.ladder)
        .map(|j| LadderEntry {
            dt: levels[j].config().dt,
            drift: batch_means(&drift[j], b),
            residual: batch_means(&resid[j], b),
        })
        .collect();
    ladder.reverse();
    let extrapolated_drift = if ladder.len() >= 2 {
        let dts: Vec<f64> = ladder.iter().map(|l| l.dt).collect();
        let means: Vec<f64> = ladder.iter().map(|l| l.drift.mean).collect();
        linear_fit(&dts, &means).1
    } else {
        ladder[0].drift.mean
    };
    Ok(InvarianceReport {
        lambda: sim.lambda,
        dt: sim.dt,
        reference_dt: fine.config().dt,
        chains: sim.chains,
        threshold: bonferroni_threshold(inv.alpha, n_obs),
        observables: obs_tests,
        checkpoints,
        ladder,
        extrapolated_drift,
        acceptance: sampler.acceptance_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ou::{renorm_c1, DEFAULT_C2_BUDGET};
    use crate::spectral::{random_field, BASIS_NORM, VOLUME};
    use crate::stats::{mean_se, z_score};
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn consts(level: u32, m0: f64) -> RenormConstants {
        RenormConstants::compute(level, m0, &CutoffProfile::standard(), DEFAULT_C2_BUDGET).unwrap()
    }

    fn system(cfg: SimConfig) -> Galerkin {
        let c = consts(cfg.level, cfg.m0);
        Galerkin::new(&cfg, CutoffProfile::standard(), c).unwrap()
    }

    #[test]
    fn scheme_and_filter_parse() {
        assert_eq!("tamed-euler".parse::<Scheme>().unwrap(), Scheme::TamedEuler);
        assert_eq!(Scheme::ExponentialEuler.to_string(), "exponential-euler");
        assert_eq!("rough".parse::<NoiseFilter>().unwrap(), NoiseFilter::Rough);
        assert!("rk4".parse::<Scheme>().is_err());
    }

    #[test]
    fn config_validation() {
        let p = CutoffProfile::standard();
        let ok = SimConfig::default();
        assert!(ok.validate(&p).is_ok());
        assert_eq!(ok.state_cutoff(&p), 3);
        assert!(SimConfig { lambda: 2.0, ..ok.clone() }.validate(&p).is_err());
        assert!(SimConfig { lambda: -0.1, ..ok.clone() }.validate(&p).is_err());
        assert!(SimConfig { grid: 4, ..ok.clone() }.validate(&p).is_err());
        let tamed = SimConfig { scheme: Scheme::TamedEuler, dt: 0.1, ..ok.clone() };
        assert!(matches!(tamed.validate(&p), Err(Error::Unstable(_))));
        assert!(SimConfig { horizon: 1.0005, ..ok.clone() }.steps().is_err());
        assert_eq!(ok.steps().unwrap(), 1000);
        let wrong = consts(1, 1.0);
        assert!(Galerkin::new(&ok, p, wrong).is_err());
    }

    #[test]
    fn energy_trivial_cases() {
        let sys = system(SimConfig::default());
        assert_eq!(sys.energy(&SpectralField::zeros(3)), 0.0);
        let (lambda, c): (f64, f64) = (0.1, 0.7);
        let ceff = sys.constants().effective(lambda);
        let want = VOLUME * (0.25 * lambda * c.powi(4) - 1.5 * lambda * ceff * c * c);
        let got = sys.energy(&SpectralField::constant(c, 3));
        assert!((got - want).abs() < 1e-12 * want.abs());
    }

    #[test]
    fn energy_matches_grid_loop() {
        for level in [0, 1] {
            let p = CutoffProfile::standard();
            let sys = system(SimConfig { level, lambda: 0.3, ..SimConfig::default() });
            let mut rng = ChaCha8Rng::seed_from_u64(level as u64);
            let phi = random_field(sys.cutoff(), 0.0, &mut rng);
            // Direct trigonometric sum on a grid fine enough for degree 4·r1.
            let r1 = p.support_radius(Projection::Smooth, level) as i32;
            let m = (4 * r1 + 1) as usize;
            let modes: Vec<(LatticePoint, Complex64)> = lattice_cube(r1 as usize)
                .map(|k| (k, phi.get(k) * p.weight(Projection::Smooth, level, k)))
                .collect();
            let ceff = sys.constants().effective(0.3);
            let h = 2.0 * PI / m as f64;
            let mut total = 0.0;
            for i in 0..m {
                for j in 0..m {
                    for l in 0..m {
                        let x = [i as f64 * h, j as f64 * h, l as f64 * h];
                        let v: f64 = modes
                            .iter()
                            .map(|(k, c)| {
                                let arg = k.0[0] as f64 * x[0] + k.0[1] as f64 * x[1] + k.0[2] as f64 * x[2];
                                (c * Complex64::from_polar(BASIS_NORM, arg)).re
                            })
                            .sum();
                        total += 0.25 * 0.3 * v.powi(4) - 1.5 * 0.3 * ceff * v * v;
                    }
                }
            }
            total *= h * h * h;
            let got = sys.energy(&phi);
            assert!((got - total).abs() <= 1e-10 * total.abs(), "N={level}: {got} vs {total}");
        }
    }

    #[test]
    fn drift_is_linear_when_free() {
        let sys = system(SimConfig { lambda: 0.0, ..SimConfig::default() });
        assert_eq!(sys.drift(&SpectralField::zeros(3)).max_amplitude(), 0.0);
        let k = LatticePoint::new(1, -2, 0);
        let e = SpectralField::basis(k, 3).unwrap();
        let d = sys.drift(&e);
        assert!((d.get(k) + eigenvalue(k, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn drift_matches_mode_space_sum() {
        let p = CutoffProfile::standard();
        let cfg = SimConfig { lambda: 0.4, cutoff: Some(2), ..SimConfig::default() };
        let sys = system(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random_field(2, 0.0, &mut rng);
        let d = sys.drift(&y);
        let w = |k: LatticePoint| p.weight(Projection::Smooth, 0, k);
        let ceff = sys.constants().effective(0.4);
        let cube: Vec<LatticePoint> = lattice_cube(1).collect();
        for k in lattice_cube(2) {
            let mut cubic = Complex64::new(0.0, 0.0);
            for &l1 in &cube {
                for &l2 in &cube {
                    let l3 = k - l1 - l2;
                    if l3.max_abs() > 1 {
                        continue;
                    }
                    cubic += w(l1) * w(l2) * w(l3) * y.get(l1) * y.get(l2) * y.get(l3);
                }
            }
            let want = -eigenvalue(k, 1.0) * y.get(k) - 0.4 * w(k) * cubic / VOLUME
                + 3.0 * 0.4 * ceff * w(k) * w(k) * y.get(k);
            assert!((d.get(k) - want).norm() <= 1e-10 * want.norm().max(1.0), "{k:?}");
        }
        let free = drift(&y, &cfg, sys.constants(), &p).unwrap();
        assert_eq!(free, d);
    }

    #[test]
    fn free_step_is_the_ou_kernel() {
        let sys = system(SimConfig { lambda: 0.0, ..SimConfig::default() });
        let mut s = NoiseStream::new(1, 0);
        let y = stationary_field(3, 1.0, &mut s);
        let inc = sys.draw_increment(&mut s);
        assert_eq!(sys.step(&y, &inc).unwrap(), sys.kernel().apply(&y, &inc));
    }

    fn scalar_reference(y0: f64, t: f64, m0: f64, lambda: f64, ceff: f64) -> f64 {
        let f = |y: f64| -m0 * m0 * y - lambda * BASIS_NORM * BASIS_NORM * y.powi(3) + 3.0 * lambda * ceff * y;
        let n = 20_000;
        let h = t / n as f64;
        let mut y = y0;
        for _ in 0..n {
            let k1 = f(y);
            let k2 = f(y + 0.5 * h * k1);
            let k3 = f(y + 0.5 * h * k2);
            let k4 = f(y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        y
    }

    #[test]
    fn constant_mode_step_is_second_order_locally() {
        let (lambda, c0): (f64, f64) = (0.8, 30.0);
        let err = |dt: f64| {
            let sys = system(SimConfig { lambda, dt, ..SimConfig::default() });
            let y0 = SpectralField::constant(c0 * BASIS_NORM, 3);
            let y1 = sys.step(&y0, &SpectralField::zeros(3)).unwrap();
            let want = scalar_reference(c0, dt, 1.0, lambda, sys.constants().effective(lambda));
            assert!(y1.max_abs_diff(&SpectralField::constant(y1.mean(), 3)) < 1e-12);
            (y1.get(LatticePoint::ORIGIN).re - want).abs()
        };
        let (e1, e2) = (err(0.04), err(0.02));
        let order = (e1 / e2).log2();
        assert!((1.8..2.2).contains(&order), "{e1} {e2} {order}");
    }

    #[test]
    fn tamed_scheme_bounds_large_states() {
        let cfg = SimConfig { lambda: 1.0, scheme: Scheme::TamedEuler, dt: 0.01, ..SimConfig::default() };
        let sys = system(cfg);
        let y = SpectralField::constant(50.0, 3);
        let next = sys.step(&y, &SpectralField::zeros(3)).unwrap();
        // The tamed increment has norm below 1 whatever the state.
        let linear = {
            let mut l = y.clone();
            l.add_scaled(0.01, &sys.drift(&y).with_cutoff(3));
            l
        };
        assert!(next.l2_norm() < y.l2_norm() + 1.0);
        assert!(linear.l2_norm() > 10.0 * y.l2_norm());
    }

    #[test]
    fn blow_up_is_detected() {
        let cfg = SimConfig { lambda: 1.0, dt: 0.5, blowup_ceiling: 1e3, ..SimConfig::default() };
        let sys = system(cfg);
        let y = SpectralField::constant(60.0, 3);
        let mut s = NoiseStream::new(0, 0);
        let err = sys.simulate(&y, 50, 1, &mut s).unwrap_err();
        assert!(matches!(err, Error::BlowUp { step, .. } if step >= 1), "{err}");
    }

    #[test]
    fn rough_noise_flow_is_projection_of_white_flow() {
        let p = CutoffProfile::standard();
        for level in [0, 1] {
            let cfg = SimConfig { level, lambda: 0.5, dt: 0.01, ..SimConfig::default() };
            let white = system(cfg.clone());
            let rough = system(SimConfig { noise: NoiseFilter::Rough, ..cfg });
            let k = white.cutoff();
            let mut s = NoiseStream::new(3, level as u64);
            let mut y = stationary_field(k, 1.0, &mut s);
            let mut x = white.rough(&y);
            for _ in 0..50 {
                let xi = s.standard_field(k);
                y = white.step(&y, &white.increment(&xi)).unwrap();
                x = rough.step(&x, &rough.increment(&xi)).unwrap();
            }
            let py = white.rough(&y);
            assert!(py.max_abs_diff(&x) <= 1e-10 * py.max_amplitude(), "N={level}");
            assert_eq!(p.support_radius(Projection::Rough, level), k);
        }
    }

    #[test]
    fn combined_increments_drive_the_coarse_path() {
        let fine = system(SimConfig { lambda: 0.0, dt: 0.01, ..SimConfig::default() });
        let coarse = fine.with_dt(0.02).unwrap();
        let mut s = NoiseStream::new(2, 0);
        let y = stationary_field(3, 1.0, &mut s);
        let (a, b) = (fine.draw_increment(&mut s), fine.draw_increment(&mut s));
        let two = fine.step(&fine.step(&y, &a).unwrap(), &b).unwrap();
        let one = coarse.step(&y, &fine.combine_increments(&a, &b)).unwrap();
        assert!(two.max_abs_diff(&one) < 1e-14);
    }

    #[test]
    fn time_average() {
        assert_eq!(kb_average(&[0.0, 1.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 2.0);
        // Linear observable: trapezoid is exact.
        let t: Vec<f64> = (0..11).map(|i| i as f64 * 0.3).collect();
        let v: Vec<f64> = t.iter().map(|x| 1.0 + 2.0 * x).collect();
        assert!((kb_average(&t, &v).unwrap() - 4.0).abs() < 1e-14);
        assert!(kb_average(&[], &[]).is_err());
        assert_eq!(kb_average(&[1.0], &[5.0]).unwrap(), 5.0);
    }

    #[test]
    fn observables_set() {
        let obs = Observable::standard_set(10);
        assert_eq!(obs.len(), 12);
        assert_eq!(obs[2], Observable::Mode(LatticePoint::ORIGIN));
        assert!(obs[3..6].iter().all(|o| matches!(o, Observable::Mode(k) if k.norm_sq() == 1)));
        let p = CutoffProfile::standard();
        let o = Observer::new(0, 3, &p);
        let f = SpectralField::constant(1.0, 3);
        assert!((o.eval(&Observable::L2NormSq, &f) - VOLUME).abs() < 1e-12);
        assert!((o.eval(&Observable::Quartic, &f) - VOLUME).abs() < 1e-12);
    }

    #[test]
    fn free_sampler_reproduces_free_variances() {
        let sim = SimConfig { lambda: 0.0, ..SimConfig::default() };
        let g = GibbsConfig { samples: 4000, thinning: 2, warmup: 200, ..GibbsConfig::default() };
        let p = CutoffProfile::standard();
        let mut s = GibbsSampler::new(&sim, &g, consts(0, 1.0), p, NoiseStream::new(4, GIBBS_STREAM)).unwrap();
        let draws = s.collect_samples();
        assert_eq!(s.acceptance_rate(), 1.0);
        for k in [LatticePoint::ORIGIN, LatticePoint::new(1, 0, 0), LatticePoint::new(2, 1, 0)] {
            let v: Vec<f64> = draws.iter().map(|f| f.get(k).norm_sqr()).collect();
            let (m, se) = mean_se(&v);
            assert!(z_score(m, se, 0.5 / eigenvalue(k, 1.0)).abs() < 4.0, "{k:?}");
        }
    }

    #[test]
    fn sampler_rejects_bad_config() {
        let g = GibbsConfig { band: (0.9, 0.4), ..GibbsConfig::default() };
        assert!(g.validate().is_err());
        assert!(GibbsConfig { thinning: 0, ..GibbsConfig::default() }.validate().is_err());
    }

    #[test]
    fn c1_is_shared_with_the_tree_constants() {
        let sys = system(SimConfig::default());
        assert_eq!(sys.constants().c1, renorm_c1(0, 1.0, &CutoffProfile::standard()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn energy_is_even(seed in any::<u64>()) {
            let sys = system(SimConfig { level: 1, lambda: 0.5, ..SimConfig::default() });
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = random_field(sys.cutoff(), 0.0, &mut rng);
            prop_assert_eq!(sys.energy(&phi), sys.energy(&-&phi));
        }

        #[test]
        fn detailed_balance_ratio_is_antisymmetric(seed in any::<u64>(), h in 0.01f64..2.0) {
            let sim = SimConfig { lambda: 0.3, ..SimConfig::default() };
            let g = GibbsConfig { mala_step: h, warmup: 0, adapt: false, ..GibbsConfig::default() };
            let p = CutoffProfile::standard();
            let s = GibbsSampler::new(&sim, &g, consts(0, 1.0), p, NoiseStream::new(seed, 0)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_field(1, 0.0, &mut rng);
            let y = random_field(1, 0.0, &mut rng);
            let fwd = s.log_acceptance(&x, &y);
            let back = s.log_acceptance(&y, &x);
            prop_assert!((fwd + back).abs() <= 1e-10 * fwd.abs().max(1.0));
        }
    }
}
