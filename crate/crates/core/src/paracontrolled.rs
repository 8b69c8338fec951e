//! The shifted fields `X^(1)`, `X^(2)`, the paracontrolled split
//! `X^(2) = X^< + X^⩾` evolved next to the Galerkin dynamics, and the energy
//! functionals `𝔛`, `𝔜` used as uniform-bound diagnostics.
//!
//! Writing `w = P1 X^< + P1 X^⩾` and `v = w - λ𝒵^(0,3)`, the split solves
//!
//! ```text
//! (∂t - Δ + m0²) X^< = -3λ P1[v ◯< 𝒵^(2)]
//! (∂t - Δ + m0²) X^⩾ = -λ P1[w³] + λ P1(Φ1 + Φ2 + Φ3)(w) - 3λ P1[(P1 X^⩾) ◯= 𝒵^(2)]
//!                      + 9λ² P1[Ψ1(w) ◯= 𝒵^(2)] + 9λ² P1 Ψ2(w)
//! ```
//!
//! with `Φ1 = -3(𝒵^(1) - λ𝒵^(0,3)) ◯⩽ w² + 3λ[(2𝒵^(1) - λ𝒵^(0,3))𝒵^(0,3)] ◯⩽ w`,
//! `Φ3` the same with `◯>`, and
//! `Φ2 = -3 v ◯> 𝒵^(2) + 3λ𝒵^(2,3) + 9λ v (𝒵^(2,2) - 𝒵^(2) ◯= H) - λ²(3𝒵^(1) - λ𝒵^(0,3))(𝒵^(0,3))²`.
//! Here `H = e^{t(Δ-m0²)} ∫_{-∞}^0 ...` is the pre-history part of the
//! `(P1)²𝒵^(2)` convolution and `B = conv22 - H` its part over `[0, t]`;
//! `Ψ1 = A - v ◯< B` with `A` the running convolution of `(P1)²[v ◯< 𝒵^(2)]`,
//! `Ψ2 = (v ◯< B) ◯= 𝒵^(2) - v (B ◯= 𝒵^(2))`.

use crate::besov::{besov_norm, quadrature_resolution, BesovParams, DyadicPartition, Exponent};
use crate::error::{Error, Result};
use crate::galerkin::{Galerkin, NoiseFilter, SimConfig};
use crate::ou::{stationary_field, NoiseStream, OuEnsemble, OuKernel, TreeContext, Trees};
use crate::paraproduct::{paraproduct_truncated, ParaKind};
use crate::projection::{CutoffProfile, Projection};
use crate::spectral::{
    inverse_transform, power_truncated, product_truncated, GridField, MultiplierTable, SpectralField, VOLUME,
};
use crate::stats::{mean_se, relative_spread};
use rayon::prelude::*;

/// Exponents of `𝔛_{λ,η,γ}` and `𝔜_ε`, and the moment `q` of `𝔜`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyParams {
    pub eta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub q: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams { eta: 0.4, gamma: 0.1, epsilon: 0.04, q: 1.1 }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.0..1.0).contains(&self.eta) {
            return bad(format!("eta = {} must lie in [0, 1)", self.eta));
        }
        if !(self.gamma > 0.0 && self.gamma < 0.125) {
            return bad(format!("gamma = {} must lie in (0, 1/8)", self.gamma));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5 * self.gamma) {
            return bad(format!("epsilon = {} must lie in (0, gamma/2)", self.epsilon));
        }
        if !(self.q > 1.0 && self.q < 8.0 / 7.0) {
            return bad(format!("q = {} must lie in (1, 8/7)", self.q));
        }
        Ok(())
    }

    /// `η > γ + 1/4`, needed for the uniform bounds to apply.
    pub fn bound_hypothesis(&self) -> bool {
        self.eta > self.gamma + 0.25
    }
}

/// The pair `(X^<, X^⩾)` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitState {
    /// On the `P_N^(1)` cube.
    pub x_lt: SpectralField,
    /// On the state cube.
    pub x_geq: SpectralField,
    pub t: f64,
    pub level: u32,
    pub m0: f64,
    pub lambda: f64,
}

impl SplitState {
    /// `(0, X^(2)_0)` at `t = 0`.
    pub fn initial(x2: &SpectralField, smooth_radius: usize, level: u32, m0: f64, lambda: f64) -> Self {
        SplitState {
            x_lt: SpectralField::zeros(smooth_radius),
            x_geq: x2.clone(),
            t: 0.0,
            level,
            m0,
            lambda,
        }
    }

    /// `X^< + X^⩾` on the state cube.
    pub fn sum(&self) -> SpectralField {
        let mut s = self.x_geq.clone();
        s.add_scaled(1.0, &self.x_lt.with_cutoff(s.cutoff()));
        s
    }
}

fn check_shift_inputs(x: &SpectralField, z: &SpectralField, z03: &SpectralField) -> Result<()> {
    if z.cutoff() != x.cutoff() || z03.cutoff() > x.cutoff() {
        return Err(Error::Dimension(format!(
            "shift needs Z on the state cube {} and 𝒵^(0,3) inside it, got {} and {}",
            x.cutoff(),
            z.cutoff(),
            z03.cutoff()
        )));
    }
    Ok(())
}

/// `(X^(1), X^(2)) = (X - P2 Z, X - P2 Z + λ𝒵^(0,3))`.
pub fn shift_fields(
    x: &SpectralField,
    z: &SpectralField,
    z03: &SpectralField,
    level: u32,
    lambda: f64,
    profile: &CutoffProfile,
) -> Result<(SpectralField, SpectralField)> {
    check_shift_inputs(x, z, z03)?;
    let p2z = z.apply_real_multiplier(|k| profile.weight(Projection::Rough, level, k));
    let x1 = x - &p2z;
    let mut x2 = x1.clone();
    x2.add_scaled(lambda, &z03.with_cutoff(x.cutoff()));
    Ok((x1, x2))
}

/// Inverse of [`shift_fields`]: `X = X^(2) + P2 Z - λ𝒵^(0,3)`.
pub fn unshift(
    x2: &SpectralField,
    z: &SpectralField,
    z03: &SpectralField,
    level: u32,
    lambda: f64,
    profile: &CutoffProfile,
) -> Result<SpectralField> {
    check_shift_inputs(x2, z, z03)?;
    let mut x = x2.clone();
    x.add_scaled(-lambda, &z03.with_cutoff(x2.cutoff()));
    x.add_scaled(1.0, &z.apply_real_multiplier(|k| profile.weight(Projection::Rough, level, k)));
    Ok(x)
}

/// Right-hand sides of the two split equations, without the linear part.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitRhs {
    pub lt: SpectralField,
    pub geq: SpectralField,
    /// `(P1)²[v ◯< 𝒵^(2)]`, the forcing of the `Ψ1` accumulator.
    pub psi_forcing: SpectralField,
}

/// Exponential-Euler stepper for the split, carrying the `Ψ1` accumulator.
#[derive(Clone, Debug)]
pub struct SplitEvolver {
    lambda: f64,
    r1: usize,
    cutoff: usize,
    dt: f64,
    ceiling: f64,
    partition: DyadicPartition,
    smooth: MultiplierTable,
    smooth_sq: MultiplierTable,
    kernel_lt: OuKernel,
    kernel_geq: OuKernel,
    /// `A_t = ∫_0^t e^{(t-s)(Δ-m0²)} (P1)²[v_s ◯< 𝒵^(2)_s] ds`.
    psi_acc: SpectralField,
}

impl SplitEvolver {
    pub fn new(ctx: &TreeContext, lambda: f64, dt: f64, cutoff: usize, ceiling: f64) -> Result<Self> {
        let r1 = ctx.smooth_radius();
        if cutoff < r1 {
            return Err(Error::InvalidParameter(format!("state cube {cutoff} is inside the P1 cube {r1}")));
        }
        let (n, profile) = (ctx.level, &ctx.profile);
        let w1 = |k| profile.weight(Projection::Smooth, n, k);
        Ok(SplitEvolver {
            lambda,
            r1,
            cutoff,
            dt,
            ceiling,
            partition: ctx.partition,
            smooth: MultiplierTable::new(r1, w1),
            smooth_sq: MultiplierTable::new(r1, |k| w1(k).powi(2)),
            kernel_lt: OuKernel::new(r1, ctx.m0, dt)?,
            kernel_geq: OuKernel::new(cutoff, ctx.m0, dt)?,
            psi_acc: SpectralField::zeros(r1),
        })
    }

    pub fn step_size(&self) -> f64 {
        self.dt
    }

    pub fn psi_accumulator(&self) -> &SpectralField {
        &self.psi_acc
    }

    fn para(&self, f: &SpectralField, g: &SpectralField, kind: ParaKind, out: usize) -> SpectralField {
        paraproduct_truncated(f, g, kind, out, &self.partition)
    }

    /// Both right-hand sides at the state's time; `history` is `H_t`.
    pub fn rhs(&self, state: &SplitState, trees: &Trees, history: &SpectralField) -> SplitRhs {
        let (lambda, r) = (self.lambda, self.r1);
        let z2 = &trees.z2;
        let z03 = trees.z03.with_cutoff(r);
        let z1 = trees.z1.with_cutoff(r);
        let p1_geq = self.smooth.apply(&state.x_geq);
        let mut w = self.smooth.apply(&state.x_lt);
        w.add_scaled(1.0, &p1_geq);
        let mut v = w.clone();
        v.add_scaled(-lambda, &z03);

        let v_lt_z2 = self.para(&v, z2, ParaKind::Lt, r);
        let lt = self.smooth.apply(&v_lt_z2).scaled(-3.0 * lambda);
        let psi_forcing = self.smooth_sq.apply(&v_lt_z2);
        if lambda == 0.0 {
            return SplitRhs { lt, geq: SpectralField::zeros(r), psi_forcing };
        }

        // Φ1 + Φ3, kept as the two printed halves.
        let w2 = power_truncated(&w, 2, 2 * r);
        let mut low = z1.clone();
        low.add_scaled(-lambda, &z03);
        let mut mixed = z1.scaled(2.0);
        mixed.add_scaled(-lambda, &z03);
        let mixed = product_truncated(&[&mixed, &z03], 2 * r);
        let mut phi1 = self.para(&low, &w2, ParaKind::Leq, r).scaled(-3.0);
        phi1.add_scaled(3.0 * lambda, &self.para(&mixed, &w, ParaKind::Leq, r));
        let mut phi3 = self.para(&low, &w2, ParaKind::Gt, r).scaled(-3.0);
        phi3.add_scaled(3.0 * lambda, &self.para(&mixed, &w, ParaKind::Gt, r));

        // Φ2.
        let mut renormalized = trees.z22.with_cutoff(2 * r);
        renormalized.add_scaled(-1.0, &self.para(z2, history, ParaKind::Res, 2 * r));
        let mut outer = z1.scaled(3.0);
        outer.add_scaled(-lambda, &z03);
        let mut phi2 = self.para(&v, z2, ParaKind::Gt, r).scaled(-3.0);
        phi2.add_scaled(3.0 * lambda, &trees.z23.with_cutoff(r));
        phi2.add_scaled(9.0 * lambda, &product_truncated(&[&v, &renormalized], r));
        phi2.add_scaled(-lambda * lambda, &product_truncated(&[&outer, &z03, &z03], r));

        // Ψ1, Ψ2 against B = conv22 - H.
        let mut since_zero = trees.conv22.with_cutoff(r);
        since_zero.add_scaled(-1.0, &history.with_cutoff(r));
        let v_lt_b = self.para(&v, &since_zero, ParaKind::Lt, 2 * r);
        let mut psi1 = self.psi_acc.with_cutoff(2 * r);
        psi1.add_scaled(-1.0, &v_lt_b);
        let b_res_z2 = self.para(&since_zero, z2, ParaKind::Res, 2 * r);
        let mut psi2 = self.para(&v_lt_b, z2, ParaKind::Res, r);
        psi2.add_scaled(-1.0, &product_truncated(&[&v, &b_res_z2], r));

        let mut inner = power_truncated(&w, 3, r).scaled(-lambda);
        inner.add_scaled(lambda, &phi1);
        inner.add_scaled(lambda, &phi2);
        inner.add_scaled(lambda, &phi3);
        inner.add_scaled(-3.0 * lambda, &self.para(&p1_geq, z2, ParaKind::Res, r));
        inner.add_scaled(9.0 * lambda * lambda, &self.para(&psi1, z2, ParaKind::Res, r));
        inner.add_scaled(9.0 * lambda * lambda, &psi2);
        SplitRhs { lt, geq: self.smooth.apply(&inner), psi_forcing }
    }

    /// One exponential-Euler step of both equations and of the accumulator.
    pub fn step(&mut self, state: &SplitState, trees: &Trees, history: &SpectralField) -> Result<SplitState> {
        if state.x_lt.cutoff() != self.r1 || state.x_geq.cutoff() != self.cutoff {
            return Err(Error::Dimension(format!(
                "split state on cubes ({}, {}), evolver expects ({}, {})",
                state.x_lt.cutoff(),
                state.x_geq.cutoff(),
                self.r1,
                self.cutoff
            )));
        }
        let rhs = self.rhs(state, trees, history);
        let mut x_lt = self.kernel_lt.decay(&state.x_lt);
        self.kernel_lt.integrate_into(1.0, &rhs.lt, &mut x_lt);
        let mut x_geq = self.kernel_geq.decay(&state.x_geq);
        self.kernel_geq.integrate_into(1.0, &rhs.geq, &mut x_geq);
        let mut acc = self.kernel_lt.decay(&self.psi_acc);
        self.kernel_lt.integrate_into(1.0, &rhs.psi_forcing, &mut acc);
        let norm = (x_lt.l2_norm_sq() + x_geq.l2_norm_sq()).sqrt();
        if !norm.is_finite() || norm > self.ceiling {
            return Err(Error::BlowUp { step: 0, norm, ceiling: self.ceiling });
        }
        self.psi_acc = acc;
        Ok(SplitState { x_lt, x_geq, t: state.t + self.dt, ..state.clone() })
    }
}

/// Right-hand side of the unsplit `X^(2)` equation without the linear part:
/// `-λP1[v³] - 3λP1[𝒵^(1) v²] - 3λP1[𝒵^(2) v] - 9λ²C₂P1(P1 X^(2) + 𝒵^(1) - λ𝒵^(0,3))`
/// with `v = P1 X^(2) - λ𝒵^(0,3)`. Plain products only, no paraproducts.
pub fn unsplit_rhs(x2: &SpectralField, trees: &Trees, ctx: &TreeContext, lambda: f64) -> SpectralField {
    let r = ctx.smooth_radius();
    let p1 = |f: &SpectralField| {
        f.with_cutoff(r).apply_real_multiplier(|k| ctx.profile.weight(Projection::Smooth, ctx.level, k))
    };
    let z03 = trees.z03.with_cutoff(r);
    let mut v = p1(x2);
    v.add_scaled(-lambda, &z03);
    let mut out = power_truncated(&v, 3, r).scaled(-lambda);
    out.add_scaled(-3.0 * lambda, &product_truncated(&[&trees.z1, &v, &v], r));
    out.add_scaled(-3.0 * lambda, &product_truncated(&[&trees.z2, &v], r));
    let mut lin = v;
    lin.add_scaled(1.0, &trees.z1.with_cutoff(r));
    out.add_scaled(-9.0 * lambda * lambda * ctx.consts.c2, &lin);
    p1(&out)
}

/// Parameters of one split run.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    /// Level, mass, coupling, step, horizon, seed and blow-up ceiling; the
    /// noise filter is forced to `P_N^(2)`.
    pub sim: SimConfig,
    /// Length of the joint burn-in of `(X, Z)` before `t = 0`.
    pub burn_in: f64,
    pub burn_in_dt: f64,
    /// Keep every `record_every`-th state.
    pub record_every: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            sim: SimConfig { noise: NoiseFilter::Rough, ..SimConfig::default() },
            burn_in: OuEnsemble::default_burn_in(1.0),
            burn_in_dt: 1e-2,
            record_every: 20,
        }
    }
}

impl SplitConfig {
    fn galerkin(&self, ctx: &TreeContext, dt: f64) -> Result<Galerkin> {
        let cfg = SimConfig { noise: NoiseFilter::Rough, dt, ..self.sim.clone() };
        Galerkin::new(&cfg, ctx.profile.clone(), ctx.consts)
    }
}

/// Draws `X_0` from the free field independently of `Z_0` and runs the pair
/// on common noise for the burn-in, so `(X, Z)` starts near its joint
/// stationary law. The ensemble clock is reset to 0 afterwards.
pub fn prepare_pair(ctx: &TreeContext, cfg: &SplitConfig, noise: &mut NoiseStream) -> Result<(OuEnsemble, SpectralField)> {
    let sys = cfg.galerkin(ctx, cfg.burn_in_dt)?;
    let k = sys.cutoff();
    let mut x = stationary_field(k, ctx.m0, noise);
    let mut ens = OuEnsemble::init_stationary(ctx.clone(), k, noise);
    let half = OuKernel::new(k, ctx.m0, 0.5 * cfg.burn_in_dt)?;
    let steps = if cfg.burn_in > 0.0 { (cfg.burn_in / cfg.burn_in_dt).round() as usize } else { 0 };
    for n in 0..steps {
        let a = half.draw_increment(noise);
        let b = half.draw_increment(noise);
        let inc = ens.advance(&half, &a, &b);
        x = sys.step(&x, &sys.rough(&inc)).map_err(|e| at_step(e, n + 1))?;
    }
    ens.restart_clock(steps as f64 * cfg.burn_in_dt);
    Ok((ens, x))
}

fn at_step(e: Error, n: usize) -> Error {
    match e {
        Error::BlowUp { norm, ceiling, .. } => Error::BlowUp { step: n, norm, ceiling },
        other => other,
    }
}

/// One recorded instant of a split run.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticSample {
    pub t: f64,
    pub x_lt: SpectralField,
    pub x_geq: SpectralField,
    /// The unsplit `X^(2)`, from the Galerkin state on the same noise.
    pub x2: SpectralField,
}

impl DiagnosticSample {
    /// `‖(X^< + X^⩾) - X^(2)‖_{L²}`.
    pub fn gap(&self) -> f64 {
        let mut d = self.x_geq.clone();
        d.add_scaled(1.0, &self.x_lt.with_cutoff(d.cutoff()));
        d.add_scaled(-1.0, &self.x2);
        d.l2_norm()
    }
}

/// Advances the Galerkin state, the ensemble and the split together by one
/// step from the two half-step increments `a`, `b`.
struct CoupledRun {
    sys: Galerkin,
    half: OuKernel,
    evolver: SplitEvolver,
    ens: OuEnsemble,
    x: SpectralField,
    split: SplitState,
    lambda: f64,
}

impl CoupledRun {
    fn new(ctx: &TreeContext, cfg: &SplitConfig, dt: f64, ens: OuEnsemble, x: SpectralField) -> Result<Self> {
        let sys = cfg.galerkin(ctx, dt)?;
        let lambda = cfg.sim.lambda;
        let k = sys.cutoff();
        let (_, x2) = shift_fields(&x, ens.z(), ens.z03(), ctx.level, lambda, &ctx.profile)?;
        Ok(CoupledRun {
            half: OuKernel::new(k, ctx.m0, 0.5 * dt)?,
            evolver: SplitEvolver::new(ctx, lambda, dt, k, cfg.sim.blowup_ceiling)?,
            split: SplitState::initial(&x2, ctx.smooth_radius(), ctx.level, ctx.m0, lambda),
            sys,
            ens,
            x,
            lambda,
        })
    }

    fn step(&mut self, a: &SpectralField, b: &SpectralField) -> Result<()> {
        let trees = self.ens.trees();
        let history = self.ens.conv22_history();
        self.split = self.evolver.step(&self.split, &trees, &history)?;
        let inc = self.ens.advance(&self.half, a, b);
        self.x = self.sys.step(&self.x, &self.sys.rough(&inc))?;
        Ok(())
    }

    fn sample(&self) -> Result<DiagnosticSample> {
        let ctx = self.ens.context();
        let (_, x2) = shift_fields(&self.x, self.ens.z(), self.ens.z03(), ctx.level, self.lambda, &ctx.profile)?;
        Ok(DiagnosticSample {
            t: self.split.t,
            x_lt: self.split.x_lt.clone(),
            x_geq: self.split.x_geq.clone(),
            x2,
        })
    }
}

/// Runs the split next to the Galerkin dynamics on one noise path over
/// `[0, horizon]`, recording every `record_every`-th step (and `t = 0`).
pub fn run_split(ctx: &TreeContext, cfg: &SplitConfig, stream: u64) -> Result<Vec<DiagnosticSample>> {
    let mut noise = NoiseStream::new(cfg.sim.seed, stream);
    let (ens, x) = prepare_pair(ctx, cfg, &mut noise)?;
    let mut run = CoupledRun::new(ctx, cfg, cfg.sim.dt, ens, x)?;
    let steps = cfg.sim.steps()?;
    let every = cfg.record_every.max(1);
    let mut out = vec![run.sample()?];
    for n in 1..=steps {
        let a = run.half.draw_increment(&mut noise);
        let b = run.half.draw_increment(&mut noise);
        run.step(&a, &b).map_err(|e| at_step(e, n))?;
        if n % every == 0 || n == steps {
            out.push(run.sample()?);
        }
    }
    Ok(out)
}

/// Gap between split and unsplit flow at the horizon for one step size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapEntry {
    pub dt: f64,
    /// Root mean square of `‖(X^< + X^⩾) - X^(2)‖_{L²}` over paths.
    pub rms_gap: f64,
    pub paths: usize,
}

/// Split-vs-unsplit gap at `dt, dt/2, …, dt/2^(levels-1)` on common noise:
/// all step sizes see the same `Z` path, built from the finest increments.
pub fn consistency_ladder(ctx: &TreeContext, cfg: &SplitConfig, levels: usize, paths: usize) -> Result<Vec<GapEntry>> {
    if levels == 0 || paths == 0 {
        return Err(Error::InvalidParameter("consistency ladder needs levels and paths".into()));
    }
    let dts: Vec<f64> = (0..levels).map(|j| cfg.sim.dt / (1u64 << j) as f64).collect();
    let finest = dts[levels - 1];
    let fine_steps = SimConfig { dt: finest, ..cfg.sim.clone() }.steps()?;
    let mut sq = vec![0.0; levels];
    for p in 0..paths {
        let mut noise = NoiseStream::new(cfg.sim.seed, p as u64);
        let (ens, x) = prepare_pair(ctx, cfg, &mut noise)?;
        let k = x.cutoff();
        // Increments over finest/2, then pairwise compositions.
        let base = OuKernel::new(k, ctx.m0, 0.5 * finest)?;
        let mut incs: Vec<SpectralField> = (0..2 * fine_steps).map(|_| base.draw_increment(&mut noise)).collect();
        let mut kernel = base;
        for j in (0..levels).rev() {
            let mut run = CoupledRun::new(ctx, cfg, dts[j], ens.clone(), x.clone())?;
            for (n, pair) in incs.chunks_exact(2).enumerate() {
                run.step(&pair[0], &pair[1]).map_err(|e| at_step(e, n + 1))?;
            }
            sq[j] += run.sample()?.gap().powi(2);
            if j > 0 {
                incs = incs.chunks_exact(2).map(|c| kernel.compose(&c[0], &c[1])).collect();
                kernel = kernel.doubled();
            }
        }
    }
    Ok(dts
        .iter()
        .zip(sq)
        .map(|(&dt, s)| GapEntry { dt, rms_gap: (s / paths as f64).sqrt(), paths })
        .collect())
}

/// Integrands of `𝔛` and `𝔜` at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Integrands {
    pub t: f64,
    /// `‖∇X^⩾‖²_{L²}`.
    pub grad_geq: f64,
    /// `‖X^(2)‖²_{L²}`.
    pub x2_sq: f64,
    /// `λ‖P1 X^(2)‖⁴_{L⁴}`.
    pub quartic: f64,
    /// `‖X^<‖³_{B^{1-ε}_4}`.
    pub lt_besov: f64,
    /// `‖X^⩾‖_{B^{1+ε}_{4/3}}`.
    pub geq_besov: f64,
    /// `t^η‖X^<‖_{B^{2γ}_{4/3}}`.
    pub lt_weighted: f64,
    /// `t^η‖X^⩾‖_{B^{2γ}_{4/3}}`.
    pub geq_weighted: f64,
}

/// Evaluates the integrands on every sample.
pub fn integrands(
    samples: &[DiagnosticSample],
    level: u32,
    lambda: f64,
    profile: &CutoffProfile,
    ep: &EnergyParams,
    partition: &DyadicPartition,
) -> Vec<Integrands> {
    let four = Exponent::Finite(4.0);
    let four_thirds = Exponent::Finite(4.0 / 3.0);
    samples
        .iter()
        .map(|s| {
            let p1x2 = s.x2.apply_real_multiplier(|k| profile.weight(Projection::Smooth, level, k));
            let grad_geq = s.x_geq.iter().map(|(k, c)| k.norm_sq() as f64 * c.norm_sqr()).sum();
            let quartic = if lambda == 0.0 { 0.0 } else { lambda * power_truncated(&p1x2, 2, 2 * p1x2.cutoff()).l2_norm_sq() };
            let weight = s.t.powf(ep.eta);
            let b = |f: &SpectralField, sm: f64, p: Exponent| besov_norm(f, BesovParams::holder_type(sm, p), partition);
            Integrands {
                t: s.t,
                grad_geq,
                x2_sq: s.x2.l2_norm_sq(),
                quartic,
                lt_besov: b(&s.x_lt, 1.0 - ep.epsilon, four).powi(3),
                geq_besov: b(&s.x_geq, 1.0 + ep.epsilon, four_thirds),
                lt_weighted: weight * b(&s.x_lt, 2.0 * ep.gamma, four_thirds),
                geq_weighted: weight * b(&s.x_geq, 2.0 * ep.gamma, four_thirds),
            }
        })
        .collect()
}

fn check_uniform(times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Ok(());
    }
    let h = times[1] - times[0];
    for w in times.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * h.abs().max(1e-300) {
            return Err(Error::InvalidParameter("energy functionals need a uniform time grid".into()));
        }
    }
    Ok(())
}

fn trapezoid(times: &[f64], values: impl Fn(usize) -> f64) -> f64 {
    times
        .windows(2)
        .enumerate()
        .map(|(i, w)| 0.5 * (w[1] - w[0]) * (values(i) + values(i + 1)))
        .sum()
}

/// `L^p` norm of the difference of two grid fields.
fn grid_diff_norm(a: &GridField, b: &GridField, p: f64) -> f64 {
    let cell = VOLUME / a.values().len() as f64;
    let s: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs().powf(p)).sum();
    (s * cell).powf(1.0 / p)
}

/// Parts of `𝔛(t)` at the last sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyX {
    pub integral: f64,
    /// Supremum of `s'^η ‖X^(2)_{t'} - X^(2)_{s'}‖_{L^{4/3}} / (t'-s')^γ`
    /// over sampled pairs; a lower bound of the continuum supremum.
    pub holder: f64,
}

impl EnergyX {
    pub fn total(&self) -> f64 {
        self.integral + self.holder
    }
}

/// `𝔛_{λ,η,γ}` over the sampled trajectory.
pub fn energy_x(samples: &[DiagnosticSample], values: &[Integrands], ep: &EnergyParams) -> Result<EnergyX> {
    let times: Vec<f64> = values.iter().map(|v| v.t).collect();
    check_uniform(&times)?;
    let integral = trapezoid(&times, |i| values[i].grad_geq + values[i].x2_sq + values[i].quartic);
    let grids: Vec<GridField> = samples
        .iter()
        .map(|s| inverse_transform(&s.x2, quadrature_resolution(s.x2.cutoff())))
        .collect::<Result<_>>()?;
    let mut holder = 0.0f64;
    for i in 0..grids.len() {
        let weight = samples[i].t.powf(ep.eta);
        if weight == 0.0 {
            continue;
        }
        for j in i + 1..grids.len() {
            let gap = (samples[j].t - samples[i].t).powf(ep.gamma);
            holder = holder.max(weight * grid_diff_norm(&grids[j], &grids[i], 4.0 / 3.0) / gap);
        }
    }
    Ok(EnergyX { integral, holder })
}

/// Parts of `𝔜_ε(t)` at the last sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyY {
    pub lt: f64,
    pub geq: f64,
}

impl EnergyY {
    pub fn total(&self) -> f64 {
        self.lt + self.geq
    }
}

/// `𝔜_ε` over the sampled trajectory.
pub fn energy_y(values: &[Integrands]) -> Result<EnergyY> {
    let times: Vec<f64> = values.iter().map(|v| v.t).collect();
    check_uniform(&times)?;
    Ok(EnergyY {
        lt: trapezoid(&times, |i| values[i].lt_besov),
        geq: trapezoid(&times, |i| values[i].geq_besov),
    })
}

/// All functionals of one path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathDiagnostics {
    pub x: EnergyX,
    pub y: EnergyY,
    pub lt_weighted_sup: f64,
    pub geq_weighted_sup: f64,
    pub final_gap: f64,
}

/// Runs one path and evaluates every functional on it.
pub fn path_diagnostics(ctx: &TreeContext, cfg: &SplitConfig, ep: &EnergyParams, stream: u64) -> Result<(PathDiagnostics, Vec<Integrands>)> {
    let samples = run_split(ctx, cfg, stream)?;
    let values = integrands(&samples, ctx.level, cfg.sim.lambda, &ctx.profile, ep, &ctx.partition);
    let sup = |f: fn(&Integrands) -> f64| values.iter().map(f).fold(0.0, f64::max);
    let diag = PathDiagnostics {
        x: energy_x(&samples, &values, ep)?,
        y: energy_y(&values)?,
        lt_weighted_sup: sup(|v| v.lt_weighted),
        geq_weighted_sup: sup(|v| v.geq_weighted),
        final_gap: samples.last().map(DiagnosticSample::gap).unwrap_or(0.0),
    };
    Ok((diag, values))
}

/// Per-seed estimates of the diagnostic expectations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedEstimate {
    pub seed: u64,
    pub mean_x: f64,
    pub mean_yq: f64,
    pub mean_lt_sup: f64,
    pub mean_geq_sup: f64,
}

/// Across-seed stability of the diagnostics at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub level: u32,
    pub lambda: f64,
    pub paths_per_seed: usize,
    pub seeds: Vec<SeedEstimate>,
    /// Grand means and their standard errors across seeds.
    pub x: (f64, f64),
    pub yq: (f64, f64),
    /// Coefficient of variation of the per-seed means.
    pub spread_x: f64,
    pub spread_yq: f64,
}

impl StabilityReport {
    pub fn finite(&self) -> bool {
        self.seeds
            .iter()
            .all(|s| s.mean_x.is_finite() && s.mean_yq.is_finite() && s.mean_lt_sup.is_finite() && s.mean_geq_sup.is_finite())
    }

    pub fn passes(&self, max_spread: f64) -> bool {
        self.finite() && self.spread_x < max_spread && self.spread_yq < max_spread
    }
}

/// `E[𝔛]`, `E[𝔜^q]` and the weighted sups estimated per seed from
/// `paths_per_seed` paths, for each seed in `seeds`.
pub fn stability_study(
    ctx: &TreeContext,
    cfg: &SplitConfig,
    ep: &EnergyParams,
    seeds: &[u64],
    paths_per_seed: usize,
) -> Result<StabilityReport> {
    ep.validate()?;
    if seeds.len() < 2 || paths_per_seed == 0 {
        return Err(Error::InvalidParameter("stability study needs at least two seeds and one path each".into()));
    }
    // Seeds run on the worker pool; the ordered collect keeps reductions deterministic.
    let out = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SplitConfig { sim: SimConfig { seed, ..cfg.sim.clone() }, ..cfg.clone() };
            let mut acc = [0.0; 4];
            for p in 0..paths_per_seed {
                let (d, _) = path_diagnostics(ctx, &cfg, ep, p as u64)?;
                acc[0] += d.x.total();
                acc[1] += d.y.total().powf(ep.q);
                acc[2] += d.lt_weighted_sup;
                acc[3] += d.geq_weighted_sup;
            }
            let m = paths_per_seed as f64;
            Ok(SeedEstimate { seed, mean_x: acc[0] / m, mean_yq: acc[1] / m, mean_lt_sup: acc[2] / m, mean_geq_sup: acc[3] / m })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = out.iter().map(|s| s.mean_x).collect();
    let ys: Vec<f64> = out.iter().map(|s| s.mean_yq).collect();
    Ok(StabilityReport {
        level: ctx.level,
        lambda: cfg.sim.lambda,
        paths_per_seed,
        x: mean_se(&xs),
        yq: mean_se(&ys),
        spread_x: relative_spread(&xs),
        spread_yq: relative_spread(&ys),
        seeds: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ou::DEFAULT_C2_BUDGET;
    use crate::projection::project;
    use crate::spectral::random_field;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn context(level: u32) -> TreeContext {
        TreeContext::new(level, 1.0, CutoffProfile::standard(), DEFAULT_C2_BUDGET).unwrap()
    }

    /// An ensemble run briefly from zero history, so every tree is nonzero.
    fn warm_ensemble(ctx: &TreeContext, cutoff: usize, seed: u64) -> OuEnsemble {
        let mut noise = NoiseStream::new(seed, 0);
        let mut ens = OuEnsemble::init_stationary(ctx.clone(), cutoff, &mut noise);
        ens.burn_in(0.3, 1e-2, &mut noise).unwrap();
        for _ in 0..5 {
            ens.step(1e-2, &mut noise).unwrap();
        }
        ens
    }

    fn rel_diff(a: &SpectralField, b: &SpectralField) -> f64 {
        a.max_abs_diff(b) / b.max_amplitude().max(1e-300)
    }

    #[test]
    fn default_energy_params_are_admissible() {
        let ep = EnergyParams::default();
        ep.validate().unwrap();
        assert!(ep.bound_hypothesis());
        assert!(EnergyParams { gamma: 0.2, ..ep }.validate().is_err());
        assert!(EnergyParams { epsilon: 0.06, ..ep }.validate().is_err());
        assert!(EnergyParams { q: 1.2, ..ep }.validate().is_err());
        assert!(!EnergyParams { eta: 0.3, ..ep }.bound_hypothesis());
    }

    #[test]
    fn shift_special_cases() {
        let ctx = context(0);
        let p = &ctx.profile;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_field(3, 0.0, &mut rng);
        let z03 = random_field(1, 0.0, &mut rng);
        let x = random_field(3, 0.0, &mut rng);
        let (x1, x2) = shift_fields(&x, &z, &z03, 0, 0.0, p).unwrap();
        assert_eq!(x1, x2);
        let p2z = project(Projection::Rough, 0, &z, p);
        let (x1, _) = shift_fields(&p2z, &z, &z03, 0, 0.0, p).unwrap();
        assert_eq!(x1.max_amplitude(), 0.0);
        assert!(shift_fields(&x, &z.with_cutoff(2), &z03, 0, 0.1, p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn unshift_inverts_shift(seed in any::<u64>(), lambda in 0.0f64..1.0) {
            let ctx = context(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random_field(3, 0.0, &mut rng);
            let z03 = random_field(1, 0.0, &mut rng);
            let x = random_field(3, 0.0, &mut rng);
            let (_, x2) = shift_fields(&x, &z, &z03, 0, lambda, &ctx.profile).unwrap();
            let back = unshift(&x2, &z, &z03, 0, lambda, &ctx.profile).unwrap();
            prop_assert!(back.max_abs_diff(&x) <= 4.0 * f64::EPSILON * x.max_amplitude().max(1.0));
        }
    }

    #[test]
    fn split_rhs_adds_up_to_the_unsplit_equation() {
        for level in [0, 1] {
            let ctx = context(level);
            let k = ctx.profile.support_radius(Projection::Rough, level);
            let ens = warm_ensemble(&ctx, k, 7);
            let trees = ens.trees();
            let history = ens.conv22_history();
            let lambda = 0.3;
            let mut rng = ChaCha8Rng::seed_from_u64(11 + level as u64);
            let r = ctx.smooth_radius();
            let state = SplitState {
                x_lt: random_field(r, 0.5, &mut rng),
                x_geq: random_field(k, 0.5, &mut rng),
                t: ens.time(),
                level,
                m0: 1.0,
                lambda,
            };
            let mut ev = SplitEvolver::new(&ctx, lambda, 1e-3, k, 1e6).unwrap();
            ev.psi_acc = ev.smooth.apply(&state.x_lt).scaled(-1.0 / (3.0 * lambda));
            let rhs = ev.rhs(&state, &trees, &history);
            let total = &rhs.lt + &rhs.geq;
            let oracle = unsplit_rhs(&state.sum(), &trees, &ctx, lambda);
            assert!(rel_diff(&total, &oracle) < 1e-12, "N={level}: {}", rel_diff(&total, &oracle));
        }
    }

    #[test]
    fn accumulator_tracks_the_smoothed_low_part() {
        let ctx = context(0);
        let (lambda, k) = (0.2, 3);
        let mut ens = warm_ensemble(&ctx, k, 5);
        let mut noise = NoiseStream::new(5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = SplitState::initial(&random_field(k, 0.5, &mut rng), 1, 0, 1.0, lambda);
        let mut ev = SplitEvolver::new(&ctx, lambda, 1e-2, k, 1e6).unwrap();
        for _ in 0..20 {
            state = ev.step(&state, &ens.trees(), &ens.conv22_history()).unwrap();
            ens.step(1e-2, &mut noise).unwrap();
        }
        let p1_lt = ev.smooth.apply(&state.x_lt);
        assert!(p1_lt.max_amplitude() > 0.0);
        assert!(rel_diff(&ev.psi_accumulator().scaled(-3.0 * lambda), &p1_lt) < 1e-13);
    }

    #[test]
    fn zero_data_and_zero_trees_stay_zero() {
        let ctx = context(0);
        let r = ctx.smooth_radius();
        let z = |c| SpectralField::zeros(c);
        let trees = Trees {
            z1: z(r),
            z2: z(2 * r),
            z3: z(3 * r),
            z02: z(r),
            z03: z(r),
            z22: z(3 * r),
            z23: z(3 * r),
            conv22: z(r),
        };
        let mut ev = SplitEvolver::new(&ctx, 0.5, 1e-3, 3, 1e6).unwrap();
        let mut s = SplitState::initial(&z(3), r, 0, 1.0, 0.5);
        for _ in 0..10 {
            s = ev.step(&s, &trees, &z(r)).unwrap();
        }
        assert_eq!(s.x_lt.max_amplitude(), 0.0);
        assert_eq!(s.x_geq.max_amplitude(), 0.0);
    }

    #[test]
    fn free_coupling_gives_heat_flow() {
        let ctx = context(0);
        let k = 3;
        let dt = 1e-2;
        let mut ens = warm_ensemble(&ctx, k, 9);
        let mut noise = NoiseStream::new(9, 1);
        let x0 = random_field(k, 0.5, &mut ChaCha8Rng::seed_from_u64(4));
        let mut s = SplitState::initial(&x0, 1, 0, 1.0, 0.0);
        let mut ev = SplitEvolver::new(&ctx, 0.0, dt, k, 1e6).unwrap();
        for _ in 0..25 {
            s = ev.step(&s, &ens.trees(), &ens.conv22_history()).unwrap();
            ens.step(dt, &mut noise).unwrap();
        }
        assert_eq!(s.x_lt.max_amplitude(), 0.0);
        let heat = crate::projection::semigroup(25.0 * dt, 1.0, &x0).unwrap();
        assert!(rel_diff(&s.x_geq, &heat) < 1e-13);
    }

    #[test]
    fn blow_up_is_reported() {
        let ctx = context(0);
        let ens = warm_ensemble(&ctx, 3, 1);
        let mut ev = SplitEvolver::new(&ctx, 0.1, 1e-3, 3, 1e-3).unwrap();
        let s = SplitState::initial(&SpectralField::constant(1.0, 3), 1, 0, 1.0, 0.1);
        let err = ev.step(&s, &ens.trees(), &ens.conv22_history()).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
        let wrong = SplitState::initial(&SpectralField::zeros(2), 1, 0, 1.0, 0.1);
        assert!(ev.step(&wrong, &ens.trees(), &ens.conv22_history()).is_err());
    }

    fn quick_config(lambda: f64) -> SplitConfig {
        SplitConfig {
            sim: SimConfig { lambda, dt: 2e-3, horizon: 0.1, noise: NoiseFilter::Rough, ..SimConfig::default() },
            burn_in: 1.0,
            burn_in_dt: 2e-2,
            record_every: 5,
        }
    }

    #[test]
    fn split_run_starts_split_and_tracks_unsplit() {
        let ctx = context(0);
        let samples = run_split(&ctx, &quick_config(0.1), 0).unwrap();
        assert_eq!(samples.len(), 11);
        assert_eq!(samples[0].x_lt.max_amplitude(), 0.0);
        assert_eq!(samples[0].gap(), 0.0);
        let last = samples.last().unwrap();
        assert!((last.t - 0.1).abs() < 1e-12);
        assert!(last.x_lt.max_amplitude() > 0.0);
        assert!(last.gap() < 1e-3 * last.x2.l2_norm());
    }

    #[test]
    fn gap_is_first_order() {
        let ctx = context(0);
        let lad = consistency_ladder(&ctx, &quick_config(0.1), 2, 2).unwrap();
        let ratio = lad[1].rms_gap / lad[0].rms_gap;
        assert!((0.35..0.65).contains(&ratio), "ratio {ratio}");
    }

    fn sample(t: f64, x_lt: SpectralField, x_geq: SpectralField) -> DiagnosticSample {
        let x2 = &x_geq + &x_lt.with_cutoff(x_geq.cutoff());
        DiagnosticSample { t, x_lt, x_geq, x2 }
    }

    #[test]
    fn energies_of_trivial_trajectories() {
        let ctx = context(0);
        let ep = EnergyParams::default();
        let times = [0.0, 0.1, 0.2, 0.3];
        let zero: Vec<_> = times.iter().map(|&t| sample(t, SpectralField::zeros(1), SpectralField::zeros(3))).collect();
        let v = integrands(&zero, 0, 0.1, &ctx.profile, &ep, &ctx.partition);
        assert_eq!(energy_x(&zero, &v, &ep).unwrap().total(), 0.0);
        assert_eq!(energy_y(&v).unwrap().total(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (lt, geq) = (random_field(1, 0.0, &mut rng), random_field(3, 0.0, &mut rng));
        let constant: Vec<_> = times.iter().map(|&t| sample(t, lt.clone(), geq.clone())).collect();
        let v = integrands(&constant, 0, 0.1, &ctx.profile, &ep, &ctx.partition);
        let ex = energy_x(&constant, &v, &ep).unwrap();
        assert_eq!(ex.holder, 0.0);
        let stat = v[0].grad_geq + v[0].x2_sq + v[0].quartic;
        assert!((ex.integral - 0.3 * stat).abs() < 1e-12 * stat);
        let ey = energy_y(&v).unwrap();
        assert!((ey.total() - 0.3 * (v[0].lt_besov + v[0].geq_besov)).abs() < 1e-12 * ey.total());

        let uneven: Vec<_> = [0.0, 0.1, 0.3].iter().map(|&t| sample(t, lt.clone(), geq.clone())).collect();
        let v = integrands(&uneven, 0, 0.1, &ctx.profile, &ep, &ctx.partition);
        assert!(energy_y(&v).is_err());
    }

    #[test]
    fn holder_term_sees_a_jump() {
        let ctx = context(0);
        let ep = EnergyParams::default();
        let f = SpectralField::constant(1.0, 3);
        let s = vec![
            sample(0.0, SpectralField::zeros(1), SpectralField::zeros(3)),
            sample(0.5, SpectralField::zeros(1), SpectralField::zeros(3)),
            sample(1.0, SpectralField::zeros(1), f.clone()),
        ];
        let v = integrands(&s, 0, 0.0, &ctx.profile, &ep, &ctx.partition);
        let ex = energy_x(&s, &v, &ep).unwrap();
        // Only the pair (0.5, 1.0) has a nonzero weight and difference.
        let l43 = (crate::spectral::VOLUME).powf(0.75) * f.get(crate::LatticePoint::ORIGIN).re * crate::spectral::BASIS_NORM;
        let expected = 0.5f64.powf(ep.eta) * l43 / 0.5f64.powf(ep.gamma);
        assert!((ex.holder - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn free_dynamics_has_empty_low_part() {
        let ctx = context(0);
        let ep = EnergyParams::default();
        let cfg = quick_config(0.0);
        let (d, values) = path_diagnostics(&ctx, &cfg, &ep, 0).unwrap();
        assert!(values.iter().all(|v| v.lt_besov == 0.0 && v.quartic == 0.0));
        assert_eq!(d.y.lt, 0.0);
        assert!(d.x.total().is_finite() && d.x.total() > 0.0);
    }

    #[test]
    fn stability_study_reports_per_seed_means() {
        let ctx = context(0);
        let r = stability_study(&ctx, &quick_config(0.1), &EnergyParams::default(), &[1, 2, 3], 1).unwrap();
        assert_eq!(r.seeds.len(), 3);
        assert!(r.finite());
        assert!(r.spread_x.is_finite() && r.spread_yq.is_finite());
        assert!(stability_study(&ctx, &quick_config(0.1), &EnergyParams::default(), &[1], 1).is_err());
    }
}
