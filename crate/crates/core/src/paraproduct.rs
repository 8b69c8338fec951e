//! Bony paraproducts and two commutators built from them.
//!
//! For band-limited fields every sum is finite: blocks beyond
//! `j_max(K) + 1` vanish identically, so nothing is truncated.

use crate::besov::{dyadic_block, s_partial, DyadicPartition};
use crate::error::{Error, Result};
use crate::projection::{CutoffProfile, Projection};
use crate::spectral::{pointwise_product, ProductAccumulator, SpectralField};

/// Which part of the product `fg`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParaKind {
    /// `f ◯< g = Σ_{j≥0} S_j f · Δ_{j+1} g`.
    Lt,
    /// `f ◯= g = Σ_j Δ_j f · (Δ_{j-1} + Δ_j + Δ_{j+1}) g`.
    Res,
    /// `f ◯> g = g ◯< f`.
    Gt,
    /// `◯< + ◯=`.
    Leq,
    /// `◯> + ◯=`.
    Geq,
}

impl std::str::FromStr for ParaKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lt" => Ok(ParaKind::Lt),
            "res" => Ok(ParaKind::Res),
            "gt" => Ok(ParaKind::Gt),
            "leq" => Ok(ParaKind::Leq),
            "geq" => Ok(ParaKind::Geq),
            other => Err(Error::InvalidParameter(format!("unknown paraproduct kind {other:?}"))),
        }
    }
}

/// Pairs `(Δ_i f, Δ_j g)` grouped by the part of the product they feed.
fn add_lt(acc: &mut ProductAccumulator, f: &SpectralField, g: &SpectralField, part: &DyadicPartition) {
    for j in 0..part.j_max(g.cutoff()) {
        let high = dyadic_block(j + 1, g, part);
        if high.max_amplitude() == 0.0 {
            continue;
        }
        let low = s_partial(j, f, part);
        acc.add_product(&[&low, &high]);
    }
}

fn add_res(acc: &mut ProductAccumulator, f: &SpectralField, g: &SpectralField, part: &DyadicPartition) {
    let top = part.j_max(f.cutoff()).min(part.j_max(g.cutoff()) + 1);
    let g_blocks: Vec<SpectralField> = (-1..=part.j_max(g.cutoff()) + 1)
        .map(|j| dyadic_block(j, g, part))
        .collect();
    let block = |j: i32| -> Option<&SpectralField> { g_blocks.get((j + 1) as usize).filter(|_| j >= -1) };
    for j in -1..=top {
        let fj = dyadic_block(j, f, part);
        if fj.max_amplitude() == 0.0 {
            continue;
        }
        let mut near = SpectralField::zeros(g.cutoff());
        for i in j - 1..=j + 1 {
            if let Some(b) = block(i) {
                near.add_scaled(1.0, b);
            }
        }
        acc.add_product(&[&fj, &near]);
    }
}

/// The requested part of `fg`, exact up to `|k_i| <= out_cutoff`.
pub fn paraproduct_truncated(
    f: &SpectralField,
    g: &SpectralField,
    kind: ParaKind,
    out_cutoff: usize,
    part: &DyadicPartition,
) -> SpectralField {
    let mut acc = ProductAccumulator::new(f.cutoff() + g.cutoff(), out_cutoff);
    match kind {
        ParaKind::Lt => add_lt(&mut acc, f, g, part),
        ParaKind::Gt => add_lt(&mut acc, g, f, part),
        ParaKind::Res => add_res(&mut acc, f, g, part),
        ParaKind::Leq => {
            add_lt(&mut acc, f, g, part);
            add_res(&mut acc, f, g, part);
        }
        ParaKind::Geq => {
            add_lt(&mut acc, g, f, part);
            add_res(&mut acc, f, g, part);
        }
    }
    acc.finish()
}

/// The requested part of `fg` on the full output band `K_f + K_g`.
pub fn paraproduct(f: &SpectralField, g: &SpectralField, kind: ParaKind, part: &DyadicPartition) -> SpectralField {
    paraproduct_truncated(f, g, kind, f.cutoff() + g.cutoff(), part)
}

/// `(f ◯< g) ◯= h − f (g ◯= h)`.
pub fn commutator_res(f: &SpectralField, g: &SpectralField, h: &SpectralField, part: &DyadicPartition) -> SpectralField {
    let first = paraproduct(&paraproduct(f, g, ParaKind::Lt, part), h, ParaKind::Res, part);
    let second = pointwise_product(f, &paraproduct(g, h, ParaKind::Res, part));
    &first - &second
}

/// `e^{tΔ}(P_N^(1))²(f ◯< g) − f ◯< (e^{tΔ}(P_N^(1))² g)`.
pub fn commutator_heat(
    f: &SpectralField,
    g: &SpectralField,
    t: f64,
    n: u32,
    profile: &CutoffProfile,
    part: &DyadicPartition,
) -> Result<SpectralField> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("commutator time {t} must be positive")));
    }
    let mult = |k: crate::spectral::LatticePoint| {
        (-t * k.norm_sq() as f64).exp() * profile.weight(Projection::Smooth, n, k).powi(2)
    };
    let first = paraproduct(f, g, ParaKind::Lt, part).apply_real_multiplier(mult);
    let second = paraproduct(f, &g.apply_real_multiplier(mult), ParaKind::Lt, part);
    Ok(&first - &second)
}

/// Precomputed pieces of [`commutator_heat`] for one `(f, g, N)` and many `t`.
pub struct HeatCommutator<'a> {
    f: &'a SpectralField,
    g: &'a SpectralField,
    n: u32,
    profile: &'a CutoffProfile,
    part: &'a DyadicPartition,
    lt: SpectralField,
}

impl<'a> HeatCommutator<'a> {
    pub fn new(
        f: &'a SpectralField,
        g: &'a SpectralField,
        n: u32,
        profile: &'a CutoffProfile,
        part: &'a DyadicPartition,
    ) -> Self {
        let lt = paraproduct(f, g, ParaKind::Lt, part);
        HeatCommutator { f, g, n, profile, part, lt }
    }

    pub fn at(&self, t: f64) -> Result<SpectralField> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!("commutator time {t} must be positive")));
        }
        let (n, profile) = (self.n, self.profile);
        let mult = |k: crate::spectral::LatticePoint| {
            (-t * k.norm_sq() as f64).exp() * profile.weight(Projection::Smooth, n, k).powi(2)
        };
        let first = self.lt.apply_real_multiplier(mult);
        let second = paraproduct(self.f, &self.g.apply_real_multiplier(mult), ParaKind::Lt, self.part);
        Ok(&first - &second)
    }
}
