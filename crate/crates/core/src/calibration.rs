//! Measured constants of the non-explicit Besov inequalities.
//!
//! Each inequality `‖A f‖ ≤ C ‖f‖...` is turned into a ratio evaluated on a
//! seeded corpus of random band-limited fields; the corpus maximum is the
//! frozen ceiling. Regression tests recompute the ratios and compare them
//! against a checked-in fixture produced by [`Calibration::to_text`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::besov::{besov_norm, lp_norm, BesovParams, DyadicPartition, Exponent};
use crate::error::{Error, Result};
use crate::paraproduct::{commutator_res, paraproduct, ParaKind};
use crate::projection::{project, semigroup, CutoffProfile, Projection};
use crate::spectral::{random_field, SpectralField};

pub const DEFAULT_SEED: u64 = 20_240_521;
pub const DEFAULT_CORPUS: usize = 100;

/// The inequalities, in fixture order.
pub const INEQUALITIES: [&str; 5] = ["embedding", "paraproduct_lt", "commutator_res", "heat_smoothing", "projection_bound"];

const EMB_S: f64 = 0.5;
const PARA_S: f64 = -0.5;
const COM: (f64, f64, f64) = (0.5, -0.25, -0.3);
const HEAT: (f64, f64) = (0.5, 0.25);
const HEAT_TIMES: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];
const BDDP_S: f64 = 0.5;
const BDDP_LEVELS: u32 = 5;

fn fin(p: f64) -> Exponent {
    Exponent::finite(p).expect("literal exponent")
}

fn holder(s: f64, p: f64) -> BesovParams {
    BesovParams::holder_type(s, fin(p))
}

/// Inputs of one corpus member; every inequality draws its own fields.
pub struct Sample {
    fields: Vec<SpectralField>,
}

impl Sample {
    pub fn draw(name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let fields = match name {
            "embedding" => vec![random_field(6, EMB_S, rng)],
            "paraproduct_lt" => vec![random_field(4, 0.5, rng), random_field(4, PARA_S, rng)],
            "commutator_res" => vec![random_field(4, COM.0, rng), random_field(4, COM.1, rng), random_field(4, COM.2, rng)],
            "heat_smoothing" => vec![random_field(6, HEAT.0 - 2.0 * HEAT.1, rng)],
            "projection_bound" => vec![random_field(8, BDDP_S, rng)],
            other => return Err(Error::InvalidParameter(format!("unknown inequality `{other}`"))),
        };
        Ok(Sample { fields })
    }
}

/// `‖f‖_{B^{s-3/4}_{4,∞}} / ‖f‖_{B^s_{2,∞}}`.
pub fn embedding_ratio(f: &SpectralField, part: &DyadicPartition) -> f64 {
    let shift = 3.0 * (0.5 - 0.25);
    besov_norm(f, holder(EMB_S - shift, 4.0), part) / besov_norm(f, holder(EMB_S, 2.0), part)
}

/// `‖f ◯< g‖_{B^s_{2,∞}} / (‖f‖_{L⁴} ‖g‖_{B^s_{4,∞}})`.
pub fn paraproduct_ratio(f: &SpectralField, g: &SpectralField, part: &DyadicPartition) -> f64 {
    let lt = paraproduct(f, g, ParaKind::Lt, part);
    besov_norm(&lt, holder(PARA_S, 2.0), part) / (lp_norm(f, fin(4.0)) * besov_norm(g, holder(PARA_S, 4.0), part))
}

/// `‖(f ◯< g) ◯= h − f(g ◯= h)‖_{B^{α+β+γ}_2} / (‖f‖_{B^α_6} ‖g‖_{B^β_6} ‖h‖_{B^γ_6})`.
pub fn commutator_ratio(f: &SpectralField, g: &SpectralField, h: &SpectralField, part: &DyadicPartition) -> f64 {
    let (a, b, c) = COM;
    let com = commutator_res(f, g, h, part);
    besov_norm(&com, holder(a + b + c, 2.0), part)
        / (besov_norm(f, holder(a, 6.0), part) * besov_norm(g, holder(b, 6.0), part) * besov_norm(h, holder(c, 6.0), part))
}

/// `max_t ‖e^{tΔ} f‖_{B^α_2} / ((1 + t^{-β}) ‖f‖_{B^{α-2β}_2})`.
pub fn heat_ratio(f: &SpectralField, part: &DyadicPartition) -> Result<f64> {
    let (a, b) = HEAT;
    let base = besov_norm(f, holder(a - 2.0 * b, 2.0), part);
    let mut worst = 0.0f64;
    for &t in &HEAT_TIMES {
        let smoothed = semigroup(t, 0.0, f)?;
        worst = worst.max(besov_norm(&smoothed, holder(a, 2.0), part) / ((1.0 + t.powf(-b)) * base));
    }
    Ok(worst)
}

/// `max_{N ≤ 5, i} ‖P_N^(i) f‖_{B^s_4} / ‖f‖_{B^s_4}`.
pub fn projection_ratio(f: &SpectralField, profile: &CutoffProfile, part: &DyadicPartition) -> f64 {
    let params = holder(BDDP_S, 4.0);
    let base = besov_norm(f, params, part);
    let mut worst = 0.0f64;
    for n in 0..=BDDP_LEVELS {
        for which in [Projection::Smooth, Projection::Rough] {
            worst = worst.max(besov_norm(&project(which, n, f, profile), params, part) / base);
        }
    }
    worst
}

/// Ratio of the named inequality on one sample.
pub fn ratio(name: &str, sample: &Sample, profile: &CutoffProfile, part: &DyadicPartition) -> Result<f64> {
    let f = &sample.fields;
    Ok(match name {
        "embedding" => embedding_ratio(&f[0], part),
        "paraproduct_lt" => paraproduct_ratio(&f[0], &f[1], part),
        "commutator_res" => commutator_ratio(&f[0], &f[1], &f[2], part),
        "heat_smoothing" => heat_ratio(&f[0], part)?,
        "projection_bound" => projection_ratio(&f[0], profile, part),
        other => return Err(Error::InvalidParameter(format!("unknown inequality `{other}`"))),
    })
}

/// All ratios of one inequality over a corpus; each inequality has its own stream.
pub fn corpus_ratios(name: &str, seed: u64, corpus: usize) -> Result<Vec<f64>> {
    let index = INEQUALITIES
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| Error::InvalidParameter(format!("unknown inequality `{name}`")))?;
    let part = DyadicPartition::build()?;
    let profile = CutoffProfile::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    (0..corpus)
        .map(|_| {
            let s = Sample::draw(name, &mut rng)?;
            ratio(name, &s, &profile, &part)
        })
        .collect()
}

/// Frozen ceilings together with the corpus that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub seed: u64,
    pub corpus: usize,
    pub ceilings: BTreeMap<String, f64>,
}

impl Calibration {
    pub fn measure(seed: u64, corpus: usize) -> Result<Self> {
        if corpus == 0 {
            return Err(Error::InvalidParameter("empty calibration corpus".into()));
        }
        let mut ceilings = BTreeMap::new();
        for name in INEQUALITIES {
            let max = corpus_ratios(name, seed, corpus)?.into_iter().fold(0.0f64, f64::max);
            ceilings.insert(name.to_string(), max);
        }
        Ok(Calibration { seed, corpus, ceilings })
    }

    pub fn ceiling(&self, name: &str) -> Result<f64> {
        self.ceilings
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config { key: name.into(), msg: "missing from calibration fixture".into() })
    }

    /// `key = value` lines; floats in round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# Corpus maxima of the inequality ratios. Regenerate with `phi4 calibrate`.\n");
        out.push_str(&format!("seed = {}\ncorpus = {}\n", self.seed, self.corpus));
        for (k, v) in &self.ceilings {
            out.push_str(&format!("ceiling.{k} = {v:?}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut seed, mut corpus, mut ceilings) = (None, None, BTreeMap::new());
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config { key: line.into(), msg: "expected key = value".into() })?;
            let bad = |e: String| Error::Config { key: k.into(), msg: e };
            match k {
                "seed" => seed = Some(v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
                "corpus" => corpus = Some(v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
                _ => {
                    let name = k
                        .strip_prefix("ceiling.")
                        .filter(|n| INEQUALITIES.contains(n))
                        .ok_or_else(|| bad("unknown key".into()))?;
                    let value: f64 = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                    ceilings.insert(name.to_string(), value);
                }
            }
        }
        let missing = |k: &str| Error::Config { key: k.into(), msg: "missing".into() };
        Ok(Calibration { seed: seed.ok_or_else(|| missing("seed"))?, corpus: corpus.ok_or_else(|| missing("corpus"))?, ceilings })
    }
}
