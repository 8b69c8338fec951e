//! Flat `section.key = value` run configuration.
//!
//! Every key has a default in [`SCHEMA`]; a file only lists what it changes.
//! Unknown keys, duplicates and malformed lines are errors naming the key.
//! `#` starts a comment.

use std::collections::BTreeMap;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::galerkin::{GibbsConfig, InvarianceConfig, NoiseFilter, Scheme, SimConfig};
use crate::paracontrolled::{EnergyParams, SplitConfig};

/// `(key, default, description)` for every accepted key.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("run.verb", "simulate", "verb dispatched by `run`"),
    ("run.seed", "0", "master seed; chain i uses stream i"),
    ("run.tag", "run", "name of the output subdirectory"),
    ("model.level", "0", "cutoff level N"),
    ("model.m0", "1", "mass m0 > 0"),
    ("model.lambda", "0.1", "coupling, 0 <= lambda <= lambda0"),
    ("model.lambda0", "1", "upper bound on the coupling"),
    ("time.dt", "0.001", "step size"),
    ("time.horizon", "1", "final time T, a multiple of dt"),
    ("time.burn_in", "0", "discarded initial time"),
    ("time.scheme", "exponential-euler", "exponential-euler | tamed-euler"),
    ("sim.chains", "1000", "independent chains"),
    ("sim.grid", "0", "real-space resolution for exports, 0 = 2(2K+1)"),
    ("sim.cutoff", "0", "state cube |k_i| <= K, 0 = support of P_N^(2)"),
    ("sim.noise", "white", "white | rough (P_N^(2)-filtered)"),
    ("sim.blowup_ceiling", "1e6", "abort when the L2 norm exceeds this"),
    ("sim.record_every", "100", "steps between recorded states"),
    ("gibbs.step", "0.5", "initial MALA step"),
    ("gibbs.samples", "1000", "retained samples"),
    ("gibbs.thinning", "5", "proposals per retained sample"),
    ("gibbs.warmup", "2000", "adaptation proposals"),
    ("gibbs.band_low", "0.4", "lower end of the target acceptance band"),
    ("gibbs.band_high", "0.8", "upper end of the target acceptance band"),
    ("gibbs.adapt", "true", "adapt the step during warmup"),
    ("invariance.ladder", "3", "number of step sizes dt, 2dt, 4dt, ..."),
    ("invariance.checkpoints", "5", "times at which E|X_t|^2 is compared"),
    ("invariance.batches", "30", "batches for batch-means standard errors"),
    ("invariance.alpha", "0.0026997960632601866", "family-wise level of the drift tests"),
    ("trees.snapshot_every", "100", "steps between binary tree snapshots, 0 = none"),
    ("trees.c2_budget", "200000000", "term budget for the C2 lattice sum"),
    ("trees.burn_in", "20", "burn-in of the tree convolutions"),
    ("besov.snapshot", "", "input snapshot file"),
    ("besov.p", "2", "integrability, a number or inf"),
    ("besov.s", "0", "smoothness"),
    ("besov.r", "inf", "summability, a number or inf"),
    ("commutator.alpha", "0.5", "regularity of f"),
    ("commutator.beta", "-1.05", "regularity of g"),
    ("commutator.gamma", "-0.5", "smoothness of the measuring norm"),
    ("commutator.epsilon", "0.1", "extra regularity of the sampled f"),
    ("commutator.cutoff", "8", "cube of the random fields"),
    ("commutator.p", "2", "integrability of the measuring norm"),
    ("commutator.t_min", "1e-4", "smallest time"),
    ("commutator.t_max", "1e-1", "largest time"),
    ("commutator.points", "13", "log-spaced times"),
    ("commutator.tolerance", "0.15", "allowed slope deviation"),
    ("diagnostics.eta", "0.4", "time weight exponent"),
    ("diagnostics.gamma", "0.1", "Hoelder exponent"),
    ("diagnostics.epsilon", "0.04", "Besov offset"),
    ("diagnostics.q", "1.1", "moment of the second functional"),
    ("diagnostics.record_every", "20", "steps between evaluated states"),
    ("diagnostics.seeds", "1", "seeds for the stability study, 1 = single path"),
    ("diagnostics.paths", "1", "paths per seed"),
    ("diagnostics.burn_in", "20", "joint burn-in of (X, Z)"),
    ("diagnostics.burn_in_dt", "0.01", "step of the joint burn-in"),
    ("diagnostics.max_spread", "0.5", "largest accepted across-seed relative spread"),
    ("report.threshold", "4", "|z| below which a target comparison passes"),
];

fn default_of(key: &str) -> Option<&'static str> {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

/// A validated set of key-value pairs over the schema.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: SCHEMA.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect(),
        }
    }
}

impl Config {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: format!("line {}", no + 1),
                    msg: format!("expected `section.key = value`, got {line:?}"),
                });
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config { key: key.into(), msg: format!("set twice (line {})", no + 1) });
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(Error::Config { key: key.into(), msg: "unknown key".into() });
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for pair in pairs {
            let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config {
                key: pair.into(),
                msg: "override must look like key=value".into(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config { key: key.into(), msg: "unknown key".into() })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse::<T>()
            .map_err(|e| Error::Config { key: key.into(), msg: format!("cannot parse {raw:?}: {e}") })
    }

    /// Every key in sorted order, one `key = value` per line.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn digest(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("run.seed")
    }

    pub fn sim(&self) -> Result<SimConfig> {
        let cutoff: usize = self.get("sim.cutoff")?;
        let sim = SimConfig {
            level: self.get("model.level")?,
            m0: self.get("model.m0")?,
            lambda: self.get("model.lambda")?,
            lambda0: self.get("model.lambda0")?,
            dt: self.get("time.dt")?,
            horizon: self.get("time.horizon")?,
            scheme: self.get::<Scheme>("time.scheme")?,
            seed: self.seed()?,
            grid: self.get("sim.grid")?,
            chains: self.get("sim.chains")?,
            burn_in: self.get("time.burn_in")?,
            cutoff: (cutoff > 0).then_some(cutoff),
            blowup_ceiling: self.get("sim.blowup_ceiling")?,
            noise: self.get::<NoiseFilter>("sim.noise")?,
        };
        sim.validate(&Default::default()).map_err(|e| Error::Config { key: "model/time/sim".into(), msg: e.to_string() })?;
        Ok(sim)
    }

    pub fn gibbs(&self) -> Result<GibbsConfig> {
        let g = GibbsConfig {
            mala_step: self.get("gibbs.step")?,
            samples: self.get("gibbs.samples")?,
            thinning: self.get("gibbs.thinning")?,
            warmup: self.get("gibbs.warmup")?,
            band: (self.get("gibbs.band_low")?, self.get("gibbs.band_high")?),
            adapt: self.get("gibbs.adapt")?,
        };
        g.validate().map_err(|e| Error::Config { key: "gibbs".into(), msg: e.to_string() })?;
        Ok(g)
    }

    pub fn invariance(&self) -> Result<InvarianceConfig> {
        Ok(InvarianceConfig {
            ladder: self.get("invariance.ladder")?,
            checkpoints: self.get("invariance.checkpoints")?,
            batches: self.get("invariance.batches")?,
            alpha: self.get("invariance.alpha")?,
        })
    }

    pub fn energy(&self) -> Result<EnergyParams> {
        let ep = EnergyParams {
            eta: self.get("diagnostics.eta")?,
            gamma: self.get("diagnostics.gamma")?,
            epsilon: self.get("diagnostics.epsilon")?,
            q: self.get("diagnostics.q")?,
        };
        ep.validate().map_err(|e| Error::Config { key: "diagnostics".into(), msg: e.to_string() })?;
        Ok(ep)
    }

    pub fn split(&self) -> Result<SplitConfig> {
        Ok(SplitConfig {
            sim: SimConfig { noise: NoiseFilter::Rough, ..self.sim()? },
            burn_in: self.get("diagnostics.burn_in")?,
            burn_in_dt: self.get("diagnostics.burn_in_dt")?,
            record_every: self.get("diagnostics.record_every")?,
        })
    }

    /// The schema as a commented config file.
    pub fn documented_defaults() -> String {
        SCHEMA.iter().map(|(k, d, doc)| format!("# {doc}\n{k} = {d}\n")).collect()
    }
}

/// Lower-case hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
