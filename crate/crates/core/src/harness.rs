//! Experiment orchestration: verbs, artifacts, manifests and statistical reports.
//!
//! A verb maps a [`Config`] to named artifacts plus a list of [`StatReport`]s.
//! [`run`] writes them under `<output>/<run.tag>/` next to a `manifest.txt`.
//! Every text artifact starts with a `# run <id> seed <seed>` line and every
//! binary artifact carries the first 12 hex digits of the run id in its name;
//! the run id is the SHA-256 of the code version and the canonical config.
//! Apart from the manifest (which records wall time) outputs are a pure
//! function of the config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::besov::{besov_norm, block_norms, BesovParams, DyadicPartition, Exponent};
use crate::calibration::Calibration;
use crate::config::{hex_digest, Config};
use crate::error::{Error, Result};
use crate::galerkin::{
    invariance_test, kb_average, Galerkin, GibbsSampler, Observable, Observer, GIBBS_STREAM,
};
use crate::ou::{eigenvalue, stationary_field, NoiseStream, OuEnsemble, RenormConstants, TreeContext};
use crate::paracontrolled::{path_diagnostics, stability_study, StabilityReport};
use crate::paraproduct::HeatCommutator;
use crate::projection::{CutoffProfile, Projection};
use crate::spectral::{lattice_cube, random_field, read_snapshot, write_snapshot};
use crate::stats::{batch_means, linear_fit, z_score, BatchEstimate, DEFAULT_BATCHES};

/// Environment variable overriding the output root.
pub const OUTPUT_ENV: &str = "PHI4_OUTPUT_DIR";
pub const DEFAULT_OUTPUT: &str = "phi4-out";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Verbs accepted by [`execute`].
pub const VERBS: [&str; 8] = [
    "simulate",
    "sample-gibbs",
    "verify-invariance",
    "trees",
    "renorm-constants",
    "besov",
    "commutator-scan",
    "diagnostics",
];

/// `$PHI4_OUTPUT_DIR` or `./phi4-out`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// Reported without a target.
    Info,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Info => "info",
        })
    }
}

/// One estimate compared (or not) against a target.
#[derive(Clone, Debug, PartialEq)]
pub struct StatReport {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub target: Option<f64>,
    pub z: Option<f64>,
    pub verdict: Verdict,
    /// False when the SE came from too few batches.
    pub reliable: bool,
}

impl StatReport {
    /// Pass iff `|z| < threshold`.
    pub fn against(name: impl Into<String>, est: BatchEstimate, target: f64, threshold: f64) -> Self {
        Self::z_test(name, est.mean, est.se, target, threshold, est.reliable)
    }

    pub fn z_test(name: impl Into<String>, estimate: f64, se: f64, target: f64, threshold: f64, reliable: bool) -> Self {
        let z = z_score(estimate, se, target);
        let verdict = if z.abs() < threshold { Verdict::Pass } else { Verdict::Fail };
        StatReport { name: name.into(), estimate, se, target: Some(target), z: Some(z), verdict, reliable }
    }

    /// A z-score computed elsewhere, e.g. a two-sample comparison.
    pub fn from_z(name: impl Into<String>, estimate: f64, se: f64, z: f64, threshold: f64) -> Self {
        let verdict = if z.abs() < threshold { Verdict::Pass } else { Verdict::Fail };
        StatReport { name: name.into(), estimate, se, target: None, z: Some(z), verdict, reliable: true }
    }

    /// Deterministic check such as a tolerance or a monotonicity.
    pub fn check(name: impl Into<String>, estimate: f64, target: Option<f64>, pass: bool) -> Self {
        let verdict = if pass { Verdict::Pass } else { Verdict::Fail };
        StatReport { name: name.into(), estimate, se: f64::NAN, target, z: None, verdict, reliable: true }
    }

    pub fn info(name: impl Into<String>, estimate: f64, se: f64) -> Self {
        StatReport { name: name.into(), estimate, se, target: None, z: None, verdict: Verdict::Info, reliable: true }
    }

    pub fn passed(&self) -> bool {
        self.verdict != Verdict::Fail
    }
}

pub fn all_pass(reports: &[StatReport]) -> bool {
    reports.iter().all(StatReport::passed)
}

/// Number formatting shared by every CSV: round-trip exact, exponent form
/// away from moderate magnitudes.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn reports_csv(reports: &[StatReport]) -> String {
    let mut out = String::from("name,estimate,se,target,z,verdict,reliable\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.name,
            num(r.estimate),
            num(r.se),
            opt(r.target),
            opt(r.z),
            r.verdict,
            r.reliable
        );
    }
    out
}

/// Aligned table for terminals.
pub fn reports_text(reports: &[StatReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:width$}  {:>14}  {:>11}  {:>14}  {:>8}  verdict\n", "name", "estimate", "se", "target", "z");
    for r in reports {
        let _ = writeln!(
            out,
            "{:width$}  {:>14.6e}  {:>11.3e}  {:>14}  {:>8}  {}{}",
            r.name,
            r.estimate,
            r.se,
            r.target.map(|t| format!("{t:.6e}")).unwrap_or_else(|| "-".into()),
            r.z.map(|z| format!("{z:.3}")).unwrap_or_else(|| "-".into()),
            r.verdict,
            if r.reliable { "" } else { " (SE unreliable)" }
        );
    }
    out
}

/// A file produced by a verb.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    /// Text artifact; a `# run ...` header is prepended.
    pub fn text(name: impl Into<String>, id: &RunId, body: &str) -> Self {
        Artifact { name: name.into(), bytes: format!("{}{body}", id.header()).into_bytes() }
    }

    pub fn binary(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Artifact { name: name.into(), bytes }
    }
}

/// Digest identifying a `(code version, config)` pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunId {
    pub digest: String,
    pub seed: u64,
}

impl RunId {
    pub fn of(cfg: &Config) -> Result<Self> {
        let digest = hex_digest(format!("version = {VERSION}\n{}", cfg.canonical()).as_bytes());
        Ok(RunId { digest, seed: cfg.seed()? })
    }

    pub fn header(&self) -> String {
        format!("# run {} seed {}\n", self.digest, self.seed)
    }

    pub fn short(&self) -> &str {
        &self.digest[..12]
    }
}

/// Everything a verb produced.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub reports: Vec<StatReport>,
    /// Time steps taken by the main dynamics; 0 for static verbs.
    pub steps: usize,
}

/// What was run, when, and what it wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub verb: String,
    pub run_id: String,
    pub seed: u64,
    pub version: String,
    pub config: String,
    pub started: u64,
    pub finished: u64,
    pub steps: usize,
    /// `(file name, sha256)` in write order.
    pub outputs: Vec<(String, String)>,
    pub all_pass: bool,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "verb = {}", self.verb);
        let _ = writeln!(out, "run_id = {}", self.run_id);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "version = {}", self.version);
        let _ = writeln!(out, "started = {}", self.started);
        let _ = writeln!(out, "finished = {}", self.finished);
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "all_pass = {}", self.all_pass);
        for (name, digest) in &self.outputs {
            let _ = writeln!(out, "output.{name} = {digest}");
        }
        for line in self.config.lines() {
            let _ = writeln!(out, "config.{line}");
        }
        out
    }

    /// Reads back a manifest; the embedded config is re-validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest {
            verb: String::new(),
            run_id: String::new(),
            seed: 0,
            version: String::new(),
            config: String::new(),
            started: 0,
            finished: 0,
            steps: 0,
            outputs: Vec::new(),
            all_pass: false,
        };
        let field = |k: &str, v: &str| Error::Config { key: k.into(), msg: format!("cannot parse {v:?}") };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Config { key: line.into(), msg: "expected key = value".into() })?;
            match k {
                "verb" => m.verb = v.into(),
                "run_id" => m.run_id = v.into(),
                "seed" => m.seed = v.parse().map_err(|_| field(k, v))?,
                "version" => m.version = v.into(),
                "started" => m.started = v.parse().map_err(|_| field(k, v))?,
                "finished" => m.finished = v.parse().map_err(|_| field(k, v))?,
                "steps" => m.steps = v.parse().map_err(|_| field(k, v))?,
                "all_pass" => m.all_pass = v.parse().map_err(|_| field(k, v))?,
                _ => {
                    if let Some(name) = k.strip_prefix("output.") {
                        m.outputs.push((name.into(), v.into()));
                    } else if let Some(key) = k.strip_prefix("config.") {
                        let _ = writeln!(m.config, "{key} = {v}");
                    } else {
                        return Err(Error::Config { key: k.into(), msg: "unknown manifest key".into() });
                    }
                }
            }
        }
        Config::parse(&m.config)?;
        Ok(m)
    }

    pub fn config(&self) -> Result<Config> {
        Config::parse(&self.config)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Runs `run.verb`, writes artifacts, `reports.csv`, `reports.txt` and
/// `manifest.txt` under `root/<run.tag>/`.
pub fn run(cfg: &Config, root: &Path) -> Result<(RunManifest, Vec<StatReport>)> {
    let verb: String = cfg.get("run.verb")?;
    run_verb(&verb, cfg, root)
}

pub fn run_verb(verb: &str, cfg: &Config, root: &Path) -> Result<(RunManifest, Vec<StatReport>)> {
    let started = unix_now();
    let id = RunId::of(cfg)?;
    let outcome = execute(verb, cfg)?;
    let tag: String = cfg.get("run.tag")?;
    let dir = root.join(tag);
    std::fs::create_dir_all(&dir)?;
    let mut files = outcome.artifacts;
    files.push(Artifact::text("reports.csv", &id, &reports_csv(&outcome.reports)));
    files.push(Artifact::text("reports.txt", &id, &reports_text(&outcome.reports)));
    let mut outputs = Vec::with_capacity(files.len());
    for a in &files {
        std::fs::write(dir.join(&a.name), &a.bytes)?;
        outputs.push((a.name.clone(), hex_digest(&a.bytes)));
    }
    let manifest = RunManifest {
        verb: verb.into(),
        run_id: id.digest.clone(),
        seed: id.seed,
        version: VERSION.into(),
        config: cfg.canonical(),
        started,
        finished: unix_now(),
        steps: outcome.steps,
        outputs,
        all_pass: all_pass(&outcome.reports),
    };
    std::fs::write(dir.join("manifest.txt"), manifest.to_text())?;
    Ok((manifest, outcome.reports))
}

/// Dispatches a verb without touching the file system.
pub fn execute(verb: &str, cfg: &Config) -> Result<Outcome> {
    let id = RunId::of(cfg)?;
    match verb {
        "simulate" => simulate(cfg, &id),
        "sample-gibbs" => sample_gibbs(cfg, &id),
        "verify-invariance" => verify_invariance(cfg, &id),
        "trees" => trees(cfg, &id),
        "renorm-constants" => renorm_constants(cfg, &id),
        "besov" => besov(cfg, &id),
        "commutator-scan" => commutator_scan(cfg, &id),
        "diagnostics" => diagnostics(cfg, &id),
        other => Err(Error::Config { key: "run.verb".into(), msg: format!("unknown verb `{other}`; expected one of {VERBS:?}") }),
    }
}

fn budget(cfg: &Config) -> Result<u64> {
    cfg.get("trees.c2_budget")
}

fn threshold(cfg: &Config) -> Result<f64> {
    cfg.get("report.threshold")
}

fn snapshot_bytes(f: &crate::spectral::SpectralField) -> Vec<u8> {
    let mut buf = Vec::new();
    write_snapshot(f, &mut buf).expect("writing to memory");
    buf
}

/// Observables summarized by `simulate` and `sample-gibbs`.
fn observables() -> Vec<Observable> {
    Observable::standard_set(10)
}

/// `E‖P_N^(2) X‖²` under the free field.
pub fn free_l2_target(level: u32, m0: f64, cutoff: usize, profile: &CutoffProfile) -> f64 {
    lattice_cube(cutoff)
        .map(|k| profile.weight(Projection::Rough, level, k).powi(2) / (2.0 * eigenvalue(k, m0)))
        .sum()
}

/// Recorded times, observable paths and the optional final snapshot of one chain.
type ChainRecord = (Vec<f64>, Vec<Vec<f64>>, Option<Vec<u8>>);

/// Independent chains from the free field; per-time ensemble means, final
/// per-chain observables and the final state of chain 0.
fn simulate(cfg: &Config, id: &RunId) -> Result<Outcome> {
    let sim = cfg.sim()?;
    let profile = CutoffProfile::standard();
    let consts = RenormConstants::compute(sim.level, sim.m0, &profile, budget(cfg)?)?;
    let sys = Galerkin::new(&sim, profile.clone(), consts)?;
    let steps = sim.steps()?;
    let burn = crate::galerkin::SimConfig { horizon: sim.burn_in, ..sim.clone() }.steps()?;
    let record: usize = cfg.get("sim.record_every")?;
    let obs = observables();
    let observer = Observer::new(sim.level, sys.cutoff(), &profile);

    let chains: Vec<ChainRecord> = (0..sim.chains)
        .into_par_iter()
        .map(|c| {
            let mut noise = NoiseStream::new(sim.seed, c as u64);
            let y0 = stationary_field(sys.cutoff(), sim.m0, &mut noise);
            let y0 = if burn > 0 { sys.simulate(&y0, burn, burn, &mut noise)?.states.pop().unwrap_or(y0) } else { y0 };
            let traj = sys.simulate(&y0, steps, record, &mut noise)?;
            let values = traj.states.iter().map(|s| observer.eval_all(&obs, s)).collect();
            let last = traj.states.last().expect("trajectory keeps its start");
            Ok((traj.times, values, (c == 0).then(|| snapshot_bytes(last))))
        })
        .collect::<Result<_>>()?;

    let times = chains.first().map(|c| c.0.clone()).unwrap_or_default();
    let mut series = String::from("t");
    for o in &obs {
        let _ = write!(series, ",{0}_mean,{0}_se", o.name());
    }
    series.push('\n');
    for (i, t) in times.iter().enumerate() {
        series.push_str(&num(*t));
        for j in 0..obs.len() {
            let v: Vec<f64> = chains.iter().map(|c| c.1[i][j]).collect();
            let (m, se) = crate::stats::mean_se(&v);
            let _ = write!(series, ",{},{}", num(m), num(se));
        }
        series.push('\n');
    }
    let mut finals = String::from("chain");
    for o in &obs {
        let _ = write!(finals, ",{}", o.name());
    }
    finals.push('\n');
    for (c, ch) in chains.iter().enumerate() {
        finals.push_str(&c.to_string());
        for v in ch.1.last().expect("nonempty") {
            let _ = write!(finals, ",{}", num(*v));
        }
        finals.push('\n');
    }

    let mut reports = Vec::new();
    let th = threshold(cfg)?;
    for (j, o) in obs.iter().enumerate() {
        let v: Vec<f64> = chains.iter().map(|c| *c.1.last().expect("nonempty").get(j).expect("obs")).collect();
        let est = batch_means(&v, DEFAULT_BATCHES);
        if sim.lambda == 0.0 && *o == Observable::L2NormSq {
            let target = free_l2_target(sim.level, sim.m0, sys.cutoff(), &profile);
            reports.push(StatReport::against(format!("final_{}", o.name()), est, target, th));
        } else {
            reports.push(StatReport { reliable: est.reliable, ..StatReport::info(format!("final_{}", o.name()), est.mean, est.se) });
        }
    }
    if let Some(ch) = chains.first() {
        let l2: Vec<f64> = ch.1.iter().map(|v| v[0]).collect();
        if times.len() > 1 {
            reports.push(StatReport::info("time_average_l2_norm_sq_chain0", kb_average(&times, &l2)?, f64::NAN));
        }
    }
    let mut artifacts = vec![Artifact::text("simulate.csv", id, &series), Artifact::text("final.csv", id, &finals)];
    if let Some(bytes) = chains.into_iter().next().and_then(|c| c.2) {
        artifacts.push(Artifact::binary(format!("final_chain0_{}.phi4", id.short()), bytes));
    }
    Ok(Outcome { artifacts, reports, steps })
}

fn sample_gibbs(cfg: &Config, id: &RunId) -> Result<Outcome> {
    let sim = cfg.sim()?;
    let gibbs = cfg.gibbs()?;
    let profile = CutoffProfile::standard();
    let consts = RenormConstants::compute(sim.level, sim.m0, &profile, budget(cfg)?)?;
    let mut sampler = GibbsSampler::new(&sim, &gibbs, consts, profile.clone(), NoiseStream::new(sim.seed, GIBBS_STREAM))?;
    let samples = sampler.collect_samples();
    let cutoff = sim.state_cutoff(&profile);
    let observer = Observer::new(sim.level, cutoff, &profile);
    let obs = observables();
    let values: Vec<Vec<f64>> = samples.iter().map(|s| observer.eval_all(&obs, s)).collect();

    let mut csv = String::from("sample");
    for o in &obs {
        let _ = write!(csv, ",{}", o.name());
    }
    csv.push('\n');
    for (i, row) in values.iter().enumerate() {
        csv.push_str(&i.to_string());
        for v in row {
            let _ = write!(csv, ",{}", num(*v));
        }
        csv.push('\n');
    }

    let th = threshold(cfg)?;
    let mut reports = Vec::new();
    for (j, o) in obs.iter().enumerate() {
        let col: Vec<f64> = values.iter().map(|r| r[j]).collect();
        let est = batch_means(&col, DEFAULT_BATCHES);
        if sim.lambda == 0.0 && *o == Observable::L2NormSq {
            reports.push(StatReport::against(o.name(), est, free_l2_target(sim.level, sim.m0, cutoff, &profile), th));
        } else {
            reports.push(StatReport { reliable: est.reliable, ..StatReport::info(o.name(), est.mean, est.se) });
        }
    }
    let rate = sampler.acceptance_rate();
    reports.push(StatReport::check("acceptance_rate", rate, None, sampler.check_acceptance().is_none()));
    let mut artifacts = vec![Artifact::text("gibbs.csv", id, &csv)];
    if let Some(last) = samples.last() {
        artifacts.push(Artifact::binary(format!("last_sample_{}.phi4", id.short()), snapshot_bytes(last)));
    }
    Ok(Outcome { artifacts, reports, steps: 0 })
}

fn verify_invariance(cfg: &Config, id: &RunId) -> Result<Outcome> {
    let sim = cfg.sim()?;
    let profile = CutoffProfile::standard();
    let consts = RenormConstants::compute(sim.level, sim.m0, &profile, budget(cfg)?)?;
    let inv = cfg.invariance()?;
    let checkpoint_z: f64 = 3.0;
    let rep = invariance_test(&sim, &cfg.gibbs()?, &inv, &observables(), &profile, consts)?;

    let mut reports = Vec::new();
    let mut obs_csv = String::from("observable,before_mean,before_se,after_mean,after_se,z,threshold\n");
    for o in &rep.observables {
        let _ = writeln!(
            obs_csv,
            "{},{},{},{},{},{},{}",
            o.name,
            num(o.before.mean),
            num(o.before.se),
            num(o.after.mean),
            num(o.after.se),
            num(o.z),
            num(rep.threshold)
        );
        let se = o.before.se.hypot(o.after.se);
        reports.push(StatReport::from_z(format!("drift_{}", o.name), o.after.mean - o.before.mean, se, o.z, rep.threshold));
    }
    let mut cp_csv = String::from("t,mean_l2,se,z\n");
    for c in &rep.checkpoints {
        let _ = writeln!(cp_csv, "{},{},{},{}", num(c.time), num(c.estimate.mean), num(c.estimate.se), num(c.z));
        reports.push(StatReport::from_z(format!("l2_at_t={}", num(c.time)), c.estimate.mean, c.estimate.se, c.z, checkpoint_z));
    }
    let mut ladder_csv = String::from("dt,drift_mean,drift_se,residual_mean,residual_se\n");
    for l in &rep.ladder {
        let _ = writeln!(
            ladder_csv,
            "{},{},{},{},{}",
            num(l.dt),
            num(l.drift.mean),
            num(l.drift.se),
            num(l.residual.mean),
            num(l.residual.se)
        );
        reports.push(StatReport::info(format!("residual_dt={}", num(l.dt)), l.residual.mean, l.residual.se));
    }
    reports.push(StatReport::info("extrapolated_drift", rep.extrapolated_drift, f64::NAN));
    reports.push(StatReport::check("residual_monotone", rep.ladder.len() as f64, None, rep.residual_monotone()));
    reports.push(StatReport::info("gibbs_acceptance", rep.acceptance, f64::NAN));
    let steps = sim.steps()?;
    Ok(Outcome {
        artifacts: vec![
            Artifact::text("invariance.csv", id, &obs_csv),
            Artifact::text("checkpoints.csv", id, &cp_csv),
            Artifact::text("ladder.csv", id, &ladder_csv),
        ],
        reports,
        steps,
    })
}

/// One stationary OU path with its trees; CSV summaries every recorded
/// step and binary snapshots every `trees.snapshot_every` steps.
fn trees(cfg: &Config, id: &RunId) -> Result<Outcome> {
    let sim = cfg.sim()?;
    let profile = CutoffProfile::standard();
    let ctx = TreeContext::new(sim.level, sim.m0, profile.clone(), budget(cfg)?)?;
    let cutoff = sim.state_cutoff(&profile);
    let mut noise = NoiseStream::new(sim.seed, 0);
    let mut ens = OuEnsemble::init_stationary(ctx, cutoff, &mut noise);
    let burn: f64 = cfg.get("trees.burn_in")?;
    ens.burn_in(burn, sim.dt, &mut noise)?;
    let steps = sim.steps()?;
    let every: usize = cfg.get("trees.snapshot_every")?;
    let record: usize = cfg.get::<usize>("sim.record_every")?.max(1);

    let mut csv = String::from("t,tree,mean,l2_norm\n");
    let mut artifacts = Vec::new();
    let mut push = |n: usize, ens: &OuEnsemble, artifacts: &mut Vec<Artifact>| {
        let trees = ens.trees();
        if n % record == 0 || n == steps {
            for (name, f) in trees.iter() {
                let _ = writeln!(csv, "{},{name},{},{}", num(ens.time()), num(f.mean()), num(f.l2_norm()));
            }
        }
        if every > 0 && (n % every == 0 || n == steps) {
            for (name, f) in trees.iter() {
                artifacts.push(Artifact::binary(format!("{name}_{n:07}_{}.phi4", id.short()), snapshot_bytes(f)));
            }
        }
    };
    push(0, &ens, &mut artifacts);
    for n in 1..=steps {
        ens.step(sim.dt, &mut noise)?;
        push(n, &ens, &mut artifacts);
    }
    artifacts.insert(0, Artifact::text("trees.csv", id, &csv));
    let t = ens.trees();
    let reports = t.iter().map(|(name, f)| StatReport::info(format!("{name}_final_l2_norm"), f.l2_norm(), f64::NAN)).collect();
    Ok(Outcome { artifacts, reports, steps })
}

/// `C₁`, `C₂` for `N = 0..=model.level`; both must increase with `N`.
fn renorm_constants(cfg: &Config, id: &RunId) -> Result<Outcome> {
    let level: u32 = cfg.get("model.level")?;
    let m0: f64 = cfg.get("model.m0")?;
    if !(m0 > 0.0) {
        return Err(Error::Config { key: "model.m0".into(), msg: format!("{m0} must be positive") });
    }
    let profile = CutoffProfile::standard();
    let b = budget(cfg)?;
    let rows: Vec<RenormConstants> = (0..=level).map(|n| RenormConstants::compute(n, m0, &profile, b)).collect::<Result<_>>()?;
    let mut csv = String::from("level,m0,c1,c2\n");
    let mut reports = Vec::new();
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.level, num(r.m0), num(r.c1), num(r.c2));
        reports.push(StatReport::info(format!("c1_N={}", r.level), r.c1, f64::NAN));
        reports.push(StatReport::info(format!("c2_N={}", r.level), r.c2, f64::NAN));
    }
    if rows.len() > 1 {
        let inc = |f: fn(&RenormConstants) -> f64| rows.windows(2).all(|w| f(&w[1]) > f(&w[0]));
        reports.push(StatReport::check("c1_increasing", rows.len() as f64, None, inc(|r| r.c1)));
        reports.push(StatReport::check("c2_increasing", rows.len() as f64, None, inc(|r| r.c2)));
    }
    Ok(Outcome { artifacts: vec![Artifact::text("renorm_constants.csv", id, &csv)], reports, steps: 0 })
}

/// Dyadic block norms `‖Δ_j f‖_{L^p}` of a snapshot and its `B^s_{p,r}` norm.
fn besov(cfg: &Config, id: &RunId) -> Result<Outcome> {
    let path: String = cfg.get("besov.snapshot")?;
    if path.is_empty() {
        return Err(Error::Config { key: "besov.snapshot".into(), msg: "an input snapshot is required".into() });
    }
    let file = std::fs::File::open(&path).map_err(|e| Error::Config { key: "besov.snapshot".into(), msg: format!("{path}: {e}") })?;
    let f = read_snapshot(std::io::BufReader::new(file))?;
    let p: Exponent = cfg.get("besov.p")?;
    let r: Exponent = cfg.get("besov.r")?;
    let s: f64 = cfg.get("besov.s")?;
    let part = DyadicPartition::build()?;
    let mut csv = String::from("j,block_norm\n");
    for (j, v) in block_norms(&f, p, &part) {
        let _ = writeln!(csv, "{j},{}", num(v));
    }
    let norm = besov_norm(&f, BesovParams::new(s, p, r), &part);
    Ok(Outcome {
        artifacts: vec![Artifact::text("besov.csv", id, &csv)],
        reports: vec![StatReport::info("besov_norm", norm, f64::NAN)],
        steps: 0,
    })
}

/// Log-spaced times between `t_min` and `t_max`, inclusive.
pub fn log_times(t_min: f64, t_max: f64, points: usize) -> Result<Vec<f64>> {
    if !(t_min > 0.0 && t_max > t_min && points >= 2) {
        return Err(Error::InvalidParameter(format!("bad scan range [{t_min}, {t_max}] with {points} points")));
    }
    let (a, b) = (t_min.ln(), t_max.ln());
    Ok((0..points).map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp()).collect())
}

/// Result of a commutator scan.
#[derive(Clone, Debug, PartialEq)]
pub struct CommutatorScan {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub slope: f64,
    pub predicted: f64,
}

/// `‖e^{tΔ}P1²(f◯<g) - f◯<(e^{tΔ}P1² g)‖_{B^γ_{p,∞}}` over `t` for
/// `f ∈ B^{α+ε}`, `g ∈ B^β` random, with the fitted log-log slope.
pub fn commutator_scan_values(cfg: &Config) -> Result<CommutatorScan> {
    let alpha: f64 = cfg.get("commutator.alpha")?;
    let beta: f64 = cfg.get("commutator.beta")?;
    let gamma: f64 = cfg.get("commutator.gamma")?;
    let eps: f64 = cfg.get("commutator.epsilon")?;
    let k: usize = cfg.get("commutator.cutoff")?;
    let p: Exponent = cfg.get("commutator.p")?;
    let level: u32 = cfg.get("model.level")?;
    let times = log_times(cfg.get("commutator.t_min")?, cfg.get("commutator.t_max")?, cfg.get("commutator.points")?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let f = random_field(k, alpha + eps, &mut rng);
    let g = random_field(k, beta, &mut rng);
    let profile = CutoffProfile::standard();
    let part = DyadicPartition::build()?;
    let com = HeatCommutator::new(&f, &g, level, &profile, &part);
    let params = BesovParams::holder_type(gamma, p);
    let norms = times.iter().map(|&t| Ok(besov_norm(&com.at(t)?, params, &part))).collect::<Result<Vec<f64>>>()?;
    let lx: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = norms.iter().map(|n| n.ln()).collect();
    let (slope, _) = linear_fit(&lx, &ly);
    Ok(CommutatorScan { times, norms, slope, predicted: 0.5 * (gamma - alpha - beta) })
}

fn commutator_scan(cfg: &Config, id: &RunId) -> Result<Outcome> {
    let scan = commutator_scan_values(cfg)?;
    let tol: f64 = cfg.get("commutator.tolerance")?;
    let mut csv = String::from("t,norm,predicted_power\n");
    for (t, n) in scan.times.iter().zip(&scan.norms) {
        let _ = writeln!(csv, "{},{},{}", num(*t), num(*n), num(t.powf(scan.predicted)));
    }
    let pass = (scan.slope - scan.predicted).abs() <= tol;
    Ok(Outcome {
        artifacts: vec![Artifact::text("commutator_scan.csv", id, &csv)],
        reports: vec![StatReport::check("loglog_slope", scan.slope, Some(scan.predicted), pass)],
        steps: 0,
    })
}

/// Table of stability reports, one row per level.
pub fn sweep_table(rows: &[StabilityReport]) -> String {
    let mut out = String::from("level,lambda,seeds,paths_per_seed,mean_x,se_x,spread_x,mean_yq,se_yq,spread_yq\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.level,
            num(r.lambda),
            r.seeds.len(),
            r.paths_per_seed,
            num(r.x.0),
            num(r.x.1),
            num(r.spread_x),
            num(r.yq.0),
            num(r.yq.1),
            num(r.spread_yq)
        );
    }
    out
}

/// Stability studies for `N = 0..=max_level` over `seeds` consecutive seeds.
pub fn level_sweep(cfg: &Config, max_level: u32, seeds: usize) -> Result<Vec<StabilityReport>> {
    let ep = cfg.energy()?;
    let paths: usize = cfg.get("diagnostics.paths")?;
    let base = cfg.seed()?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| base + i).collect();
    (0..=max_level)
        .map(|n| {
            let mut c = cfg.clone();
            c.set("model.level", &n.to_string())?;
            let split = c.split()?;
            let ctx = TreeContext::new(n, split.sim.m0, CutoffProfile::standard(), budget(cfg)?)?;
            stability_study(&ctx, &split, &ep, &seed_list, paths)
        })
        .collect()
}

/// With `diagnostics.seeds = 1`, one path: per-time integrands and the two
/// functionals. Otherwise the across-seed study for every level up to
/// `model.level`, with the sweep table.
fn diagnostics(cfg: &Config, id: &RunId) -> Result<Outcome> {
    let seeds: usize = cfg.get("diagnostics.seeds")?;
    let split = cfg.split()?;
    let steps = split.sim.steps()?;
    if seeds > 1 {
        let max_spread: f64 = cfg.get("diagnostics.max_spread")?;
        let rows = level_sweep(cfg, split.sim.level, seeds)?;
        let mut per_seed = String::from("level,seed,mean_x,mean_yq,mean_lt_sup,mean_geq_sup\n");
        let mut reports = Vec::new();
        for r in &rows {
            for s in &r.seeds {
                let _ = writeln!(
                    per_seed,
                    "{},{},{},{},{},{}",
                    r.level,
                    s.seed,
                    num(s.mean_x),
                    num(s.mean_yq),
                    num(s.mean_lt_sup),
                    num(s.mean_geq_sup)
                );
            }
            reports.push(StatReport::check(format!("spread_x_N={}", r.level), r.spread_x, Some(max_spread), r.finite() && r.spread_x < max_spread));
            reports.push(StatReport::check(format!("spread_yq_N={}", r.level), r.spread_yq, Some(max_spread), r.finite() && r.spread_yq < max_spread));
        }
        return Ok(Outcome {
            artifacts: vec![Artifact::text("level_sweep.csv", id, &sweep_table(&rows)), Artifact::text("stability.csv", id, &per_seed)],
            reports,
            steps,
        });
    }
    let ep = cfg.energy()?;
    let ctx = TreeContext::new(split.sim.level, split.sim.m0, CutoffProfile::standard(), budget(cfg)?)?;
    let (d, values) = path_diagnostics(&ctx, &split, &ep, 0)?;
    let mut csv = String::from("t,grad_geq,x2_sq,quartic,lt_besov,geq_besov,lt_weighted,geq_weighted\n");
    for v in &values {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            num(v.t),
            num(v.grad_geq),
            num(v.x2_sq),
            num(v.quartic),
            num(v.lt_besov),
            num(v.geq_besov),
            num(v.lt_weighted),
            num(v.geq_weighted)
        );
    }
    let finals = [
        ("x_integral", d.x.integral),
        ("x_holder", d.x.holder),
        ("x_total", d.x.total()),
        ("y_lt", d.y.lt),
        ("y_geq", d.y.geq),
        ("y_total", d.y.total()),
        ("lt_weighted_sup", d.lt_weighted_sup),
        ("geq_weighted_sup", d.geq_weighted_sup),
        ("final_gap", d.final_gap),
    ];
    let mut fcsv = String::from("functional,value\n");
    let mut reports = Vec::new();
    for (name, v) in finals {
        let _ = writeln!(fcsv, "{name},{}", num(v));
        reports.push(StatReport::check(name, v, None, v.is_finite()));
    }
    Ok(Outcome {
        artifacts: vec![Artifact::text("integrands.csv", id, &csv), Artifact::text("functionals.csv", id, &fcsv)],
        reports,
        steps,
    })
}

/// Parsed numeric CSV: `#` lines skipped, first other line is the header.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::InvalidParameter("empty table".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let rows = lines
            .enumerate()
            .map(|(i, l)| {
                l.split(',')
                    .map(|s| {
                        let s = s.trim();
                        if s.is_empty() {
                            Ok(f64::NAN)
                        } else {
                            s.parse::<f64>().map_err(|_| Error::InvalidParameter(format!("row {}: `{s}` is not a number", i + 1)))
                        }
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.into()))?;
        Ok(self.rows.iter().map(|r| r.get(j).copied().unwrap_or(f64::NAN)).collect())
    }
}

/// Batch-means estimates of named columns, with a z-test where a target is given.
pub fn report(text: &str, columns: &[(String, Option<f64>)], batches: usize, threshold: f64) -> Result<Vec<StatReport>> {
    let table = Table::parse(text)?;
    columns
        .iter()
        .map(|(name, target)| {
            let est = batch_means(&table.column(name)?, batches);
            Ok(match target {
                Some(t) => StatReport::against(name.clone(), est, *t, threshold),
                None => StatReport { reliable: est.reliable, ..StatReport::info(name.clone(), est.mean, est.se) },
            })
        })
        .collect()
}

/// The inequality fixture text for a seeded corpus.
pub fn calibrate(seed: u64, corpus: usize) -> Result<String> {
    Ok(Calibration::measure(seed, corpus)?.to_text())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn small(extra: &str) -> Config {
        let mut c = Config::parse("sim.chains = 8\ntime.horizon = 0.02\ntime.dt = 0.01\nrun.tag = t").unwrap();
        c.apply_overrides(extra.lines().filter(|l| !l.is_empty())).unwrap();
        c
    }

    #[test]
    fn report_z_and_unreliable_flag() {
        let r = report("x\n0\n0\n0\n", &[("x".into(), Some(0.0))], 1, 4.0).unwrap();
        assert!(!r[0].reliable);
        let r = report("# run abc seed 0\nx,y\n1,0\n-1,0\n1,0\n-1,0\n", &[("y".into(), Some(0.0))], 2, 4.0).unwrap();
        assert_eq!(r[0].estimate, 0.0);
    }

    #[test]
    fn report_recovers_an_injected_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.7, 2.0).unwrap();
        let mut text = String::from("v\n");
        for _ in 0..10_000 {
            let _ = writeln!(text, "{}", n.sample(&mut rng));
        }
        let r = report(&text, &[("v".into(), Some(0.7))], DEFAULT_BATCHES, 4.0).unwrap();
        assert!(r[0].z.unwrap().abs() < 4.0 && r[0].reliable, "{r:?}");
        let r = report(&text, &[("v".into(), Some(0.0))], DEFAULT_BATCHES, 4.0).unwrap();
        assert_eq!(r[0].verdict, Verdict::Fail);
    }

    #[test]
    fn missing_column_is_named() {
        let err = report("a\n1\n", &[("b".into(), None)], 30, 4.0).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "b"));
    }

    #[test]
    fn zero_step_run_is_valid() {
        let cfg = small("time.horizon = 0");
        let out = execute("simulate", &cfg).unwrap();
        assert_eq!(out.steps, 0);
        assert!(all_pass(&out.reports));
        let out = execute("trees", &small("time.horizon = 0\ntrees.burn_in = 0.1")).unwrap();
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn execute_is_deterministic() {
        let cfg = small("");
        let a = execute("simulate", &cfg).unwrap();
        let b = execute("simulate", &cfg).unwrap();
        assert_eq!(a.artifacts, b.artifacts);
        let header = RunId::of(&cfg).unwrap().header();
        assert!(String::from_utf8_lossy(&a.artifacts[0].bytes).starts_with(&header));
    }

    #[test]
    fn unknown_verb_is_a_config_error() {
        let err = execute("fly", &Config::default()).unwrap_err();
        assert!(err.to_string().contains("run.verb"));
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = small("run.seed = 3");
        let m = RunManifest {
            verb: "simulate".into(),
            run_id: RunId::of(&cfg).unwrap().digest,
            seed: 3,
            version: VERSION.into(),
            config: cfg.canonical(),
            started: 1,
            finished: 2,
            steps: 2,
            outputs: vec![("a.csv".into(), "00".into())],
            all_pass: true,
        };
        let back = RunManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config().unwrap(), cfg);
    }

    #[test]
    fn renorm_constants_increase() {
        let out = execute("renorm-constants", &Config::parse("model.level = 1").unwrap()).unwrap();
        assert!(all_pass(&out.reports));
        assert_eq!(out.reports.iter().filter(|r| r.verdict == Verdict::Pass).count(), 2);
    }

    #[test]
    fn free_target_counts_every_mode() {
        let p = CutoffProfile::standard();
        let t = free_l2_target(0, 1.0, 0, &p);
        assert!((t - 0.5).abs() < 1e-15);
    }

    #[test]
    fn num_round_trips() {
        for x in [0.0, 1.5, -2e-9, 3.25e17, 1e-4, f64::NAN] {
            let s = num(x);
            let back: f64 = s.parse().unwrap();
            assert!(back == x || (x.is_nan() && back.is_nan()), "{s}");
        }
    }

    #[test]
    fn log_times_hit_both_ends() {
        let t = log_times(1e-4, 1e-1, 4).unwrap();
        assert!((t[0] - 1e-4).abs() < 1e-18 && (t[3] - 1e-1).abs() < 1e-15);
        assert!((t[1] - 1e-3).abs() < 1e-15);
        assert!(log_times(1.0, 0.5, 3).is_err());
    }
}
