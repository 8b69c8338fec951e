//! `phi4`: runs experiment verbs from a config file plus overrides.
//!
//! Exit status is 0 when every statistical verdict passes, 1 when some
//! verdict fails and 2 on errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use phi4_core::calibration::{DEFAULT_CORPUS, DEFAULT_SEED};
use phi4_core::config::Config;
use phi4_core::harness::{all_pass, calibrate, output_root, report, reports_text, run, run_verb, StatReport};

#[derive(Parser)]
#[command(name = "phi4", version, about = "Spectral Galerkin experiments for the dynamic Φ⁴₃ model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Config file of `section.key = value` lines.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set time.dt=0.001`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Cutoff level N (`model.level`).
    #[arg(short = 'N', long)]
    level: Option<u32>,
    /// Mass (`model.m0`).
    #[arg(long)]
    m0: Option<f64>,
    /// Coupling (`model.lambda`).
    #[arg(long)]
    lambda: Option<f64>,
    /// Master seed (`run.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output subdirectory (`run.tag`).
    #[arg(long)]
    tag: Option<String>,
    /// Steps between tree snapshots (`trees.snapshot_every`).
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Output root; defaults to `$PHI4_OUTPUT_DIR` or `./phi4-out`.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Config::parse(&text)?
            }
            None => Config::default(),
        };
        let flags = [
            ("model.level", self.level.map(|v| v.to_string())),
            ("model.m0", self.m0.map(|v| v.to_string())),
            ("model.lambda", self.lambda.map(|v| v.to_string())),
            ("run.seed", self.seed.map(|v| v.to_string())),
            ("run.tag", self.tag.clone()),
            ("trees.snapshot_every", self.snapshot_every.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.apply_overrides(self.set.iter().map(String::as_str))?;
        Ok(cfg)
    }

    fn root(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(output_root)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the verb named by `run.verb`.
    Run(RunArgs),
    /// Ensemble of Galerkin chains from the free field.
    Simulate(RunArgs),
    /// MALA samples of the truncated Gibbs measure.
    SampleGibbs(RunArgs),
    /// Invariance of the Gibbs measure under the dynamics.
    VerifyInvariance(RunArgs),
    /// Stochastic trees along an OU path, with snapshots.
    Trees(RunArgs),
    /// Renormalization constants for N = 0..=model.level.
    RenormConstants(RunArgs),
    /// Dyadic block norms of a saved snapshot.
    Besov(RunArgs),
    /// Commutator norm against heat-semigroup time.
    CommutatorScan(RunArgs),
    /// Energy functionals of the paracontrolled split.
    Diagnostics(RunArgs),
    /// Batch-means summary of columns of a CSV artifact.
    Report(ReportArgs),
    /// Regenerate the inequality-constant fixture.
    Calibrate(CalibrateArgs),
    /// Print every config key with its default and meaning.
    Defaults,
}

#[derive(Args)]
struct ReportArgs {
    /// CSV file; lines starting with `#` are skipped.
    file: PathBuf,
    /// Column to summarize, optionally `name=target`. Repeatable.
    #[arg(short, long = "column", value_name = "NAME[=TARGET]", required = true)]
    columns: Vec<String>,
    #[arg(long, default_value_t = 30)]
    batches: usize,
    /// |z| below which a target comparison passes.
    #[arg(long, default_value_t = 4.0)]
    threshold: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_CORPUS)]
    corpus: usize,
    /// Write here instead of stdout.
    #[arg(short, long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn verb_of(command: &Command) -> Option<(&'static str, &RunArgs)> {
    Some(match command {
        Command::Simulate(a) => ("simulate", a),
        Command::SampleGibbs(a) => ("sample-gibbs", a),
        Command::VerifyInvariance(a) => ("verify-invariance", a),
        Command::Trees(a) => ("trees", a),
        Command::RenormConstants(a) => ("renorm-constants", a),
        Command::Besov(a) => ("besov", a),
        Command::CommutatorScan(a) => ("commutator-scan", a),
        Command::Diagnostics(a) => ("diagnostics", a),
        _ => return None,
    })
}

fn finish(reports: &[StatReport], dir: Option<&Path>) -> bool {
    print!("{}", reports_text(reports));
    if let Some(d) = dir {
        println!("outputs in {}", d.display());
    }
    all_pass(reports)
}

fn parse_column(spec: &str) -> Result<(String, Option<f64>)> {
    Ok(match spec.split_once('=') {
        Some((name, t)) => (name.trim().to_string(), Some(t.trim().parse().with_context(|| format!("target of `{name}`"))?)),
        None => (spec.trim().to_string(), None),
    })
}

fn dispatch(cli: Cli) -> Result<bool> {
    if let Some((verb, args)) = verb_of(&cli.command) {
        let cfg = args.config()?;
        let root = args.root();
        let (m, reports) = run_verb(verb, &cfg, &root)?;
        let tag: String = cfg.get("run.tag")?;
        println!("run {} seed {}", m.run_id, m.seed);
        return Ok(finish(&reports, Some(&root.join(tag))));
    }
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let root = args.root();
            let (m, reports) = run(&cfg, &root)?;
            let tag: String = cfg.get("run.tag")?;
            println!("{} run {} seed {}", m.verb, m.run_id, m.seed);
            Ok(finish(&reports, Some(&root.join(tag))))
        }
        Command::Report(a) => {
            let text = std::fs::read_to_string(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
            let columns = a.columns.iter().map(|c| parse_column(c)).collect::<Result<Vec<_>>>()?;
            Ok(finish(&report(&text, &columns, a.batches, a.threshold)?, None))
        }
        Command::Calibrate(a) => {
            let text = calibrate(a.seed, a.corpus)?;
            match a.out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(true)
        }
        Command::Defaults => {
            print!("{}", Config::documented_defaults());
            Ok(true)
        }
        _ => unreachable!("verb commands handled above"),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
