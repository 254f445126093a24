//! `latchlab` command-line entry point.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latchlab::momentgame::GameVariant;
use serde::Serialize;
use serde_json::{Map, Value};

use commands::{
    BanditRunConfig, CliffConfig, ModeSelection, MomentGameRun, Outcome, RealizabilityConfig, VerifyConfig,
};
use config::{set, sha256_hex, CliError, ConfigDoc, Manifest, MANIFEST_NAME};
use latchlab::sweeps::SweepConfig;

#[derive(Parser)]
#[command(name = "latchlab", version, about = "Imitation learning under hidden contexts: experiments and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config document; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed (falls back to the config, then LATCHLAB_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for artifacts and manifest.json.
    #[arg(long, default_value = "latchlab-out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Phase-transition grid over (eps_exp, eps_obs) for both filter learners.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeSelection>,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long, value_parser = ["expert-matching", "literal"])]
        rule: Option<String>,
        /// Also write SVG grids.
        #[arg(long)]
        svg: bool,
    },
    /// One paired episode of the on- and off-policy learners.
    BanditRun {
        #[command(flatten)]
        common: Common,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        eps_obs: Option<f64>,
        #[arg(long)]
        eps_exp: Option<f64>,
        /// Number of pulls.
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeSelection>,
    },
    /// Cliff construction: printed gap formula and simulation.
    Cliff {
        #[command(flatten)]
        common: Common,
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long)]
        simulate: bool,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Randomized exact check of the three value bounds.
    VerifyTheorems {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long = "T")]
        t: Option<usize>,
    },
    /// Solve the moment-matching game and print its certificate.
    MomentGame {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cmdp: Option<String>,
        #[arg(long)]
        expert: Option<String>,
        #[arg(long, value_parser = ["reward", "on_q"])]
        variant: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        eps_obs: Option<f64>,
        #[arg(long)]
        eps_exp: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Horizon ladder for the bandit with the identifiability moment.
    Realizability {
        #[command(flatten)]
        common: Common,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        eps_obs: Option<f64>,
        #[arg(long)]
        eps_exp: Option<f64>,
        /// Comma-separated horizons.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Re-run a manifest and compare artifact checksums.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn resolve<T: serde::de::DeserializeOwned + Serialize>(
    common: &Common,
    overrides: Map<String, Value>,
    validate: impl FnOnce(&T) -> latchlab::Result<()>,
) -> Result<(T, u64), CliError> {
    let doc = ConfigDoc::load(common.config.as_deref())?;
    doc.resolve(overrides, common.seed, validate)
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("configs serialize to JSON")
}

/// Parse flags into `(subcommand, resolved config, seed, out_dir)`.
fn plan(command: Command) -> Result<(String, Value, u64, PathBuf), CliError> {
    let mut o = Map::new();
    Ok(match command {
        Command::Sweep {
            common,
            mode,
            k,
            t,
            trials,
            margin,
            rule,
            svg,
        } => {
            set(&mut o, "K", k);
            set(&mut o, "T", t);
            set(&mut o, "trials", trials);
            set(&mut o, "margin", margin);
            set(&mut o, "rule", rule);
            set(&mut o, "modes", mode.map(ModeSelection::modes_value));
            let (c, seed): (SweepConfig, u64) = resolve(&common, o, SweepConfig::validate)?;
            let mut v = to_value(&c);
            v.as_object_mut().expect("object").insert("svg".into(), Value::from(svg));
            ("sweep".into(), v, seed, common.out_dir)
        }
        Command::BanditRun {
            common,
            k,
            eps_obs,
            eps_exp,
            t,
            mode,
        } => {
            set(&mut o, "K", k);
            set(&mut o, "eps_obs", eps_obs);
            set(&mut o, "eps_exp", eps_exp);
            set(&mut o, "T", t);
            set(&mut o, "mode", mode.map(|m| to_value(&m)));
            let (c, seed): (BanditRunConfig, u64) = resolve(&common, o, |c: &BanditRunConfig| c.params().map(|_| ()))?;
            ("bandit-run".into(), to_value(&c), seed, common.out_dir)
        }
        Command::Cliff {
            common,
            t,
            simulate,
            trials,
        } => {
            set(&mut o, "T", t);
            set(&mut o, "simulate", simulate.then_some(true));
            set(&mut o, "trials", trials);
            let (c, seed): (CliffConfig, u64) = resolve(&common, o, CliffConfig::validate)?;
            ("cliff".into(), to_value(&c), seed, common.out_dir)
        }
        Command::VerifyTheorems { common, instances, t } => {
            set(&mut o, "instances", instances);
            set(&mut o, "T", t);
            let (c, seed): (VerifyConfig, u64) = resolve(&common, o, VerifyConfig::validate)?;
            ("verify-theorems".into(), to_value(&c), seed, common.out_dir)
        }
        Command::MomentGame {
            common,
            cmdp,
            expert,
            variant,
            iters,
            t,
            k,
            eps_obs,
            eps_exp,
            tolerance,
        } => {
            set(&mut o, "cmdp", cmdp);
            set(&mut o, "expert", expert);
            if let Some(v) = &variant {
                v.parse::<GameVariant>()?;
            }
            set(&mut o, "variant", variant);
            set(&mut o, "iterations", iters);
            set(&mut o, "T", t);
            set(&mut o, "K", k);
            set(&mut o, "eps_obs", eps_obs);
            set(&mut o, "eps_exp", eps_exp);
            set(&mut o, "certificate_tolerance", tolerance);
            let (c, seed): (MomentGameRun, u64) = resolve(&common, o, MomentGameRun::validate)?;
            ("moment-game".into(), to_value(&c), seed, common.out_dir)
        }
        Command::Realizability {
            common,
            k,
            eps_obs,
            eps_exp,
            horizons,
            iters,
        } => {
            set(&mut o, "K", k);
            set(&mut o, "eps_obs", eps_obs);
            set(&mut o, "eps_exp", eps_exp);
            set(&mut o, "horizons", horizons);
            set(&mut o, "iterations", iters);
            let (c, seed): (RealizabilityConfig, u64) = resolve(&common, o, RealizabilityConfig::validate)?;
            ("realizability".into(), to_value(&c), seed, common.out_dir)
        }
        Command::Replay { .. } => unreachable!("handled by the caller"),
    })
}

fn write_outputs(out_dir: &Path, outcome: &Outcome, manifest: &mut Manifest) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)?;
    for (name, bytes) in &outcome.artifacts {
        std::fs::write(out_dir.join(name), bytes)?;
        manifest.artifacts.insert(name.clone(), sha256_hex(bytes));
    }
    manifest.inputs = outcome.inputs.clone();
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    std::fs::write(out_dir.join(MANIFEST_NAME), text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Replay { manifest, out_dir } = cli.command {
        return replay(&manifest, &out_dir);
    }
    let (subcommand, config, seed, out_dir) = plan(cli.command)?;
    let outcome = commands::execute(&subcommand, &config)?;
    let mut manifest = Manifest {
        tool: "latchlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand,
        base_seed: seed,
        config,
        inputs: Default::default(),
        artifacts: Default::default(),
    };
    write_outputs(&out_dir, &outcome, &mut manifest)?;
    print!("{}", outcome.stdout);
    match outcome.failure {
        Some(msg) => Err(CliError::failure(msg)),
        None => Ok(()),
    }
}

fn replay(path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let recorded = Manifest::load(path)?;
    let outcome = commands::execute(&recorded.subcommand, &recorded.config)?;
    let mut manifest = Manifest {
        artifacts: Default::default(),
        ..recorded.clone()
    };
    write_outputs(out_dir, &outcome, &mut manifest)?;
    let mut mismatched = Vec::new();
    for (name, sum) in &recorded.artifacts {
        if manifest.artifacts.get(name) != Some(sum) {
            mismatched.push(name.clone());
        }
    }
    for name in manifest.artifacts.keys() {
        if !recorded.artifacts.contains_key(name) {
            mismatched.push(name.clone());
        }
    }
    if mismatched.is_empty() {
        println!("replay: {} artifacts byte-identical", recorded.artifacts.len());
        Ok(())
    } else {
        Err(CliError::failure(format!("replay: artifacts differ: {}", mismatched.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
