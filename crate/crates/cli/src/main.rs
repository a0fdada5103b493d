//! `sfql`: run the offline safe-RL pipeline phase by phase.
//!
//! Any config key can be overridden with a flag of the same dotted name,
//! e.g. `--critics.steps 1000` or `--actor.lambda=0.02`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use sfql_core::pipeline::{self, Phase, PolicyMode, RunConfig};
use sfql_core::Error;

#[derive(Debug, Parser)]
#[command(name = "sfql", version, about = "Offline safe RL on the boat navigation task")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every phase.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports, metrics and (by default) checkpoints.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the offline dataset.
    GenData {
        #[arg(long)]
        n_traj: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Dataset path (default: <out>/dataset.sfqd).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train one phase (critics, flow, actor) or all of them in order.
    Train {
        phase: String,
        /// Continue from an existing checkpoint of the phase.
        #[arg(long)]
        resume: bool,
    },
    /// Calibrate the safe value level δ* for the trained actor.
    Calibrate,
    /// Closed-loop evaluation: safefql, rejection:N, random, zero or all.
    Eval {
        #[arg(long, default_value = "all")]
        mode: String,
    },
    /// Per-action latency of the actor, the flow and rejection sampling.
    Bench,
    /// Grid value iteration and sign agreement with the learned critic.
    Oracle,
    /// Print the effective configuration as TOML.
    Config,
}

/// Splits `--a.b value` and `--a.b=value` flags off the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Error> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Usage(format!("override --{flag} needs a value")))?;
                (flag.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn load_config(cli: &Cli, mut overrides: Vec<(String, String)>) -> Result<RunConfig, Error> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    if let Command::GenData {
        n_traj,
        horizon,
        dataset,
    } = &cli.command
    {
        if let Some(n) = n_traj {
            overrides.push(("env.n_traj".into(), n.to_string()));
        }
        if let Some(h) = horizon {
            overrides.push(("env.horizon".into(), h.to_string()));
        }
        if let Some(d) = dataset {
            overrides.push(("paths.dataset".into(), toml_string(d)));
        }
    }
    if let Some(o) = &cli.out {
        overrides.push(("paths.out_dir".into(), toml_string(o)));
    }
    if let Some(c) = &cli.checkpoint_dir {
        overrides.push(("paths.checkpoint_dir".into(), toml_string(c)));
    }
    let mut cfg = RunConfig::from_toml_with_overrides(&text, &overrides)?;
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// Quotes a path as a TOML string literal so it never parses as something else.
fn toml_string(p: &std::path::Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("string serializes")
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json serializes"));
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    match &cli.command {
        Command::GenData { .. } => {
            let (path, ds) = pipeline::gen_data(cfg)?;
            print(json!({ "dataset": path, "transitions": ds.len(), "seed": cfg.env.seed }));
        }
        Command::Train { phase, resume } => {
            let phase: Phase = phase.parse()?;
            let s = pipeline::train(cfg, phase, *resume)?;
            print(serde_json::to_value(s)?);
        }
        Command::Calibrate => {
            let r = pipeline::calibrate(cfg)?;
            let sel = r.selected();
            print(json!({
                "delta_star": r.delta_star,
                "delta_0": r.delta_0,
                "n": sel.n,
                "violations": sel.k,
                "epsilon": sel.epsilon,
                "quantile": r.quantile,
                "report": cfg.out_dir().join(pipeline::CALIBRATION_FILE),
            }));
        }
        Command::Eval { mode } => {
            let modes = if mode == "all" {
                pipeline::all_modes(cfg)
            } else {
                vec![mode.parse::<PolicyMode>()?]
            };
            let reports = pipeline::evaluate(cfg, &modes)?;
            let rows: Vec<_> = reports
                .iter()
                .map(|r| {
                    json!({
                        "mode": r.mode,
                        "safety_rate": r.safety_rate,
                        "total_violations": r.total_violations,
                        "mean_reward": r.mean_reward,
                        "initial_states": r.initial_states,
                        "mean_action_latency_us": r.mean_action_latency_us,
                    })
                })
                .collect();
            print(json!(rows));
        }
        Command::Bench => {
            let r = pipeline::bench(cfg)?;
            print(serde_json::to_value(r)?);
        }
        Command::Oracle => {
            let r = pipeline::oracle(cfg)?;
            print(serde_json::to_value(r)?);
        }
        Command::Config => print!("{}", cfg.to_toml_string()),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Ordering { .. } => 3,
        Error::CalibrationInfeasible { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("sfql: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let result = load_config(&cli, overrides).and_then(|cfg| run(&cli, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sfql: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
