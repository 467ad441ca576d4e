//! `rodlab`: runs the benchmark scenarios, the condition sweep and the self-checks.

mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rodlab_core::assembly::Formulation;
use rodlab_core::scenarios::{emit_output, run, RunOutput, ScenarioConfig, ScenarioError, ScenarioKind};

/// Exit status: every run converged.
const EXIT_OK: u8 = 0;
/// Exit status: bad arguments, configuration or output directory.
const EXIT_CONFIG: u8 = 1;
/// Exit status: some formulation failed; its failure is recorded in the outputs.
const EXIT_PARTIAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "rodlab", version, about = "Kirchhoff rod benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write CSV tables plus a JSON manifest.
    Run {
        /// rollup, catenary, mooring2d, mooring3d, condition_sweep or free_rod.
        scenario: String,
        /// TOML configuration; the built-in preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Formulation label (iga, iga-outlier, iga-c2, nodal-r3, spp, spp-reduced, penalty-1e5, ...); repeatable.
        #[arg(long = "formulation")]
        formulations: Vec<String>,
        /// Element count; repeatable.
        #[arg(long = "elements")]
        elements: Vec<usize>,
        /// Simulated time for dynamic scenarios, overriding the configuration.
        #[arg(long)]
        horizon: Option<f64>,
        /// Output directory; falls back to `output` in the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter sweeps.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Print the preset configuration of a scenario as TOML.
    Preset { scenario: String },
    /// Run the tangent, nullspace, dof-count, symmetry and config round-trip checks.
    Verify {
        /// Seed of the randomized states.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum SweepKind {
    /// Condition numbers over penalty factors and director scales.
    Condition {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown formulation `{0}`")]
    UnknownFormulation(String),
    #[error("configuration describes `{found}` but `{expected}` was requested")]
    ScenarioMismatch { expected: &'static str, found: &'static str },
    #[error("no output directory: pass --out or set `output` in the configuration")]
    NoOutput,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

fn scenario_kind(id: &str) -> Result<ScenarioKind, CliError> {
    ScenarioKind::from_id(id).ok_or_else(|| CliError::UnknownScenario(id.to_string()))
}

fn load_config(kind: ScenarioKind, path: Option<&Path>) -> Result<ScenarioConfig, CliError> {
    let cfg = match path {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::preset(kind),
    };
    if cfg.scenario != kind {
        return Err(CliError::ScenarioMismatch { expected: kind.id(), found: cfg.scenario.id() });
    }
    Ok(cfg)
}

fn run_and_write(cfg: &ScenarioConfig, out: Option<PathBuf>) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let dir = out.or_else(|| cfg.output.clone()).ok_or(CliError::NoOutput)?;
    let output = run(cfg)?;
    emit_output(&output, &dir)?;
    println!("{}: results in {}", cfg.scenario.id(), dir.display());
    Ok(output)
}

fn summarize(out: &RunOutput) {
    if !out.conditions.is_empty() {
        println!("{:<16} {:>5} {:>8} {:>15} {:>10} {:>12}", "formulation", "n_e", "regime", "parameter", "value", "condition");
        for c in &out.conditions {
            println!("{:<16} {:>5} {:>8} {:>15} {:>10.1e} {:>12.3e}", c.formulation, c.n_e, c.regime, c.parameter, c.value, c.condition);
        }
    }
    if !out.runs.is_empty() {
        println!("{:<16} {:>5} {:>9} {:>10} {:>14}  status", "formulation", "n_e", "max_iters", "halvings", "s_per_iter");
        for r in &out.runs {
            let status = match &r.failure {
                None => "converged".to_string(),
                Some(f) => format!("failed at step {}: {}", f.step, f.message),
            };
            println!(
                "{:<16} {:>5} {:>9} {:>10} {:>14.3e}  {status}",
                r.label, r.n_e, r.stats.max_iters, r.stats.halvings, r.stats.mean_time_per_iter_s
            );
        }
    }
}

fn exit_for(out: &RunOutput) -> u8 {
    if out.all_converged() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    }
}

fn execute(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Run { scenario, config, formulations, elements, horizon, out } => {
            let kind = scenario_kind(&scenario)?;
            let mut cfg = load_config(kind, config.as_deref())?;
            if !formulations.is_empty() {
                cfg.formulations = formulations
                    .iter()
                    .map(|l| Formulation::from_label(l).ok_or_else(|| CliError::UnknownFormulation(l.clone())))
                    .collect::<Result<_, _>>()?;
            }
            if !elements.is_empty() {
                cfg.meshes = elements;
            }
            if let Some(h) = horizon {
                cfg.stepping.horizon = h;
            }
            let output = run_and_write(&cfg, out)?;
            summarize(&output);
            Ok(exit_for(&output))
        }
        Command::Sweep { kind: SweepKind::Condition { config, out } } => {
            let cfg = load_config(ScenarioKind::ConditionSweep, config.as_deref())?;
            let output = run_and_write(&cfg, out)?;
            summarize(&output);
            // Infinite entries are results (numerically singular systems), not failures.
            Ok(EXIT_OK)
        }
        Command::Preset { scenario } => {
            let kind = scenario_kind(&scenario)?;
            print!("{}", ScenarioConfig::preset(kind).to_toml()?);
            Ok(EXIT_OK)
        }
        Command::Verify { seed } => Ok(if verify::run_all(seed) { EXIT_OK } else { EXIT_PARTIAL }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
