//! `mapsac`: meta-training, closed-loop runs, confidence-set validation and
//! boundary illustrations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mapsac_core::ablr::{load_checkpoint, save_checkpoint, Checkpoint};
use mapsac_core::meta::write_trace;
use mapsac_core::runner::{
    illustrate, meta_train_scenario, run_episode, validate_prop1, write_run, Prop1Config, ScenarioId, ScenarioSpec,
};
use mapsac_core::safety::{BetaMode, Method};
use mapsac_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mapsac",
    version,
    about = "Safe adaptive control with meta-learned Bayesian models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate meta tasks for a scenario and meta-train a checkpoint.
    MetaTrain(MetaTrainArgs),
    /// Run one closed-loop episode.
    Run(RunArgs),
    /// Monte-Carlo coverage of the weight-space confidence set.
    ValidateProp1(Prop1Args),
    /// Emit pessimistic barrier fields on a grid.
    Illustrate(IllustrateArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// 1, 2, 3 or a scenario name.
    #[arg(long, default_value = "1")]
    scenario: String,
    /// Flat `key = value` overrides.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ScenarioArgs {
    fn spec(&self) -> Result<ScenarioSpec> {
        let mut spec = ScenarioSpec::new(self.scenario.parse()?);
        if let Some(path) = &self.config {
            spec.apply_config(&std::fs::read_to_string(path)?)?;
        }
        Ok(spec)
    }
}

#[derive(Args)]
struct MetaTrainArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `checkpoint.txt` and `trace.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// opt, rust, gp2 or mapsac.
    #[arg(long)]
    method: String,
    /// Sample the residual every sampling period and update the models.
    #[arg(long)]
    online: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for `trajectory.csv` and `summary.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beta: Option<f64>,
    /// Switches to `β = max(β, Γ_t)` with this failure probability.
    #[arg(long)]
    delta_tilde: Option<f64>,
}

#[derive(Args)]
struct Prop1Args {
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    delta_tilde: f64,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplier on the observation noise.
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IllustrateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `grid.csv` and `areas.json`.
    #[arg(long)]
    out: PathBuf,
}

fn read_checkpoint(path: Option<&Path>) -> Result<Option<Checkpoint>> {
    match path {
        None => Ok(None),
        Some(p) if !p.exists() => Err(Error::CheckpointMissing(format!("{} does not exist", p.display()))),
        Some(p) => load_checkpoint(p).map(Some),
    }
}

fn meta_train_cmd(args: &MetaTrainArgs) -> Result<()> {
    let mut spec = args.scenario.spec()?;
    spec.meta.seed = args.seed;
    let outcome = meta_train_scenario(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    save_checkpoint(&outcome.checkpoint, &args.out.join("checkpoint.txt"))?;
    write_trace(&args.out.join("trace.csv"), &outcome.trace)?;
    println!(
        "meta-trained {} epochs: loss {:.6e} -> {:.6e}",
        outcome.trace.len(),
        outcome.initial_loss,
        outcome.final_loss
    );
    Ok(())
}

/// Returns whether the run was aborted.
fn run_cmd(args: &RunArgs) -> Result<bool> {
    let mut spec = args.scenario.spec()?;
    spec.online |= args.online;
    if let Some(beta) = args.beta {
        spec.budget.beta = beta;
    }
    if let Some(dt) = args.delta_tilde {
        spec.budget.delta = dt;
        spec.budget.kappa = 1.0;
        spec.budget.mode = BetaMode::ConfidenceRadius;
    }
    let method: Method = args.method.parse()?;
    let ckpt = read_checkpoint(args.checkpoint.as_deref())?;
    let result = run_episode(&spec, method, ckpt.as_ref(), args.seed)?;
    write_run(&result, &args.out)?;
    let s = &result.summary;
    println!(
        "{} on {}: reached={} steps={} relaxed={} final_dist={:.4} min_h={:?}",
        method.as_str(),
        spec.id.as_str(),
        s.reached,
        s.steps,
        s.relaxed_steps,
        s.final_dist,
        s.min_h
    );
    Ok(result.aborted)
}

fn prop1_cmd(args: &Prop1Args) -> Result<()> {
    if args.trials < 100 {
        return Err(Error::Config("validate-prop1 needs at least 100 trials".into()));
    }
    let report = validate_prop1(&Prop1Config {
        dim: args.dim,
        delta_tilde: args.delta_tilde,
        trials: args.trials,
        horizon: args.horizon,
        seed: args.seed,
        noise_scale: args.noise_scale,
        ..Prop1Config::default()
    })?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Some(path) = &args.out {
        std::fs::write(path, &json)?;
    }
    print!("{json}");
    Ok(())
}

fn illustrate_cmd(args: &IllustrateArgs) -> Result<()> {
    let mut spec = args.scenario.spec()?;
    if spec.id != ScenarioId::Illustrate {
        spec.id = ScenarioId::Illustrate;
    }
    let ckpt = read_checkpoint(args.checkpoint.as_deref())?;
    let ill = illustrate(&spec, ckpt.as_ref(), args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("grid.csv"), ill.grid_csv())?;
    std::fs::write(args.out.join("areas.json"), ill.areas_json())?;
    print!("{}", ill.areas_json());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::MetaTrain(a) => meta_train_cmd(a).map(|()| false),
        Command::Run(a) => run_cmd(a),
        Command::ValidateProp1(a) => prop1_cmd(a).map(|()| false),
        Command::Illustrate(a) => illustrate_cmd(a).map(|()| false),
    };
    match outcome {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("error: the QP became infeasible; run aborted");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
