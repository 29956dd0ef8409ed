use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use wncs_core::config::{default_scenario, load_scenario, scenario_to_json};
use wncs_core::optimizer::{Candidate, SolveReport};
use wncs_core::simulator::{
    plan_candidate, run_monte_carlo, run_sweep, write_csv, SweepParam, SweepSpec, TrialOptions,
};
use wncs_core::{Error, Scenario};

const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "wncs",
    version,
    about = "Wireless closed-loop control: optimize and simulate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the gain and bandwidth split, then run Monte-Carlo trials.
    Run(RunArgs),
    /// Optimize only and write the solver report.
    Optimize(OptimizeArgs),
    /// Repeat `run` for each value of one parameter.
    Sweep(SweepArgs),
    /// Print the built-in scenario as JSON.
    Scenario,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON; the built-in scenario is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Overrides the scenario trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Simulate even if the optimizer finds no feasible candidate.
    #[arg(long)]
    allow_infeasible: bool,
    /// Candidate JSON (`{"k": [...], "w_u": .., "w_d": ..}`) to use instead of optimizing.
    #[arg(long)]
    fixed_candidate: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sim: SimArgs,
    /// Output directory for `metrics.csv` and `report.json`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sim: SimArgs,
    /// One of d_c_max, rho, r.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(
                Error::Parse(_) | Error::Validation(_) | Error::Dimension(_) | Error::Io { .. },
            ) => EXIT_VALIDATION,
            _ => 1,
        };
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn load(common: &Common) -> Result<Scenario, Failure> {
    let mut s = match &common.config {
        Some(path) => load_scenario(path)?,
        None => default_scenario(),
    };
    if let Some(seed) = common.seed {
        s.system.seed = seed;
    }
    Ok(s)
}

fn read_candidate(path: &Path, scenario: &Scenario) -> Result<Candidate, Failure> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let c: Candidate = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    if c.k.len() != scenario.plant.dim() {
        return Err(Error::Dimension(format!(
            "candidate gain has {} entries, plant has {} states",
            c.k.len(),
            scenario.plant.dim()
        ))
        .into());
    }
    Ok(c)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value).context("serializing report")?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn optimize_checked(scenario: &Scenario, allow_infeasible: bool) -> Result<SolveReport, Failure> {
    let report = plan_candidate(scenario, scenario.system.seed)?;
    if !report.feasible && !allow_infeasible {
        return Err(Failure {
            code: EXIT_INFEASIBLE,
            error: anyhow::anyhow!(
                "no feasible candidate after {} generations (least violation: {:?})",
                report.iterations,
                report.diagnostics
            ),
        });
    }
    Ok(report)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let scenario = load(&args.common)?;
    let trials = args.sim.trials.unwrap_or(scenario.system.trials);
    let (cand, solve) = match &args.sim.fixed_candidate {
        Some(path) => (read_candidate(path, &scenario)?, None),
        None => {
            let rep = optimize_checked(&scenario, args.sim.allow_infeasible)?;
            (rep.best.clone(), Some(rep))
        }
    };
    let mc = run_monte_carlo(
        &scenario,
        &cand,
        args.sim.steps,
        trials,
        scenario.system.seed,
        &TrialOptions::default(),
    )?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_csv(&mc.series, &args.out.join("metrics.csv"))?;
    let report = serde_json::json!({
        "candidate": cand,
        "optimizer": solve,
        "trials": mc.trials,
        "steps": args.sim.steps,
        "seed": scenario.system.seed,
        "diverged_trials": mc.diverged_trials,
        "clamp_events": mc.clamp_events,
        "horizon_clamps": mc.horizon_clamps,
        "loss_fraction": mc.loss_fraction,
        "final": mc.series.last(),
    });
    write_json(&report, &args.out.join("report.json"))
}

fn optimize(args: OptimizeArgs) -> Result<(), Failure> {
    let scenario = load(&args.common)?;
    let report = plan_candidate(&scenario, scenario.system.seed)?;
    write_json(&report, &args.out)?;
    if !report.feasible {
        return Err(Failure {
            code: EXIT_INFEASIBLE,
            error: anyhow::anyhow!(
                "no feasible candidate; report written to {}",
                args.out.display()
            ),
        });
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let scenario = load(&args.common)?;
    let param: SweepParam = args.param.parse()?;
    let fixed_candidate = match &args.sim.fixed_candidate {
        Some(path) => Some(read_candidate(path, &scenario)?),
        None => None,
    };
    let spec = SweepSpec {
        param,
        values: args.values,
        steps: args.sim.steps,
        trials: args.sim.trials.unwrap_or(scenario.system.trials),
        seed: scenario.system.seed,
        fixed_candidate,
        allow_infeasible: args.sim.allow_infeasible,
        base: scenario,
    };
    let summary = run_sweep(&spec, &args.out)?;
    for e in &summary.entries {
        if let Some(err) = &e.error {
            eprintln!("{}={}: {err}", param.name(), e.value);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Optimize(a) => optimize(a),
        Command::Sweep(a) => sweep(a),
        Command::Scenario => {
            println!("{}", scenario_to_json(&default_scenario()));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
