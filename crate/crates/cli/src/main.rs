use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use restart_core::anomaly::{read_signals, write_detections, T2Profile};
use restart_core::availability::weighted_availability;
use restart_core::policy::{restart_time_map, Budget, RestartMap};
use restart_core::risk::RiskProfile;
use restart_core::scenario::ScenarioFile;
use restart_core::sim::{availability_of, run};

/// Restart-based protection toolkit: restart-time maps, attack simulations,
/// availability and restart-risk tables.
#[derive(Parser, Debug)]
#[command(name = "restartctl", version)]
struct Cli {
    /// Random seed; overrides the scenario's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Refuse anything that depends on wall-clock time.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for map and risk sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the restart protocol and write a trace CSV. Exits 2 if the plant
    /// ever left the admissible set.
    Simulate { scenario: PathBuf },
    /// Compute a restart-time map over the scenario's grid.
    Map { scenario: PathBuf },
    /// Write F, P, F̂, P̂ tables for each restart period into a directory.
    Risk {
        scenario: PathBuf,
        /// Comma-separated restart periods; overrides the scenario's list.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
    },
    /// Weighted availability of a restart-time map, written as JSON.
    Avail {
        scenario: PathBuf,
        /// Map CSV produced by `map`.
        #[arg(long)]
        map: PathBuf,
    },
    /// Build or apply a T² anomaly profile.
    Anomaly(AnomalyArgs),
}

#[derive(Args, Debug)]
struct AnomalyArgs {
    #[command(subcommand)]
    action: AnomalyAction,
}

#[derive(Subcommand, Debug)]
enum AnomalyAction {
    /// Learn a profile from legitimate samples and write it as JSON.
    Build {
        /// CSV with a header row and one sample per line.
        #[arg(long)]
        train: PathBuf,
        /// Confidence multiplier; overrides the scenario's value.
        #[arg(long)]
        lambda: Option<f64>,
        /// Scenario supplying the confidence multiplier.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Classify observations against a profile and write one verdict per row.
    Detect {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        observe: PathBuf,
    },
}

/// Why the process stopped short of success.
enum Failure {
    /// Usage, configuration or I/O problem.
    Config(anyhow::Error),
    /// The simulated plant left the admissible set.
    Violation(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

impl From<restart_core::Error> for Failure {
    fn from(e: restart_core::Error) -> Self {
        Failure::Config(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Violation(msg)) => {
            eprintln!("safety violation: {msg}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    let out = || -> Result<&Path> {
        cli.out
            .as_deref()
            .ok_or_else(|| anyhow!("--out is required for this subcommand"))
    };
    match &cli.command {
        Command::Simulate { scenario } => simulate(scenario, out()?, cli.seed, cli.deterministic),
        Command::Map { scenario } => map(scenario, out()?, cli.deterministic),
        Command::Risk { scenario, sweep } => risk(scenario, out()?, sweep.as_deref()),
        Command::Avail { scenario, map } => avail(scenario, map, out()?),
        Command::Anomaly(a) => match &a.action {
            AnomalyAction::Build {
                train,
                lambda,
                scenario,
            } => anomaly_build(train, *lambda, scenario.as_deref(), out()?),
            AnomalyAction::Detect { profile, observe } => anomaly_detect(profile, observe, out()?),
        },
    }
}

fn load(path: &Path) -> Result<ScenarioFile> {
    ScenarioFile::load(path).with_context(|| format!("scenario {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn simulate(path: &Path, out: &Path, seed: Option<u64>, deterministic: bool) -> Result<(), Failure> {
    let scenario = load(path)?;
    let sim = scenario
        .simulation
        .as_ref()
        .ok_or_else(|| anyhow!("scenario has no 'simulation' block"))?;
    let resolved = scenario.resolve()?;
    let cfg = scenario.sim_config(&resolved, sim, seed.unwrap_or(scenario.seed), deterministic)?;
    let trace = run(&cfg)?;
    trace.write_csv(create(out)?)?;
    let s = &trace.summary;
    println!(
        "{}: {} records, {} restarts, {} SEI extensions, availability {:.4}, violations {}",
        scenario.name,
        trace.records.len(),
        s.reboots,
        s.sei_extensions,
        availability_of(&trace),
        s.violations
    );
    if s.liveness_violation {
        eprintln!(
            "warning: an SEI needed {} rounds, more than the limit of {}",
            s.max_sei_rounds, cfg.max_sei_rounds
        );
    }
    if s.violations > 0 {
        return Err(Failure::Violation(format!(
            "{} trace records outside the admissible set",
            s.violations
        )));
    }
    Ok(())
}

fn map(path: &Path, out: &Path, deterministic: bool) -> Result<(), Failure> {
    let scenario = load(path)?;
    let grid = scenario
        .grid
        .as_ref()
        .ok_or_else(|| anyhow!("scenario has no 'grid' block"))?;
    if deterministic && matches!(scenario.policy.budget, Budget::WallClock(_)) {
        return Err(anyhow!("deterministic maps need an iteration budget").into());
    }
    let r = scenario.resolve()?;
    let m = restart_time_map(&r.model, &r.sc, &scenario.policy, grid)?;
    m.write_csv(create(out)?)?;
    let safe = m.cells.iter().filter(|c| c.class.delta_safe().is_some()).count();
    match m.max_safe() {
        Some(c) => println!(
            "{}: {} cells, {} safe, max delta_safe {} s at ({}, {})",
            scenario.name,
            m.cells.len(),
            safe,
            c.class.delta_safe().unwrap_or(0.0),
            c.x_value,
            c.y_value
        ),
        None => println!("{}: {} cells, none safe", scenario.name, m.cells.len()),
    }
    Ok(())
}

fn risk(path: &Path, out: &Path, sweep: Option<&[f64]>) -> Result<(), Failure> {
    let scenario = load(path)?;
    let spec = scenario
        .risk
        .as_ref()
        .ok_or_else(|| anyhow!("scenario has no 'risk' block"))?;
    let f = spec.pdf.tabulate(spec.grid_step, spec.horizon).context("invalid pdf spec")?;
    let periods: Vec<f64> = sweep.map(<[f64]>::to_vec).unwrap_or_else(|| spec.delta_r.clone());
    if periods.is_empty() {
        return Err(anyhow!("no restart periods given").into());
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let profiles = periods
        .par_iter()
        .map(|&d| RiskProfile::build(&f, d))
        .collect::<Result<Vec<_>, _>>()?;
    let mut summaries = Vec::new();
    for prof in &profiles {
        let file = out.join(format!("risk_dr{}.csv", prof.delta_r));
        prof.write_csv(create(&file)?)?;
        let s = prof.summary(spec.mode)?;
        let show = |e: Option<f64>| e.map_or_else(|| "never".to_string(), |v| format!("{v:.3}"));
        println!(
            "delta_r {}: expected damage time {} without restarts, {} with restarts",
            s.delta_r,
            show(s.expected_without_restarts),
            show(s.expected_with_restarts)
        );
        summaries.push(s);
    }
    let mut w = create(&out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &summaries).context("writing risk summary")?;
    writeln!(w).context("writing risk summary")?;
    Ok(())
}

fn avail(path: &Path, map_path: &Path, out: &Path) -> Result<(), Failure> {
    let scenario = load(path)?;
    let regions = scenario
        .regions()
        .ok_or_else(|| anyhow!("scenario has no 'availability' regions and the plant has no default"))?;
    let file = File::open(map_path).with_context(|| format!("cannot open {}", map_path.display()))?;
    let m = RestartMap::read_csv(BufReader::new(file))?;
    let report = weighted_availability(&m, &regions, scenario.policy.t_s, scenario.policy.t_r)?;
    println!(
        "{}: weighted availability {:.4} over {} safe cells",
        scenario.name, report.weighted_availability, report.safe_cells
    );
    let mut w = create(out)?;
    serde_json::to_writer_pretty(&mut w, &report).context("writing availability report")?;
    writeln!(w).context("writing availability report")?;
    Ok(())
}

fn anomaly_build(train: &Path, lambda: Option<f64>, scenario: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let from_file = match scenario {
        Some(p) => load(p)?.anomaly.map(|a| a.lambda_conf),
        None => None,
    };
    let lambda = lambda.or(from_file).unwrap_or(3.0);
    let file = File::open(train).with_context(|| format!("cannot open {}", train.display()))?;
    let samples = read_signals(BufReader::new(file))?;
    let profile = T2Profile::build(&samples, lambda)?;
    let mut w = create(out)?;
    serde_json::to_writer_pretty(&mut w, &profile).context("writing profile")?;
    writeln!(w).context("writing profile")?;
    println!(
        "profile over {} signals from {} samples: mu_T {:.4}, sigma_T {:.4}",
        profile.dim(),
        samples.len(),
        profile.mu_t,
        profile.sigma_t
    );
    Ok(())
}

fn anomaly_detect(profile: &Path, observe: &Path, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(profile).with_context(|| format!("cannot read {}", profile.display()))?;
    let profile: T2Profile = serde_json::from_str(&text).context("invalid profile")?;
    let file = File::open(observe).with_context(|| format!("cannot open {}", observe.display()))?;
    let obs = read_signals(BufReader::new(file))?;
    let verdicts = obs
        .iter()
        .map(|o| profile.detect(o))
        .collect::<Result<Vec<_>, _>>()?;
    write_detections(create(out)?, &verdicts)?;
    let flagged = verdicts.iter().filter(|d| d.anomalous).count();
    println!("{flagged} of {} observations flagged", verdicts.len());
    Ok(())
}
