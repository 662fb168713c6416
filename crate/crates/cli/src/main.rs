use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gridmarket::grid::{generate_scenario, load_scenario, write_scenario, SyntheticSpec};
use gridmarket::linpf::assemble_lambda;
use gridmarket::market::{summarize, write_wake_log, MarketOptions, Mode, SlotRecord, Simulation};
use gridmarket::oracle::{self, CentralOptions, SlotPoint};
use gridmarket::{Error, Scenario64, SimulationResult64};

#[derive(Parser)]
#[command(name = "gridmarket", version, about = "Real-time energy market on a linearized distribution network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clear the whole day with the decentralized market.
    Run(RunArgs),
    /// Clear the day without demand response.
    Benchmark(Common),
    /// Clear every slot with the centralized solver instead of the market.
    Oracle(Common),
    /// Run the market and the centralized solver side by side.
    Compare(RunArgs),
    /// Write a synthetic feeder scenario.
    Gen(GenArgs),
    /// Recompute the summary of a finished run from its committed records.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the per-slot iteration cap.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Write the network matrix to lambda.csv.
    #[arg(long)]
    dump_lambda: bool,
    /// Write every iteration's signals to signals.csv.
    #[arg(long)]
    dump_signals: bool,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "uncertainty")]
    mode: Mode,
    /// Repeat the run for each DNO risk weight, one subdirectory each.
    #[arg(long, value_delimiter = ',')]
    sweep_vartheta: Vec<f64>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 123)]
    buses: usize,
    #[arg(long, default_value_t = 10)]
    gens: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Users per aggregator as MIN-MAX.
    #[arg(long, default_value = "100-500", value_parser = parse_range)]
    users: (usize, usize),
    #[arg(long, default_value_t = 0.5)]
    renewable_share: f64,
    #[arg(long, default_value_t = 24)]
    horizon: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of a finished run.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Scenario of the run; defaults to the copy saved next to the records.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

/// Committed slot records of one run, enough to recompute its summary.
#[derive(Serialize, Deserialize)]
struct Committed {
    mode: Mode,
    seed: u64,
    slots: Vec<SlotRecord<f64>>,
}

#[derive(Serialize)]
struct SlotComparison {
    slot: usize,
    iterations: usize,
    converged: bool,
    max_injection_deviation: f64,
    objective_market: f64,
    objective_central: f64,
    objective_relative_difference: f64,
    kkt_market: f64,
}

#[derive(Serialize)]
struct Comparison {
    max_injection_deviation: f64,
    max_objective_relative_difference: f64,
    max_kkt_market: f64,
    slots: Vec<SlotComparison>,
}

enum Failure {
    Invalid(anyhow::Error),
    NotConverged(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::NoConvergence { .. }) => Failure::NotConverged(format!("{e:#}")),
            _ => Failure::Invalid(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Benchmark(c) => run(RunArgs {
            common: c,
            mode: Mode::Benchmark,
            sweep_vartheta: Vec::new(),
        }),
        Command::Oracle(c) => central(c),
        Command::Compare(a) => compare(a),
        Command::Gen(a) => gen(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("not converged: {msg}");
            ExitCode::from(2)
        }
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let lo = a.trim().parse().map_err(|_| format!("bad range `{s}`"))?;
    let hi = b.trim().parse().map_err(|_| format!("bad range `{s}`"))?;
    Ok((lo, hi))
}

fn threads(n: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Invalid(anyhow::anyhow!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Load and validate a scenario, reporting its warnings.
fn load(path: &Path) -> Result<Scenario64, Failure> {
    let scenario = load_scenario(path)?;
    for w in scenario.validate()? {
        eprintln!("warning: {}", w.0);
    }
    Ok(scenario)
}

fn options(c: &Common, mode: Mode) -> MarketOptions {
    MarketOptions {
        mode,
        seed: c.seed,
        max_iters: c.max_iters,
        record_trace: true,
        dump_signals: c.dump_signals,
        wake_events: None,
    }
}

fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))
}

fn json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn iterations_csv(result: &SimulationResult64) -> String {
    let mut out = String::from("slot,iter,step,residual,max_dtheta,max_dv,price_error,received,broadcast,first_seq,last_seq\n");
    for r in &result.iterations {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{},{},{},{}",
            r.slot,
            r.iter,
            r.step,
            r.residual,
            r.max_dtheta,
            r.max_dv,
            r.price_error,
            r.received,
            r.broadcast,
            r.first_seq,
            r.last_seq
        );
    }
    out
}

/// Every output of a finished run. Wall-clock timing goes to its own file so
/// the rest stays reproducible.
fn write_outputs(dir: &Path, scenario: &Scenario64, result: &SimulationResult64, c: &Common) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("creating {}: {e}", dir.display()))?;
    write_scenario(dir.join("scenario.json"), scenario)?;
    write(dir, "trace.csv", &result.trace_csv())?;
    write(dir, "iterations.csv", &iterations_csv(result))?;
    write(dir, "wake.csv", &write_wake_log(scenario, &result.wake_events))?;
    let committed = Committed {
        mode: result.mode,
        seed: result.seed,
        slots: result.slots.clone(),
    };
    write(dir, "committed.json", &json(&committed)?)?;
    let summary = summarize(scenario, result.mode, result.seed, &result.slots)?;
    write(dir, "summary.json", &json(&summary)?)?;
    write(dir, "timing.json", &json(&result.timing)?)?;
    if let Some(signals) = &result.signals_csv {
        write(dir, "signals.csv", signals)?;
    }
    if c.dump_lambda {
        write(dir, "lambda.csv", &assemble_lambda(&scenario.network)?.lambda_csv())?;
    }
    Ok(())
}

fn finish(result: &SimulationResult64) -> Outcome {
    if result.converged() {
        return Ok(());
    }
    let slots: Vec<usize> = result.slots.iter().filter(|s| !s.converged).map(|s| s.slot).collect();
    Err(Failure::NotConverged(format!("iteration cap reached in slots {slots:?}")))
}

fn run(a: RunArgs) -> Outcome {
    threads(a.common.threads)?;
    let scenario = load(&a.common.scenario)?;
    if a.sweep_vartheta.is_empty() {
        let result = gridmarket::market::run_horizon(&scenario, options(&a.common, a.mode))?;
        write_outputs(&a.common.out, &scenario, &result, &a.common)?;
        println!("wrote {}", a.common.out.display());
        return finish(&result);
    }
    let mut table = String::from("vartheta,generation,renewable,conventional,converged\n");
    let mut all_converged = true;
    for &vt in &a.sweep_vartheta {
        let mut sc = scenario.clone();
        sc.market.vartheta = vt;
        let result = gridmarket::market::run_horizon(&sc, options(&a.common, a.mode))?;
        write_outputs(&a.common.out.join(format!("vartheta-{vt}")), &sc, &result, &a.common)?;
        let (mut conv, mut ren) = (0.0, 0.0);
        for s in &result.slots {
            for g in &s.generators {
                conv += g.p_conv;
                ren += g.p_ren;
            }
        }
        let _ = writeln!(table, "{vt},{:e},{ren:e},{conv:e},{}", conv + ren, result.converged());
        all_converged &= result.converged();
    }
    fs::create_dir_all(&a.common.out).map_err(|e| anyhow::anyhow!("creating {}: {e}", a.common.out.display()))?;
    write(&a.common.out, "sweep.csv", &table)?;
    println!("wrote {}", a.common.out.display());
    if all_converged {
        Ok(())
    } else {
        Err(Failure::NotConverged("some sweep runs hit the iteration cap".into()))
    }
}

fn central(c: Common) -> Outcome {
    threads(c.threads)?;
    let scenario = load(&c.scenario)?;
    let mut sim = Simulation::new(&scenario, options(&c, Mode::Uncertainty))?;
    while sim.slot() < sim.horizon() {
        sim.begin_slot()?;
        let problem = sim.slot_problem();
        let sol = oracle::solve_central(&problem, CentralOptions::default())?;
        sim.adopt(&sol.point, sol.injection.clone(), sol.outer_iterations)?;
        sim.finish_slot()?;
    }
    let result = sim.result().clone();
    write_outputs(&c.out, &scenario, &result, &c)?;
    println!("wrote {}", c.out.display());
    Ok(())
}

fn compare(a: RunArgs) -> Outcome {
    threads(a.common.threads)?;
    let scenario = load(&a.common.scenario)?;
    let mut sim = Simulation::new(&scenario, options(&a.common, a.mode))?;
    let mut rows = Vec::new();
    while sim.slot() < sim.horizon() {
        sim.begin_slot()?;
        let problem = sim.slot_problem();
        let (iterations, converged) = sim.clear_slot()?;
        let point = SlotPoint::of_market(&sim);
        let sol = oracle::solve_central(&problem, CentralOptions::default())?;
        let injection = oracle::injections(&problem, &point)?;
        let deviation = injection
            .iter()
            .flatten()
            .zip(sol.injection.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let market = oracle::objective(&problem, &point)?;
        rows.push(SlotComparison {
            slot: problem.t,
            iterations,
            converged,
            max_injection_deviation: deviation,
            objective_market: market,
            objective_central: sol.objective,
            objective_relative_difference: (market - sol.objective).abs() / sol.objective.abs().max(1e-12),
            kkt_market: oracle::kkt_check(&problem, &point)?.max(),
        });
        sim.finish_slot()?;
    }
    let report = Comparison {
        max_injection_deviation: rows.iter().map(|r| r.max_injection_deviation).fold(0.0, f64::max),
        max_objective_relative_difference: rows.iter().map(|r| r.objective_relative_difference).fold(0.0, f64::max),
        max_kkt_market: rows.iter().map(|r| r.kkt_market).fold(0.0, f64::max),
        slots: rows,
    };
    let result = sim.result().clone();
    write_outputs(&a.common.out, &scenario, &result, &a.common)?;
    write(&a.common.out, "compare.json", &json(&report)?)?;
    println!(
        "max injection deviation {:e}, max objective difference {:e}",
        report.max_injection_deviation, report.max_objective_relative_difference
    );
    finish(&result)
}

fn gen(a: GenArgs) -> Outcome {
    let spec = SyntheticSpec {
        buses: a.buses,
        generators: a.gens,
        users: a.users,
        renewable_share: a.renewable_share,
        horizon: a.horizon,
    };
    let scenario = generate_scenario(&spec, a.seed)?;
    match a.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("creating {}: {e}", dir.display()))?;
            }
            write_scenario(&path, &scenario)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&scenario).map_err(anyhow::Error::new)?),
    }
    Ok(())
}

fn report(a: ReportArgs) -> Outcome {
    let scenario = load_scenario(a.scenario.unwrap_or_else(|| a.out.join("scenario.json")))?;
    let path = a.out.join("committed.json");
    let text = fs::read_to_string(&path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    let committed: Committed = serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let summary = summarize(&scenario, committed.mode, committed.seed, &committed.slots)?;
    let text = json(&summary)?;
    write(&a.out, "report.json", &text)?;
    print!("{text}");
    Ok(())
}
