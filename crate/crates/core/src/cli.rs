//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 invalid scenario or input data,
//! 4 a solver budget ran out under `--strict`, 5 I/O failure, 1 anything
//! else.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::auction::{check_feasibility, BidBook};
use crate::exact::{SolveError, SolverLimits};
use crate::heuristics::HeuristicOptions;
use crate::io::{self, DataError};
use crate::money::Money;
use crate::scenario::{Scenario, ScenarioError};
use crate::sim::{
    FrameOutcome, FrameRecord, PriceRecord, SimError, Simulator, SlotOutcome, SolverChoice,
    TimingRecord,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;
pub const EXIT_IO: i32 = 5;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "himec",
    version,
    about = "Edge VM auction and bandwidth simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario file and list invariant violations.
    Validate { scenario: PathBuf },
    /// Run one auction frame.
    Auction {
        scenario: PathBuf,
        /// Use these bids instead of generating them.
        #[arg(long)]
        bids_file: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run frames and their slots end to end.
    Simulate {
        scenario: PathBuf,
        /// Overrides the scenario's frame count.
        #[arg(long)]
        frames: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare the heuristic with the exact solver over bid counts and seeds.
    Compare {
        scenario: PathBuf,
        /// Comma-separated bid counts.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        ladder: Vec<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Allocate bandwidth over the slots of a saved frame.
    Bandwidth {
        scenario: PathBuf,
        #[arg(long)]
        bids_file: PathBuf,
        #[arg(long)]
        solution_file: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Heuristic,
    Exact,
    Both,
}

impl From<SolverArg> for SolverChoice {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Heuristic => SolverChoice::Heuristic,
            SolverArg::Exact => SolverChoice::Exact,
            SolverArg::Both => SolverChoice::Both,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "heuristic")]
    pub solver: SolverArg,
    /// Bids per frame, overriding the scenario.
    #[arg(long)]
    pub bids: Option<usize>,
    /// VM type mix such as `2.5:1.5:1`, in catalog order.
    #[arg(long)]
    pub mix: Option<String>,
    #[arg(long, env = "HIMEC_OUT_DIR", default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub node_budget: Option<u64>,
    /// Exact solver wall-clock budget in seconds; 0 disables it.
    #[arg(long)]
    pub time_budget_s: Option<f64>,
    /// Bandwidth tolerance for all residual families.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Let zero-profit cut points win heuristic pricing.
    #[arg(long)]
    pub break_even: bool,
    /// Fail with exit code 4 when a solver stops on its budget.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("{0}")]
    Budget(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Scenario(ScenarioError::Io { .. }) => EXIT_IO,
            CliError::Scenario(_) => EXIT_INVALID,
            CliError::Data(DataError::Io(_)) => EXIT_IO,
            CliError::Data(_) => EXIT_INVALID,
            CliError::Budget(_) => EXIT_BUDGET,
            CliError::Io { .. } => EXIT_IO,
            CliError::Sim(_) | CliError::Solve(_) => EXIT_OTHER,
        }
    }

    /// Extra lines printed after the error message.
    pub fn details(&self) -> Vec<String> {
        match self {
            CliError::Scenario(ScenarioError::Invalid(v)) => {
                v.iter().map(|v| v.to_string()).collect()
            }
            CliError::Sim(SimError::Infeasible { violations, .. }) => {
                violations.iter().map(|v| v.to_string()).collect()
            }
            _ => Vec::new(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Run parameters echoed into every summary.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub scenario: String,
    pub scenario_name: String,
    pub mode: String,
    pub seed: u64,
    pub solver: String,
    pub bids_per_frame: Vec<usize>,
    pub node_budget: u64,
    pub time_budget_s: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
struct Totals {
    frames: usize,
    bids: usize,
    served: usize,
    served_ratio: f64,
    revenue: Money,
    electricity_cost: Money,
    lost_revenue: Money,
    profit: Money,
    budget_exhausted: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
struct SlotTotals {
    slots: usize,
    converged: usize,
    mean_objective: f64,
    worst_feasibility: f64,
    worst_complementary_slackness: f64,
    worst_stationarity: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    manifest: RunManifest,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<Totals>,
    #[serde(skip_serializing_if = "Option::is_none")]
    slots: Option<SlotTotals>,
}

struct Prepared {
    scenario: Scenario,
    path: String,
    limits: SolverLimits,
    options: HeuristicOptions,
}

fn prepare(path: &Path, run: &RunArgs) -> Result<Prepared, CliError> {
    let mut scenario = Scenario::load_valid(path)?;
    let gen = &mut scenario.generator;
    if let Some(seed) = run.seed {
        gen.seed = seed;
    }
    if let Some(n) = run.bids {
        gen.bid_schedule = vec![n];
    }
    if let Some(mix) = &run.mix {
        let weights: Result<Vec<f64>, _> =
            mix.split(':').map(|s| s.trim().parse::<f64>()).collect();
        let weights = weights.map_err(|_| CliError::Usage(format!("cannot parse mix {mix:?}")))?;
        if weights.len() != scenario.system.catalog.vm_types.len() {
            return Err(CliError::Usage(format!(
                "mix {mix:?} has {} entries, the scenario has {} VM types",
                weights.len(),
                scenario.system.catalog.vm_types.len()
            )));
        }
        gen.mix = weights;
    }
    let problems = gen.problems();
    if !problems.is_empty() {
        return Err(CliError::Usage(problems.join("; ")));
    }
    let tol = &mut scenario.bandwidth.tolerances;
    if let Some(t) = run.tol {
        tol.feasibility = t;
        tol.complementary_slackness = t;
        tol.stationarity = t;
    }
    if let Some(i) = run.max_iterations {
        tol.max_iterations = i;
    }
    let mut limits = SolverLimits::default();
    if let Some(n) = run.node_budget {
        limits.node_budget = n;
    }
    if let Some(s) = run.time_budget_s {
        limits.time_budget = (s > 0.0).then(|| Duration::from_secs_f64(s));
    }
    Ok(Prepared {
        scenario,
        path: path.display().to_string(),
        limits,
        options: HeuristicOptions {
            admit_break_even: run.break_even,
        },
    })
}

impl Prepared {
    fn manifest(&self, mode: &str, run: &RunArgs) -> RunManifest {
        let tol = &self.scenario.bandwidth.tolerances;
        RunManifest {
            scenario: self.path.clone(),
            scenario_name: self.scenario.name.clone(),
            mode: mode.to_string(),
            seed: self.scenario.generator.seed,
            solver: SolverChoice::from(run.solver).to_string(),
            bids_per_frame: self.scenario.generator.bid_schedule.clone(),
            node_budget: self.limits.node_budget,
            time_budget_s: self.limits.time_budget.map(|d| d.as_secs_f64()),
            tolerance: tol.stationarity,
            max_iterations: tol.max_iterations,
        }
    }

    fn simulator(&self) -> Simulator<'_> {
        let mut sim = Simulator::new(
            &self.scenario.system,
            self.scenario.generator.clone(),
            self.scenario.bandwidth,
        );
        sim.limits = self.limits;
        sim.heuristic = self.options;
        sim
    }
}

fn out_dir(run: &RunArgs) -> Result<&Path, CliError> {
    fs::create_dir_all(&run.out).map_err(io_err(&run.out))?;
    Ok(&run.out)
}

fn write_table<T: Serialize + Default>(dir: &Path, name: &str, rows: &[T]) -> Result<(), CliError> {
    let path = dir.join(name);
    io::write_table(&path, rows).map_err(|e| match e {
        DataError::Io(source) => CliError::Io {
            path: path.display().to_string(),
            source,
        },
        other => CliError::Data(other),
    })
}

fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    io::write_atomic(&path, bytes).map_err(io_err(&path))
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    write_bytes(dir, "summary.json", text.as_bytes())
}

fn totals(frames: &[FrameOutcome]) -> Totals {
    let mut t = Totals {
        frames: frames.len(),
        ..Totals::default()
    };
    for f in frames {
        let r = &f.records[0];
        t.bids += r.bids;
        t.served += r.served;
        t.revenue += r.revenue;
        t.electricity_cost += r.electricity_cost;
        t.lost_revenue += r.lost_revenue;
        t.profit += r.profit;
        t.budget_exhausted |= f.budget_exhausted;
    }
    t.served_ratio = if t.bids == 0 {
        0.0
    } else {
        t.served as f64 / t.bids as f64
    };
    t
}

fn slot_totals(slots: &SlotOutcome) -> SlotTotals {
    let n = slots.slots.len();
    SlotTotals {
        slots: n,
        converged: slots.slots.iter().filter(|s| s.converged).count(),
        mean_objective: if n == 0 {
            0.0
        } else {
            slots.slots.iter().map(|s| s.objective).sum::<f64>() / n as f64
        },
        worst_feasibility: slots
            .slots
            .iter()
            .map(|s| s.feasibility)
            .fold(0.0, f64::max),
        worst_complementary_slackness: slots
            .slots
            .iter()
            .map(|s| s.complementary_slackness)
            .fold(0.0, f64::max),
        worst_stationarity: slots
            .slots
            .iter()
            .map(|s| s.stationarity)
            .fold(0.0, f64::max),
    }
}

fn check_budget(strict: bool, exhausted: bool, what: &str) -> Result<(), CliError> {
    if strict && exhausted {
        Err(CliError::Budget(format!("{what} stopped on its budget")))
    } else {
        Ok(())
    }
}

/// Executes a parsed command line; the returned lines go to stdout.
pub fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Auction {
            scenario,
            bids_file,
            run,
        } => cmd_auction(&scenario, bids_file.as_deref(), &run),
        Command::Simulate {
            scenario,
            frames,
            run,
        } => cmd_simulate(&scenario, frames, &run),
        Command::Compare {
            scenario,
            ladder,
            seeds,
            run,
        } => cmd_compare(&scenario, &ladder, &seeds, &run),
        Command::Bandwidth {
            scenario,
            bids_file,
            solution_file,
            run,
        } => cmd_bandwidth(&scenario, &bids_file, &solution_file, &run),
    }
}

pub fn cmd_validate(path: &Path) -> Result<Vec<String>, CliError> {
    let s = Scenario::load_valid(path)?;
    let sys = &s.system;
    Ok(vec![format!(
        "{}: ok ({} APs, {} cloudlets, {} VM types, {} PM types)",
        s.name,
        sys.topology.aps.len(),
        sys.topology.cloudlets.len(),
        sys.catalog.vm_types.len(),
        sys.catalog.pm_types.len()
    )])
}

pub fn cmd_auction(
    path: &Path,
    bids_file: Option<&Path>,
    run: &RunArgs,
) -> Result<Vec<String>, CliError> {
    let prep = prepare(path, run)?;
    let system = &prep.scenario.system;
    let dir = out_dir(run)?;
    let mut sim = prep.simulator();
    let outcome = match bids_file {
        None => sim.run_frame(run.solver.into())?,
        Some(f) => {
            let file = fs::File::open(f).map_err(io_err(f))?;
            let bids = io::read_bids(file, system)?;
            sim.evaluate(
                BidBook::new(bids, system).map_err(DataError::from)?,
                run.solver.into(),
            )?
        }
    };
    let mut bids_csv = Vec::new();
    io::write_bids(&mut bids_csv, outcome.book.bids(), system)?;
    write_bytes(dir, "bids.csv", &bids_csv)?;
    let mut sol_csv = Vec::new();
    io::write_solution(&mut sol_csv, &outcome.book, &outcome.solution, system)?;
    write_bytes(dir, "solution.csv", &sol_csv)?;
    write_table(dir, "frames.csv", &outcome.records)?;
    write_table(dir, "prices.csv", &outcome.prices)?;
    write_table(dir, "timings.csv", &outcome.timings)?;
    let frames = std::slice::from_ref(&outcome);
    write_summary(
        dir,
        &Summary {
            manifest: prep.manifest("auction", run),
            frames: Some(totals(frames)),
            slots: None,
        },
    )?;
    check_budget(run.strict, outcome.budget_exhausted, "exact solver")?;
    Ok(outcome.records.iter().map(describe_frame).collect())
}

fn describe_frame(r: &FrameRecord) -> String {
    let mut s = format!(
        "frame {} {}: served {}/{} profit {} (revenue {}, electricity {}, lost {})",
        r.frame,
        r.solver,
        r.served,
        r.bids,
        r.profit,
        r.revenue,
        r.electricity_cost,
        r.lost_revenue
    );
    if r.optimal == Some(false) {
        s.push_str(" [not proven optimal]");
    }
    s
}

pub fn cmd_simulate(
    path: &Path,
    frames: Option<usize>,
    run: &RunArgs,
) -> Result<Vec<String>, CliError> {
    let prep = prepare(path, run)?;
    let n_frames = frames.unwrap_or(prep.scenario.generator.frames);
    if n_frames == 0 {
        return Err(CliError::Usage("at least one frame is required".into()));
    }
    let dir = out_dir(run)?;
    let mut sim = prep.simulator();
    let mut outcomes = Vec::new();
    let mut slots = SlotOutcome::default();
    for _ in 0..n_frames {
        let outcome = sim.run_frame(run.solver.into())?;
        let s = sim.run_slots(&outcome)?;
        slots.slots.extend(s.slots);
        slots.links.extend(s.links);
        slots.allocations.extend(s.allocations);
        outcomes.push(outcome);
    }
    let records: Vec<FrameRecord> = outcomes.iter().flat_map(|o| o.records.clone()).collect();
    let prices: Vec<PriceRecord> = outcomes.iter().flat_map(|o| o.prices.clone()).collect();
    let timings: Vec<TimingRecord> = outcomes.iter().flat_map(|o| o.timings.clone()).collect();
    write_table(dir, "frames.csv", &records)?;
    write_table(dir, "prices.csv", &prices)?;
    write_table(dir, "slots.csv", &slots.slots)?;
    write_table(dir, "links.csv", &slots.links)?;
    write_table(dir, "allocations.csv", &slots.allocations)?;
    write_table(dir, "timings.csv", &timings)?;
    let t = totals(&outcomes);
    let st = slot_totals(&slots);
    let mut lines: Vec<String> = records.iter().map(describe_frame).collect();
    lines.push(format!(
        "{} slots, {} converged, mean objective {}",
        st.slots, st.converged, st.mean_objective
    ));
    let exhausted = t.budget_exhausted;
    let unconverged = st.converged < st.slots;
    write_summary(
        dir,
        &Summary {
            manifest: prep.manifest("simulate", run),
            frames: Some(t),
            slots: Some(st),
        },
    )?;
    check_budget(run.strict, exhausted, "exact solver")?;
    check_budget(run.strict, unconverged, "bandwidth solver")?;
    Ok(lines)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ComparisonRecord {
    pub scenario: String,
    pub bids: usize,
    pub seed: u64,
    pub heuristic_profit: Money,
    pub exact_profit: Money,
    pub exact_optimal: bool,
    pub profit_ratio: Option<f64>,
    pub heuristic_served_ratio: f64,
    pub exact_served_ratio: f64,
    pub heuristic_s: f64,
    pub exact_s: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ComparisonPrice {
    pub scenario: String,
    pub bids: usize,
    pub seed: u64,
    pub solver: String,
    pub ap: String,
    pub vm_type: String,
    pub price: Option<Money>,
}

pub fn cmd_compare(
    path: &Path,
    ladder: &[usize],
    seeds: &[u64],
    run: &RunArgs,
) -> Result<Vec<String>, CliError> {
    let prep = prepare(path, run)?;
    let dir = out_dir(run)?;
    let mut rows = Vec::new();
    let mut price_rows = Vec::new();
    let mut lines = Vec::new();
    let mut exhausted = false;
    for &n in ladder {
        for &seed in seeds {
            let mut gen = prep.scenario.generator.clone();
            gen.seed = seed;
            gen.bid_schedule = vec![n];
            let mut sim = Simulator::new(&prep.scenario.system, gen, prep.scenario.bandwidth);
            sim.limits = prep.limits;
            sim.heuristic = prep.options;
            let out = sim.run_frame(SolverChoice::Both)?;
            let (h, e) = (&out.records[0], &out.records[1]);
            let ratio = (e.profit > Money::ZERO).then(|| h.profit.to_f64() / e.profit.to_f64());
            exhausted |= out.budget_exhausted;
            rows.push(ComparisonRecord {
                scenario: prep.scenario.name.clone(),
                bids: n,
                seed,
                heuristic_profit: h.profit,
                exact_profit: e.profit,
                exact_optimal: e.optimal == Some(true),
                profit_ratio: ratio,
                heuristic_served_ratio: h.served_ratio,
                exact_served_ratio: e.served_ratio,
                heuristic_s: out.timings[0].total_s,
                exact_s: out.timings[1].total_s,
            });
            for p in &out.prices {
                price_rows.push(ComparisonPrice {
                    scenario: prep.scenario.name.clone(),
                    bids: n,
                    seed,
                    solver: p.solver.clone(),
                    ap: p.ap.clone(),
                    vm_type: p.vm_type.clone(),
                    price: p.price,
                });
            }
            lines.push(format!(
                "{} bids seed {}: heuristic {} exact {}{}",
                n,
                seed,
                h.profit,
                e.profit,
                if e.optimal == Some(true) {
                    ""
                } else {
                    " [not proven optimal]"
                }
            ));
        }
    }
    write_table(dir, "comparison.csv", &rows)?;
    write_table(dir, "comparison_prices.csv", &price_rows)?;
    check_budget(run.strict, exhausted, "exact solver")?;
    Ok(lines)
}

pub fn cmd_bandwidth(
    path: &Path,
    bids_file: &Path,
    solution_file: &Path,
    run: &RunArgs,
) -> Result<Vec<String>, CliError> {
    let prep = prepare(path, run)?;
    let system = &prep.scenario.system;
    let bids = io::read_bids(
        fs::File::open(bids_file).map_err(io_err(bids_file))?,
        system,
    )?;
    let book = BidBook::new(bids, system).map_err(DataError::from)?;
    let solution = io::read_solution(
        fs::File::open(solution_file).map_err(io_err(solution_file))?,
        &book,
        system,
    )?;
    let violations = check_feasibility(&solution, &book, system);
    if !violations.is_empty() {
        return Err(SimError::Infeasible {
            frame: 0,
            solver: "saved".into(),
            violations,
        }
        .into());
    }
    let dir = out_dir(run)?;
    let outcome = FrameOutcome {
        book,
        solution,
        records: Vec::new(),
        prices: Vec::new(),
        timings: Vec::new(),
        budget_exhausted: false,
    };
    let mut sim = prep.simulator();
    let slots = sim.run_slots(&outcome)?;
    write_table(dir, "slots.csv", &slots.slots)?;
    write_table(dir, "links.csv", &slots.links)?;
    write_table(dir, "allocations.csv", &slots.allocations)?;
    let st = slot_totals(&slots);
    let line = format!(
        "{} slots, {} converged, mean objective {}",
        st.slots, st.converged, st.mean_objective
    );
    let unconverged = st.converged < st.slots;
    write_summary(
        dir,
        &Summary {
            manifest: prep.manifest("bandwidth", run),
            frames: None,
            slots: Some(st),
        },
    )?;
    check_budget(run.strict, unconverged, "bandwidth solver")?;
    Ok(vec![line])
}
