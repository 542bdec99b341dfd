//! `hopfunnel` command-line driver.
//!
//! Exit codes: 0 pass, 1 runtime or I/O failure, 2 invariant breach or
//! unsatisfied task, 3 infeasible configuration, 4 schema error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use hopfunnel_core::graph::{all_k_hop, induced_matrices};
use hopfunnel_core::{
    monitor_tasks, read_trajectory_csv, run_simulation, satisfaction_report, write_outputs, AgentId, Error,
    RunOptions, Scenario, Setup,
};
use serde::Serialize;

const EXIT_RUNTIME: u8 = 1;
const EXIT_BREACH: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_SCHEMA: u8 = 4;

#[derive(Parser)]
#[command(name = "hopfunnel", version, about = "k-hop observers and STL funnel control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// k-hop sets, clusters and their order, as JSON.
    Graphs {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Funnel feasibility and rho_max report, as JSON.
    CheckFeasibility {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the closed loop and write trajectory.csv, events.json and report.json.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Compute each round's per-agent work on a thread pool (same output).
        #[arg(long)]
        parallel: bool,
    },
    /// Offline robustness margins of a trajectory CSV.
    Monitor {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Schema(_) => EXIT_SCHEMA,
        Error::InvalidParameter(_)
        | Error::EmptyNeighborhood(_)
        | Error::AssumptionViolation(_)
        | Error::InfeasibleRelaxation(_)
        | Error::InfeasibleFunnel { .. } => EXIT_INFEASIBLE,
        Error::LocalityBreach { .. } => EXIT_BREACH,
        Error::InsufficientData(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_RUNTIME,
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

#[derive(Serialize)]
struct GraphsOut {
    n_agents: usize,
    k: usize,
    min_required_k: usize,
    k_hop: BTreeMap<AgentId, Vec<AgentId>>,
    lambda_min: BTreeMap<AgentId, f64>,
    clusters: Vec<Vec<AgentId>>,
    cluster_edges: Vec<(usize, usize)>,
    topo_order: Vec<usize>,
    leaves: Vec<usize>,
    assumptions: hopfunnel_core::AssumptionReport,
}

fn graphs(path: PathBuf) -> Result<u8, Error> {
    let sc = Scenario::from_path(path)?;
    let gc = sc.comm_graph()?;
    let gt = sc.task_graph()?;
    let dec = hopfunnel_core::cluster_decomposition(&gc, &gt)?;
    let assumptions = hopfunnel_core::check_assumptions(&gc, &gt, &dec);
    let k = sc.hop_count()?;
    let hops = all_k_hop(&gc, k)?;
    let mut lambda_min = BTreeMap::new();
    for (a, n) in &hops {
        if !n.is_empty() {
            lambda_min.insert(*a, induced_matrices(&gc, n)?.lambda_min());
        }
    }
    let ok = assumptions.all_pass();
    print_json(&GraphsOut {
        n_agents: sc.n_agents(),
        k,
        min_required_k: hopfunnel_core::min_required_k(&gc, &gt),
        k_hop: hops.into_iter().map(|(a, n)| (a, n.members)).collect(),
        lambda_min,
        leaves: dec.leaves(),
        clusters: dec.clusters,
        cluster_edges: dec.cluster_edges,
        topo_order: dec.topo_order,
        assumptions,
    })?;
    Ok(if ok { 0 } else { EXIT_INFEASIBLE })
}

#[derive(Serialize)]
struct FeasibilityOut<'a> {
    k: usize,
    min_required_k: usize,
    feasible: bool,
    report: &'a hopfunnel_core::FeasibilityReport,
    rho_max: &'a [hopfunnel_core::controller::RhoMaxReport],
    initialization: Vec<String>,
}

fn check_feasibility(path: PathBuf, seed: Option<u64>) -> Result<u8, Error> {
    let setup = Setup::new(Scenario::from_path(path)?, seed)?;
    let initialization = if setup.is_feasible() {
        setup.initialization_check()?
    } else {
        Vec::new()
    };
    let feasible = setup.is_feasible() && initialization.is_empty();
    print_json(&FeasibilityOut {
        k: setup.k,
        min_required_k: setup.min_k,
        feasible,
        report: &setup.feasibility,
        rho_max: &setup.rho_max,
        initialization,
    })?;
    Ok(if feasible { 0 } else { EXIT_INFEASIBLE })
}

fn simulate(path: PathBuf, seed: Option<u64>, opts: RunOptions, out: PathBuf) -> Result<u8, Error> {
    let setup = Setup::new(Scenario::from_path(path)?, seed)?;
    let start = Instant::now();
    let traj = run_simulation(&setup, opts)?;
    log::info!("{} steps in {:.2?}", traj.stats.steps, start.elapsed());
    let report = satisfaction_report(&setup, &traj)?;
    write_outputs(&out, &traj, &report)?;
    eprintln!(
        "{}/{} tasks satisfied, {} invariant events, outputs in {}",
        report.n_satisfied,
        report.n_tasks,
        report.counts.invariant_events(),
        out.display()
    );
    print_json(&report)?;
    Ok(if report.pass { 0 } else { EXIT_BREACH })
}

fn monitor(traj: PathBuf, scenario: PathBuf) -> Result<u8, Error> {
    let sc = Scenario::from_path(scenario)?;
    let samples = read_trajectory_csv(&traj, &sc)?;
    let report = monitor_tasks(&sc, &samples)?;
    print_json(&report)?;
    Ok(if report.all_satisfied { 0 } else { EXIT_BREACH })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HOPFUNNEL_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Graphs { scenario } => graphs(scenario),
        Command::CheckFeasibility { scenario, seed } => check_feasibility(scenario, seed),
        Command::Simulate {
            scenario,
            seed,
            dt,
            t_end,
            out,
            parallel,
        } => simulate(scenario, seed, RunOptions { dt, t_end, parallel }, out),
        Command::Monitor { traj, scenario } => monitor(traj, scenario),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            match &e {
                Error::Schema(errs) => {
                    for m in errs {
                        eprintln!("schema error: {m}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
