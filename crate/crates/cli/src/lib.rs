//! Command implementations behind the `klgame` binary.
//!
//! Exit codes: 0 success, 2 config or validation error, 3 solver failure, 4 I/O error.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use clap::Subcommand;
use klgame::bench::{loglog_slope, time_solves, ScalingPoint};
use klgame::ilq;
use klgame::par;
use klgame::scenario::solve_mm;
use klgame::sim::{run_batch, BatchResult, Method, Planner, SCHEMA_VERSION};
use serde::Serialize;

use config::RunConfig;
pub use clap::Parser;
use output::{create_dir, write, write_json, PolicyRecord};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Solver(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "klgame", version, about = "KL-regularized dynamic game solvers and tollbooth benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Solve the configured game once from its initial state.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Run receding-horizon trials for each method and tabulate the metrics.
    Batch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this method instead of the configured list.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Time fixed-budget solves of random games over player and horizon sweeps.
    BenchScaling {
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,6")]
        players: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        horizons: Vec<usize>,
        /// Player count of the horizon sweep.
        #[arg(long, default_value_t = 3)]
        sweep_players: usize,
        /// Horizon of the player sweep.
        #[arg(long, default_value_t = 8)]
        sweep_horizon: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 15)]
        iterations: usize,
        #[arg(long, default_value_t = 15)]
        halvings: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse and validate a config without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("KLGAME_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("KLGAME_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

/// Executed states and controls as rows.
type Rollout = (Vec<Vec<f64>>, Vec<Vec<f64>>);

#[derive(Serialize)]
struct BranchSummary {
    leaf: usize,
    probability: f64,
    terminal_state: Vec<f64>,
}

#[derive(Serialize)]
struct SolveSummary {
    version: u32,
    method: Method,
    horizon: usize,
    iterations_used: usize,
    converged: bool,
    social_cost_history: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    branches: Vec<BranchSummary>,
}

fn cmd_solve(config: &Path, out: Option<PathBuf>, method: Option<Method>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let method = method.unwrap_or(cfg.method);
    let spec = cfg.solve_scenario();
    let planner = Planner::new(&spec, method).map_err(|e| CliError::Config(e.to_string()))?;
    let dir = out_dir(out, &cfg);
    create_dir(&dir)?;
    let x0 = spec.x0();
    let fail = |e: klgame::KlError| CliError::Solver(format!("{method} solve failed: {e}"));
    let (summary, policy, trace, paths): (SolveSummary, PolicyRecord, _, Vec<Rollout>) = match &planner {
        Planner::Chain(problem) => {
            let sol = ilq::solve(problem, &x0, None, &spec.solver).map_err(fail)?;
            let states = sol.nominal.states().iter().map(|s| s.0.as_slice().to_vec()).collect();
            let controls = sol.nominal.controls().iter().map(|u| u.stacked().as_slice().to_vec()).collect();
            let summary = SolveSummary {
                version: SCHEMA_VERSION,
                method,
                horizon: spec.planning_horizon,
                iterations_used: sol.iterations_used,
                converged: sol.converged,
                social_cost_history: sol.social_cost_history.clone(),
                branches: vec![],
            };
            (summary, PolicyRecord::chain(&sol.policies), sol.trace, vec![(states, controls)])
        }
        Planner::Tree(problem) => {
            let sol = solve_mm(problem, &x0, None, &spec.solver).map_err(fail)?;
            let tree = &sol.tree;
            // leaves ordered heaviest first so `trajectory.csv` is the likeliest branch
            let mut leaves = tree.leaves().to_vec();
            leaves.sort_by(|a, b| tree.nodes[*b].probability.total_cmp(&tree.nodes[*a].probability).then(a.cmp(b)));
            let mut paths = vec![];
            let mut branches = vec![];
            for &leaf in &leaves {
                let mut ids = vec![];
                let mut n = Some(leaf);
                while let Some(id) = n {
                    ids.push(id);
                    n = tree.nodes[id].parent;
                }
                ids.reverse();
                let states: Vec<Vec<f64>> = ids.iter().map(|&id| tree.nodes[id].state.0.as_slice().to_vec()).collect();
                let controls = ids[1..]
                    .iter()
                    .filter_map(|&id| tree.nodes[id].control.as_ref())
                    .map(|u| u.stacked().as_slice().to_vec())
                    .collect();
                branches.push(BranchSummary {
                    leaf,
                    probability: tree.nodes[leaf].probability,
                    terminal_state: states.last().cloned().unwrap_or_default(),
                });
                paths.push((states, controls));
            }
            let summary = SolveSummary {
                version: SCHEMA_VERSION,
                method,
                horizon: spec.planning_horizon,
                iterations_used: sol.iterations_used,
                converged: sol.converged,
                social_cost_history: sol.social_cost_history.clone(),
                branches,
            };
            (summary, PolicyRecord::tree(&sol.root_policy), sol.trace, paths)
        }
    };
    if cfg.emit.trajectories {
        for (k, (states, controls)) in paths.iter().enumerate() {
            let name = if k == 0 { "trajectory.csv".to_string() } else { format!("trajectory_branch{k}.csv") };
            write(&dir.join(name), &output::trajectory_csv(states, controls))?;
        }
    }
    write_json(&dir.join("policy.json"), &policy)?;
    if cfg.emit.solver_trace {
        write_json(&dir.join("trace.json"), &trace)?;
    }
    if cfg.emit.stats {
        write_json(&dir.join("summary.json"), &summary)?;
    }
    println!(
        "{method}: {} iterations, converged {}, final social cost {:.6}, wrote {}",
        summary.iterations_used,
        summary.converged,
        summary.social_cost_history.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BatchTable<'a> {
    version: u32,
    n_trials: usize,
    seed: u64,
    rows: Vec<BatchRow<'a>>,
}

#[derive(Serialize)]
struct BatchRow<'a> {
    method: Method,
    stats: &'a klgame::sim::BatchStats,
    cost_curve: &'a [f64],
}

fn cmd_batch(config: &Path, out: Option<PathBuf>, trials: Option<usize>, seed: Option<u64>, method: Option<Method>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let n_trials = trials.unwrap_or(cfg.n_trials);
    if n_trials == 0 {
        return Err(CliError::Config("--trials must be >= 1".into()));
    }
    let seed = seed.unwrap_or(cfg.scenario.seed);
    let methods = method.map_or_else(|| cfg.batch_methods.clone(), |m| vec![m]);
    for &m in &methods {
        Planner::new(&cfg.scenario, m).map_err(|e| CliError::Config(format!("{m}: {e}")))?;
    }
    let dir = out_dir(out, &cfg);
    create_dir(&dir)?;
    let threads = threads_from_env()?;
    let mut results: Vec<BatchResult> = vec![];
    for &m in &methods {
        let r = par::with_threads(threads, || run_batch(&cfg.scenario, m, n_trials, seed)).map_err(|e| CliError::Solver(format!("{m} batch failed: {e}")))?;
        let s = &r.stats;
        println!(
            "{m}: CR {:.2} SR {:.2} Prog {:.2} Cost {:.3} ({} failed trials)",
            s.coordination_rate.mean, s.safety_rate.mean, s.progress.mean, s.cost.mean, s.failures
        );
        results.push(r);
    }
    let table = BatchTable {
        version: SCHEMA_VERSION,
        n_trials,
        seed,
        rows: results
            .iter()
            .map(|r| BatchRow {
                method: r.method,
                stats: &r.stats,
                cost_curve: &r.cost_curve,
            })
            .collect(),
    };
    write_json(&dir.join("batch.json"), &table)?;
    write(&dir.join("batch.md"), &output::batch_markdown(&results))?;
    for r in &results {
        if cfg.emit.stats {
            write_json(&dir.join(format!("trials_{}.json", r.method)), &r.trials)?;
        }
        if cfg.emit.trajectories {
            let sub = dir.join("trajectories").join(r.method.name());
            create_dir(&sub)?;
            for t in &r.trials {
                write(&sub.join(format!("trial_{:04}.csv", t.trial)), &output::trajectory_csv(&t.states, &t.controls))?;
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench_scaling(
    out: &Path,
    players: &[usize],
    horizons: &[usize],
    sweep_players: usize,
    sweep_horizon: usize,
    repeats: usize,
    iterations: usize,
    halvings: usize,
    seed: u64,
) -> Result<(), CliError> {
    if players.iter().copied().max().unwrap_or(0) < 2 {
        return Err(CliError::Config("--players needs a count >= 2".into()));
    }
    if players.contains(&0) || sweep_players == 0 {
        return Err(CliError::Config("player counts must be >= 1".into()));
    }
    if horizons.is_empty() || horizons.contains(&0) || sweep_horizon == 0 {
        return Err(CliError::Config("horizons must be non-empty and >= 1".into()));
    }
    if repeats == 0 || iterations == 0 {
        return Err(CliError::Config("--repeats and --iterations must be >= 1".into()));
    }
    create_dir(out)?;
    let threads = threads_from_env()?;
    let fail = |e: klgame::KlError| CliError::Solver(format!("scaling solve failed: {e}"));
    let rows: Vec<(&str, ScalingPoint)> = par::with_threads(threads, || -> Result<_, CliError> {
        let mut rows = vec![];
        for &n in players {
            rows.push(("players", time_solves(n, sweep_horizon, repeats, iterations, halvings, seed).map_err(fail)?));
        }
        for &h in horizons {
            rows.push(("horizon", time_solves(sweep_players, h, repeats, iterations, halvings, seed).map_err(fail)?));
        }
        Ok(rows)
    })?;
    write(&out.join("scaling.csv"), &output::scaling_csv(&rows))?;
    for sweep in ["players", "horizon"] {
        let pts: Vec<&ScalingPoint> = rows.iter().filter(|(s, _)| *s == sweep).map(|(_, p)| p).collect();
        if pts.len() >= 2 {
            let xs: Vec<f64> = pts.iter().map(|p| if sweep == "players" { p.players } else { p.horizon } as f64).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.median).collect();
            println!("{sweep} sweep: log-log slope of median time per iteration {:.3}", loglog_slope(&xs, &ys));
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { config, out, method } => {
            let threads = threads_from_env()?;
            par::with_threads(threads, || cmd_solve(&config, out, method))
        }
        Command::Batch {
            config,
            out,
            trials,
            seed,
            method,
        } => cmd_batch(&config, out, trials, seed, method),
        Command::BenchScaling {
            out,
            players,
            horizons,
            sweep_players,
            sweep_horizon,
            repeats,
            iterations,
            halvings,
            seed,
        } => cmd_bench_scaling(&out, &players, &horizons, sweep_players, sweep_horizon, repeats, iterations, halvings, seed),
        Command::ValidateConfig { config } => {
            let cfg = RunConfig::load(&config)?;
            println!(
                "ok: {} players, method {}, batch methods [{}]",
                cfg.scenario.n_players(),
                cfg.method,
                cfg.batch_methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
            );
            Ok(())
        }
    }
}
