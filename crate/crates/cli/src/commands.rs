use anyhow::{Context, Result};
use delaylb::analysis::trace_bound;
use delaylb::central::{solve_central, solve_central_capped, SolverSettings};
use delaylb::discrete::{discretize_state, read_task_file, sample_placements, solve_with_replication};
use delaylb::experiment::{
    cell_seed, convergence_table, poa_table, run_convergence, run_cycles, run_poa, ConvergenceRecord, CyclesRecord,
    PoaRecord,
};
use delaylb::mine::{reference_cost, run_mine, run_to_fixpoint, IterationReport};
use delaylb::model::{server_loads, total_cost};
use delaylb::selfish::{homogeneous_parameters, homogeneous_poa_bounds, nash_dynamics};
use delaylb::{Execution, RelayState, Topology};
use serde::Serialize;

use crate::config::{config_error, Config, InstanceConfig};
use crate::output::Out;

/// Everything a subcommand needs besides its own flags.
pub struct Ctx {
    pub config: Config,
    /// Overrides the seed of a `[scenario]` when given on the command line.
    pub seed_flag: Option<u64>,
    pub seed: u64,
    pub exec: Execution,
    pub out: Out,
}

#[derive(Serialize)]
struct StateReport {
    m: usize,
    cost: f64,
    server_loads: Vec<f64>,
    rows: Vec<Vec<f64>>,
    #[serde(flatten)]
    extra: serde_json::Value,
}

fn state_report(topo: &Topology, state: &RelayState, extra: serde_json::Value) -> StateReport {
    StateReport {
        m: topo.m(),
        cost: total_cost(topo, state),
        server_loads: server_loads(state),
        rows: state.rows(),
        extra,
    }
}

pub fn solve(cx: &Ctx, cap: Option<usize>) -> Result<()> {
    let (topo, loads) = cx.config.instance(cx.seed_flag)?;
    let solution = match cap {
        Some(r) => solve_central_capped(&topo, &loads, &cx.config.solver, r)?,
        None => solve_central(&topo, &loads, &cx.config.solver)?,
    };
    let extra = serde_json::json!({
        "cap": cap,
        "iterations": solution.iterations,
        "kkt_residual": solution.kkt_residual,
    });
    cx.out
        .json("solution.json", &state_report(&topo, &solution.state, extra))?;
    println!("cost {} after {} iterations", solution.cost, solution.iterations);
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    iteration: usize,
    cost: f64,
    moved: f64,
    partners: &'a [Option<usize>],
}

pub fn mine(cx: &Ctx, threshold: Option<f64>) -> Result<()> {
    let (topo, loads) = cx.config.instance(cx.seed_flag)?;
    let mut settings = cx.config.mine.clone();
    settings.execution = cx.exec;
    let (run, reference) = match threshold {
        Some(t) => {
            settings.threshold = t;
            let reference = reference_cost(&topo, &loads, cx.seed)?;
            (
                run_mine(&topo, &loads, &settings, Some(reference), cx.seed)?,
                Some(reference),
            )
        }
        None => (run_to_fixpoint(&topo, &loads, &settings, cx.seed)?, None),
    };
    let extra = serde_json::json!({
        "seed": cx.seed,
        "iterations": run.iterations,
        "initial_cost": run.initial_cost,
        "reference_cost": reference,
    });
    cx.out.json("mine.json", &state_report(&topo, &run.state, extra))?;
    let lines: Vec<TrajectoryLine> = run
        .reports
        .iter()
        .map(|r: &IterationReport| TrajectoryLine {
            iteration: r.iteration,
            cost: r.total_cost,
            moved: r.moved,
            partners: &r.partners,
        })
        .collect();
    cx.out.jsonl("mine_trajectory.jsonl", &lines)?;
    println!(
        "cost {} after {} iterations (initial {})",
        run.final_cost(),
        run.iterations,
        run.initial_cost
    );
    Ok(())
}

#[derive(Serialize)]
struct TableRow<'a> {
    m: usize,
    topology: &'a str,
    load: &'a str,
    criterion: &'a str,
    threshold: f64,
    runs: usize,
    avg: f64,
    max: f64,
    stdev: f64,
    unreached: usize,
}

#[derive(Serialize)]
struct ConvergenceRun<'a> {
    cell: usize,
    seed: u64,
    m: usize,
    topology: &'a str,
    load: &'a str,
    load_parameter: f64,
    repetition: usize,
    threshold: f64,
    iterations: Option<usize>,
    reference_cost: f64,
    reference_iterations: usize,
}

#[derive(Serialize)]
struct Trajectory<'a> {
    cell: usize,
    seed: u64,
    m: usize,
    topology: &'a str,
    load: &'a str,
    costs: &'a [f64],
}

/// Load-model note carried in every grid header.
const LOAD_NOTE: &str =
    "loads: uniform on (0, 2*mean), exponential with the given mean, peak puts the whole total on one random server";

fn mode_label(mode: delaylb::mine::ThresholdMode) -> &'static str {
    match mode {
        delaylb::mine::ThresholdMode::Relative => "relative",
        delaylb::mine::ThresholdMode::AvgLoad => "avg-load",
    }
}

pub fn converge(cx: &Ctx) -> Result<()> {
    let grid = &cx.config.converge;
    let records: Vec<ConvergenceRecord> = run_convergence(grid, cx.seed, cx.exec)?;
    let criterion = mode_label(grid.threshold_mode);
    let summary = convergence_table(&records);
    let table: Vec<TableRow> = summary
        .iter()
        .map(|r| TableRow {
            m: r.m,
            topology: &r.topology,
            load: &r.load,
            criterion,
            threshold: r.threshold,
            runs: r.iterations.count + r.unreached,
            avg: r.iterations.mean,
            max: r.iterations.max,
            stdev: r.iterations.stdev,
            unreached: r.unreached,
        })
        .collect();
    let header = vec![
        format!(
            "grid: sizes {:?}, {} topologies, {} load distributions, {} repetitions, {} cells, master seed {}",
            grid.sizes,
            grid.topologies.len(),
            grid.loads().len(),
            grid.repetitions,
            records.len(),
            cx.seed
        ),
        format!("criterion: {criterion}, thresholds {:?}", grid.thresholds),
        LOAD_NOTE.to_string(),
    ];
    cx.out.csv("converge.csv", &header, &table)?;
    let runs: Vec<ConvergenceRun> = records
        .iter()
        .flat_map(|r| {
            r.thresholds
                .iter()
                .zip(&r.iterations)
                .map(move |(&threshold, &iterations)| ConvergenceRun {
                    cell: r.cell,
                    seed: r.seed,
                    m: r.m,
                    topology: &r.topology,
                    load: &r.load,
                    load_parameter: r.load_parameter,
                    repetition: r.repetition,
                    threshold,
                    iterations,
                    reference_cost: r.reference_cost,
                    reference_iterations: r.reference_iterations,
                })
        })
        .collect();
    cx.out.csv("converge_runs.csv", &header, &runs)?;
    let trajectories: Vec<Trajectory> = records
        .iter()
        .map(|r| Trajectory {
            cell: r.cell,
            seed: r.seed,
            m: r.m,
            topology: &r.topology,
            load: &r.load,
            costs: &r.trajectory,
        })
        .collect();
    cx.out.jsonl("converge_trajectories.jsonl", &trajectories)?;
    for row in &table {
        println!(
            "m={:<5} {:<14} {:<12} {}={:<6} avg {:.2} max {} stdev {:.2}{}",
            row.m,
            row.topology,
            row.load,
            row.criterion,
            row.threshold,
            row.avg,
            row.max,
            row.stdev,
            if row.unreached > 0 {
                format!(" unreached {}", row.unreached)
            } else {
                String::new()
            }
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CyclesRow<'a> {
    cell: usize,
    seed: u64,
    m: usize,
    topology: &'a str,
    load: &'a str,
    load_parameter: f64,
    plain_iterations: Option<usize>,
    cleaned_iterations: Option<usize>,
    identical: bool,
    plain_monotone: bool,
    cleaned_monotone: bool,
}

pub fn cycles_ab(cx: &Ctx) -> Result<()> {
    let grid = &cx.config.cycles;
    let records: Vec<CyclesRecord> = run_cycles(grid, cx.seed, cx.exec)?;
    let identical = records.iter().filter(|r| r.identical).count();
    let monotone = records.iter().all(|r| r.plain_monotone && r.cleaned_monotone);
    let header = vec![
        format!(
            "grid: sizes {:?}, {} topologies, {} load distributions, {} repetitions, {} pairs, master seed {}",
            grid.grid.sizes,
            grid.grid.topologies.len(),
            grid.grid.loads().len(),
            grid.grid.repetitions,
            records.len(),
            cx.seed
        ),
        format!(
            "threshold {} ({}), cycle removal every {} iterations",
            grid.threshold,
            mode_label(grid.grid.threshold_mode),
            grid.every
        ),
        LOAD_NOTE.to_string(),
        format!("identical {identical}/{}, all monotone {monotone}", records.len()),
    ];
    let rows: Vec<CyclesRow> = records
        .iter()
        .map(|r| CyclesRow {
            cell: r.cell,
            seed: r.seed,
            m: r.m,
            topology: &r.topology,
            load: &r.load,
            load_parameter: r.load_parameter,
            plain_iterations: r.plain_iterations,
            cleaned_iterations: r.cleaned_iterations,
            identical: r.identical,
            plain_monotone: r.plain_monotone,
            cleaned_monotone: r.cleaned_monotone,
        })
        .collect();
    cx.out.csv("cycles.csv", &header, &rows)?;
    let mismatches: Vec<&CyclesRecord> = records.iter().filter(|r| !r.identical).collect();
    cx.out.jsonl("cycles_mismatches.jsonl", &mismatches)?;
    println!(
        "identical iteration counts in {identical}/{} pairs; all trajectories monotone: {monotone}",
        records.len()
    );
    Ok(())
}

pub fn nash(cx: &Ctx) -> Result<()> {
    let (topo, loads) = cx.config.instance(cx.seed_flag)?;
    let outcome = nash_dynamics(&topo, &loads, &cx.config.nash, cx.seed)?;
    let extra = serde_json::json!({
        "seed": cx.seed,
        "rounds": outcome.rounds,
        "max_change_trace": outcome.max_change_trace,
    });
    let report = state_report(&topo, &outcome.state, extra);
    println!("equilibrium cost {} after {} rounds", report.cost, outcome.rounds);
    cx.out.json("nash.json", &report)?;
    Ok(())
}

#[derive(Serialize)]
struct PoaTableRow<'a> {
    speeds: &'a str,
    bucket: &'a str,
    topology: &'a str,
    runs: usize,
    avg: f64,
    max: f64,
    stdev: f64,
    /// Bracket over the rows' homogeneous instances; empty otherwise.
    lower_bound: Option<f64>,
    upper_bound: Option<f64>,
}

#[derive(Serialize)]
struct PoaRun<'a> {
    cell: usize,
    seed: u64,
    m: usize,
    speeds: &'a str,
    topology: &'a str,
    load: &'a str,
    load_parameter: f64,
    bucket: &'a str,
    nash_cost: f64,
    optimal_cost: f64,
    ratio: f64,
    rounds: usize,
    lower_bound: Option<f64>,
    upper_bound: Option<f64>,
}

pub fn poa(cx: &Ctx) -> Result<()> {
    let grid = &cx.config.poa;
    let records: Vec<PoaRecord> = run_poa(grid, cx.seed, cx.exec)?;
    let summary = poa_table(&records);
    let table: Vec<PoaTableRow> = summary
        .iter()
        .map(|row| {
            let members = records
                .iter()
                .filter(|r| r.speeds == row.speeds && r.bucket == row.bucket && r.topology == row.topology);
            let lower = members.clone().filter_map(|r| r.lower_bound).reduce(f64::min);
            let upper = members.filter_map(|r| r.upper_bound).reduce(f64::max);
            PoaTableRow {
                speeds: &row.speeds,
                bucket: &row.bucket,
                topology: &row.topology,
                runs: row.ratio.count,
                avg: row.ratio.mean,
                max: row.ratio.max,
                stdev: row.ratio.stdev,
                lower_bound: lower,
                upper_bound: upper,
            }
        })
        .collect();
    let header = vec![
        format!(
        "grid: sizes {:?}, {} speed models, {} topologies, load means {:?}, {} repetitions, {} cells, master seed {}",
        grid.sizes,
        grid.speeds.len(),
        grid.topologies.len(),
        grid.load_means,
        grid.repetitions,
        records.len(),
        cx.seed
        ),
        LOAD_NOTE.to_string(),
    ];
    cx.out.csv("poa.csv", &header, &table)?;
    let runs: Vec<PoaRun> = records
        .iter()
        .map(|r| PoaRun {
            cell: r.cell,
            seed: r.seed,
            m: r.m,
            speeds: &r.speeds,
            topology: &r.topology,
            load: &r.load,
            load_parameter: r.load_parameter,
            bucket: &r.bucket,
            nash_cost: r.nash_cost,
            optimal_cost: r.optimal_cost,
            ratio: r.ratio,
            rounds: r.rounds,
            lower_bound: r.lower_bound,
            upper_bound: r.upper_bound,
        })
        .collect();
    cx.out.csv("poa_runs.csv", &header, &runs)?;
    for row in &table {
        println!(
            "{:<10} {:<12} {:<14} avg {:.3} max {:.3} stdev {:.3}",
            row.speeds, row.bucket, row.topology, row.avg, row.max, row.stdev
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundRow {
    iteration: usize,
    distance: f64,
    delta_r: f64,
    bound: f64,
    holds: bool,
    cleaned: bool,
    negative_cycle: bool,
}

pub fn bound_trace(cx: &Ctx, iterations: Option<usize>, no_clean: bool) -> Result<()> {
    let (topo, loads) = cx.config.instance(cx.seed_flag)?;
    let settings = SolverSettings {
        kkt_tolerance: cx.config.solver.kkt_tolerance.min(1e-10),
        ..cx.config.solver.clone()
    };
    let optimum = solve_central(&topo, &loads, &settings).context("optimum for the bound trace")?;
    let target = server_loads(&optimum.state);
    let clean = cx.config.bound.clean && !no_clean;
    let iterations = iterations.unwrap_or(cx.config.bound.iterations);
    let records = trace_bound(&topo, &loads, &target, iterations, clean, cx.seed)?;
    // Tolerance for round-off in the optimum.
    let slack = 1e-6 * loads.total();
    let rows: Vec<BoundRow> = records
        .iter()
        .map(|r| BoundRow {
            iteration: r.iteration,
            distance: r.distance,
            delta_r: r.delta_r,
            bound: r.bound,
            holds: r.holds(slack),
            cleaned: r.cleaned,
            negative_cycle: r.negative_cycle,
        })
        .collect();
    let violations = rows.iter().filter(|r| !r.holds).count();
    let header = vec![format!(
        "m {}, seed {}, cycle cleaning {}, slack {slack:e}",
        topo.m(),
        cx.seed,
        if clean { "on" } else { "off" }
    )];
    cx.out.csv("bound.csv", &header, &rows)?;
    println!("{} iterations traced, {violations} bound violations", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct TaskRow {
    owner: usize,
    task: usize,
    size: f64,
    server: usize,
}

#[derive(Serialize)]
struct RoundError {
    owner: usize,
    server: usize,
    target: f64,
    error: f64,
}

pub fn round(cx: &Ctx, tasks: Option<&std::path::Path>) -> Result<()> {
    let path = tasks
        .map(std::path::Path::to_path_buf)
        .or_else(|| cx.config.round.tasks.clone())
        .ok_or_else(|| config_error("round needs a task file (--tasks or [round] tasks)"))?;
    let (topo, _) = cx.config.instance(cx.seed_flag)?;
    let tasks = read_task_file(&path, Some(topo.m()))?;
    let loads = tasks.loads()?;
    let optimum = solve_central(&topo, &loads, &cx.config.solver)?;
    let assignment = discretize_state(&optimum.state, &tasks)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (owner, row) in assignment.rows.iter().enumerate() {
        let sizes = tasks.tasks(owner);
        for (task, server) in row.owners().into_iter().enumerate() {
            rows.push(TaskRow {
                owner,
                task,
                size: sizes[task],
                server,
            });
        }
        for (server, (&target, &error)) in row.targets.iter().zip(&row.errors).enumerate() {
            errors.push(RoundError {
                owner,
                server,
                target,
                error,
            });
        }
    }
    cx.out.csv("round.csv", &[], &rows)?;
    cx.out.csv("round_errors.csv", &[], &errors)?;
    println!(
        "fractional cost {}, total rounding error {}",
        optimum.cost,
        assignment.total_error()
    );
    Ok(())
}

#[derive(Serialize)]
struct Placement {
    owner: usize,
    task: usize,
    servers: String,
}

#[derive(Serialize)]
struct Inclusion {
    owner: usize,
    server: usize,
    fraction: f64,
    inclusion: f64,
}

pub fn replicate(cx: &Ctx, r: Option<usize>, tasks: Option<usize>) -> Result<()> {
    let (topo, loads) = cx.config.instance(cx.seed_flag)?;
    let r = r.unwrap_or(cx.config.replicate.r);
    let n_tasks = tasks.unwrap_or(cx.config.replicate.tasks);
    let state = solve_with_replication(&topo, &loads, r, &cx.config.replicate.solver)?;
    let fractions = state.fractions();
    let mut placements = Vec::new();
    let mut inclusions = Vec::new();
    for (owner, row) in fractions.iter().enumerate() {
        if loads.get(owner) <= 0.0 {
            continue;
        }
        let plan = sample_placements(row, r, n_tasks, cell_seed(cx.seed, owner))?;
        for (task, servers) in plan.placements.iter().enumerate() {
            let servers = servers.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
            placements.push(Placement { owner, task, servers });
        }
        for (server, &fraction) in row.iter().enumerate() {
            inclusions.push(Inclusion {
                owner,
                server,
                fraction,
                inclusion: r as f64 * fraction,
            });
        }
    }
    cx.out.csv("replicate.csv", &[], &placements)?;
    cx.out.csv("replicate_fractions.csv", &[], &inclusions)?;
    println!("cost {} with every fraction capped at 1/{r}", total_cost(&topo, &state));
    Ok(())
}

/// Writes the generated instance as a config fragment that `--config` accepts.
pub fn gen(cx: &Ctx) -> Result<()> {
    let (topo, loads) = cx.config.instance(cx.seed_flag)?;
    let instance = InstanceConfig {
        speeds: topo.speeds().to_vec(),
        loads: loads.own().to_vec(),
        latency: Some(topo.latency_matrix()),
        ..Default::default()
    };
    #[derive(Serialize)]
    struct Fragment {
        instance: InstanceConfig,
    }
    let text = toml::to_string(&Fragment { instance })?;
    cx.out.text("instance.toml", &text)?;
    let homogeneous = homogeneous_parameters(&topo)
        .filter(|_| loads.average() > 0.0)
        .map(|(c, s)| homogeneous_poa_bounds(c, s, loads.average()));
    println!(
        "{} servers, total load {}, total speed {}{}",
        topo.m(),
        loads.total(),
        topo.total_speed(),
        homogeneous.map_or(String::new(), |(lo, hi)| format!(
            ", homogeneous ratio bounds [{lo:.4}, {hi:.4}]"
        ))
    );
    Ok(())
}
