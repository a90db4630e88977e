//! Experiment grids shared by the command-line tool and the acceptance suite.
//!
//! Every cell gets its own seed (`master + index`) and cells are merged by
//! index, so the degree of parallelism never changes the results.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::central::SolverSettings;
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::mine::{run_mine, run_to_fixpoint, MineSettings, ThresholdMode};
use crate::model::LoadProfile;
use crate::scenario::{generate, LoadKind, ScenarioSpec, SpeedKind, TopologyKind};
use crate::selfish::{price_of_anarchy, NashSettings, OptimumSource};

pub fn cell_seed(master: u64, index: usize) -> u64 {
    master.wrapping_add(index as u64)
}

/// Runs `f` on every cell, in parallel when asked, returning results in cell
/// order.
pub fn run_cells<C, R, F>(cells: &[C], exec: Execution, f: F) -> Vec<R>
where
    C: Sync,
    R: Send,
    F: Fn(&C) -> R + Sync + Send,
{
    map_slice(exec, cells, f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
    /// Population standard deviation.
    pub stdev: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let count = values.len();
    if count == 0 {
        return Summary {
            count,
            mean: f64::NAN,
            max: f64::NAN,
            stdev: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    Summary {
        count,
        mean,
        max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        stdev: var.sqrt(),
    }
}

pub fn topology_label(kind: &TopologyKind) -> String {
    match kind {
        TopologyKind::Homogeneous { c } => format!("homogeneous-c{c}"),
        TopologyKind::LatencyFile { path } => format!("file-{}", path.display()),
        TopologyKind::Geographic { .. } => "geographic".into(),
    }
}

pub fn speed_label(kind: &SpeedKind) -> String {
    match kind {
        SpeedKind::Constant { s } => format!("const-{s}"),
        SpeedKind::Uniform { lo, hi } => format!("uniform-{lo}-{hi}"),
    }
}

fn load_parameter(kind: &LoadKind) -> f64 {
    match *kind {
        LoadKind::Uniform { mean } | LoadKind::Exponential { mean } => mean,
        LoadKind::Peak { total } => total,
    }
}

/// Trajectory is non-increasing up to round-off.
pub fn is_monotone(costs: &[f64]) -> bool {
    costs.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0))
}

/// First iteration (at least 1) whose cost meets the threshold.
pub fn iterations_to(
    costs: &[f64],
    reference: f64,
    threshold: f64,
    mode: ThresholdMode,
    loads: &LoadProfile,
) -> Option<usize> {
    (1..costs.len()).find(|&t| mode.reached(costs[t], reference, threshold, loads))
}

/// One generated instance of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub repetition: usize,
    pub scenario: ScenarioSpec,
}

fn build_cells(
    master: u64,
    sizes: &[usize],
    topologies: &[TopologyKind],
    speeds: &[SpeedKind],
    loads: &[LoadKind],
    repetitions: usize,
) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &m in sizes {
        for topology in topologies {
            for &speed in speeds {
                for &load in loads {
                    for repetition in 0..repetitions {
                        let index = cells.len();
                        cells.push(Cell {
                            index,
                            repetition,
                            scenario: ScenarioSpec {
                                m,
                                topology: topology.clone(),
                                speeds: speed,
                                loads: load,
                                seed: cell_seed(master, index),
                            },
                        });
                    }
                }
            }
        }
    }
    cells
}

fn load_grid(means: &[f64], uniform: bool, exponential: bool, peak: Option<f64>) -> Vec<LoadKind> {
    let mut loads = Vec::new();
    if uniform {
        loads.extend(means.iter().map(|&mean| LoadKind::Uniform { mean }));
    }
    if exponential {
        loads.extend(means.iter().map(|&mean| LoadKind::Exponential { mean }));
    }
    loads.extend(peak.map(|total| LoadKind::Peak { total }));
    loads
}

/// Iterations needed to reach each threshold, over sizes × topologies ×
/// load distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceGrid {
    pub sizes: Vec<usize>,
    pub topologies: Vec<TopologyKind>,
    pub speeds: SpeedKind,
    pub load_means: Vec<f64>,
    pub uniform: bool,
    pub exponential: bool,
    pub peak_total: Option<f64>,
    pub thresholds: Vec<f64>,
    pub threshold_mode: ThresholdMode,
    pub repetitions: usize,
    /// Cap on the reference run.
    pub max_iterations: usize,
}

impl Default for ConvergenceGrid {
    fn default() -> Self {
        ConvergenceGrid {
            sizes: vec![20, 30, 50, 100],
            topologies: vec![TopologyKind::Homogeneous { c: 20.0 }, TopologyKind::geographic()],
            speeds: SpeedKind::Uniform { lo: 1.0, hi: 5.0 },
            load_means: vec![10.0, 20.0, 50.0, 200.0, 1000.0],
            uniform: true,
            exponential: true,
            peak_total: Some(100_000.0),
            thresholds: vec![0.02, 0.001],
            threshold_mode: ThresholdMode::Relative,
            repetitions: 20,
            max_iterations: 10_000,
        }
    }
}

impl ConvergenceGrid {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.topologies.is_empty() || self.thresholds.is_empty() {
            return Err(Error::InvalidSettings(
                "grid needs sizes, topologies and thresholds".into(),
            ));
        }
        if self.repetitions == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidSettings(
                "repetitions and max_iterations must be positive".into(),
            ));
        }
        if self.thresholds.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::InvalidSettings("thresholds must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn loads(&self) -> Vec<LoadKind> {
        load_grid(&self.load_means, self.uniform, self.exponential, self.peak_total)
    }

    pub fn cells(&self, master: u64) -> Vec<Cell> {
        build_cells(
            master,
            &self.sizes,
            &self.topologies,
            &[self.speeds],
            &self.loads(),
            self.repetitions,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub cell: usize,
    pub seed: u64,
    pub m: usize,
    pub topology: String,
    pub load: String,
    pub load_parameter: f64,
    pub repetition: usize,
    pub thresholds: Vec<f64>,
    /// Iterations to each threshold; `None` if the reference run ended first.
    pub iterations: Vec<Option<usize>>,
    pub reference_cost: f64,
    pub reference_iterations: usize,
    /// Cost before the first iteration and after each one.
    pub trajectory: Vec<f64>,
    pub wall_ms: f64,
}

/// Runs the balancer to its fixed point; the final cost serves as the
/// reference optimum and the trajectory gives the iterations to each
/// threshold.
pub fn run_convergence_cell(grid: &ConvergenceGrid, cell: &Cell) -> Result<ConvergenceRecord> {
    let start = Instant::now();
    let spec = &cell.scenario;
    let (topo, loads) = generate(spec)?;
    let settings = MineSettings {
        max_iterations: grid.max_iterations,
        ..Default::default()
    };
    let run = run_to_fixpoint(&topo, &loads, &settings, spec.seed)?;
    let trajectory = run.costs();
    let reference = run.final_cost();
    let iterations = grid
        .thresholds
        .iter()
        .map(|&t| iterations_to(&trajectory, reference, t, grid.threshold_mode, &loads))
        .collect();
    Ok(ConvergenceRecord {
        cell: cell.index,
        seed: spec.seed,
        m: spec.m,
        topology: topology_label(&spec.topology),
        load: spec.loads.label().into(),
        load_parameter: load_parameter(&spec.loads),
        repetition: cell.repetition,
        thresholds: grid.thresholds.clone(),
        iterations,
        reference_cost: reference,
        reference_iterations: run.reports.len(),
        trajectory,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn run_convergence(grid: &ConvergenceGrid, master: u64, exec: Execution) -> Result<Vec<ConvergenceRecord>> {
    grid.validate()?;
    run_cells(&grid.cells(master), exec, |cell| run_convergence_cell(grid, cell))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub m: usize,
    pub topology: String,
    pub load: String,
    pub threshold: f64,
    pub iterations: Summary,
    /// Cells whose reference run ended before the threshold was met.
    pub unreached: usize,
}

/// Table rows grouped by size, topology, distribution and threshold.
pub fn convergence_table(records: &[ConvergenceRecord]) -> Vec<ConvergenceRow> {
    // (m, topology, load, threshold index) -> (iterations, unreached)
    type Groups = BTreeMap<(usize, String, String, usize), (Vec<f64>, usize)>;
    let mut groups = Groups::new();
    for r in records {
        for (k, it) in r.iterations.iter().enumerate() {
            let entry = groups.entry((r.m, r.topology.clone(), r.load.clone(), k)).or_default();
            match it {
                Some(i) => entry.0.push(*i as f64),
                None => entry.1 += 1,
            }
        }
    }
    groups
        .into_iter()
        .map(|((m, topology, load, k), (values, unreached))| ConvergenceRow {
            m,
            threshold: records.iter().find(|r| r.m == m).map_or(f64::NAN, |r| r.thresholds[k]),
            topology,
            load,
            iterations: summarize(&values),
            unreached,
        })
        .collect()
}

/// Paired runs with and without periodic negative-cycle removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CyclesGrid {
    pub grid: ConvergenceGrid,
    pub threshold: f64,
    /// Removal period for the cleaned runs.
    pub every: usize,
}

impl Default for CyclesGrid {
    fn default() -> Self {
        CyclesGrid {
            grid: ConvergenceGrid::default(),
            threshold: 0.02,
            every: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclesRecord {
    pub cell: usize,
    pub seed: u64,
    pub m: usize,
    pub topology: String,
    pub load: String,
    pub load_parameter: f64,
    pub plain_iterations: Option<usize>,
    pub cleaned_iterations: Option<usize>,
    pub identical: bool,
    pub plain_monotone: bool,
    pub cleaned_monotone: bool,
    pub plain_trajectory: Vec<f64>,
    pub cleaned_trajectory: Vec<f64>,
}

pub fn run_cycles_cell(grid: &CyclesGrid, cell: &Cell) -> Result<CyclesRecord> {
    let spec = &cell.scenario;
    let (topo, loads) = generate(spec)?;
    let long = MineSettings {
        max_iterations: grid.grid.max_iterations,
        ..Default::default()
    };
    let reference = run_to_fixpoint(&topo, &loads, &long, spec.seed)?.final_cost();
    let run = |every: Option<usize>| -> Result<(Option<usize>, Vec<f64>)> {
        let settings = MineSettings {
            threshold: grid.threshold,
            threshold_mode: grid.grid.threshold_mode,
            max_iterations: grid.grid.max_iterations,
            cycle_removal_every: every,
            ..Default::default()
        };
        match run_mine(&topo, &loads, &settings, Some(reference), spec.seed) {
            Ok(run) => Ok((Some(run.iterations), run.costs())),
            Err(Error::ThresholdNotReached { costs, .. }) => Ok((None, costs)),
            Err(e) => Err(e),
        }
    };
    let (plain_iterations, plain_trajectory) = run(None)?;
    let (cleaned_iterations, cleaned_trajectory) = run(Some(grid.every))?;
    Ok(CyclesRecord {
        cell: cell.index,
        seed: spec.seed,
        m: spec.m,
        topology: topology_label(&spec.topology),
        load: spec.loads.label().into(),
        load_parameter: load_parameter(&spec.loads),
        identical: plain_iterations == cleaned_iterations,
        plain_monotone: is_monotone(&plain_trajectory),
        cleaned_monotone: is_monotone(&cleaned_trajectory),
        plain_iterations,
        cleaned_iterations,
        plain_trajectory,
        cleaned_trajectory,
    })
}

pub fn run_cycles(grid: &CyclesGrid, master: u64, exec: Execution) -> Result<Vec<CyclesRecord>> {
    grid.grid.validate()?;
    if grid.every == 0 {
        return Err(Error::InvalidSettings("cycle removal period must be positive".into()));
    }
    run_cells(&grid.grid.cells(master), exec, |cell| run_cycles_cell(grid, cell))
        .into_iter()
        .collect()
}

/// Price-of-anarchy grid: speeds × average loads × topologies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoaGrid {
    pub sizes: Vec<usize>,
    pub speeds: Vec<SpeedKind>,
    pub topologies: Vec<TopologyKind>,
    pub load_means: Vec<f64>,
    pub uniform: bool,
    pub exponential: bool,
    pub repetitions: usize,
    pub nash: NashSettings,
    pub optimum: OptimumSource,
    pub solver: SolverSettings,
}

impl Default for PoaGrid {
    fn default() -> Self {
        PoaGrid {
            sizes: vec![20, 50],
            speeds: vec![SpeedKind::Constant { s: 1.0 }, SpeedKind::Uniform { lo: 1.0, hi: 5.0 }],
            topologies: vec![TopologyKind::Homogeneous { c: 20.0 }, TopologyKind::geographic()],
            load_means: vec![10.0, 20.0, 50.0, 200.0, 1000.0],
            uniform: true,
            exponential: true,
            repetitions: 5,
            nash: NashSettings::default(),
            optimum: OptimumSource::Balancer,
            solver: SolverSettings::default(),
        }
    }
}

impl PoaGrid {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.speeds.is_empty() || self.topologies.is_empty() || self.load_means.is_empty() {
            return Err(Error::InvalidSettings(
                "grid needs sizes, speeds, topologies and load means".into(),
            ));
        }
        if !(self.uniform || self.exponential) {
            return Err(Error::InvalidSettings("enable at least one load distribution".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidSettings("repetitions must be positive".into()));
        }
        self.nash.validate()
    }

    pub fn cells(&self, master: u64) -> Vec<Cell> {
        let loads = load_grid(&self.load_means, self.uniform, self.exponential, None);
        build_cells(
            master,
            &self.sizes,
            &self.topologies,
            &self.speeds,
            &loads,
            self.repetitions,
        )
    }
}

/// Average-load bucket used to group ratios.
pub fn load_bucket(mean: f64) -> &'static str {
    if mean <= 30.0 {
        "l_av<=30"
    } else if mean < 200.0 {
        "30<l_av<200"
    } else {
        "l_av>=200"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoaRecord {
    pub cell: usize,
    pub seed: u64,
    pub m: usize,
    pub speeds: String,
    pub topology: String,
    pub load: String,
    pub load_parameter: f64,
    pub bucket: String,
    pub nash_cost: f64,
    pub optimal_cost: f64,
    pub ratio: f64,
    pub rounds: usize,
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
    pub wall_ms: f64,
}

pub fn run_poa_cell(grid: &PoaGrid, cell: &Cell) -> Result<PoaRecord> {
    let start = Instant::now();
    let spec = &cell.scenario;
    let (topo, loads) = generate(spec)?;
    let report = price_of_anarchy(&topo, &loads, &grid.nash, grid.optimum, &grid.solver, spec.seed)?;
    let param = load_parameter(&spec.loads);
    Ok(PoaRecord {
        cell: cell.index,
        seed: spec.seed,
        m: spec.m,
        speeds: speed_label(&spec.speeds),
        topology: topology_label(&spec.topology),
        load: spec.loads.label().into(),
        load_parameter: param,
        bucket: load_bucket(param).into(),
        nash_cost: report.nash_cost,
        optimal_cost: report.optimal_cost,
        ratio: report.ratio,
        rounds: report.rounds,
        lower_bound: report.homogeneous_bounds.map(|b| b.0),
        upper_bound: report.homogeneous_bounds.map(|b| b.1),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn run_poa(grid: &PoaGrid, master: u64, exec: Execution) -> Result<Vec<PoaRecord>> {
    grid.validate()?;
    run_cells(&grid.cells(master), exec, |cell| run_poa_cell(grid, cell))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoaRow {
    pub speeds: String,
    pub bucket: String,
    pub topology: String,
    pub ratio: Summary,
}

pub fn poa_table(records: &[PoaRecord]) -> Vec<PoaRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.speeds.clone(), r.bucket.clone(), r.topology.clone()))
            .or_default()
            .push(r.ratio);
    }
    groups
        .into_iter()
        .map(|((speeds, bucket, topology), ratios)| PoaRow {
            speeds,
            bucket,
            topology,
            ratio: summarize(&ratios),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> ConvergenceGrid {
        ConvergenceGrid {
            sizes: vec![6],
            topologies: vec![TopologyKind::Homogeneous { c: 20.0 }],
            load_means: vec![50.0],
            exponential: false,
            repetitions: 2,
            ..Default::default()
        }
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[1.0, 2.0, 3.0]);
        assert_eq!(s.count, 3);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.max, 3.0);
        assert!((s.stdev - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(summarize(&[]).mean.is_nan());
    }

    #[test]
    fn cells_get_consecutive_seeds() {
        let cells = small_grid().cells(100);
        assert_eq!(cells.len(), 4);
        for (i, c) in cells.iter().enumerate() {
            assert_eq!(c.index, i);
            assert_eq!(c.scenario.seed, 100 + i as u64);
        }
    }

    #[test]
    fn parallelism_does_not_change_results() {
        let grid = small_grid();
        let strip = |mut v: Vec<ConvergenceRecord>| {
            v.iter_mut().for_each(|r| r.wall_ms = 0.0);
            v
        };
        let seq = strip(run_convergence(&grid, 7, Execution::Sequential).unwrap());
        let par = strip(run_convergence(&grid, 7, Execution::Parallel).unwrap());
        assert_eq!(seq, par);
        for r in &seq {
            assert!(is_monotone(&r.trajectory));
            assert!(r.iterations.iter().all(Option::is_some));
            // Tighter thresholds never need fewer iterations.
            assert!(r.iterations[0] <= r.iterations[1]);
        }
        let table = convergence_table(&seq);
        assert_eq!(table.len(), 4);
        assert!(table.iter().all(|row| row.iterations.count == 2));
    }

    #[test]
    fn iterations_to_first_hit() {
        let loads = LoadProfile::new(vec![1.0, 1.0]).unwrap();
        let costs = [10.0, 5.0, 1.05, 1.0];
        assert_eq!(
            iterations_to(&costs, 1.0, 0.1, ThresholdMode::Relative, &loads),
            Some(2)
        );
        assert_eq!(
            iterations_to(&costs, 1.0, 0.0, ThresholdMode::Relative, &loads),
            Some(3)
        );
        assert_eq!(iterations_to(&costs, 0.5, 0.0, ThresholdMode::Relative, &loads), None);
        // The starting state never counts.
        assert_eq!(
            iterations_to(&[1.0, 1.0], 1.0, 0.1, ThresholdMode::Relative, &loads),
            Some(1)
        );
    }

    #[test]
    fn cycles_pairs_run() {
        let grid = CyclesGrid {
            grid: small_grid(),
            ..Default::default()
        };
        let records = run_cycles(&grid, 3, Execution::Sequential).unwrap();
        assert_eq!(records.len(), 4);
        assert!(records.iter().all(|r| r.plain_monotone && r.cleaned_monotone));
    }

    #[test]
    fn poa_grid_runs_and_groups() {
        let grid = PoaGrid {
            sizes: vec![5],
            speeds: vec![SpeedKind::Constant { s: 1.0 }],
            topologies: vec![TopologyKind::Homogeneous { c: 20.0 }],
            load_means: vec![20.0, 500.0],
            exponential: false,
            repetitions: 1,
            ..Default::default()
        };
        let records = run_poa(&grid, 11, Execution::Sequential).unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            assert!(r.ratio >= 1.0 - 1e-9, "{r:?}");
            assert!(r.lower_bound.is_some());
        }
        let table = poa_table(&records);
        assert_eq!(table.len(), 2);
    }
}
