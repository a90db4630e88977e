//! Reference optimum: projected gradient descent over a product of
//! (optionally capped) simplices, and an exhaustive grid oracle for tiny
//! instances.
//!
//! The solver works in request space (`r_ij = n_i rho_ij`). The gradient of
//! the total cost there is `g_ij = l_j / s_j + c_ij`, and the exact change of
//! the cost along a step `d` is `g . d + sum_j (sum_i d_ij)^2 / (2 s_j)`, so
//! the line search never compares two nearly equal large numbers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{server_loads, total_cost, LoadProfile, RelayState, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// `1 / L` with `L` the largest eigenvalue of the Hessian.
    Fixed,
    /// `2 / (L sqrt(k + 1))`.
    Diminishing,
    /// Armijo backtracking starting from twice the previous accepted step.
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub step_rule: StepRule,
    /// Bound on the first-order residual, measured on derivatives with respect to `rho`.
    pub kkt_tolerance: f64,
    /// Grid points per simplex edge, used by [`brute_force_oracle`].
    pub grid_resolution: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 200_000,
            step_rule: StepRule::Backtracking,
            kkt_tolerance: 1e-7,
            grid_resolution: 201,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidSettings("max_iterations must be positive".into()));
        }
        if !(self.kkt_tolerance > 0.0) {
            return Err(Error::InvalidSettings("kkt_tolerance must be positive".into()));
        }
        if self.grid_resolution < 2 {
            return Err(Error::InvalidSettings("grid_resolution must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CentralSolution {
    pub state: RelayState,
    pub cost: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Cost after each iteration, starting with the initial state.
    pub costs: Vec<f64>,
}

/// Euclidean projection of `v` onto `{x >= 0, sum x = total}` (sort based).
pub fn project_simplex(v: &[f64], total: f64) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = (sorted[0] - total).max(f64::NEG_INFINITY);
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - total) / (k + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// Euclidean projection of `v` onto `{0 <= x <= cap, sum x = total}`.
///
/// Requires `total <= cap * v.len()`. Falls back to [`project_simplex`] when
/// the cap cannot bind.
pub fn project_capped_simplex(v: &[f64], total: f64, cap: f64) -> Vec<f64> {
    let n = v.len();
    if n == 0 {
        return Vec::new();
    }
    if cap >= total {
        return project_simplex(v, total);
    }
    debug_assert!(total <= cap * n as f64 * (1.0 + 1e-12));
    // sum_j clamp(v_j - tau, 0, cap) is piecewise linear and nonincreasing in
    // tau, with breakpoints at v_j and v_j - cap.
    let mut breaks: Vec<f64> = v.iter().flat_map(|&x| [x, x - cap]).collect();
    breaks.sort_by(|a, b| a.total_cmp(b));
    let mass = |tau: f64| -> f64 { v.iter().map(|x| (x - tau).clamp(0.0, cap)).sum() };
    // Largest breakpoint with mass >= total, then solve linearly up to the next.
    let mut lo = breaks[0];
    let mut hi = *breaks.last().unwrap();
    let idx = breaks.partition_point(|&t| mass(t) >= total);
    if idx > 0 {
        lo = breaks[idx - 1];
    }
    if idx < breaks.len() {
        hi = breaks[idx];
    }
    let m_lo = mass(lo);
    let m_hi = mass(hi);
    let tau = if m_lo - m_hi > 0.0 {
        lo + (m_lo - total) / (m_lo - m_hi) * (hi - lo)
    } else {
        lo
    };
    let mut x: Vec<f64> = v.iter().map(|y| (y - tau).clamp(0.0, cap)).collect();
    // Snap the residual of the interpolation onto a free coordinate.
    let err = total - x.iter().sum::<f64>();
    if err != 0.0 {
        if let Some(k) = (0..n).find(|&k| x[k] + err > 0.0 && x[k] + err < cap && x[k] > 0.0) {
            x[k] += err;
        }
    }
    x
}

/// Feasible region of one organization's row.
#[derive(Debug, Clone)]
pub(crate) struct RowDomain {
    pub total: f64,
    pub cap: f64,
    pub allowed: Vec<usize>,
}

pub(crate) fn row_domains(topo: &Topology, loads: &LoadProfile, replication: usize) -> Result<Vec<RowDomain>> {
    let m = topo.m();
    if loads.m() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: loads.m(),
        });
    }
    if replication == 0 {
        return Err(Error::InvalidSettings("replication factor must be at least 1".into()));
    }
    (0..m)
        .map(|i| {
            let allowed: Vec<usize> = (0..m).filter(|&j| topo.is_reachable(i, j)).collect();
            let total = loads.get(i);
            if replication > allowed.len() && total > 0.0 {
                return Err(Error::InfeasibleReplication {
                    r: replication,
                    available: allowed.len(),
                });
            }
            Ok(RowDomain {
                total,
                cap: if replication == 1 {
                    f64::INFINITY
                } else {
                    total / replication as f64
                },
                allowed,
            })
        })
        .collect()
}

fn project_row(domain: &RowDomain, target: &[f64]) -> Vec<f64> {
    if domain.cap.is_finite() {
        project_capped_simplex(target, domain.total, domain.cap)
    } else {
        project_simplex(target, domain.total)
    }
}

/// All-local start, projected onto the capped simplex when replication binds.
pub(crate) fn initial_state(topo: &Topology, domains: &[RowDomain]) -> RelayState {
    let m = topo.m();
    let mut state = RelayState::from_raw(m, vec![0.0; m * m]);
    for (i, d) in domains.iter().enumerate() {
        let start: Vec<f64> = d.allowed.iter().map(|&j| if j == i { d.total } else { 0.0 }).collect();
        let x = project_row(d, &start);
        for (&j, v) in d.allowed.iter().zip(x) {
            state.set(i, j, v);
        }
    }
    state
}

fn gradient(topo: &Topology, loads: &[f64], i: usize, j: usize) -> f64 {
    loads[j] / topo.speed(j) + topo.latency(i, j)
}

/// First-order residual with respect to `rho`: for every organization, the
/// largest gap between the derivative at an entry that could shrink and one
/// that could grow.
pub(crate) fn kkt_residual_with(topo: &Topology, state: &RelayState, domains: &[RowDomain]) -> f64 {
    let loads = server_loads(state);
    let mut worst: f64 = 0.0;
    for (i, d) in domains.iter().enumerate() {
        if d.total <= 0.0 {
            continue;
        }
        let eps = 1e-12 * d.total;
        let mut max_shrink = f64::NEG_INFINITY;
        let mut min_grow = f64::INFINITY;
        for &j in &d.allowed {
            let g = gradient(topo, &loads, i, j);
            let r = state.get(i, j);
            if r > eps {
                max_shrink = max_shrink.max(g);
            }
            if r < d.cap - eps {
                min_grow = min_grow.min(g);
            }
        }
        if max_shrink.is_finite() && min_grow.is_finite() {
            worst = worst.max(d.total * (max_shrink - min_grow));
        }
    }
    worst
}

/// First-order residual of `state` for the unconstrained (uncapped) problem.
pub fn kkt_residual(topo: &Topology, loads: &LoadProfile, state: &RelayState) -> Result<f64> {
    let domains = row_domains(topo, loads, 1)?;
    Ok(kkt_residual_with(topo, state, &domains))
}

/// Projected gradient descent from the all-local state.
pub fn solve_central(topo: &Topology, loads: &LoadProfile, settings: &SolverSettings) -> Result<CentralSolution> {
    solve_central_capped(topo, loads, settings, 1)
}

/// Like [`solve_central`] with every fraction capped at `1 / replication`.
pub fn solve_central_capped(
    topo: &Topology,
    loads: &LoadProfile,
    settings: &SolverSettings,
    replication: usize,
) -> Result<CentralSolution> {
    settings.validate()?;
    let domains = row_domains(topo, loads, replication)?;
    let start = initial_state(topo, &domains);
    solve_from(topo, &domains, start, settings)
}

/// Runs the descent from an arbitrary feasible start.
pub fn solve_central_from(
    topo: &Topology,
    loads: &LoadProfile,
    start: RelayState,
    settings: &SolverSettings,
) -> Result<CentralSolution> {
    settings.validate()?;
    start.check_conservation(loads)?;
    start.check_reachability(topo)?;
    let domains = row_domains(topo, loads, 1)?;
    solve_from(topo, &domains, start, settings)
}

fn solve_from(
    topo: &Topology,
    domains: &[RowDomain],
    mut state: RelayState,
    settings: &SolverSettings,
) -> Result<CentralSolution> {
    let m = topo.m();
    let lipschitz = (0..m)
        .map(|j| {
            let owners = domains.iter().filter(|d| d.allowed.contains(&j)).count();
            owners as f64 / topo.speed(j)
        })
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut loads = server_loads(&state);
    let mut cost = total_cost(topo, &state);
    let mut costs = vec![cost];
    let mut step = 1.0 / lipschitz;
    let mut residual = kkt_residual_with(topo, &state, domains);
    let mut candidate = state.clone();

    for iteration in 0..settings.max_iterations {
        if residual <= settings.kkt_tolerance {
            return Ok(CentralSolution {
                state,
                cost,
                iterations: iteration,
                kkt_residual: residual,
                costs,
            });
        }
        let grad: Vec<f64> = (0..m * m)
            .map(|idx| {
                let (i, j) = (idx / m, idx % m);
                if topo.is_reachable(i, j) {
                    gradient(topo, &loads, i, j)
                } else {
                    0.0
                }
            })
            .collect();

        let mut t = match settings.step_rule {
            StepRule::Fixed => 1.0 / lipschitz,
            StepRule::Diminishing => 2.0 / (lipschitz * ((iteration + 1) as f64).sqrt()),
            StepRule::Backtracking => (step * 2.0).max(1.0 / lipschitz),
        };
        let (delta, dl) = loop {
            project_step(&state, &grad, domains, t, &mut candidate);
            let mut dl = vec![0.0; m];
            let mut lin = 0.0;
            let mut norm2 = 0.0;
            for (idx, (new, old)) in candidate.as_slice().iter().zip(state.as_slice()).enumerate() {
                let d = new - old;
                if d != 0.0 {
                    dl[idx % m] += d;
                    lin += grad[idx] * d;
                    norm2 += d * d;
                }
            }
            let quad: f64 = dl.iter().zip(topo.speeds()).map(|(x, s)| x * x / (2.0 * s)).sum();
            let accept = match settings.step_rule {
                StepRule::Backtracking => quad <= norm2 / (2.0 * t) || t <= 1.0 / lipschitz,
                _ => true,
            };
            if accept {
                break (lin + quad, dl);
            }
            t *= 0.5;
        };
        step = t;
        std::mem::swap(&mut state, &mut candidate);
        for (l, d) in loads.iter_mut().zip(&dl) {
            *l += d;
        }
        cost += delta;
        costs.push(cost);
        residual = kkt_residual_with(topo, &state, domains);
        if iteration % 64 == 63 {
            loads = server_loads(&state);
            cost = total_cost(topo, &state);
        }
    }
    Err(Error::NotConverged {
        iterations: settings.max_iterations,
        residual,
        best: Box::new(state),
    })
}

fn project_step(state: &RelayState, grad: &[f64], domains: &[RowDomain], t: f64, out: &mut RelayState) {
    let m = state.m();
    for (i, d) in domains.iter().enumerate() {
        let target: Vec<f64> = d
            .allowed
            .iter()
            .map(|&j| state.get(i, j) - t * grad[i * m + j])
            .collect();
        let x = project_row(d, &target);
        let row = out.row_mut(i);
        row.iter_mut().for_each(|v| *v = 0.0);
        for (&j, v) in d.allowed.iter().zip(x) {
            row[j] = v;
        }
    }
}

/// Result of the grid oracle.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub state: RelayState,
    pub cost: f64,
    /// Upper bound on `cost - optimum`.
    pub error_bound: f64,
    /// Certified lower bound on the optimum, from a duality gap.
    pub lower_bound: f64,
    /// Whether the whole grid was enumerated.
    pub exhaustive: bool,
}

/// Largest instance accepted by [`brute_force_oracle`].
pub const ORACLE_MAX_SERVERS: usize = 3;

/// Grids with at most this many prefix combinations are always enumerated.
const EXHAUSTIVE_LIMIT: usize = 250_000;

/// Grid oracle over `rho_ij in {0, 1/K, ..., 1}` with `K = resolution - 1`.
///
/// Any convex-combination rounding of an optimum onto the grid that keeps the
/// support moves every load by less than `h N`, so the grid minimum lies
/// within `B = sum_j (h N)^2 / (2 s_j)` of the optimum.
///
/// Small grids are enumerated: every row but the last is listed, and for a
/// fixed prefix the last row's cost is separable and convex in its unit
/// counts, so its grid minimizer is exact via greedy unit allocation from a
/// provable lower bound. Larger grids first try a certificate: a grid point
/// found by rounding plus hill climbing is accepted when its cost is within
/// `B` of a duality lower bound. Otherwise the grid is enumerated in full.
pub fn brute_force_oracle(topo: &Topology, loads: &LoadProfile, resolution: usize) -> Result<OracleSolution> {
    brute_force_oracle_with(topo, loads, resolution, Execution::default())
}

pub fn brute_force_oracle_with(
    topo: &Topology,
    loads: &LoadProfile,
    resolution: usize,
    exec: Execution,
) -> Result<OracleSolution> {
    let m = topo.m();
    if loads.m() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: loads.m(),
        });
    }
    if m > ORACLE_MAX_SERVERS {
        return Err(Error::TooLarge {
            what: "brute-force oracle",
            m,
            limit: ORACLE_MAX_SERVERS,
        });
    }
    if resolution < 2 {
        return Err(Error::InvalidSettings("grid_resolution must be at least 2".into()));
    }
    let grid = Grid::new(topo, loads, resolution - 1);
    let error_bound: f64 = topo
        .speeds()
        .iter()
        .map(|s| (grid.h * loads.total()).powi(2) / (2.0 * s))
        .sum();
    let (x_hat, gap) = pairwise_descent(topo, loads, error_bound * 1e-3);
    let lower_bound = total_cost(topo, &x_hat) - gap;

    let combos: usize = grid.prefixes.iter().map(Vec::len).product();
    if combos > EXHAUSTIVE_LIMIT {
        let (cost, choice) = grid.hill_climb(grid.round(&x_hat));
        if cost - lower_bound <= error_bound {
            return grid.finish(loads, choice, error_bound, lower_bound, false);
        }
    }
    let (_, choice) = grid.enumerate(exec);
    grid.finish(loads, choice, error_bound, lower_bound, true)
}

struct Grid<'a> {
    topo: &'a Topology,
    n: Vec<f64>,
    units: usize,
    h: f64,
    prefixes: Vec<Vec<PrefixRow>>,
    allowed: Vec<Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(topo: &'a Topology, loads: &LoadProfile, units: usize) -> Self {
        let m = topo.m();
        let h = 1.0 / units as f64;
        let n = loads.own().to_vec();
        let allowed: Vec<Vec<usize>> = (0..m)
            .map(|i| (0..m).filter(|&j| topo.is_reachable(i, j)).collect())
            .collect();
        let prefixes = (0..m - 1)
            .map(|i| {
                compositions(units, &allowed[i], m)
                    .into_iter()
                    .map(|counts| PrefixRow::new(topo, i, n[i], h, counts))
                    .collect()
            })
            .collect();
        Grid {
            topo,
            n,
            units,
            h,
            prefixes,
            allowed,
        }
    }

    fn last_row(&self) -> LastRow<'_> {
        let last = self.topo.m() - 1;
        LastRow {
            topo: self.topo,
            owner: last,
            unit: self.n[last] * self.h,
            units: self.units,
            allowed: &self.allowed[last],
        }
    }

    /// Best completion of a prefix given as unit counts per row.
    fn complete(&self, rows: &[Vec<usize>]) -> (f64, Vec<usize>) {
        let m = self.topo.m();
        let mut partial = vec![0.0; m];
        let mut lin = 0.0;
        for (i, counts) in rows.iter().enumerate() {
            let p = PrefixRow::new(self.topo, i, self.n[i], self.h, counts.clone());
            for j in 0..m {
                partial[j] += p.loads[j];
            }
            lin += p.linear;
        }
        let (counts, cost) = self.last_row().best(&partial);
        (lin + cost, counts)
    }

    /// Largest-remainder rounding of every prefix row.
    fn round(&self, state: &RelayState) -> Vec<Vec<usize>> {
        let rho = state.fractions();
        (0..self.topo.m() - 1)
            .map(|i| {
                let scaled: Vec<f64> = rho[i].iter().map(|r| r * self.units as f64).collect();
                let mut counts: Vec<usize> = scaled.iter().map(|x| x.floor() as usize).collect();
                let mut rest = self.units.saturating_sub(counts.iter().sum());
                let mut order: Vec<usize> = self.allowed[i].clone();
                order.sort_by(|&a, &b| (scaled[b] - scaled[b].floor()).total_cmp(&(scaled[a] - scaled[a].floor())));
                for &j in order.iter().cycle() {
                    if rest == 0 {
                        break;
                    }
                    counts[j] += 1;
                    rest -= 1;
                }
                counts
            })
            .collect()
    }

    /// First-improvement descent over single-unit moves inside prefix rows.
    fn hill_climb(&self, mut rows: Vec<Vec<usize>>) -> (f64, Vec<usize>) {
        let (mut cost, mut last) = self.complete(&rows);
        'outer: loop {
            for i in 0..rows.len() {
                for &a in &self.allowed[i] {
                    for &b in &self.allowed[i] {
                        if a == b || rows[i][a] == 0 {
                            continue;
                        }
                        rows[i][a] -= 1;
                        rows[i][b] += 1;
                        let (c, l) = self.complete(&rows);
                        if c < cost {
                            cost = c;
                            last = l;
                            continue 'outer;
                        }
                        rows[i][a] += 1;
                        rows[i][b] -= 1;
                    }
                }
            }
            break;
        }
        let mut choice: Vec<usize> = rows.concat();
        choice.extend(last);
        (cost, choice)
    }

    /// Exact grid minimum; the choice lists unit counts row by row.
    fn enumerate(&self, exec: Execution) -> (f64, Vec<usize>) {
        let m = self.topo.m();
        let solver = self.last_row();
        let first_count = self.prefixes.first().map_or(1, |p| p.len());
        let best_per_first = exec::map_indexed(exec, first_count, |f| {
            let mut best: Option<(f64, Vec<usize>)> = None;
            let mut idx = vec![0usize; m - 1];
            if m > 1 {
                idx[0] = f;
            }
            loop {
                let mut partial = vec![0.0; m];
                let mut lin = 0.0;
                for (row, &k) in idx.iter().enumerate() {
                    let p = &self.prefixes[row][k];
                    for j in 0..m {
                        partial[j] += p.loads[j];
                    }
                    lin += p.linear;
                }
                let (counts, last_cost) = solver.best(&partial);
                let total = lin + last_cost;
                if best.as_ref().is_none_or(|(c, _)| total < *c) {
                    let mut choice: Vec<usize> = idx
                        .iter()
                        .enumerate()
                        .flat_map(|(row, &k)| self.prefixes[row][k].counts.clone())
                        .collect();
                    choice.extend(counts);
                    best = Some((total, choice));
                }
                // Advance the prefix odometer, keeping the first digit fixed.
                let mut pos = m.saturating_sub(2);
                loop {
                    if pos == 0 {
                        return best;
                    }
                    idx[pos] += 1;
                    if idx[pos] < self.prefixes[pos].len() {
                        break;
                    }
                    idx[pos] = 0;
                    pos -= 1;
                }
            }
        });
        best_per_first
            .into_iter()
            .flatten()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("grid is never empty")
    }

    fn finish(
        &self,
        loads: &LoadProfile,
        choice: Vec<usize>,
        error_bound: f64,
        lower_bound: f64,
        exhaustive: bool,
    ) -> Result<OracleSolution> {
        let m = self.topo.m();
        let mut rows: Vec<Vec<f64>> = choice
            .chunks(m)
            .enumerate()
            .map(|(i, c)| c.iter().map(|&k| self.n[i] * k as f64 * self.h).collect())
            .collect();
        // Snap rounding drift so rows conserve exactly.
        for (i, row) in rows.iter_mut().enumerate() {
            let drift = self.n[i] - row.iter().sum::<f64>();
            if let Some(j) = (0..m).max_by(|&a, &b| row[a].total_cmp(&row[b])) {
                row[j] += drift;
            }
        }
        let state = RelayState::from_rows(loads, rows)?;
        let cost = total_cost(self.topo, &state);
        Ok(OracleSolution {
            state,
            cost,
            error_bound,
            lower_bound,
            exhaustive,
        })
    }
}

/// Duality gap `sum_i (g_i . r_i - n_i min_j g_ij)`; the optimum is at least
/// `cost - gap` for any feasible state.
pub fn duality_gap(topo: &Topology, state: &RelayState) -> f64 {
    let m = topo.m();
    let loads = server_loads(state);
    (0..m)
        .map(|i| {
            let mut lin = 0.0;
            let mut best = f64::INFINITY;
            let mut own = 0.0;
            for j in 0..m {
                if !topo.is_reachable(i, j) {
                    continue;
                }
                let g = gradient(topo, &loads, i, j);
                let r = state.get(i, j);
                lin += g * r;
                own += r;
                best = best.min(g);
            }
            (lin - own * best).max(0.0)
        })
        .sum()
}

/// Per-row pairwise coordinate descent used only to certify the oracle: shift
/// mass from the worst used entry to the best entry with an exact line search.
fn pairwise_descent(topo: &Topology, loads: &LoadProfile, target_gap: f64) -> (RelayState, f64) {
    let m = topo.m();
    let mut state = RelayState::local(loads);
    let mut l = server_loads(&state);
    let mut gap = duality_gap(topo, &state);
    for sweep in 0..200_000 {
        if gap <= target_gap {
            break;
        }
        for i in 0..m {
            let mut hi = None;
            let mut lo = None;
            for j in (0..m).filter(|&j| topo.is_reachable(i, j)) {
                let g = gradient(topo, &l, i, j);
                if lo.is_none_or(|(_, v)| g < v) {
                    lo = Some((j, g));
                }
                if state.get(i, j) > 0.0 && hi.is_none_or(|(_, v)| g > v) {
                    hi = Some((j, g));
                }
            }
            let (Some((a, ga)), Some((b, gb))) = (hi, lo) else {
                continue;
            };
            if a == b || ga <= gb {
                continue;
            }
            let t = ((ga - gb) / (1.0 / topo.speed(a) + 1.0 / topo.speed(b))).min(state.get(i, a));
            state.set(i, a, state.get(i, a) - t);
            state.set(i, b, state.get(i, b) + t);
            l[a] -= t;
            l[b] += t;
        }
        if sweep % 16 == 15 {
            l = server_loads(&state);
            gap = duality_gap(topo, &state);
        }
    }
    (state, gap)
}

struct PrefixRow {
    counts: Vec<usize>,
    loads: Vec<f64>,
    linear: f64,
}

impl PrefixRow {
    fn new(topo: &Topology, owner: usize, n: f64, h: f64, counts: Vec<usize>) -> Self {
        let loads: Vec<f64> = counts.iter().map(|&k| n * k as f64 * h).collect();
        let linear = loads
            .iter()
            .enumerate()
            .map(|(j, &r)| crate::model::link_cost(r, topo.latency(owner, j)))
            .sum();
        PrefixRow { counts, loads, linear }
    }
}

/// All ways to split `units` over `allowed` positions of an `m`-vector.
fn compositions(units: usize, allowed: &[usize], m: usize) -> Vec<Vec<usize>> {
    fn rec(units: usize, allowed: &[usize], cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        match allowed {
            [] => {}
            [only] => {
                cur[*only] = units;
                out.push(cur.clone());
                cur[*only] = 0;
            }
            [first, rest @ ..] => {
                for k in 0..=units {
                    cur[*first] = k;
                    rec(units - k, rest, cur, out);
                }
                cur[*first] = 0;
            }
        }
    }
    let mut out = Vec::new();
    rec(units, allowed, &mut vec![0; m], &mut out);
    out
}

struct LastRow<'a> {
    topo: &'a Topology,
    owner: usize,
    unit: f64,
    units: usize,
    allowed: &'a [usize],
}

impl LastRow<'_> {
    fn piece(&self, partial: &[f64], j: usize, k: usize) -> f64 {
        let r = self.unit * k as f64;
        let l = partial[j] + r;
        l * l / (2.0 * self.topo.speed(j)) + crate::model::link_cost(r, self.topo.latency(self.owner, j))
    }

    /// Exact grid minimizer of the last row given the other rows' loads.
    /// Returns the unit counts and the cost of the whole state (processing of
    /// every server plus the last row's communication).
    fn best(&self, partial: &[f64]) -> (Vec<usize>, f64) {
        let m = partial.len();
        let mut counts = vec![0usize; m];
        if self.unit <= 0.0 {
            counts[self.owner] = self.units;
        } else {
            // Continuous optimum in unit coordinates: the marginal
            // (a_j + u x) / s_j + c_j is equal across the active servers.
            let u = self.unit;
            let level_of = |j: usize| partial[j] / self.topo.speed(j) + self.topo.latency(self.owner, j);
            let mut order: Vec<usize> = self.allowed.to_vec();
            order.sort_by(|&a, &b| level_of(a).total_cmp(&level_of(b)));
            // x_j = s_j / u * (mu - level_j).
            let mut weight = 0.0;
            let mut weighted_level = 0.0;
            let mut mu = 0.0;
            for (p, &j) in order.iter().enumerate() {
                let w = self.topo.speed(j) / u;
                weight += w;
                weighted_level += w * level_of(j);
                mu = (self.units as f64 + weighted_level) / weight;
                let next = order.get(p + 1).map(|&k| level_of(k));
                if next.is_none_or(|lv| mu <= lv) {
                    break;
                }
            }
            let slack = (m as f64 - 1.0) / 2.0;
            let mut assigned = 0usize;
            for &j in self.allowed {
                let x = (self.topo.speed(j) / u * (mu - level_of(j))).max(0.0);
                let lb = (x - slack - 1e-7).floor().max(0.0) as usize;
                counts[j] = lb;
                assigned += lb;
            }
            debug_assert!(assigned <= self.units);
            // Greedy unit allocation is exact for separable convex costs once
            // started below an optimum.
            for _ in assigned..self.units {
                let mut best_j = self.allowed[0];
                let mut best_gain = f64::INFINITY;
                for &j in self.allowed {
                    let gain = self.piece(partial, j, counts[j] + 1) - self.piece(partial, j, counts[j]);
                    if gain < best_gain {
                        best_gain = gain;
                        best_j = j;
                    }
                }
                counts[best_j] += 1;
            }
        }
        let cost = (0..m).map(|j| self.piece(partial, j, counts[j])).sum();
        (counts, cost)
    }
}
