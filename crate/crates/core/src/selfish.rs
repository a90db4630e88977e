//! Selfish organizations: best responses, best-response dynamics and the
//! price of anarchy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::central::{solve_central, SolverSettings};
use crate::error::{Error, Result};
use crate::mine::reference_cost;
use crate::model::{server_loads, total_cost, LoadProfile, RelayState, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NashSettings {
    /// A row counts as settled when it moves less than this fraction of its volume.
    pub change_threshold: f64,
    pub consecutive_rounds: usize,
    pub max_rounds: usize,
}

impl Default for NashSettings {
    fn default() -> Self {
        NashSettings {
            change_threshold: 0.01,
            consecutive_rounds: 2,
            max_rounds: 10_000,
        }
    }
}

impl NashSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.change_threshold > 0.0 && self.change_threshold < 1.0) {
            return Err(Error::InvalidSettings("change_threshold must lie in (0, 1)".into()));
        }
        if self.consecutive_rounds == 0 || self.max_rounds == 0 {
            return Err(Error::InvalidSettings(
                "consecutive_rounds and max_rounds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Loads of every server without organization `i`'s own contribution.
fn foreign_loads(state: &RelayState, i: usize) -> Vec<f64> {
    server_loads(state)
        .iter()
        .zip(state.row(i))
        .map(|(l, r)| (l - r).max(0.0))
        .collect()
}

/// Row minimizing organization `i`'s own cost with every other row fixed.
///
/// Allocations rise to a common marginal level `lambda`:
/// `x_j = max(0, s_j (lambda - c_ij) - a_j / 2)` with `a_j` the foreign load
/// on `j`. The level is found exactly from the sorted breakpoints.
pub fn best_response(state: &RelayState, i: usize, topo: &Topology) -> Result<Vec<f64>> {
    let m = topo.m();
    if i >= m {
        return Err(Error::IndexOutOfRange { index: i, m });
    }
    let n: f64 = state.row(i).iter().sum();
    let foreign = foreign_loads(state, i);
    Ok(water_fill(topo, i, &foreign, n))
}

fn breakpoint(topo: &Topology, i: usize, foreign: &[f64], j: usize) -> f64 {
    topo.latency(i, j) + foreign[j] / (2.0 * topo.speed(j))
}

fn water_fill(topo: &Topology, i: usize, foreign: &[f64], n: f64) -> Vec<f64> {
    let m = topo.m();
    let mut x = vec![0.0; m];
    if n <= 0.0 {
        return x;
    }
    let mut order: Vec<usize> = (0..m).filter(|&j| topo.is_reachable(i, j)).collect();
    order.sort_by(|&a, &b| {
        breakpoint(topo, i, foreign, a)
            .total_cmp(&breakpoint(topo, i, foreign, b))
            .then(a.cmp(&b))
    });
    let mut weight = 0.0;
    let mut weighted = 0.0;
    let mut level = 0.0;
    let mut active = 0;
    for (p, &j) in order.iter().enumerate() {
        let s = topo.speed(j);
        weight += s;
        weighted += s * breakpoint(topo, i, foreign, j);
        level = (n + weighted) / weight;
        active = p + 1;
        if order
            .get(p + 1)
            .is_none_or(|&k| level <= breakpoint(topo, i, foreign, k))
        {
            break;
        }
    }
    for &j in &order[..active] {
        x[j] = (topo.speed(j) * (level - breakpoint(topo, i, foreign, j))).max(0.0);
    }
    // Put the rounding residue on the largest entry.
    let drift = n - x.iter().sum::<f64>();
    if let Some(j) = (0..m).max_by(|&a, &b| x[a].total_cmp(&x[b])) {
        x[j] = (x[j] + drift).max(0.0);
    }
    x
}

/// Organization `i`'s cost if it switched to `row`.
pub fn org_cost_of_row(state: &RelayState, i: usize, row: &[f64], topo: &Topology) -> f64 {
    let foreign = foreign_loads(state, i);
    row.iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(j, &x)| (topo.latency(i, j) + (foreign[j] + x) / (2.0 * topo.speed(j))) * x)
        .sum()
}

#[derive(Debug, Clone)]
pub struct NashOutcome {
    pub state: RelayState,
    pub rounds: usize,
    /// Largest relative row change in every round.
    pub max_change_trace: Vec<f64>,
}

/// Sequential best responses in a fresh random order each round, until every
/// row settles for the configured number of consecutive rounds.
pub fn nash_dynamics(topo: &Topology, loads: &LoadProfile, settings: &NashSettings, seed: u64) -> Result<NashOutcome> {
    settings.validate()?;
    let m = topo.m();
    if loads.m() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: loads.m(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = RelayState::local(loads);
    let mut l = server_loads(&state);
    let mut order: Vec<usize> = (0..m).collect();
    let mut trace = Vec::new();
    let mut settled = 0;
    for round in 1..=settings.max_rounds {
        order.shuffle(&mut rng);
        let mut worst: f64 = 0.0;
        let mut all_settled = true;
        for &i in &order {
            let n = loads.get(i);
            if n <= 0.0 {
                continue;
            }
            let foreign: Vec<f64> = l.iter().zip(state.row(i)).map(|(a, r)| (a - r).max(0.0)).collect();
            let row = water_fill(topo, i, &foreign, n);
            let change: f64 = row.iter().zip(state.row(i)).map(|(a, b)| (a - b).abs()).sum();
            worst = worst.max(change / n);
            if change >= settings.change_threshold * n {
                all_settled = false;
            }
            for (j, &x) in row.iter().enumerate() {
                l[j] = foreign[j] + x;
            }
            state.row_mut(i).copy_from_slice(&row);
        }
        trace.push(worst);
        settled = if all_settled { settled + 1 } else { 0 };
        if settled >= settings.consecutive_rounds {
            return Ok(NashOutcome {
                state,
                rounds: round,
                max_change_trace: trace,
            });
        }
    }
    Err(Error::NashNotConverged {
        rounds: settings.max_rounds,
        state: Box::new(state),
        max_change_trace: trace,
    })
}

/// Closed-form bounds on the price of anarchy when every server has speed
/// `s`, every link latency `c`, and the average load is `l_av`.
pub fn homogeneous_poa_bounds(c: f64, s: f64, l_av: f64) -> (f64, f64) {
    let x = c * s / l_av;
    (1.0 + 2.0 * x - 4.0 * x * x, 1.0 + 2.0 * x + x * x)
}

/// Where the optimal cost comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimumSource {
    /// Long balancer run with the given seed.
    #[default]
    Balancer,
    Central,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoaReport {
    pub nash_cost: f64,
    pub optimal_cost: f64,
    pub ratio: f64,
    pub rounds: usize,
    pub homogeneous_bounds: Option<(f64, f64)>,
}

/// `(c, s)` when every speed and every off-diagonal latency is the same.
pub fn homogeneous_parameters(topo: &Topology) -> Option<(f64, f64)> {
    let m = topo.m();
    let s = topo.speed(0);
    if topo.speeds().iter().any(|&x| x != s) {
        return None;
    }
    if m == 1 {
        return Some((0.0, s));
    }
    let c = topo.latency(0, 1);
    let uniform = (0..m).all(|i| (0..m).all(|j| i == j || topo.latency(i, j) == c));
    uniform.then_some((c, s))
}

pub fn price_of_anarchy(
    topo: &Topology,
    loads: &LoadProfile,
    nash: &NashSettings,
    source: OptimumSource,
    solver: &SolverSettings,
    seed: u64,
) -> Result<PoaReport> {
    let outcome = nash_dynamics(topo, loads, nash, seed)?;
    let nash_cost = total_cost(topo, &outcome.state);
    let optimal_cost = match source {
        OptimumSource::Balancer => reference_cost(topo, loads, seed)?,
        OptimumSource::Central => solve_central(topo, loads, solver)?.cost,
    };
    let ratio = if optimal_cost > 0.0 {
        nash_cost / optimal_cost
    } else {
        1.0
    };
    let homogeneous_bounds = match homogeneous_parameters(topo) {
        Some((c, s)) if loads.average() > 0.0 => Some(homogeneous_poa_bounds(c, s, loads.average())),
        _ => None,
    };
    Ok(PoaReport {
        nash_cost,
        optimal_cost,
        ratio,
        rounds: outcome.rounds,
        homogeneous_bounds,
    })
}
