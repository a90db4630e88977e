//! Distributed Min-Error balancing: every server in turn picks the partner
//! whose optimal pairwise rebalance lowers the total cost the most.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::central::{initial_state, row_domains};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{link_cost, total_cost, LoadProfile, RelayState, Topology};

/// Improvements at or below this fraction of the pair's cost count as zero.
pub const IMPROVEMENT_EPS: f64 = 1e-12;

/// Optimal amount of organization `k`'s requests to move from `i` to `j`,
/// given everything else fixed.
pub fn delta_r(s_i: f64, s_j: f64, l_i: f64, l_j: f64, c_ki: f64, c_kj: f64, available: f64) -> f64 {
    let raw = ((s_j * l_i - s_i * l_j) - s_i * s_j * (c_kj - c_ki)) / (s_i + s_j);
    if raw.is_nan() {
        return 0.0;
    }
    raw.min(available).max(0.0)
}

/// Result of one optimal pairwise rebalance.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeOutcome {
    pub i: usize,
    pub j: usize,
    /// `r_ki` for every organization `k` after the exchange.
    pub after_i: Vec<f64>,
    /// `r_kj` for every organization `k` after the exchange.
    pub after_j: Vec<f64>,
    /// Requests that changed server.
    pub transferred_total: f64,
    /// Change of the total cost (never positive).
    pub cost_delta: f64,
}

impl ExchangeOutcome {
    pub fn apply(&self, state: &mut RelayState) {
        for k in 0..state.m() {
            state.set(k, self.i, self.after_i[k]);
            state.set(k, self.j, self.after_j[k]);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub total_cost: f64,
    /// Partner chosen by each server, `None` when it skipped its turn.
    pub partners: Vec<Option<usize>>,
    pub moved: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// `(cost - reference) / reference <= threshold`.
    #[default]
    Relative,
    /// `cost - reference <= threshold * average own load`.
    AvgLoad,
}

impl ThresholdMode {
    pub fn reached(self, cost: f64, reference: f64, threshold: f64, loads: &LoadProfile) -> bool {
        let gap = cost - reference;
        match self {
            ThresholdMode::Relative => gap <= threshold * reference.abs(),
            ThresholdMode::AvgLoad => gap <= threshold * loads.average(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineSettings {
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub max_iterations: usize,
    /// Run negative-cycle removal after every `k`-th iteration.
    pub cycle_removal_every: Option<usize>,
    /// Every fraction is capped at `1 / replication`.
    pub replication: usize,
    pub execution: Execution,
}

impl Default for MineSettings {
    fn default() -> Self {
        MineSettings {
            threshold: 0.02,
            threshold_mode: ThresholdMode::Relative,
            max_iterations: 1000,
            cycle_removal_every: None,
            replication: 1,
            execution: Execution::Sequential,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MineRun {
    pub state: RelayState,
    pub initial_cost: f64,
    pub reports: Vec<IterationReport>,
    /// Iterations needed to reach the threshold.
    pub iterations: usize,
}

impl MineRun {
    /// Initial cost followed by the cost after every iteration.
    pub fn costs(&self) -> Vec<f64> {
        std::iter::once(self.initial_cost)
            .chain(self.reports.iter().map(|r| r.total_cost))
            .collect()
    }

    pub fn final_cost(&self) -> f64 {
        self.reports.last().map_or(self.initial_cost, |r| r.total_cost)
    }
}

struct PairPlan {
    /// `(k, new r_ki, new r_kj)` for every organization present on the pair.
    moves: Vec<(usize, f64, f64)>,
    improvement: f64,
    transferred: f64,
    before: f64,
}

impl PairPlan {
    fn empty() -> Self {
        PairPlan {
            moves: Vec::new(),
            improvement: 0.0,
            transferred: 0.0,
            before: 0.0,
        }
    }

    /// Whether the exchange beats rounding noise.
    fn worthwhile(&self) -> bool {
        self.improvement > IMPROVEMENT_EPS * self.before
    }
}

/// Pools the pair's requests on `i`, then hands them to `j` organization by
/// organization in order of how much cheaper `j` is for them.
fn plan_pair(
    topo: &Topology,
    state: &RelayState,
    on_i: &[usize],
    on_j: &[usize],
    i: usize,
    j: usize,
    caps: Option<&[f64]>,
) -> PairPlan {
    struct Entry {
        key: f64,
        k: usize,
        old_i: f64,
        old_j: f64,
    }
    let mut pool: Vec<Entry> = Vec::with_capacity(on_i.len() + on_j.len());
    for &k in on_i {
        let r = state.get(k, i);
        if r > 0.0 {
            pool.push(Entry {
                key: 0.0,
                k,
                old_i: r,
                old_j: state.get(k, j),
            });
        }
    }
    for &k in on_j {
        let r = state.get(k, j);
        if r > 0.0 && state.get(k, i) == 0.0 {
            pool.push(Entry {
                key: 0.0,
                k,
                old_i: 0.0,
                old_j: r,
            });
        }
    }
    if pool.is_empty() {
        return PairPlan::empty();
    }
    for e in &mut pool {
        e.key = topo.latency(e.k, j) - topo.latency(e.k, i);
    }
    pool.sort_by(|a, b| a.key.total_cmp(&b.key).then(a.k.cmp(&b.k)));

    let (s_i, s_j) = (topo.speed(i), topo.speed(j));
    let mut before_i = 0.0;
    let mut before_j = 0.0;
    let mut before_link = 0.0;
    for e in &pool {
        before_i += e.old_i;
        before_j += e.old_j;
        before_link += link_cost(e.old_i, topo.latency(e.k, i)) + link_cost(e.old_j, topo.latency(e.k, j));
    }
    let before = before_i * before_i / (2.0 * s_i) + before_j * before_j / (2.0 * s_j) + before_link;

    let bounds: Vec<(f64, f64, f64)> = pool
        .iter()
        .map(|e| {
            let p = e.old_i + e.old_j;
            match caps {
                Some(c) => ((p - c[e.k]).max(0.0), p.min(c[e.k]), p),
                None => (0.0, p, p),
            }
        })
        .collect();
    let mut l_i: f64 = bounds.iter().map(|b| b.2 - b.0).sum();
    let mut l_j: f64 = bounds.iter().map(|b| b.0).sum();
    let mut moves = Vec::with_capacity(pool.len());
    let mut after_link = 0.0;
    let mut transferred = 0.0;
    for (e, &(lo, hi, p)) in pool.iter().zip(&bounds) {
        let (c_ki, c_kj) = (topo.latency(e.k, i), topo.latency(e.k, j));
        let extra = delta_r(s_i, s_j, l_i, l_j, c_ki, c_kj, hi - lo);
        l_i -= extra;
        l_j += extra;
        let x = if lo + extra >= p { p } else { lo + extra };
        let new_i = p - x;
        after_link += link_cost(new_i, c_ki) + link_cost(x, c_kj);
        transferred += (x - e.old_j).abs();
        moves.push((e.k, new_i, x));
    }
    let after_i: f64 = moves.iter().map(|m| m.1).sum();
    let after_j: f64 = moves.iter().map(|m| m.2).sum();
    let after = after_i * after_i / (2.0 * s_i) + after_j * after_j / (2.0 * s_j) + after_link;
    PairPlan {
        moves,
        improvement: before - after,
        transferred,
        before,
    }
}

fn check_pair(state: &RelayState, topo: &Topology, i: usize, j: usize) -> Result<()> {
    let m = topo.m();
    if state.m() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: state.m(),
        });
    }
    for idx in [i, j] {
        if idx >= m {
            return Err(Error::IndexOutOfRange { index: idx, m });
        }
    }
    if i == j {
        return Err(Error::SelfExchange(i));
    }
    Ok(())
}

/// Optimal rebalance of the requests on servers `i` and `j`.
pub fn calc_best_transfer(state: &RelayState, i: usize, j: usize, topo: &Topology) -> Result<ExchangeOutcome> {
    calc_best_transfer_capped(state, i, j, topo, None)
}

/// Like [`calc_best_transfer`] with per-organization caps on every entry.
pub fn calc_best_transfer_capped(
    state: &RelayState,
    i: usize,
    j: usize,
    topo: &Topology,
    caps: Option<&[f64]>,
) -> Result<ExchangeOutcome> {
    check_pair(state, topo, i, j)?;
    let m = topo.m();
    let all: Vec<usize> = (0..m).collect();
    let mut plan = plan_pair(topo, state, &all, &all, i, j, caps);
    if !plan.worthwhile() {
        plan = PairPlan::empty();
    }
    let mut after_i: Vec<f64> = (0..m).map(|k| state.get(k, i)).collect();
    let mut after_j: Vec<f64> = (0..m).map(|k| state.get(k, j)).collect();
    for &(k, ni, nj) in &plan.moves {
        after_i[k] = ni;
        after_j[k] = nj;
    }
    Ok(ExchangeOutcome {
        i,
        j,
        after_i,
        after_j,
        transferred_total: plan.transferred,
        cost_delta: -plan.improvement,
    })
}

/// Cost decrease the exchange between `i` and `j` would achieve.
pub fn improvement(state: &RelayState, i: usize, j: usize, topo: &Topology) -> Result<f64> {
    Ok(-calc_best_transfer(state, i, j, topo)?.cost_delta)
}

/// Mutable balancing state with per-server lists of the organizations that
/// have requests there, so a pair costs time proportional to its support.
pub(crate) struct Balancer<'a> {
    topo: &'a Topology,
    pub state: RelayState,
    support: Vec<Vec<usize>>,
    present: Vec<bool>,
    caps: Option<Vec<f64>>,
}

impl<'a> Balancer<'a> {
    pub fn new(topo: &'a Topology, state: RelayState, caps: Option<Vec<f64>>) -> Self {
        let m = topo.m();
        let mut support = vec![Vec::new(); m];
        let mut present = vec![false; m * m];
        for k in 0..m {
            for (j, &r) in state.row(k).iter().enumerate() {
                if r > 0.0 {
                    support[j].push(k);
                    present[j * m + k] = true;
                }
            }
        }
        Balancer {
            topo,
            state,
            support,
            present,
            caps,
        }
    }

    fn plan(&self, i: usize, j: usize) -> PairPlan {
        plan_pair(
            self.topo,
            &self.state,
            &self.support[i],
            &self.support[j],
            i,
            j,
            self.caps.as_deref(),
        )
    }

    /// Improvement of every candidate partner of `i` (zero for `i` itself).
    pub fn score_partners(&self, i: usize, exec: Execution) -> Vec<f64> {
        exec::map_indexed(exec, self.topo.m(), |j| {
            if j == i {
                0.0
            } else {
                let plan = self.plan(i, j);
                if plan.worthwhile() {
                    plan.improvement
                } else {
                    0.0
                }
            }
        })
    }

    /// Hypothetical exchange between `i` and `j` as `(k, new r_ki, new r_kj)`,
    /// without the noise cutoff.
    pub fn hypothetical(&self, i: usize, j: usize) -> Vec<(usize, f64, f64)> {
        self.plan(i, j).moves
    }

    fn apply(&mut self, i: usize, j: usize, plan: &PairPlan) {
        let m = self.topo.m();
        for &(k, ni, nj) in &plan.moves {
            self.state.set(k, i, ni);
            self.state.set(k, j, nj);
            for (server, v) in [(i, ni), (j, nj)] {
                if v > 0.0 && !self.present[server * m + k] {
                    self.present[server * m + k] = true;
                    self.support[server].push(k);
                }
            }
        }
        for server in [i, j] {
            let state = &self.state;
            let present = &mut self.present;
            self.support[server].retain(|&k| {
                let keep = state.get(k, server) > 0.0;
                if !keep {
                    present[server * m + k] = false;
                }
                keep
            });
        }
    }

    /// One pass over the servers in `order`. Returns partners and moved volume.
    pub fn iterate(&mut self, order: &[usize], exec: Execution) -> (Vec<Option<usize>>, f64) {
        let m = self.topo.m();
        let mut partners = vec![None; m];
        let mut moved = 0.0;
        for &id in order {
            let scores = self.score_partners(id, exec);
            let mut best: Option<(usize, f64)> = None;
            for (j, &s) in scores.iter().enumerate() {
                if j != id && s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            let Some((partner, _)) = best else { continue };
            let plan = self.plan(id, partner);
            moved += plan.transferred;
            self.apply(id, partner, &plan);
            partners[id] = Some(partner);
        }
        (partners, moved)
    }

    pub fn replace_state(&mut self, state: RelayState) {
        *self = Balancer::new(self.topo, state, self.caps.take());
    }
}

/// One round of partner selection and exchange for every server in `order`.
pub fn mine_iteration(state: &RelayState, topo: &Topology, order: &[usize]) -> Result<(RelayState, IterationReport)> {
    let m = topo.m();
    if state.m() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: state.m(),
        });
    }
    let mut seen = vec![false; m];
    for &id in order {
        if id >= m {
            return Err(Error::IndexOutOfRange { index: id, m });
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::InvalidSettings(format!(
                "server {id} appears twice in the order"
            )));
        }
    }
    let mut balancer = Balancer::new(topo, state.clone(), None);
    let (partners, moved) = balancer.iterate(order, Execution::Sequential);
    let report = IterationReport {
        iteration: 0,
        total_cost: total_cost(topo, &balancer.state),
        partners,
        moved,
    };
    Ok((balancer.state, report))
}

fn caps_for(loads: &LoadProfile, replication: usize) -> Option<Vec<f64>> {
    (replication > 1).then(|| loads.own().iter().map(|n| n / replication as f64).collect())
}

fn validate(settings: &MineSettings) -> Result<()> {
    if settings.max_iterations == 0 {
        return Err(Error::InvalidSettings("max_iterations must be positive".into()));
    }
    if settings.threshold.is_nan() || settings.threshold < 0.0 {
        return Err(Error::InvalidSettings("threshold must be nonnegative".into()));
    }
    if settings.cycle_removal_every == Some(0) {
        return Err(Error::InvalidSettings("cycle_removal_every must be positive".into()));
    }
    Ok(())
}

/// Starting point of a run: all-local, or the closest capped point.
pub fn starting_state(topo: &Topology, loads: &LoadProfile, replication: usize) -> Result<RelayState> {
    let domains = row_domains(topo, loads, replication)?;
    Ok(initial_state(topo, &domains))
}

/// Iterates until the threshold against `reference` is met.
///
/// At least one iteration always runs. An infinite threshold needs no
/// reference and stops after the first iteration.
pub fn run_mine(
    topo: &Topology,
    loads: &LoadProfile,
    settings: &MineSettings,
    reference: Option<f64>,
    seed: u64,
) -> Result<MineRun> {
    validate(settings)?;
    let reference = match reference {
        Some(r) => r,
        None if settings.threshold.is_infinite() => f64::NAN,
        None => return Err(Error::MissingReference),
    };
    let start = starting_state(topo, loads, settings.replication)?;
    drive(topo, loads, start, settings, seed, |cost, _, _| {
        settings.threshold.is_infinite()
            || settings
                .threshold_mode
                .reached(cost, reference, settings.threshold, loads)
    })
    .and_then(|(run, reached)| {
        if reached {
            Ok(run)
        } else {
            let gap = run.final_cost() - reference;
            let costs = run.costs();
            Err(Error::ThresholdNotReached {
                iterations: run.reports.len(),
                gap,
                state: Box::new(run.state),
                costs,
            })
        }
    })
}

/// Long run used as the reference optimum: stops when an iteration moves
/// nothing, when the cost stalls below `1e-12` relative, or at the cap.
pub fn run_to_fixpoint(topo: &Topology, loads: &LoadProfile, settings: &MineSettings, seed: u64) -> Result<MineRun> {
    validate(settings)?;
    let start = starting_state(topo, loads, settings.replication)?;
    let (run, _) = drive(topo, loads, start, settings, seed, |cost, previous, report| {
        report.partners.iter().all(Option::is_none) || previous - cost <= 1e-12 * previous.abs()
    })?;
    Ok(run)
}

/// Reference cost from a long run with the given seed.
pub fn reference_cost(topo: &Topology, loads: &LoadProfile, seed: u64) -> Result<f64> {
    let settings = MineSettings {
        max_iterations: 10_000,
        ..Default::default()
    };
    Ok(run_to_fixpoint(topo, loads, &settings, seed)?.final_cost())
}

fn drive(
    topo: &Topology,
    loads: &LoadProfile,
    start: RelayState,
    settings: &MineSettings,
    seed: u64,
    mut done: impl FnMut(f64, f64, &IterationReport) -> bool,
) -> Result<(MineRun, bool)> {
    let m = topo.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial_cost = total_cost(topo, &start);
    let mut balancer = Balancer::new(topo, start, caps_for(loads, settings.replication));
    let mut order: Vec<usize> = (0..m).collect();
    let mut reports = Vec::new();
    let mut previous = initial_cost;
    for iteration in 1..=settings.max_iterations {
        order.shuffle(&mut rng);
        let (partners, moved) = balancer.iterate(&order, settings.execution);
        if let Some(k) = settings.cycle_removal_every {
            if iteration % k == 0 {
                let cleaned = crate::flow::remove_negative_cycles(&balancer.state, topo)?;
                balancer.replace_state(cleaned);
            }
        }
        let cost = total_cost(topo, &balancer.state);
        let report = IterationReport {
            iteration,
            total_cost: cost,
            partners,
            moved,
        };
        let finished = done(cost, previous, &report);
        reports.push(report);
        previous = cost;
        if finished {
            let iterations = reports.len();
            return Ok((
                MineRun {
                    state: balancer.state,
                    initial_cost,
                    reports,
                    iterations,
                },
                true,
            ));
        }
    }
    let iterations = reports.len();
    Ok((
        MineRun {
            state: balancer.state,
            initial_cost,
            reports,
            iterations,
        },
        false,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::server_loads;
    use proptest::prelude::*;

    fn pair_topo(c: f64) -> Topology {
        Topology::new(vec![1.0, 1.0], vec![vec![0.0, c], vec![c, 0.0]]).unwrap()
    }

    #[test]
    fn delta_r_examples() {
        assert_eq!(delta_r(1.0, 1.0, 10.0, 0.0, 0.0, 0.0, 10.0), 5.0);
        assert_eq!(delta_r(1.0, 1.0, 10.0, 0.0, 0.0, 10.0, 10.0), 0.0);
        assert_eq!(delta_r(1.0, 1.0, 10.0, 0.0, 0.0, 0.0, 3.0), 3.0);
        assert_eq!(delta_r(1.0, 1.0, 0.0, 10.0, 0.0, 0.0, 3.0), 0.0);
    }

    #[test]
    fn peak_pair_splits_evenly() {
        let topo = pair_topo(0.0);
        let lp = LoadProfile::new(vec![10.0, 0.0]).unwrap();
        let state = RelayState::local(&lp);
        let out = calc_best_transfer(&state, 0, 1, &topo).unwrap();
        assert_eq!(out.after_i[0], 5.0);
        assert_eq!(out.after_j[0], 5.0);
        assert_eq!(out.cost_delta, -25.0);
        assert_eq!(out.transferred_total, 5.0);
        assert_eq!(improvement(&state, 0, 1, &topo).unwrap(), 25.0);
        assert_eq!(improvement(&state, 1, 0, &topo).unwrap(), 25.0);
    }

    #[test]
    fn balanced_pair_is_fixed_point() {
        let topo = Topology::homogeneous(2, 4.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![6.0, 6.0]).unwrap();
        let state = RelayState::local(&lp);
        let out = calc_best_transfer(&state, 0, 1, &topo).unwrap();
        assert_eq!(out.transferred_total, 0.0);
        assert_eq!(out.cost_delta, 0.0);
        assert_eq!(improvement(&state, 0, 1, &topo).unwrap(), 0.0);
    }

    #[test]
    fn self_exchange_rejected() {
        let topo = pair_topo(1.0);
        let lp = LoadProfile::new(vec![1.0, 1.0]).unwrap();
        let state = RelayState::local(&lp);
        assert!(matches!(
            calc_best_transfer(&state, 1, 1, &topo),
            Err(Error::SelfExchange(1))
        ));
        assert!(matches!(
            calc_best_transfer(&state, 0, 2, &topo),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn transfer_matches_grid_search() {
        // Three organizations with increasing preference for server 0 over
        // server 1; the pair holds 1, 2 and 3 requests of them respectively.
        let topo = Topology::new(
            vec![1.0, 2.0, 1.5, 1.0, 1.0],
            vec![
                vec![0.0, 2.0, 1.0, 1.0, 1.0],
                vec![2.0, 0.0, 1.0, 1.0, 1.0],
                vec![1.0, 1.0, 0.0, 0.5, 3.0],
                vec![1.0, 1.5, 1.0, 0.0, 1.0],
                vec![2.5, 1.0, 1.0, 1.0, 0.0],
            ],
        )
        .unwrap();
        let lp = LoadProfile::new(vec![0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let state = RelayState::from_rows(
            &lp,
            vec![
                vec![0.0; 5],
                vec![0.0; 5],
                vec![1.0, 0.0, 0.0, 0.0, 0.0],
                vec![1.0, 1.0, 0.0, 0.0, 0.0],
                vec![0.0, 3.0, 0.0, 0.0, 0.0],
            ],
        )
        .unwrap();
        let (i, j) = (0, 1);
        let out = calc_best_transfer(&state, i, j, &topo).unwrap();
        let mut best_state = state.clone();
        out.apply(&mut best_state);
        let algo = total_cost(&topo, &best_state);

        let step = 0.01;
        let mut grid_min = f64::INFINITY;
        let pooled = [1.0, 2.0, 3.0];
        let steps: Vec<usize> = pooled.iter().map(|p: &f64| (p / step).round() as usize).collect();
        let mut trial = state.clone();
        for a in 0..=steps[0] {
            for b in 0..=steps[1] {
                for c in 0..=steps[2] {
                    for (k, x) in [(2, a), (3, b), (4, c)] {
                        let x = x as f64 * step;
                        trial.set(k, j, x);
                        trial.set(k, i, pooled[k - 2] - x);
                    }
                    grid_min = grid_min.min(total_cost(&topo, &trial));
                }
            }
        }
        let curvature = (3.0 * step / 2.0).powi(2) * (1.0 / topo.speed(i) + 1.0 / topo.speed(j)) / 2.0;
        assert!(algo <= grid_min + 1e-9, "{algo} vs {grid_min}");
        assert!(grid_min - algo <= curvature, "{algo} vs {grid_min}");
    }

    #[test]
    fn converged_state_is_fixed_point() {
        let topo = Topology::homogeneous(4, 5.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![8.0; 4]).unwrap();
        let state = RelayState::local(&lp);
        let (next, report) = mine_iteration(&state, &topo, &[2, 0, 3, 1]).unwrap();
        assert_eq!(next, state);
        assert!(report.partners.iter().all(Option::is_none));
        assert_eq!(report.moved, 0.0);
    }

    #[test]
    fn peak_load_drops_after_one_iteration() {
        let topo = Topology::homogeneous(6, 0.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![0.0, 0.0, 600.0, 0.0, 0.0, 0.0]).unwrap();
        let state = RelayState::local(&lp);
        let (next, report) = mine_iteration(&state, &topo, &[5, 4, 3, 2, 1, 0]).unwrap();
        assert!(server_loads(&next)[2] < 600.0);
        assert!(report.total_cost < total_cost(&topo, &state));
    }

    #[test]
    fn two_servers_converge_in_one_iteration() {
        let topo = Topology::new(vec![1.0, 3.0], vec![vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        let lp = LoadProfile::new(vec![40.0, 3.0]).unwrap();
        let (once, _) = mine_iteration(&RelayState::local(&lp), &topo, &[0, 1]).unwrap();
        let (twice, report) = mine_iteration(&once, &topo, &[1, 0]).unwrap();
        assert!(report.partners.iter().all(Option::is_none));
        assert_eq!(once, twice);
    }

    #[test]
    fn run_stops_after_one_iteration_without_threshold() {
        let topo = Topology::homogeneous(5, 1.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![50.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let settings = MineSettings {
            threshold: f64::INFINITY,
            ..Default::default()
        };
        let run = run_mine(&topo, &lp, &settings, None, 3).unwrap();
        assert_eq!(run.iterations, 1);
        let settings = MineSettings::default();
        assert!(matches!(
            run_mine(&topo, &lp, &settings, None, 3),
            Err(Error::MissingReference)
        ));
    }

    #[test]
    fn unreachable_threshold_reports_trajectory() {
        let topo = Topology::homogeneous(5, 1.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![50.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let settings = MineSettings {
            max_iterations: 3,
            ..Default::default()
        };
        match run_mine(&topo, &lp, &settings, Some(1.0), 3) {
            Err(Error::ThresholdNotReached { iterations, costs, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(costs.len(), 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let topo = Topology::homogeneous(12, 3.0, 2.0).unwrap();
        let lp = LoadProfile::new((0..12).map(|i| (i * 7 % 5) as f64 * 10.0).collect()).unwrap();
        let settings = MineSettings {
            max_iterations: 50,
            ..Default::default()
        };
        let a = run_to_fixpoint(&topo, &lp, &settings, 9).unwrap();
        let b = run_to_fixpoint(&topo, &lp, &settings, 9).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.reports, b.reports);
    }

    #[test]
    fn parallel_scoring_matches_sequential() {
        let topo = Topology::homogeneous(9, 1.0, 1.0).unwrap();
        let lp = LoadProfile::new((0..9).map(|i| (i * i) as f64).collect()).unwrap();
        let balancer = Balancer::new(&topo, RelayState::local(&lp), None);
        for i in 0..9 {
            assert_eq!(
                balancer.score_partners(i, Execution::Sequential),
                balancer.score_partners(i, Execution::Parallel)
            );
        }
    }

    #[test]
    fn capped_runs_respect_caps() {
        let topo = Topology::homogeneous(4, 0.5, 1.0).unwrap();
        let lp = LoadProfile::new(vec![40.0, 4.0, 0.0, 10.0]).unwrap();
        let settings = MineSettings {
            replication: 2,
            max_iterations: 200,
            ..Default::default()
        };
        let run = run_to_fixpoint(&topo, &lp, &settings, 1).unwrap();
        run.state.check_conservation(&lp).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!(run.state.get(i, j) <= lp.get(i) / 2.0 * (1.0 + 1e-12) + 1e-12);
            }
        }
    }

    fn instance() -> impl Strategy<Value = (Topology, RelayState, LoadProfile)> {
        (2usize..6).prop_flat_map(|m| {
            (
                prop::collection::vec(1.0f64..5.0, m),
                prop::collection::vec(0.0f64..20.0, m * m),
                prop::collection::vec(prop::collection::vec(0.0f64..30.0, m), m),
            )
                .prop_map(move |(speeds, lat, rows)| {
                    let latency: Vec<Vec<f64>> = (0..m)
                        .map(|i| (0..m).map(|j| if i == j { 0.0 } else { lat[i * m + j] }).collect())
                        .collect();
                    let topo = Topology::new(speeds, latency).unwrap();
                    let lp = LoadProfile::new(rows.iter().map(|r| r.iter().sum()).collect()).unwrap();
                    let state = RelayState::from_rows(&lp, rows).unwrap();
                    (topo, state, lp)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exchange_is_pairwise_optimal((topo, state, lp) in instance(), a in 0usize..6, b in 0usize..6) {
            let m = topo.m();
            let (i, j) = (a % m, b % m);
            prop_assume!(i != j);
            let out = calc_best_transfer(&state, i, j, &topo).unwrap();
            prop_assert!(out.cost_delta <= 0.0);
            let mut after = state.clone();
            out.apply(&mut after);
            after.check_conservation(&lp).unwrap();
            for k in 0..m {
                prop_assert!((after.get(k, i) + after.get(k, j) - state.get(k, i) - state.get(k, j)).abs()
                    <= 1e-12 * lp.get(k).max(1.0));
            }
            let base = total_cost(&topo, &after);
            for k in 0..m {
                let eps = 0.01 * lp.get(k);
                let tol = eps * eps * (1.0 / topo.speed(i) + 1.0 / topo.speed(j)) / 2.0 + 1e-9 * base;
                for (from, to) in [(i, j), (j, i)] {
                    if after.get(k, from) >= eps && eps > 0.0 {
                        let mut p = after.clone();
                        p.set(k, from, p.get(k, from) - eps);
                        p.set(k, to, p.get(k, to) + eps);
                        prop_assert!(total_cost(&topo, &p) >= base - tol);
                    }
                }
            }
            // Applying the exchange again changes nothing.
            let again = calc_best_transfer(&after, i, j, &topo).unwrap();
            let mut twice = after.clone();
            again.apply(&mut twice);
            for (x, y) in twice.as_slice().iter().zip(after.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9 * lp.total().max(1.0));
            }
        }

        #[test]
        fn interior_transfer_is_stationary(
            s in (1.0f64..5.0, 1.0f64..5.0),
            l in (0.0f64..100.0, 0.0f64..100.0),
            c in (0.0f64..10.0, 0.0f64..10.0),
        ) {
            let (s_i, s_j) = s;
            let (l_i, l_j) = l;
            let (c_ki, c_kj) = c;
            let d = delta_r(s_i, s_j, l_i, l_j, c_ki, c_kj, l_i);
            if d > 0.0 && d < l_i {
                let derivative = (d - l_i) / s_i + (d + l_j) / s_j - c_ki + c_kj;
                prop_assert!(derivative.abs() <= 1e-9 * (1.0 + l_i + l_j));
            }
        }

        #[test]
        fn runs_conserve_and_descend((topo, state, lp) in instance(), seed in 0u64..1000) {
            let _ = state;
            let settings = MineSettings { max_iterations: 30, ..Default::default() };
            let run = run_to_fixpoint(&topo, &lp, &settings, seed).unwrap();
            run.state.check_conservation(&lp).unwrap();
            let costs = run.costs();
            for w in costs.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0]);
            }
        }
    }
}
