//! Min-cost flow (successive shortest paths with potentials) and the
//! cycle-removal transform built on it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::model::{RelayState, Topology};

/// Residual network with paired arcs: arc `e` and its reverse `e ^ 1`.
#[derive(Debug, Clone)]
pub struct MinCostFlow {
    to: Vec<usize>,
    cap: Vec<f64>,
    cost: Vec<f64>,
    adj: Vec<Vec<usize>>,
    eps: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct Visit(f64, usize);

impl Eq for Visit {}

impl Ord for Visit {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Visit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl MinCostFlow {
    /// `eps` is the capacity below which an arc counts as saturated.
    pub fn new(nodes: usize, eps: f64) -> Self {
        MinCostFlow {
            to: Vec::new(),
            cap: Vec::new(),
            cost: Vec::new(),
            adj: vec![Vec::new(); nodes],
            eps,
        }
    }

    pub fn nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn add_arc(&mut self, from: usize, to: usize, cap: f64, cost: f64) -> usize {
        let e = self.to.len();
        self.to.extend([to, from]);
        self.cap.extend([cap, 0.0]);
        self.cost.extend([cost, -cost]);
        self.adj[from].push(e);
        self.adj[to].push(e + 1);
        e
    }

    /// Flow currently on arc `e`.
    pub fn flow(&self, e: usize) -> f64 {
        self.cap[e ^ 1]
    }

    fn residual(&self, e: usize) -> bool {
        self.cap[e] > self.eps
    }

    /// Bellman-Ford distances from `s` over residual arcs; unreachable nodes
    /// get `None`.
    fn bellman_ford(&self, s: usize) -> Vec<Option<f64>> {
        let n = self.nodes();
        let mut dist: Vec<Option<f64>> = vec![None; n];
        dist[s] = Some(0.0);
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                let Some(du) = dist[u] else { continue };
                for &e in &self.adj[u] {
                    if !self.residual(e) {
                        continue;
                    }
                    let v = self.to[e];
                    let nd = du + self.cost[e];
                    if dist[v].is_none_or(|dv| nd < dv) {
                        dist[v] = Some(nd);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        dist
    }

    /// Sends up to `limit` units from `s` to `t` at minimum cost. Returns the
    /// amount sent and its cost.
    pub fn solve(&mut self, s: usize, t: usize, limit: f64) -> (f64, f64) {
        let n = self.nodes();
        let init = self.bellman_ford(s);
        let fallback = init.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let mut potential: Vec<f64> = init.iter().map(|d| d.unwrap_or(fallback)).collect();
        let mut sent = 0.0;
        let mut total = 0.0;
        let mut dist = vec![f64::INFINITY; n];
        let mut parent = vec![usize::MAX; n];
        let mut done = vec![false; n];
        while limit - sent > self.eps {
            dist.iter_mut().for_each(|d| *d = f64::INFINITY);
            parent.iter_mut().for_each(|p| *p = usize::MAX);
            done.iter_mut().for_each(|d| *d = false);
            dist[s] = 0.0;
            let mut heap = BinaryHeap::new();
            heap.push(Visit(0.0, s));
            while let Some(Visit(d, u)) = heap.pop() {
                if done[u] {
                    continue;
                }
                done[u] = true;
                for &e in &self.adj[u] {
                    if !self.residual(e) {
                        continue;
                    }
                    let v = self.to[e];
                    let reduced = (self.cost[e] + potential[u] - potential[v]).max(0.0);
                    let nd = d + reduced;
                    if nd < dist[v] {
                        dist[v] = nd;
                        parent[v] = e;
                        heap.push(Visit(nd, v));
                    }
                }
            }
            if !dist[t].is_finite() {
                break;
            }
            for v in 0..n {
                potential[v] += dist[v].min(dist[t]);
            }
            let mut push = limit - sent;
            let mut v = t;
            while v != s {
                let e = parent[v];
                push = push.min(self.cap[e]);
                v = self.to[e ^ 1];
            }
            if push <= self.eps {
                break;
            }
            let mut v = t;
            while v != s {
                let e = parent[v];
                self.cap[e] -= push;
                self.cap[e ^ 1] += push;
                total += push * self.cost[e];
                v = self.to[e ^ 1];
            }
            sent += push;
        }
        (sent, total)
    }

    /// A cycle of residual arcs with negative total cost, as a node sequence
    /// whose first and last entries coincide. `tol` absorbs rounding in sums.
    pub fn negative_residual_cycle(&self, tol: f64) -> Option<Vec<usize>> {
        let n = self.nodes();
        let mut dist = vec![0.0; n];
        let mut parent = vec![usize::MAX; n];
        let mut last = None;
        for _ in 0..=n {
            last = None;
            for u in 0..n {
                for &e in &self.adj[u] {
                    if !self.residual(e) {
                        continue;
                    }
                    let v = self.to[e];
                    if dist[u] + self.cost[e] < dist[v] - tol {
                        dist[v] = dist[u] + self.cost[e];
                        parent[v] = e;
                        last = Some(v);
                    }
                }
            }
            last?;
        }
        let mut v = last?;
        for _ in 0..n {
            v = self.to[parent[v] ^ 1];
        }
        let start = v;
        let mut cycle = vec![start];
        loop {
            v = self.to[parent[v] ^ 1];
            cycle.push(v);
            if v == start {
                break;
            }
        }
        cycle.reverse();
        Some(cycle)
    }
}

/// Network whose flows are the ways to route every organization's relayed
/// requests while keeping each server's load.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    m: usize,
    /// Requests each organization runs elsewhere.
    pub out: Vec<f64>,
    /// Foreign requests each server runs.
    pub inn: Vec<f64>,
    graph: MinCostFlow,
    arcs: Vec<(usize, usize, usize)>,
}

impl FlowNetwork {
    const SOURCE: usize = 0;
    const TARGET: usize = 1;

    fn front(i: usize) -> usize {
        2 + 2 * i
    }

    fn back(i: usize) -> usize {
        3 + 2 * i
    }

    pub fn build(state: &RelayState, topo: &Topology) -> Result<Self> {
        let m = topo.m();
        if state.m() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: state.m(),
            });
        }
        let mut out = vec![0.0; m];
        let mut inn = vec![0.0; m];
        let mut volume = 0.0;
        for i in 0..m {
            for j in 0..m {
                let r = state.get(i, j);
                volume += r;
                if i != j {
                    out[i] += r;
                    inn[j] += r;
                }
            }
        }
        let mut graph = MinCostFlow::new(2 * m + 2, 1e-13 * volume.max(1.0));
        for i in 0..m {
            graph.add_arc(Self::SOURCE, Self::front(i), out[i], 0.0);
            graph.add_arc(Self::back(i), Self::TARGET, inn[i], 0.0);
        }
        let mut arcs = Vec::new();
        for i in 0..m {
            for j in 0..m {
                // The zero-cost arc i_f -> i_b lets requests return home,
                // which is what dismantles two-server cycles.
                if topo.is_reachable(i, j) {
                    let e = graph.add_arc(Self::front(i), Self::back(j), volume, topo.latency(i, j));
                    arcs.push((i, j, e));
                }
            }
        }
        Ok(FlowNetwork {
            m,
            out,
            inn,
            graph,
            arcs,
        })
    }

    /// Solves for the cheapest routing and maps it back onto a state.
    pub fn solve(&mut self, state: &RelayState) -> RelayState {
        let total: f64 = self.out.iter().sum();
        self.graph.solve(Self::SOURCE, Self::TARGET, total);
        let m = self.m;
        let mut r = vec![0.0; m * m];
        for &(i, j, e) in &self.arcs {
            r[i * m + j] = self.graph.flow(e).max(0.0);
        }
        for i in 0..m {
            let own: f64 = state.row(i).iter().sum();
            let relayed: f64 = (0..m).filter(|&j| j != i).map(|j| r[i * m + j]).sum();
            r[i * m + i] = (own - relayed).max(0.0);
        }
        RelayState::from_raw(m, r)
    }

    /// Negative-cost cycle left in the residual network, if any.
    pub fn residual_cycle(&self) -> Option<Vec<usize>> {
        let scale = self
            .arcs
            .iter()
            .map(|&(_, _, e)| self.graph.cost[e].abs())
            .fold(1.0, f64::max);
        self.graph.negative_residual_cycle(1e-9 * scale)
    }
}

/// Reroutes relayed requests along the cheapest links while every server
/// keeps its load and every organization keeps its volume.
pub fn remove_negative_cycles(state: &RelayState, topo: &Topology) -> Result<RelayState> {
    Ok(remove_negative_cycles_certified(state, topo)?.0)
}

/// Like [`remove_negative_cycles`], also returning any negative residual
/// cycle the solver left behind (`None` certifies optimality).
pub fn remove_negative_cycles_certified(
    state: &RelayState,
    topo: &Topology,
) -> Result<(RelayState, Option<Vec<usize>>)> {
    state.check_reachability(topo)?;
    let mut network = FlowNetwork::build(state, topo)?;
    let cleaned = network.solve(state);
    Ok((cleaned, network.residual_cycle()))
}

/// Off-diagonal L1 distance from `state` to the nearest state whose server
/// loads equal `target_loads` and whose communication cost is minimal among
/// such states. Returns the distance and that state.
///
/// Solved as one flow: organization `i` supplies `n_i`, server `j` demands its
/// target load, and each link carries `big * c_ij` plus a unit penalty for
/// deviating from the current entry.
pub fn closest_with_loads(state: &RelayState, topo: &Topology, target_loads: &[f64]) -> Result<(f64, RelayState)> {
    let m = topo.m();
    if target_loads.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: target_loads.len(),
        });
    }
    let own = state.own_totals();
    let volume: f64 = own.iter().sum();
    // Communication cost dominates; deviation only breaks ties.
    let big = 1e6;
    let source = 2 * m;
    let target = 2 * m + 1;
    let mut graph = MinCostFlow::new(2 * m + 2, 1e-13 * volume.max(1.0));
    for i in 0..m {
        graph.add_arc(source, i, own[i], 0.0);
        graph.add_arc(m + i, target, target_loads[i].max(0.0), 0.0);
    }
    let mut arcs = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if !topo.is_reachable(i, j) {
                continue;
            }
            let c = big * topo.latency(i, j);
            if i == j {
                arcs.push((i, j, graph.add_arc(i, m + j, volume, c)));
            } else {
                let r = state.get(i, j);
                if r > 0.0 {
                    arcs.push((i, j, graph.add_arc(i, m + j, r, c - 1.0)));
                }
                arcs.push((i, j, graph.add_arc(i, m + j, volume, c + 1.0)));
            }
        }
    }
    let demand: f64 = target_loads.iter().map(|l| l.max(0.0)).sum();
    graph.solve(source, target, volume.min(demand));
    let mut r = vec![0.0; m * m];
    for &(i, j, e) in &arcs {
        r[i * m + j] += graph.flow(e).max(0.0);
    }
    let closest = RelayState::from_raw(m, r);
    let distance = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j)
        .map(|(i, j)| (closest.get(i, j) - state.get(i, j)).abs())
        .sum();
    Ok((distance, closest))
}
