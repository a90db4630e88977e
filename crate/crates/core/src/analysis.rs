//! Distance of a partial solution from the optimum: error graphs, negative
//! cycles and the potential-transfer bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::flow::{closest_with_loads, remove_negative_cycles};
use crate::mine::{Balancer, MineSettings};
use crate::model::{LoadProfile, RelayState, Topology};

/// Transfers that turn one state into another, where every transfer moves
/// requests owned by one of its two endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorGraph {
    m: usize,
    /// Requests to move from `i` to `j`, row-major.
    pub delta: Vec<f64>,
    /// `+1`: `i` sends its own requests; `-1`: `i` returns `j`'s requests.
    pub direction: Vec<i8>,
    /// Latency of the moved requests' owner link, signed by direction.
    weight: Vec<f64>,
}

impl ErrorGraph {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn delta(&self, i: usize, j: usize) -> f64 {
        self.delta[i * self.m + j]
    }

    pub fn direction(&self, i: usize, j: usize) -> i8 {
        self.direction[i * self.m + j]
    }

    pub fn succ(&self, i: usize) -> Vec<usize> {
        (0..self.m).filter(|&j| self.delta(i, j) > 0.0).collect()
    }

    pub fn prec(&self, i: usize) -> Vec<usize> {
        (0..self.m).filter(|&j| self.delta(j, i) > 0.0).collect()
    }

    /// Total volume of all transfers.
    pub fn total(&self) -> f64 {
        self.delta.iter().sum()
    }
}

/// Per-owner decomposition of `reference - current`: each organization's
/// change on a foreign server is sent from, or returned to, its home server.
pub fn build_error_graph(current: &RelayState, reference: &RelayState, topo: &Topology) -> Result<ErrorGraph> {
    let m = topo.m();
    for s in [current, reference] {
        if s.m() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: s.m(),
            });
        }
    }
    let a = current.own_totals();
    let b = reference.own_totals();
    for (k, (x, y)) in a.iter().zip(&b).enumerate() {
        if (x - y).abs() > 1e-9 * x.abs().max(1.0) {
            return Err(Error::InvalidState(format!(
                "organization {k} owns {x} requests in one state and {y} in the other"
            )));
        }
    }
    let mut own = vec![0.0; m * m];
    let mut returned = vec![0.0; m * m];
    let mut own_w = vec![f64::INFINITY; m * m];
    let mut ret_w = vec![f64::INFINITY; m * m];
    for k in 0..m {
        let cut = 1e-12 * a[k].max(1.0);
        for j in (0..m).filter(|&j| j != k) {
            let d = reference.get(k, j) - current.get(k, j);
            if d > cut {
                own[k * m + j] += d;
                own_w[k * m + j] = topo.latency(k, j);
            } else if d < -cut {
                returned[j * m + k] -= d;
                ret_w[j * m + k] = -topo.latency(k, j);
            }
        }
    }
    let mut delta = vec![0.0; m * m];
    let mut direction = vec![0i8; m * m];
    let mut weight = vec![0.0; m * m];
    for e in 0..m * m {
        delta[e] = own[e] + returned[e];
        if returned[e] > 0.0 {
            direction[e] = -1;
            weight[e] = ret_w[e];
        } else if own[e] > 0.0 {
            direction[e] = 1;
            weight[e] = own_w[e];
        }
    }
    Ok(ErrorGraph {
        m,
        delta,
        direction,
        weight,
    })
}

/// A cycle `i_1 .. i_n` (with `i_1 = i_n`) along positive transfers whose
/// direction-signed latency sum is negative.
pub fn find_negative_cycle(graph: &ErrorGraph) -> Option<Vec<usize>> {
    let m = graph.m;
    let edges: Vec<(usize, usize, f64)> = (0..m * m)
        .filter(|&e| graph.delta[e] > 0.0)
        .map(|e| (e / m, e % m, graph.weight[e]))
        .collect();
    let scale = edges.iter().map(|e| e.2.abs()).fold(1.0, f64::max);
    let tol = 1e-9 * scale;
    let mut dist = vec![0.0; m];
    let mut parent = vec![usize::MAX; m];
    let mut last = None;
    for _ in 0..=m {
        last = None;
        for &(u, v, w) in &edges {
            if dist[u] + w < dist[v] - tol {
                dist[v] = dist[u] + w;
                parent[v] = u;
                last = Some(v);
            }
        }
        last?;
    }
    let mut v = last?;
    for _ in 0..m {
        v = parent[v];
    }
    let start = v;
    let mut cycle = vec![start];
    loop {
        v = parent[v];
        cycle.push(v);
        if v == start {
            break;
        }
    }
    cycle.reverse();
    Some(cycle)
}

/// Entry `(i, j)`: requests the exchange between `i` and `j` would move onto
/// `j` if it ran now.
pub fn potential_transfer_matrix(state: &RelayState, topo: &Topology) -> Result<Vec<f64>> {
    potential_transfer_matrix_with(state, topo, Execution::default())
}

pub fn potential_transfer_matrix_with(state: &RelayState, topo: &Topology, exec: Execution) -> Result<Vec<f64>> {
    let m = topo.m();
    if state.m() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: state.m(),
        });
    }
    let balancer = Balancer::new(topo, state.clone(), None);
    let rows = exec::map_indexed(exec, m, |i| {
        (0..m)
            .map(|j| {
                if i == j {
                    return 0.0;
                }
                balancer
                    .hypothetical(i, j)
                    .into_iter()
                    .map(|(k, _, new_j)| (new_j - state.get(k, j)).max(0.0))
                    .sum()
            })
            .collect::<Vec<f64>>()
    });
    Ok(rows.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub delta_r: f64,
    pub bound: f64,
}

/// Bound from a potential transfer matrix.
pub fn bound_from_transfers(transfers: &[f64], topo: &Topology) -> ErrorBound {
    let m = topo.m();
    let delta_r: f64 = (0..m)
        .map(|j| {
            (0..m)
                .map(|k| (1.0 / topo.speed(j) + 1.0 / topo.speed(k)) * transfers[j * m + k])
                .fold(0.0, f64::max)
        })
        .sum();
    ErrorBound {
        delta_r,
        bound: (4 * m + 1) as f64 * delta_r * topo.total_speed(),
    }
}

/// Bound on the transfer volume separating `state` from the optimum, valid
/// when `state` has no negative cycle against it.
pub fn error_bound(state: &RelayState, topo: &Topology) -> Result<ErrorBound> {
    Ok(bound_from_transfers(&potential_transfer_matrix(state, topo)?, topo))
}

/// Transfer volume to the nearest optimal state, given the optimal loads.
pub fn distance_to_optimum(state: &RelayState, topo: &Topology, optimal_loads: &[f64]) -> Result<(f64, RelayState)> {
    closest_with_loads(state, topo, optimal_loads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub iteration: usize,
    pub distance: f64,
    pub delta_r: f64,
    pub bound: f64,
    /// Whether the state was cycle-cleaned before measuring.
    pub cleaned: bool,
    /// Whether a negative cycle against the nearest optimum remains.
    pub negative_cycle: bool,
}

impl BoundRecord {
    pub fn holds(&self, slack: f64) -> bool {
        self.distance <= self.bound + slack
    }
}

/// Runs the balancer for `iterations` rounds and measures distance and bound
/// before the first round and after every round.
pub fn trace_bound(
    topo: &Topology,
    loads: &LoadProfile,
    optimal_loads: &[f64],
    iterations: usize,
    clean: bool,
    seed: u64,
) -> Result<Vec<BoundRecord>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let m = topo.m();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut balancer = Balancer::new(topo, RelayState::local(loads), None);
    let mut order: Vec<usize> = (0..m).collect();
    let mut records = Vec::with_capacity(iterations + 1);
    for iteration in 0..=iterations {
        if iteration > 0 {
            order.shuffle(&mut rng);
            balancer.iterate(&order, MineSettings::default().execution);
        }
        let measured = if clean {
            remove_negative_cycles(&balancer.state, topo)?
        } else {
            balancer.state.clone()
        };
        let (distance, closest) = distance_to_optimum(&measured, topo, optimal_loads)?;
        let graph = build_error_graph(&measured, &closest, topo)?;
        let bound = error_bound(&measured, topo)?;
        records.push(BoundRecord {
            iteration,
            distance,
            delta_r: bound.delta_r,
            bound: bound.bound,
            cleaned: clean,
            negative_cycle: find_negative_cycle(&graph).is_some(),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::server_loads;

    #[test]
    fn identical_states_give_empty_graph() {
        let topo = Topology::homogeneous(3, 1.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![1.0, 2.0, 3.0]).unwrap();
        let s = RelayState::local(&lp);
        let g = build_error_graph(&s, &s, &topo).unwrap();
        assert_eq!(g.total(), 0.0);
        assert!(g.direction.iter().all(|&d| d == 0));
        assert!(find_negative_cycle(&g).is_none());
    }

    #[test]
    fn single_edges() {
        let topo = Topology::homogeneous(2, 1.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![5.0, 0.0]).unwrap();
        let local = RelayState::local(&lp);
        let relayed = RelayState::from_rows(&lp, vec![vec![2.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let g = build_error_graph(&local, &relayed, &topo).unwrap();
        assert_eq!(g.delta(0, 1), 3.0);
        assert_eq!(g.direction(0, 1), 1);
        assert_eq!(g.succ(0), vec![1]);
        assert_eq!(g.prec(1), vec![0]);
        let back = build_error_graph(&relayed, &local, &topo).unwrap();
        assert_eq!(back.delta(1, 0), 3.0);
        assert_eq!(back.direction(1, 0), -1);
        assert_eq!(back.delta(0, 1), 0.0);
    }

    #[test]
    fn returning_triangle_is_negative() {
        // Every server holds 1 request of its predecessor; returning them all
        // is a cycle of three returns.
        let topo = Topology::new(
            vec![1.0; 3],
            vec![vec![0.0, 2.0, 3.0], vec![2.0, 0.0, 4.0], vec![3.0, 4.0, 0.0]],
        )
        .unwrap();
        let lp = LoadProfile::new(vec![2.0; 3]).unwrap();
        let current =
            RelayState::from_rows(&lp, vec![vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0]]).unwrap();
        let reference = RelayState::local(&lp);
        let g = build_error_graph(&current, &reference, &topo).unwrap();
        let cycle = find_negative_cycle(&g).unwrap();
        assert_eq!(cycle.len(), 4);
        assert_eq!(cycle.first(), cycle.last());
        for w in cycle.windows(2) {
            assert_eq!(g.direction(w[0], w[1]), -1);
        }
    }

    #[test]
    fn zero_latency_has_no_negative_cycle() {
        let topo = Topology::homogeneous(3, 0.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![2.0; 3]).unwrap();
        let current =
            RelayState::from_rows(&lp, vec![vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0]]).unwrap();
        let g = build_error_graph(&current, &RelayState::local(&lp), &topo).unwrap();
        assert!(find_negative_cycle(&g).is_none());
    }

    #[test]
    fn potential_transfers_of_peak_pair() {
        let topo = Topology::homogeneous(2, 0.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![10.0, 0.0]).unwrap();
        let t = potential_transfer_matrix(&RelayState::local(&lp), &topo).unwrap();
        assert_eq!(t, vec![0.0, 5.0, 0.0, 0.0]);
        let b = bound_from_transfers(&t, &topo);
        assert_eq!(b.delta_r, 10.0);
        assert_eq!(b.bound, 180.0);
    }

    #[test]
    fn converged_state_has_zero_bound() {
        let topo = Topology::homogeneous(3, 0.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![3.0, 0.0, 0.0]).unwrap();
        let state = RelayState::from_rows(&lp, vec![vec![1.0; 3], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        let b = error_bound(&state, &topo).unwrap();
        assert_eq!(b.delta_r, 0.0);
        assert_eq!(b.bound, 0.0);
        let (d, _) = distance_to_optimum(&state, &topo, &server_loads(&state)).unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn mismatched_states_rejected() {
        let topo = Topology::homogeneous(2, 1.0, 1.0).unwrap();
        let a = RelayState::local(&LoadProfile::new(vec![1.0, 1.0]).unwrap());
        let b = RelayState::local(&LoadProfile::new(vec![2.0, 1.0]).unwrap());
        assert!(build_error_graph(&a, &b, &topo).is_err());
    }
}
