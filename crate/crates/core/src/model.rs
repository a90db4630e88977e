//! System model: servers, own loads, relay matrices and the cost function.
//!
//! Server `j` executing `l_j` requests at speed `s_j` gives each of them an
//! expected handling time of `l_j / (2 s_j)`. A request owned by `i` and run
//! on `j` also pays the link latency `c_ij`. Organization `i` therefore pays
//!
//! ```text
//! C_i = sum_j (l_j / (2 s_j) + c_ij) * r_ij
//! ```
//!
//! and the system cost is `sum_i C_i = sum_j l_j^2 / (2 s_j) + sum_ij c_ij r_ij`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker for a link that may not carry relayed requests.
pub const UNREACHABLE: f64 = f64::INFINITY;

/// Relative tolerance used when checking that a relay matrix conserves each
/// organization's own load.
pub const CONSERVATION_TOL: f64 = 1e-9;

/// Largest `m` for which [`assemble_qp`] will materialize the dense `m^2 x m^2` matrix.
pub const DEFAULT_QP_CAP: usize = 40;

/// Servers, their speeds and the pairwise latency matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    speeds: Vec<f64>,
    /// Row-major `m x m`; [`UNREACHABLE`] marks a forbidden link.
    latency: Vec<f64>,
}

impl Topology {
    pub fn new(speeds: Vec<f64>, latency: Vec<Vec<f64>>) -> Result<Self> {
        let m = speeds.len();
        if m == 0 {
            return Err(Error::InvalidTopology("no servers".into()));
        }
        if latency.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: latency.len(),
            });
        }
        for (i, &s) in speeds.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidTopology(format!(
                    "speed of server {i} must be positive and finite, got {s}"
                )));
            }
        }
        let mut flat = Vec::with_capacity(m * m);
        for (i, row) in latency.into_iter().enumerate() {
            if row.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: row.len(),
                });
            }
            for (j, c) in row.into_iter().enumerate() {
                if i == j && c != 0.0 {
                    return Err(Error::InvalidTopology(format!("latency[{i}][{i}] must be 0, got {c}")));
                }
                if c.is_nan() || c < 0.0 || (c.is_infinite() && c < 0.0) {
                    return Err(Error::InvalidTopology(format!(
                        "latency[{i}][{j}] must be nonnegative, got {c}"
                    )));
                }
                flat.push(c);
            }
        }
        Ok(Topology { speeds, latency: flat })
    }

    /// Equal speeds `s` and equal latency `c` between every pair of distinct servers.
    pub fn homogeneous(m: usize, c: f64, s: f64) -> Result<Self> {
        let latency = (0..m)
            .map(|i| (0..m).map(|j| if i == j { 0.0 } else { c }).collect())
            .collect();
        Topology::new(vec![s; m], latency)
    }

    pub fn m(&self) -> usize {
        self.speeds.len()
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    pub fn speed(&self, i: usize) -> f64 {
        self.speeds[i]
    }

    #[inline]
    pub fn latency(&self, i: usize, j: usize) -> f64 {
        self.latency[i * self.m() + j]
    }

    pub fn latency_row(&self, i: usize) -> &[f64] {
        let m = self.m();
        &self.latency[i * m..(i + 1) * m]
    }

    #[inline]
    pub fn is_reachable(&self, i: usize, j: usize) -> bool {
        self.latency(i, j).is_finite()
    }

    pub fn latency_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.m()).map(|i| self.latency_row(i).to_vec()).collect()
    }

    pub fn total_speed(&self) -> f64 {
        self.speeds.iter().sum()
    }

    /// Same topology with every latency multiplied by `factor`.
    pub fn scale_latency(&self, factor: f64) -> Topology {
        Topology {
            speeds: self.speeds.clone(),
            latency: self.latency.iter().map(|c| c * factor).collect(),
        }
    }

    /// Same topology with every speed multiplied by `factor`.
    pub fn scale_speeds(&self, factor: f64) -> Topology {
        Topology {
            speeds: self.speeds.iter().map(|s| s * factor).collect(),
            latency: self.latency.clone(),
        }
    }
}

/// Requests owned by each organization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    own: Vec<f64>,
}

impl LoadProfile {
    pub fn new(own: Vec<f64>) -> Result<Self> {
        if own.is_empty() {
            return Err(Error::InvalidLoads("no organizations".into()));
        }
        for (i, &n) in own.iter().enumerate() {
            if !(n.is_finite() && n >= 0.0) {
                return Err(Error::InvalidLoads(format!(
                    "own load of organization {i} must be nonnegative and finite, got {n}"
                )));
            }
        }
        Ok(LoadProfile { own })
    }

    pub fn m(&self) -> usize {
        self.own.len()
    }

    pub fn own(&self) -> &[f64] {
        &self.own
    }

    pub fn get(&self, i: usize) -> f64 {
        self.own[i]
    }

    pub fn total(&self) -> f64 {
        self.own.iter().sum()
    }

    pub fn average(&self) -> f64 {
        self.total() / self.m() as f64
    }

    pub fn scale(&self, factor: f64) -> LoadProfile {
        LoadProfile {
            own: self.own.iter().map(|n| n * factor).collect(),
        }
    }
}

/// Requests relayed from each owner to each server: `r[i][j]` is the number of
/// requests owned by `i` and executed on `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayState {
    m: usize,
    r: Vec<f64>,
}

impl RelayState {
    /// Every organization runs its own requests locally.
    pub fn local(loads: &LoadProfile) -> Self {
        let m = loads.m();
        let mut r = vec![0.0; m * m];
        for i in 0..m {
            r[i * m + i] = loads.get(i);
        }
        RelayState { m, r }
    }

    /// Builds a state from explicit rows, checking nonnegativity and conservation.
    pub fn from_rows(loads: &LoadProfile, rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = loads.m();
        if rows.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: rows.len(),
            });
        }
        let mut r = Vec::with_capacity(m * m);
        for row in rows {
            if row.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: row.len(),
                });
            }
            r.extend(row);
        }
        let state = RelayState { m, r };
        state.check_conservation(loads)?;
        Ok(state)
    }

    /// Builds a state from relay fractions `rho[i][j]` (each row sums to one).
    pub fn from_fractions(loads: &LoadProfile, rho: &[Vec<f64>]) -> Result<Self> {
        let rows = rho
            .iter()
            .zip(loads.own())
            .map(|(row, &n)| row.iter().map(|f| f * n).collect())
            .collect();
        RelayState::from_rows(loads, rows)
    }

    pub(crate) fn from_raw(m: usize, r: Vec<f64>) -> Self {
        debug_assert_eq!(r.len(), m * m);
        RelayState { m, r }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, owner: usize, server: usize) -> f64 {
        self.r[owner * self.m + server]
    }

    #[inline]
    pub(crate) fn set(&mut self, owner: usize, server: usize, value: f64) {
        self.r[owner * self.m + server] = value;
    }

    pub fn row(&self, owner: usize) -> &[f64] {
        &self.r[owner * self.m..(owner + 1) * self.m]
    }

    pub(crate) fn row_mut(&mut self, owner: usize) -> &mut [f64] {
        let m = self.m;
        &mut self.r[owner * m..(owner + 1) * m]
    }

    /// Row-major view of the relay matrix.
    pub fn as_slice(&self) -> &[f64] {
        &self.r
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|i| self.row(i).to_vec()).collect()
    }

    /// Row sums, i.e. the own load of each organization.
    pub fn own_totals(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.row(i).iter().sum()).collect()
    }

    /// Relay fractions `rho[i][j] = r[i][j] / n_i`; an organization without
    /// requests is reported as fully local.
    pub fn fractions(&self) -> Vec<Vec<f64>> {
        (0..self.m)
            .map(|i| {
                let n: f64 = self.row(i).iter().sum();
                if n > 0.0 {
                    self.row(i).iter().map(|x| x / n).collect()
                } else {
                    (0..self.m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
                }
            })
            .collect()
    }

    /// Entry-wise L1 distance between two relay matrices.
    pub fn l1_distance(&self, other: &RelayState) -> f64 {
        self.r.iter().zip(&other.r).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn check_conservation(&self, loads: &LoadProfile) -> Result<()> {
        if loads.m() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                got: loads.m(),
            });
        }
        for i in 0..self.m {
            for j in 0..self.m {
                let x = self.get(i, j);
                if !(x.is_finite() && x >= 0.0) {
                    return Err(Error::InvalidState(format!(
                        "r[{i}][{j}] must be nonnegative and finite, got {x}"
                    )));
                }
            }
            let sum: f64 = self.row(i).iter().sum();
            let n = loads.get(i);
            if (sum - n).abs() > CONSERVATION_TOL * n.max(1.0) {
                return Err(Error::InvalidState(format!(
                    "row {i} sums to {sum}, expected own load {n}"
                )));
            }
        }
        Ok(())
    }

    /// Checks that no requests travel over an unreachable link.
    pub fn check_reachability(&self, topo: &Topology) -> Result<()> {
        if topo.m() != self.m {
            return Err(Error::DimensionMismatch {
                expected: topo.m(),
                got: self.m,
            });
        }
        for i in 0..self.m {
            for j in 0..self.m {
                if !topo.is_reachable(i, j) && self.get(i, j) != 0.0 {
                    return Err(Error::InvalidState(format!(
                        "r[{i}][{j}] = {} crosses an unreachable link",
                        self.get(i, j)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Load of each server: `l_j = sum_i r[i][j]`.
pub fn server_loads(state: &RelayState) -> Vec<f64> {
    let m = state.m();
    let mut loads = vec![0.0; m];
    for i in 0..m {
        for (l, x) in loads.iter_mut().zip(state.row(i)) {
            *l += x;
        }
    }
    loads
}

#[inline]
pub(crate) fn link_cost(r: f64, c: f64) -> f64 {
    // 0 * inf is NaN; empty unreachable links cost nothing.
    if r == 0.0 {
        0.0
    } else {
        r * c
    }
}

/// Expected total processing time of organization `i`'s own requests.
pub fn org_cost(topo: &Topology, state: &RelayState, i: usize) -> Result<f64> {
    let m = state.m();
    if i >= m {
        return Err(Error::IndexOutOfRange { index: i, m });
    }
    let loads = server_loads(state);
    Ok(org_cost_with_loads(topo, state, &loads, i))
}

pub(crate) fn org_cost_with_loads(topo: &Topology, state: &RelayState, loads: &[f64], i: usize) -> f64 {
    state
        .row(i)
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            if r == 0.0 {
                0.0
            } else {
                (loads[j] / (2.0 * topo.speed(j)) + topo.latency(i, j)) * r
            }
        })
        .sum()
}

/// `sum_i C_i`, the expected total processing time of all requests.
pub fn total_cost(topo: &Topology, state: &RelayState) -> f64 {
    let loads = server_loads(state);
    processing_cost(topo, &loads) + communication_cost(topo, state)
}

/// `sum_j l_j^2 / (2 s_j)`.
pub fn processing_cost(topo: &Topology, loads: &[f64]) -> f64 {
    loads.iter().zip(topo.speeds()).map(|(l, s)| l * l / (2.0 * s)).sum()
}

/// `sum_ij c_ij r_ij`, time spent on the network.
pub fn communication_cost(topo: &Topology, state: &RelayState) -> f64 {
    let m = state.m();
    let mut total = 0.0;
    for i in 0..m {
        for (j, &r) in state.row(i).iter().enumerate() {
            total += link_cost(r, topo.latency(i, j));
        }
    }
    total
}

/// The cost written as `rho^T Q rho + b^T rho` subject to `A rho = 1`, `rho >= 0`.
///
/// Entry `(i, j)` of `rho` sits at index `i * m + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpForm {
    m: usize,
    /// Dense row-major `m^2 x m^2`, upper triangular in the owner index.
    pub q: Vec<f64>,
    pub b: Vec<f64>,
    /// Row-major `m x m^2` row selector.
    pub a: Vec<f64>,
}

impl QpForm {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.m * self.m
    }

    #[inline]
    pub fn q_at(&self, row: usize, col: usize) -> f64 {
        self.q[row * self.dim() + col]
    }

    /// Diagonal of `Q`, which for an upper-triangular matrix is its spectrum.
    pub fn eigenvalues(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.q_at(k, k)).collect()
    }

    /// `rho^T Q rho + b^T rho`.
    pub fn evaluate(&self, rho: &[f64]) -> f64 {
        let d = self.dim();
        assert_eq!(rho.len(), d, "rho must have m^2 entries");
        let mut quad = 0.0;
        for (row, &x) in rho.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let q_row = &self.q[row * d..(row + 1) * d];
            let inner: f64 = q_row.iter().zip(rho).map(|(q, y)| q * y).sum();
            quad += x * inner;
        }
        let lin: f64 = self.b.iter().zip(rho).map(|(&b, &x)| link_cost(x, b)).sum();
        quad + lin
    }

    /// `A rho`, which equals the all-ones vector on a feasible point.
    pub fn constraint_lhs(&self, rho: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..self.m)
            .map(|i| self.a[i * d..(i + 1) * d].iter().zip(rho).map(|(a, x)| a * x).sum())
            .collect()
    }
}

/// Assembles the explicit QP for instances up to [`DEFAULT_QP_CAP`] servers.
pub fn assemble_qp(topo: &Topology, loads: &LoadProfile) -> Result<QpForm> {
    assemble_qp_capped(topo, loads, DEFAULT_QP_CAP)
}

pub fn assemble_qp_capped(topo: &Topology, loads: &LoadProfile, cap: usize) -> Result<QpForm> {
    let m = topo.m();
    if loads.m() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: loads.m(),
        });
    }
    if m > cap {
        return Err(Error::TooLarge {
            what: "explicit QP assembly",
            m,
            limit: cap,
        });
    }
    let d = m * m;
    let n = loads.own();
    let mut q = vec![0.0; d * d];
    for j in 0..m {
        let s = topo.speed(j);
        for i in 0..m {
            let row = i * m + j;
            q[row * d + row] = n[i] * n[i] / (2.0 * s);
            for k in (i + 1)..m {
                q[row * d + k * m + j] = n[i] * n[k] / s;
            }
        }
    }
    let b = (0..d).map(|idx| topo.latency(idx / m, idx % m) * n[idx / m]).collect();
    let mut a = vec![0.0; m * d];
    for i in 0..m {
        for col in (i * m)..((i + 1) * m) {
            a[i * d + col] = 1.0;
        }
    }
    Ok(QpForm { m, q, b, a })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_server(c: f64) -> Topology {
        Topology::new(vec![1.0, 1.0], vec![vec![0.0, c], vec![c, 0.0]]).unwrap()
    }

    #[test]
    fn loads_are_column_sums() {
        let lp = LoadProfile::new(vec![5.0, 3.0]).unwrap();
        let s = RelayState::from_rows(&lp, vec![vec![5.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(server_loads(&s), vec![5.0, 3.0]);

        let lp = LoadProfile::new(vec![5.0, 1.0]).unwrap();
        let s = RelayState::from_rows(&lp, vec![vec![2.0, 3.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(server_loads(&s), vec![3.0, 3.0]);

        let lp = LoadProfile::new(vec![9.0; 3]).unwrap();
        let s = RelayState::from_rows(&lp, vec![vec![3.0; 3]; 3]).unwrap();
        assert_eq!(server_loads(&s), vec![9.0, 9.0, 9.0]);
    }

    #[test]
    fn org_cost_examples() {
        let topo = Topology::new(vec![1.0], vec![vec![0.0]]).unwrap();
        let lp = LoadProfile::new(vec![2.0]).unwrap();
        let s = RelayState::local(&lp);
        assert_eq!(org_cost(&topo, &s, 0).unwrap(), 2.0);
        assert_eq!(total_cost(&topo, &s), 2.0);

        let topo = two_server(4.0);
        let lp = LoadProfile::new(vec![2.0, 0.0]).unwrap();
        let s = RelayState::from_rows(&lp, vec![vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(org_cost(&topo, &s, 0).unwrap(), 5.0);
        assert!(matches!(
            org_cost(&topo, &s, 2),
            Err(Error::IndexOutOfRange { index: 2, m: 2 })
        ));

        let lp = LoadProfile::new(vec![0.0, 0.0]).unwrap();
        let s = RelayState::local(&lp);
        assert_eq!(org_cost(&topo, &s, 0).unwrap(), 0.0);
    }

    #[test]
    fn total_cost_examples() {
        let topo = two_server(0.0);
        let lp = LoadProfile::new(vec![2.0, 0.0]).unwrap();
        let balanced = RelayState::from_rows(&lp, vec![vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(total_cost(&topo, &balanced), 1.0);
        assert_eq!(total_cost(&topo, &RelayState::local(&lp)), 2.0);
    }

    #[test]
    fn qp_single_server() {
        let topo = Topology::new(vec![1.0], vec![vec![0.0]]).unwrap();
        let lp = LoadProfile::new(vec![2.0]).unwrap();
        let qp = assemble_qp(&topo, &lp).unwrap();
        assert_eq!(qp.q, vec![2.0]);
        assert_eq!(qp.b, vec![0.0]);
        assert_eq!(qp.a, vec![1.0]);
    }

    #[test]
    fn qp_structure() {
        let topo = Topology::new(
            vec![1.0, 2.0, 4.0],
            vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 3.0], vec![2.0, 3.0, 0.0]],
        )
        .unwrap();
        let lp = LoadProfile::new(vec![1.0, 2.0, 3.0]).unwrap();
        let qp = assemble_qp(&topo, &lp).unwrap();
        let m = 3;
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    for l in 0..m {
                        let v = qp.q_at(i * m + j, k * m + l);
                        if j != l || i > k {
                            assert_eq!(v, 0.0);
                        } else if i == k {
                            assert_eq!(v, lp.get(i).powi(2) / (2.0 * topo.speed(j)));
                        } else {
                            assert_eq!(v, lp.get(i) * lp.get(k) / topo.speed(j));
                        }
                    }
                }
                assert_eq!(qp.b[i * m + j], topo.latency(i, j) * lp.get(i));
            }
        }
        assert!(qp.eigenvalues().iter().all(|&e| e > 0.0));
        let local = RelayState::local(&lp);
        let rho: Vec<f64> = local.fractions().concat();
        assert_eq!(qp.constraint_lhs(&rho), vec![1.0; 3]);
    }

    #[test]
    fn qp_cap_is_enforced() {
        let topo = Topology::homogeneous(5, 1.0, 1.0).unwrap();
        let lp = LoadProfile::new(vec![1.0; 5]).unwrap();
        assert!(matches!(assemble_qp_capped(&topo, &lp, 4), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Topology::new(vec![0.0], vec![vec![0.0]]).is_err());
        assert!(Topology::new(vec![1.0, 1.0], vec![vec![0.0, -1.0], vec![1.0, 0.0]]).is_err());
        assert!(Topology::new(vec![1.0], vec![vec![2.0]]).is_err());
        assert!(LoadProfile::new(vec![-1.0]).is_err());
        let lp = LoadProfile::new(vec![2.0, 1.0]).unwrap();
        assert!(RelayState::from_rows(&lp, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
        assert!(RelayState::from_rows(&lp, vec![vec![3.0, -1.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn unreachable_links_cost_nothing_when_empty() {
        let topo = Topology::new(vec![1.0, 1.0], vec![vec![0.0, UNREACHABLE], vec![3.0, 0.0]]).unwrap();
        let lp = LoadProfile::new(vec![2.0, 2.0]).unwrap();
        let s = RelayState::local(&lp);
        assert!(total_cost(&topo, &s).is_finite());
        assert!(s.check_reachability(&topo).is_ok());
        let bad = RelayState::from_rows(&lp, vec![vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(bad.check_reachability(&topo).is_err());
    }
}
