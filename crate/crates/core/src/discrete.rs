//! Indivisible tasks and replicated placement.
//!
//! A fractional row ρ_i· says how much of organization i's volume each server
//! should get; [`discretize`] maps whole tasks onto servers to track those
//! targets. [`solve_with_replication`] caps every fraction at `1/R` so that
//! [`sample_placements`] can put each task on exactly `R` distinct servers
//! with inclusion probabilities `R·ρ_ij`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::central::{solve_central_capped, SolverSettings};
use crate::error::{Error, Result};
use crate::mine::{run_to_fixpoint, MineSettings};
use crate::model::{LoadProfile, RelayState, Topology};

/// Largest task count accepted by [`discretize_exhaustive`].
pub const EXHAUSTIVE_MAX_TASKS: usize = 20;

/// Tasks per organization, by size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    tasks: Vec<Vec<f64>>,
}

impl TaskSet {
    pub fn new(tasks: Vec<Vec<f64>>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidLoads("a task set needs at least one organization".into()));
        }
        for (i, row) in tasks.iter().enumerate() {
            if let Some(p) = row.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
                return Err(Error::InvalidLoads(format!(
                    "task sizes must be positive and finite (organization {i}: {p})"
                )));
            }
        }
        Ok(TaskSet { tasks })
    }

    pub fn m(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self, i: usize) -> &[f64] {
        &self.tasks[i]
    }

    /// n_i = Σ_k p_i(k).
    pub fn totals(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.iter().sum()).collect()
    }

    pub fn loads(&self) -> Result<LoadProfile> {
        LoadProfile::new(self.totals())
    }
}

fn task_err(line: usize, message: impl Into<String>) -> Error {
    Error::TaskFormat {
        line,
        message: message.into(),
    }
}

/// Parses `org_id size` lines. Blank lines and `#` comments are skipped.
/// With `m = None` the organization count is the largest id plus one.
pub fn parse_task_file(text: &str, m: Option<usize>) -> Result<TaskSet> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = body.split_whitespace().collect();
        let [org, size] = tokens.as_slice() else {
            return Err(task_err(line, "expected `org_id size`"));
        };
        let org: usize = org
            .parse()
            .map_err(|_| task_err(line, format!("invalid organization id `{org}`")))?;
        let size: f64 = size
            .parse()
            .ok()
            .filter(|p: &f64| *p > 0.0 && p.is_finite())
            .ok_or_else(|| task_err(line, format!("task size must be positive, got `{size}`")))?;
        if let Some(m) = m {
            if org >= m {
                return Err(task_err(
                    line,
                    format!("organization {org} out of range for {m} servers"),
                ));
            }
        }
        entries.push((org, size));
    }
    let m = match m {
        Some(m) => m,
        None => entries
            .iter()
            .map(|e| e.0 + 1)
            .max()
            .ok_or_else(|| task_err(1, "no tasks"))?,
    };
    let mut tasks = vec![Vec::new(); m];
    for (org, size) in entries {
        tasks[org].push(size);
    }
    TaskSet::new(tasks)
}

pub fn read_task_file(path: &Path, m: Option<usize>) -> Result<TaskSet> {
    parse_task_file(&std::fs::read_to_string(path)?, m)
}

/// One organization's tasks mapped onto servers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteRow {
    /// Target volume ρ_ij·n_i per server.
    pub targets: Vec<f64>,
    /// Task indices per server.
    pub subsets: Vec<Vec<usize>>,
    /// |assigned volume − target| per server.
    pub errors: Vec<f64>,
}

impl DiscreteRow {
    fn build(targets: Vec<f64>, sizes: &[f64], owner: &[usize]) -> Self {
        let m = targets.len();
        let mut subsets = vec![Vec::new(); m];
        let mut volume = vec![0.0; m];
        for (k, &j) in owner.iter().enumerate() {
            subsets[j].push(k);
            volume[j] += sizes[k];
        }
        let errors = volume.iter().zip(&targets).map(|(v, t)| (v - t).abs()).collect();
        DiscreteRow {
            targets,
            subsets,
            errors,
        }
    }

    pub fn total_error(&self) -> f64 {
        self.errors.iter().sum()
    }

    /// Server of every task.
    pub fn owners(&self) -> Vec<usize> {
        let n = self.subsets.iter().map(Vec::len).sum();
        let mut owner = vec![0; n];
        for (j, s) in self.subsets.iter().enumerate() {
            for &k in s {
                owner[k] = j;
            }
        }
        owner
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteAssignment {
    pub rows: Vec<DiscreteRow>,
}

impl DiscreteAssignment {
    pub fn total_error(&self) -> f64 {
        self.rows.iter().map(DiscreteRow::total_error).sum()
    }
}

fn targets_of(fractions: &[f64], sizes: &[f64]) -> Result<Vec<f64>> {
    if fractions.is_empty() {
        return Err(Error::InvalidState("empty fraction row".into()));
    }
    if let Some(p) = sizes.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
        return Err(Error::InvalidLoads(format!("task sizes must be positive, got {p}")));
    }
    if fractions.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::InvalidState("fractions must be nonnegative".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidState(format!("fractions sum to {sum}, not 1")));
    }
    let n: f64 = sizes.iter().sum();
    Ok(fractions.iter().map(|r| r * n).collect())
}

/// Largest-first order, ties by index.
fn by_size_desc(sizes: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].total_cmp(&sizes[a]).then(a.cmp(&b)));
    order
}

/// Greedy largest-first placement into the server with the most remaining
/// room, then local search until no step improves: single-task moves and
/// swaps, exact re-splits of the tasks held by any two or three servers, and
/// equal-cost re-splits followed by a re-split of a neighbouring pair.
pub fn discretize(fractions: &[f64], sizes: &[f64]) -> Result<DiscreteRow> {
    let targets = targets_of(fractions, sizes)?;
    let owner = greedy_local_search(&targets, sizes);
    Ok(DiscreteRow::build(targets, sizes, &owner))
}

fn greedy_local_search(targets: &[f64], sizes: &[f64]) -> Vec<usize> {
    let m = targets.len();
    let mut volume = vec![0.0; m];
    let mut owner = vec![0; sizes.len()];
    for k in by_size_desc(sizes) {
        let mut best = 0;
        for j in 1..m {
            if targets[j] - volume[j] > targets[best] - volume[best] {
                best = j;
            }
        }
        owner[k] = best;
        volume[best] += sizes[k];
    }

    // No improving step ever puts a task on a server without target, so
    // the larger neighbourhoods only need the servers in play now.
    let active: Vec<usize> = (0..m).filter(|&j| targets[j] > 0.0 || volume[j] > 0.0).collect();
    let small = active.len() <= SMALL_ACTIVE_SET;
    let tol = 1e-12 * sizes.iter().sum::<f64>();
    loop {
        move_and_swap(targets, sizes, &mut owner, &mut volume, tol);
        if repartition_pairs(&active, targets, sizes, &mut owner, &mut volume, tol)
            || (small && repartition_triples(&active, targets, sizes, &mut owner, &mut volume, tol))
        {
            continue;
        }
        if !small
            || sizes.len() > PLATEAU_MAX_TASKS
            || !plateau_chain(&active, targets, sizes, &mut owner, &mut volume, tol)
        {
            return owner;
        }
    }
}

fn move_and_swap(targets: &[f64], sizes: &[f64], owner: &mut [usize], volume: &mut [f64], tol: f64) {
    let m = targets.len();
    let err = |j: usize, v: f64| (v - targets[j]).abs();
    loop {
        let mut improved = false;
        for k in 0..sizes.len() {
            let a = owner[k];
            let p = sizes[k];
            for b in 0..m {
                if b == a {
                    continue;
                }
                let before = err(a, volume[a]) + err(b, volume[b]);
                let after = err(a, volume[a] - p) + err(b, volume[b] + p);
                if after < before - tol {
                    volume[a] -= p;
                    volume[b] += p;
                    owner[k] = b;
                    improved = true;
                    break;
                }
            }
        }
        for k in 0..sizes.len() {
            for l in k + 1..sizes.len() {
                let (a, b) = (owner[k], owner[l]);
                if a == b {
                    continue;
                }
                let shift = sizes[l] - sizes[k];
                let before = err(a, volume[a]) + err(b, volume[b]);
                let after = err(a, volume[a] + shift) + err(b, volume[b] - shift);
                if after < before - tol {
                    volume[a] += shift;
                    volume[b] -= shift;
                    owner.swap(k, l);
                    improved = true;
                }
            }
        }
        if !improved {
            return;
        }
    }
}

/// Triples and plateau chains are only searched among this many servers.
const SMALL_ACTIVE_SET: usize = 16;

/// Above this many tasks the plateau neighbourhood is skipped.
const PLATEAU_MAX_TASKS: usize = 64;

/// Pairs whose joint task list exceeds this are left to moves and swaps.
const PAIR_REPARTITION_MAX: usize = 24;

/// Tasks currently on `a` or `b`, or `None` when there are too many.
fn pair_union(owner: &[usize], a: usize, b: usize) -> Option<Vec<usize>> {
    let union: Vec<usize> = (0..owner.len()).filter(|&k| owner[k] == a || owner[k] == b).collect();
    (!union.is_empty() && union.len() <= PAIR_REPARTITION_MAX).then_some(union)
}

fn apply_split(
    union: &[usize],
    mask: u64,
    (a, b): (usize, usize),
    sizes: &[f64],
    owner: &mut [usize],
    volume: &mut [f64],
) {
    volume[a] = 0.0;
    volume[b] = 0.0;
    for (bit, &k) in union.iter().enumerate() {
        let j = if mask >> bit & 1 == 1 { a } else { b };
        owner[k] = j;
        volume[j] += sizes[k];
    }
}

/// Joint error of the pair when `a` holds volume `x` out of `joint`.
fn pair_cost(targets: &[f64], (a, b): (usize, usize), joint: f64, x: f64) -> f64 {
    (x - targets[a]).abs() + (joint - x - targets[b]).abs()
}

/// Optimal split of the pair's tasks, applied if it improves.
fn repartition_pair(
    pair: (usize, usize),
    targets: &[f64],
    sizes: &[f64],
    owner: &mut [usize],
    volume: &mut [f64],
    tol: f64,
) -> bool {
    let Some(union) = pair_union(owner, pair.0, pair.1) else {
        return false;
    };
    let joint = volume[pair.0] + volume[pair.1];
    let cost = |x: f64| pair_cost(targets, pair, joint, x);
    let union_sizes: Vec<f64> = union.iter().map(|&k| sizes[k]).collect();
    let (mask, x) = best_subset(&union_sizes, targets[pair.0], cost);
    if cost(x) < cost(volume[pair.0]) - tol {
        apply_split(&union, mask, pair, sizes, owner, volume);
        true
    } else {
        false
    }
}

/// Re-splits the tasks of each server pair optimally. Returns whether any
/// pair improved.
fn repartition_pairs(
    active: &[usize],
    targets: &[f64],
    sizes: &[f64],
    owner: &mut [usize],
    volume: &mut [f64],
    tol: f64,
) -> bool {
    let mut improved = false;
    for (x, &a) in active.iter().enumerate() {
        for &b in &active[x + 1..] {
            improved |= repartition_pair((a, b), targets, sizes, owner, volume, tol);
        }
    }
    improved
}

/// Triples whose joint task list exceeds this are skipped.
const TRIPLE_REPARTITION_MAX: usize = 12;

/// Re-splits the tasks of each server triple optimally: every subset for the
/// first server, the rest split exactly between the other two.
fn repartition_triples(
    active: &[usize],
    targets: &[f64],
    sizes: &[f64],
    owner: &mut [usize],
    volume: &mut [f64],
    tol: f64,
) -> bool {
    let err = |j: usize, v: f64| (v - targets[j]).abs();
    let mut improved = false;
    for (x, &a) in active.iter().enumerate() {
        for (y, &b) in active.iter().enumerate().skip(x + 1) {
            for &c in &active[y + 1..] {
                let union: Vec<usize> = (0..owner.len())
                    .filter(|&k| owner[k] == a || owner[k] == b || owner[k] == c)
                    .collect();
                if union.len() < 2 || union.len() > TRIPLE_REPARTITION_MAX {
                    continue;
                }
                let before = err(a, volume[a]) + err(b, volume[b]) + err(c, volume[c]);
                let joint = volume[a] + volume[b] + volume[c];
                // (error, tasks on a, split of the rest between b and c)
                let mut best = (f64::INFINITY, 0u64, 0u64);
                for mask_a in 0..1u64 << union.len() {
                    let (mut on_a, mut rest_sizes) = (0.0, Vec::with_capacity(union.len()));
                    for (bit, &k) in union.iter().enumerate() {
                        if mask_a >> bit & 1 == 1 {
                            on_a += sizes[k];
                        } else {
                            rest_sizes.push(sizes[k]);
                        }
                    }
                    let left = joint - on_a;
                    let cost = |x: f64| pair_cost(targets, (b, c), left, x);
                    let (mask_b, x) = if rest_sizes.is_empty() {
                        (0, 0.0)
                    } else {
                        best_subset(&rest_sizes, targets[b], cost)
                    };
                    let total = err(a, on_a) + cost(x);
                    if total < best.0 {
                        best = (total, mask_a, mask_b);
                    }
                }
                let (total, mask_a, mask_b) = best;
                if total < before - tol {
                    for j in [a, b, c] {
                        volume[j] = 0.0;
                    }
                    let mut rest_bit = 0;
                    for (bit, &k) in union.iter().enumerate() {
                        let j = if mask_a >> bit & 1 == 1 {
                            a
                        } else {
                            rest_bit += 1;
                            if mask_b >> (rest_bit - 1) & 1 == 1 {
                                b
                            } else {
                                c
                            }
                        };
                        owner[k] = j;
                        volume[j] += sizes[k];
                    }
                    improved = true;
                }
            }
        }
    }
    improved
}

/// Alternative splits tried per pair in [`plateau_chain`].
const PLATEAU_ALTERNATIVES: usize = 32;

/// Re-splits one pair at no extra cost, then repartitions a pair sharing a
/// server with it; kept only if the total error drops. Escapes optima where
/// the right tasks sit on a server whose error is already as small as it
/// can be.
fn plateau_chain(
    active: &[usize],
    targets: &[f64],
    sizes: &[f64],
    owner: &mut [usize],
    volume: &mut [f64],
    tol: f64,
) -> bool {
    let total = |volume: &[f64]| -> f64 { volume.iter().zip(targets).map(|(v, t)| (v - t).abs()).sum() };
    let before = total(volume);
    for (x, &a) in active.iter().enumerate() {
        for &b in &active[x + 1..] {
            let Some(union) = pair_union(owner, a, b) else {
                continue;
            };
            let joint = volume[a] + volume[b];
            let limit = pair_cost(targets, (a, b), joint, volume[a]) + tol;
            let current: u64 = union
                .iter()
                .enumerate()
                .filter(|(_, &k)| owner[k] == a)
                .map(|(bit, _)| 1 << bit)
                .sum();
            let union_sizes: Vec<f64> = union.iter().map(|&k| sizes[k]).collect();
            // g(x) = |x - t_a| + |joint - x - t_b| is at most `limit` on this interval.
            let (p, q) = (targets[a].min(joint - targets[b]), targets[a].max(joint - targets[b]));
            let range = ((p + q - limit) / 2.0, (p + q + limit) / 2.0);
            for mask in subsets_in_range(&union_sizes, range, PLATEAU_ALTERNATIVES + 1) {
                if mask == current {
                    continue;
                }
                let (saved_owner, saved_volume) = (owner.to_vec(), volume.to_vec());
                apply_split(&union, mask, (a, b), sizes, owner, volume);
                for (z, &c) in active.iter().enumerate() {
                    for &d in &active[z + 1..] {
                        let shares = c == a || c == b || d == a || d == b;
                        if !shares || (c, d) == (a, b) {
                            continue;
                        }
                        if repartition_pair((c, d), targets, sizes, owner, volume, tol) && total(volume) < before - tol
                        {
                            return true;
                        }
                    }
                }
                owner.copy_from_slice(&saved_owner);
                volume.copy_from_slice(&saved_volume);
            }
        }
    }
    false
}

/// Subset sums of `sizes`, as (sum, mask).
fn subset_sums(part: &[f64], shift: usize) -> Vec<(f64, u64)> {
    let mut out = vec![(0.0, 0u64)];
    for (bit, &p) in part.iter().enumerate() {
        let len = out.len();
        for i in 0..len {
            let (s, mask) = out[i];
            out.push((s + p, mask | 1 << (bit + shift)));
        }
    }
    out
}

/// Up to `cap` subsets whose sum lies in `range`.
fn subsets_in_range(sizes: &[f64], range: (f64, f64), cap: usize) -> Vec<u64> {
    let half = sizes.len() / 2;
    let left = subset_sums(&sizes[..half], 0);
    let mut right = subset_sums(&sizes[half..], half);
    right.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut found = Vec::new();
    for &(ls, lmask) in &left {
        let from = right.partition_point(|r| r.0 < range.0 - ls);
        for &(rs, rmask) in &right[from..] {
            if ls + rs > range.1 {
                break;
            }
            found.push(lmask | rmask);
            if found.len() == cap {
                return found;
            }
        }
    }
    found
}

/// Subset minimizing a convex function of its sum whose minimum lies at
/// `aim`, by meet in the middle.
fn best_subset(sizes: &[f64], aim: f64, cost: impl Fn(f64) -> f64) -> (u64, f64) {
    let half = sizes.len() / 2;
    let left = subset_sums(&sizes[..half], 0);
    let mut right = subset_sums(&sizes[half..], half);
    right.sort_by(|x, y| x.0.total_cmp(&y.0));
    // For a fixed left sum the best right sum is a neighbour of `aim - left`.
    let mut best = (0u64, 0.0, f64::INFINITY);
    for &(ls, lmask) in &left {
        let at = right.partition_point(|r| r.0 < aim - ls);
        for &(rs, rmask) in &right[at.saturating_sub(1)..(at + 1).min(right.len())] {
            let c = cost(ls + rs);
            if c < best.2 {
                best = (lmask | rmask, ls + rs, c);
            }
        }
    }
    (best.0, best.1)
}

/// Minimum-error assignment by branch and bound. Test oracle for
/// [`discretize`]; at most [`EXHAUSTIVE_MAX_TASKS`] tasks.
pub fn discretize_exhaustive(fractions: &[f64], sizes: &[f64]) -> Result<DiscreteRow> {
    if sizes.len() > EXHAUSTIVE_MAX_TASKS {
        return Err(Error::TooLarge {
            what: "exhaustive discretization (tasks)",
            m: sizes.len(),
            limit: EXHAUSTIVE_MAX_TASKS,
        });
    }
    let targets = targets_of(fractions, sizes)?;
    let incumbent = greedy_local_search(&targets, sizes);
    let mut search = Search {
        order: by_size_desc(sizes),
        targets: &targets,
        sizes,
        volume: vec![0.0; targets.len()],
        chosen: vec![0; sizes.len()],
        best_error: DiscreteRow::build(targets.clone(), sizes, &incumbent).total_error(),
        best: incumbent,
        tol: 1e-12 * sizes.iter().sum::<f64>(),
    };
    let remaining = sizes.iter().sum();
    search.descend(0, remaining);
    let best = search.best;
    Ok(DiscreteRow::build(targets, sizes, &best))
}

struct Search<'a> {
    order: Vec<usize>,
    targets: &'a [f64],
    sizes: &'a [f64],
    volume: Vec<f64>,
    chosen: Vec<usize>,
    best: Vec<usize>,
    best_error: f64,
    tol: f64,
}

impl Search<'_> {
    /// The final error is twice the total overflow, and overflow can only
    /// grow: by what is already over target, plus whatever remaining volume
    /// cannot fit into the open deficits.
    fn lower_bound(&self, remaining: f64) -> f64 {
        let (mut over, mut deficit) = (0.0, 0.0);
        for (v, t) in self.volume.iter().zip(self.targets) {
            if v > t {
                over += v - t;
            } else {
                deficit += t - v;
            }
        }
        2.0 * (over + (remaining - deficit).max(0.0))
    }

    fn descend(&mut self, depth: usize, remaining: f64) {
        if self.lower_bound(remaining) >= self.best_error - self.tol {
            return;
        }
        if depth == self.order.len() {
            let error: f64 = self.volume.iter().zip(self.targets).map(|(v, t)| (v - t).abs()).sum();
            if error < self.best_error - self.tol {
                self.best_error = error;
                for (d, &k) in self.order.iter().enumerate() {
                    self.best[k] = self.chosen[d];
                }
            }
            return;
        }
        let k = self.order[depth];
        let p = self.sizes[k];
        // Equal-sized consecutive tasks are interchangeable.
        let first = if depth > 0 && self.sizes[self.order[depth - 1]] == p {
            self.chosen[depth - 1]
        } else {
            0
        };
        for j in first..self.targets.len() {
            // Servers in the same state lead to mirror-image subtrees.
            let twin = (first..j).any(|i| self.volume[i] == self.volume[j] && self.targets[i] == self.targets[j]);
            if twin {
                continue;
            }
            self.chosen[depth] = j;
            self.volume[j] += p;
            self.descend(depth + 1, remaining - p);
            self.volume[j] -= p;
        }
    }
}

/// Discretizes every organization of `state` against its own tasks. The
/// state must have been solved for `tasks.loads()`.
pub fn discretize_state(state: &RelayState, tasks: &TaskSet) -> Result<DiscreteAssignment> {
    if state.m() != tasks.m() {
        return Err(Error::DimensionMismatch {
            expected: state.m(),
            got: tasks.m(),
        });
    }
    state.check_conservation(&tasks.loads()?)?;
    let fractions = state.fractions();
    let rows = (0..tasks.m())
        .map(|i| {
            if tasks.tasks(i).is_empty() {
                let m = state.m();
                Ok(DiscreteRow {
                    targets: vec![0.0; m],
                    subsets: vec![Vec::new(); m],
                    errors: vec![0.0; m],
                })
            } else {
                discretize(&fractions[i], tasks.tasks(i))
            }
        })
        .collect::<Result<_>>()?;
    Ok(DiscreteAssignment { rows })
}

/// How the capped fractional problem is solved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "solver", rename_all = "kebab-case")]
pub enum ReplicationSolver {
    Central(SolverSettings),
    Mine { settings: MineSettings, seed: u64 },
}

/// Optimizes the total cost with every ρ_ij capped at `1/r`.
pub fn solve_with_replication(
    topo: &Topology,
    loads: &LoadProfile,
    r: usize,
    solver: &ReplicationSolver,
) -> Result<RelayState> {
    if r == 0 || r > topo.m() {
        return Err(Error::InfeasibleReplication { r, available: topo.m() });
    }
    match solver {
        ReplicationSolver::Central(settings) => Ok(solve_central_capped(topo, loads, settings, r)?.state),
        ReplicationSolver::Mine { settings, seed } => {
            let settings = MineSettings {
                replication: r,
                ..settings.clone()
            };
            Ok(run_to_fixpoint(topo, loads, &settings, *seed)?.state)
        }
    }
}

/// Copies of one organization's tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationPlan {
    pub r: usize,
    pub fractions: Vec<f64>,
    /// Exactly `r` distinct servers per task, in increasing order.
    pub placements: Vec<Vec<usize>>,
}

/// Systematic sampling over the inclusion probabilities `r·ρ_j`: one uniform
/// offset per task, `r` equally spaced points, and every server whose
/// interval holds a point gets a copy.
pub fn sample_placements(fractions: &[f64], r: usize, n_tasks: usize, seed: u64) -> Result<ReplicationPlan> {
    let m = fractions.len();
    if r == 0 || r > m {
        return Err(Error::InfeasibleReplication { r, available: m });
    }
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidState("fractions must be nonnegative and sum to 1".into()));
    }
    let cap = 1.0 / r as f64;
    if let Some(j) = fractions.iter().position(|&f| f > cap + 1e-9) {
        return Err(Error::InvalidState(format!(
            "fraction {} on server {j} exceeds the replication cap 1/{r}",
            fractions[j]
        )));
    }
    let pi: Vec<f64> = fractions.iter().map(|f| (r as f64 * f / sum).min(1.0)).collect();
    let mut cumulative = Vec::with_capacity(m + 1);
    cumulative.push(0.0);
    for p in &pi {
        cumulative.push(cumulative.last().unwrap() + p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let placements = (0..n_tasks)
        .map(|_| {
            let u: f64 = rng.random();
            // Number of points u + k (k integer) in [lo, hi) is ceil(hi - u) - ceil(lo - u).
            let hits = |j: usize| (cumulative[j + 1] - u).ceil() - (cumulative[j] - u).ceil();
            let mut chosen: Vec<usize> = (0..m).filter(|&j| hits(j) >= 1.0).collect();
            repair(&mut chosen, &pi, r);
            chosen
        })
        .collect();
    Ok(ReplicationPlan {
        r,
        fractions: fractions.to_vec(),
        placements,
    })
}

/// Rounding in the cumulative sums can leave a copy short or over; fix by
/// probability order. Happens with probability ~0.
fn repair(chosen: &mut Vec<usize>, pi: &[f64], r: usize) {
    while chosen.len() > r {
        let (pos, _) = chosen
            .iter()
            .enumerate()
            .min_by(|a, b| pi[*a.1].total_cmp(&pi[*b.1]))
            .unwrap();
        chosen.remove(pos);
    }
    while chosen.len() < r {
        let extra = (0..pi.len())
            .filter(|j| !chosen.contains(j))
            .max_by(|&a, &b| pi[a].total_cmp(&pi[b]).then(b.cmp(&a)))
            .unwrap();
        chosen.push(extra);
        chosen.sort_unstable();
    }
}
