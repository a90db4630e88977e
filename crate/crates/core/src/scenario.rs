//! Instance generation: topologies, speeds and initial loads.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LoadProfile, Topology, UNREACHABLE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TopologyKind {
    /// Latency `c` between every pair of distinct servers.
    Homogeneous { c: f64 },
    /// Matrix read from a file, completed by shortest paths.
    LatencyFile { path: PathBuf },
    /// Synthetic wide-area latencies: servers placed at random on a plane,
    /// latency growing with distance, a fraction of pairs left unmeasured and
    /// completed by shortest paths.
    Geographic {
        #[serde(default = "default_min_ms")]
        min_ms: f64,
        #[serde(default = "default_max_ms")]
        max_ms: f64,
        #[serde(default = "default_missing")]
        missing: f64,
    },
}

fn default_min_ms() -> f64 {
    10.0
}

fn default_max_ms() -> f64 {
    300.0
}

fn default_missing() -> f64 {
    0.2
}

impl TopologyKind {
    pub fn geographic() -> Self {
        TopologyKind::Geographic {
            min_ms: default_min_ms(),
            max_ms: default_max_ms(),
            missing: default_missing(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpeedKind {
    Constant { s: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LoadKind {
    /// I.i.d. uniform on `(0, 2 mean)`.
    Uniform { mean: f64 },
    /// I.i.d. exponential with the given mean.
    Exponential { mean: f64 },
    /// Everything on one randomly chosen server.
    Peak { total: f64 },
}

impl LoadKind {
    pub fn label(&self) -> &'static str {
        match self {
            LoadKind::Uniform { .. } => "uniform",
            LoadKind::Exponential { .. } => "exponential",
            LoadKind::Peak { .. } => "peak",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub m: usize,
    pub topology: TopologyKind,
    pub speeds: SpeedKind,
    pub loads: LoadKind,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSettings(msg.to_string()));
        if self.m == 0 {
            return bad("m must be positive");
        }
        match self.topology {
            TopologyKind::Homogeneous { c } if !(c >= 0.0 && c.is_finite()) => {
                return bad("latency must be finite and nonnegative")
            }
            TopologyKind::Geographic {
                min_ms,
                max_ms,
                missing,
            } if !(min_ms >= 0.0 && max_ms >= min_ms && (0.0..1.0).contains(&missing)) => {
                return bad("geographic latencies need 0 <= min_ms <= max_ms and missing in [0, 1)")
            }
            _ => {}
        }
        match self.speeds {
            SpeedKind::Constant { s } if !(s > 0.0 && s.is_finite()) => return bad("speed must be positive"),
            SpeedKind::Uniform { lo, hi } if !(lo > 0.0 && hi >= lo && hi.is_finite()) => {
                return bad("speed range must satisfy 0 < lo <= hi")
            }
            _ => {}
        }
        let positive = match self.loads {
            LoadKind::Uniform { mean } | LoadKind::Exponential { mean } => mean,
            LoadKind::Peak { total } => total,
        };
        if !(positive > 0.0 && positive.is_finite()) {
            return bad("load parameter must be positive");
        }
        Ok(())
    }
}

// Independent random streams per instance component.
const TOPOLOGY_STREAM: u64 = 1;
const SPEED_STREAM: u64 = 2;
const LOAD_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Builds the instance described by `spec`; identical specs give identical
/// instances.
pub fn generate(spec: &ScenarioSpec) -> Result<(Topology, LoadProfile)> {
    spec.validate()?;
    let m = spec.m;
    let speeds = sample_speeds(m, spec.speeds, &mut stream(spec.seed, SPEED_STREAM));
    let latency = match &spec.topology {
        TopologyKind::Homogeneous { c } => homogeneous_latency(m, *c),
        TopologyKind::LatencyFile { path } => {
            let partial = read_latency_file(path)?;
            if partial.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: partial.len(),
                });
            }
            complete_latency_matrix(&partial)
        }
        TopologyKind::Geographic {
            min_ms,
            max_ms,
            missing,
        } => geographic_latency(m, *min_ms, *max_ms, *missing, &mut stream(spec.seed, TOPOLOGY_STREAM)),
    };
    let topo = Topology::new(speeds, latency)?;
    let loads = LoadProfile::new(sample_loads(m, spec.loads, &mut stream(spec.seed, LOAD_STREAM)))?;
    Ok((topo, loads))
}

fn homogeneous_latency(m: usize, c: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| (0..m).map(|j| if i == j { 0.0 } else { c }).collect())
        .collect()
}

pub fn sample_speeds(m: usize, kind: SpeedKind, rng: &mut impl Rng) -> Vec<f64> {
    match kind {
        SpeedKind::Constant { s } => vec![s; m],
        SpeedKind::Uniform { lo, hi } if lo == hi => vec![lo; m],
        SpeedKind::Uniform { lo, hi } => (0..m).map(|_| rng.random_range(lo..hi)).collect(),
    }
}

pub fn sample_loads(m: usize, kind: LoadKind, rng: &mut impl Rng) -> Vec<f64> {
    match kind {
        LoadKind::Uniform { mean } => (0..m).map(|_| rng.random_range(0.0..2.0 * mean)).collect(),
        LoadKind::Exponential { mean } => (0..m).map(|_| -mean * (1.0 - rng.random::<f64>()).ln()).collect(),
        LoadKind::Peak { total } => {
            let mut loads = vec![0.0; m];
            loads[rng.random_range(0..m)] = total;
            loads
        }
    }
}

fn geographic_latency(m: usize, min_ms: f64, max_ms: f64, missing: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let points: Vec<(f64, f64)> = (0..m).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let diameter = std::f64::consts::SQRT_2;
    // A random spanning path is always measured so the completion stays connected.
    let mut order: Vec<usize> = (0..m).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let mut keep = vec![false; m * m];
    for w in order.windows(2) {
        keep[w[0] * m + w[1]] = true;
        keep[w[1] * m + w[0]] = true;
    }
    let mut partial = vec![vec![None; m]; m];
    for i in 0..m {
        partial[i][i] = Some(0.0);
        for j in i + 1..m {
            let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
            let d = (dx * dx + dy * dy).sqrt() / diameter;
            let jitter = 1.0 + 0.1 * rng.random::<f64>();
            let c = ((min_ms + (max_ms - min_ms) * d) * jitter).min(max_ms);
            let dropped = rng.random::<f64>() < missing;
            if keep[i * m + j] || !dropped {
                partial[i][j] = Some(c);
                partial[j][i] = Some(c);
            }
        }
    }
    complete_latency_matrix(&partial)
}

/// All-pairs shortest paths over the known entries. Pairs with no path get
/// [`UNREACHABLE`]; the diagonal is zero.
pub fn complete_latency_matrix(partial: &[Vec<Option<f64>>]) -> Vec<Vec<f64>> {
    let m = partial.len();
    let mut d: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        partial[i].get(j).copied().flatten().unwrap_or(UNREACHABLE)
                    }
                })
                .collect()
        })
        .collect();
    for k in 0..m {
        for i in 0..m {
            let dik = d[i][k];
            if !dik.is_finite() {
                continue;
            }
            for j in 0..m {
                let via = dik + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

fn format_err(line: usize, message: impl Into<String>) -> Error {
    Error::LatencyFormat {
        line,
        message: message.into(),
    }
}

fn parse_value(token: &str, line: usize) -> Result<Option<f64>> {
    if token == "?" {
        return Ok(None);
    }
    let v: f64 = token
        .parse()
        .map_err(|_| format_err(line, format!("invalid latency `{token}`")))?;
    if !(v >= 0.0) {
        return Err(format_err(line, format!("latency must be nonnegative, got {v}")));
    }
    Ok(Some(v))
}

/// Parses a latency file.
///
/// The first line holds `m`, optionally followed by `dense` or `sparse`.
/// A dense body has `m` rows of `m` values with `?` for unmeasured pairs; a
/// sparse body has lines `i j c`, mirrored when the reverse pair is absent.
/// Without a keyword the body is dense if it has `m` rows of `m` tokens and a
/// zero (or `?`) diagonal. Blank lines and `#` comments are ignored.
pub fn parse_latency_file(text: &str) -> Result<Vec<Vec<Option<f64>>>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (header_line, header) = lines.next().ok_or_else(|| format_err(1, "empty latency file"))?;
    let mut head = header.split_whitespace();
    let m: usize = head
        .next()
        .and_then(|t| t.parse().ok())
        .filter(|&m| m > 0)
        .ok_or_else(|| format_err(header_line, "header must start with the server count"))?;
    let layout = head.next();
    if let Some(extra) = head.next() {
        return Err(format_err(header_line, format!("unexpected `{extra}` in header")));
    }
    let body: Vec<(usize, Vec<&str>)> = lines.map(|(n, l)| (n, l.split_whitespace().collect())).collect();
    let dense = match layout {
        Some("dense") => true,
        Some("sparse") => false,
        Some(other) => return Err(format_err(header_line, format!("unknown layout `{other}`"))),
        None => {
            body.len() == m
                && body.iter().all(|(_, t)| t.len() == m)
                && body
                    .iter()
                    .enumerate()
                    .all(|(i, (_, t))| t[i] == "?" || t[i].parse::<f64>() == Ok(0.0))
        }
    };
    let mut matrix = vec![vec![None; m]; m];
    if dense {
        if body.len() != m {
            let line = body.last().map_or(header_line, |b| b.0);
            return Err(format_err(line, format!("expected {m} rows, found {}", body.len())));
        }
        for (i, (line, tokens)) in body.iter().enumerate() {
            if tokens.len() != m {
                return Err(format_err(
                    *line,
                    format!("expected {m} values, found {}", tokens.len()),
                ));
            }
            for (j, t) in tokens.iter().enumerate() {
                matrix[i][j] = parse_value(t, *line)?;
            }
            if matrix[i][i].is_some_and(|v| v != 0.0) {
                return Err(format_err(*line, "diagonal entries must be 0"));
            }
        }
    } else {
        let mut explicit = vec![false; m * m];
        for (line, tokens) in &body {
            let [i, j, c] = tokens.as_slice() else {
                return Err(format_err(*line, "expected `i j latency`"));
            };
            let index = |t: &str| -> Result<usize> {
                t.parse::<usize>()
                    .ok()
                    .filter(|&x| x < m)
                    .ok_or_else(|| format_err(*line, format!("server index `{t}` out of range")))
            };
            let (i, j) = (index(i)?, index(j)?);
            let c = parse_value(c, *line)?;
            if i == j && c.is_some_and(|v| v != 0.0) {
                return Err(format_err(*line, "diagonal entries must be 0"));
            }
            matrix[i][j] = c;
            explicit[i * m + j] = true;
            if !explicit[j * m + i] {
                matrix[j][i] = c;
            }
        }
    }
    for (i, row) in matrix.iter_mut().enumerate() {
        row[i] = Some(0.0);
    }
    Ok(matrix)
}

pub fn read_latency_file(path: &Path) -> Result<Vec<Vec<Option<f64>>>> {
    parse_latency_file(&std::fs::read_to_string(path)?)
}
