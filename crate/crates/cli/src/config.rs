use std::fmt;
use std::path::{Path, PathBuf};

use delaylb::central::SolverSettings;
use delaylb::discrete::ReplicationSolver;
use delaylb::experiment::{ConvergenceGrid, CyclesGrid, PoaGrid};
use delaylb::mine::MineSettings;
use delaylb::scenario::{complete_latency_matrix, generate, read_latency_file, ScenarioSpec, TopologyKind};
use delaylb::selfish::NashSettings;
use delaylb::{LoadProfile, Topology};
use serde::{Deserialize, Serialize};

/// Problems with the user's input, as opposed to numerical failures.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    ConfigError(message.into()).into()
}

/// An instance written out in full. Exactly one of `latency`, `latency_file`
/// and `c` describes the links.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub speeds: Vec<f64>,
    pub loads: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_file: Option<PathBuf>,
    /// Same latency between every pair of distinct servers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub iterations: usize,
    pub clean: bool,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            iterations: 20,
            clean: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub tasks: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateConfig {
    pub r: usize,
    /// Tasks sampled per organization.
    pub tasks: usize,
    pub solver: ReplicationSolver,
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        ReplicateConfig {
            r: 2,
            tasks: 100,
            solver: ReplicationSolver::Central(SolverSettings::default()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub scenario: Option<ScenarioSpec>,
    pub instance: Option<InstanceConfig>,
    pub solver: SolverSettings,
    pub mine: MineSettings,
    pub nash: NashSettings,
    pub converge: ConvergenceGrid,
    pub cycles: CyclesGrid,
    pub poa: PoaGrid,
    pub bound: BoundConfig,
    pub round: RoundConfig,
    pub replicate: ReplicateConfig,
}

impl Config {
    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Config> {
        let mut config: Config = toml::from_str(text).map_err(|e| config_error(format!("config: {e}")))?;
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::parse(&text, base)
    }

    /// Makes every file reference relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_kind = |k: &mut TopologyKind| {
            if let TopologyKind::LatencyFile { path } = k {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        if let Some(spec) = &mut self.scenario {
            fix_kind(&mut spec.topology);
        }
        if let Some(inst) = &mut self.instance {
            if let Some(p) = &mut inst.latency_file {
                fix(p);
            }
        }
        self.converge.topologies.iter_mut().for_each(fix_kind);
        self.cycles.grid.topologies.iter_mut().for_each(fix_kind);
        self.poa.topologies.iter_mut().for_each(fix_kind);
        if let Some(p) = &mut self.round.tasks {
            fix(p);
        }
    }

    /// The single instance used by `solve`, `mine`, `nash`, `bound-trace`,
    /// `round` and `replicate`.
    pub fn instance(&self, seed: Option<u64>) -> anyhow::Result<(Topology, LoadProfile)> {
        match (&self.instance, &self.scenario) {
            (Some(_), Some(_)) => Err(config_error("give either [instance] or [scenario], not both")),
            (Some(inst), None) => build_instance(inst),
            (None, Some(spec)) => {
                let mut spec = spec.clone();
                if let Some(seed) = seed {
                    spec.seed = seed;
                }
                Ok(generate(&spec)?)
            }
            (None, None) => Err(config_error("the config needs an [instance] or a [scenario] section")),
        }
    }
}

pub fn build_instance(inst: &InstanceConfig) -> anyhow::Result<(Topology, LoadProfile)> {
    let m = inst.speeds.len();
    let latency = match (&inst.latency, &inst.latency_file, inst.c) {
        (Some(matrix), None, None) => matrix.clone(),
        (None, Some(path), None) => complete_latency_matrix(&read_latency_file(path)?),
        (None, None, Some(c)) => (0..m)
            .map(|i| (0..m).map(|j| if i == j { 0.0 } else { c }).collect())
            .collect(),
        _ => return Err(config_error("[instance] needs exactly one of latency, latency_file, c")),
    };
    if inst.loads.len() != m {
        return Err(config_error(format!(
            "[instance] has {m} speeds but {} loads",
            inst.loads.len()
        )));
    }
    Ok((
        Topology::new(inst.speeds.clone(), latency)?,
        LoadProfile::new(inst.loads.clone())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let config = Config::parse("", Path::new(".")).unwrap();
        assert_eq!(config, Config::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let err = Config::parse("seed = 1\n\n[solver]\nbogus = 3\n", Path::new(".")).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("line 4"), "{text}");
    }

    #[test]
    fn homogeneous_instance() {
        let config = Config::parse("[instance]\nspeeds = [1, 2]\nloads = [2, 0]\nc = 5\n", Path::new(".")).unwrap();
        let (topo, loads) = config.instance(None).unwrap();
        assert_eq!(topo.latency(0, 1), 5.0);
        assert_eq!(topo.speed(1), 2.0);
        assert_eq!(loads.own(), &[2.0, 0.0]);
    }

    #[test]
    fn latency_paths_resolve_against_the_config() {
        let text = "[scenario]\nm = 2\ntopology = { kind = \"latency-file\", path = \"lat.txt\" }\n\
                    speeds = { kind = \"constant\", s = 1 }\nloads = { kind = \"uniform\", mean = 1 }\n";
        let config = Config::parse(text, Path::new("/data")).unwrap();
        let spec = config.scenario.unwrap();
        assert_eq!(
            spec.topology,
            TopologyKind::LatencyFile {
                path: PathBuf::from("/data/lat.txt")
            }
        );
    }

    #[test]
    fn instance_needs_one_link_description() {
        let config = Config::parse("[instance]\nspeeds = [1]\nloads = [1]\n", Path::new(".")).unwrap();
        assert!(config.instance(None).is_err());
    }
}
