//! Run configuration: one TOML file, every key optional, every key
//! overridable from the command line by its dotted name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actor::ActorConfig;
use crate::conformal::CalibrationConfig;
use crate::critics::{CriticConfig, SafetyBackup};
use crate::env::{DEFAULT_DT, DEFAULT_HORIZON, DEFAULT_N_TRAJ};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::oracle::OracleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    pub horizon: usize,
    pub n_traj: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            horizon: DEFAULT_HORIZON,
            n_traj: DEFAULT_N_TRAJ,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub horizon: usize,
    /// Candidate counts used by `eval all`.
    pub rejection_n: Vec<usize>,
    /// Candidates with pessimistic `Q_c` below this are feasible.
    pub rejection_delta: f32,
    /// Record mean per-action latency (makes reports machine-dependent).
    pub timing: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 500,
            horizon: DEFAULT_HORIZON,
            rejection_n: vec![1, 4, 16],
            rejection_delta: 0.0,
            timing: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub calls: usize,
    pub warmup: usize,
    pub rejection_n: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            calls: 10_000,
            warmup: 500,
            rejection_n: vec![1, 16],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleRunConfig {
    pub n1: usize,
    pub n2: usize,
    pub directions: usize,
    pub gamma: f64,
    pub tol: f64,
    pub max_iterations: usize,
    pub backup: SafetyBackup,
    /// Probe states for the sign comparison against the learned critic.
    pub probes: usize,
    pub dead_band: f64,
    pub seed: u64,
}

impl Default for OracleRunConfig {
    fn default() -> Self {
        let g = OracleConfig::default();
        Self {
            n1: g.n1,
            n2: g.n2,
            directions: g.directions,
            gamma: g.gamma,
            tol: g.tol,
            max_iterations: g.max_iterations,
            backup: g.backup,
            probes: 2000,
            dead_band: crate::oracle::DEFAULT_DEAD_BAND,
            seed: 0,
        }
    }
}

impl OracleRunConfig {
    /// Grid settings; the time step comes from the environment.
    pub fn grid(&self, dt: f64) -> OracleConfig {
        OracleConfig {
            n1: self.n1,
            n2: self.n2,
            directions: self.directions,
            gamma: self.gamma,
            dt,
            tol: self.tol,
            max_iterations: self.max_iterations,
            backup: self.backup,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Reports, metrics and (by default) everything else.
    pub out_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub critics: CriticConfig,
    pub flow: FlowConfig,
    pub actor: ActorConfig,
    pub calibration: CalibrationConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub oracle: OracleRunConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("bad TOML: {}", e.message())))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets every phase seed to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.env.seed = seed;
        self.critics.seed = seed;
        self.flow.seed = seed;
        self.actor.seed = seed;
        self.calibration.seed = seed;
        self.eval.seed = seed;
        self.bench.seed = seed;
        self.oracle.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.env;
        if !(e.dt > 0.0 && e.dt.is_finite()) || e.horizon == 0 || e.n_traj == 0 {
            return Err(Error::Config("env needs dt > 0, horizon >= 1, n_traj >= 1".into()));
        }
        self.critics.validate()?;
        self.flow.validate()?;
        self.actor.validate()?;
        self.calibration.validate()?;
        self.oracle.grid(self.env.dt).validate()?;
        if self.eval.n_episodes == 0 || self.eval.horizon == 0 {
            return Err(Error::Config("eval needs n_episodes >= 1 and horizon >= 1".into()));
        }
        if self.eval.rejection_n.contains(&0) || self.bench.rejection_n.contains(&0) {
            return Err(Error::Config("rejection sampling needs N >= 1".into()));
        }
        if self.bench.calls == 0 {
            return Err(Error::Config("bench needs calls >= 1".into()));
        }
        if !(self.oracle.dead_band >= 0.0) {
            return Err(Error::Config("oracle dead band must be >= 0".into()));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/default"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.out_dir().join("checkpoints"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths
            .dataset
            .clone()
            .unwrap_or_else(|| self.out_dir().join("dataset.sfqd"))
    }
}

/// Sets `a.b.c = value`, creating intermediate tables. The value is read as a
/// TOML literal when it parses as one and as a plain string otherwise.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.critics.gamma, 0.99);
        assert_eq!(c.critics.tau, 0.9);
        assert_eq!(c.flow.k_steps, 10);
        assert_eq!(c.critics.hidden, vec![256, 256]);
        assert_eq!(c.critics.lr, 3e-4);
        assert_eq!(c.eval.n_episodes, 500);
        assert_eq!(c.env.n_traj * c.env.horizon, 1_000_000);
    }

    #[test]
    fn overrides_apply_by_dotted_name() {
        let ov = vec![
            ("critics.steps".to_string(), "1000".to_string()),
            ("actor.lambda".to_string(), "0.02".to_string()),
            ("oracle.n1".to_string(), "60".to_string()),
            ("paths.out_dir".to_string(), "/tmp/x".to_string()),
            ("critics.backup".to_string(), "max".to_string()),
        ];
        let c = RunConfig::from_toml_with_overrides("[critics]\nsteps = 5\n", &ov).unwrap();
        assert_eq!(c.critics.steps, 1000);
        assert_eq!(c.actor.lambda, 0.02);
        assert_eq!(c.oracle.n1, 60);
        assert_eq!(c.out_dir(), PathBuf::from("/tmp/x"));
        assert_eq!(c.critics.backup, crate::critics::SafetyBackup::Max);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in ["[critics]\ngamma = 1.5\n", "[nope]\nx = 1\n", "[critics]\nwidth = 3\n", "[eval]\nn_episodes = 0\n", "= broken"] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.set_seed(42);
        c.actor.lambda = 0.03;
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }
}
