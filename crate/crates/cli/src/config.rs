use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crowd_prefrl::crowd::CrowdRanges;
use crowd_prefrl::env::{GoalGrid, PoolKind};
use crowd_prefrl::experiment::{ClusterScenario, SweepConfig};
use crowd_prefrl::policy::{ExperimentConfig, LabelSource};

/// Where `simulate` draws its queries from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// Random-policy segment pairs on the goal grid, ties rejected.
    GoalGrid,
    Conflicting,
    Aligned,
}

impl QuerySource {
    pub fn pool(self) -> Option<PoolKind> {
        match self {
            QuerySource::GoalGrid => None,
            QuerySource::Conflicting => Some(PoolKind::Conflicting),
            QuerySource::Aligned => Some(PoolKind::Aligned),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub m: usize,
    pub n_queries: usize,
    pub source: QuerySource,
    pub segment_length: usize,
    /// Scripted pool size (pool sources only).
    pub pool_size: usize,
    pub env: GoalGrid,
    pub ranges: CrowdRanges,
    /// Number of users following objective 1 (pool sources only).
    pub minority: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        Self {
            m: 15,
            n_queries: sweep.n_queries,
            source: QuerySource::GoalGrid,
            segment_length: sweep.segment_length,
            pool_size: 100,
            env: sweep.env,
            ranges: sweep.ranges,
            minority: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    /// Label matrix CSV as written by `simulate`.
    pub labels: Option<PathBuf>,
    /// Optional ground truth CSV (`query_id,truth`) for error reporting.
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSuiteConfig {
    pub runs: usize,
    pub methods: Vec<LabelSource>,
    pub crowd_size: usize,
    /// Crowds screened for the largest user-error spread.
    pub crowd_candidates: usize,
    pub probe_queries: usize,
    pub ranges: CrowdRanges,
    pub experiment: ExperimentConfig,
}

impl Default for TrainSuiteConfig {
    fn default() -> Self {
        Self {
            runs: 10,
            methods: LabelSource::ALL.to_vec(),
            crowd_size: 15,
            crowd_candidates: 30,
            probe_queries: 1000,
            ranges: CrowdRanges::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl TrainSuiteConfig {
    pub fn probe(&self) -> SweepConfig {
        SweepConfig {
            sizes: vec![self.crowd_size],
            crowds_per_size: self.crowd_candidates,
            n_queries: self.probe_queries,
            segment_length: self.experiment.segment_length,
            env: self.experiment.env.clone(),
            ranges: self.ranges,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Directory holding a `runs/` tree written by `train`. Defaults to the
    /// output directory.
    pub runs: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub aggregate: AggregateConfig,
    pub sweep: SweepConfig,
    pub cluster: ClusterScenario,
    pub train: TrainSuiteConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Default,
    User,
}

/// A config with every default filled in, plus where each value came from.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: Config,
    pub provenance: BTreeMap<String, Provenance>,
    /// Directory relative paths in the config are resolved against.
    pub base_dir: PathBuf,
}

/// Config-file problems; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn leaves(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&p, v, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Parses config text, layering it over the defaults. Unknown keys and type
/// errors are reported with the offending field path.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<Resolved> {
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError(format!("invalid config: {e}")))?;
    let mut merged = toml::Value::try_from(Config::default()).context("serializing defaults")?;
    merge(&mut merged, toml::Value::Table(user.clone()));
    let config: Config = merged
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(format!("invalid config: {}", e.to_string().trim_end())))?;

    let mut user_paths = Vec::new();
    leaves("", &toml::Value::Table(user), &mut user_paths);
    let mut all_paths = Vec::new();
    leaves("", &toml::Value::try_from(&config).context("serializing config")?, &mut all_paths);
    let provenance = all_paths
        .into_iter()
        .map(|p| {
            let source = if user_paths.iter().any(|u| u == &p) { Provenance::User } else { Provenance::Default };
            (p, source)
        })
        .collect();
    Ok(Resolved { config, provenance, base_dir: base_dir.to_path_buf() })
}

pub fn load(path: Option<&Path>) -> Result<Resolved> {
    match path {
        None => parse_config("", Path::new(".")),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
            parse_config(&text, p.parent().unwrap_or(Path::new(".")))
        }
    }
}

impl Resolved {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(&self.config)?)
    }

    /// SHA-256 of the canonical TOML rendering of the resolved config.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}
