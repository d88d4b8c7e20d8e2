//! Run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use bandres::environment::EpisodeConfig;
use bandres::price_data::SynthConfig;
use bandres::training::{AgentSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub data: DataConfig,
    pub synthetic: SynthConfig,
    pub episode: EpisodeConfig,
    pub agent: AgentSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            output_dir: PathBuf::from("out"),
            precision: Precision::F32,
            data: DataConfig::default(),
            synthetic: SynthConfig::default(),
            episode: EpisodeConfig::default(),
            agent: AgentSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

/// Where the price book comes from. With neither path set, a synthetic
/// book is generated from `[synthetic]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Raw spot-price history (CSV).
    pub spot_history: Option<PathBuf>,
    /// A book previously written by `ingest`.
    pub price_book: Option<PathBuf>,
    /// Operator streams as `zone/instance_type`, in operator order.
    pub streams: Vec<String>,
    /// RFC3339 lower bound (inclusive) on record timestamps.
    pub from: Option<String>,
    /// RFC3339 upper bound (exclusive).
    pub to: Option<String>,
    pub timestep_seconds: Option<u32>,
    /// Seed of the synthetic random walk.
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spot_history: None,
            price_book: None,
            streams: Vec::new(),
            from: None,
            to: None,
            timestep_seconds: None,
            synthetic_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Base seed of the paired evaluation episodes.
    pub seed: u64,
    /// Worker threads; `BANDRES_THREADS` overrides, 0 means all cores.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 200, seed: 0, threads: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub episodes: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { episodes: 20 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        Ok(cfg)
    }

    /// Checks everything a command relies on before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id == ".." {
            return Err(CliError::Config(format!("run_id `{}` is not a plain directory name", self.run_id)));
        }
        if self.data.spot_history.is_some() && self.data.price_book.is_some() {
            return Err(CliError::Config("set at most one of data.spot_history and data.price_book".into()));
        }
        for p in [&self.data.spot_history, &self.data.price_book].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        for s in &self.data.streams {
            parse_stream(s)?;
        }
        self.episode.validate()?;
        self.train.validate()?;
        self.agent.target_rule().validate()?;
        if self.eval.episodes == 0 {
            return Err(CliError::Config("eval.episodes must be positive".into()));
        }
        Ok(())
    }

    /// Apply `--seed` to both the training and the evaluation streams.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn threads(&self) -> usize {
        let configured = std::env::var("BANDRES_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(self.eval.threads);
        if configured > 0 {
            configured
        } else {
            std::thread::available_parallelism().map_or(1, usize::from)
        }
    }
}

pub fn parse_stream(s: &str) -> Result<bandres::price_data::StreamKey, CliError> {
    match s.split_once('/') {
        Some((zone, kind)) if !zone.is_empty() && !kind.is_empty() => {
            Ok(bandres::price_data::StreamKey::new(zone, kind))
        }
        _ => Err(CliError::Config(format!("stream `{s}` is not `zone/instance_type`"))),
    }
}

pub fn parse_time(s: &str) -> Result<i64, CliError> {
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|t| t.timestamp())
        .map_err(|e| CliError::Config(format!("timestamp `{s}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn shipped_template_matches_defaults() {
        let cfg: RunConfig = toml::from_str(include_str!("../../../configs/default.toml")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[episode]\nmno_cuont = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[synthetic]\nvolatilty = 1.0").is_err());
    }

    #[test]
    fn sections_reach_module_configs() {
        let cfg: RunConfig = toml::from_str(
            "precision = \"f64\"\n[data]\nsynthetic_seed = 4\n[synthetic]\nvolatility = 0.7\n[train]\nepochs = 3\n[agent]\nagent = \"dqn\"",
        )
        .unwrap();
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(cfg.data.synthetic_seed, 4);
        assert_eq!(cfg.synthetic.volatility, 0.7);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.agent.agent, bandres::agents::AgentKind::Dqn);
    }

    #[test]
    fn missing_paths_fail_validation() {
        let cfg: RunConfig = toml::from_str("[data]\nspot_history = \"/nonexistent/spot.csv\"").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(m)) if m.contains("/nonexistent/spot.csv")));
    }

    #[test]
    fn streams_need_both_parts() {
        assert!(parse_stream("us-east-1a/m5.large").is_ok());
        assert!(parse_stream("us-east-1a").is_err());
        assert!(parse_stream("/m5").is_err());
    }
}
