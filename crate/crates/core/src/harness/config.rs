//! Pipeline configuration: a TOML file layered over built-in defaults, then environment variables
//! (`SQLAGENT_SECTION__KEY=value`), then `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::generation::EpisodeConfig;
use crate::grpo::GrpoConfig;
use crate::policy::{RemoteConfig, SamplingParams};
use crate::validation::{Strategy, VerifierConfig};

pub const ENV_PREFIX: &str = "SQLAGENT_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Remote(RemoteConfig),
    /// Replays a recorded exchange file.
    Script { path: PathBuf },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Remote(RemoteConfig::default())
    }
}

/// Backends per agent role; roles left unset share the generator backend.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    pub generator: BackendConfig,
    pub grounder: Option<BackendConfig>,
    pub verifier: Option<BackendConfig>,
    pub judge: Option<BackendConfig>,
    /// Untuned model whose candidates are pooled when building verifier data.
    pub base: Option<BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub tasks: PathBuf,
    pub db_root: PathBuf,
    pub exclusions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingStage {
    pub enabled: bool,
    pub sampling: SamplingParams,
}

impl Default for GroundingStage {
    fn default() -> Self {
        Self {
            enabled: true,
            sampling: SamplingParams::greedy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationStage {
    pub max_turns: usize,
    pub row_cap: usize,
    pub candidates: usize,
    pub timeout_secs: u64,
    pub max_new_tokens: u32,
    pub sampling: SamplingParams,
}

impl Default for GenerationStage {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        Self {
            max_turns: e.max_turns,
            row_cap: e.row_cap.get(),
            candidates: 8,
            timeout_secs: e.timeout.as_secs(),
            max_new_tokens: e.max_new_tokens,
            sampling: e.sampling,
        }
    }
}

impl GenerationStage {
    pub fn episode(&self) -> EpisodeConfig {
        self.episode_with(self.sampling)
    }

    pub fn episode_with(&self, sampling: SamplingParams) -> EpisodeConfig {
        EpisodeConfig {
            max_turns: self.max_turns,
            row_cap: std::num::NonZeroUsize::new(self.row_cap).expect("validated row_cap"),
            sampling,
            timeout: std::time::Duration::from_secs(self.timeout_secs),
            max_new_tokens: self.max_new_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionStage {
    /// Selector whose choices define the reported execution accuracy.
    pub strategy: Strategy,
    /// Additional selectors scored on the same candidates.
    pub compare: Vec<Strategy>,
    pub rounds: usize,
    pub sampling: SamplingParams,
    pub judge_sampling: SamplingParams,
}

impl Default for SelectionStage {
    fn default() -> Self {
        let v = VerifierConfig::default();
        Self {
            strategy: Strategy::Verifier,
            compare: Vec::new(),
            rounds: v.rounds,
            sampling: v.sampling,
            judge_sampling: SamplingParams::greedy(),
        }
    }
}

impl SelectionStage {
    pub fn verifier(&self) -> VerifierConfig {
        VerifierConfig {
            rounds: self.rounds,
            sampling: self.sampling,
        }
    }

    /// The primary strategy followed by the comparison strategies, without repeats.
    pub fn strategies(&self) -> Vec<Strategy> {
        let mut out = vec![self.strategy];
        for s in &self.compare {
            if !out.contains(s) {
                out.push(*s);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationStage {
    pub pass_at: Vec<usize>,
}

impl Default for EvaluationStage {
    fn default() -> Self {
        Self { pass_at: vec![1, 8] }
    }
}

/// RL settings handed to the external trainer alongside exported records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingStage {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rollout_sampling: SamplingParams,
    pub rollouts_per_question: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub std_floor: f64,
}

impl Default for TrainingStage {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            batch_size: 128,
            rollout_sampling: SamplingParams {
                temperature: 0.6,
                top_p: 0.95,
                top_k: 0,
                seed: Some(0),
            },
            rollouts_per_question: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.001,
            std_floor: 1e-6,
        }
    }
}

impl TrainingStage {
    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            clip_epsilon: self.clip_epsilon,
            kl_beta: self.kl_beta,
            std_floor: self.std_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierDataStage {
    pub candidates_per_question: usize,
    pub sampling: SamplingParams,
    pub rng_seed: u64,
}

impl Default for VerifierDataStage {
    fn default() -> Self {
        Self {
            candidates_per_question: 16,
            sampling: SamplingParams {
                temperature: 0.7,
                top_p: 0.9,
                top_k: 50,
                seed: Some(0),
            },
            rng_seed: 0,
        }
    }
}

/// Fine-tuning settings recorded for the external verifier trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierSftStage {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_scheduler: String,
    pub batch_size: usize,
}

impl Default for VerifierSftStage {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 1e-5,
            lr_scheduler: "cosine".into(),
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub output_dir: PathBuf,
    /// Worker threads per stage; 0 uses one per core.
    pub workers: usize,
    pub data: DataConfig,
    pub backends: BackendsConfig,
    pub grounding: GroundingStage,
    pub generation: GenerationStage,
    pub selection: SelectionStage,
    pub evaluation: EvaluationStage,
    pub training: TrainingStage,
    pub verifier_data: VerifierDataStage,
    pub verifier_sft: VerifierSftStage,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            workers: 0,
            data: DataConfig::default(),
            backends: BackendsConfig::default(),
            grounding: GroundingStage::default(),
            generation: GenerationStage::default(),
            selection: SelectionStage::default(),
            evaluation: EvaluationStage::default(),
            training: TrainingStage::default(),
            verifier_data: VerifierDataStage::default(),
            verifier_sft: VerifierSftStage::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.generation.max_turns == 0 {
            return bad("generation.max_turns must be at least 1");
        }
        if self.generation.row_cap == 0 {
            return bad("generation.row_cap must be at least 1");
        }
        if self.generation.candidates == 0 {
            return bad("generation.candidates must be at least 1");
        }
        if self.selection.rounds == 0 {
            return bad("selection.rounds must be at least 1");
        }
        if self.evaluation.pass_at.contains(&0) {
            return bad("evaluation.pass_at entries must be at least 1");
        }
        self.training
            .grpo()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Renders a config as TOML text.
pub fn to_toml(cfg: &Config) -> Result<String, ConfigError> {
    toml::to_string(cfg).map_err(|e| ConfigError::Invalid(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().ok_or_else(|| ConfigError::Invalid("empty key".into()))?;
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Builds a config from defaults, an optional file, `SQLAGENT_*` variables and `key=value` sets.
pub fn load_config<I>(file: Option<&Path>, env: I, sets: &[String]) -> Result<Config, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table =
        toml::Table::try_from(Config::default()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let user: toml::Table = toml::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        merge(&mut table, user);
    }
    let mut env_pairs: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_ascii_lowercase(), v)))
        .collect();
    env_pairs.sort();
    for (key, value) in env_pairs {
        let path: Vec<String> = key.split("__").map(String::from).collect();
        set_path(&mut table, &path, parse_scalar(&value))?;
    }
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override `{s}` is not key=value")))?;
        let path: Vec<String> = key.trim().split('.').map(String::from).collect();
        set_path(&mut table, &path, parse_scalar(value.trim()))?;
    }
    let cfg: Config = table.try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
