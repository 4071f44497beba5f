//! Run configuration: a TOML file with one table per concern. Absent keys
//! take their defaults, unknown keys are rejected, and every constraint
//! violation names the offending key.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::pipeline::PairSourceMode;
use crate::policy::{FeatureConfig, OptimizerConfig};
use crate::prm::{self, NoiseKind, RemoteOptions, RemoteScorer, RubricScorer, RubricWeights, StepScorer};
use crate::train::dpo::DpoConfig;
use crate::world::WorldConfig;

/// Environment variable overriding `prm.endpoint`.
pub const ENV_ENDPOINT: &str = "CSO_ENDPOINT";
/// Environment variable overriding `workers`.
pub const ENV_WORKERS: &str = "CSO_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksSection {
    pub train: usize,
    pub eval: usize,
    /// Proportions of L1, L2, L3 tasks.
    pub mix: [f64; 3],
}

impl Default for TasksSection {
    fn default() -> Self {
        Self { train: 200, eval: 400, mix: [0.5, 0.3, 0.2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub dim: usize,
    pub history_k: usize,
    pub hash_scale: f64,
    pub expert_epsilon: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        let f = FeatureConfig::default();
        Self { dim: f.dim, history_k: f.history_k, hash_scale: f.hash_scale, expert_epsilon: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrmMode {
    #[default]
    Rubric,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrmSection {
    pub mode: PrmMode,
    pub eta: f64,
    pub noise: NoiseKind,
    /// Trailing history entries shown to a remote scorer; absent shows all.
    pub window: Option<usize>,
    pub weights: RubricWeights,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub retry_budget: usize,
    pub backoff_ms: u64,
    pub max_inflight: usize,
}

impl Default for PrmSection {
    fn default() -> Self {
        let r = RemoteOptions::default();
        Self {
            mode: PrmMode::Rubric,
            eta: 0.0,
            noise: NoiseKind::Uniform,
            window: None,
            weights: RubricWeights::default(),
            endpoint: None,
            timeout_ms: r.timeout.as_millis() as u64,
            retry_budget: r.retry_budget,
            backoff_ms: r.backoff.as_millis() as u64,
            max_inflight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSection {
    pub k: usize,
    pub gamma_low: f64,
    pub gamma_high: f64,
    pub trials_per_task: usize,
    pub max_pairs_per_step: Option<usize>,
    pub mode: PairSourceMode,
}

impl Default for MiningSection {
    fn default() -> Self {
        Self { k: 5, gamma_low: 0.45, gamma_high: 0.65, trials_per_task: 1, max_pairs_per_step: None, mode: PairSourceMode::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterateSection {
    pub rounds: usize,
    pub eval_trials: usize,
}

impl Default for IterateSection {
    fn default() -> Self {
        Self { rounds: 2, eval_trials: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Master seeds; every command runs once per seed.
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub world: WorldConfig,
    pub tasks: TasksSection,
    pub policy: PolicySection,
    pub sft: OptimizerConfig,
    pub prm: PrmSection,
    pub mining: MiningSection,
    pub dpo: DpoConfig,
    pub iterate: IterateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        Self {
            output_dir: PathBuf::from("runs"),
            seeds: exp.seeds,
            workers: 0,
            world: exp.world,
            tasks: TasksSection::default(),
            policy: PolicySection::default(),
            sft: exp.sft,
            prm: PrmSection::default(),
            mining: MiningSection::default(),
            dpo: exp.dpo,
            iterate: IterateSection::default(),
        }
    }
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), message: message.into() }
}

/// Pull the field name out of serde's "unknown field `x`" message.
fn unknown_key(message: &str) -> Option<&str> {
    let rest = message.split("unknown field `").nth(1)?;
    rest.split('`').next()
}

impl RunConfig {
    /// Parse TOML text and validate. Environment overrides are not applied.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            match unknown_key(&message) {
                Some(key) => config_error(key, format!("unknown key: {message}")),
                None => {
                    let key = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
                    config_error(&key, message)
                }
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `CSO_ENDPOINT` and `CSO_WORKERS` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(endpoint) = lookup(ENV_ENDPOINT) {
            self.prm.endpoint = Some(endpoint);
        }
        if let Some(w) = lookup(ENV_WORKERS) {
            self.workers = w.trim().parse().map_err(|_| config_error(ENV_WORKERS, format!("not a worker count: `{w}`")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mining;
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(in_unit(m.gamma_low) && in_unit(m.gamma_high) && m.gamma_low < m.gamma_high) {
            return Err(config_error(
                "mining.gamma_low, mining.gamma_high",
                format!("need 0 <= gamma_low < gamma_high <= 1, got {} and {}", m.gamma_low, m.gamma_high),
            ));
        }
        if m.k == 0 {
            return Err(config_error("mining.k", "must be at least 1"));
        }
        if m.trials_per_task == 0 {
            return Err(config_error("mining.trials_per_task", "must be at least 1"));
        }
        if m.max_pairs_per_step == Some(0) {
            return Err(config_error("mining.max_pairs_per_step", "must be at least 1 when set"));
        }
        if !(self.dpo.beta.is_finite() && self.dpo.beta > 0.0) {
            return Err(config_error("dpo.beta", format!("must be positive, got {}", self.dpo.beta)));
        }
        if !(self.dpo.step_size.is_finite() && self.dpo.step_size > 0.0) {
            return Err(config_error("dpo.step_size", format!("must be positive, got {}", self.dpo.step_size)));
        }
        if !(self.sft.step_size.is_finite() && self.sft.step_size > 0.0) {
            return Err(config_error("sft.step_size", format!("must be positive, got {}", self.sft.step_size)));
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        let mix = self.tasks.mix;
        if mix.iter().any(|&p| !(p.is_finite() && p >= 0.0)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_error("tasks.mix", format!("must be nonnegative and sum to 1, got {mix:?}")));
        }
        if self.tasks.train == 0 {
            return Err(config_error("tasks.train", "must be at least 1"));
        }
        if self.tasks.eval == 0 {
            return Err(config_error("tasks.eval", "must be at least 1"));
        }
        if !in_unit(self.policy.expert_epsilon) {
            return Err(config_error("policy.expert_epsilon", format!("must lie in [0, 1], got {}", self.policy.expert_epsilon)));
        }
        if !(self.prm.eta.is_finite() && self.prm.eta >= 0.0) {
            return Err(config_error("prm.eta", format!("must be nonnegative, got {}", self.prm.eta)));
        }
        self.prm.weights.validate().map_err(|e| config_error("prm.weights", e.to_string()))?;
        if self.prm.mode == PrmMode::Remote && self.prm.endpoint.is_none() {
            return Err(config_error("prm.endpoint", format!("required when prm.mode = \"remote\" (or set {ENV_ENDPOINT})")));
        }
        if self.prm.retry_budget == 0 {
            return Err(config_error("prm.retry_budget", "must be at least 1"));
        }
        if self.prm.max_inflight == 0 {
            return Err(config_error("prm.max_inflight", "must be at least 1"));
        }
        if self.iterate.rounds == 0 {
            return Err(config_error("iterate.rounds", "must be at least 1"));
        }
        if self.iterate.eval_trials == 0 {
            return Err(config_error("iterate.eval_trials", "must be at least 1"));
        }
        Ok(())
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig { dim: self.policy.dim, history_k: self.policy.history_k, hash_scale: self.policy.hash_scale }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            world: self.world.clone(),
            features: self.features(),
            train_tasks: self.tasks.train,
            eval_tasks: self.tasks.eval,
            mix: self.tasks.mix,
            expert_epsilon: self.policy.expert_epsilon,
            sft: self.sft,
            dpo: self.dpo,
            k: self.mining.k,
            gamma_low: self.mining.gamma_low,
            gamma_high: self.mining.gamma_high,
            trials_per_task: self.mining.trials_per_task,
            max_pairs_per_step: self.mining.max_pairs_per_step,
            rounds: self.iterate.rounds,
            eval_trials: self.iterate.eval_trials,
            eta: self.prm.eta,
            noise: self.prm.noise,
            weights: self.prm.weights,
            seeds: self.seeds.clone(),
        }
    }

    pub fn scorer(&self) -> Result<Box<dyn StepScorer>> {
        match self.prm.mode {
            PrmMode::Rubric => Ok(Box::new(RubricScorer::new(self.prm.weights, self.prm.eta, self.prm.noise)?)),
            PrmMode::Remote => {
                let endpoint = self.prm.endpoint.clone().ok_or_else(|| config_error("prm.endpoint", "not set"))?;
                let options = RemoteOptions {
                    timeout: Duration::from_millis(self.prm.timeout_ms),
                    retry_budget: self.prm.retry_budget,
                    backoff: Duration::from_millis(self.prm.backoff_ms),
                    rubric_prompt: prm::rubric_prompt(&self.prm.weights),
                };
                Ok(Box::new(RemoteScorer::new(endpoint, options, self.prm.window, self.prm.max_inflight)))
            }
        }
    }

    /// Output directory of one seed.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed-{seed}"))
    }
}

/// Read, parse, apply environment overrides and validate.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut cfg = RunConfig::from_toml_str(&text)?;
    cfg.apply_env(|k| std::env::var(k).ok())?;
    cfg.validate()?;
    Ok(cfg)
}
