//! The reference protocol: per seed, generate a training and a held-out
//! evaluation task set, distill expert demonstrations into an SFT policy and
//! post-train it with any [`Method`].

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{self, EvalReport};
use crate::pipeline::MiningConfig;
use crate::policy::{self, DemoDataset, FeatureConfig, Featurizer, OptimizerConfig, PolicyParameters, PolicySnapshot};
use crate::prm::{NoiseKind, RubricScorer, RubricWeights, StepScorer};
use crate::rng::{self, Purpose};
use crate::train::dpo::DpoConfig;
use crate::train::iterate::{self, IterationConfig, IterationInputs, IterationState, Method};
use crate::world::{self, TaskSpec, WorldConfig};

/// Offset mixed into a run seed to derive its held-out task set.
pub const EVAL_TASK_SALT: u64 = 0xE7A1_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub features: FeatureConfig,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub mix: [f64; 3],
    pub expert_epsilon: f64,
    pub sft: OptimizerConfig,
    pub dpo: DpoConfig,
    pub k: usize,
    pub gamma_low: f64,
    pub gamma_high: f64,
    pub trials_per_task: usize,
    pub max_pairs_per_step: Option<usize>,
    pub rounds: usize,
    pub eval_trials: usize,
    pub eta: f64,
    pub noise: NoiseKind,
    pub weights: RubricWeights,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            features: FeatureConfig::default(),
            train_tasks: 200,
            eval_tasks: 400,
            mix: [0.5, 0.3, 0.2],
            expert_epsilon: 0.05,
            sft: OptimizerConfig { step_size: 0.1, epochs: 300 },
            dpo: DpoConfig::default(),
            k: 5,
            gamma_low: 0.45,
            gamma_high: 0.65,
            trials_per_task: 1,
            max_pairs_per_step: None,
            rounds: 2,
            eval_trials: 1,
            eta: 0.0,
            noise: NoiseKind::Uniform,
            weights: RubricWeights::default(),
            seeds: vec![1, 2, 3],
        }
    }
}

impl ExperimentConfig {
    pub fn mining(&self) -> Result<MiningConfig> {
        Ok(MiningConfig {
            k: self.k,
            thresholds: crate::prm::SelectionThresholds::new(self.gamma_low, self.gamma_high)?,
            expert_epsilon: self.expert_epsilon,
            trials_per_task: self.trials_per_task,
            mode: Default::default(),
            max_pairs_per_step: self.max_pairs_per_step,
        })
    }

    pub fn iteration(&self, seed: u64) -> Result<IterationConfig> {
        Ok(IterationConfig {
            mining: self.mining()?,
            dpo: self.dpo,
            rounds: self.rounds,
            eval_trials: self.eval_trials,
            eval_seeds: vec![seed],
            master_seed: seed,
        })
    }

    pub fn scorer(&self) -> Result<RubricScorer> {
        RubricScorer::new(self.weights, self.eta, self.noise)
    }
}

/// Everything shared by the methods run under one seed.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub seed: u64,
    pub train_tasks: Vec<TaskSpec>,
    pub eval_tasks: Vec<TaskSpec>,
    pub featurizer: Featurizer,
    pub demos: DemoDataset,
    pub sft: PolicySnapshot,
    pub sft_eval: EvalReport,
}

/// Expert rollouts on every task, filtered to successes.
pub fn expert_demos(tasks: &[TaskSpec], epsilon: f64, seed: u64) -> Result<DemoDataset> {
    let mut demos = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        let s = rng::derive_seed(seed, Purpose::Demo, &[i as u64]);
        let traj = policy::expert_rollout(t, format!("{}/expert", t.task_id), epsilon, s)?;
        if traj.outcome == 1 {
            demos.push((t.task_id.clone(), traj));
        }
    }
    DemoDataset::new(demos)
}

/// Training and held-out evaluation tasks of one seed.
pub fn task_sets(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
    Ok((
        world::generate_tasks(cfg.train_tasks, cfg.mix, &cfg.world, seed)?,
        world::generate_tasks(cfg.eval_tasks, cfg.mix, &cfg.world, seed ^ EVAL_TASK_SALT)?,
    ))
}

pub fn sft_from_scratch(
    cfg: &ExperimentConfig,
    featurizer: &Featurizer,
    tasks: &[TaskSpec],
    demos: &DemoDataset,
) -> Result<(PolicyParameters, Vec<f64>)> {
    let zeros = PolicyParameters::zeros(featurizer.space.size(), featurizer.dim());
    policy::sft_train(&zeros, featurizer, &policy::task_index(tasks), demos, &cfg.sft)
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let (train_tasks, eval_tasks) = task_sets(cfg, seed)?;
    let featurizer = Featurizer::new(cfg.features.clone(), cfg.world.space())?;
    let demos = expert_demos(&train_tasks, cfg.expert_epsilon, seed)?;
    let (params, _) = sft_from_scratch(cfg, &featurizer, &train_tasks, &demos)?;
    let sft_eval = metrics::evaluate(&params, &featurizer, &eval_tasks, cfg.eval_trials, &[seed], "sft", 0)?;
    Ok(SeedSetup { seed, train_tasks, eval_tasks, featurizer, demos, sft: PolicySnapshot::new(params, 0, "sft"), sft_eval })
}

pub fn run_method(cfg: &ExperimentConfig, setup: &SeedSetup, method: Method, scorer: &dyn StepScorer) -> Result<IterationState> {
    let inputs = IterationInputs {
        train_tasks: &setup.train_tasks,
        eval_tasks: &setup.eval_tasks,
        featurizer: &setup.featurizer,
        scorer,
        expert_successes: &setup.demos,
    };
    iterate::iterate(method, setup.sft.clone(), &inputs, &cfg.iteration(setup.seed)?)
}

/// Final success rate of a method under each seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub per_seed: Vec<f64>,
    /// Success after each round, averaged over seeds (index 0 is SFT).
    pub curve: Vec<f64>,
}

impl MethodSummary {
    pub fn from_states(states: &[IterationState]) -> Self {
        let rounds = states.iter().map(|s| s.evals.len()).min().unwrap_or(0);
        Self {
            method: states.first().map(|s| s.method.label().to_string()).unwrap_or_default(),
            per_seed: states.iter().map(|s| s.evals.last().map_or(0.0, EvalReport::success)).collect(),
            curve: (0..rounds).map(|r| metrics::mean(&states.iter().map(|s| s.evals[r].success()).collect::<Vec<_>>())).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        metrics::mean(&self.per_seed)
    }
}
