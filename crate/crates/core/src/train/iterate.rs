//! Multi-round refinement: each round mines fresh data with the current
//! policy, trains against the previous round's snapshot as reference and
//! evaluates the result.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::pipeline::{self, FailedTrajectorySet, MiningConfig, PairSourceMode, PreferenceDataset, Proposer, RoundContext, StepBranches};
use crate::policy::{self, DemoDataset, Featurizer, OptimizerConfig, PolicyParameters, PolicySnapshot};
use crate::prm::{CandidateCriticalStep, StepScorer};
use crate::train::baselines::{self, BaselineData, BaselineInputs, BaselineKind};
use crate::train::dpo::{self, DpoConfig, DpoObjective, EpochMetrics, TrajectoryPair};
use crate::world::{TaskSpec, Trajectory};

/// A post-training method run by [`iterate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cso(PairSourceMode),
    VerificationOnly,
    Baseline(BaselineKind),
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Cso(PairSourceMode::ExpertPosPolicyNeg) => "cso",
            Method::Cso(PairSourceMode::ExpertPosExpertNeg) => "cso_expert_neg",
            Method::Cso(PairSourceMode::PolicyPosPolicyNeg) => "cso_policy_pos",
            Method::VerificationOnly => "verification_only",
            Method::Baseline(k) => k.as_str(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let all = [
            Method::Cso(PairSourceMode::ExpertPosPolicyNeg),
            Method::Cso(PairSourceMode::ExpertPosExpertNeg),
            Method::Cso(PairSourceMode::PolicyPosPolicyNeg),
            Method::VerificationOnly,
            Method::Baseline(BaselineKind::Eto),
            Method::Baseline(BaselineKind::Rft),
            Method::Baseline(BaselineKind::StepDpo),
            Method::Baseline(BaselineKind::Ipr),
        ];
        all.into_iter().find(|m| m.label() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationConfig {
    pub mining: MiningConfig,
    pub dpo: DpoConfig,
    pub rounds: usize,
    pub eval_trials: usize,
    pub eval_seeds: Vec<u64>,
    pub master_seed: u64,
}

pub struct IterationInputs<'a> {
    pub train_tasks: &'a [TaskSpec],
    pub eval_tasks: &'a [TaskSpec],
    pub featurizer: &'a Featurizer,
    pub scorer: &'a dyn StepScorer,
    /// Successful expert episodes, used by the trajectory-level baselines.
    pub expert_successes: &'a DemoDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub method: String,
    pub failed_trajectories: usize,
    pub failed_steps: usize,
    pub candidates: usize,
    pub verified_steps: usize,
    pub pairs: usize,
    pub supervised_locations: usize,
    pub final_loss: Option<f64>,
}

/// Everything one round produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub record: RoundRecord,
    pub failed: FailedTrajectorySet,
    pub candidates: Vec<CandidateCriticalStep>,
    pub branches: Vec<StepBranches>,
    pub dataset: Option<PreferenceDataset>,
    pub trajectory_pairs: Vec<TrajectoryPair>,
    pub train_metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    pub method: Method,
    /// `history[0]` is the starting policy, `history[i]` the output of round `i`.
    pub history: Vec<PolicySnapshot>,
    /// `refs[i - 1]` is the reference used when training round `i`.
    pub refs: Vec<PolicyParameters>,
    pub rounds: Vec<RoundOutput>,
    /// Evaluation after each round, starting with the initial policy.
    pub evals: Vec<EvalReport>,
}

impl IterationState {
    pub fn round(&self) -> usize {
        self.history.len() - 1
    }

    pub fn current(&self) -> &PolicyParameters {
        &self.history.last().expect("history holds the initial snapshot").params
    }

    /// Reference policy for round `i ≥ 1`.
    pub fn reference_for(&self, i: usize) -> Option<&PolicySnapshot> {
        i.checked_sub(1).and_then(|j| self.history.get(j))
    }
}

fn evaluate(
    params: &PolicyParameters,
    inputs: &IterationInputs<'_>,
    cfg: &IterationConfig,
    method: &str,
    round: usize,
) -> Result<EvalReport> {
    metrics::evaluate(params, inputs.featurizer, inputs.eval_tasks, cfg.eval_trials, &cfg.eval_seeds, method, round)
}

/// Run `rounds` rounds of `method` starting from `initial`. A round whose
/// dataset is empty carries the parameters forward unchanged.
pub fn iterate(method: Method, initial: PolicySnapshot, inputs: &IterationInputs<'_>, cfg: &IterationConfig) -> Result<IterationState> {
    if cfg.rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be at least 1".into()));
    }
    cfg.dpo.validate()?;
    cfg.mining.thresholds.validate()?;
    let label = method.label();
    let mut state = IterationState {
        method,
        evals: vec![evaluate(&initial.params, inputs, cfg, label, 0)?],
        history: vec![initial],
        refs: Vec::new(),
        rounds: Vec::new(),
    };
    for round in 1..=cfg.rounds {
        let reference = state.current().clone();
        let out = run_round(method, &reference, inputs, cfg, round)?;
        let (params, out) = out;
        log::info!(
            "{label} round {round}: {} failed, {} candidates, {} pairs",
            out.record.failed_trajectories,
            out.record.candidates,
            out.record.pairs
        );
        state.evals.push(evaluate(&params, inputs, cfg, label, round)?);
        state.refs.push(reference);
        state.history.push(PolicySnapshot::new(params, round, format!("iterate --method {label}")));
        state.rounds.push(out);
    }
    Ok(state)
}

fn run_round(
    method: Method,
    current: &PolicyParameters,
    inputs: &IterationInputs<'_>,
    cfg: &IterationConfig,
    round: usize,
) -> Result<(PolicyParameters, RoundOutput)> {
    let ctx = RoundContext::new(inputs.train_tasks, inputs.featurizer, inputs.scorer, cfg.master_seed, round);
    let label = method.label().to_string();
    let rollouts = pipeline::collect_rollouts(current, &ctx, inputs.train_tasks, cfg.mining.trials_per_task)?;
    let successes: Vec<(String, Trajectory)> = rollouts.iter().filter(|t| t.outcome == 1).map(|t| (t.task_id.clone(), t.clone())).collect();
    let failed = FailedTrajectorySet::new(round, rollouts.into_iter().filter(|t| t.outcome == 0).collect())?;

    let mut out = RoundOutput {
        record: RoundRecord {
            round,
            method: label,
            failed_trajectories: failed.len(),
            failed_steps: failed.total_steps,
            candidates: 0,
            verified_steps: 0,
            pairs: 0,
            supervised_locations: 0,
            final_loss: None,
        },
        failed: FailedTrajectorySet::new(round, Vec::new())?,
        candidates: Vec::new(),
        branches: Vec::new(),
        dataset: None,
        trajectory_pairs: Vec::new(),
        train_metrics: Vec::new(),
    };

    let data = match method {
        Method::Cso(mode) => {
            let mining = MiningConfig { mode, ..cfg.mining.clone() };
            let art = pipeline::mine_failed(current, &ctx, failed.clone(), &mining)?;
            out.record.candidates = art.candidates.len();
            out.record.verified_steps = art.branches.iter().filter(|b| b.verified().is_some()).count();
            out.candidates = art.candidates;
            out.branches = art.branches;
            BaselineData::StepPairs(art.dataset)
        }
        Method::VerificationOnly => {
            let scores = pipeline::score_steps(&ctx, &failed, Proposer::Expert { epsilon: cfg.mining.expert_epsilon }, cfg.mining.k)?;
            let (branches, ds) =
                pipeline::verification_only(current, &ctx, &failed, &scores, &cfg.mining.thresholds, cfg.mining.max_pairs_per_step)?;
            out.record.candidates = branches.len();
            out.record.verified_steps = branches.iter().filter(|b| b.verified().is_some()).count();
            out.branches = branches;
            BaselineData::StepPairs(ds)
        }
        Method::Baseline(kind) => {
            let scores = if kind == BaselineKind::StepDpo {
                Some(pipeline::score_steps(&ctx, &failed, Proposer::Expert { epsilon: cfg.mining.expert_epsilon }, cfg.mining.k)?)
            } else {
                None
            };
            baselines::build_baseline_dataset(
                kind,
                BaselineInputs {
                    tasks: Some(&ctx.tasks),
                    failed: Some(&failed),
                    scores: scores.as_deref(),
                    expert_successes: Some(&inputs.expert_successes.demos),
                    policy_successes: Some(&successes),
                    round,
                },
            )?
        }
    };

    match &data {
        BaselineData::StepPairs(ds) => {
            out.record.pairs = ds.len();
            out.record.supervised_locations = ds.stats.supervised_locations;
        }
        BaselineData::TrajectoryPairs(p) => {
            out.record.pairs = p.len();
            out.record.supervised_locations = p.iter().map(|p| p.rejected.length).sum();
        }
        BaselineData::Demos(d) => out.record.pairs = d.len(),
    }
    let (params, metrics) = train_round(current, inputs.featurizer, &ctx.tasks, &data, &cfg.dpo)?;
    out.train_metrics = metrics;
    if params == *current {
        log::warn!("round {round}: empty training set, parameters carried forward");
    }
    out.record.final_loss = out.train_metrics.last().map(|m| m.loss);
    out.failed = failed;
    match data {
        BaselineData::StepPairs(ds) => out.dataset = Some(ds),
        BaselineData::TrajectoryPairs(p) => out.trajectory_pairs = p,
        BaselineData::Demos(_) => {}
    }
    Ok((params, out))
}

/// Train on one round's data with `current` as the DPO reference; demos
/// are fitted by SFT under the same step size and budget. Empty data
/// returns `current` unchanged with no metrics.
pub fn train_round(
    current: &PolicyParameters,
    featurizer: &Featurizer,
    tasks: &HashMap<String, &TaskSpec>,
    data: &BaselineData,
    cfg: &DpoConfig,
) -> Result<(PolicyParameters, Vec<EpochMetrics>)> {
    match data {
        BaselineData::StepPairs(ds) if !ds.is_empty() => {
            let obj = DpoObjective::from_step_pairs(featurizer, current, &ds.pairs, cfg.beta)?;
            dpo::train_dpo(current, &obj, cfg)
        }
        BaselineData::TrajectoryPairs(p) if !p.is_empty() => {
            let obj = DpoObjective::from_trajectory_pairs(featurizer, current, tasks, p, cfg.beta)?;
            dpo::train_dpo(current, &obj, cfg)
        }
        BaselineData::Demos(d) if !d.is_empty() => {
            let opt = OptimizerConfig { step_size: cfg.step_size, epochs: cfg.epochs };
            let (p, losses) = policy::sft_train(current, featurizer, tasks, d, &opt)?;
            let metrics =
                losses.iter().enumerate().map(|(epoch, &loss)| EpochMetrics { epoch, loss, margin: None, grad_norm: None }).collect();
            Ok((p, metrics))
        }
        _ => Ok((current.clone(), Vec::new())),
    }
}
