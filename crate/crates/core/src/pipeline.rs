//! Failed-trajectory mining: collect failures, score every step and its
//! proposed alternatives, select candidates, verify them by branch rollouts
//! and turn verified steps into preference pairs.
//!
//! Every random draw is keyed by `(master seed, purpose, round, trajectory,
//! step, sample)`, so each stage is a pure function of its inputs and can be
//! fanned out across workers in any order.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{self, Featurizer, PolicyParameters};
use crate::prm::{self, CandidateCriticalStep, PrmScore, ScoredAlternative, SelectionThresholds, StepScorer};
use crate::rng::{self, Purpose};
use crate::world::{self, AgentAction, Difficulty, StateContext, TaskSpec, Trajectory};

pub const PAIR_SCHEMA: u32 = 1;
pub const TRAJECTORY_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedTrajectorySet {
    pub round: usize,
    pub trajectories: Vec<Trajectory>,
    pub total_steps: usize,
}

impl FailedTrajectorySet {
    pub fn new(round: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        if let Some(t) = trajectories.iter().find(|t| t.outcome != 0) {
            return Err(Error::SuccessfulTrajectory(t.id.clone()));
        }
        let total_steps = trajectories.iter().map(|t| t.length).sum();
        Ok(Self { round, trajectories, total_steps })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Who proposes the `k` alternatives at each step.
#[derive(Debug, Clone, Copy)]
pub enum Proposer<'a> {
    Expert { epsilon: f64 },
    Policy { params: &'a PolicyParameters },
}

/// Which alternatives of a candidate get a branch rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchSelection {
    /// Only alternatives scoring above `gamma_high`.
    AboveHigh,
    /// Every alternative.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSourceMode {
    #[default]
    ExpertPosPolicyNeg,
    ExpertPosExpertNeg,
    PolicyPosPolicyNeg,
}

impl PairSourceMode {
    pub const ALL: [PairSourceMode; 3] =
        [PairSourceMode::ExpertPosPolicyNeg, PairSourceMode::ExpertPosExpertNeg, PairSourceMode::PolicyPosPolicyNeg];

    pub fn as_str(self) -> &'static str {
        match self {
            PairSourceMode::ExpertPosPolicyNeg => "expert_pos_policy_neg",
            PairSourceMode::ExpertPosExpertNeg => "expert_pos_expert_neg",
            PairSourceMode::PolicyPosPolicyNeg => "policy_pos_policy_neg",
        }
    }
}

impl std::str::FromStr for PairSourceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown pair source mode `{s}`")))
    }
}

/// How a pair was produced; the three source modes plus the step-level
/// constructions used by the ablation and baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    ExpertPosPolicyNeg,
    ExpertPosExpertNeg,
    PolicyPosPolicyNeg,
    VerificationOnly,
    StepDpo,
    Ipr,
}

impl From<PairSourceMode> for PairOrigin {
    fn from(m: PairSourceMode) -> Self {
        match m {
            PairSourceMode::ExpertPosPolicyNeg => PairOrigin::ExpertPosPolicyNeg,
            PairSourceMode::ExpertPosExpertNeg => PairOrigin::ExpertPosExpertNeg,
            PairSourceMode::PolicyPosPolicyNeg => PairOrigin::PolicyPosPolicyNeg,
        }
    }
}

/// Scores for every step of one failed trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScores {
    pub trajectory_index: usize,
    pub policy: Vec<PrmScore>,
    pub alternatives: Vec<Vec<ScoredAlternative>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchResult {
    pub parent_trajectory_id: String,
    pub task_id: String,
    pub step_index: usize,
    pub alternative: ScoredAlternative,
    pub branched_trajectory: Trajectory,
    pub outcome: u8,
    pub rng_seed: u64,
}

/// A scanned step with the agent-visible context and every branch run for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBranches {
    pub candidate: CandidateCriticalStep,
    pub difficulty: Difficulty,
    pub context: StateContext,
    pub branches: Vec<BranchResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedCriticalStep {
    pub candidate: CandidateCriticalStep,
    pub successes: Vec<BranchResult>,
}

impl StepBranches {
    pub fn verified(&self) -> Option<VerifiedCriticalStep> {
        let successes: Vec<BranchResult> = self.branches.iter().filter(|b| b.outcome == 1).cloned().collect();
        (!successes.is_empty()).then(|| VerifiedCriticalStep { candidate: self.candidate.clone(), successes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub schema: u32,
    pub task_id: String,
    pub trajectory_id: String,
    /// 1-based step index in the parent trajectory.
    pub step: usize,
    pub difficulty: Difficulty,
    pub state_context: StateContext,
    pub chosen: AgentAction,
    pub rejected: AgentAction,
    pub mode: PairOrigin,
    /// Seed of the branch that verified `chosen`, when there was one.
    pub branch_seed: Option<u64>,
    /// Seed of the failed branch that produced `rejected` (expert-negative mode).
    pub rejected_branch_seed: Option<u64>,
    pub round: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pairs: usize,
    pub per_difficulty: [usize; 3],
    pub per_round: Vec<(usize, usize)>,
    pub duplicates_removed: usize,
    /// Distinct (trajectory, step) locations carrying at least one pair.
    pub supervised_locations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub mode: PairOrigin,
    pub pairs: Vec<PreferencePair>,
    pub stats: DatasetStats,
}

impl PreferenceDataset {
    /// Deduplicate on `(state_context, chosen, rejected)`, keeping first
    /// occurrences, and compute stats.
    pub fn new(mode: PairOrigin, pairs: Vec<PreferencePair>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(pairs.len());
        let mut duplicates_removed = 0;
        for p in pairs {
            if p.chosen == p.rejected {
                return Err(Error::DegeneratePair(format!("{} step {}", p.trajectory_id, p.step)));
            }
            if seen.insert((p.state_context.clone(), p.chosen, p.rejected)) {
                kept.push(p);
            } else {
                duplicates_removed += 1;
            }
        }
        let mut stats = DatasetStats { pairs: kept.len(), duplicates_removed, ..Default::default() };
        let mut rounds = std::collections::BTreeMap::new();
        let mut locations = HashSet::new();
        for p in &kept {
            stats.per_difficulty[p.difficulty.index()] += 1;
            *rounds.entry(p.round).or_insert(0) += 1;
            locations.insert((p.trajectory_id.as_str(), p.step));
        }
        stats.per_round = rounds.into_iter().collect();
        stats.supervised_locations = locations.len();
        Ok(Self { mode, pairs: kept, stats })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Shared inputs of one mining round.
pub struct RoundContext<'a> {
    pub tasks: HashMap<String, &'a TaskSpec>,
    pub featurizer: &'a Featurizer,
    pub scorer: &'a dyn StepScorer,
    pub master_seed: u64,
    pub round: usize,
}

impl<'a> RoundContext<'a> {
    pub fn new(tasks: &'a [TaskSpec], featurizer: &'a Featurizer, scorer: &'a dyn StepScorer, master_seed: u64, round: usize) -> Self {
        Self { tasks: policy::task_index(tasks), featurizer, scorer, master_seed, round }
    }

    pub fn task(&self, id: &str) -> Result<&'a TaskSpec> {
        self.tasks.get(id).copied().ok_or_else(|| Error::MissingInput { kind: "task lookup", what: format!("task {id}") })
    }

    fn round_key(&self) -> u64 {
        self.round as u64
    }

    pub fn collect_seed(&self, task_index: usize, trial: usize) -> u64 {
        rng::derive_seed(self.master_seed, Purpose::Collect, &[self.round_key(), task_index as u64, trial as u64])
    }

    pub fn branch_seed(&self, trajectory_index: usize, step: usize, sample: usize) -> u64 {
        rng::derive_seed(self.master_seed, Purpose::Branch, &[self.round_key(), trajectory_index as u64, step as u64, sample as u64])
    }
}

/// Roll out the policy `trials` times per task, in task then trial order.
pub fn collect_rollouts(params: &PolicyParameters, ctx: &RoundContext<'_>, tasks: &[TaskSpec], trials: usize) -> Result<Vec<Trajectory>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials_per_task must be at least 1".into()));
    }
    params.check_finite()?;
    let runs: Vec<Vec<Trajectory>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            (0..trials)
                .map(|trial| {
                    let id = format!("r{}-{}-{}", ctx.round, task.task_id, trial);
                    policy::policy_rollout(params, ctx.featurizer, task, id, ctx.collect_seed(i, trial))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(runs.into_iter().flatten().collect())
}

/// Roll out the policy and keep the failures.
pub fn collect_failed(params: &PolicyParameters, ctx: &RoundContext<'_>, tasks: &[TaskSpec], trials: usize) -> Result<FailedTrajectorySet> {
    let all = collect_rollouts(params, ctx, tasks, trials)?;
    FailedTrajectorySet::new(ctx.round, all.into_iter().filter(|t| t.outcome == 0).collect())
}

/// Score the policy action and `k` proposed alternatives at every step.
///
/// Alternative `j` at a step always comes from the same derived stream, so
/// the first `k` alternatives are identical for any larger `k`.
pub fn score_steps(ctx: &RoundContext<'_>, failed: &FailedTrajectorySet, proposer: Proposer<'_>, k: usize) -> Result<Vec<StepScores>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    failed
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(ti, traj)| {
            let task = ctx.task(&traj.task_id)?;
            let states = world::replay_states(task, traj)?;
            let mut policy_scores = Vec::with_capacity(states.len());
            let mut alternatives = Vec::with_capacity(states.len());
            for (i, (state, rec)) in states.iter().zip(&traj.steps).enumerate() {
                let key = [ctx.round_key(), ti as u64, i as u64 + 1];
                let mut r = rng::stream(ctx.master_seed, Purpose::PrmPolicy, &key);
                policy_scores.push(ctx.scorer.score(task, state, rec.action, &mut r)?);
                let mut alts = Vec::with_capacity(k);
                for j in 1..=k {
                    let path = [key[0], key[1], key[2], j as u64];
                    let mut pr = rng::stream(ctx.master_seed, Purpose::Proposal, &path);
                    let action = match proposer {
                        Proposer::Expert { epsilon } => policy::expert_action(task, state, epsilon, &mut pr),
                        Proposer::Policy { params } => policy::sample_action(params, ctx.featurizer, task, state, &mut pr),
                    };
                    let mut sr = rng::stream(ctx.master_seed, Purpose::PrmAlternative, &path);
                    let score = ctx.scorer.score(task, state, action, &mut sr)?;
                    alts.push(ScoredAlternative { action, score, sample_index: j });
                }
                alternatives.push(alts);
            }
            Ok(StepScores { trajectory_index: ti, policy: policy_scores, alternatives })
        })
        .collect()
}

/// Threshold selection over scored steps, in trajectory order then step order.
pub fn scan_candidates(
    failed: &FailedTrajectorySet,
    scores: &[StepScores],
    thresholds: &SelectionThresholds,
) -> Result<Vec<CandidateCriticalStep>> {
    if scores.len() != failed.len() {
        return Err(Error::Misaligned(format!("{} trajectories, {} score sets", failed.len(), scores.len())));
    }
    let mut out = Vec::new();
    for (traj, s) in failed.trajectories.iter().zip(scores) {
        out.extend(prm::select_candidates(traj, &s.policy, &s.alternatives, thresholds)?);
    }
    Ok(out)
}

/// Every step of every failed trajectory as an unfiltered candidate.
pub fn all_steps(failed: &FailedTrajectorySet, scores: &[StepScores]) -> Result<Vec<CandidateCriticalStep>> {
    if scores.len() != failed.len() {
        return Err(Error::Misaligned(format!("{} trajectories, {} score sets", failed.len(), scores.len())));
    }
    let mut out = Vec::new();
    for (traj, s) in failed.trajectories.iter().zip(scores) {
        for (i, rec) in traj.steps.iter().enumerate() {
            out.push(CandidateCriticalStep {
                trajectory_id: traj.id.clone(),
                task_id: traj.task_id.clone(),
                step_index: i + 1,
                policy_action: rec.action,
                policy_score: s.policy[i],
                alternatives: s.alternatives[i].clone(),
                state_digest: rec.state_digest,
            });
        }
    }
    Ok(out)
}

/// Replay the parent up to step `t`, substitute `alternative` at `t` and let
/// the policy finish the episode.
pub fn branch_rollout(
    params: &PolicyParameters,
    featurizer: &Featurizer,
    task: &TaskSpec,
    parent: &Trajectory,
    t: usize,
    alternative: ScoredAlternative,
    seed: u64,
) -> Result<BranchResult> {
    let state = world::replay_to(task, parent, t)?;
    let mut steps: Vec<_> = parent.steps[..t - 1].to_vec();
    let digest = state.digest(task);
    let (observation, next) = world::transition(task, &state, alternative.action)?;
    steps.push(world::StepRecord { state_digest: digest, action: alternative.action, observation });
    let mut r = rng::stream_from_seed(seed);
    world::run_episode(task, next, &mut steps, |s| Ok(policy::sample_action(params, featurizer, task, s, &mut r)))?;
    let id = format!("{}/b{}.{}", parent.id, t, alternative.sample_index);
    let branched = world::finish(task, id, steps, seed)?;
    Ok(BranchResult {
        parent_trajectory_id: parent.id.clone(),
        task_id: task.task_id.clone(),
        step_index: t,
        alternative,
        outcome: branched.outcome,
        branched_trajectory: branched,
        rng_seed: seed,
    })
}

/// Branch-verify candidates. Results keep the input order; branches within
/// a step are ordered by sample index.
pub fn verify_candidates(
    params: &PolicyParameters,
    ctx: &RoundContext<'_>,
    failed: &FailedTrajectorySet,
    candidates: &[CandidateCriticalStep],
    thresholds: &SelectionThresholds,
    selection: BranchSelection,
) -> Result<Vec<StepBranches>> {
    let index: HashMap<&str, usize> = failed.trajectories.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    candidates
        .par_iter()
        .map(|c| {
            let ti = *index
                .get(c.trajectory_id.as_str())
                .ok_or_else(|| Error::MissingInput { kind: "verification", what: format!("trajectory {}", c.trajectory_id) })?;
            let parent = &failed.trajectories[ti];
            let task = ctx.task(&parent.task_id)?;
            let state = world::replay_to(task, parent, c.step_index)?;
            let mut branches: Vec<BranchResult> = Vec::new();
            for alt in &c.alternatives {
                if selection == BranchSelection::AboveHigh && alt.score.value <= thresholds.gamma_high {
                    continue;
                }
                // one continuation per distinct action, from its lowest sample index
                if branches.iter().any(|b| b.alternative.action == alt.action) {
                    continue;
                }
                let seed = ctx.branch_seed(ti, c.step_index, alt.sample_index);
                branches.push(branch_rollout(params, ctx.featurizer, task, parent, c.step_index, *alt, seed)?);
            }
            Ok(StepBranches { candidate: c.clone(), difficulty: task.difficulty, context: state.context(task), branches })
        })
        .collect()
}

fn pair_from(step: &StepBranches, chosen: &BranchResult, rejected: AgentAction, mode: PairOrigin, round: usize) -> PreferencePair {
    PreferencePair {
        schema: PAIR_SCHEMA,
        task_id: step.candidate.task_id.clone(),
        trajectory_id: step.candidate.trajectory_id.clone(),
        step: step.candidate.step_index,
        difficulty: step.difficulty,
        state_context: step.context.clone(),
        chosen: chosen.alternative.action,
        rejected,
        mode,
        branch_seed: Some(chosen.rng_seed),
        rejected_branch_seed: None,
        round,
    }
}

/// Turn branch-verified steps into pairs under the given source mode. Pairs
/// whose two actions coincide are skipped.
pub fn build_preference_pairs(
    steps: &[StepBranches],
    mode: PairSourceMode,
    round: usize,
    max_pairs_per_step: Option<usize>,
) -> Result<PreferenceDataset> {
    build_with_origin(steps, mode, mode.into(), round, max_pairs_per_step)
}

pub fn build_with_origin(
    steps: &[StepBranches],
    mode: PairSourceMode,
    origin: PairOrigin,
    round: usize,
    max_pairs_per_step: Option<usize>,
) -> Result<PreferenceDataset> {
    let cap = max_pairs_per_step.unwrap_or(usize::MAX);
    let mut pairs = Vec::new();
    for step in steps {
        let mut emitted = Vec::new();
        let successes = step.branches.iter().filter(|b| b.outcome == 1);
        match mode {
            PairSourceMode::ExpertPosPolicyNeg | PairSourceMode::PolicyPosPolicyNeg => {
                for b in successes {
                    if b.alternative.action != step.candidate.policy_action {
                        emitted.push(pair_from(step, b, step.candidate.policy_action, origin, round));
                    }
                }
            }
            PairSourceMode::ExpertPosExpertNeg => {
                for good in successes {
                    for bad in step.branches.iter().filter(|b| b.outcome == 0) {
                        if good.alternative.action != bad.alternative.action {
                            let mut p = pair_from(step, good, bad.alternative.action, origin, round);
                            p.rejected_branch_seed = Some(bad.rng_seed);
                            emitted.push(p);
                        }
                    }
                }
            }
        }
        pairs.extend(emitted.into_iter().take(cap));
    }
    if pairs.is_empty() {
        log::warn!("round {round}: no verified pairs for mode {}", mode.as_str());
    }
    PreferenceDataset::new(origin, pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    pub k: usize,
    pub thresholds: SelectionThresholds,
    pub expert_epsilon: f64,
    pub trials_per_task: usize,
    pub mode: PairSourceMode,
    pub max_pairs_per_step: Option<usize>,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            k: 5,
            thresholds: SelectionThresholds::default(),
            expert_epsilon: 0.05,
            trials_per_task: 1,
            mode: PairSourceMode::ExpertPosPolicyNeg,
            max_pairs_per_step: None,
        }
    }
}

/// Everything one mining round produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundArtifacts {
    pub failed: FailedTrajectorySet,
    pub scores: Vec<StepScores>,
    pub candidates: Vec<CandidateCriticalStep>,
    pub branches: Vec<StepBranches>,
    pub dataset: PreferenceDataset,
}

/// collect → score → select → verify → build under `cfg.mode`.
pub fn mine_round(params: &PolicyParameters, ctx: &RoundContext<'_>, tasks: &[TaskSpec], cfg: &MiningConfig) -> Result<RoundArtifacts> {
    let failed = collect_failed(params, ctx, tasks, cfg.trials_per_task)?;
    mine_failed(params, ctx, failed, cfg)
}

pub fn mine_failed(
    params: &PolicyParameters,
    ctx: &RoundContext<'_>,
    failed: FailedTrajectorySet,
    cfg: &MiningConfig,
) -> Result<RoundArtifacts> {
    cfg.thresholds.validate()?;
    let proposer = match cfg.mode {
        PairSourceMode::PolicyPosPolicyNeg => Proposer::Policy { params },
        _ => Proposer::Expert { epsilon: cfg.expert_epsilon },
    };
    let selection = match cfg.mode {
        PairSourceMode::ExpertPosExpertNeg => BranchSelection::All,
        _ => BranchSelection::AboveHigh,
    };
    let scores = score_steps(ctx, &failed, proposer, cfg.k)?;
    let candidates = scan_candidates(&failed, &scores, &cfg.thresholds)?;
    let branches = verify_candidates(params, ctx, &failed, &candidates, &cfg.thresholds, selection)?;
    let dataset = build_preference_pairs(&branches, cfg.mode, ctx.round, cfg.max_pairs_per_step)?;
    Ok(RoundArtifacts { failed, scores, candidates, branches, dataset })
}

/// Ablation without PRM selection: every failed step branches all of its
/// alternatives and each success becomes a pair against the policy action.
pub fn verification_only(
    params: &PolicyParameters,
    ctx: &RoundContext<'_>,
    failed: &FailedTrajectorySet,
    scores: &[StepScores],
    thresholds: &SelectionThresholds,
    max_pairs_per_step: Option<usize>,
) -> Result<(Vec<StepBranches>, PreferenceDataset)> {
    let steps = all_steps(failed, scores)?;
    let branches = verify_candidates(params, ctx, failed, &steps, thresholds, BranchSelection::All)?;
    let ds = build_with_origin(&branches, PairSourceMode::ExpertPosPolicyNeg, PairOrigin::VerificationOnly, ctx.round, max_pairs_per_step)?;
    Ok((branches, ds))
}

/// Outcome of replaying a pair's provenance: parent outcome and chosen-branch outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairAudit {
    pub parent_outcome: u8,
    pub branch_outcome: u8,
    pub parent_identical: bool,
}

/// Regenerate a pair's parent trajectory from its recorded seed and rerun
/// the chosen branch from the recorded branch seed.
pub fn audit_pair(
    pair: &PreferencePair,
    params: &PolicyParameters,
    featurizer: &Featurizer,
    task: &TaskSpec,
    parent: &Trajectory,
) -> Result<PairAudit> {
    let regenerated = policy::policy_rollout(params, featurizer, task, parent.id.clone(), parent.rng_trace)?;
    let seed = pair.branch_seed.ok_or_else(|| Error::MissingInput { kind: "audit", what: "branch seed".into() })?;
    let alt = ScoredAlternative { action: pair.chosen, score: PrmScore::new(1.0, prm::ScoreSource::Rubric), sample_index: 0 };
    let branch = branch_rollout(params, featurizer, task, &regenerated, pair.step, alt, seed)?;
    let state = world::replay_to(task, &regenerated, pair.step)?;
    if state.context(task) != pair.state_context {
        return Err(Error::ReplayDivergence { trajectory: parent.id.clone(), step: pair.step });
    }
    Ok(PairAudit {
        parent_outcome: world::verify_outcome(task, &regenerated)?,
        branch_outcome: branch.outcome,
        parent_identical: regenerated == *parent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FeatureConfig;
    use crate::prm::RubricScorer;
    use crate::world::{generate_tasks, WorldConfig};

    fn fixture(n: usize, mix: [f64; 3]) -> (Vec<TaskSpec>, Featurizer, RubricScorer) {
        let cfg = WorldConfig::default();
        let tasks = generate_tasks(n, mix, &cfg, 5).unwrap();
        (tasks, Featurizer::new(FeatureConfig::default(), cfg.space()).unwrap(), RubricScorer::noiseless())
    }

    #[test]
    fn uniform_policy_fails_and_collection_is_deterministic() {
        let (tasks, fz, sc) = fixture(100, [0.0, 1.0, 0.0]);
        let ctx = RoundContext::new(&tasks, &fz, &sc, 1, 0);
        let p = PolicyParameters::zeros(72, 64);
        let a = collect_failed(&p, &ctx, &tasks, 1).unwrap();
        let b = collect_failed(&p, &ctx, &tasks, 1).unwrap();
        assert!(!a.is_empty());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.trajectories.iter().all(|t| t.outcome == 0));
        assert_eq!(a.total_steps, a.trajectories.iter().map(|t| t.length).sum::<usize>());
    }

    #[test]
    fn branch_identity_substitution_and_determinism() {
        let (tasks, fz, sc) = fixture(10, [0.0, 1.0, 0.0]);
        let ctx = RoundContext::new(&tasks, &fz, &sc, 2, 0);
        let p = PolicyParameters::zeros(72, 64);
        let failed = collect_failed(&p, &ctx, &tasks, 1).unwrap();
        let parent = &failed.trajectories[0];
        let task = ctx.task(&parent.task_id).unwrap();
        let t = parent.length.min(3);
        let own =
            ScoredAlternative { action: parent.steps[t - 1].action, score: PrmScore::new(0.0, prm::ScoreSource::Rubric), sample_index: 1 };
        let b1 = branch_rollout(&p, &fz, task, parent, t, own, 99).unwrap();
        let b2 = branch_rollout(&p, &fz, task, parent, t, own, 99).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.branched_trajectory.steps[..t], parent.steps[..t]);
    }

    #[test]
    fn zero_gamma_low_selects_nothing() {
        let (tasks, fz, sc) = fixture(20, [0.5, 0.5, 0.0]);
        let ctx = RoundContext::new(&tasks, &fz, &sc, 3, 0);
        let p = PolicyParameters::zeros(72, 64);
        let failed = collect_failed(&p, &ctx, &tasks, 1).unwrap();
        let scores = score_steps(&ctx, &failed, Proposer::Expert { epsilon: 0.05 }, 5).unwrap();
        let th = SelectionThresholds::new(0.0, 0.65).unwrap();
        assert!(scan_candidates(&failed, &scores, &th).unwrap().is_empty());
        assert!(!scan_candidates(&failed, &scores, &SelectionThresholds::default()).unwrap().is_empty());
    }

    fn step_with(outcomes: &[(u16, u8)], policy_action: AgentAction) -> StepBranches {
        let t = &generate_tasks(1, [1.0, 0.0, 0.0], &WorldConfig::default(), 1).unwrap()[0];
        let ctx = world::WorldState::initial(t).context(t);
        let parent = world::oracle_rollout(t).unwrap();
        let candidate = CandidateCriticalStep {
            trajectory_id: "p".into(),
            task_id: t.task_id.clone(),
            step_index: 1,
            policy_action,
            policy_score: PrmScore::new(0.1, prm::ScoreSource::Rubric),
            alternatives: vec![],
            state_digest: 0,
        };
        let branches = outcomes
            .iter()
            .enumerate()
            .map(|(j, &(value, y))| BranchResult {
                parent_trajectory_id: "p".into(),
                task_id: t.task_id.clone(),
                step_index: 1,
                alternative: ScoredAlternative {
                    action: AgentAction::Answer { value },
                    score: PrmScore::new(0.9, prm::ScoreSource::Rubric),
                    sample_index: j + 1,
                },
                branched_trajectory: parent.clone(),
                outcome: y,
                rng_seed: j as u64,
            })
            .collect();
        StepBranches { candidate, difficulty: t.difficulty, context: ctx, branches }
    }

    #[test]
    fn pair_construction_contracts() {
        let policy_action = AgentAction::Invoke { tool: 0, arg: 0 };
        let one = step_with(&[(1, 1)], policy_action);
        let ds = build_preference_pairs(&[one], PairSourceMode::ExpertPosPolicyNeg, 1, None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.pairs[0].chosen, AgentAction::Answer { value: 1 });
        assert_eq!(ds.pairs[0].rejected, policy_action);

        let two = step_with(&[(1, 1), (2, 1), (3, 0)], policy_action);
        let ds = build_preference_pairs(std::slice::from_ref(&two), PairSourceMode::ExpertPosPolicyNeg, 1, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.pairs[0].state_context, ds.pairs[1].state_context);
        assert_eq!(ds.pairs[0].rejected, ds.pairs[1].rejected);

        let neg = build_preference_pairs(std::slice::from_ref(&two), PairSourceMode::ExpertPosExpertNeg, 1, None).unwrap();
        assert_eq!(neg.len(), 2);
        assert!(neg.pairs.iter().all(|p| p.rejected == AgentAction::Answer { value: 3 }));
        let capped = build_preference_pairs(&[two], PairSourceMode::ExpertPosPolicyNeg, 1, Some(1)).unwrap();
        assert_eq!(capped.len(), 1);

        let none = step_with(&[(1, 0)], policy_action);
        let ds = build_preference_pairs(&[none], PairSourceMode::ExpertPosPolicyNeg, 1, None).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.stats.pairs, 0);
    }

    #[test]
    fn duplicate_pairs_are_removed() {
        let policy_action = AgentAction::Invoke { tool: 0, arg: 0 };
        let s = step_with(&[(1, 1), (1, 1)], policy_action);
        let ds = build_preference_pairs(&[s], PairSourceMode::ExpertPosPolicyNeg, 0, None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.stats.duplicates_removed, 1);
    }
}
