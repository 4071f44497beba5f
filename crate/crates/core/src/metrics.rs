//! Evaluation and accounting: success rates by difficulty, supervision
//! fractions, identification quality against planted ground truth, and an
//! error taxonomy over rejected actions.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{FailedTrajectorySet, PreferencePair};
use crate::policy::{self, Featurizer, PolicyParameters};
use crate::rng::{self, Purpose};
use crate::world::{self, AgentAction, Difficulty, TaskSpec, Trajectory, WorldState};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStat {
    pub episodes: usize,
    pub successes: usize,
}

impl LevelStat {
    pub fn rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub round: usize,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub overall: LevelStat,
    pub per_level: [LevelStat; 3],
    /// Overall success rate under each seed, in `seeds` order.
    pub seed_rates: Vec<f64>,
}

impl EvalReport {
    pub fn success(&self) -> f64 {
        self.overall.rate()
    }

    /// Standard error of the mean over per-seed rates (0 with one seed).
    pub fn std_error(&self) -> f64 {
        std_error(&self.seed_rates)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn std_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

/// Aggregate episode outcomes `(task index, seed index, success)`.
fn report(tasks: &[TaskSpec], outcomes: &[(usize, usize, bool)], trials: usize, seeds: &[u64], method: &str, round: usize) -> EvalReport {
    let mut per_level = [LevelStat::default(); 3];
    let mut per_seed = vec![LevelStat::default(); seeds.len()];
    for &(ti, si, ok) in outcomes {
        let l = &mut per_level[tasks[ti].difficulty.index()];
        l.episodes += 1;
        l.successes += usize::from(ok);
        per_seed[si].episodes += 1;
        per_seed[si].successes += usize::from(ok);
    }
    let overall =
        LevelStat { episodes: per_level.iter().map(|l| l.episodes).sum(), successes: per_level.iter().map(|l| l.successes).sum() };
    EvalReport {
        method: method.to_string(),
        round,
        trials,
        seeds: seeds.to_vec(),
        overall,
        per_level,
        seed_rates: per_seed.iter().map(LevelStat::rate).collect(),
    }
}

fn check_eval_inputs(tasks: &[TaskSpec], trials: usize, seeds: &[u64]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::EmptyDataset("evaluation tasks"));
    }
    if trials == 0 || seeds.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one trial and one seed".into()));
    }
    Ok(())
}

/// Roll out any per-state action rule over `tasks × trials × seeds`. The
/// rule receives a stream derived from `(seed, task index, trial)`.
pub fn evaluate_with<F>(tasks: &[TaskSpec], trials: usize, seeds: &[u64], method: &str, round: usize, choose: F) -> Result<EvalReport>
where
    F: Fn(&TaskSpec, &WorldState, &mut rng::Stream) -> Result<AgentAction> + Sync,
{
    check_eval_inputs(tasks, trials, seeds)?;
    let jobs: Vec<(usize, usize, usize)> =
        (0..seeds.len()).flat_map(|s| (0..tasks.len()).flat_map(move |t| (0..trials).map(move |k| (s, t, k)))).collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(si, ti, trial)| {
            let task = &tasks[ti];
            let seed = rng::derive_seed(seeds[si], Purpose::Eval, &[ti as u64, trial as u64]);
            let mut r = rng::stream_from_seed(seed);
            let t = world::rollout(task, String::new(), seed, |s| choose(task, s, &mut r))?;
            Ok((ti, si, t.outcome == 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(tasks, &outcomes, trials, seeds, method, round))
}

pub fn evaluate(
    params: &PolicyParameters,
    featurizer: &Featurizer,
    tasks: &[TaskSpec],
    trials: usize,
    seeds: &[u64],
    method: &str,
    round: usize,
) -> Result<EvalReport> {
    params.check_finite()?;
    evaluate_with(tasks, trials, seeds, method, round, |task, s, r| Ok(policy::sample_action(params, featurizer, task, s, r)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionStats {
    pub method: String,
    pub pair_count: usize,
    /// Distinct (trajectory, step) locations with at least one pair.
    pub supervised_locations: usize,
    pub failed_step_total: usize,
    /// `supervised_locations / failed_step_total`.
    pub location_fraction: f64,
    /// `pair_count / failed_step_total`.
    pub pair_fraction: f64,
}

impl SupervisionStats {
    pub fn from_counts(method: &str, pair_count: usize, supervised_locations: usize, failed_step_total: usize) -> Self {
        let frac = |x: usize| if failed_step_total == 0 { 0.0 } else { x as f64 / failed_step_total as f64 };
        Self {
            method: method.to_string(),
            pair_count,
            supervised_locations,
            failed_step_total,
            location_fraction: frac(supervised_locations),
            pair_fraction: frac(pair_count),
        }
    }
}

pub fn supervision_stats(method: &str, pairs: &[PreferencePair], failed: &FailedTrajectorySet) -> Result<SupervisionStats> {
    if let Some(p) = pairs.iter().find(|p| p.round != failed.round) {
        return Err(Error::RoundMismatch { dataset: p.round, failed: failed.round });
    }
    let locations: HashSet<(&str, usize)> = pairs.iter().map(|p| (p.trajectory_id.as_str(), p.step)).collect();
    Ok(SupervisionStats::from_counts(method, pairs.len(), locations.len(), failed.total_steps))
}

/// Precision and recall of flagged locations against ground-truth events.
/// An empty flag set has precision 1.0; an empty event set has recall 1.0.
pub fn identification_quality<T: Eq + std::hash::Hash>(flagged: &HashSet<T>, events: &HashSet<T>) -> (f64, f64) {
    let hits = flagged.intersection(events).count();
    let precision = if flagged.is_empty() { 1.0 } else { hits as f64 / flagged.len() as f64 };
    let recall = if events.is_empty() { 1.0 } else { hits as f64 / events.len() as f64 };
    (precision, recall)
}

/// Ground-truth critical events in failed trajectories: steps at a planted
/// position where the policy called the distractor from an unpoisoned state.
pub fn critical_events(failed: &FailedTrajectorySet, tasks: &HashMap<String, &TaskSpec>) -> Result<HashSet<(String, usize)>> {
    let mut out = HashSet::new();
    for traj in &failed.trajectories {
        let task = tasks
            .get(&traj.task_id)
            .ok_or_else(|| Error::MissingInput { kind: "critical events", what: format!("task {}", traj.task_id) })?;
        for (i, (s, rec)) in world::replay_states(task, traj)?.iter().zip(&traj.steps).enumerate() {
            if !s.poisoned && task.distractor_action(s.progress) == Some(rec.action) {
                out.insert((traj.id.clone(), i + 1));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    WrongTool,
    WrongArgument,
    PrematureAnswer,
    HorizonExhausted,
    Other,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 5] = [
        ErrorCategory::WrongTool,
        ErrorCategory::WrongArgument,
        ErrorCategory::PrematureAnswer,
        ErrorCategory::HorizonExhausted,
        ErrorCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::WrongTool => "wrong_tool",
            ErrorCategory::WrongArgument => "wrong_argument",
            ErrorCategory::PrematureAnswer => "premature_answer",
            ErrorCategory::HorizonExhausted => "horizon_exhausted",
            ErrorCategory::Other => "other",
        }
    }
}

/// Rules are applied in order: wrong tool, wrong argument, premature
/// answer, parent ended by the horizon, other.
pub fn classify(task: &TaskSpec, state: &WorldState, rejected: AgentAction, parent_hit_horizon: bool) -> ErrorCategory {
    match (rejected, world::oracle_action(task, state)) {
        (AgentAction::Invoke { tool, .. }, AgentAction::Invoke { tool: ot, .. }) if tool != ot => ErrorCategory::WrongTool,
        (AgentAction::Invoke { arg, .. }, AgentAction::Invoke { arg: oa, .. }) if arg != oa => ErrorCategory::WrongArgument,
        (AgentAction::Answer { .. }, _) if state.progress < task.recipe.len() => ErrorCategory::PrematureAnswer,
        _ if parent_hit_horizon => ErrorCategory::HorizonExhausted,
        _ => ErrorCategory::Other,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    /// Counts in [`ErrorCategory::ALL`] order.
    pub counts: [usize; 5],
}

impl ErrorHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn fractions(&self) -> [f64; 5] {
        let n = self.total();
        self.counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
    }
}

pub fn categorize_errors(pairs: &[PreferencePair], tasks: &HashMap<String, &TaskSpec>, parents: &[Trajectory]) -> Result<ErrorHistogram> {
    let horizon: HashMap<&str, bool> = parents.iter().map(|t| (t.id.as_str(), t.ended_by_horizon())).collect();
    let mut h = ErrorHistogram::default();
    for p in pairs {
        let task =
            tasks.get(&p.task_id).ok_or_else(|| Error::MissingInput { kind: "error categories", what: format!("task {}", p.task_id) })?;
        let state = world::state_from_context(task, &p.state_context)?;
        let hit = *horizon
            .get(p.trajectory_id.as_str())
            .ok_or_else(|| Error::MissingInput { kind: "error categories", what: format!("parent trajectory {}", p.trajectory_id) })?;
        let c = classify(task, &state, p.rejected, hit);
        h.counts[ErrorCategory::ALL.iter().position(|x| *x == c).unwrap()] += 1;
    }
    Ok(h)
}

pub fn level_name(i: usize) -> &'static str {
    Difficulty::ALL[i].as_str()
}
