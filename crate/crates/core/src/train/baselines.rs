//! Baseline training-data constructions.
//!
//! - ETO: whole-episode pairs, an expert success over a failed policy episode on the same task.
//! - RFT: the policy's own successful episodes as demonstrations.
//! - Step-DPO: at every failed step, the best-scored alternative over the policy action, unverified.
//! - IPR: an expert success and a failed policy episode aligned step by step up to the shorter length.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{FailedTrajectorySet, PairOrigin, PreferenceDataset, PreferencePair, StepScores, PAIR_SCHEMA};
use crate::policy::DemoDataset;
use crate::prm::ScoredAlternative;
use crate::train::dpo::TrajectoryPair;
use crate::world::{self, TaskSpec, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Eto,
    Rft,
    StepDpo,
    Ipr,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::Eto, BaselineKind::Rft, BaselineKind::StepDpo, BaselineKind::Ipr];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Eto => "eto",
            BaselineKind::Rft => "rft",
            BaselineKind::StepDpo => "step_dpo",
            BaselineKind::Ipr => "ipr",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown baseline `{s}`")))
    }
}

/// Round artifacts a baseline may draw from.
#[derive(Clone, Copy, Default)]
pub struct BaselineInputs<'a> {
    pub tasks: Option<&'a HashMap<String, &'a TaskSpec>>,
    pub failed: Option<&'a FailedTrajectorySet>,
    pub scores: Option<&'a [StepScores]>,
    pub expert_successes: Option<&'a [(String, Trajectory)]>,
    pub policy_successes: Option<&'a [(String, Trajectory)]>,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineData {
    StepPairs(PreferenceDataset),
    TrajectoryPairs(Vec<TrajectoryPair>),
    Demos(DemoDataset),
}

fn need<T>(x: Option<T>, kind: BaselineKind, what: &str) -> Result<T> {
    x.ok_or_else(|| Error::MissingInput { kind: kind.as_str(), what: what.to_string() })
}

pub fn build_baseline_dataset(kind: BaselineKind, inputs: BaselineInputs<'_>) -> Result<BaselineData> {
    match kind {
        BaselineKind::Eto => {
            let failed = need(inputs.failed, kind, "failed trajectories")?;
            let experts = need(inputs.expert_successes, kind, "expert successes")?;
            Ok(BaselineData::TrajectoryPairs(eto_pairs(experts, failed)))
        }
        BaselineKind::Rft => {
            let succ = need(inputs.policy_successes, kind, "policy successes")?;
            Ok(BaselineData::Demos(DemoDataset::new(succ.to_vec())?))
        }
        BaselineKind::StepDpo => {
            let tasks = need(inputs.tasks, kind, "tasks")?;
            let failed = need(inputs.failed, kind, "failed trajectories")?;
            let scores = need(inputs.scores, kind, "step scores")?;
            Ok(BaselineData::StepPairs(step_dpo_pairs(tasks, failed, scores)?))
        }
        BaselineKind::Ipr => {
            let tasks = need(inputs.tasks, kind, "tasks")?;
            let failed = need(inputs.failed, kind, "failed trajectories")?;
            let experts = need(inputs.expert_successes, kind, "expert successes")?;
            Ok(BaselineData::StepPairs(ipr_pairs(tasks, experts, failed)?))
        }
    }
}

fn first_by_task(successes: &[(String, Trajectory)]) -> HashMap<&str, &Trajectory> {
    let mut m = HashMap::new();
    for (task_id, t) in successes {
        if t.outcome == 1 {
            m.entry(task_id.as_str()).or_insert(t);
        }
    }
    m
}

/// One pair per failed episode whose task has an expert success.
pub fn eto_pairs(expert_successes: &[(String, Trajectory)], failed: &FailedTrajectorySet) -> Vec<TrajectoryPair> {
    let by_task = first_by_task(expert_successes);
    failed
        .trajectories
        .iter()
        .filter_map(|f| {
            by_task.get(f.task_id.as_str()).map(|e| TrajectoryPair {
                task_id: f.task_id.clone(),
                chosen: (*e).clone(),
                rejected: f.clone(),
            })
        })
        .collect()
}

/// Highest-scored alternative; the lowest sample index wins ties.
pub fn best_alternative(alts: &[ScoredAlternative]) -> Option<&ScoredAlternative> {
    alts.iter().fold(None, |best: Option<&ScoredAlternative>, a| match best {
        Some(b) if b.score.value >= a.score.value => Some(b),
        _ => Some(a),
    })
}

pub fn step_dpo_pairs(
    tasks: &HashMap<String, &TaskSpec>,
    failed: &FailedTrajectorySet,
    scores: &[StepScores],
) -> Result<PreferenceDataset> {
    if scores.len() != failed.len() {
        return Err(Error::Misaligned(format!("{} trajectories, {} score sets", failed.len(), scores.len())));
    }
    let mut pairs = Vec::new();
    for (traj, s) in failed.trajectories.iter().zip(scores) {
        let task = lookup(tasks, &traj.task_id)?;
        let states = world::replay_states(task, traj)?;
        for (i, state) in states.iter().enumerate() {
            let Some(best) = best_alternative(&s.alternatives[i]) else { continue };
            let policy_action = traj.steps[i].action;
            if s.policy[i].value < best.score.value && best.action != policy_action {
                pairs.push(PreferencePair {
                    schema: PAIR_SCHEMA,
                    task_id: traj.task_id.clone(),
                    trajectory_id: traj.id.clone(),
                    step: i + 1,
                    difficulty: task.difficulty,
                    state_context: state.context(task),
                    chosen: best.action,
                    rejected: policy_action,
                    mode: PairOrigin::StepDpo,
                    branch_seed: None,
                    rejected_branch_seed: None,
                    round: failed.round,
                });
            }
        }
    }
    PreferenceDataset::new(PairOrigin::StepDpo, pairs)
}

/// Align by index up to the shorter length. The context is the failed
/// episode's state; positions where both actions agree carry no preference
/// and are skipped.
pub fn ipr_pairs(
    tasks: &HashMap<String, &TaskSpec>,
    expert_successes: &[(String, Trajectory)],
    failed: &FailedTrajectorySet,
) -> Result<PreferenceDataset> {
    let by_task = first_by_task(expert_successes);
    let mut pairs = Vec::new();
    for traj in &failed.trajectories {
        let Some(expert) = by_task.get(traj.task_id.as_str()) else { continue };
        let task = lookup(tasks, &traj.task_id)?;
        let states = world::replay_states(task, traj)?;
        let n = traj.length.min(expert.length);
        for (i, state) in states.iter().enumerate().take(n) {
            let (chosen, rejected) = (expert.steps[i].action, traj.steps[i].action);
            if chosen == rejected {
                continue;
            }
            pairs.push(PreferencePair {
                schema: PAIR_SCHEMA,
                task_id: traj.task_id.clone(),
                trajectory_id: traj.id.clone(),
                step: i + 1,
                difficulty: task.difficulty,
                state_context: state.context(task),
                chosen,
                rejected,
                mode: PairOrigin::Ipr,
                branch_seed: None,
                rejected_branch_seed: None,
                round: failed.round,
            });
        }
    }
    PreferenceDataset::new(PairOrigin::Ipr, pairs)
}

fn lookup<'a>(tasks: &HashMap<String, &'a TaskSpec>, id: &str) -> Result<&'a TaskSpec> {
    tasks.get(id).copied().ok_or_else(|| Error::MissingInput { kind: "baseline", what: format!("task {id}") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::task_index;
    use crate::prm::{PrmScore, ScoreSource};
    use crate::world::{generate_tasks, AgentAction, WorldConfig};

    fn wrong_rollout(t: &TaskSpec, len: usize, id: &str) -> Trajectory {
        // calls that always error, then a wrong answer at step `len`
        let bad_arg = (0..8).find(|a| t.recipe.iter().all(|s| s.arg != *a)).unwrap();
        let mut i = 0;
        world::rollout(t, id.into(), 0, |_| {
            i += 1;
            Ok(if i == len {
                AgentAction::Answer { value: (t.target_answer + 1) % 8 }
            } else {
                AgentAction::Invoke { tool: 0, arg: bad_arg }
            })
        })
        .unwrap()
    }

    #[test]
    fn eto_one_pair_and_missing_inputs() {
        let tasks = generate_tasks(1, [1.0, 0.0, 0.0], &WorldConfig::default(), 1).unwrap();
        let expert = world::oracle_rollout(&tasks[0]).unwrap();
        let failed = FailedTrajectorySet::new(1, vec![wrong_rollout(&tasks[0], 3, "f")]).unwrap();
        let ex = vec![(tasks[0].task_id.clone(), expert)];
        let BaselineData::TrajectoryPairs(p) = build_baseline_dataset(
            BaselineKind::Eto,
            BaselineInputs { failed: Some(&failed), expert_successes: Some(&ex), ..Default::default() },
        )
        .unwrap() else {
            panic!()
        };
        assert_eq!(p.len(), 1);
        assert!(matches!(
            build_baseline_dataset(BaselineKind::Eto, BaselineInputs { failed: Some(&failed), ..Default::default() }),
            Err(Error::MissingInput { kind: "eto", .. })
        ));
    }

    #[test]
    fn ipr_aligns_to_shorter_length() {
        // L2 oracle has 5 steps; a 4-step failure aligns on 4 positions
        let tasks = generate_tasks(1, [0.0, 1.0, 0.0], &WorldConfig::default(), 2).unwrap();
        let expert = world::oracle_rollout(&tasks[0]).unwrap();
        assert_eq!(expert.length, 5);
        let failed = FailedTrajectorySet::new(1, vec![wrong_rollout(&tasks[0], 4, "f")]).unwrap();
        let idx = task_index(&tasks);
        let ds = ipr_pairs(&idx, &[(tasks[0].task_id.clone(), expert)], &failed).unwrap();
        assert_eq!(ds.len(), 4);
    }

    #[test]
    fn step_dpo_at_most_one_pair_per_step() {
        let tasks = generate_tasks(1, [0.0, 1.0, 0.0], &WorldConfig::default(), 3).unwrap();
        let failed = FailedTrajectorySet::new(1, vec![wrong_rollout(&tasks[0], 5, "f")]).unwrap();
        let oracle = world::oracle_action(&tasks[0], &world::WorldState::initial(&tasks[0]));
        let alts: Vec<ScoredAlternative> = (1..=5)
            .map(|j| ScoredAlternative {
                action: if j == 2 { oracle } else { AgentAction::Answer { value: j as u16 } },
                score: PrmScore::new(if j == 2 { 0.9 } else { 0.2 }, ScoreSource::Rubric),
                sample_index: j,
            })
            .collect();
        let scores =
            vec![StepScores { trajectory_index: 0, policy: vec![PrmScore::new(0.1, ScoreSource::Rubric); 5], alternatives: vec![alts; 5] }];
        let ds = step_dpo_pairs(&task_index(&tasks), &failed, &scores).unwrap();
        assert!(ds.len() <= 5);
        assert!(ds.pairs.iter().all(|p| p.chosen == oracle));
    }

    #[test]
    fn best_alternative_prefers_lowest_index_on_ties() {
        let mk = |j, v| ScoredAlternative {
            action: AgentAction::Answer { value: j as u16 },
            score: PrmScore::new(v, ScoreSource::Rubric),
            sample_index: j,
        };
        let alts = [mk(1, 0.5), mk(2, 0.8), mk(3, 0.8)];
        assert_eq!(best_alternative(&alts).unwrap().sample_index, 2);
    }
}
