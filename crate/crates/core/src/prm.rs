//! Process reward scoring and candidate critical-step selection.
//!
//! Two scorers implement [`StepScorer`]: a rubric scorer that reads the
//! world's ground truth and adds bounded noise of scale `eta`, and a remote
//! scorer speaking a one-request JSON protocol. Candidate selection keeps a
//! step when the policy's action scores below `gamma_low` while at least one
//! proposed alternative scores above `gamma_high`.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::world::{self, AgentAction, TaskSpec, Token, Trajectory, WorldState};

pub const REMOTE_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Rubric,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrmScore {
    pub value: f64,
    pub source: ScoreSource,
}

impl PrmScore {
    pub fn new(value: f64, source: ScoreSource) -> Self {
        Self { value: value.clamp(0.0, 1.0), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RubricWeights {
    pub correctness: f64,
    pub relevance: f64,
    pub progression: f64,
    pub information_use: f64,
    pub thought: f64,
}

impl Default for RubricWeights {
    fn default() -> Self {
        Self { correctness: 0.35, relevance: 0.25, progression: 0.20, information_use: 0.15, thought: 0.05 }
    }
}

impl RubricWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.correctness, self.relevance, self.progression, self.information_use, self.thought]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidWeights(format!("{w:?} has a negative or non-finite weight")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(())
    }

    pub fn combine(&self, d: &DimensionScores) -> f64 {
        self.as_array().iter().zip(d.as_array()).map(|(w, x)| w * x).sum()
    }
}

/// Per-dimension scores in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionScores {
    pub correctness: f64,
    pub relevance: f64,
    pub progression: f64,
    pub information_use: f64,
    pub thought: f64,
}

impl DimensionScores {
    pub fn as_array(&self) -> [f64; 5] {
        [self.correctness, self.relevance, self.progression, self.information_use, self.thought]
    }
}

/// Ground-truth rubric for an action at a state.
///
/// - correctness: the action is the oracle action;
/// - relevance: right tool (1), the plausible distractor tool (0.5), answering once the recipe is done (1);
/// - progression: advances the recipe (1), harmless error (0.5), poisons or ends the episode badly (0);
/// - information use: reuses the currently revealed token;
/// - thought: 0 for distractor calls and premature answers, 0.5 for a wrong final answer.
pub fn rubric_dimensions(task: &TaskSpec, state: &WorldState, action: AgentAction) -> DimensionScores {
    let oracle = world::oracle_action(task, state);
    let p = state.progress;
    let step = task.recipe.get(p);
    let is_distractor =
        matches!((action, step), (AgentAction::Invoke { tool, arg }, Some(s)) if s.distractor == Some(tool) && s.arg == arg);

    let relevance = match (action, step) {
        (AgentAction::Invoke { tool, .. }, Some(s)) if s.tool == tool => 1.0,
        (AgentAction::Invoke { tool, .. }, Some(s)) if s.distractor == Some(tool) => 0.5,
        (AgentAction::Answer { .. }, None) => 1.0,
        _ => 0.0,
    };
    let progression = match action {
        AgentAction::Answer { value } => {
            if step.is_none() && value == task.target_answer && !state.poisoned {
                1.0
            } else {
                0.0
            }
        }
        AgentAction::Invoke { .. } => match world::transition(task, state, action) {
            Ok((_, next)) if next.progress > state.progress => 1.0,
            Ok((_, next)) if next.poisoned && !state.poisoned => 0.0,
            _ => 0.5,
        },
    };
    let information_use = match (action, state.revealed) {
        (AgentAction::Invoke { arg, .. }, Some(Token::Arg { arg: r, .. })) if arg == r => 1.0,
        (AgentAction::Answer { value }, Some(Token::Answer { value: r })) if value == r => 1.0,
        _ => 0.0,
    };
    let thought = match action {
        AgentAction::Invoke { .. } if is_distractor => 0.0,
        AgentAction::Answer { .. } if step.is_some() => 0.0,
        AgentAction::Answer { value } if value != task.target_answer => 0.5,
        _ => 1.0,
    };
    // Any answer ends the episode and a distractor call poisons it; other
    // wrong calls leave the state intact and only cost a step.
    let fatal = action.is_answer() || matches!(world::transition(task, state, action), Ok((_, next)) if next.poisoned && !state.poisoned);
    let correctness = if action == oracle {
        1.0
    } else if fatal {
        0.0
    } else {
        0.5
    };
    DimensionScores { correctness, relevance, progression, information_use, thought }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Uniform,
    Gaussian,
}

fn draw_noise(eta: f64, kind: NoiseKind, rng: &mut impl Rng) -> f64 {
    if eta <= 0.0 {
        return 0.0;
    }
    match kind {
        NoiseKind::Uniform => rng.random_range(-eta..=eta),
        NoiseKind::Gaussian => {
            let n = Normal::new(0.0, eta).expect("eta is positive and finite");
            n.sample(rng).clamp(-3.0 * eta, 3.0 * eta)
        }
    }
}

pub fn rubric_score(
    task: &TaskSpec,
    state: &WorldState,
    action: AgentAction,
    weights: &RubricWeights,
    eta: f64,
    noise: NoiseKind,
    rng: &mut impl Rng,
) -> Result<PrmScore> {
    weights.validate()?;
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::InvalidArgument(format!("noise scale {eta} must be finite and non-negative")));
    }
    let base = weights.combine(&rubric_dimensions(task, state, action));
    Ok(PrmScore::new(base + draw_noise(eta, noise, rng), ScoreSource::Rubric))
}

/// Anything that scores a (state, action) pair in `[0, 1]`.
pub trait StepScorer: Send + Sync {
    fn score(&self, task: &TaskSpec, state: &WorldState, action: AgentAction, rng: &mut Stream) -> Result<PrmScore>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RubricScorer {
    pub weights: RubricWeights,
    pub eta: f64,
    pub noise: NoiseKind,
}

impl RubricScorer {
    pub fn new(weights: RubricWeights, eta: f64, noise: NoiseKind) -> Result<Self> {
        weights.validate()?;
        if !eta.is_finite() || eta < 0.0 {
            return Err(Error::InvalidArgument(format!("noise scale {eta} must be finite and non-negative")));
        }
        Ok(Self { weights, eta, noise })
    }

    pub fn noiseless() -> Self {
        Self { weights: RubricWeights::default(), eta: 0.0, noise: NoiseKind::Uniform }
    }
}

impl StepScorer for RubricScorer {
    fn score(&self, task: &TaskSpec, state: &WorldState, action: AgentAction, rng: &mut Stream) -> Result<PrmScore> {
        rubric_score(task, state, action, &self.weights, self.eta, self.noise, rng)
    }
}

/// Instruction text shipped with every remote scoring request.
pub fn rubric_prompt(weights: &RubricWeights) -> String {
    format!(
        "Rate the proposed agent action for the given state with a single number between 0 and 1. \
         Weigh five criteria: whether the call itself is correct ({:.0}%), whether it targets the current \
         sub-goal ({:.0}%), whether it moves the task forward from the previous steps ({:.0}%), whether it \
         uses the information revealed so far ({:.0}%), and the quality of the plan behind it ({:.0}%). \
         Reply with a JSON object of the form {{\"score\": <number>}}.",
        weights.correctness * 100.0,
        weights.relevance * 100.0,
        weights.progression * 100.0,
        weights.information_use * 100.0,
        weights.thought * 100.0,
    )
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    schema: u32,
    state: &'a str,
    action: &'a str,
    rubric_prompt: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteReply {
    pub score: PrmScore,
    /// Raw value when it had to be clamped into `[0, 1]`.
    pub clamped_from: Option<f64>,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteOptions {
    pub timeout: Duration,
    /// Maximum number of attempts.
    pub retry_budget: usize,
    /// First backoff delay; doubled after every failed attempt.
    pub backoff: Duration,
    pub rubric_prompt: String,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retry_budget: 3,
            backoff: Duration::from_millis(200),
            rubric_prompt: rubric_prompt(&RubricWeights::default()),
        }
    }
}

enum Attempt {
    Retry(String, bool),
    Fatal(Error),
}

fn parse_reply(body: &str) -> Result<f64> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| Error::MalformedResponse(format!("not JSON: {e}")))?;
    let score = v
        .get("score")
        .ok_or_else(|| Error::MalformedResponse("missing `score`".into()))?
        .as_f64()
        .ok_or_else(|| Error::MalformedResponse("`score` is not a number".into()))?;
    if !score.is_finite() {
        return Err(Error::MalformedResponse("`score` is not finite".into()));
    }
    Ok(score)
}

fn attempt_once(agent: &ureq::Agent, endpoint: &str, body: &RemoteRequest<'_>) -> std::result::Result<f64, Attempt> {
    let resp = agent.post(endpoint).send_json(body);
    let mut resp = match resp {
        Ok(r) => r,
        Err(ureq::Error::Timeout(_)) => return Err(Attempt::Retry("timeout".into(), true)),
        Err(e) => return Err(Attempt::Retry(e.to_string(), false)),
    };
    let status = resp.status();
    if !status.is_success() {
        return Err(Attempt::Retry(format!("HTTP status {}", status.as_u16()), false));
    }
    let text = match resp.body_mut().read_to_string() {
        Ok(t) => t,
        Err(ureq::Error::Timeout(_)) => return Err(Attempt::Retry("timeout".into(), true)),
        Err(e) => return Err(Attempt::Retry(e.to_string(), false)),
    };
    parse_reply(&text).map_err(Attempt::Fatal)
}

/// POST one scoring request, retrying transport failures and non-2xx
/// replies with exponential backoff. Malformed replies fail immediately.
pub fn remote_score(endpoint: &str, state_rendering: &str, action_rendering: &str, opts: &RemoteOptions) -> Result<RemoteReply> {
    if state_rendering.is_empty() || action_rendering.is_empty() {
        return Err(Error::InvalidArgument("remote scoring needs non-empty renderings".into()));
    }
    if opts.retry_budget == 0 {
        return Err(Error::InvalidArgument("retry budget must be at least 1".into()));
    }
    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(opts.timeout)).http_status_as_error(false).build().into();
    let body =
        RemoteRequest { schema: REMOTE_SCHEMA, state: state_rendering, action: action_rendering, rubric_prompt: &opts.rubric_prompt };
    let mut delay = opts.backoff;
    let mut last = String::new();
    let mut all_timeouts = true;
    for attempt in 1..=opts.retry_budget {
        match attempt_once(&agent, endpoint, &body) {
            Ok(raw) => {
                let score = PrmScore::new(raw, ScoreSource::Remote);
                let clamped_from = (score.value != raw).then_some(raw);
                if let Some(raw) = clamped_from {
                    log::warn!("remote score {raw} clamped to {}", score.value);
                }
                return Ok(RemoteReply { score, clamped_from, attempts: attempt });
            }
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(msg, timeout)) => {
                log::debug!("remote scorer attempt {attempt} failed: {msg}");
                all_timeouts &= timeout;
                last = msg;
                if attempt < opts.retry_budget {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    if all_timeouts {
        Err(Error::RemoteTimeout { attempts: opts.retry_budget })
    } else {
        Err(Error::RemoteFailed { attempts: opts.retry_budget, message: last })
    }
}

/// Counting gate bounding concurrent in-flight requests.
#[derive(Debug)]
struct Gate {
    max: usize,
    busy: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut busy = self.busy.lock().unwrap();
            while *busy >= self.max {
                busy = self.cv.wait(busy).unwrap();
            }
            *busy += 1;
        }
        let out = f();
        *self.busy.lock().unwrap() -= 1;
        self.cv.notify_one();
        out
    }
}

#[derive(Debug)]
pub struct RemoteScorer {
    pub endpoint: String,
    pub options: RemoteOptions,
    /// Number of trailing history entries rendered; `None` renders all.
    pub window: Option<usize>,
    gate: Gate,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>, options: RemoteOptions, window: Option<usize>, max_inflight: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            options,
            window,
            gate: Gate { max: max_inflight.max(1), busy: Mutex::new(0), cv: Condvar::new() },
        }
    }
}

impl StepScorer for RemoteScorer {
    fn score(&self, task: &TaskSpec, state: &WorldState, action: AgentAction, _rng: &mut Stream) -> Result<PrmScore> {
        let state_text = state.context(task).render(self.window);
        let action_text = action.to_string();
        self.gate.run(|| remote_score(&self.endpoint, &state_text, &action_text, &self.options)).map(|r| r.score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    pub gamma_low: f64,
    pub gamma_high: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self { gamma_low: 0.45, gamma_high: 0.65 }
    }
}

impl SelectionThresholds {
    pub fn new(gamma_low: f64, gamma_high: f64) -> Result<Self> {
        let t = Self { gamma_low, gamma_high };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_low.is_finite()
            && self.gamma_high.is_finite()
            && 0.0 <= self.gamma_low
            && self.gamma_low < self.gamma_high
            && self.gamma_high <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidThresholds { low: self.gamma_low, high: self.gamma_high })
        }
    }

    pub fn selects(&self, policy: f64, alternatives: impl IntoIterator<Item = f64>) -> bool {
        policy < self.gamma_low && alternatives.into_iter().fold(f64::NEG_INFINITY, f64::max) > self.gamma_high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredAlternative {
    pub action: AgentAction,
    pub score: PrmScore,
    /// 1-based index `j` within the step's proposal set.
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCriticalStep {
    pub trajectory_id: String,
    pub task_id: String,
    /// 1-based step index `t`.
    pub step_index: usize,
    pub policy_action: AgentAction,
    pub policy_score: PrmScore,
    pub alternatives: Vec<ScoredAlternative>,
    pub state_digest: u64,
}

impl CandidateCriticalStep {
    pub fn max_alternative(&self) -> f64 {
        self.alternatives.iter().map(|a| a.score.value).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn select_candidates(
    trajectory: &Trajectory,
    policy_scores: &[PrmScore],
    alternatives: &[Vec<ScoredAlternative>],
    thresholds: &SelectionThresholds,
) -> Result<Vec<CandidateCriticalStep>> {
    thresholds.validate()?;
    if trajectory.outcome != 0 {
        return Err(Error::SuccessfulTrajectory(trajectory.id.clone()));
    }
    let n = trajectory.steps.len();
    if policy_scores.len() != n || alternatives.len() != n {
        return Err(Error::Misaligned(format!(
            "{n} steps, {} policy scores, {} alternative sets",
            policy_scores.len(),
            alternatives.len()
        )));
    }
    Ok(trajectory
        .steps
        .iter()
        .zip(policy_scores)
        .zip(alternatives)
        .enumerate()
        .filter(|(_, ((_, ps), alts))| thresholds.selects(ps.value, alts.iter().map(|a| a.score.value)))
        .map(|(i, ((rec, ps), alts))| CandidateCriticalStep {
            trajectory_id: trajectory.id.clone(),
            task_id: trajectory.task_id.clone(),
            step_index: i + 1,
            policy_action: rec.action,
            policy_score: *ps,
            alternatives: alts.clone(),
            state_digest: rec.state_digest,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use crate::world::{generate_tasks, transition, Observation, StepRecord, WorldConfig};

    fn score(task: &TaskSpec, state: &WorldState, a: AgentAction, eta: f64) -> f64 {
        let mut r = stream(0, Purpose::PrmPolicy, &[]);
        rubric_score(task, state, a, &RubricWeights::default(), eta, NoiseKind::Uniform, &mut r).unwrap().value
    }

    #[test]
    fn default_weights_are_valid() {
        RubricWeights::default().validate().unwrap();
        let bad = RubricWeights { thought: 0.1, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn oracle_scores_one_and_correctness_alone_scores_035() {
        let tasks = generate_tasks(5, [0.2, 0.4, 0.4], &WorldConfig::default(), 8).unwrap();
        for t in &tasks {
            let s = WorldState::initial(t);
            assert!((score(t, &s, world::oracle_action(t, &s), 0.0) - 1.0).abs() < 1e-12);
        }
        let only = DimensionScores { correctness: 1.0, relevance: 0.0, progression: 0.0, information_use: 0.0, thought: 0.0 };
        assert!((RubricWeights::default().combine(&only) - 0.35).abs() < 1e-12);
    }

    #[test]
    fn noiseless_scores_are_deterministic_and_noisy_scores_bounded() {
        let t = &generate_tasks(1, [0.0, 1.0, 0.0], &WorldConfig::default(), 2).unwrap()[0];
        let s = WorldState::initial(t);
        let a = AgentAction::Invoke { tool: 3, arg: 1 };
        assert_eq!(score(t, &s, a, 0.0), score(t, &s, a, 0.0));
        let mut r = stream(4, Purpose::PrmPolicy, &[]);
        for eta in [0.1, 1.0, 5.0, 1e6] {
            for kind in [NoiseKind::Uniform, NoiseKind::Gaussian] {
                for i in 0..72 {
                    let a = t.space.decode(i).unwrap();
                    let v = rubric_score(t, &s, a, &RubricWeights::default(), eta, kind, &mut r).unwrap().value;
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn distractor_scores_below_oracle_at_planted_steps() {
        let tasks = generate_tasks(50, [0.3, 0.3, 0.4], &WorldConfig::default(), 12).unwrap();
        for t in &tasks {
            for &p in &t.planted_critical {
                let mut s = WorldState::initial(t);
                for step in &t.recipe[..p - 1] {
                    s = transition(t, &s, step.action()).unwrap().1;
                }
                let d = score(t, &s, t.distractor_action(p - 1).unwrap(), 0.0);
                assert!(d < score(t, &s, world::oracle_action(t, &s), 0.0));
                assert!(d < 0.45);
            }
        }
    }

    fn fake_failed(n: usize) -> Trajectory {
        let obs = Observation { payload: Token::Error, is_terminal: false };
        Trajectory {
            id: "f".into(),
            task_id: "t".into(),
            steps: (0..n)
                .map(|i| StepRecord { state_digest: i as u64, action: AgentAction::Answer { value: 0 }, observation: obs })
                .collect(),
            outcome: 0,
            length: n,
            rng_trace: 0,
        }
    }

    fn alts(scores: &[f64]) -> Vec<ScoredAlternative> {
        scores
            .iter()
            .enumerate()
            .map(|(j, &v)| ScoredAlternative {
                action: AgentAction::Answer { value: 1 },
                score: PrmScore::new(v, ScoreSource::Rubric),
                sample_index: j + 1,
            })
            .collect()
    }

    #[test]
    fn selection_examples() {
        let th = SelectionThresholds::default();
        let traj = fake_failed(3);
        let ps = [0.40, 0.50, 0.10].map(|v| PrmScore::new(v, ScoreSource::Rubric));
        let alt = vec![alts(&[0.70, 0.30]), alts(&[0.99]), alts(&[0.60])];
        let c = select_candidates(&traj, &ps, &alt, &th).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].step_index, 1);

        assert!(matches!(select_candidates(&traj, &ps[..2], &alt, &th), Err(Error::Misaligned(_))));
        let mut ok = traj.clone();
        ok.outcome = 1;
        assert!(matches!(select_candidates(&ok, &ps, &alt, &th), Err(Error::SuccessfulTrajectory(_))));
        assert!(SelectionThresholds::new(0.7, 0.6).is_err());
    }
}
