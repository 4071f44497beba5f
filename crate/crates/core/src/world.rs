//! Deterministic "ToolChain" world.
//!
//! A task hides a recipe of `(tool, argument)` calls. The query reveals the
//! first argument; each correct call reveals the argument of the next call
//! and the last one reveals the answer token. Argument tokens come in a plain
//! and a *marked* form. A plain argument is handled by its default tool, a
//! marked argument by its alternate tool. At marked (planted critical) steps
//! the default tool is a distractor: calling it returns a plausible decoy
//! token and poisons the chain so that no later call makes progress.
//!
//! Other wrong calls return an error token and leave the state otherwise
//! unchanged, which leaves room to recover within the horizon.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const WORLD_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Difficulty {
    L1,
    L2,
    L3,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::L1, Difficulty::L2, Difficulty::L3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::L1 => "L1",
            Difficulty::L2 => "L2",
            Difficulty::L3 => "L3",
        }
    }
}

/// Sizes of the composite action vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub n_tools: u16,
    pub n_args: u16,
    pub n_answers: u16,
}

impl ActionSpace {
    pub fn size(&self) -> usize {
        self.n_tools as usize * self.n_args as usize + self.n_answers as usize
    }

    pub fn decode(&self, index: usize) -> Result<AgentAction> {
        let invokes = self.n_tools as usize * self.n_args as usize;
        if index < invokes {
            Ok(AgentAction::Invoke { tool: (index / self.n_args as usize) as u16, arg: (index % self.n_args as usize) as u16 })
        } else if index < self.size() {
            Ok(AgentAction::Answer { value: (index - invokes) as u16 })
        } else {
            Err(Error::ActionOutOfVocabulary { index, size: self.size() })
        }
    }

    pub fn encode(&self, action: AgentAction) -> Result<usize> {
        let index = match action {
            AgentAction::Invoke { tool, arg } => {
                if tool >= self.n_tools || arg >= self.n_args {
                    usize::MAX
                } else {
                    tool as usize * self.n_args as usize + arg as usize
                }
            }
            AgentAction::Answer { value } => {
                if value >= self.n_answers {
                    usize::MAX
                } else {
                    self.n_tools as usize * self.n_args as usize + value as usize
                }
            }
        };
        if index == usize::MAX {
            return Err(Error::ActionOutOfVocabulary { index: self.raw_index(action), size: self.size() });
        }
        Ok(index)
    }

    fn raw_index(&self, action: AgentAction) -> usize {
        match action {
            AgentAction::Invoke { tool, arg } => tool as usize * self.n_args as usize + arg as usize,
            AgentAction::Answer { value } => self.n_tools as usize * self.n_args as usize + value as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentAction {
    Invoke { tool: u16, arg: u16 },
    Answer { value: u16 },
}

impl AgentAction {
    pub fn is_answer(&self) -> bool {
        matches!(self, AgentAction::Answer { .. })
    }
}

impl std::fmt::Display for AgentAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AgentAction::Invoke { tool, arg } => write!(f, "invoke(tool{tool}, arg{arg})"),
            AgentAction::Answer { value } => write!(f, "answer({value})"),
        }
    }
}

/// Tokens seen by the agent, in queries and observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Token {
    Arg { arg: u16, marked: bool },
    Answer { value: u16 },
    Error,
    Ack,
    Filler { id: u16 },
}

impl Token {
    /// Stable numeric code, used for hashing and digests.
    pub fn code(&self) -> u64 {
        match *self {
            Token::Arg { arg, marked } => 0x1_0000 | ((marked as u64) << 12) | arg as u64,
            Token::Answer { value } => 0x2_0000 | value as u64,
            Token::Error => 0x3_0000,
            Token::Ack => 0x4_0000,
            Token::Filler { id } => 0x5_0000 | id as u64,
        }
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Token::Arg { arg, marked: false } => write!(f, "arg{arg}"),
            Token::Arg { arg, marked: true } => write!(f, "arg{arg}*"),
            Token::Answer { value } => write!(f, "ans{value}"),
            Token::Error => write!(f, "error"),
            Token::Ack => write!(f, "ack"),
            Token::Filler { id } => write!(f, "w{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Observation {
    pub payload: Token,
    pub is_terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecipeStep {
    pub tool: u16,
    pub arg: u16,
    /// Default tool of a marked argument; present only at planted critical steps.
    pub distractor: Option<u16>,
    /// Payload returned when the distractor is called.
    pub decoy: Option<Token>,
}

impl RecipeStep {
    pub fn action(&self) -> AgentAction {
        AgentAction::Invoke { tool: self.tool, arg: self.arg }
    }

    pub fn is_planted(&self) -> bool {
        self.distractor.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub world_schema: u32,
    pub task_id: String,
    pub difficulty: Difficulty,
    pub query: Vec<Token>,
    pub recipe: Vec<RecipeStep>,
    pub target_answer: u16,
    /// 1-based recipe positions with a distractor tool.
    pub planted_critical: Vec<usize>,
    pub horizon: usize,
    pub space: ActionSpace,
    pub seed: u64,
}

impl TaskSpec {
    pub fn action_count(&self) -> usize {
        self.space.size()
    }

    /// The distractor call at recipe position `position` (0-based), if planted.
    pub fn distractor_action(&self, position: usize) -> Option<AgentAction> {
        let step = self.recipe.get(position)?;
        step.distractor.map(|tool| AgentAction::Invoke { tool, arg: step.arg })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_tools: u16,
    pub n_args: u16,
    pub n_answers: u16,
    /// Recipe length for L1, L2, L3.
    pub recipe_lengths: [usize; 3],
    /// Probability that a recipe position is a planted critical step.
    pub distractor_density: f64,
    pub horizon_slack: usize,
    pub filler_tokens: usize,
    pub filler_vocab: u16,
    /// Seed of the argument-to-tool layout shared by every task of a world.
    pub layout_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_tools: 8,
            n_args: 8,
            n_answers: 8,
            recipe_lengths: [2, 4, 6],
            distractor_density: 0.3,
            horizon_slack: 4,
            filler_tokens: 3,
            filler_vocab: 32,
            layout_seed: 0x7001,
        }
    }
}

impl WorldConfig {
    pub fn space(&self) -> ActionSpace {
        ActionSpace { n_tools: self.n_tools, n_args: self.n_args, n_answers: self.n_answers }
    }

    pub fn recipe_length(&self, level: Difficulty) -> usize {
        self.recipe_lengths[level.index()]
    }
}

/// Which tool handles each argument: `default[a]` for plain tokens,
/// `alternate[a]` (never equal to the default) for marked ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolLayout {
    pub default: Vec<u16>,
    pub alternate: Vec<u16>,
}

impl ToolLayout {
    pub fn new(cfg: &WorldConfig) -> Self {
        let mut r = rng::stream(cfg.layout_seed, Purpose::TaskGen, &[u64::MAX]);
        let tools: Vec<u16> = (0..cfg.n_tools).collect();
        let mut default = Vec::with_capacity(cfg.n_args as usize);
        let mut alternate = Vec::with_capacity(cfg.n_args as usize);
        let mut perm = tools.clone();
        perm.shuffle(&mut r);
        for a in 0..cfg.n_args as usize {
            let d = perm[a % perm.len()];
            let mut alt = tools[r.random_range(0..tools.len())];
            while alt == d {
                alt = tools[r.random_range(0..tools.len())];
            }
            default.push(d);
            alternate.push(alt);
        }
        Self { default, alternate }
    }
}

fn validate_mix(mix: &[f64; 3]) -> Result<()> {
    if mix.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidProportions(format!("{mix:?} has a negative or non-finite entry")));
    }
    let sum: f64 = mix.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidProportions(format!("{mix:?} sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Per-level counts by largest remainder so that they sum to `count`.
fn level_quotas(count: usize, mix: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = mix.iter().map(|p| p * count as f64).collect();
    let mut quotas = [raw[0].floor() as usize, raw[1].floor() as usize, raw[2].floor() as usize];
    let mut left = count - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if mix[i] > 0.0 {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

pub fn generate_tasks(count: usize, mix: [f64; 3], cfg: &WorldConfig, seed: u64) -> Result<Vec<TaskSpec>> {
    if count == 0 {
        return Err(Error::InvalidArgument("task count must be at least 1".into()));
    }
    validate_mix(&mix)?;
    if cfg.n_tools < 2 {
        return Err(Error::VocabularyTooSmall(format!("need at least 2 tools, have {}", cfg.n_tools)));
    }
    if cfg.n_answers < 2 {
        return Err(Error::VocabularyTooSmall(format!("need at least 2 answer values, have {}", cfg.n_answers)));
    }
    if !(0.0..=1.0).contains(&cfg.distractor_density) {
        return Err(Error::InvalidArgument(format!("distractor density {} outside [0,1]", cfg.distractor_density)));
    }
    for level in Difficulty::ALL {
        let len = cfg.recipe_length(level);
        if mix[level.index()] > 0.0 && (len == 0 || len + 1 > cfg.n_args as usize) {
            return Err(Error::VocabularyTooSmall(format!(
                "{} recipes of length {len} need more than {} distinct arguments",
                level.as_str(),
                cfg.n_args
            )));
        }
    }

    let layout = ToolLayout::new(cfg);
    let quotas = level_quotas(count, &mix);
    let mut levels: Vec<Difficulty> = Difficulty::ALL.iter().flat_map(|&l| std::iter::repeat_n(l, quotas[l.index()])).collect();
    levels.shuffle(&mut rng::stream(seed, Purpose::TaskGen, &[u64::MAX - 1]));

    let prefix = format!("t{:08x}", (seed ^ (seed >> 32)) as u32);
    Ok(levels.into_iter().enumerate().map(|(i, level)| build_task(i, level, cfg, &layout, seed, &prefix)).collect())
}

fn build_task(i: usize, level: Difficulty, cfg: &WorldConfig, layout: &ToolLayout, seed: u64, prefix: &str) -> TaskSpec {
    let task_seed = rng::derive_seed(seed, Purpose::TaskGen, &[i as u64]);
    let mut r = rng::stream_from_seed(task_seed);
    let len = cfg.recipe_length(level);

    let mut args: Vec<u16> = (0..cfg.n_args).collect();
    args.shuffle(&mut r);
    args.truncate(len);

    let mut planted: Vec<bool> = (0..len).map(|_| r.random_bool(cfg.distractor_density)).collect();
    if cfg.distractor_density > 0.0 && !planted.iter().any(|&p| p) {
        let p = r.random_range(0..len);
        planted[p] = true;
    }
    let target_answer = r.random_range(0..cfg.n_answers);

    let recipe: Vec<RecipeStep> = (0..len)
        .map(|p| {
            let arg = args[p];
            if planted[p] {
                let decoy = if p + 1 < len {
                    // plain token that is neither this argument nor the real next one
                    let mut d = r.random_range(0..cfg.n_args);
                    while d == arg || d == args[p + 1] {
                        d = r.random_range(0..cfg.n_args);
                    }
                    Token::Arg { arg: d, marked: false }
                } else {
                    let mut v = r.random_range(0..cfg.n_answers);
                    while v == target_answer {
                        v = r.random_range(0..cfg.n_answers);
                    }
                    Token::Answer { value: v }
                };
                RecipeStep { tool: layout.alternate[arg as usize], arg, distractor: Some(layout.default[arg as usize]), decoy: Some(decoy) }
            } else {
                RecipeStep { tool: layout.default[arg as usize], arg, distractor: None, decoy: None }
            }
        })
        .collect();

    let mut query = vec![Token::Arg { arg: args[0], marked: planted[0] }];
    for _ in 0..cfg.filler_tokens {
        query.push(Token::Filler { id: r.random_range(0..cfg.filler_vocab.max(1)) });
    }

    TaskSpec {
        world_schema: WORLD_SCHEMA,
        task_id: format!("{prefix}-{i:05}"),
        difficulty: level,
        query,
        recipe,
        target_answer,
        planted_critical: (0..len).filter(|&p| planted[p]).map(|p| p + 1).collect(),
        horizon: len + cfg.horizon_slack,
        space: cfg.space(),
        seed: task_seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub action: AgentAction,
    pub observation: Observation,
}

/// Full environment state. `progress` and `poisoned` are hidden from the
/// agent; everything the agent may condition on is in [`StateContext`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WorldState {
    pub task_id: String,
    /// 1-based index of the next step.
    pub step_index: usize,
    pub history: Vec<HistoryEntry>,
    /// Token unlocked by the last successful call (first argument initially).
    pub revealed: Option<Token>,
    /// Completed recipe calls.
    pub progress: usize,
    pub poisoned: bool,
    pub terminated: bool,
}

impl WorldState {
    pub fn initial(task: &TaskSpec) -> Self {
        Self {
            task_id: task.task_id.clone(),
            step_index: 1,
            history: Vec::new(),
            revealed: task.query.first().copied(),
            progress: 0,
            poisoned: false,
            terminated: false,
        }
    }

    pub fn context(&self, task: &TaskSpec) -> StateContext {
        StateContext { query: task.query.clone(), history: self.history.clone(), revealed: self.revealed }
    }

    pub fn digest(&self, task: &TaskSpec) -> u64 {
        context_digest(&task.query, &self.history, self.revealed)
    }
}

/// The agent-visible part of a state: query, interaction history and the
/// currently revealed token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateContext {
    pub query: Vec<Token>,
    pub history: Vec<HistoryEntry>,
    pub revealed: Option<Token>,
}

impl StateContext {
    pub fn step_index(&self) -> usize {
        self.history.len() + 1
    }

    pub fn digest(&self) -> u64 {
        context_digest(&self.query, &self.history, self.revealed)
    }

    /// Plain-text rendering handed to remote scorers.
    pub fn render(&self, window: Option<usize>) -> String {
        let mut out = String::from("query:");
        for t in &self.query {
            out.push(' ');
            out.push_str(&t.to_string());
        }
        let skip = window.map_or(0, |w| self.history.len().saturating_sub(w));
        for (i, h) in self.history.iter().enumerate().skip(skip) {
            out.push_str(&format!("\nstep {}: {} -> {}", i + 1, h.action, h.observation.payload));
        }
        if let Some(r) = self.revealed {
            out.push_str(&format!("\nrevealed: {r}"));
        }
        out
    }
}

fn action_code(a: &AgentAction) -> u64 {
    match *a {
        AgentAction::Invoke { tool, arg } => 0x10_0000 | ((tool as u64) << 8) | arg as u64,
        AgentAction::Answer { value } => 0x20_0000 | value as u64,
    }
}

fn context_digest(query: &[Token], history: &[HistoryEntry], revealed: Option<Token>) -> u64 {
    let q = query.iter().map(Token::code);
    let h = history.iter().flat_map(|e| [action_code(&e.action), e.observation.payload.code(), e.observation.is_terminal as u64]);
    let r = std::iter::once(revealed.map_or(0, |t| t.code()));
    rng::fnv1a(q.chain(std::iter::once(u64::MAX)).chain(h).chain(r))
}

/// One environment step. Pure: the input state is not modified.
pub fn transition(task: &TaskSpec, state: &WorldState, action: AgentAction) -> Result<(Observation, WorldState)> {
    if state.task_id != task.task_id {
        return Err(Error::TaskMismatch { task: task.task_id.clone(), state: state.task_id.clone() });
    }
    if state.terminated {
        return Err(Error::AfterTermination(task.task_id.clone()));
    }
    task.space.encode(action)?;

    let mut next = state.clone();
    let len = task.recipe.len();
    let (payload, terminal) = match action {
        AgentAction::Answer { .. } => (Token::Ack, true),
        AgentAction::Invoke { tool, arg } => {
            let p = state.progress;
            if state.poisoned || p >= len {
                (Token::Error, false)
            } else if task.recipe[p].tool == tool && task.recipe[p].arg == arg {
                next.progress += 1;
                let token = if p + 1 < len {
                    let step = &task.recipe[p + 1];
                    Token::Arg { arg: step.arg, marked: step.is_planted() }
                } else {
                    Token::Answer { value: task.target_answer }
                };
                next.revealed = Some(token);
                (token, false)
            } else if task.recipe[p].distractor == Some(tool) && task.recipe[p].arg == arg {
                let decoy = task.recipe[p].decoy.unwrap_or(Token::Error);
                next.poisoned = true;
                next.revealed = Some(decoy);
                (decoy, false)
            } else {
                (Token::Error, false)
            }
        }
    };
    let is_terminal = terminal || state.history.len() + 1 >= task.horizon;
    let observation = Observation { payload, is_terminal };
    next.history.push(HistoryEntry { action, observation });
    next.step_index += 1;
    next.terminated = is_terminal;
    Ok((observation, next))
}

/// Ground-truth best action: the next recipe call, or the target answer once
/// the recipe is complete. A poisoned state still gets the recipe call.
pub fn oracle_action(task: &TaskSpec, state: &WorldState) -> AgentAction {
    match task.recipe.get(state.progress) {
        Some(step) => step.action(),
        None => AgentAction::Answer { value: task.target_answer },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state_digest: u64,
    pub action: AgentAction,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub task_id: String,
    pub steps: Vec<StepRecord>,
    pub outcome: u8,
    pub length: usize,
    /// Seed of the stream that drove the sampled actions.
    pub rng_trace: u64,
}

impl Trajectory {
    pub fn actions(&self) -> impl Iterator<Item = AgentAction> + '_ {
        self.steps.iter().map(|s| s.action)
    }

    pub fn ended_by_horizon(&self) -> bool {
        self.steps.last().is_some_and(|s| !s.action.is_answer())
    }
}

pub fn verify_outcome(task: &TaskSpec, trajectory: &Trajectory) -> Result<u8> {
    if trajectory.task_id != task.task_id {
        return Err(Error::TaskMismatch { task: task.task_id.clone(), state: trajectory.task_id.clone() });
    }
    let Some(last) = trajectory.steps.last() else {
        return Err(Error::Unfinished);
    };
    if !last.observation.is_terminal && trajectory.steps.len() < task.horizon {
        return Err(Error::Unfinished);
    }
    Ok(u8::from(last.action == AgentAction::Answer { value: task.target_answer }))
}

/// Continue from `state` until termination, recording each step.
pub fn run_episode<F>(task: &TaskSpec, mut state: WorldState, steps: &mut Vec<StepRecord>, mut choose: F) -> Result<WorldState>
where
    F: FnMut(&WorldState) -> Result<AgentAction>,
{
    while !state.terminated {
        let action = choose(&state)?;
        let digest = state.digest(task);
        let (observation, next) = transition(task, &state, action)?;
        steps.push(StepRecord { state_digest: digest, action, observation });
        state = next;
    }
    Ok(state)
}

/// Roll out a full episode from the initial state and score it.
pub fn rollout<F>(task: &TaskSpec, id: String, rng_trace: u64, choose: F) -> Result<Trajectory>
where
    F: FnMut(&WorldState) -> Result<AgentAction>,
{
    let mut steps = Vec::with_capacity(task.horizon);
    run_episode(task, WorldState::initial(task), &mut steps, choose)?;
    finish(task, id, steps, rng_trace)
}

pub fn finish(task: &TaskSpec, id: String, steps: Vec<StepRecord>, rng_trace: u64) -> Result<Trajectory> {
    let mut t = Trajectory { id, task_id: task.task_id.clone(), length: steps.len(), steps, outcome: 0, rng_trace };
    t.outcome = verify_outcome(task, &t)?;
    Ok(t)
}

/// Replay the recorded actions of steps `1..t` and return the state before
/// step `t`, checking every stored digest on the way.
pub fn replay_to(task: &TaskSpec, trajectory: &Trajectory, t: usize) -> Result<WorldState> {
    if trajectory.task_id != task.task_id {
        return Err(Error::TaskMismatch { task: task.task_id.clone(), state: trajectory.task_id.clone() });
    }
    if t == 0 || t > trajectory.steps.len() {
        return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", trajectory.steps.len())));
    }
    let mut state = WorldState::initial(task);
    for (i, rec) in trajectory.steps.iter().enumerate().take(t) {
        if state.digest(task) != rec.state_digest {
            return Err(Error::ReplayDivergence { trajectory: trajectory.id.clone(), step: i + 1 });
        }
        if i + 1 == t {
            break;
        }
        let (obs, next) = transition(task, &state, rec.action)?;
        if obs != rec.observation {
            return Err(Error::ReplayDivergence { trajectory: trajectory.id.clone(), step: i + 1 });
        }
        state = next;
    }
    Ok(state)
}

/// States before every step of a trajectory (index `i` is the state before step `i + 1`).
pub fn replay_states(task: &TaskSpec, trajectory: &Trajectory) -> Result<Vec<WorldState>> {
    let mut states = Vec::with_capacity(trajectory.steps.len());
    let mut state = WorldState::initial(task);
    for (i, rec) in trajectory.steps.iter().enumerate() {
        if state.digest(task) != rec.state_digest {
            return Err(Error::ReplayDivergence { trajectory: trajectory.id.clone(), step: i + 1 });
        }
        let (obs, next) = transition(task, &state, rec.action)?;
        if obs != rec.observation {
            return Err(Error::ReplayDivergence { trajectory: trajectory.id.clone(), step: i + 1 });
        }
        states.push(state);
        state = next;
    }
    Ok(states)
}

/// Rebuild the full world state behind an agent-visible context by replaying
/// its history.
pub fn state_from_context(task: &TaskSpec, ctx: &StateContext) -> Result<WorldState> {
    if ctx.query != task.query {
        return Err(Error::TaskMismatch { task: task.task_id.clone(), state: "<context>".into() });
    }
    let mut state = WorldState::initial(task);
    for (i, h) in ctx.history.iter().enumerate() {
        let (obs, next) = transition(task, &state, h.action)?;
        if obs != h.observation {
            return Err(Error::ReplayDivergence { trajectory: task.task_id.clone(), step: i + 1 });
        }
        state = next;
    }
    if state.revealed != ctx.revealed {
        return Err(Error::ReplayDivergence { trajectory: task.task_id.clone(), step: ctx.history.len() + 1 });
    }
    Ok(state)
}

pub fn oracle_rollout(task: &TaskSpec) -> Result<Trajectory> {
    rollout(task, format!("{}/oracle", task.task_id), 0, |s| Ok(oracle_action(task, s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(seed: u64, mix: [f64; 3]) -> TaskSpec {
        generate_tasks(1, mix, &WorldConfig::default(), seed).unwrap().remove(0)
    }

    #[test]
    fn l1_recipe_has_length_two() {
        let t = task(7, [1.0, 0.0, 0.0]);
        assert_eq!(t.recipe.len(), 2);
        assert_eq!(t.difficulty, Difficulty::L1);
        assert_eq!(t.horizon, 6);
        assert!(!t.planted_critical.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = generate_tasks(100, [0.5, 0.3, 0.2], &cfg, 7).unwrap();
        let b = generate_tasks(100, [0.5, 0.3, 0.2], &cfg, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let counts = Difficulty::ALL.map(|l| a.iter().filter(|t| t.difficulty == l).count());
        assert_eq!(counts, [50, 30, 20]);
    }

    #[test]
    fn l3_oracle_replays_succeed() {
        for t in generate_tasks(10, [0.0, 0.0, 1.0], &WorldConfig::default(), 3).unwrap() {
            assert_eq!(t.recipe.len(), 6);
            assert_eq!(oracle_rollout(&t).unwrap().outcome, 1);
        }
    }

    #[test]
    fn invalid_mix_and_small_vocab_rejected() {
        let cfg = WorldConfig::default();
        assert!(matches!(generate_tasks(3, [0.5, 0.5, 0.5], &cfg, 1), Err(Error::InvalidProportions(_))));
        assert!(matches!(generate_tasks(3, [-0.5, 1.0, 0.5], &cfg, 1), Err(Error::InvalidProportions(_))));
        let small = WorldConfig { n_args: 4, ..cfg.clone() };
        assert!(matches!(generate_tasks(3, [0.0, 0.0, 1.0], &small, 1), Err(Error::VocabularyTooSmall(_))));
        // L3 is not requested, so four arguments are enough for L1 recipes
        assert!(generate_tasks(3, [1.0, 0.0, 0.0], &small, 1).is_ok());
        assert!(generate_tasks(0, [1.0, 0.0, 0.0], &cfg, 1).is_err());
    }

    #[test]
    fn correct_call_reveals_next_argument() {
        let t = task(11, [0.0, 1.0, 0.0]);
        let s0 = WorldState::initial(&t);
        let (obs, s1) = transition(&t, &s0, t.recipe[0].action()).unwrap();
        let next = t.recipe[1];
        assert_eq!(obs.payload, Token::Arg { arg: next.arg, marked: next.is_planted() });
        assert!(!obs.is_terminal);
        assert_eq!(s1.step_index, 2);
        assert_eq!(s1.progress, 1);
        assert_eq!(s1.history.len(), 1);
    }

    #[test]
    fn answer_terminates_and_transition_is_pure() {
        let t = task(5, [1.0, 0.0, 0.0]);
        let s0 = WorldState::initial(&t);
        let a = AgentAction::Answer { value: t.target_answer };
        let (o1, s1) = transition(&t, &s0, a).unwrap();
        let (o2, s2) = transition(&t, &s0, a).unwrap();
        assert_eq!((o1, &s1), (o2, &s2));
        assert!(o1.is_terminal && s1.terminated);
        assert!(matches!(transition(&t, &s1, a), Err(Error::AfterTermination(_))));
    }

    #[test]
    fn out_of_vocabulary_action_rejected() {
        let t = task(5, [1.0, 0.0, 0.0]);
        let s0 = WorldState::initial(&t);
        let bad = AgentAction::Invoke { tool: 8, arg: 0 };
        assert!(matches!(transition(&t, &s0, bad), Err(Error::ActionOutOfVocabulary { .. })));
        assert!(t.space.decode(72).is_err());
    }

    #[test]
    fn outcome_contract() {
        let t = task(9, [1.0, 0.0, 0.0]);
        let good = oracle_rollout(&t).unwrap();
        assert_eq!(verify_outcome(&t, &good).unwrap(), 1);

        let wrong = (t.target_answer + 1) % t.space.n_answers;
        let bad = rollout(&t, "x".into(), 0, |_| Ok(AgentAction::Answer { value: wrong })).unwrap();
        assert_eq!(bad.outcome, 0);

        // a tool that is never correct burns the horizon
        let idle = AgentAction::Invoke { tool: t.recipe[0].tool, arg: (t.recipe[0].arg + 1) % 8 };
        let stuck = rollout(&t, "y".into(), 0, |_| Ok(idle)).unwrap();
        assert_eq!(stuck.length, t.horizon);
        assert_eq!(stuck.outcome, 0);
        assert!(stuck.steps.last().unwrap().observation.is_terminal);

        let mut other = t.clone();
        other.task_id = "other".into();
        assert!(verify_outcome(&other, &good).is_err());
    }

    #[test]
    fn oracle_action_follows_recipe() {
        let t = task(21, [0.0, 1.0, 0.0]);
        let mut s = WorldState::initial(&t);
        assert_eq!(oracle_action(&t, &s), t.recipe[0].action());
        for step in &t.recipe {
            s = transition(&t, &s, step.action()).unwrap().1;
        }
        assert_eq!(oracle_action(&t, &s), AgentAction::Answer { value: t.target_answer });
    }

    #[test]
    fn distractor_poisons_every_planted_step() {
        let tasks = generate_tasks(60, [0.3, 0.3, 0.4], &WorldConfig::default(), 17).unwrap();
        let mut checked = 0;
        for t in &tasks {
            for &p in &t.planted_critical {
                let mut s = WorldState::initial(t);
                for step in &t.recipe[..p - 1] {
                    s = transition(t, &s, step.action()).unwrap().1;
                }
                let (obs, s) = transition(t, &s, t.distractor_action(p - 1).unwrap()).unwrap();
                assert!(s.poisoned);
                assert_ne!(obs.payload, Token::Error);
                let mut steps = Vec::new();
                run_episode(t, s, &mut steps, |st| Ok(oracle_action(t, st))).unwrap();
                assert!(steps.last().unwrap().action != AgentAction::Answer { value: t.target_answer });
                checked += 1;
            }
        }
        assert!(checked > 30);
    }

    #[test]
    fn encoding_is_a_bijection() {
        let space = WorldConfig::default().space();
        assert_eq!(space.size(), 72);
        for i in 0..space.size() {
            assert_eq!(space.encode(space.decode(i).unwrap()).unwrap(), i);
        }
    }

    #[test]
    fn replay_reconstructs_states() {
        let t = task(4, [0.0, 0.0, 1.0]);
        let traj = oracle_rollout(&t).unwrap();
        let states = replay_states(&t, &traj).unwrap();
        for (i, s) in states.iter().enumerate() {
            assert_eq!(s.step_index, i + 1);
            assert_eq!(replay_to(&t, &traj, i + 1).unwrap(), *s);
            assert_eq!(state_from_context(&t, &s.context(&t)).unwrap(), *s);
        }
        let mut corrupt = traj.clone();
        corrupt.steps[2].state_digest ^= 1;
        assert!(matches!(replay_to(&t, &corrupt, 4), Err(Error::ReplayDivergence { step: 3, .. })));
    }
}
