//! Linear-softmax policies over the composite action space.
//!
//! `π(a|s) = softmax(W φ(s))[a]` with `W` of shape `A × F`. The learner, the
//! frozen reference snapshots and SFT all share this representation; the
//! expert is the world oracle with epsilon noise.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{chunked_sum, log_sum_exp};
use crate::world::{self, ActionSpace, AgentAction, HistoryEntry, StateContext, TaskSpec, Token, Trajectory, WorldState};

pub const PARAMS_MAGIC: &[u8; 8] = b"CSOPARAM";
pub const PARAMS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub dim: usize,
    /// Number of most recent history entries hashed into the digest block.
    pub history_k: usize,
    /// Value written into a hashed bucket per token.
    pub hash_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { dim: 64, history_k: 2, hash_scale: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Maps agent-visible state to a fixed-length feature vector.
///
/// Layout: `[bias | revealed argument (one-hot) | marked argument (one-hot) |
/// revealed answer (one-hot) | argument-revealed flag | hashed digests]`.
/// The hashed block takes the query filler tokens, the step index and the
/// last `history_k` (action, observation) pairs through a multiplicative
/// hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    pub cfg: FeatureConfig,
    pub space: ActionSpace,
    structured: usize,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn bucket(slot: u64, code: u64, buckets: usize) -> usize {
    let h = (code ^ slot.wrapping_mul(0xD6E8_FEB8_6659_FD93)).wrapping_mul(GOLDEN);
    ((h >> 32) % buckets as u64) as usize
}

fn action_code(a: &AgentAction) -> u64 {
    match *a {
        AgentAction::Invoke { tool, arg } => ((tool as u64) << 8) | arg as u64 | 0x1_0000,
        AgentAction::Answer { value } => value as u64 | 0x2_0000,
    }
}

impl Featurizer {
    pub fn new(cfg: FeatureConfig, space: ActionSpace) -> Result<Self> {
        let structured = 1 + 2 * space.n_args as usize + space.n_answers as usize + 1;
        if cfg.dim <= structured {
            return Err(Error::InvalidArgument(format!("feature dimension {} must exceed the structured block of {structured}", cfg.dim)));
        }
        if !cfg.hash_scale.is_finite() {
            return Err(Error::NonFinite("hash_scale"));
        }
        Ok(Self { cfg, space, structured })
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn features(&self, query: &[Token], history: &[HistoryEntry], revealed: Option<Token>) -> FeatureVector {
        let na = self.space.n_args as usize;
        let mut v = vec![0.0; self.cfg.dim];
        v[0] = 1.0;
        match revealed {
            Some(Token::Arg { arg, marked }) if (arg as usize) < na => {
                v[1 + arg as usize] = 1.0;
                if marked {
                    v[1 + na + arg as usize] = 1.0;
                }
                v[self.structured - 1] = 1.0;
            }
            Some(Token::Answer { value }) if value < self.space.n_answers => {
                v[1 + 2 * na + value as usize] = 1.0;
            }
            _ => {}
        }
        let buckets = self.cfg.dim - self.structured;
        let s = self.cfg.hash_scale;
        let mut put = |slot: u64, code: u64| v[self.structured + bucket(slot, code, buckets)] += s;
        for t in query.iter().skip(1) {
            put(1, t.code());
        }
        put(2, history.len() as u64 + 1);
        for (j, h) in history.iter().rev().take(self.cfg.history_k).enumerate() {
            put(3 + j as u64, (action_code(&h.action) << 20) ^ h.observation.payload.code());
        }
        FeatureVector(v)
    }

    pub fn of_state(&self, task: &TaskSpec, state: &WorldState) -> FeatureVector {
        self.features(&task.query, &state.history, state.revealed)
    }

    pub fn of_context(&self, ctx: &StateContext) -> FeatureVector {
        self.features(&ctx.query, &ctx.history, ctx.revealed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParameters {
    pub actions: usize,
    pub features: usize,
    /// Row-major `actions × features`.
    pub weights: Vec<f64>,
    pub version: u64,
}

impl PolicyParameters {
    pub fn zeros(actions: usize, features: usize) -> Self {
        Self { actions, features, weights: vec![0.0; actions * features], version: 0 }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.weights.iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("policy weights"))
        }
    }

    pub fn row(&self, action: usize) -> &[f64] {
        &self.weights[action * self.features..(action + 1) * self.features]
    }

    pub fn logits(&self, phi: &FeatureVector) -> Vec<f64> {
        (0..self.actions).map(|a| self.row(a).iter().zip(&phi.0).map(|(w, x)| w * x).sum()).collect()
    }

    pub fn log_probs(&self, phi: &FeatureVector) -> Vec<f64> {
        let mut z = self.logits(phi);
        let lse = log_sum_exp(&z);
        z.iter_mut().for_each(|x| *x -= lse);
        z
    }

    pub fn probs(&self, phi: &FeatureVector) -> Vec<f64> {
        self.log_probs(phi).into_iter().map(f64::exp).collect()
    }

    /// Apply `weights -= step * grad` and bump the version.
    pub fn descend(&mut self, grad: &[f64], step: f64) {
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= step * g;
        }
        self.version += 1;
    }

    pub fn bits(&self) -> Vec<u64> {
        self.weights.iter().map(|w| w.to_bits()).collect()
    }

    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&PARAMS_SCHEMA.to_le_bytes())?;
        w.write_all(&(self.actions as u32).to_le_bytes())?;
        w.write_all(&(self.features as u32).to_le_bytes())?;
        w.write_all(&self.version.to_le_bytes())?;
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read, path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::BadParameterFile { path: path.to_path_buf(), message: message.to_string() };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let schema = u32::from_le_bytes(u32buf);
        if schema != PARAMS_SCHEMA {
            return Err(Error::SchemaMismatch { path: path.to_path_buf(), expected: PARAMS_SCHEMA, found: schema });
        }
        r.read_exact(&mut u32buf)?;
        let actions = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let features = u32::from_le_bytes(u32buf) as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let version = u64::from_le_bytes(u64buf);
        let mut weights = Vec::with_capacity(actions * features);
        for _ in 0..actions * features {
            r.read_exact(&mut u64buf)?;
            weights.push(f64::from_le_bytes(u64buf));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let p = Self { actions, features, weights, version };
        p.check_finite()?;
        Ok(p)
    }
}

/// Frozen parameters plus where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub params: PolicyParameters,
    pub round: usize,
    pub command: String,
}

#[derive(Serialize, Deserialize)]
struct SnapshotSidecar {
    schema: u32,
    version: u64,
    actions: usize,
    features: usize,
    round: usize,
    command: String,
}

impl PolicySnapshot {
    pub fn new(params: PolicyParameters, round: usize, command: impl Into<String>) -> Self {
        Self { params, round, command: command.into() }
    }

    /// Writes `<path>` (binary weights) and `<path>.json` (provenance).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        self.params.write_binary(&mut buf)?;
        std::fs::write(path, buf)?;
        let side = SnapshotSidecar {
            schema: PARAMS_SCHEMA,
            version: self.params.version,
            actions: self.params.actions,
            features: self.params.features,
            round: self.round,
            command: self.command.clone(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let params = PolicyParameters::read_binary(std::fs::File::open(path)?, path)?;
        let side_path = sidecar_path(path);
        let (round, command) = if side_path.exists() {
            let side: SnapshotSidecar = serde_json::from_str(&std::fs::read_to_string(&side_path)?)?;
            if side.schema != PARAMS_SCHEMA {
                return Err(Error::SchemaMismatch { path: side_path, expected: PARAMS_SCHEMA, found: side.schema });
            }
            (side.round, side.command)
        } else {
            (0, String::new())
        };
        Ok(Self { params, round, command })
    }
}

/// Metadata file stored next to a parameter file.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn log_prob(params: &PolicyParameters, featurizer: &Featurizer, ctx: &StateContext, action: AgentAction) -> Result<f64> {
    params.check_finite()?;
    let a = featurizer.space.encode(action)?;
    Ok(params.log_probs(&featurizer.of_context(ctx))[a])
}

/// Inverse-CDF categorical draw; consumes exactly one uniform.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn sample_action(
    params: &PolicyParameters,
    featurizer: &Featurizer,
    task: &TaskSpec,
    state: &WorldState,
    rng: &mut impl Rng,
) -> AgentAction {
    let probs = params.probs(&featurizer.of_state(task, state));
    featurizer.space.decode(sample_index(&probs, rng)).expect("index below action count")
}

/// Oracle action with probability `1 - epsilon`, otherwise a uniformly
/// random non-oracle action.
pub fn expert_action(task: &TaskSpec, state: &WorldState, epsilon: f64, rng: &mut impl Rng) -> AgentAction {
    let oracle = world::oracle_action(task, state);
    let u: f64 = rng.random();
    if u >= epsilon {
        return oracle;
    }
    let space = task.space;
    let skip = space.encode(oracle).expect("oracle action is in vocabulary");
    let mut i = rng.random_range(0..space.size() - 1);
    if i >= skip {
        i += 1;
    }
    space.decode(i).expect("index below action count")
}

pub fn expert_rollout(task: &TaskSpec, id: String, epsilon: f64, seed: u64) -> Result<Trajectory> {
    let mut rng = crate::rng::stream_from_seed(seed);
    world::rollout(task, id, seed, |s| Ok(expert_action(task, s, epsilon, &mut rng)))
}

pub fn policy_rollout(params: &PolicyParameters, featurizer: &Featurizer, task: &TaskSpec, id: String, seed: u64) -> Result<Trajectory> {
    let mut rng = crate::rng::stream_from_seed(seed);
    world::rollout(task, id, seed, |s| Ok(sample_action(params, featurizer, task, s, &mut rng)))
}

/// Successful trajectories used for supervised fine-tuning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DemoDataset {
    pub demos: Vec<(String, Trajectory)>,
}

impl DemoDataset {
    pub fn new(demos: Vec<(String, Trajectory)>) -> Result<Self> {
        if let Some((_, t)) = demos.iter().find(|(_, t)| t.outcome != 1) {
            return Err(Error::InvalidArgument(format!("demo {} has outcome 0", t.id)));
        }
        Ok(Self { demos })
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { step_size: 0.1, epochs: 30 }
    }
}

/// Negative log-likelihood of demonstrated actions, summed over the steps
/// of each trajectory and averaged over trajectories.
pub struct SftObjective {
    /// Per trajectory: (features, action index) for each step.
    trajectories: Vec<Vec<(FeatureVector, usize)>>,
    actions: usize,
    features: usize,
}

impl SftObjective {
    pub fn new(featurizer: &Featurizer, tasks: &HashMap<String, &TaskSpec>, demos: &DemoDataset) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::EmptyDataset("sft demos"));
        }
        let mut trajectories = Vec::with_capacity(demos.len());
        for (task_id, traj) in &demos.demos {
            let task = tasks.get(task_id).ok_or_else(|| Error::MissingInput { kind: "sft", what: format!("task {task_id}") })?;
            let states = world::replay_states(task, traj)?;
            let mut steps = Vec::with_capacity(states.len());
            for (s, rec) in states.iter().zip(&traj.steps) {
                steps.push((featurizer.of_state(task, s), featurizer.space.encode(rec.action)?));
            }
            trajectories.push(steps);
        }
        Ok(Self { trajectories, actions: featurizer.space.size(), features: featurizer.dim() })
    }

    pub fn loss(&self, params: &PolicyParameters) -> f64 {
        self.loss_and_gradient(params).0
    }

    pub fn loss_and_gradient(&self, params: &PolicyParameters) -> (f64, Vec<f64>) {
        let n = self.trajectories.len() as f64;
        let f = self.features;
        let (mut grad, nll) = chunked_sum(self.trajectories.len(), self.actions * f, |i, acc| {
            let mut nll = 0.0;
            for (phi, a) in &self.trajectories[i] {
                let lp = params.log_probs(phi);
                nll -= lp[*a];
                for (b, l) in lp.iter().enumerate() {
                    let coef = l.exp() - if b == *a { 1.0 } else { 0.0 };
                    if coef != 0.0 {
                        for (g, x) in acc[b * f..(b + 1) * f].iter_mut().zip(&phi.0) {
                            *g += coef * x;
                        }
                    }
                }
            }
            nll
        });
        grad.iter_mut().for_each(|g| *g /= n);
        (nll / n, grad)
    }
}

/// Full-batch gradient descent on the SFT objective. Returns the trained
/// parameters and the loss before each epoch plus the final loss.
pub fn sft_train(
    params: &PolicyParameters,
    featurizer: &Featurizer,
    tasks: &HashMap<String, &TaskSpec>,
    demos: &DemoDataset,
    opt: &OptimizerConfig,
) -> Result<(PolicyParameters, Vec<f64>)> {
    params.check_finite()?;
    let objective = SftObjective::new(featurizer, tasks, demos)?;
    let mut p = params.clone();
    let mut losses = Vec::with_capacity(opt.epochs + 1);
    for _ in 0..opt.epochs {
        let (loss, grad) = objective.loss_and_gradient(&p);
        if !loss.is_finite() {
            return Err(Error::NonFinite("sft loss"));
        }
        losses.push(loss);
        p.descend(&grad, opt.step_size);
    }
    let last = objective.loss(&p);
    if !last.is_finite() {
        return Err(Error::NonFinite("sft loss"));
    }
    losses.push(last);
    Ok((p, losses))
}

pub fn task_index(tasks: &[TaskSpec]) -> HashMap<String, &TaskSpec> {
    tasks.iter().map(|t| (t.task_id.clone(), t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::rng::Purpose;
    use crate::world::{generate_tasks, WorldConfig};

    fn setup() -> (Vec<TaskSpec>, Featurizer) {
        let cfg = WorldConfig::default();
        let tasks = generate_tasks(20, [0.4, 0.4, 0.2], &cfg, 3).unwrap();
        (tasks, Featurizer::new(FeatureConfig::default(), cfg.space()).unwrap())
    }

    #[test]
    fn uniform_log_prob() {
        let (tasks, fz) = setup();
        let p = PolicyParameters::zeros(72, 64);
        let ctx = WorldState::initial(&tasks[0]).context(&tasks[0]);
        let lp = log_prob(&p, &fz, &ctx, AgentAction::Answer { value: 3 }).unwrap();
        assert!((lp - (1.0f64 / 72.0).ln()).abs() < 1e-12);
        assert!((lp + 4.276666).abs() < 1e-6);
    }

    #[test]
    fn non_finite_weights_rejected() {
        let (tasks, fz) = setup();
        let mut p = PolicyParameters::zeros(72, 64);
        p.weights[5] = f64::NAN;
        let ctx = WorldState::initial(&tasks[0]).context(&tasks[0]);
        assert!(matches!(log_prob(&p, &fz, &ctx, AgentAction::Answer { value: 0 }), Err(Error::NonFinite(_))));
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let (tasks, fz) = setup();
        let p = PolicyParameters::zeros(72, 64);
        let s = WorldState::initial(&tasks[0]);
        let mut rng = stream(0, Purpose::Eval, &[1]);
        let mut counts = [0usize; 72];
        for _ in 0..72_000 {
            counts[fz.space.encode(sample_action(&p, &fz, &tasks[0], &s, &mut rng)).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 72_000.0;
            assert!((f - 1.0 / 72.0).abs() <= 0.01, "frequency {f}");
        }
    }

    #[test]
    fn near_degenerate_softmax_and_determinism() {
        let (tasks, fz) = setup();
        let mut p = PolicyParameters::zeros(72, 64);
        p.weights[10 * 64] = 50.0; // bias column of action 10
        let s = WorldState::initial(&tasks[0]);
        let mut rng = stream(1, Purpose::Eval, &[]);
        let hits = (0..10_000).filter(|_| fz.space.encode(sample_action(&p, &fz, &tasks[0], &s, &mut rng)).unwrap() == 10).count();
        assert!(hits as f64 >= 0.999 * 10_000.0);

        let z = PolicyParameters::zeros(72, 64);
        let draw = |seed| {
            let mut r = stream(seed, Purpose::Eval, &[]);
            (0..50).map(|_| sample_action(&z, &fz, &tasks[0], &s, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn expert_noise_rates() {
        let (tasks, _) = setup();
        let t = &tasks[0];
        let s = WorldState::initial(t);
        let oracle = world::oracle_action(t, &s);
        let mut rng = stream(2, Purpose::Expert, &[]);
        assert!((0..500).all(|_| expert_action(t, &s, 0.0, &mut rng) == oracle));
        assert!((0..500).all(|_| expert_action(t, &s, 1.0, &mut rng) != oracle));
        let agree = (0..10_000).filter(|_| expert_action(t, &s, 0.2, &mut rng) == oracle).count();
        assert!((agree as f64 / 10_000.0 - 0.8).abs() <= 0.02);
    }

    #[test]
    fn features_are_deterministic_with_fixed_layout() {
        let (tasks, fz) = setup();
        let t = &tasks[1];
        let s = WorldState::initial(t);
        let a = fz.of_state(t, &s);
        assert_eq!(a, fz.of_state(t, &s));
        assert_eq!(a.0.len(), 64);
        assert_eq!(a.0[0], 1.0);
        let Some(Token::Arg { arg, marked }) = s.revealed else { panic!() };
        assert_eq!(a.0[1 + arg as usize], 1.0);
        assert_eq!(a.0[9 + arg as usize], if marked { 1.0 } else { 0.0 });
        assert!(Featurizer::new(FeatureConfig { dim: 20, ..Default::default() }, fz.space).is_err());
    }

    #[test]
    fn binary_roundtrip_and_bad_magic() {
        let mut p = PolicyParameters::zeros(72, 64);
        p.weights.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64).sin());
        p.version = 17;
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 * 3 + 8 + 72 * 64 * 8);
        let q = PolicyParameters::read_binary(&buf[..], Path::new("x")).unwrap();
        assert_eq!(p, q);
        buf[0] = b'X';
        assert!(PolicyParameters::read_binary(&buf[..], Path::new("x")).is_err());
    }

    #[test]
    fn sft_zero_epochs_is_identity_and_empty_is_error() {
        let (tasks, fz) = setup();
        let idx = task_index(&tasks);
        let p = PolicyParameters::zeros(72, 64);
        assert!(matches!(sft_train(&p, &fz, &idx, &DemoDataset::default(), &OptimizerConfig::default()), Err(Error::EmptyDataset(_))));
        let demo = world::oracle_rollout(&tasks[0]).unwrap();
        let demos = DemoDataset::new(vec![(tasks[0].task_id.clone(), demo)]).unwrap();
        let (q, _) = sft_train(&p, &fz, &idx, &demos, &OptimizerConfig { step_size: 0.1, epochs: 0 }).unwrap();
        assert_eq!(p, q);
    }
}
