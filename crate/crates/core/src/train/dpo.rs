//! Preference optimization against a frozen reference policy.
//!
//! A pair is two sequences of `(state features, action)` terms; its margin is
//! `Σ_chosen (log π − log π_ref) − Σ_rejected (log π − log π_ref)` and its
//! loss `−log σ(β · margin)`. Step-level pairs are sequences of length one
//! sharing a state; trajectory-level pairs carry whole episodes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{chunked_sum, sigmoid, softplus};
use crate::pipeline::PreferencePair;
use crate::policy::{FeatureVector, Featurizer, PolicyParameters};
use crate::world::{self, TaskSpec, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub step_size: f64,
    pub epochs: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.5, step_size: 0.2, epochs: 200 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Term {
    phi: FeatureVector,
    action: usize,
    ref_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Prepared {
    chosen: Vec<Term>,
    rejected: Vec<Term>,
}

/// Whole-episode preference: a successful trajectory over a failed one on
/// the same task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub task_id: String,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
}

/// Mean pair loss over a fixed set of pairs, with reference log-probs
/// evaluated once at construction.
#[derive(Debug, Clone)]
pub struct DpoObjective {
    pairs: Vec<Prepared>,
    beta: f64,
    actions: usize,
    features: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Mean of the unscaled margins.
    pub margin: f64,
}

fn term(reference: &PolicyParameters, phi: FeatureVector, action: usize) -> Term {
    let ref_log_prob = reference.log_probs(&phi)[action];
    Term { phi, action, ref_log_prob }
}

impl DpoObjective {
    pub fn from_step_pairs(featurizer: &Featurizer, reference: &PolicyParameters, pairs: &[PreferencePair], beta: f64) -> Result<Self> {
        reference.check_finite()?;
        let mut prepared = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.chosen == p.rejected {
                return Err(Error::DegeneratePair(format!("{} step {}", p.trajectory_id, p.step)));
            }
            let phi = featurizer.of_context(&p.state_context);
            let c = featurizer.space.encode(p.chosen)?;
            let r = featurizer.space.encode(p.rejected)?;
            prepared.push(Prepared { chosen: vec![term(reference, phi.clone(), c)], rejected: vec![term(reference, phi, r)] });
        }
        Self::build(prepared, beta, reference)
    }

    pub fn from_trajectory_pairs(
        featurizer: &Featurizer,
        reference: &PolicyParameters,
        tasks: &HashMap<String, &TaskSpec>,
        pairs: &[TrajectoryPair],
        beta: f64,
    ) -> Result<Self> {
        reference.check_finite()?;
        let seq = |task: &TaskSpec, t: &Trajectory| -> Result<Vec<Term>> {
            let states = world::replay_states(task, t)?;
            states
                .iter()
                .zip(&t.steps)
                .map(|(s, rec)| Ok(term(reference, featurizer.of_state(task, s), featurizer.space.encode(rec.action)?)))
                .collect()
        };
        let mut prepared = Vec::with_capacity(pairs.len());
        for p in pairs {
            let task = tasks
                .get(&p.task_id)
                .ok_or_else(|| Error::MissingInput { kind: "trajectory pairs", what: format!("task {}", p.task_id) })?;
            if p.chosen.steps == p.rejected.steps {
                return Err(Error::DegeneratePair(p.task_id.clone()));
            }
            prepared.push(Prepared { chosen: seq(task, &p.chosen)?, rejected: seq(task, &p.rejected)? });
        }
        Self::build(prepared, beta, reference)
    }

    fn build(pairs: Vec<Prepared>, beta: f64, reference: &PolicyParameters) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("preference pairs"));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { pairs, beta, actions: reference.actions, features: reference.features })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn seq_ratio(params: &PolicyParameters, terms: &[Term]) -> f64 {
        terms.iter().map(|t| params.log_probs(&t.phi)[t.action] - t.ref_log_prob).sum()
    }

    /// Unscaled margin of pair `i`.
    pub fn margin(&self, params: &PolicyParameters, i: usize) -> f64 {
        let p = &self.pairs[i];
        Self::seq_ratio(params, &p.chosen) - Self::seq_ratio(params, &p.rejected)
    }

    pub fn pair_loss(&self, params: &PolicyParameters, i: usize) -> f64 {
        softplus(-self.beta * self.margin(params, i))
    }

    pub fn evaluate(&self, params: &PolicyParameters) -> Evaluation {
        let (loss, _, margin) = self.run(params, false);
        Evaluation { loss, margin }
    }

    /// Mean loss, its gradient (row-major like the weights) and mean margin.
    pub fn loss_and_gradient(&self, params: &PolicyParameters) -> (f64, Vec<f64>, f64) {
        self.run(params, true)
    }

    fn run(&self, params: &PolicyParameters, with_grad: bool) -> (f64, Vec<f64>, f64) {
        let n = self.pairs.len();
        let f = self.features;
        let len = if with_grad { self.actions * f } else { 0 };
        // the extra last slot accumulates the margin
        let (mut acc, loss) = chunked_sum(n, len + 1, |i, acc| {
            let p = &self.pairs[i];
            let margin = self.margin(params, i);
            acc[len] += margin;
            let z = self.beta * margin;
            if with_grad {
                let c = -self.beta * sigmoid(-z);
                for (sign, terms) in [(1.0, &p.chosen), (-1.0, &p.rejected)] {
                    for t in terms.iter() {
                        let probs = params.probs(&t.phi);
                        for (b, pb) in probs.iter().enumerate() {
                            let coef = sign * c * (f64::from(u8::from(b == t.action)) - pb);
                            if coef != 0.0 {
                                for (g, x) in acc[b * f..(b + 1) * f].iter_mut().zip(&t.phi.0) {
                                    *g += coef * x;
                                }
                            }
                        }
                    }
                }
            }
            softplus(-z)
        });
        let margin = acc.pop().unwrap_or(0.0) / n as f64;
        acc.iter_mut().for_each(|g| *g /= n as f64);
        (loss / n as f64, acc, margin)
    }
}

pub fn dpo_pair_loss(
    params: &PolicyParameters,
    reference: &PolicyParameters,
    featurizer: &Featurizer,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    params.check_finite()?;
    let obj = DpoObjective::from_step_pairs(featurizer, reference, std::slice::from_ref(pair), beta)?;
    Ok(obj.pair_loss(params, 0))
}

pub fn dpo_gradient(
    params: &PolicyParameters,
    reference: &PolicyParameters,
    featurizer: &Featurizer,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<Vec<f64>> {
    params.check_finite()?;
    let obj = DpoObjective::from_step_pairs(featurizer, reference, batch, beta)?;
    let (loss, grad, _) = obj.loss_and_gradient(params);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("dpo gradient"));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Mean DPO margin; `None` on supervised fine-tuning rows.
    pub margin: Option<f64>,
    /// `None` on supervised fine-tuning rows.
    pub grad_norm: Option<f64>,
}

/// Full-batch gradient descent. The returned metrics hold one row per
/// update plus a final row for the trained parameters.
pub fn train_dpo(params: &PolicyParameters, objective: &DpoObjective, cfg: &DpoConfig) -> Result<(PolicyParameters, Vec<EpochMetrics>)> {
    cfg.validate()?;
    params.check_finite()?;
    if objective.beta != cfg.beta {
        return Err(Error::InvalidArgument(format!("objective built with beta {} but config has {}", objective.beta, cfg.beta)));
    }
    let mut p = params.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let (loss, grad, margin) = objective.loss_and_gradient(&p);
        if !loss.is_finite() {
            return Err(Error::NonFinite("dpo loss"));
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        metrics.push(EpochMetrics { epoch, loss, margin: Some(margin), grad_norm: Some(grad_norm) });
        p.descend(&grad, cfg.step_size);
    }
    let (loss, grad, margin) = objective.loss_and_gradient(&p);
    if !loss.is_finite() {
        return Err(Error::NonFinite("dpo loss"));
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    metrics.push(EpochMetrics { epoch: cfg.epochs, loss, margin: Some(margin), grad_norm: Some(grad_norm) });
    Ok((p, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{PairOrigin, PAIR_SCHEMA};
    use crate::policy::FeatureConfig;
    use crate::world::{generate_tasks, AgentAction, WorldConfig, WorldState};
    use std::f64::consts::LN_2;

    fn setup() -> (Featurizer, PreferencePair) {
        let cfg = WorldConfig::default();
        let t = generate_tasks(1, [0.0, 1.0, 0.0], &cfg, 4).unwrap().remove(0);
        let fz = Featurizer::new(FeatureConfig::default(), cfg.space()).unwrap();
        let pair = PreferencePair {
            schema: PAIR_SCHEMA,
            task_id: t.task_id.clone(),
            trajectory_id: "p".into(),
            step: 1,
            difficulty: t.difficulty,
            state_context: WorldState::initial(&t).context(&t),
            chosen: t.recipe[0].action(),
            rejected: AgentAction::Answer { value: 0 },
            mode: PairOrigin::ExpertPosPolicyNeg,
            branch_seed: Some(1),
            rejected_branch_seed: None,
            round: 1,
        };
        (fz, pair)
    }

    fn random_params(seed: u64) -> PolicyParameters {
        use rand::Rng;
        let mut r = crate::rng::stream(seed, crate::rng::Purpose::Eval, &[77]);
        let mut p = PolicyParameters::zeros(72, 64);
        p.weights.iter_mut().for_each(|w| *w = r.random_range(-0.5..0.5));
        p
    }

    /// Directional central difference with h = 1e-5.
    fn directional_error(obj: &DpoObjective, p: &PolicyParameters, seed: u64) -> f64 {
        let dir = random_params(seed).weights;
        let (_, grad, _) = obj.loss_and_gradient(p);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let h = 1e-5;
        let (mut plus, mut minus) = (p.clone(), p.clone());
        for ((a, b), d) in plus.weights.iter_mut().zip(minus.weights.iter_mut()).zip(&dir) {
            *a += h * d;
            *b -= h * d;
        }
        let numeric = (obj.evaluate(&plus).loss - obj.evaluate(&minus).loss) / (2.0 * h);
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
    }

    #[test]
    fn step_and_trajectory_gradients_match_finite_differences() {
        let (fz, pair) = setup();
        let obj = DpoObjective::from_step_pairs(&fz, &random_params(2), std::slice::from_ref(&pair), 0.5).unwrap();
        assert!(directional_error(&obj, &random_params(3), 4) < 1e-6);

        let cfg = WorldConfig::default();
        let t = generate_tasks(1, [0.0, 1.0, 0.0], &cfg, 4).unwrap().remove(0);
        let chosen = crate::world::oracle_rollout(&t).unwrap();
        let wrong = AgentAction::Answer { value: (t.target_answer + 1) % t.space.n_answers };
        let rejected = crate::world::rollout(&t, "bad".into(), 0, |_| Ok(wrong)).unwrap();
        let tasks: HashMap<String, &TaskSpec> = [(t.task_id.clone(), &t)].into_iter().collect();
        let tp = TrajectoryPair { task_id: t.task_id.clone(), chosen, rejected };
        let obj = DpoObjective::from_trajectory_pairs(&fz, &random_params(5), &tasks, &[tp], 0.5).unwrap();
        assert!(directional_error(&obj, &random_params(6), 7) < 1e-6);
    }

    #[test]
    fn loss_is_ln2_at_reference() {
        let (fz, pair) = setup();
        let p = random_params(1);
        assert!((dpo_pair_loss(&p, &p, &fz, &pair, 0.5).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn identical_actions_rejected() {
        let (fz, mut pair) = setup();
        pair.rejected = pair.chosen;
        let p = PolicyParameters::zeros(72, 64);
        assert!(matches!(dpo_pair_loss(&p, &p, &fz, &pair, 0.5), Err(Error::DegeneratePair(_))));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let (fz, pair) = setup();
        let p = random_params(2);
        let r = random_params(3);
        let one = dpo_gradient(&p, &r, &fz, std::slice::from_ref(&pair), 0.5).unwrap();
        let four = dpo_gradient(&p, &r, &fz, &vec![pair; 4], 0.5).unwrap();
        for (a, b) in one.iter().zip(&four) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn training_grows_the_margin_and_zero_epochs_is_identity() {
        let (fz, pair) = setup();
        let p = random_params(4);
        let obj = DpoObjective::from_step_pairs(&fz, &p, &[pair], 0.5).unwrap();
        let (same, _) = train_dpo(&p, &obj, &DpoConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(same, p);
        let (q, m) = train_dpo(&p, &obj, &DpoConfig::default()).unwrap();
        assert!(obj.margin(&q, 0) > obj.margin(&p, 0));
        assert!(m.windows(2).all(|w| w[1].loss <= w[0].loss + 1e-6));
        assert_eq!(q.version, p.version + 200);
    }
}
