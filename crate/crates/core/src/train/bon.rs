//! Step-level Best-of-N: sample `k` actions from the policy and act on the
//! one the PRM scores highest.

use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::policy::{self, Featurizer, PolicyParameters};
use crate::prm::StepScorer;
use crate::rng::Stream;
use crate::world::{AgentAction, TaskSpec, WorldState};

/// Draws all `k` samples first, then scores them in sample order from the
/// same stream. Ties go to the lowest sample index, so `k = 1` returns
/// exactly what [`policy::sample_action`] would.
pub fn bon_select(
    params: &PolicyParameters,
    featurizer: &Featurizer,
    scorer: &dyn StepScorer,
    task: &TaskSpec,
    state: &WorldState,
    k: usize,
    rng: &mut Stream,
) -> Result<AgentAction> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let samples: Vec<AgentAction> = (0..k).map(|_| policy::sample_action(params, featurizer, task, state, rng)).collect();
    if k == 1 {
        return Ok(samples[0]);
    }
    let mut best = (f64::NEG_INFINITY, samples[0]);
    for a in samples {
        let s = scorer.score(task, state, a, rng)?.value;
        if s > best.0 {
            best = (s, a);
        }
    }
    Ok(best.1)
}

pub fn evaluate_bon(
    params: &PolicyParameters,
    featurizer: &Featurizer,
    scorer: &dyn StepScorer,
    tasks: &[TaskSpec],
    k: usize,
    trials: usize,
    seeds: &[u64],
    method: &str,
) -> Result<EvalReport> {
    metrics::evaluate_with(tasks, trials, seeds, method, 0, |task, s, r| bon_select(params, featurizer, scorer, task, s, k, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FeatureConfig;
    use crate::prm::RubricScorer;
    use crate::rng::{stream, Purpose};
    use crate::world::{generate_tasks, oracle_action, WorldConfig};

    #[test]
    fn k1_matches_sampling_and_oracle_wins_noise_free() {
        let cfg = WorldConfig::default();
        let tasks = generate_tasks(3, [0.0, 1.0, 0.0], &cfg, 6).unwrap();
        let fz = Featurizer::new(FeatureConfig::default(), cfg.space()).unwrap();
        let sc = RubricScorer::noiseless();
        let p = PolicyParameters::zeros(72, 64);
        let t = &tasks[0];
        let s = WorldState::initial(t);
        let a = bon_select(&p, &fz, &sc, t, &s, 1, &mut stream(3, Purpose::Bon, &[])).unwrap();
        let b = policy::sample_action(&p, &fz, t, &s, &mut stream(3, Purpose::Bon, &[]));
        assert_eq!(a, b);

        // a policy concentrated on the oracle and one other action
        let oracle = fz.space.encode(oracle_action(t, &s)).unwrap();
        let mut q = PolicyParameters::zeros(72, 64);
        q.weights[oracle * 64] = 8.0;
        q.weights[5 * 64] = 8.0;
        let x = bon_select(&q, &fz, &sc, t, &s, 5, &mut stream(4, Purpose::Bon, &[])).unwrap();
        let y = bon_select(&q, &fz, &sc, t, &s, 5, &mut stream(4, Purpose::Bon, &[])).unwrap();
        assert_eq!(x, y);
        assert_eq!(x, oracle_action(t, &s));
    }
}
