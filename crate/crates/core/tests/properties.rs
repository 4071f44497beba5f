use proptest::prelude::*;

use cso::numeric::{log_sigmoid, log_sum_exp, softplus};
use cso::policy::{FeatureConfig, FeatureVector, Featurizer, PolicyParameters};
use cso::prm::{self, NoiseKind, PrmScore, RubricWeights, ScoreSource, ScoredAlternative, SelectionThresholds};
use cso::rng::{stream, Purpose};
use cso::world::{self, AgentAction, Observation, StepRecord, Token, Trajectory, WorldConfig, WorldState};

fn trajectory(n: usize) -> Trajectory {
    let steps = (0..n)
        .map(|i| StepRecord {
            state_digest: i as u64,
            action: AgentAction::Invoke { tool: 1, arg: i as u16 },
            observation: Observation { payload: Token::Error, is_terminal: i + 1 == n },
        })
        .collect();
    Trajectory { id: "t".into(), task_id: "x".into(), steps, outcome: 0, length: n, rng_trace: 0 }
}

fn scored(row: &[f64]) -> Vec<ScoredAlternative> {
    row.iter()
        .enumerate()
        .map(|(j, &v)| ScoredAlternative {
            action: AgentAction::Answer { value: j as u16 },
            score: PrmScore::new(v, ScoreSource::Rubric),
            sample_index: j + 1,
        })
        .collect()
}

fn table() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
    (1usize..8, 1usize..6)
        .prop_flat_map(|(n, k)| (prop::collection::vec(0.0..=1.0f64, n), prop::collection::vec(prop::collection::vec(0.0..=1.0f64, k), n)))
}

fn selected(policy: &[f64], alts: &[Vec<f64>], t: &SelectionThresholds) -> Vec<usize> {
    let ps: Vec<PrmScore> = policy.iter().map(|&v| PrmScore::new(v, ScoreSource::Rubric)).collect();
    let alternatives: Vec<Vec<ScoredAlternative>> = alts.iter().map(|r| scored(r)).collect();
    prm::select_candidates(&trajectory(policy.len()), &ps, &alternatives, t).unwrap().into_iter().map(|c| c.step_index).collect()
}

proptest! {
    #[test]
    fn softmax_is_normalized_and_shift_invariant(
        weights in prop::collection::vec(-20.0..20.0f64, 6 * 4),
        phi in prop::collection::vec(-3.0..3.0f64, 4),
        shift in prop::collection::vec(-50.0..50.0f64, 4),
    ) {
        let p = PolicyParameters { actions: 6, features: 4, weights: weights.clone(), version: 0 };
        let phi = FeatureVector(phi);
        let probs = p.probs(&phi);
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
        // Adding the same vector to every action row shifts all logits equally.
        let shifted: Vec<f64> = weights.iter().enumerate().map(|(i, w)| w + shift[i % 4]).collect();
        let q = PolicyParameters { weights: shifted, ..p.clone() };
        for (a, b) in probs.iter().zip(q.probs(&phi)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn log_sum_exp_shift(xs in prop::collection::vec(-700.0..700.0f64, 1..10), c in -100.0..100.0f64) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let (a, b) = (log_sum_exp(&xs) + c, log_sum_exp(&shifted));
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn logistic_identities(x in -500.0..500.0f64) {
        prop_assert!((softplus(x) - softplus(-x) - x).abs() < 1e-9);
        prop_assert!((-log_sigmoid(x) + log_sigmoid(-x) + x).abs() < 1e-9);
        prop_assert!(log_sigmoid(x) <= 0.0);
    }

    #[test]
    fn selection_matches_definition((policy, alts) in table(), lo in 0.0..0.5f64, gap in 0.01..0.5f64) {
        let t = SelectionThresholds::new(lo, lo + gap).unwrap();
        let expected: Vec<usize> = (0..policy.len())
            .filter(|&i| policy[i] < t.gamma_low && alts[i].iter().any(|&a| a > t.gamma_high))
            .map(|i| i + 1)
            .collect();
        prop_assert_eq!(selected(&policy, &alts, &t), expected);
    }

    #[test]
    fn selection_is_monotone_in_thresholds(
        (policy, alts) in table(),
        lo in 0.05..0.45f64,
        gap in 0.05..0.4f64,
        d_lo in 0.0..0.05f64,
        d_hi in 0.0..0.1f64,
    ) {
        let base = SelectionThresholds::new(lo, lo + gap).unwrap();
        let strict = SelectionThresholds::new(lo - d_lo, (lo + gap + d_hi).min(1.0)).unwrap();
        let wide = selected(&policy, &alts, &base);
        let narrow = selected(&policy, &alts, &strict);
        prop_assert!(narrow.iter().all(|s| wide.contains(s)));
    }

    #[test]
    fn rubric_scores_stay_in_range(
        task_seed in 0u64..50,
        action_index in 0usize..72,
        eta in 0.0..2.0f64,
        gaussian in any::<bool>(),
        score_seed in any::<u64>(),
    ) {
        let cfg = WorldConfig::default();
        let task = &world::generate_tasks(1, [0.3, 0.4, 0.3], &cfg, task_seed).unwrap()[0];
        let s = WorldState::initial(task);
        let a = task.space.decode(action_index).unwrap();
        let noise = if gaussian { NoiseKind::Gaussian } else { NoiseKind::Uniform };
        let mut r = stream(score_seed, Purpose::PrmPolicy, &[]);
        let v = prm::rubric_score(task, &s, a, &RubricWeights::default(), eta, noise, &mut r).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn features_are_finite_and_fixed_width(task_seed in 0u64..50, steps in 0usize..6) {
        let cfg = WorldConfig::default();
        let f = Featurizer::new(FeatureConfig::default(), cfg.space()).unwrap();
        let task = &world::generate_tasks(1, [0.0, 0.0, 1.0], &cfg, task_seed).unwrap()[0];
        let mut s = WorldState::initial(task);
        for _ in 0..steps {
            s = world::transition(task, &s, world::oracle_action(task, &s)).unwrap().1;
        }
        let phi = f.of_state(task, &s);
        prop_assert_eq!(phi.0.len(), f.dim());
        prop_assert!(phi.0.iter().all(|x| x.is_finite()));
    }
}
