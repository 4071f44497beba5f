//! Score every action at one state with the rubric PRM, then pick
//! candidate critical steps from a failed rollout.

use cso::error::Result;
use cso::prm::{NoiseKind, RubricScorer, RubricWeights, SelectionThresholds, StepScorer};
use cso::rng::{stream, Purpose};
use cso::world::{self, WorldConfig, WorldState};

fn main() -> Result<()> {
    let cfg = WorldConfig::default();
    let task = world::generate_tasks(20, [0.0, 1.0, 0.0], &cfg, 3)?
        .into_iter()
        .find(|t| t.planted_critical.first() == Some(&1))
        .expect("a task planted at the first step");
    let s = WorldState::initial(&task);
    let scorer = RubricScorer::new(RubricWeights::default(), 0.0, NoiseKind::Uniform)?;
    let mut rng = stream(0, Purpose::PrmPolicy, &[]);

    let mut scored = Vec::new();
    for i in 0..task.space.size() {
        let a = task.space.decode(i)?;
        scored.push((scorer.score(&task, &s, a, &mut rng)?.value, a));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let distractor = task.distractor_action(0).expect("planted");
    println!("oracle {} scores {:.3}", world::oracle_action(&task, &s), scored[0].0);
    println!("distractor {distractor} scores {:.3}", scored.iter().find(|(_, a)| *a == distractor).unwrap().0);
    println!("lowest {} scores {:.3}", scored.last().unwrap().1, scored.last().unwrap().0);

    let t = SelectionThresholds::default();
    for (policy, alts) in [(0.275, vec![1.0, 0.5]), (0.5, vec![1.0]), (0.3, vec![0.6, 0.65])] {
        println!("policy {policy}, alternatives {alts:?} -> candidate = {}", t.selects(policy, alts.iter().copied()));
    }
    Ok(())
}
