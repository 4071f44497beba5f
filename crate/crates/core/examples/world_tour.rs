//! Generate tasks, replay the oracle and show how a distractor call
//! poisons the chain while other wrong calls are recoverable.

use cso::error::Result;
use cso::world::{self, AgentAction, WorldConfig, WorldState};

fn main() -> Result<()> {
    let cfg = WorldConfig::default();
    let tasks = world::generate_tasks(6, [0.5, 0.3, 0.2], &cfg, 7)?;
    for t in &tasks {
        let oracle = world::oracle_rollout(t)?;
        println!(
            "{} {} recipe {} horizon {} planted {:?} oracle outcome {}",
            t.task_id,
            t.difficulty.as_str(),
            t.recipe.len(),
            t.horizon,
            t.planted_critical,
            oracle.outcome
        );
    }

    let Some(task) = tasks.iter().find(|t| !t.planted_critical.is_empty()) else {
        println!("no planted step in this sample");
        return Ok(());
    };
    let mut s = WorldState::initial(task);
    while task.distractor_action(s.progress).is_none() {
        s = world::transition(task, &s, world::oracle_action(task, &s))?.1;
    }
    let distractor = task.distractor_action(s.progress).expect("planted step");
    let (obs, after) = world::transition(task, &s, distractor)?;
    println!("\nat step {} the distractor {distractor} returns {:?}, poisoned = {}", s.step_index, obs.payload, after.poisoned);

    let wrong = (0..cfg.n_tools)
        .map(|tool| AgentAction::Invoke { tool, arg: task.recipe[s.progress].arg })
        .find(|&a| a != distractor && a != world::oracle_action(task, &s))
        .expect("more than two tools");
    let (obs, after) = world::transition(task, &s, wrong)?;
    println!("a plain wrong call {wrong} returns {:?}, poisoned = {}", obs.payload, after.poisoned);
    println!("\nagent view:\n{}", s.context(task).render(None));
    Ok(())
}
