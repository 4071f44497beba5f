//! Run every post-training method for two rounds under one seed and print
//! the success curves.

use cso::error::Result;
use cso::experiment::{self, ExperimentConfig};
use cso::train::iterate::Method;

fn main() -> Result<()> {
    let cfg = ExperimentConfig::default();
    let seed = 3;
    let setup = experiment::prepare(&cfg, seed)?;
    let scorer = cfg.scorer()?;
    println!("{:<18} {:>7} {:>7} {:>7}   pairs per round", "method", "round0", "round1", "round2");
    for label in ["cso", "verification_only", "cso_expert_neg", "cso_policy_pos", "step_dpo", "eto", "rft", "ipr"] {
        let st = experiment::run_method(&cfg, &setup, Method::parse(label)?, &scorer)?;
        let curve: Vec<String> = st.evals.iter().map(|e| format!("{:>7.3}", e.success())).collect();
        let pairs: Vec<usize> = st.rounds.iter().map(|r| r.record.pairs).collect();
        println!("{label:<18} {}   {pairs:?}", curve.join(" "));
    }
    Ok(())
}
