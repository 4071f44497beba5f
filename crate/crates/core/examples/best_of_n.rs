//! Step-level best-of-k decoding under the rubric PRM compared with plain
//! sampling from the same SFT policy.

use cso::error::Result;
use cso::experiment::{self, ExperimentConfig};
use cso::train::bon;

fn main() -> Result<()> {
    let cfg = ExperimentConfig::default();
    let setup = experiment::prepare(&cfg, 1)?;
    for eta in [0.0, 0.4] {
        let scorer = ExperimentConfig { eta, ..cfg.clone() }.scorer()?;
        for k in [1, 3, 5] {
            let r = bon::evaluate_bon(&setup.sft.params, &setup.featurizer, &scorer, &setup.eval_tasks, k, 1, &[setup.seed], "sft")?;
            println!("eta {eta:.1} k {k}: success {:.3}", r.success());
        }
    }
    println!("plain sampling: {:.3}", setup.sft_eval.success());
    Ok(())
}
