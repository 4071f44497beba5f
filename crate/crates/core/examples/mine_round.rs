//! One mining round from an SFT policy: collect failures, score, select,
//! verify by branching and build preference pairs.

use cso::error::Result;
use cso::experiment::{self, ExperimentConfig};
use cso::metrics;
use cso::pipeline::{self, RoundContext};

fn main() -> Result<()> {
    let cfg = ExperimentConfig::default();
    let setup = experiment::prepare(&cfg, 1)?;
    println!("SFT success on held-out tasks: {:.3}", setup.sft_eval.success());

    let scorer = cfg.scorer()?;
    let ctx = RoundContext::new(&setup.train_tasks, &setup.featurizer, &scorer, setup.seed, 1);
    let art = pipeline::mine_round(&setup.sft.params, &ctx, &setup.train_tasks, &cfg.mining()?)?;
    let verified = art.branches.iter().filter(|b| b.verified().is_some()).count();
    println!(
        "failed trajectories {}, failed steps {}, candidates {}, verified {}, pairs {}",
        art.failed.len(),
        art.failed.total_steps,
        art.candidates.len(),
        verified,
        art.dataset.len()
    );
    let stats = metrics::supervision_stats("cso", &art.dataset.pairs, &art.failed)?;
    println!("supervised location fraction {:.3}", stats.location_fraction);

    let h = metrics::categorize_errors(&art.dataset.pairs, &ctx.tasks, &art.failed.trajectories)?;
    for (c, f) in metrics::ErrorCategory::ALL.iter().zip(h.fractions()) {
        println!("  {:<22} {:.2}", c.as_str(), f);
    }
    if let Some(p) = art.dataset.pairs.first() {
        println!("\nexample pair at {} step {}: chosen {} over {}", p.trajectory_id, p.step, p.chosen, p.rejected);
    }
    Ok(())
}
