//! Train DPO on one round of mined pairs and watch loss and margin.

use cso::error::Result;
use cso::experiment::{self, ExperimentConfig};
use cso::metrics;
use cso::pipeline::{self, RoundContext};
use cso::train::dpo::{self, DpoObjective};

fn main() -> Result<()> {
    let cfg = ExperimentConfig::default();
    let setup = experiment::prepare(&cfg, 2)?;
    let scorer = cfg.scorer()?;
    let ctx = RoundContext::new(&setup.train_tasks, &setup.featurizer, &scorer, setup.seed, 1);
    let art = pipeline::mine_round(&setup.sft.params, &ctx, &setup.train_tasks, &cfg.mining()?)?;

    let obj = DpoObjective::from_step_pairs(&setup.featurizer, &setup.sft.params, &art.dataset.pairs, cfg.dpo.beta)?;
    println!(
        "{} pairs, loss at the reference {:.6} (ln 2 = {:.6})",
        obj.len(),
        obj.evaluate(&setup.sft.params).loss,
        std::f64::consts::LN_2
    );
    let (params, history) = dpo::train_dpo(&setup.sft.params, &obj, &cfg.dpo)?;
    let last = history.len().saturating_sub(1);
    for m in history.iter().filter(|m| m.epoch % 40 == 0 || m.epoch == last) {
        let (margin, norm) = (m.margin.unwrap_or(f64::NAN), m.grad_norm.unwrap_or(f64::NAN));
        println!("epoch {:>3}  loss {:.4}  margin {margin:.3}  |grad| {norm:.4}", m.epoch, m.loss);
    }
    let after = metrics::evaluate(&params, &setup.featurizer, &setup.eval_tasks, 1, &[setup.seed], "dpo", 1)?;
    println!("held-out success {:.3} -> {:.3}", setup.sft_eval.success(), after.success());
    Ok(())
}
