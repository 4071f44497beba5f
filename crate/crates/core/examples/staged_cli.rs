//! Drive the staged commands programmatically, the same way the `cso`
//! binary does, and list the artifacts each one writes.

use cso::commands::{run_command, Command};
use cso::config::RunConfig;
use cso::error::Result;

fn main() -> Result<()> {
    let out = std::env::temp_dir().join(format!("cso-staged-{}", std::process::id()));
    let cfg = RunConfig { output_dir: out.clone(), seeds: vec![1], ..RunConfig::default() };
    let steps = [
        Command::GenTasks,
        Command::Sft,
        Command::Collect { round: 1, policy: "policies/sft".into() },
        Command::Scan { round: 1 },
        Command::Branch { round: 1 },
        Command::BuildPrefs { round: 1 },
        Command::TrainDpo { round: 1 },
        Command::Eval { policy: "policies/sft".into(), label: Some("sft".into()), bon_k: None },
        Command::Eval { policy: "policies/dpo_r1".into(), label: Some("cso_r1".into()), bon_k: None },
        Command::Report,
    ];
    for c in &steps {
        let written = run_command(c, &cfg)?;
        println!("{:<12} {} files", c.name(), written.len());
    }
    println!("\n{}", std::fs::read_to_string(out.join("report/summary.txt"))?);
    std::fs::remove_dir_all(&out)?;
    Ok(())
}
