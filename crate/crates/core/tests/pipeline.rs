use std::collections::HashMap;

use cso::experiment::{self, ExperimentConfig, SeedSetup};
use cso::io::{read_jsonl, write_jsonl};
use cso::pipeline::{self, PreferencePair, RoundArtifacts, RoundContext};
use cso::policy::OptimizerConfig;
use cso::train::dpo::DpoConfig;
use cso::train::iterate::Method;
use cso::world::{self, Trajectory};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        train_tasks: 40,
        eval_tasks: 40,
        sft: OptimizerConfig { step_size: 0.1, epochs: 60 },
        dpo: DpoConfig { epochs: 30, ..Default::default() },
        ..Default::default()
    }
}

fn mine(cfg: &ExperimentConfig, setup: &SeedSetup) -> RoundArtifacts {
    let scorer = cfg.scorer().unwrap();
    let ctx = RoundContext::new(&setup.train_tasks, &setup.featurizer, &scorer, setup.seed, 1);
    pipeline::mine_round(&setup.sft.params, &ctx, &setup.train_tasks, &cfg.mining().unwrap()).unwrap()
}

#[test]
fn mined_pairs_satisfy_their_invariants() {
    let cfg = small();
    let setup = experiment::prepare(&cfg, 21).unwrap();
    let art = mine(&cfg, &setup);
    assert!(!art.dataset.is_empty());
    let parents: HashMap<&str, &Trajectory> = art.failed.trajectories.iter().map(|t| (t.id.as_str(), t)).collect();
    let tasks = cso::policy::task_index(&setup.train_tasks);
    for p in &art.dataset.pairs {
        assert_ne!(p.chosen, p.rejected);
        let parent = parents[p.trajectory_id.as_str()];
        assert_eq!(parent.outcome, 0);
        assert_eq!(parent.steps[p.step - 1].action, p.rejected);
        assert_eq!(parent.steps[p.step - 1].state_digest, p.state_context.digest());
        let task = tasks[&p.task_id];
        let state = world::state_from_context(task, &p.state_context).unwrap();
        assert!(!state.terminated);
        assert!(p.branch_seed.is_some());
    }
    for c in &art.candidates {
        assert!(c.policy_score.value < 0.45);
        assert!(c.alternatives.iter().any(|a| a.score.value > 0.65));
    }
}

#[test]
fn artifacts_round_trip_through_jsonl() {
    let cfg = small();
    let setup = experiment::prepare(&cfg, 22).unwrap();
    let art = mine(&cfg, &setup);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("prefs.jsonl");
    write_jsonl(&p, "preference_pair", &art.dataset.pairs).unwrap();
    assert_eq!(read_jsonl::<PreferencePair>(&p, "preference_pair").unwrap(), art.dataset.pairs);
    let f = dir.path().join("failed.jsonl");
    write_jsonl(&f, "trajectory", &art.failed.trajectories).unwrap();
    assert_eq!(read_jsonl::<Trajectory>(&f, "trajectory").unwrap(), art.failed.trajectories);
}

#[test]
fn mining_is_independent_of_thread_count() {
    let cfg = small();
    let setup = experiment::prepare(&cfg, 23).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| mine(&cfg, &setup))
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.branches, b.branches);
    assert_eq!(a.scores, b.scores);
}

#[test]
fn every_method_iterates_with_the_reference_contract() {
    let cfg = ExperimentConfig { rounds: 2, ..small() };
    let setup = experiment::prepare(&cfg, 24).unwrap();
    let scorer = cfg.scorer().unwrap();
    for label in ["cso", "cso_expert_neg", "cso_policy_pos", "verification_only", "eto", "rft", "step_dpo", "ipr"] {
        let st = experiment::run_method(&cfg, &setup, Method::parse(label).unwrap(), &scorer).unwrap();
        assert_eq!(st.history.len(), 3, "{label}");
        assert_eq!(st.evals.len(), 3, "{label}");
        assert_eq!(st.rounds.len(), 2, "{label}");
        assert_eq!(st.history[0].params, setup.sft.params, "{label}");
        for i in 1..=2 {
            assert_eq!(st.refs[i - 1].bits(), st.history[i - 1].params.bits(), "{label} round {i}");
            assert_eq!(st.reference_for(i).unwrap().params, st.history[i - 1].params);
        }
        assert!(st.history.iter().all(|s| s.params.check_finite().is_ok()), "{label}");
    }
}

#[test]
fn unknown_method_is_rejected() {
    assert!(Method::parse("nope").is_err());
}
