//! Command orchestration. Every command runs once per configured seed and
//! reads or writes only its own artifacts:
//!
//! ```text
//! <output_dir>/seed-<s>/tasks/{train,eval}.jsonl        gen-tasks
//! <output_dir>/seed-<s>/demos.jsonl, policies/sft.*     sft
//! <output_dir>/seed-<s>/rounds/r<n>/{failed,successes}.jsonl, source.json   collect
//! <output_dir>/seed-<s>/rounds/r<n>/{scores,candidates}.jsonl               scan
//! <output_dir>/seed-<s>/rounds/r<n>/branches.jsonl                          branch
//! <output_dir>/seed-<s>/rounds/r<n>/{prefs.jsonl,prefs_stats.json,supervision_stats.csv}  build-prefs
//! <output_dir>/seed-<s>/policies/dpo_r<n>.*, rounds/r<n>/dpo_metrics.csv    train-dpo
//! <output_dir>/seed-<s>/policies/<kind>_r<n>.*, rounds/r<n>/<kind>_*        baseline
//! <output_dir>/seed-<s>/iterate/<method>/...  and  <output_dir>/iterate/<method>/*.csv  iterate
//! <output_dir>/evals/<label>.json                                           eval
//! <output_dir>/report/...                                                   report
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Subcommand;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentConfig};
use crate::io::{read_csv, read_json, read_jsonl, write_csv, write_json, write_jsonl};
use crate::metrics::{self, ErrorCategory, EvalReport, SupervisionStats};
use crate::pipeline::{
    self, BranchSelection, FailedTrajectorySet, PairSourceMode, PreferenceDataset, PreferencePair, Proposer, RoundContext, StepBranches,
    StepScores,
};
use crate::policy::{self, DemoDataset, Featurizer, PolicySnapshot};
use crate::prm::{CandidateCriticalStep, SelectionThresholds, StepScorer};
use crate::train::baselines::{self, BaselineData, BaselineInputs, BaselineKind};
use crate::train::bon;
use crate::train::dpo::EpochMetrics;
use crate::train::iterate::{self, IterationState, Method};
use crate::world::{TaskSpec, Trajectory};

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Command {
    /// Generate the training and held-out evaluation task sets.
    GenTasks,
    /// Distill expert demonstrations into the initial policy.
    Sft,
    /// Roll out a policy on the training tasks and store failures and successes.
    Collect {
        #[arg(long, default_value_t = 1)]
        round: usize,
        /// Policy path relative to the seed directory, without extension.
        #[arg(long, default_value = "policies/sft")]
        policy: String,
    },
    /// Score every failed step and select candidate critical steps.
    Scan {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Branch-verify the candidates of a round.
    Branch {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Turn verified steps into a preference dataset.
    BuildPrefs {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// DPO on a round's preference dataset, with the collecting policy as reference.
    TrainDpo {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Build and train one baseline on a round's artifacts.
    Baseline {
        #[arg(long)]
        kind: BaselineKind,
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Run the full multi-round loop for one method from a fresh SFT policy.
    Iterate {
        #[arg(long, default_value = "cso")]
        method: String,
    },
    /// Evaluate a stored policy on the held-out tasks.
    Eval {
        /// Policy path relative to the seed directory, without extension.
        #[arg(long)]
        policy: String,
        /// Method label used in reports; defaults to the policy path.
        #[arg(long)]
        label: Option<String>,
        /// Act by step-level best-of-k under the configured PRM.
        #[arg(long)]
        bon_k: Option<usize>,
    },
    /// Merge evaluations and iteration outputs into report CSVs.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenTasks => "gen-tasks",
            Command::Sft => "sft",
            Command::Collect { .. } => "collect",
            Command::Scan { .. } => "scan",
            Command::Branch { .. } => "branch",
            Command::BuildPrefs { .. } => "build-prefs",
            Command::TrainDpo { .. } => "train-dpo",
            Command::Baseline { .. } => "baseline",
            Command::Iterate { .. } => "iterate",
            Command::Eval { .. } => "eval",
            Command::Report => "report",
        }
    }
}

/// Machine-readable record of a failed command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub command: String,
    pub kind: String,
    pub message: String,
}

pub fn error_record(command: &str, e: &Error) -> ErrorRecord {
    ErrorRecord { command: command.to_string(), kind: e.kind().to_string(), message: e.to_string() }
}

/// Policy provenance of a collected round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSource {
    pub round: usize,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub success: f64,
    pub failed_steps: usize,
    pub pairs: usize,
    pub supervised_locations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub level: String,
    pub episodes: usize,
    pub successes: usize,
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRow {
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub pair_count: usize,
    pub supervised_locations: usize,
    pub failed_step_total: usize,
    pub location_fraction: f64,
    pub pair_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub category: String,
    pub count: usize,
    pub fraction: f64,
}

/// One row per (method, level), aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub level: String,
    pub seeds: usize,
    pub episodes: usize,
    pub successes: usize,
    pub success: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub round: usize,
    pub success: f64,
    pub std_error: f64,
}

const TASKS: &str = "task";
const TRAJECTORIES: &str = "trajectory";
const DEMOS: &str = "demo";
const SCORES: &str = "step_scores";
const CANDIDATES: &str = "candidate";
const BRANCHES: &str = "step_branches";
const PAIRS: &str = "preference_pair";
const TRAJECTORY_PAIRS: &str = "trajectory_pair";
const EVALS: &str = "eval_reports";

/// Resolved per-seed paths.
struct SeedPaths {
    root: PathBuf,
}

impl SeedPaths {
    fn train_tasks(&self) -> PathBuf {
        self.root.join("tasks/train.jsonl")
    }
    fn eval_tasks(&self) -> PathBuf {
        self.root.join("tasks/eval.jsonl")
    }
    fn demos(&self) -> PathBuf {
        self.root.join("demos.jsonl")
    }
    fn policy(&self, rel: &str) -> PathBuf {
        self.root.join(format!("{rel}.params"))
    }
    fn round(&self, r: usize) -> PathBuf {
        self.root.join(format!("rounds/r{r}"))
    }
}

/// Run `command` under `cfg` on a pool of `cfg.workers` threads and return
/// the artifacts written, in write order.
pub fn run_command(command: &Command, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    pool.install(|| dispatch(command, cfg))
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match command {
        Command::Iterate { method } => return iterate_all(cfg, Method::parse(method)?),
        Command::Eval { policy, label, bon_k } => return eval_all(cfg, policy, label.as_deref().unwrap_or(policy), *bon_k),
        Command::Report => return report(cfg),
        _ => {}
    }
    let exp = cfg.experiment();
    let featurizer = Featurizer::new(exp.features.clone(), exp.world.space())?;
    for &seed in &cfg.seeds {
        let paths = SeedPaths { root: cfg.seed_dir(seed) };
        match command {
            Command::GenTasks => gen_tasks(&exp, seed, &paths, &mut written)?,
            Command::Sft => sft(&exp, &featurizer, seed, &paths, &mut written)?,
            Command::Collect { round, policy } => collect(cfg, &featurizer, seed, &paths, *round, policy, &mut written)?,
            Command::Scan { round } => scan(cfg, &featurizer, seed, &paths, *round, &mut written)?,
            Command::Branch { round } => branch(cfg, &featurizer, seed, &paths, *round, &mut written)?,
            Command::BuildPrefs { round } => build_prefs(cfg, &paths, *round, &mut written)?,
            Command::TrainDpo { round } => train_dpo(cfg, &featurizer, &paths, *round, &mut written)?,
            Command::Baseline { kind, round } => baseline(cfg, &featurizer, &paths, *kind, *round, &mut written)?,
            Command::Iterate { .. } | Command::Eval { .. } | Command::Report => unreachable!("dispatched above"),
        }
    }
    Ok(written)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn save_jsonl<T: Serialize>(path: PathBuf, kind: &str, records: &[T], written: &mut Vec<PathBuf>) -> Result<()> {
    write_jsonl(&path, kind, records)?;
    written.push(path);
    Ok(())
}

fn save_snapshot(snapshot: &PolicySnapshot, path: PathBuf, written: &mut Vec<PathBuf>) -> Result<()> {
    snapshot.save(&path)?;
    written.push(policy::sidecar_path(&path));
    written.push(path);
    Ok(())
}

fn load_tasks(paths: &SeedPaths) -> Result<Vec<TaskSpec>> {
    read_jsonl(&paths.train_tasks(), TASKS)
}

fn load_failed(paths: &SeedPaths, round: usize) -> Result<FailedTrajectorySet> {
    FailedTrajectorySet::new(round, read_jsonl(&paths.round(round).join("failed.jsonl"), TRAJECTORIES)?)
}

fn load_source(paths: &SeedPaths, round: usize) -> Result<RoundSource> {
    read_json(&paths.round(round).join("source.json"), "round_source")
}

fn load_policy(paths: &SeedPaths, rel: &str) -> Result<PolicySnapshot> {
    let p = paths.policy(rel);
    require(&p)?;
    PolicySnapshot::load(&p)
}

fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let pairs: Vec<PreferencePair> = read_jsonl(path, PAIRS)?;
    if let Some(p) = pairs.iter().find(|p| p.schema != pipeline::PAIR_SCHEMA) {
        return Err(Error::SchemaMismatch { path: path.to_path_buf(), expected: pipeline::PAIR_SCHEMA, found: p.schema });
    }
    Ok(pairs)
}

fn gen_tasks(exp: &ExperimentConfig, seed: u64, paths: &SeedPaths, written: &mut Vec<PathBuf>) -> Result<()> {
    let (train, eval) = experiment::task_sets(exp, seed)?;
    save_jsonl(paths.train_tasks(), TASKS, &train, written)?;
    save_jsonl(paths.eval_tasks(), TASKS, &eval, written)
}

fn sft(exp: &ExperimentConfig, featurizer: &Featurizer, seed: u64, paths: &SeedPaths, written: &mut Vec<PathBuf>) -> Result<()> {
    let tasks = load_tasks(paths)?;
    let demos = experiment::expert_demos(&tasks, exp.expert_epsilon, seed)?;
    let (params, losses) = experiment::sft_from_scratch(exp, featurizer, &tasks, &demos)?;
    save_jsonl(paths.demos(), DEMOS, &demos.demos, written)?;
    save_snapshot(&PolicySnapshot::new(params, 0, "sft"), paths.policy("policies/sft"), written)?;
    let rows: Vec<EpochMetrics> =
        losses.iter().enumerate().map(|(epoch, &loss)| EpochMetrics { epoch, loss, margin: None, grad_norm: None }).collect();
    let p = paths.root.join("policies/sft_metrics.csv");
    write_csv(&p, &rows)?;
    written.push(p);
    Ok(())
}

fn collect(
    cfg: &RunConfig,
    featurizer: &Featurizer,
    seed: u64,
    paths: &SeedPaths,
    round: usize,
    policy_rel: &str,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let tasks = load_tasks(paths)?;
    let snap = load_policy(paths, policy_rel)?;
    let scorer = cfg.scorer()?;
    let ctx = RoundContext::new(&tasks, featurizer, scorer.as_ref(), seed, round);
    let all = pipeline::collect_rollouts(&snap.params, &ctx, &tasks, cfg.mining.trials_per_task)?;
    let (failed, succeeded): (Vec<Trajectory>, Vec<Trajectory>) = all.into_iter().partition(|t| t.outcome == 0);
    let dir = paths.round(round);
    save_jsonl(dir.join("failed.jsonl"), TRAJECTORIES, &failed, written)?;
    save_jsonl(dir.join("successes.jsonl"), TRAJECTORIES, &succeeded, written)?;
    let src = dir.join("source.json");
    write_json(&src, "round_source", &RoundSource { round, policy: policy_rel.to_string() })?;
    written.push(src);
    Ok(())
}

fn thresholds(cfg: &RunConfig) -> Result<SelectionThresholds> {
    SelectionThresholds::new(cfg.mining.gamma_low, cfg.mining.gamma_high)
}

fn scan(cfg: &RunConfig, featurizer: &Featurizer, seed: u64, paths: &SeedPaths, round: usize, written: &mut Vec<PathBuf>) -> Result<()> {
    let tasks = load_tasks(paths)?;
    let failed = load_failed(paths, round)?;
    let snap = load_policy(paths, &load_source(paths, round)?.policy)?;
    let scorer = cfg.scorer()?;
    let ctx = RoundContext::new(&tasks, featurizer, scorer.as_ref(), seed, round);
    let proposer = match cfg.mining.mode {
        PairSourceMode::PolicyPosPolicyNeg => Proposer::Policy { params: &snap.params },
        _ => Proposer::Expert { epsilon: cfg.policy.expert_epsilon },
    };
    let scores = pipeline::score_steps(&ctx, &failed, proposer, cfg.mining.k)?;
    let candidates = pipeline::scan_candidates(&failed, &scores, &thresholds(cfg)?)?;
    let dir = paths.round(round);
    save_jsonl(dir.join("scores.jsonl"), SCORES, &scores, written)?;
    save_jsonl(dir.join("candidates.jsonl"), CANDIDATES, &candidates, written)
}

fn branch(cfg: &RunConfig, featurizer: &Featurizer, seed: u64, paths: &SeedPaths, round: usize, written: &mut Vec<PathBuf>) -> Result<()> {
    let tasks = load_tasks(paths)?;
    let failed = load_failed(paths, round)?;
    let snap = load_policy(paths, &load_source(paths, round)?.policy)?;
    let candidates: Vec<CandidateCriticalStep> = read_jsonl(&paths.round(round).join("candidates.jsonl"), CANDIDATES)?;
    let scorer = cfg.scorer()?;
    let ctx = RoundContext::new(&tasks, featurizer, scorer.as_ref(), seed, round);
    let selection = match cfg.mining.mode {
        PairSourceMode::ExpertPosExpertNeg => BranchSelection::All,
        _ => BranchSelection::AboveHigh,
    };
    let branches = pipeline::verify_candidates(&snap.params, &ctx, &failed, &candidates, &thresholds(cfg)?, selection)?;
    save_jsonl(paths.round(round).join("branches.jsonl"), BRANCHES, &branches, written)
}

fn supervision_row(method: &str, seed: u64, round: usize, s: &SupervisionStats) -> SupervisionRow {
    SupervisionRow {
        method: method.to_string(),
        seed,
        round,
        pair_count: s.pair_count,
        supervised_locations: s.supervised_locations,
        failed_step_total: s.failed_step_total,
        location_fraction: s.location_fraction,
        pair_fraction: s.pair_fraction,
    }
}

fn seed_of(paths: &SeedPaths) -> u64 {
    paths.root.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("seed-")).and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn build_prefs(cfg: &RunConfig, paths: &SeedPaths, round: usize, written: &mut Vec<PathBuf>) -> Result<()> {
    let dir = paths.round(round);
    let branches: Vec<StepBranches> = read_jsonl(&dir.join("branches.jsonl"), BRANCHES)?;
    let failed = load_failed(paths, round)?;
    let ds = pipeline::build_preference_pairs(&branches, cfg.mining.mode, round, cfg.mining.max_pairs_per_step)?;
    if ds.is_empty() {
        log::warn!("round {round}: no verified critical steps, empty preference dataset");
    }
    save_jsonl(dir.join("prefs.jsonl"), PAIRS, &ds.pairs, written)?;
    let stats = dir.join("prefs_stats.json");
    write_json(&stats, "dataset_stats", &ds.stats)?;
    written.push(stats);
    let s = metrics::supervision_stats("cso", &ds.pairs, &failed)?;
    let p = dir.join("supervision_stats.csv");
    write_csv(&p, &[supervision_row(cfg.mining.mode.as_str(), seed_of(paths), round, &s)])?;
    written.push(p);
    Ok(())
}

fn train_and_save(
    cfg: &RunConfig,
    featurizer: &Featurizer,
    paths: &SeedPaths,
    round: usize,
    data: &BaselineData,
    name: &str,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let tasks = load_tasks(paths)?;
    let source = load_source(paths, round)?;
    let reference = load_policy(paths, &source.policy)?;
    let (params, metrics) = iterate::train_round(&reference.params, featurizer, &policy::task_index(&tasks), data, &cfg.dpo)?;
    if metrics.is_empty() {
        log::warn!("round {round}: empty training set, parameters carried forward");
    }
    let command = format!("{name} --round {round} (reference {})", source.policy);
    save_snapshot(&PolicySnapshot::new(params, round, command), paths.policy(&format!("policies/{name}_r{round}")), written)?;
    let p = paths.round(round).join(format!("{name}_metrics.csv"));
    write_csv(&p, &metrics)?;
    written.push(p);
    Ok(())
}

fn train_dpo(cfg: &RunConfig, featurizer: &Featurizer, paths: &SeedPaths, round: usize, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = paths.round(round).join("prefs.jsonl");
    require(&path)?;
    let pairs = read_pairs(&path)?;
    let ds = PreferenceDataset::new(cfg.mining.mode.into(), pairs)?;
    train_and_save(cfg, featurizer, paths, round, &BaselineData::StepPairs(ds), "dpo", written)
}

fn baseline(
    cfg: &RunConfig,
    featurizer: &Featurizer,
    paths: &SeedPaths,
    kind: BaselineKind,
    round: usize,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let tasks = load_tasks(paths)?;
    let index = policy::task_index(&tasks);
    let failed = load_failed(paths, round)?;
    let dir = paths.round(round);
    let successes: Option<Vec<(String, Trajectory)>> = match kind {
        BaselineKind::Rft => {
            let s: Vec<Trajectory> = read_jsonl(&dir.join("successes.jsonl"), TRAJECTORIES)?;
            Some(s.into_iter().map(|t| (t.task_id.clone(), t)).collect())
        }
        _ => None,
    };
    let experts: Option<Vec<(String, Trajectory)>> = match kind {
        BaselineKind::Eto | BaselineKind::Ipr => Some(read_jsonl(&paths.demos(), DEMOS)?),
        _ => None,
    };
    let scores: Option<Vec<StepScores>> = match kind {
        BaselineKind::StepDpo => Some(read_jsonl(&dir.join("scores.jsonl"), SCORES)?),
        _ => None,
    };
    let data = baselines::build_baseline_dataset(
        kind,
        BaselineInputs {
            tasks: Some(&index),
            failed: Some(&failed),
            scores: scores.as_deref(),
            expert_successes: experts.as_deref(),
            policy_successes: successes.as_deref(),
            round,
        },
    )?;
    match &data {
        BaselineData::StepPairs(ds) => save_jsonl(dir.join(format!("{}_pairs.jsonl", kind.as_str())), PAIRS, &ds.pairs, written)?,
        BaselineData::TrajectoryPairs(p) => save_jsonl(dir.join(format!("{}_pairs.jsonl", kind.as_str())), TRAJECTORY_PAIRS, p, written)?,
        BaselineData::Demos(d) => save_jsonl(dir.join(format!("{}_demos.jsonl", kind.as_str())), DEMOS, &d.demos, written)?,
    }
    train_and_save(cfg, featurizer, paths, round, &data, kind.as_str(), written)
}

fn eval_rows(method: &str, seed: u64, report: &EvalReport) -> Vec<EvalRow> {
    let mut rows = vec![EvalRow {
        method: method.to_string(),
        seed,
        round: report.round,
        level: "overall".into(),
        episodes: report.overall.episodes,
        successes: report.overall.successes,
        success: report.overall.rate(),
    }];
    for (i, l) in report.per_level.iter().enumerate() {
        rows.push(EvalRow {
            method: method.to_string(),
            seed,
            round: report.round,
            level: metrics::level_name(i).into(),
            episodes: l.episodes,
            successes: l.successes,
            success: l.rate(),
        });
    }
    rows
}

fn error_rows(method: &str, seed: u64, round: usize, h: &metrics::ErrorHistogram) -> Vec<ErrorRow> {
    let fr = h.fractions();
    ErrorCategory::ALL
        .iter()
        .enumerate()
        .map(|(i, c)| ErrorRow {
            method: method.to_string(),
            seed,
            round,
            category: c.as_str().into(),
            count: h.counts[i],
            fraction: fr[i],
        })
        .collect()
}

/// Per-seed artifacts of one iterate run.
fn write_iteration(dir: &Path, state: &IterationState, written: &mut Vec<PathBuf>) -> Result<()> {
    for snap in &state.history {
        save_snapshot(snap, dir.join(format!("round{}.params", snap.round)), written)?;
    }
    for out in &state.rounds {
        let rd = dir.join(format!("r{}", out.record.round));
        save_jsonl(rd.join("failed.jsonl"), TRAJECTORIES, &out.failed.trajectories, written)?;
        save_jsonl(rd.join("candidates.jsonl"), CANDIDATES, &out.candidates, written)?;
        save_jsonl(rd.join("branches.jsonl"), BRANCHES, &out.branches, written)?;
        let pairs: &[PreferencePair] = out.dataset.as_ref().map_or(&[], |d| &d.pairs);
        save_jsonl(rd.join("prefs.jsonl"), PAIRS, pairs, written)?;
        if !out.trajectory_pairs.is_empty() {
            save_jsonl(rd.join("trajectory_pairs.jsonl"), TRAJECTORY_PAIRS, &out.trajectory_pairs, written)?;
        }
        let m = rd.join("train_metrics.csv");
        write_csv(&m, &out.train_metrics)?;
        written.push(m);
    }
    Ok(())
}

fn iterate_all(cfg: &RunConfig, method: Method) -> Result<Vec<PathBuf>> {
    let exp = cfg.experiment();
    let scorer = cfg.scorer()?;
    let label = method.label();
    let mut written = Vec::new();
    let (mut curve, mut evals, mut sup, mut errs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let setup = experiment::prepare(&exp, seed)?;
        let state = experiment::run_method(&exp, &setup, method, scorer.as_ref())?;
        write_iteration(&cfg.seed_dir(seed).join("iterate").join(label), &state, &mut written)?;
        let index = policy::task_index(&setup.train_tasks);
        for (r, ev) in state.evals.iter().enumerate() {
            let rec = r.checked_sub(1).map(|i| &state.rounds[i].record);
            curve.push(CurveRow {
                method: label.into(),
                seed,
                round: r,
                success: ev.success(),
                failed_steps: rec.map_or(0, |x| x.failed_steps),
                pairs: rec.map_or(0, |x| x.pairs),
                supervised_locations: rec.map_or(0, |x| x.supervised_locations),
            });
            evals.extend(eval_rows(label, seed, ev));
        }
        for out in &state.rounds {
            let r = out.record.round;
            let s = SupervisionStats::from_counts(label, out.record.pairs, out.record.supervised_locations, out.record.failed_steps);
            sup.push(supervision_row(label, seed, r, &s));
            if let Some(ds) = &out.dataset {
                let h = metrics::categorize_errors(&ds.pairs, &index, &out.failed.trajectories)?;
                errs.extend(error_rows(label, seed, r, &h));
            }
        }
    }
    let dir = cfg.output_dir.join("iterate").join(label);
    for (name, res) in [
        ("iteration_curve.csv", write_csv(&dir.join("iteration_curve.csv"), &curve)),
        ("eval_report.csv", write_csv(&dir.join("eval_report.csv"), &evals)),
        ("supervision_stats.csv", write_csv(&dir.join("supervision_stats.csv"), &sup)),
        ("error_histogram.csv", write_csv(&dir.join("error_histogram.csv"), &errs)),
    ] {
        res?;
        written.push(dir.join(name));
    }
    Ok(written)
}

fn eval_all(cfg: &RunConfig, policy_rel: &str, label: &str, bon_k: Option<usize>) -> Result<Vec<PathBuf>> {
    let exp = cfg.experiment();
    let featurizer = Featurizer::new(exp.features.clone(), exp.world.space())?;
    let scorer: Option<Box<dyn StepScorer>> = bon_k.map(|_| cfg.scorer()).transpose()?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let paths = SeedPaths { root: cfg.seed_dir(seed) };
        let tasks: Vec<TaskSpec> = read_jsonl(&paths.eval_tasks(), TASKS)?;
        let snap = load_policy(&paths, policy_rel)?;
        let report = match (bon_k, &scorer) {
            (Some(k), Some(s)) => bon::evaluate_bon(&snap.params, &featurizer, s.as_ref(), &tasks, k, exp.eval_trials, &[seed], label)?,
            _ => metrics::evaluate(&snap.params, &featurizer, &tasks, exp.eval_trials, &[seed], label, snap.round)?,
        };
        reports.push(report);
    }
    let path = cfg.output_dir.join("evals").join(format!("{}.json", label.replace('/', "_")));
    write_json(&path, EVALS, &reports)?;
    Ok(vec![path])
}

/// Every file in `dir` with extension `ext`, sorted by name.
fn listing(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> =
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == ext)).collect();
    out.sort();
    Ok(out)
}

fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let evals_dir = cfg.output_dir.join("evals");
    let iterate_dir = cfg.output_dir.join("iterate");
    let mut iterate_dirs: Vec<PathBuf> = if iterate_dir.exists() {
        std::fs::read_dir(&iterate_dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect()
    } else {
        Vec::new()
    };
    iterate_dirs.sort();
    let eval_files = listing(&evals_dir, "json")?;
    if eval_files.is_empty() && iterate_dirs.is_empty() {
        return Err(Error::MissingArtifact(evals_dir));
    }

    let out = cfg.output_dir.join("report");
    let mut written = Vec::new();
    let mut rows = Vec::new();
    for f in &eval_files {
        let reports: Vec<EvalReport> = read_json(f, EVALS)?;
        let method = reports.first().map(|r| r.method.clone()).unwrap_or_default();
        let mut levels: Vec<(String, Vec<metrics::LevelStat>)> = vec![("overall".into(), Vec::new())];
        levels.extend((0..3).map(|i| (metrics::level_name(i).to_string(), Vec::new())));
        for r in &reports {
            levels[0].1.push(r.overall);
            for i in 0..3 {
                levels[i + 1].1.push(r.per_level[i]);
            }
        }
        for (level, stats) in levels {
            let rates: Vec<f64> = stats.iter().map(|s| s.rate()).collect();
            rows.push(ReportRow {
                method: method.clone(),
                level,
                seeds: stats.len(),
                episodes: stats.iter().map(|s| s.episodes).sum(),
                successes: stats.iter().map(|s| s.successes).sum(),
                success: metrics::mean(&rates),
                std_error: metrics::std_error(&rates),
            });
        }
    }
    let p = out.join("eval_report.csv");
    write_csv(&p, &rows)?;
    written.push(p);

    let mut curves: Vec<CurveRow> = Vec::new();
    let mut sup: Vec<SupervisionRow> = Vec::new();
    let mut errs: Vec<ErrorRow> = Vec::new();
    for d in &iterate_dirs {
        curves.extend(read_csv::<CurveRow>(&d.join("iteration_curve.csv"))?);
        sup.extend(read_csv::<SupervisionRow>(&d.join("supervision_stats.csv"))?);
        errs.extend(read_csv::<ErrorRow>(&d.join("error_histogram.csv"))?);
    }
    for (name, res) in [
        ("iteration_curve.csv", write_csv(&out.join("iteration_curve.csv"), &curves)),
        ("supervision_stats.csv", write_csv(&out.join("supervision_stats.csv"), &sup)),
        ("error_histogram.csv", write_csv(&out.join("error_histogram.csv"), &errs)),
    ] {
        res?;
        written.push(out.join(name));
    }

    let mut series: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for c in &curves {
        series.entry(c.method.as_str()).or_default().entry(c.round).or_default().push(c.success);
    }
    for (method, by_round) in &series {
        let pts: Vec<PlotPoint> = by_round
            .iter()
            .map(|(&round, xs)| PlotPoint { round, success: metrics::mean(xs), std_error: metrics::std_error(xs) })
            .collect();
        let p = out.join("plot_data").join(format!("{method}.csv"));
        write_csv(&p, &pts)?;
        written.push(p);
    }

    let mut text = String::from("method            level    success  std_err  seeds\n");
    for r in &rows {
        text.push_str(&format!("{:<17} {:<8} {:>7.3}  {:>7.3}  {:>5}\n", r.method, r.level, r.success, r.std_error, r.seeds));
    }
    if !series.is_empty() {
        text.push_str("\nmean success by round\n");
        for (method, by_round) in &series {
            let xs: Vec<String> = by_round.values().map(|v| format!("{:.3}", metrics::mean(v))).collect();
            text.push_str(&format!("{:<17} {}\n", method, xs.join(" -> ")));
        }
    }
    let p = out.join("summary.txt");
    std::fs::write(&p, text)?;
    written.push(p);
    Ok(written)
}

/// Demonstrations stored by `sft`.
pub fn load_demos(path: &Path) -> Result<DemoDataset> {
    DemoDataset::new(read_jsonl(path, DEMOS)?)
}
