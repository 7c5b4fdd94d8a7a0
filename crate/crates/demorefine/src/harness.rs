//! Benchmark orchestration: dataset generation, policy training, demo
//! recording, evaluation sweeps, ablations, and CSV reporting.
//!
//! Every artifact is deterministic in the root seed. Episode cells derive
//! their seeds from (root seed, task, noise level, seed index, episode
//! index), so cells can run in any order on any number of workers and still
//! aggregate to byte-identical CSV files.

use crate::demonstrator::{
    self, scripted_human_demo, scripted_robot_expert, DemoError, EmbodimentGap, EpisodeRecord,
    HandDemo,
};
use crate::policy::{self, Policy, PolicyConfig, PolicyError};
use crate::refine::{self, EpisodeResult, ExecContext, Method, RefineConfig, RefineError};
use crate::retarget::{FingerMode, RetargetConfig, RetargetError};
use crate::seeds::{fingerprint_bytes, SeedMix};
use crate::simenv::{default_eval_tasks, ObsLayout, SimError, TaskSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("artifact mismatch: checkpoint was trained against fingerprint {found}, config has {expected}")]
    ArtifactMismatch { expected: String, found: String },
    #[error("expert generation failed on {task} after {attempts} attempts")]
    GenerationExhausted { task: String, attempts: usize },
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Retarget(#[from] RetargetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// CLI exit code: 2 config error, 3 artifact mismatch, 4 runtime
    /// failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::ArtifactMismatch { .. } => 3,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactPaths {
    pub dataset: String,
    pub checkpoint: String,
    pub demo_dir: String,
    pub results_dir: String,
}

impl Default for ArtifactPaths {
    fn default() -> Self {
        ArtifactPaths {
            dataset: "dataset.dmdd".into(),
            checkpoint: "checkpoint".into(),
            demo_dir: "demos".into(),
            results_dir: "results".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub root_seed: u64,
    pub episodes_per_cell: usize,
    pub eval_seeds: usize,
    pub r_grid: Vec<f64>,
    /// Execution-time object perturbation in meters.
    pub perturbation: f64,
    pub expert_episodes: usize,
    /// Noise level used by the ablation and headline comparisons.
    pub ablate_r: f64,
    /// Keypoint shift magnitude for the noisy-demo ablation (m).
    pub keypoint_noise: f64,
    /// Episodes in the base-policy probe behind `--r auto`.
    pub probe_episodes: usize,
    pub open_loop_horizon: usize,
    pub gap: EmbodimentGap,
    pub retarget: RetargetConfig,
    pub policy: PolicyConfig,
    pub tasks: Vec<TaskSpec>,
    pub paths: ArtifactPaths,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let tasks = default_eval_tasks();
        let layout = ObsLayout { n_objects: 1, n_tasks: tasks.len() };
        BenchmarkConfig {
            root_seed: 7,
            episodes_per_cell: 50,
            eval_seeds: 3,
            r_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            perturbation: 0.02,
            expert_episodes: 985,
            ablate_r: 0.2,
            keypoint_noise: 0.05,
            probe_episodes: 20,
            open_loop_horizon: 8,
            gap: EmbodimentGap::default(),
            retarget: RetargetConfig::default(),
            policy: PolicyConfig::for_obs_dim(layout.dim()),
            tasks,
            paths: ArtifactPaths::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn layout(&self) -> ObsLayout {
        ObsLayout { n_objects: 1, n_tasks: self.tasks.len() }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.tasks.is_empty() {
            return fail("no tasks configured".into());
        }
        for (i, task) in self.tasks.iter().enumerate() {
            if task.task_id != i {
                return fail(format!(
                    "task ids must be contiguous from 0; slot {i} has id {}",
                    task.task_id
                ));
            }
        }
        if self.episodes_per_cell == 0 || self.eval_seeds == 0 {
            return fail("episodes_per_cell and eval_seeds must be at least 1".into());
        }
        if !self.r_grid.contains(&0.0) || !self.r_grid.contains(&1.0) {
            return fail("r_grid must include both endpoints 0.0 and 1.0".into());
        }
        if self.r_grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return fail("r_grid values must lie in [0, 1]".into());
        }
        if !(0.0 < self.ablate_r && self.ablate_r < 1.0) {
            return fail("ablate_r must lie strictly inside (0, 1)".into());
        }
        if self.perturbation < 0.0 || self.keypoint_noise < 0.0 {
            return fail("perturbation magnitudes must be nonnegative".into());
        }
        if self.policy.obs_dim != self.layout().dim() {
            return fail(format!(
                "policy.obs_dim {} does not match the task layout dimension {}",
                self.policy.obs_dim,
                self.layout().dim()
            ));
        }
        if self.policy.action_dim != 4 {
            return fail("policy.action_dim must be 4 (delta xyz + gripper)".into());
        }
        if self.open_loop_horizon == 0 || self.open_loop_horizon > self.policy.chunk_len {
            return fail("need 1 <= open_loop_horizon <= policy.chunk_len".into());
        }
        self.policy.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Fingerprint of everything that must match between a checkpoint and an
    /// evaluation: the tasks, the embodiment gap, the retargeting rules, the
    /// policy architecture, and the execution perturbation.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct CompatKey<'a> {
            tasks: &'a [TaskSpec],
            gap: &'a EmbodimentGap,
            retarget: &'a RetargetConfig,
            policy: &'a PolicyConfig,
            perturbation: f64,
            expert_episodes: usize,
        }
        let key = CompatKey {
            tasks: &self.tasks,
            gap: &self.gap,
            retarget: &self.retarget,
            policy: &self.policy,
            perturbation: self.perturbation,
            expert_episodes: self.expert_episodes,
        };
        let text = toml::to_string(&key).expect("fingerprint serialization");
        fingerprint_bytes(text.as_bytes())
    }

    fn refine_config(&self, noise_level: f64, seed: u64) -> RefineConfig {
        RefineConfig {
            noise_level,
            open_loop_horizon: self.open_loop_horizon,
            predict_horizon: self.policy.chunk_len,
            inference_budget: self.policy.inference_steps,
            seed,
        }
    }

    fn exec_context(&self) -> ExecContext {
        ExecContext {
            layout: self.layout(),
            perturb_magnitude: self.perturbation,
            log_steps: false,
        }
    }
}

/// Loads and validates a TOML config. Unknown keys are errors.
pub fn load_config(path: &Path) -> Result<BenchmarkConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: BenchmarkConfig = toml::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_config(path: &Path, cfg: &BenchmarkConfig) -> Result<(), HarnessError> {
    let text = toml::to_string(cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Seed for one episode cell.
fn cell_seed(root: u64, task: &str, r: f64, seed_index: usize, episode_index: usize) -> u64 {
    SeedMix::new("cell")
        .u64(root)
        .str(task)
        .f64_bits(r)
        .u64(seed_index as u64)
        .u64(episode_index as u64)
        .finish()
}

// --- gen-data ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenDataReport {
    pub episodes: usize,
    pub attempts: usize,
    pub dataset_path: PathBuf,
    pub dataset_fingerprint: String,
}

const MAX_EXPERT_ATTEMPTS: usize = 50;

/// Generates the expert training set on the mirrored-goal task variants and
/// writes the binary dataset file. Failed scripted plans are skipped and
/// retried with fresh seeds.
pub fn cmd_gen_data(cfg: &BenchmarkConfig, out_root: &Path) -> Result<GenDataReport, HarnessError> {
    cfg.validate()?;
    let layout = cfg.layout();
    let train_tasks: Vec<TaskSpec> =
        cfg.tasks.iter().map(|t| t.mirrored_goal_variant()).collect();
    let mut attempts_total = 0usize;
    let specs: Vec<(usize, &TaskSpec)> = (0..cfg.expert_episodes)
        .map(|i| (i, &train_tasks[i % train_tasks.len()]))
        .collect();
    let results: Vec<Result<(EpisodeRecord, usize), HarnessError>> = specs
        .par_iter()
        .map(|(i, task)| {
            for attempt in 0..MAX_EXPERT_ATTEMPTS {
                let seed = SeedMix::new("expert")
                    .u64(cfg.root_seed)
                    .u64(*i as u64)
                    .u64(attempt as u64)
                    .finish();
                match scripted_robot_expert(task, &layout, seed) {
                    Ok(ep) => return Ok((ep.record(), attempt + 1)),
                    Err(DemoError::GenerationFailure { .. }) => continue,
                    Err(e) => return Err(e.into()),
                }
            }
            Err(HarnessError::GenerationExhausted {
                task: task.name.clone(),
                attempts: MAX_EXPERT_ATTEMPTS,
            })
        })
        .collect();
    let mut episodes = Vec::with_capacity(cfg.expert_episodes);
    for r in results {
        let (record, attempts) = r?;
        attempts_total += attempts;
        episodes.push(record);
    }
    std::fs::create_dir_all(out_root)?;
    let dataset_path = out_root.join(&cfg.paths.dataset);
    demonstrator::write_dataset(
        &dataset_path,
        &episodes,
        layout.dim(),
        cfg.policy.action_dim,
        cfg.policy.chunk_len,
    )?;
    let bytes = std::fs::read(&dataset_path)?;
    Ok(GenDataReport {
        episodes: episodes.len(),
        attempts: attempts_total,
        dataset_fingerprint: fingerprint_bytes(&bytes),
        dataset_path,
    })
}

// --- train ------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_stem: PathBuf,
    pub loss_at_100: f64,
    pub loss_final: f64,
    pub windows: usize,
}

pub fn cmd_train(cfg: &BenchmarkConfig, out_root: &Path) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let dataset_path = out_root.join(&cfg.paths.dataset);
    if !dataset_path.exists() {
        return Err(HarnessError::MissingArtifact(dataset_path));
    }
    let bytes = std::fs::read(&dataset_path)?;
    let dataset_fingerprint = fingerprint_bytes(&bytes);
    let (episodes, header) = demonstrator::read_dataset(&dataset_path)?;
    if header.obs_dim as usize != cfg.policy.obs_dim
        || header.action_dim as usize != cfg.policy.action_dim
    {
        return Err(HarnessError::Config(format!(
            "dataset dims ({}, {}) do not match the policy config ({}, {})",
            header.obs_dim, header.action_dim, cfg.policy.obs_dim, cfg.policy.action_dim
        )));
    }
    let dataset = policy::build_dataset(&episodes, &cfg.policy)?;
    let train_seed = SeedMix::new("train").u64(cfg.root_seed).finish();
    let mut policy = policy::train_policy(&dataset, &cfg.policy, train_seed)?;
    policy.dataset_fingerprint = dataset_fingerprint;
    policy.benchmark_fingerprint = Some(cfg.fingerprint());
    let stem = out_root.join(&cfg.paths.checkpoint);
    policy.save(&stem)?;
    let report = policy.train_report.expect("fresh training carries a report");
    Ok(TrainOutcome {
        checkpoint_stem: stem,
        loss_at_100: report.loss_at_100,
        loss_final: report.loss_final,
        windows: dataset.windows.len(),
    })
}

// --- demo -------------------------------------------------------------------

/// Records one hand demonstration per task (on the evaluation-goal variant)
/// and writes the line-delimited demo files.
pub fn cmd_demo(cfg: &BenchmarkConfig, out_root: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    cfg.validate()?;
    let layout = cfg.layout();
    let dir = out_root.join(&cfg.paths.demo_dir);
    std::fs::create_dir_all(&dir)?;
    let mut paths = Vec::new();
    for task in &cfg.tasks {
        let demo_seed =
            SeedMix::new("demo").u64(cfg.root_seed).u64(task.task_id as u64).finish();
        let demo = generate_demo_with_retries(task, &layout, &cfg.gap, demo_seed)?;
        let path = dir.join(format!("{}.txt", task.name));
        demonstrator::write_hand_demo(&path, &demo)?;
        paths.push(path);
    }
    Ok(paths)
}

fn generate_demo_with_retries(
    task: &TaskSpec,
    layout: &ObsLayout,
    gap: &EmbodimentGap,
    base_seed: u64,
) -> Result<HandDemo, HarnessError> {
    for attempt in 0..MAX_EXPERT_ATTEMPTS {
        let seed = SeedMix::new("demo-attempt").u64(base_seed).u64(attempt as u64).finish();
        match scripted_human_demo(task, layout, gap, seed) {
            Ok(demo) => return Ok(demo),
            Err(DemoError::GenerationFailure { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(HarnessError::GenerationExhausted { task: task.name.clone(), attempts: MAX_EXPERT_ATTEMPTS })
}

fn load_demos(cfg: &BenchmarkConfig, out_root: &Path) -> Result<Vec<HandDemo>, HarnessError> {
    let dir = out_root.join(&cfg.paths.demo_dir);
    let mut demos = Vec::with_capacity(cfg.tasks.len());
    for task in &cfg.tasks {
        let path = dir.join(format!("{}.txt", task.name));
        if !path.exists() {
            return Err(HarnessError::MissingArtifact(path));
        }
        let demo = demonstrator::read_hand_demo(&path)?;
        if demo.task_id != task.task_id {
            return Err(HarnessError::Config(format!(
                "demo {} carries task id {}, expected {}",
                path.display(),
                demo.task_id,
                task.task_id
            )));
        }
        demos.push(demo);
    }
    Ok(demos)
}

fn load_policy(cfg: &BenchmarkConfig, out_root: &Path) -> Result<Policy, HarnessError> {
    let stem = out_root.join(&cfg.paths.checkpoint);
    if !stem.with_extension("net").exists() {
        return Err(HarnessError::MissingArtifact(stem.with_extension("net")));
    }
    let policy = Policy::load(&stem)?;
    let expected = cfg.fingerprint();
    match &policy.benchmark_fingerprint {
        Some(found) if *found == expected => Ok(policy),
        Some(found) => Err(HarnessError::ArtifactMismatch {
            expected,
            found: found.clone(),
        }),
        None => Err(HarnessError::ArtifactMismatch { expected, found: "<unset>".into() }),
    }
}

// --- evaluation -------------------------------------------------------------

/// One per-(task, method, r, seed) evaluation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub task: String,
    pub method: String,
    pub r: f64,
    pub seed_index: usize,
    pub episodes: usize,
    pub successes: usize,
}

impl CellRow {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

/// Aggregate over the seeds of one (task, method, r) group, or over every
/// cell of one r ("ALL" row).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub task: String,
    pub method: String,
    pub r: f64,
    pub episodes: usize,
    pub successes: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<CellRow>,
    pub aggregates: Vec<AggregateRow>,
    pub config_fingerprint: String,
    pub checkpoint_fingerprint: String,
    pub wall_clock_secs: f64,
    /// Base-policy probe rates per task, populated by auto-eval.
    pub probe_rates: Vec<(String, f64)>,
}

impl SweepResult {
    /// Mean success over the per-seed rates of one (task, r) group.
    pub fn task_mean(&self, task: &str, r: f64) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.task == task && a.r == r)
            .map(|a| a.mean)
    }

    /// The "ALL" aggregate mean at one noise level.
    pub fn overall_mean(&self, r: f64) -> Option<f64> {
        self.task_mean("ALL", r)
    }
}

/// Sample mean and (n-1) std of per-seed rates.
fn mean_std(rates: &[f64]) -> (f64, f64) {
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let std = if rates.len() > 1 {
        (rates.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

struct CellSpec<'a> {
    task: &'a TaskSpec,
    demo: &'a HandDemo,
    retarget_cfg: RetargetConfig,
    method_label: String,
    r: f64,
    seed_index: usize,
}

fn run_cell(cfg: &BenchmarkConfig, policy: &Policy, spec: &CellSpec) -> CellRow {
    let exec = cfg.exec_context();
    let successes: usize = (0..cfg.episodes_per_cell)
        .into_par_iter()
        .map(|episode_index| {
            let seed =
                cell_seed(cfg.root_seed, &spec.task.name, spec.r, spec.seed_index, episode_index);
            let result: EpisodeResult = refine::run_episode(
                spec.task,
                policy,
                spec.demo,
                &spec.retarget_cfg,
                &cfg.refine_config(spec.r, seed),
                &exec,
            );
            usize::from(result.success)
        })
        .sum();
    CellRow {
        task: spec.task.name.clone(),
        method: spec.method_label.clone(),
        r: spec.r,
        seed_index: spec.seed_index,
        episodes: cfg.episodes_per_cell,
        successes,
    }
}

fn aggregate_rows(rows: &[CellRow]) -> Vec<AggregateRow> {
    // Group by (task, method, r) preserving first-seen order, then append
    // one ALL row per (method, r).
    let mut out = Vec::new();
    let mut seen: Vec<(String, String, f64)> = Vec::new();
    for row in rows {
        let key = (row.task.clone(), row.method.clone(), row.r);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let group: Vec<&CellRow> = rows
            .iter()
            .filter(|r| r.task == row.task && r.method == row.method && r.r == row.r)
            .collect();
        let rates: Vec<f64> = group.iter().map(|r| r.rate()).collect();
        let (mean, std) = mean_std(&rates);
        out.push(AggregateRow {
            task: row.task.clone(),
            method: row.method.clone(),
            r: row.r,
            episodes: group.iter().map(|r| r.episodes).sum(),
            successes: group.iter().map(|r| r.successes).sum(),
            mean,
            std,
        });
    }
    let mut seen_all: Vec<(String, f64)> = Vec::new();
    for row in rows {
        let key = (row.method.clone(), row.r);
        if seen_all.contains(&key) {
            continue;
        }
        seen_all.push(key);
        let group: Vec<&CellRow> =
            rows.iter().filter(|r| r.method == row.method && r.r == row.r).collect();
        let rates: Vec<f64> = group.iter().map(|r| r.rate()).collect();
        let (mean, std) = mean_std(&rates);
        out.push(AggregateRow {
            task: "ALL".into(),
            method: row.method.clone(),
            r: row.r,
            episodes: group.iter().map(|r| r.episodes).sum(),
            successes: group.iter().map(|r| r.successes).sum(),
            mean,
            std,
        });
    }
    out
}

fn method_label(cfg: &BenchmarkConfig, r: f64) -> String {
    Method::for_run(r, cfg.policy.parameterization).as_str().to_string()
}

fn run_grid(
    cfg: &BenchmarkConfig,
    policy: &Policy,
    demos: &[HandDemo],
    task_r: &[(usize, f64)],
) -> Vec<CellRow> {
    let mut rows = Vec::new();
    for &(task_idx, r) in task_r {
        let task = &cfg.tasks[task_idx];
        for seed_index in 0..cfg.eval_seeds {
            let spec = CellSpec {
                task,
                demo: &demos[task_idx],
                retarget_cfg: cfg.retarget,
                method_label: method_label(cfg, r),
                r,
                seed_index,
            };
            rows.push(run_cell(cfg, policy, &spec));
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RSpec {
    Fixed(f64),
    Auto,
}

/// Evaluates one noise level (or the per-task auto heuristic) and writes
/// `eval.csv`.
pub fn cmd_eval(
    cfg: &BenchmarkConfig,
    out_root: &Path,
    r_spec: RSpec,
) -> Result<SweepResult, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let policy = load_policy(cfg, out_root)?;
    let demos = load_demos(cfg, out_root)?;
    let mut probe_rates = Vec::new();
    let task_r: Vec<(usize, f64)> = match r_spec {
        RSpec::Fixed(r) => {
            if !(0.0..=1.0).contains(&r) {
                return Err(HarnessError::Config(format!("--r {r} outside [0, 1]")));
            }
            (0..cfg.tasks.len()).map(|i| (i, r)).collect()
        }
        RSpec::Auto => {
            let mut picks = Vec::new();
            for (i, task) in cfg.tasks.iter().enumerate() {
                let rate = probe_base_policy(cfg, &policy, task, &demos[i])?;
                let r = refine::choose_noise_level(rate)?;
                probe_rates.push((task.name.clone(), rate));
                picks.push((i, r));
            }
            picks
        }
    };
    let rows = run_grid(cfg, &policy, &demos, &task_r);
    let aggregates = aggregate_rows(&rows);
    let result = SweepResult {
        rows,
        aggregates,
        config_fingerprint: cfg.fingerprint(),
        checkpoint_fingerprint: policy.dataset_fingerprint.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        probe_rates,
    };
    let dir = out_root.join(&cfg.paths.results_dir);
    std::fs::create_dir_all(&dir)?;
    write_result_csv(&dir.join("eval.csv"), &result)?;
    Ok(result)
}

/// Success rate of the pure policy rollout over the probe budget.
fn probe_base_policy(
    cfg: &BenchmarkConfig,
    policy: &Policy,
    task: &TaskSpec,
    demo: &HandDemo,
) -> Result<f64, HarnessError> {
    let exec = cfg.exec_context();
    let successes: usize = (0..cfg.probe_episodes)
        .into_par_iter()
        .map(|i| {
            let seed = SeedMix::new("probe")
                .u64(cfg.root_seed)
                .str(&task.name)
                .u64(i as u64)
                .finish();
            let result = refine::run_episode(
                task,
                policy,
                demo,
                &cfg.retarget,
                &cfg.refine_config(1.0, seed),
                &exec,
            );
            usize::from(result.success)
        })
        .sum();
    Ok(successes as f64 / cfg.probe_episodes.max(1) as f64)
}

/// Evaluates the full noise-level grid and writes `sweep.csv`.
pub fn cmd_sweep(cfg: &BenchmarkConfig, out_root: &Path) -> Result<SweepResult, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let policy = load_policy(cfg, out_root)?;
    let demos = load_demos(cfg, out_root)?;
    let mut task_r = Vec::new();
    for &r in &cfg.r_grid {
        for i in 0..cfg.tasks.len() {
            task_r.push((i, r));
        }
    }
    let rows = run_grid(cfg, &policy, &demos, &task_r);
    let aggregates = aggregate_rows(&rows);
    let result = SweepResult {
        rows,
        aggregates,
        config_fingerprint: cfg.fingerprint(),
        checkpoint_fingerprint: policy.dataset_fingerprint.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        probe_rates: Vec::new(),
    };
    let dir = out_root.join(&cfg.paths.results_dir);
    std::fs::create_dir_all(&dir)?;
    write_result_csv(&dir.join("sweep.csv"), &result)?;
    Ok(result)
}

/// Robustness ablations: noisy keypoints and thumb+index retargeting, each
/// evaluated with open-loop replay (r = 0) and with refinement at
/// `ablate_r`. Writes `ablate.csv`.
pub fn cmd_ablate(cfg: &BenchmarkConfig, out_root: &Path) -> Result<SweepResult, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let policy = load_policy(cfg, out_root)?;
    let demos = load_demos(cfg, out_root)?;
    let mut rows = Vec::new();
    for (task_idx, task) in cfg.tasks.iter().enumerate() {
        for seed_index in 0..cfg.eval_seeds {
            let noise_seed = SeedMix::new("kpnoise")
                .u64(cfg.root_seed)
                .str(&task.name)
                .u64(seed_index as u64)
                .finish();
            let noisy_demo =
                demonstrator::perturb_keypoints(&demos[task_idx], cfg.keypoint_noise, noise_seed);
            let thumb_index_cfg =
                RetargetConfig { finger_mode: FingerMode::ThumbIndex, ..cfg.retarget };
            let variants: [(&str, &HandDemo, RetargetConfig, f64); 4] = [
                ("retarget_kpnoise", &noisy_demo, cfg.retarget, 0.0),
                ("refined_kpnoise", &noisy_demo, cfg.retarget, cfg.ablate_r),
                ("retarget_thumb_index", &demos[task_idx], thumb_index_cfg, 0.0),
                ("refined_thumb_index", &demos[task_idx], thumb_index_cfg, cfg.ablate_r),
            ];
            for (label, demo, retarget_cfg, r) in variants {
                let spec = CellSpec {
                    task,
                    demo,
                    retarget_cfg,
                    method_label: label.to_string(),
                    r,
                    seed_index,
                };
                rows.push(run_cell(cfg, &policy, &spec));
            }
        }
    }
    let aggregates = aggregate_rows(&rows);
    let result = SweepResult {
        rows,
        aggregates,
        config_fingerprint: cfg.fingerprint(),
        checkpoint_fingerprint: policy.dataset_fingerprint.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        probe_rates: Vec::new(),
    };
    let dir = out_root.join(&cfg.paths.results_dir);
    std::fs::create_dir_all(&dir)?;
    write_result_csv(&dir.join("ablate.csv"), &result)?;
    Ok(result)
}

// --- CSV --------------------------------------------------------------------

/// Writes the result CSV: per-seed rows
/// `task,method,r,seed,episodes,successes,rate`, then aggregate rows with
/// `seed = -1` and mean/std columns appended. Rates carry four decimals.
pub fn write_result_csv(path: &Path, result: &SweepResult) -> Result<(), HarnessError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "task,method,r,seed,episodes,successes,rate")?;
    for row in &result.rows {
        writeln!(
            file,
            "{},{},{:.4},{},{},{},{:.4}",
            row.task,
            row.method,
            row.r,
            row.seed_index,
            row.episodes,
            row.successes,
            row.rate()
        )?;
    }
    for agg in &result.aggregates {
        let overall = agg.successes as f64 / agg.episodes.max(1) as f64;
        writeln!(
            file,
            "{},{},{:.4},-1,{},{},{:.4},{:.4},{:.4}",
            agg.task, agg.method, agg.r, agg.episodes, agg.successes, overall, agg.mean, agg.std
        )?;
    }
    Ok(())
}

/// Reads `sweep.csv` aggregate rows and emits `plot.csv` with one
/// `(task, r, mean, std)` triple per (task, noise level).
pub fn cmd_plot_data(cfg: &BenchmarkConfig, out_root: &Path) -> Result<PathBuf, HarnessError> {
    cfg.validate()?;
    let dir = out_root.join(&cfg.paths.results_dir);
    let sweep_path = dir.join("sweep.csv");
    if !sweep_path.exists() {
        return Err(HarnessError::MissingArtifact(sweep_path));
    }
    let text = std::fs::read_to_string(&sweep_path)?;
    let mut lines = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        // Aggregate rows have seed = -1 and two appended columns.
        if fields.len() == 9 && fields[3] == "-1" && fields[0] != "ALL" {
            lines.push(format!("{},{},{},{}", fields[0], fields[2], fields[7], fields[8]));
        }
    }
    let path = dir.join("plot.csv");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(file, "task,r,mean,std")?;
    for line in lines {
        writeln!(file, "{line}")?;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_fingerprint_stable() {
        let cfg = BenchmarkConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.fingerprint(), cfg.fingerprint());
        let mut other = cfg.clone();
        other.perturbation = 0.05;
        assert_ne!(cfg.fingerprint(), other.fingerprint());
        // The root seed does not participate: re-evaluating an existing
        // checkpoint under a different seed is legitimate.
        let mut reseeded = cfg.clone();
        reseeded.root_seed = 1234;
        assert_eq!(cfg.fingerprint(), reseeded.fingerprint());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = BenchmarkConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let parsed: BenchmarkConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = BenchmarkConfig::default();
        let mut text = toml::to_string(&cfg).unwrap();
        text.push_str("\nnot_a_real_key = 3\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, text).unwrap();
        let err = load_config(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("not_a_real_key"));
    }

    #[test]
    fn grid_must_contain_endpoints() {
        let mut cfg = BenchmarkConfig::default();
        cfg.r_grid = vec![0.2, 0.4];
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn missing_config_file_maps_to_exit_2() {
        let err = load_config(Path::new("/nonexistent/config.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn cell_seeds_differ_across_coordinates() {
        let a = cell_seed(1, "push", 0.2, 0, 0);
        let b = cell_seed(1, "push", 0.2, 0, 1);
        let c = cell_seed(1, "push", 0.4, 0, 0);
        let d = cell_seed(1, "lift", 0.2, 0, 0);
        assert!(a != b && a != c && a != d);
        assert_eq!(a, cell_seed(1, "push", 0.2, 0, 0));
    }

    #[test]
    fn aggregates_compute_mean_and_std_over_seeds() {
        let rows = vec![
            CellRow {
                task: "push".into(),
                method: "refined".into(),
                r: 0.2,
                seed_index: 0,
                episodes: 10,
                successes: 6,
            },
            CellRow {
                task: "push".into(),
                method: "refined".into(),
                r: 0.2,
                seed_index: 1,
                episodes: 10,
                successes: 8,
            },
        ];
        let aggs = aggregate_rows(&rows);
        assert_eq!(aggs.len(), 2);
        let push = &aggs[0];
        assert_eq!(push.task, "push");
        assert_eq!(push.episodes, 20);
        assert_eq!(push.successes, 14);
        assert!((push.mean - 0.7).abs() < 1e-12);
        let expect_std = ((0.1f64 * 0.1 + 0.1 * 0.1) / 1.0).sqrt();
        assert!((push.std - expect_std).abs() < 1e-12);
        let all = &aggs[1];
        assert_eq!(all.task, "ALL");
        assert_eq!(all.episodes, 20);
    }

    #[test]
    fn csv_formatting_is_stable() {
        let result = SweepResult {
            rows: vec![CellRow {
                task: "push".into(),
                method: "retarget".into(),
                r: 0.0,
                seed_index: 0,
                episodes: 50,
                successes: 17,
            }],
            aggregates: vec![AggregateRow {
                task: "push".into(),
                method: "retarget".into(),
                r: 0.0,
                episodes: 150,
                successes: 51,
                mean: 0.34,
                std: 0.0123456,
            }],
            config_fingerprint: String::new(),
            checkpoint_fingerprint: String::new(),
            wall_clock_secs: 0.0,
            probe_rates: Vec::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_result_csv(&path, &result).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "task,method,r,seed,episodes,successes,rate");
        assert_eq!(lines[1], "push,retarget,0.0000,0,50,17,0.3400");
        assert_eq!(lines[2], "push,retarget,0.0000,-1,150,51,0.3400,0.3400,0.0123");
    }
}
