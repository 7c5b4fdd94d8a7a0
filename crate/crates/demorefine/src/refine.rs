//! Closed-loop refinement of retargeted trajectories.
//!
//! Each control cycle slices the retargeted action chunk at the current
//! demonstration timestep, noises it to an intermediate schedule step in
//! normalized action space, denoises it with the policy conditioned on live
//! observations, and executes the first few actions. The noise level `r`
//! interpolates between the two baselines: `r = 0` replays the retargeted
//! trajectory untouched and `r = 1` ignores it entirely, yielding a pure
//! policy rollout.

use crate::demonstrator::HandDemo;
use crate::policy::{self, Parameterization, Policy, PolicyError};
use crate::retarget::{self, RetargetConfig, RetargetError};
use crate::seeds::SeedMix;
use crate::simenv::{self, ObsLayout, RobotAction, StepRecord, TaskSpec, WorldState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("noise level {0} outside [0, 1]")]
    NoiseLevelOutOfRange(f64),
    #[error("chunk length mismatch: expected {expected}, got {got}")]
    ChunkMismatch { expected: usize, got: usize },
    #[error("refine config horizon {cfg} does not match policy horizon {policy}")]
    HorizonMismatch { cfg: usize, policy: usize },
    #[error("success rate {0} outside [0, 1]")]
    RateOutOfRange(f64),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Retarget(#[from] RetargetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Noise level r = s*/S in [0, 1].
    pub noise_level: f64,
    /// Actions executed per control cycle (K).
    pub open_loop_horizon: usize,
    /// Chunk length fed through refinement (H); must match the policy.
    pub predict_horizon: usize,
    /// Denoiser evaluations budgeted for a full reverse pass; must match
    /// the policy.
    pub inference_budget: usize,
    /// Episode-level seed; per-cycle noise streams derive from it.
    pub seed: u64,
}

impl RefineConfig {
    pub fn new(noise_level: f64, seed: u64) -> RefineConfig {
        RefineConfig {
            noise_level,
            open_loop_horizon: 8,
            predict_horizon: 10,
            inference_budget: 20,
            seed,
        }
    }

    pub fn validate(&self, policy: &Policy) -> Result<(), RefineError> {
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(RefineError::NoiseLevelOutOfRange(self.noise_level));
        }
        if self.open_loop_horizon == 0 || self.open_loop_horizon > self.predict_horizon {
            return Err(RefineError::HorizonMismatch {
                cfg: self.open_loop_horizon,
                policy: self.predict_horizon,
            });
        }
        if self.predict_horizon != policy.config.chunk_len {
            return Err(RefineError::HorizonMismatch {
                cfg: self.predict_horizon,
                policy: policy.config.chunk_len,
            });
        }
        if self.inference_budget != policy.config.inference_steps {
            return Err(RefineError::HorizonMismatch {
                cfg: self.inference_budget,
                policy: policy.config.inference_steps,
            });
        }
        Ok(())
    }
}

/// How an episode was produced; the tag is pinned by the noise level at the
/// endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Retarget,
    BasePolicy,
    Refined,
    FlowVariant,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Retarget => "retarget",
            Method::BasePolicy => "base_policy",
            Method::Refined => "refined",
            Method::FlowVariant => "flow",
        }
    }

    /// Method tag implied by a run's noise level and parameterization.
    pub fn for_run(noise_level: f64, parameterization: Parameterization) -> Method {
        if noise_level == 0.0 {
            Method::Retarget
        } else if noise_level == 1.0 {
            Method::BasePolicy
        } else {
            match parameterization {
                Parameterization::EpsPrediction => Method::Refined,
                Parameterization::FlowVelocity => Method::FlowVariant,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub task_id: usize,
    pub method: Method,
    pub noise_level: f64,
    pub seed: u64,
    pub success: bool,
    pub episode_len: usize,
    pub terminal: WorldState,
    pub error: Option<String>,
    pub steps: Option<Vec<StepRecord>>,
}

/// Execution-time settings shared by every method in a comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecContext {
    pub layout: ObsLayout,
    pub perturb_magnitude: f64,
    pub log_steps: bool,
}

/// Refines one retargeted chunk (raw action space) at noise level `r`.
///
/// `r = 0` returns the chunk bit-identically without touching the network;
/// `r = 1` discards it and samples from pure noise; intermediate levels
/// noise the normalized chunk to `s* = round(r S)` and run the strided
/// reverse plan from there.
pub fn refine_chunk(
    policy: &Policy,
    chunk: &[f64],
    obs_history: &[f64],
    r: f64,
    seed: u64,
) -> Result<Vec<f64>, RefineError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(RefineError::NoiseLevelOutOfRange(r));
    }
    if chunk.len() != policy.config.chunk_dim() {
        return Err(RefineError::ChunkMismatch {
            expected: policy.config.chunk_dim(),
            got: chunk.len(),
        });
    }
    if r == 0.0 {
        return Ok(chunk.to_vec());
    }
    if policy.config.parameterization == Parameterization::FlowVelocity {
        return Ok(policy::flow_refine_chunk(policy, obs_history, chunk, r, seed)?);
    }
    let s_max = policy.config.train_steps;
    if r == 1.0 {
        return Ok(policy::sample_chunk(policy, obs_history, seed, s_max, None)?);
    }
    let s_star = ((r * s_max as f64).round() as usize).clamp(1, s_max - 1);
    let chunk_norm = policy.action_stats.normalize(chunk);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let ab = policy.schedule().alpha_bar(s_star);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let noised: Vec<f64> = chunk_norm
        .iter()
        .map(|x| sa * x + sn * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(policy::sample_chunk(policy, obs_history, seed, s_star, Some(&noised))?)
}

/// Noise-level heuristic keyed on the base policy's probe success rate:
/// stay close to the demonstration when the policy is helpless, lean on the
/// policy once it shows signs of life.
pub fn choose_noise_level(base_policy_success_rate: f64) -> Result<f64, RefineError> {
    if !(0.0..=1.0).contains(&base_policy_success_rate) {
        return Err(RefineError::RateOutOfRange(base_policy_success_rate));
    }
    Ok(if base_policy_success_rate == 0.0 { 0.2 } else { 0.4 })
}

fn cycle_seed(episode_seed: u64, t: usize, r: f64) -> u64 {
    SeedMix::new("cycle").u64(episode_seed).u64(t as u64).f64_bits(r).finish()
}

fn perturb_seed(episode_seed: u64) -> u64 {
    SeedMix::new("perturb").u64(episode_seed).finish()
}

struct ObsHistory {
    rows: Vec<Vec<f64>>,
}

impl ObsHistory {
    fn new(first: Vec<f64>, depth: usize) -> ObsHistory {
        ObsHistory { rows: vec![first; depth] }
    }

    fn push(&mut self, obs: Vec<f64>) {
        self.rows.remove(0);
        self.rows.push(obs);
    }

    fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

fn failed_result(
    task: &TaskSpec,
    cfg: &RefineConfig,
    method: Method,
    state: WorldState,
    error: String,
) -> EpisodeResult {
    EpisodeResult {
        task_id: task.task_id,
        method,
        noise_level: cfg.noise_level,
        seed: cfg.seed,
        success: false,
        episode_len: 0,
        terminal: state,
        error: Some(error),
        steps: None,
    }
}

/// Runs one closed-loop episode against the perturbed scene.
///
/// The effector teleports to the first retargeted pose, then control cycles
/// index the demonstration by absolute timestep: slice the chunk, refine at
/// `cfg.noise_level`, execute the first `open_loop_horizon` actions, and
/// replan. The episode runs for exactly the demonstration length and
/// component failures are recorded as failed episodes with an error tag.
pub fn run_episode(
    task: &TaskSpec,
    policy: &Policy,
    demo: &HandDemo,
    retarget_cfg: &RetargetConfig,
    cfg: &RefineConfig,
    exec: &ExecContext,
) -> EpisodeResult {
    let method = Method::for_run(cfg.noise_level, policy.config.parameterization);
    if let Err(e) = cfg.validate(policy) {
        let state = simenv::reset(task, demo.seed);
        return failed_result(task, cfg, method, state, e.to_string());
    }
    let traj = match retarget::retarget_trajectory(demo, retarget_cfg) {
        Ok(t) => t,
        Err(e) => {
            let state = simenv::reset(task, demo.seed);
            return failed_result(task, cfg, method, state, e.to_string());
        }
    };
    let mut state =
        retarget::initial_state(task, &traj, exec.perturb_magnitude, perturb_seed(cfg.seed));
    let total = traj.len();
    let horizon = cfg.predict_horizon;
    let mut history =
        ObsHistory::new(simenv::observe(&state, &exec.layout, task.max_steps), policy.config.obs_history);
    let mut records: Vec<StepRecord> = Vec::new();
    let mut t = 0usize;
    while t < total {
        let chunk_raw = retarget::retargeted_action_chunk(&traj, t, horizon);
        let obs_flat = history.flat();
        let chunk = match refine_chunk(
            policy,
            &chunk_raw,
            &obs_flat,
            cfg.noise_level,
            cycle_seed(cfg.seed, t, cfg.noise_level),
        ) {
            Ok(c) => c,
            Err(e) => return failed_result(task, cfg, method, state, e.to_string()),
        };
        for slot in 0..cfg.open_loop_horizon {
            if t >= total {
                break;
            }
            let action = RobotAction::from_slice(&chunk[slot * 4..slot * 4 + 4]);
            state = simenv::step(&state, &action);
            let obs = simenv::observe(&state, &exec.layout, task.max_steps);
            if exec.log_steps {
                records.push(StepRecord::new(t, &state, &action, &obs));
            }
            history.push(obs);
            t += 1;
        }
    }
    let success = simenv::success(&state, task);
    EpisodeResult {
        task_id: task.task_id,
        method,
        noise_level: cfg.noise_level,
        seed: cfg.seed,
        success,
        episode_len: total,
        terminal: state,
        error: None,
        steps: if exec.log_steps { Some(records) } else { None },
    }
}

/// A pure policy rollout written as its own loop: every cycle samples a
/// chunk from noise, ignoring the demonstration except for the initial
/// effector pose and the episode length. `run_episode` at `r = 1` must
/// match this bit for bit.
pub fn base_policy_rollout(
    task: &TaskSpec,
    policy: &Policy,
    demo: &HandDemo,
    retarget_cfg: &RetargetConfig,
    cfg: &RefineConfig,
    exec: &ExecContext,
) -> Result<EpisodeResult, RefineError> {
    let traj = retarget::retarget_trajectory(demo, retarget_cfg)?;
    let mut state =
        retarget::initial_state(task, &traj, exec.perturb_magnitude, perturb_seed(cfg.seed));
    let total = traj.len();
    let mut history =
        ObsHistory::new(simenv::observe(&state, &exec.layout, task.max_steps), policy.config.obs_history);
    let s_max = policy.config.train_steps;
    let mut t = 0usize;
    while t < total {
        let obs_flat = history.flat();
        let chunk = match policy.config.parameterization {
            Parameterization::EpsPrediction => {
                policy::sample_chunk(policy, &obs_flat, cycle_seed(cfg.seed, t, 1.0), s_max, None)?
            }
            Parameterization::FlowVelocity => {
                let zeros = vec![0.0; policy.config.chunk_dim()];
                policy::flow_refine_chunk(
                    policy,
                    &obs_flat,
                    &zeros,
                    1.0,
                    cycle_seed(cfg.seed, t, 1.0),
                )?
            }
        };
        for slot in 0..cfg.open_loop_horizon {
            if t >= total {
                break;
            }
            let action = RobotAction::from_slice(&chunk[slot * 4..slot * 4 + 4]);
            state = simenv::step(&state, &action);
            history.push(simenv::observe(&state, &exec.layout, task.max_steps));
            t += 1;
        }
    }
    let success = simenv::success(&state, task);
    Ok(EpisodeResult {
        task_id: task.task_id,
        method: Method::BasePolicy,
        noise_level: 1.0,
        seed: cfg.seed,
        success,
        episode_len: total,
        terminal: state,
        error: None,
        steps: None,
    })
}
