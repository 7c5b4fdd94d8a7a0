//! Conditional diffusion policy over action chunks.
//!
//! Behavior cloning with noise-prediction: windows of (observation history,
//! action chunk) are normalized, the chunk is noised to a random schedule
//! step, and the denoiser learns to recover the injected noise conditioned
//! on the observations and a step embedding. Sampling runs a strided
//! deterministic reverse plan, optionally entered mid-schedule from a
//! provided noisy chunk. A rectified-flow parameterization of the same
//! network is available as an alternative: it learns a velocity field and
//! samples with fixed-step Euler integration.

use crate::demonstrator::EpisodeRecord;
use crate::diffmath::{self, DiffError, NoiseSchedule};
use crate::seeds::SeedMix;
use crate::tinynet::{self, adam_step, AdamState, Gradients, Mlp, NetError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sampling from an intermediate step requires an init chunk")]
    MissingInit,
    #[error("training diverged at iteration {iter}")]
    Divergence { iter: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint sidecar: {0}")]
    Sidecar(String),
}

/// What the denoiser network predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Predicts the injected Gaussian noise (DDPM-style).
    EpsPrediction,
    /// Predicts the rectified-flow velocity field.
    FlowVelocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Predicted action chunk length H.
    pub chunk_len: usize,
    /// Number of stacked past observations.
    pub obs_history: usize,
    /// Forward-process steps S.
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Denoiser evaluations for a full reverse pass.
    pub inference_steps: usize,
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub train_iters: usize,
    pub parameterization: Parameterization,
}

impl PolicyConfig {
    /// Benchmark defaults for a given observation dimension.
    pub fn for_obs_dim(obs_dim: usize) -> PolicyConfig {
        PolicyConfig {
            obs_dim,
            action_dim: 4,
            chunk_len: 10,
            obs_history: 2,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 20,
            hidden_widths: vec![256, 256, 256],
            embed_dim: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            train_iters: 8000,
            parameterization: Parameterization::EpsPrediction,
        }
    }

    pub fn chunk_dim(&self) -> usize {
        self.chunk_len * self.action_dim
    }

    pub fn history_dim(&self) -> usize {
        self.obs_history * self.obs_dim
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.chunk_len == 0 || self.obs_history == 0 || self.action_dim == 0 {
            return Err(PolicyError::InvalidConfig("zero chunk/history/action dims".into()));
        }
        if self.inference_steps == 0 || self.inference_steps > self.train_steps {
            return Err(PolicyError::InvalidConfig(
                "need 1 <= inference_steps <= train_steps".into(),
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(PolicyError::InvalidConfig("embed_dim must be even".into()));
        }
        Ok(())
    }
}

/// Per-dimension normalization statistics with a floored std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    /// Two-pass mean/std over `values` interpreted as rows of width `dim`.
    fn from_rows(values: &[f64], dim: usize) -> NormStats {
        let rows = values.len() / dim;
        let mut mean = vec![0.0; dim];
        for row in 0..rows {
            for d in 0..dim {
                mean[d] += values[row * dim + d];
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; dim];
        for row in 0..rows {
            for d in 0..dim {
                let r = values[row * dim + d] - mean[d];
                var[d] += r * r;
            }
        }
        let std = var.iter().map(|v| (v / rows as f64).sqrt().max(STD_FLOOR)).collect();
        NormStats { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes a flat vector whose layout repeats this stats' dimension.
    pub fn normalize(&self, values: &[f64]) -> Vec<f64> {
        let d = self.dim();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect()
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        let d = self.dim();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect()
    }
}

/// One training window: stacked observation history and the action chunk
/// starting at the same timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub obs_history: Vec<f64>,
    pub actions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub windows: Vec<Window>,
    pub action_stats: NormStats,
    pub obs_stats: NormStats,
    pub obs_dim: usize,
    pub action_dim: usize,
}

/// Slides a window over every episode timestep. Observation histories are
/// front-padded by repeating the first observation; chunks are end-padded
/// by repeating the final action.
pub fn build_dataset(
    episodes: &[EpisodeRecord],
    config: &PolicyConfig,
) -> Result<Dataset, PolicyError> {
    if episodes.is_empty() || episodes.iter().all(|e| e.observations.is_empty()) {
        return Err(PolicyError::EmptyDataset);
    }
    let obs_dim = config.obs_dim;
    let action_dim = config.action_dim;
    let mut windows = Vec::new();
    for ep in episodes {
        let len = ep.observations.len();
        if ep.actions.len() != len {
            return Err(PolicyError::DimensionMismatch { expected: len, got: ep.actions.len() });
        }
        for t in 0..len {
            if ep.observations[t].len() != obs_dim {
                return Err(PolicyError::DimensionMismatch {
                    expected: obs_dim,
                    got: ep.observations[t].len(),
                });
            }
            if ep.actions[t].len() != action_dim {
                return Err(PolicyError::DimensionMismatch {
                    expected: action_dim,
                    got: ep.actions[t].len(),
                });
            }
        }
        for t in 0..len {
            let mut obs_history = Vec::with_capacity(config.history_dim());
            for k in 0..config.obs_history {
                let idx = (t + k + 1).saturating_sub(config.obs_history).min(len - 1);
                obs_history.extend_from_slice(&ep.observations[idx]);
            }
            let mut actions = Vec::with_capacity(config.chunk_dim());
            for j in 0..config.chunk_len {
                let idx = (t + j).min(len - 1);
                actions.extend_from_slice(&ep.actions[idx]);
            }
            windows.push(Window { obs_history, actions });
        }
    }
    let all_actions: Vec<f64> = windows.iter().flat_map(|w| w.actions.iter().copied()).collect();
    let all_obs: Vec<f64> = windows.iter().flat_map(|w| w.obs_history.iter().copied()).collect();
    let action_stats = NormStats::from_rows(&all_actions, action_dim);
    let obs_stats = NormStats::from_rows(&all_obs, obs_dim);
    Ok(Dataset { windows, action_stats, obs_stats, obs_dim, action_dim })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Moving-average loss around iteration 100.
    pub loss_at_100: f64,
    /// Moving-average loss over the last 100 iterations.
    pub loss_final: f64,
}

/// The trained policy: denoiser network, schedule, and frozen statistics.
#[derive(Debug)]
pub struct Policy {
    net: Mlp,
    schedule: NoiseSchedule,
    pub config: PolicyConfig,
    pub action_stats: NormStats,
    pub obs_stats: NormStats,
    pub dataset_fingerprint: String,
    pub benchmark_fingerprint: Option<String>,
    pub train_report: Option<TrainReport>,
    eval_count: AtomicU64,
}

impl Clone for Policy {
    fn clone(&self) -> Self {
        Policy {
            net: self.net.clone(),
            schedule: self.schedule.clone(),
            config: self.config.clone(),
            action_stats: self.action_stats.clone(),
            obs_stats: self.obs_stats.clone(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            benchmark_fingerprint: self.benchmark_fingerprint.clone(),
            train_report: self.train_report,
            eval_count: AtomicU64::new(self.eval_count.load(Ordering::Relaxed)),
        }
    }
}

impl Policy {
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Total denoiser network evaluations since construction or the last
    /// reset. Shared across threads.
    pub fn denoiser_evals(&self) -> u64 {
        self.eval_count.load(Ordering::Relaxed)
    }

    pub fn reset_denoiser_evals(&self) {
        self.eval_count.store(0, Ordering::Relaxed);
    }

    /// One conditioned network evaluation; increments the eval counter.
    fn denoiser_eval(&self, chunk: &[f64], obs_norm: &[f64], time_pos: f64) -> Vec<f64> {
        self.eval_count.fetch_add(1, Ordering::Relaxed);
        let emb = tinynet::position_embedding(time_pos, self.config.embed_dim)
            .expect("embed_dim validated even");
        let mut input = Vec::with_capacity(chunk.len() + obs_norm.len() + emb.len());
        input.extend_from_slice(chunk);
        input.extend_from_slice(obs_norm);
        input.extend_from_slice(&emb);
        let (y, _) = self.net.forward(&input).expect("input dims fixed by construction");
        y
    }

    fn check_obs(&self, obs_history: &[f64]) -> Result<(), PolicyError> {
        if obs_history.len() != self.config.history_dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: self.config.history_dim(),
                got: obs_history.len(),
            });
        }
        Ok(())
    }
}

fn network_widths(config: &PolicyConfig) -> Vec<usize> {
    let input_dim = config.chunk_dim() + config.history_dim() + config.embed_dim;
    let mut widths = vec![input_dim];
    widths.extend_from_slice(&config.hidden_widths);
    widths.push(config.chunk_dim());
    widths
}

/// Gradient accumulation runs in this many deterministic chunks; per-sample
/// RNG streams are derived from (seed, iteration, slot) so the result does
/// not depend on thread scheduling.
const GRAD_CHUNKS: usize = 4;

struct ChunkGrad {
    grads: Gradients,
    loss_sum: f64,
}

fn train_sample(
    net: &Mlp,
    schedule: &NoiseSchedule,
    config: &PolicyConfig,
    norm_windows: &[(Vec<f64>, Vec<f64>)],
    seed: u64,
    iter: usize,
    slot: usize,
) -> (Gradients, f64) {
    let mut rng = ChaCha12Rng::seed_from_u64(
        SeedMix::new("train-sample").u64(seed).u64(iter as u64).u64(slot as u64).finish(),
    );
    let widx = rng.random_range(0..norm_windows.len());
    let (obs_norm, x0) = &norm_windows[widx];
    let dim = x0.len();
    let (input, target): (Vec<f64>, Vec<f64>) = match config.parameterization {
        Parameterization::EpsPrediction => {
            let s = rng.random_range(1..=config.train_steps);
            let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let ab = schedule.alpha_bar(s);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let x_s: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| sa * x + sn * e).collect();
            let emb = tinynet::position_embedding(s as f64, config.embed_dim).unwrap();
            let mut input = Vec::with_capacity(dim + obs_norm.len() + emb.len());
            input.extend_from_slice(&x_s);
            input.extend_from_slice(obs_norm);
            input.extend_from_slice(&emb);
            (input, eps)
        }
        Parameterization::FlowVelocity => {
            let tau: f64 = rng.random::<f64>();
            let noise: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let x_tau: Vec<f64> =
                x0.iter().zip(&noise).map(|(x1, x0n)| tau * x1 + (1.0 - tau) * x0n).collect();
            let velocity: Vec<f64> = x0.iter().zip(&noise).map(|(x1, x0n)| x1 - x0n).collect();
            let emb =
                tinynet::position_embedding(tau * config.train_steps as f64, config.embed_dim)
                    .unwrap();
            let mut input = Vec::with_capacity(dim + obs_norm.len() + emb.len());
            input.extend_from_slice(&x_tau);
            input.extend_from_slice(obs_norm);
            input.extend_from_slice(&emb);
            (input, velocity)
        }
    };
    let (y, cache) = net.forward(&input).expect("training input dims fixed");
    let mut dl_dy = vec![0.0; dim];
    let mut loss = 0.0;
    for i in 0..dim {
        let r = y[i] - target[i];
        loss += r * r;
        dl_dy[i] = 2.0 * r / dim as f64;
    }
    loss /= dim as f64;
    let grads = net.backward(&cache, &dl_dy).expect("cache from matching forward");
    (grads, loss)
}

/// Trains a policy on the dataset with the noise-prediction (or
/// rectified-flow) objective, deterministically per seed.
pub fn train_policy(
    dataset: &Dataset,
    config: &PolicyConfig,
    seed: u64,
) -> Result<Policy, PolicyError> {
    config.validate()?;
    if dataset.windows.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    if dataset.obs_dim != config.obs_dim || dataset.action_dim != config.action_dim {
        return Err(PolicyError::DimensionMismatch {
            expected: config.obs_dim,
            got: dataset.obs_dim,
        });
    }
    let schedule = NoiseSchedule::linear(config.train_steps, config.beta_start, config.beta_end)?;
    let mut net = Mlp::new(&network_widths(config), SeedMix::new("net-init").u64(seed).finish())?;
    let mut adam = AdamState::new(&net, config.lr, config.beta1, config.beta2, config.adam_eps);

    let norm_windows: Vec<(Vec<f64>, Vec<f64>)> = dataset
        .windows
        .iter()
        .map(|w| {
            (
                dataset.obs_stats.normalize(&w.obs_history),
                dataset.action_stats.normalize(&w.actions),
            )
        })
        .collect();

    let batch = config.batch_size.max(1);
    let per_chunk = batch.div_ceil(GRAD_CHUNKS);
    let mut losses = Vec::with_capacity(config.train_iters);
    for iter in 0..config.train_iters {
        // Step-decayed learning rate sharpens the conditional fit late in
        // training.
        let progress = iter as f64 / config.train_iters.max(1) as f64;
        adam.lr = config.lr
            * if progress < 0.5 {
                1.0
            } else if progress < 0.8 {
                0.3
            } else {
                0.1
            };
        let chunk_results: Vec<ChunkGrad> = (0..GRAD_CHUNKS)
            .into_par_iter()
            .map(|c| {
                let lo = c * per_chunk;
                let hi = ((c + 1) * per_chunk).min(batch);
                let mut acc = Gradients::zeros_like(&net);
                let mut loss_sum = 0.0;
                for slot in lo..hi {
                    let (g, loss) =
                        train_sample(&net, &schedule, config, &norm_windows, seed, iter, slot);
                    acc.add_assign(&g);
                    loss_sum += loss;
                }
                ChunkGrad { grads: acc, loss_sum }
            })
            .collect();
        let mut total = Gradients::zeros_like(&net);
        let mut loss_sum = 0.0;
        for part in &chunk_results {
            total.add_assign(&part.grads);
            loss_sum += part.loss_sum;
        }
        total.scale(1.0 / batch as f64);
        let loss = loss_sum / batch as f64;
        if !loss.is_finite() {
            return Err(PolicyError::Divergence { iter });
        }
        losses.push(loss);
        adam_step(&mut net, &total, &mut adam)?;
    }

    let window_mean = |center_hi: usize| {
        let hi = center_hi.min(losses.len());
        let lo = hi.saturating_sub(100);
        if hi == lo {
            f64::NAN
        } else {
            losses[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        }
    };
    let train_report =
        Some(TrainReport { loss_at_100: window_mean(100), loss_final: window_mean(losses.len()) });

    Ok(Policy {
        net,
        schedule,
        config: config.clone(),
        action_stats: dataset.action_stats.clone(),
        obs_stats: dataset.obs_stats.clone(),
        dataset_fingerprint: String::new(),
        benchmark_fingerprint: None,
        train_report,
        eval_count: AtomicU64::new(0),
    })
}

/// Runs a strided deterministic reverse plan over `x` (normalized space),
/// calling `predict` for the noise estimate at each visited step.
fn run_ddim_plan(
    schedule: &NoiseSchedule,
    plan: &[usize],
    mut x: Vec<f64>,
    mut predict: impl FnMut(&[f64], usize) -> Vec<f64>,
) -> Result<Vec<f64>, DiffError> {
    for (i, &s_from) in plan.iter().enumerate() {
        let s_to = if i + 1 < plan.len() { plan[i + 1] } else { 0 };
        let eps = predict(&x, s_from);
        x = diffmath::ddim_reverse_step(&eps, &x, s_from, s_to, schedule)?;
    }
    Ok(x)
}

/// Samples an action chunk conditioned on the observation history.
///
/// With `start == train_steps` and no `init`, sampling begins from seeded
/// standard normal noise (a full policy sample). With `start <
/// train_steps`, `init` must hold the noised chunk at that step in
/// normalized action space; the stride plan then spends a proportional
/// share of the inference budget. The result is denormalized.
pub fn sample_chunk(
    policy: &Policy,
    obs_history: &[f64],
    seed: u64,
    start: usize,
    init: Option<&[f64]>,
) -> Result<Vec<f64>, PolicyError> {
    policy.check_obs(obs_history)?;
    let cfg = &policy.config;
    let s_max = cfg.train_steps;
    if start == 0 || start > s_max {
        return Err(PolicyError::InvalidConfig(format!("start step {start} out of range")));
    }
    if start < s_max && init.is_none() {
        return Err(PolicyError::MissingInit);
    }
    if let Some(init) = init {
        if init.len() != cfg.chunk_dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: cfg.chunk_dim(),
                got: init.len(),
            });
        }
    }
    let obs_norm = policy.obs_stats.normalize(obs_history);
    match cfg.parameterization {
        Parameterization::EpsPrediction => {
            let x = match init {
                Some(init) => init.to_vec(),
                None => {
                    let mut rng = ChaCha12Rng::seed_from_u64(seed);
                    (0..cfg.chunk_dim()).map(|_| rng.sample(StandardNormal)).collect()
                }
            };
            let plan = diffmath::make_stride_plan(s_max, cfg.inference_steps, start)?;
            let out = run_ddim_plan(&policy.schedule, &plan, x, |x, s| {
                policy.denoiser_eval(x, &obs_norm, s as f64)
            })?;
            Ok(policy.action_stats.denormalize(&out))
        }
        Parameterization::FlowVelocity => {
            // Full flow sample; partial entries go through
            // `flow_refine_chunk`.
            if start != s_max {
                return Err(PolicyError::InvalidConfig(
                    "flow policies enter mid-trajectory via flow_refine_chunk".into(),
                ));
            }
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let noise: Vec<f64> =
                (0..cfg.chunk_dim()).map(|_| rng.sample(StandardNormal)).collect();
            let out = flow_integrate(policy, &obs_norm, noise, 0.0, 1.0);
            Ok(policy.action_stats.denormalize(&out))
        }
    }
}

/// Euler integration of the learned velocity field from `tau0` over `span`,
/// with a step budget proportional to the span.
fn flow_integrate(
    policy: &Policy,
    obs_norm: &[f64],
    mut x: Vec<f64>,
    tau0: f64,
    span: f64,
) -> Vec<f64> {
    let cfg = &policy.config;
    let n = ((cfg.inference_steps as f64 * span).round() as usize).max(1);
    let dt = span / n as f64;
    for k in 0..n {
        let tau = tau0 + k as f64 * dt;
        let v = policy.denoiser_eval(&x, obs_norm, tau * cfg.train_steps as f64);
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
    }
    x
}

/// Rectified-flow refinement: re-interpolates the chunk toward noise at
/// time `1 - t_start` and integrates the velocity field back to the data
/// end of the trajectory. `t_start = 0` returns the chunk unchanged;
/// `t_start = 1` is a pure flow sample.
pub fn flow_refine_chunk(
    policy: &Policy,
    obs_history: &[f64],
    init_chunk: &[f64],
    t_start: f64,
    seed: u64,
) -> Result<Vec<f64>, PolicyError> {
    policy.check_obs(obs_history)?;
    let cfg = &policy.config;
    if cfg.parameterization != Parameterization::FlowVelocity {
        return Err(PolicyError::InvalidConfig("flow refinement needs a flow policy".into()));
    }
    if init_chunk.len() != cfg.chunk_dim() {
        return Err(PolicyError::DimensionMismatch {
            expected: cfg.chunk_dim(),
            got: init_chunk.len(),
        });
    }
    if !(0.0..=1.0).contains(&t_start) {
        return Err(PolicyError::InvalidConfig(format!("t_start {t_start} outside [0, 1]")));
    }
    if t_start == 0.0 {
        return Ok(init_chunk.to_vec());
    }
    let obs_norm = policy.obs_stats.normalize(obs_history);
    let tau0 = 1.0 - t_start;
    let init_norm = policy.action_stats.normalize(init_chunk);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x: Vec<f64> = init_norm
        .iter()
        .map(|v| {
            let n: f64 = rng.sample(StandardNormal);
            tau0 * v + (1.0 - tau0) * n
        })
        .collect();
    let out = flow_integrate(policy, &obs_norm, x, tau0, t_start);
    Ok(policy.action_stats.denormalize(&out))
}

// --- Checkpointing ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    config: PolicyConfig,
    dataset_fingerprint: String,
    benchmark_fingerprint: Option<String>,
    action_mean: Vec<f64>,
    action_std: Vec<f64>,
    obs_mean: Vec<f64>,
    obs_std: Vec<f64>,
    train_report: Option<TrainReport>,
}

impl Policy {
    /// Saves `<stem>.net` (binary weights) and `<stem>.toml` (config,
    /// schedule parameters, normalization stats, fingerprints).
    pub fn save(&self, stem: &Path) -> Result<(), PolicyError> {
        self.net.save(&stem.with_extension("net"))?;
        let sidecar = Sidecar {
            config: self.config.clone(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            benchmark_fingerprint: self.benchmark_fingerprint.clone(),
            action_mean: self.action_stats.mean.clone(),
            action_std: self.action_stats.std.clone(),
            obs_mean: self.obs_stats.mean.clone(),
            obs_std: self.obs_stats.std.clone(),
            train_report: self.train_report,
        };
        let text = toml::to_string(&sidecar).map_err(|e| PolicyError::Sidecar(e.to_string()))?;
        std::fs::write(stem.with_extension("toml"), text)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Policy, PolicyError> {
        let net = Mlp::load(&stem.with_extension("net"))?;
        let text = std::fs::read_to_string(stem.with_extension("toml"))?;
        let sidecar: Sidecar =
            toml::from_str(&text).map_err(|e| PolicyError::Sidecar(e.to_string()))?;
        sidecar.config.validate()?;
        if net.widths() != network_widths(&sidecar.config).as_slice() {
            return Err(PolicyError::Sidecar("network widths do not match config".into()));
        }
        let schedule = NoiseSchedule::linear(
            sidecar.config.train_steps,
            sidecar.config.beta_start,
            sidecar.config.beta_end,
        )?;
        Ok(Policy {
            net,
            schedule,
            action_stats: NormStats { mean: sidecar.action_mean, std: sidecar.action_std },
            obs_stats: NormStats { mean: sidecar.obs_mean, std: sidecar.obs_std },
            config: sidecar.config,
            dataset_fingerprint: sidecar.dataset_fingerprint,
            benchmark_fingerprint: sidecar.benchmark_fingerprint,
            train_report: sidecar.train_report,
            eval_count: AtomicU64::new(0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode_of(obs: Vec<f64>, actions: Vec<f64>) -> EpisodeRecord {
        EpisodeRecord {
            task_id: 0,
            observations: obs.iter().map(|&o| vec![o]).collect(),
            actions: actions.iter().map(|&a| vec![a]).collect(),
        }
    }

    fn small_config() -> PolicyConfig {
        PolicyConfig {
            obs_dim: 1,
            action_dim: 1,
            chunk_len: 1,
            obs_history: 1,
            hidden_widths: vec![32, 32],
            embed_dim: 16,
            batch_size: 32,
            train_iters: 400,
            ..PolicyConfig::for_obs_dim(1)
        }
    }

    #[test]
    fn window_count_matches_episode_length() {
        let cfg = PolicyConfig {
            chunk_len: 10,
            obs_history: 2,
            ..small_config()
        };
        let ep = episode_of((0..20).map(|i| i as f64).collect(), vec![1.0; 20]);
        let ds = build_dataset(&[ep], &cfg).unwrap();
        assert_eq!(ds.windows.len(), 20);
        // End padding repeats the final action.
        let last = &ds.windows[19].actions;
        assert!(last.iter().all(|&a| a == 1.0));
        // Front padding repeats the first observation.
        assert_eq!(ds.windows[0].obs_history, vec![0.0, 0.0]);
        assert_eq!(ds.windows[5].obs_history, vec![4.0, 5.0]);
    }

    #[test]
    fn normalized_actions_have_zero_mean_unit_std() {
        let cfg = small_config();
        let ep = episode_of(
            (0..50).map(|i| i as f64 * 0.1).collect(),
            (0..50).map(|i| (i as f64).sin()).collect(),
        );
        let ds = build_dataset(&[ep], &cfg).unwrap();
        let normalized: Vec<f64> = ds
            .windows
            .iter()
            .flat_map(|w| ds.action_stats.normalize(&w.actions))
            .collect();
        let n = normalized.len() as f64;
        let mean: f64 = normalized.iter().sum::<f64>() / n;
        let var: f64 = normalized.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-9, "std {}", var.sqrt());
    }

    #[test]
    fn window_round_trips_raw_actions() {
        let cfg = PolicyConfig { chunk_len: 4, obs_history: 2, ..small_config() };
        let actions: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).cos()).collect();
        let ep = episode_of((0..30).map(|i| i as f64).collect(), actions.clone());
        let ds = build_dataset(&[ep], &cfg).unwrap();
        let t = 7;
        let w = &ds.windows[t];
        let rt = ds.action_stats.denormalize(&ds.action_stats.normalize(&w.actions));
        for (a, b) in rt.iter().zip(&w.actions) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(w.actions, actions[t..t + 4].to_vec());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = small_config();
        assert!(matches!(build_dataset(&[], &cfg), Err(PolicyError::EmptyDataset)));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = PolicyConfig { train_iters: 30, ..small_config() };
        let ep = episode_of(
            (0..40).map(|i| i as f64 * 0.05).collect(),
            (0..40).map(|i| (i as f64 * 0.3).sin()).collect(),
        );
        let ds = build_dataset(&[ep], &cfg).unwrap();
        let a = train_policy(&ds, &cfg, 5).unwrap();
        let b = train_policy(&ds, &cfg, 5).unwrap();
        assert_eq!(a.net, b.net);
        let obs = [0.5];
        let sa = sample_chunk(&a, &obs, 9, cfg.train_steps, None).unwrap();
        let sb = sample_chunk(&b, &obs, 9, cfg.train_steps, None).unwrap();
        assert_eq!(sa, sb);
        let c = train_policy(&ds, &cfg, 6).unwrap();
        assert_ne!(a.net, c.net);
    }

    #[test]
    fn perfect_denoiser_round_trip_through_the_plan() {
        // A stub predictor returning the injected noise recovers the clean
        // chunk through the full strided plan.
        let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x0 = vec![0.3, -0.9, 1.4, 0.05];
        let eps = vec![0.7, -1.1, 0.2, 0.9];
        for start in [250usize, 500, 1000] {
            let x_s = diffmath::q_sample(&x0, start, &schedule, &eps).unwrap();
            let plan = diffmath::make_stride_plan(1000, 20, start).unwrap();
            let out = run_ddim_plan(&schedule, &plan, x_s, |_, _| eps.clone()).unwrap();
            for (a, b) in out.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sampling_without_init_requires_full_start() {
        let cfg = PolicyConfig { train_iters: 5, ..small_config() };
        let ep = episode_of(vec![0.0; 10], vec![0.0; 10]);
        let ds = build_dataset(&[ep], &cfg).unwrap();
        let policy = train_policy(&ds, &cfg, 0).unwrap();
        let obs = [0.0];
        assert!(matches!(
            sample_chunk(&policy, &obs, 0, 500, None),
            Err(PolicyError::MissingInit)
        ));
        assert!(sample_chunk(&policy, &obs, 0, cfg.train_steps, None).is_ok());
        let init = vec![0.0; cfg.chunk_dim()];
        assert!(sample_chunk(&policy, &obs, 0, 500, Some(&init)).is_ok());
    }

    #[test]
    fn denoiser_eval_counter_tracks_plan_length() {
        let cfg = PolicyConfig { train_iters: 5, ..small_config() };
        let ep = episode_of(vec![0.0; 10], vec![0.0; 10]);
        let ds = build_dataset(&[ep], &cfg).unwrap();
        let policy = train_policy(&ds, &cfg, 0).unwrap();
        let obs = [0.0];
        policy.reset_denoiser_evals();
        sample_chunk(&policy, &obs, 0, cfg.train_steps, None).unwrap();
        assert_eq!(policy.denoiser_evals(), cfg.inference_steps as u64);
        policy.reset_denoiser_evals();
        let init = vec![0.0; cfg.chunk_dim()];
        sample_chunk(&policy, &obs, 0, 200, Some(&init)).unwrap();
        assert_eq!(policy.denoiser_evals(), 4);
    }

    #[test]
    fn zero_variance_dataset_collapses_samples() {
        let cfg = PolicyConfig { train_iters: 600, ..small_config() };
        let ep = episode_of(vec![0.3; 60], vec![0.7; 60]);
        let ds = build_dataset(&[ep], &cfg).unwrap();
        let policy = train_policy(&ds, &cfg, 1).unwrap();
        for seed in 0..20 {
            let out = sample_chunk(&policy, &[0.3], seed, cfg.train_steps, None).unwrap();
            assert!((out[0] - 0.7).abs() < 0.05, "sample {} far from 0.7", out[0]);
        }
    }

    #[test]
    fn training_halves_the_early_loss() {
        let cfg = PolicyConfig { train_iters: 500, ..small_config() };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let obs: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..2.0)).collect();
        let actions: Vec<f64> =
            obs.iter().map(|o| 2.0 * o + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let ds = build_dataset(&[episode_of(obs, actions)], &cfg).unwrap();
        let policy = train_policy(&ds, &cfg, 2).unwrap();
        let report = policy.train_report.unwrap();
        assert!(
            report.loss_final < 0.5 * report.loss_at_100,
            "loss {} -> {}",
            report.loss_at_100,
            report.loss_final
        );
    }

    #[test]
    fn one_dimensional_conditional_gaussian_oracle() {
        // Actions ~ N(2 * obs, 0.1^2): sampled actions at obs = 1.0 should
        // match the analytic conditional mean and spread.
        let cfg =
            PolicyConfig { train_iters: 2500, hidden_widths: vec![64, 64], ..small_config() };
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let episodes: Vec<EpisodeRecord> = (0..40)
            .map(|_| {
                let obs: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..2.0)).collect();
                let actions: Vec<f64> = obs
                    .iter()
                    .map(|o| 2.0 * o + 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                episode_of(obs, actions)
            })
            .collect();
        let ds = build_dataset(&episodes, &cfg).unwrap();
        let policy = train_policy(&ds, &cfg, 7).unwrap();
        let samples: Vec<f64> = (0..1000)
            .map(|seed| sample_chunk(&policy, &[1.0], seed, cfg.train_steps, None).unwrap()[0])
            .collect();
        let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
        let var: f64 =
            samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / samples.len() as f64;
        let std = var.sqrt();
        assert!((mean - 2.0).abs() < 0.1, "conditional mean {mean}");
        assert!((std - 0.1).abs() < 0.05, "conditional std {std}");
    }

    #[test]
    fn flow_policy_matches_oracle_and_respects_t_start_limits() {
        let cfg = PolicyConfig {
            train_iters: 2500,
            hidden_widths: vec![64, 64],
            parameterization: Parameterization::FlowVelocity,
            ..small_config()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let episodes: Vec<EpisodeRecord> = (0..40)
            .map(|_| {
                let obs: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..2.0)).collect();
                let actions: Vec<f64> = obs
                    .iter()
                    .map(|o| 2.0 * o + 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                episode_of(obs, actions)
            })
            .collect();
        let ds = build_dataset(&episodes, &cfg).unwrap();
        let policy = train_policy(&ds, &cfg, 3).unwrap();
        // t_start = 0 returns the init unchanged.
        let init = [2.6];
        let same = flow_refine_chunk(&policy, &[1.0], &init, 0.0, 0).unwrap();
        assert_eq!(same, init.to_vec());
        // Pure flow samples land near the analytic conditional mean.
        let samples: Vec<f64> = (0..500)
            .map(|seed| flow_refine_chunk(&policy, &[1.0], &init, 1.0, seed).unwrap()[0])
            .collect();
        let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!((mean - 2.0).abs() < 0.15, "flow mean {mean}");
        // Refinement pulls away from the init monotonically in t_start
        // (statistically).
        let mean_dist = |t: f64| {
            let d: f64 = (0..500)
                .map(|seed| {
                    let out = flow_refine_chunk(&policy, &[1.0], &init, t, seed).unwrap()[0];
                    (out - init[0]).abs()
                })
                .sum::<f64>();
            d / 500.0
        };
        let d0 = mean_dist(0.2);
        let d1 = mean_dist(0.6);
        let d2 = mean_dist(1.0);
        assert!(d0 <= d1 * 1.05 && d1 <= d2 * 1.05, "distances {d0} {d1} {d2}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_policy() {
        let cfg = PolicyConfig { train_iters: 20, ..small_config() };
        let ep = episode_of(
            (0..30).map(|i| i as f64 * 0.1).collect(),
            (0..30).map(|i| (i as f64).cos()).collect(),
        );
        let ds = build_dataset(&[ep], &cfg).unwrap();
        let mut policy = train_policy(&ds, &cfg, 4).unwrap();
        policy.dataset_fingerprint = "abc123".into();
        policy.benchmark_fingerprint = Some("bench456".into());
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("checkpoint");
        policy.save(&stem).unwrap();
        let loaded = Policy::load(&stem).unwrap();
        assert_eq!(policy.net, loaded.net);
        assert_eq!(policy.config, loaded.config);
        assert_eq!(policy.action_stats, loaded.action_stats);
        assert_eq!(policy.obs_stats, loaded.obs_stats);
        assert_eq!(loaded.dataset_fingerprint, "abc123");
        assert_eq!(loaded.benchmark_fingerprint.as_deref(), Some("bench456"));
        // Identical samples after reload.
        let a = sample_chunk(&policy, &[0.4], 2, cfg.train_steps, None).unwrap();
        let b = sample_chunk(&loaded, &[0.4], 2, cfg.train_steps, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported_or_training_stays_finite() {
        let cfg = PolicyConfig { lr: 1e18, train_iters: 200, ..small_config() };
        let ep = episode_of(
            (0..30).map(|i| i as f64).collect(),
            (0..30).map(|i| i as f64 * 3.0).collect(),
        );
        let ds = build_dataset(&[ep], &cfg).unwrap();
        match train_policy(&ds, &cfg, 0) {
            Err(PolicyError::Divergence { .. }) => {}
            Ok(policy) => {
                assert!(policy.train_report.unwrap().loss_final.is_finite());
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
