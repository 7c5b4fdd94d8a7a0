//! Scripted expert data in two embodiments: robot-expert episodes used as the
//! policy training set, and "human hand" keypoint demonstrations with a
//! deliberate embodiment gap layered on top of the same expert.

use crate::geom::Vec3;
use crate::seeds::SeedMix;
use crate::simenv::{
    self, ObsLayout, RobotAction, TaskFamily, TaskSpec, WorldState, MAX_STEP_NORM,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Keypoint order within a hand pose.
pub const KP_WRIST: usize = 0;
pub const KP_THUMB: usize = 1;
pub const KP_INDEX: usize = 2;
pub const KP_MIDDLE: usize = 3;
pub const KP_RING: usize = 4;
pub const NUM_KEYPOINTS: usize = 5;

/// Cruise speed range of the scripted expert, kept under the action clamp
/// so demo playback deltas (including jitter) stay executable. Speed and
/// start time vary per episode so the policy cannot treat the step phase as
/// a script index.
const EXPERT_SPEED_MIN: f64 = 0.016;
const EXPERT_SPEED_MAX: f64 = 0.024;
const EXPERT_MAX_START_HOLD: usize = 4;
/// Hand width in meters as a function of gripper aperture: closed hands
/// still keep a thumb-finger gap so the keypoint frame never degenerates.
const HAND_WIDTH_CLOSED: f64 = 0.01;
const HAND_WIDTH_RANGE: f64 = 0.07;
/// Lateral offset of the synthetic index fingertip. Large enough that a
/// thumb-to-index distance reads "open" even when the hand is closed, which
/// is what makes the thumb+index retargeting mode strictly weaker.
const INDEX_SPREAD: f64 = 0.06;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("scripted plan failed on task {task} (seed {seed})")]
    GenerationFailure { task: String, seed: u64 },
    #[error("demo invariant violated: {0}")]
    InvalidDemo(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("file format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub keypoints: [Vec3; NUM_KEYPOINTS],
}

impl HandPose {
    pub fn wrist(&self) -> Vec3 {
        self.keypoints[KP_WRIST]
    }

    pub fn thumb(&self) -> Vec3 {
        self.keypoints[KP_THUMB]
    }

    /// Centroid of the non-thumb fingertips.
    pub fn finger_centroid(&self) -> Vec3 {
        (self.keypoints[KP_INDEX] + self.keypoints[KP_MIDDLE] + self.keypoints[KP_RING])
            * (1.0 / 3.0)
    }
}

/// Systematic demonstrator-vs-robot mismatch injected into synthetic demos.
/// `aperture_scale` is a multiplier on the hand width (1.0 is faithful).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbodimentGap {
    pub wrist_offset: Vec3,
    pub aperture_scale: f64,
    pub keypoint_jitter: f64,
    pub grasp_lag: usize,
}

impl Default for EmbodimentGap {
    fn default() -> Self {
        EmbodimentGap {
            wrist_offset: Vec3::new(0.02, -0.015, 0.01),
            aperture_scale: 1.3,
            keypoint_jitter: 0.003,
            grasp_lag: 2,
        }
    }
}

impl EmbodimentGap {
    /// No mismatch at all: zero offset and jitter, faithful width, no lag.
    pub fn zero() -> Self {
        EmbodimentGap {
            wrist_offset: Vec3::ZERO,
            aperture_scale: 1.0,
            keypoint_jitter: 0.0,
            grasp_lag: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandDemo {
    pub task_id: usize,
    pub poses: Vec<HandPose>,
    /// Seed of the scene the demonstration was recorded in.
    pub seed: u64,
    pub gap: EmbodimentGap,
}

impl HandDemo {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn validate(&self) -> Result<(), DemoError> {
        if self.poses.len() < 2 {
            return Err(DemoError::InvalidDemo("demo shorter than 2 poses".into()));
        }
        for (t, pose) in self.poses.iter().enumerate() {
            for kp in &pose.keypoints {
                if !kp.is_finite() {
                    return Err(DemoError::InvalidDemo(format!("non-finite keypoint at {t}")));
                }
            }
        }
        for w in self.poses.windows(2) {
            let d = w[1].wrist().dist(w[0].wrist());
            if d > MAX_STEP_NORM + 1e-9 {
                return Err(DemoError::InvalidDemo(format!("wrist speed {d} over limit")));
            }
        }
        Ok(())
    }
}

/// One expert rollout: per-step observations and executed actions, plus the
/// effector/aperture traces consumed by demo synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEpisode {
    pub task_id: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<[f64; 4]>,
    pub effector_trace: Vec<Vec3>,
    pub apertures: Vec<f64>,
    pub terminal: WorldState,
    pub success: bool,
}

/// Flat training record: what the dataset file stores per episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub task_id: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl ExpertEpisode {
    pub fn record(&self) -> EpisodeRecord {
        EpisodeRecord {
            task_id: self.task_id,
            observations: self.observations.clone(),
            actions: self.actions.iter().map(|a| a.to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    GoStaging,
    Descend,
    Settle,
    Grasp,
    Transport,
    Lower,
    Release,
    Push,
    Retreat,
    Done,
}

struct Controller {
    phase: Phase,
    hold: usize,
    start_hold: usize,
    speed: f64,
}

impl Controller {
    fn new(family: TaskFamily, seed: u64) -> Controller {
        let mut rng =
            ChaCha12Rng::seed_from_u64(SeedMix::new("expert-style").u64(seed).finish());
        let speed = rng.random_range(EXPERT_SPEED_MIN..=EXPERT_SPEED_MAX);
        let start_hold = rng.random_range(0..=EXPERT_MAX_START_HOLD);
        let phase = match family {
            TaskFamily::Reach => Phase::Transport,
            _ => Phase::GoStaging,
        };
        Controller { phase, hold: 0, start_hold, speed }
    }

    fn push_dir(task: &TaskSpec, state: &WorldState) -> Vec3 {
        match task.family {
            TaskFamily::SlideClose => Vec3::new(task.slide_dir, 0.0, 0.0),
            _ => {
                let obj = state.objects[0].center;
                let to_goal =
                    Vec3::new(state.goal.center.x - obj.x, state.goal.center.y - obj.y, 0.0);
                to_goal.normalized(1e-9).unwrap_or(Vec3::new(1.0, 0.0, 0.0))
            }
        }
    }

    /// Next action given the current world state; advances the internal
    /// phase machine.
    fn act(&mut self, task: &TaskSpec, state: &WorldState) -> RobotAction {
        if self.start_hold > 0 {
            self.start_hold -= 1;
            return RobotAction::hold();
        }
        let p = state.effector;
        let obj = state.objects[0];
        let goal = state.goal;
        let speed = self.speed;
        let move_to = |target: Vec3| (target - p).clamp_norm(speed);
        let arrived = |target: Vec3, tol: f64| p.dist(target) < tol;

        match task.family {
            TaskFamily::Reach => {
                let target = goal.center;
                if arrived(target, 0.004) {
                    self.phase = Phase::Done;
                }
                RobotAction { delta: move_to(target), gripper: 1.0 }
            }
            TaskFamily::PickLift | TaskFamily::PickPlace => match self.phase {
                Phase::GoStaging => {
                    let target = Vec3::new(obj.center.x, obj.center.y, obj.center.z + 0.06);
                    if arrived(target, 0.004) {
                        self.phase = Phase::Descend;
                    }
                    RobotAction { delta: move_to(target), gripper: 1.0 }
                }
                Phase::Descend => {
                    let target = Vec3::new(obj.center.x, obj.center.y, obj.center.z + 0.005);
                    if arrived(target, 0.002) {
                        self.phase = Phase::Settle;
                        self.hold = 2;
                    }
                    RobotAction { delta: move_to(target), gripper: 1.0 }
                }
                Phase::Settle => {
                    if self.hold > 0 {
                        self.hold -= 1;
                    } else {
                        self.phase = Phase::Grasp;
                        self.hold = 4;
                    }
                    RobotAction { delta: Vec3::ZERO, gripper: 1.0 }
                }
                Phase::Grasp => {
                    if self.hold > 0 {
                        self.hold -= 1;
                    } else {
                        self.phase = Phase::Transport;
                    }
                    RobotAction { delta: Vec3::ZERO, gripper: 0.0 }
                }
                Phase::Transport => {
                    if task.family == TaskFamily::PickLift {
                        let target = Vec3::new(goal.center.x, goal.center.y, 0.2);
                        if arrived(target, 0.005) {
                            self.phase = Phase::Done;
                        }
                        RobotAction { delta: move_to(target), gripper: 0.0 }
                    } else {
                        let target = Vec3::new(goal.center.x, goal.center.y, 0.12);
                        if arrived(target, 0.004) {
                            self.phase = Phase::Lower;
                        }
                        RobotAction { delta: move_to(target), gripper: 0.0 }
                    }
                }
                Phase::Lower => {
                    let target = Vec3::new(goal.center.x, goal.center.y, obj.radius + 0.005);
                    if arrived(target, 0.002) {
                        self.phase = Phase::Release;
                        self.hold = 3;
                    }
                    RobotAction { delta: move_to(target), gripper: 0.0 }
                }
                Phase::Release => {
                    if self.hold > 0 {
                        self.hold -= 1;
                    } else {
                        self.phase = Phase::Retreat;
                    }
                    RobotAction { delta: Vec3::ZERO, gripper: 1.0 }
                }
                Phase::Retreat => {
                    let target = Vec3::new(goal.center.x, goal.center.y, 0.1);
                    if arrived(target, 0.005) {
                        self.phase = Phase::Done;
                    }
                    RobotAction { delta: move_to(target), gripper: 1.0 }
                }
                Phase::Done => RobotAction {
                    delta: Vec3::ZERO,
                    gripper: if task.family == TaskFamily::PickLift { 0.0 } else { 1.0 },
                },
                _ => RobotAction::hold(),
            },
            TaskFamily::PushToGoal | TaskFamily::SlideClose => {
                let dir = Controller::push_dir(task, state);
                let done = match task.family {
                    TaskFamily::SlideClose => {
                        task.slide_dir * (obj.center.x - goal.center.x) > 0.012
                    }
                    _ => obj.center.xy_dist(goal.center) <= goal.radius * 0.5,
                };
                match self.phase {
                    Phase::GoStaging => {
                        let staging = Vec3::new(
                            obj.center.x - dir.x * 0.06,
                            obj.center.y - dir.y * 0.06,
                            0.07,
                        );
                        if arrived(staging, 0.005) {
                            self.phase = Phase::Descend;
                        }
                        RobotAction { delta: move_to(staging), gripper: 1.0 }
                    }
                    Phase::Descend => {
                        let target = Vec3::new(
                            obj.center.x - dir.x * 0.06,
                            obj.center.y - dir.y * 0.06,
                            obj.center.z,
                        );
                        if (p.z - obj.center.z).abs() < 0.003 {
                            self.phase = Phase::Push;
                        }
                        RobotAction { delta: move_to(target), gripper: 1.0 }
                    }
                    Phase::Push => {
                        if done {
                            self.phase = Phase::Retreat;
                            return RobotAction { delta: Vec3::ZERO, gripper: 1.0 };
                        }
                        let target = Vec3::new(
                            obj.center.x - dir.x * 0.012,
                            obj.center.y - dir.y * 0.012,
                            obj.center.z,
                        );
                        RobotAction { delta: move_to(target), gripper: 1.0 }
                    }
                    Phase::Retreat => {
                        let target = Vec3::new(p.x - dir.x * 0.05, p.y - dir.y * 0.05, 0.09);
                        if p.z > 0.085 {
                            self.phase = Phase::Done;
                        }
                        RobotAction { delta: move_to(target), gripper: 1.0 }
                    }
                    Phase::Done => RobotAction::hold(),
                    _ => RobotAction::hold(),
                }
            }
        }
    }
}

/// Rolls out the scripted proportional controller for `task.max_steps`
/// steps. Errors when the plan does not end in a successful terminal state.
pub fn scripted_robot_expert(
    task: &TaskSpec,
    layout: &ObsLayout,
    seed: u64,
) -> Result<ExpertEpisode, DemoError> {
    let mut state = simenv::reset(task, seed);
    let mut controller = Controller::new(task.family, seed);
    let mut observations = Vec::with_capacity(task.max_steps);
    let mut actions = Vec::with_capacity(task.max_steps);
    let mut effector_trace = Vec::with_capacity(task.max_steps);
    let mut apertures = Vec::with_capacity(task.max_steps);
    for _ in 0..task.max_steps {
        effector_trace.push(state.effector);
        apertures.push(state.aperture);
        observations.push(simenv::observe(&state, layout, task.max_steps));
        let action = controller.act(task, &state);
        actions.push(action.to_array());
        state = simenv::step(&state, &action);
    }
    let success = simenv::success(&state, task);
    if !success {
        return Err(DemoError::GenerationFailure { task: task.name.clone(), seed });
    }
    Ok(ExpertEpisode {
        task_id: task.task_id,
        observations,
        actions,
        effector_trace,
        apertures,
        terminal: state,
        success,
    })
}

fn hand_pose_from(wrist: Vec3, width: f64) -> HandPose {
    let d = width;
    let s = INDEX_SPREAD;
    HandPose {
        keypoints: [
            wrist,
            wrist + Vec3::new(0.10, -d / 2.0, 0.0),
            wrist + Vec3::new(0.10, d / 2.0 + s, 0.015),
            wrist + Vec3::new(0.10, d / 2.0 - s / 2.0, 0.0),
            wrist + Vec3::new(0.10, d / 2.0 - s / 2.0, -0.015),
        ],
    }
}

/// Synthesizes a "human" keypoint demonstration by running the robot expert
/// in a private copy of the scene and re-embodying its effector trace with
/// the configured gap: wrist offset, scaled hand width, delayed grasp
/// timing, and keypoint jitter. The wrist speed limit is re-enforced after
/// jitter by rigidly shifting offending poses.
pub fn scripted_human_demo(
    task: &TaskSpec,
    layout: &ObsLayout,
    gap: &EmbodimentGap,
    seed: u64,
) -> Result<HandDemo, DemoError> {
    let episode = scripted_robot_expert(task, layout, seed)?;
    let len = episode.effector_trace.len();
    let mut rng = ChaCha12Rng::seed_from_u64(SeedMix::new("demo-jitter").u64(seed).finish());
    let mut poses = Vec::with_capacity(len);
    for t in 0..len {
        let wrist = episode.effector_trace[t] + gap.wrist_offset;
        let lagged_aperture = episode.apertures[t.saturating_sub(gap.grasp_lag)];
        let width = gap.aperture_scale * (HAND_WIDTH_CLOSED + HAND_WIDTH_RANGE * lagged_aperture);
        let mut pose = hand_pose_from(wrist, width);
        if gap.keypoint_jitter > 0.0 {
            for kp in &mut pose.keypoints {
                let n: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                *kp += Vec3::new(n[0], n[1], n[2]) * gap.keypoint_jitter;
            }
        }
        poses.push(pose);
    }
    // Re-impose the wrist speed limit pose by pose; each correction shifts
    // the whole pose rigidly so intra-pose distances are preserved.
    for t in 1..poses.len() {
        let prev = poses[t - 1].wrist();
        let cur = poses[t].wrist();
        let delta = cur - prev;
        if delta.norm() > MAX_STEP_NORM {
            let corrected = prev + delta.clamp_norm(MAX_STEP_NORM);
            let shift = corrected - cur;
            for kp in &mut poses[t].keypoints {
                *kp += shift;
            }
        }
    }
    let demo = HandDemo { task_id: task.task_id, poses, seed, gap: *gap };
    demo.validate()?;
    Ok(demo)
}

/// Shifts every keypoint of every pose by one random direction scaled to
/// `magnitude`, mirroring tracking error that displaces the whole hand.
pub fn perturb_keypoints(demo: &HandDemo, magnitude: f64, seed: u64) -> HandDemo {
    let mut out = demo.clone();
    if magnitude == 0.0 {
        return out;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dir = loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if let Some(unit) = v.normalized(1e-9) {
            break unit;
        }
    };
    let shift = dir * magnitude;
    for pose in &mut out.poses {
        for kp in &mut pose.keypoints {
            *kp += shift;
        }
    }
    out
}

// --- File formats ---------------------------------------------------------

/// Writes the line-delimited demo format: a header record followed by one
/// record of 15 floats per timestep.
pub fn write_hand_demo(path: &Path, demo: &HandDemo) -> Result<(), DemoError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let g = &demo.gap;
    writeln!(
        file,
        "{} {} {} {} {} {} {} {} {}",
        demo.task_id,
        demo.poses.len(),
        g.wrist_offset.x,
        g.wrist_offset.y,
        g.wrist_offset.z,
        g.aperture_scale,
        g.keypoint_jitter,
        g.grasp_lag,
        demo.seed
    )?;
    for pose in &demo.poses {
        let floats: Vec<String> = pose
            .keypoints
            .iter()
            .flat_map(|kp| kp.to_array())
            .map(|v| format!("{v}"))
            .collect();
        writeln!(file, "{}", floats.join(" "))?;
    }
    Ok(())
}

pub fn read_hand_demo(path: &Path) -> Result<HandDemo, DemoError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| DemoError::Format("empty demo file".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 9 {
        return Err(DemoError::Format(format!("header has {} fields, want 9", fields.len())));
    }
    let parse_f = |s: &str| {
        s.parse::<f64>().map_err(|e| DemoError::Format(format!("bad float {s}: {e}")))
    };
    let parse_u = |s: &str| {
        s.parse::<u64>().map_err(|e| DemoError::Format(format!("bad int {s}: {e}")))
    };
    let task_id = parse_u(fields[0])? as usize;
    let len = parse_u(fields[1])? as usize;
    let gap = EmbodimentGap {
        wrist_offset: Vec3::new(parse_f(fields[2])?, parse_f(fields[3])?, parse_f(fields[4])?),
        aperture_scale: parse_f(fields[5])?,
        keypoint_jitter: parse_f(fields[6])?,
        grasp_lag: parse_u(fields[7])? as usize,
    };
    let seed = parse_u(fields[8])?;
    let mut poses = Vec::with_capacity(len);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, DemoError> =
            line.split_whitespace().map(parse_f).collect();
        let vals = vals?;
        if vals.len() != NUM_KEYPOINTS * 3 {
            return Err(DemoError::Format(format!(
                "pose record has {} floats, want {}",
                vals.len(),
                NUM_KEYPOINTS * 3
            )));
        }
        let mut keypoints = [Vec3::ZERO; NUM_KEYPOINTS];
        for (i, kp) in keypoints.iter_mut().enumerate() {
            *kp = Vec3::new(vals[3 * i], vals[3 * i + 1], vals[3 * i + 2]);
        }
        poses.push(HandPose { keypoints });
    }
    if poses.len() != len {
        return Err(DemoError::Format(format!("expected {len} poses, got {}", poses.len())));
    }
    Ok(HandDemo { task_id, poses, seed, gap })
}

const DATASET_MAGIC: &[u8; 4] = b"DMDD";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetHeader {
    pub record_count: u64,
    pub obs_dim: u32,
    pub action_dim: u32,
    pub chunk_len: u32,
}

/// Binary episode dataset: "DMDD" magic, version, header, then one record
/// per episode (task id, step count, interleaved little-endian f64
/// observation and action rows).
pub fn write_dataset(
    path: &Path,
    episodes: &[EpisodeRecord],
    obs_dim: usize,
    action_dim: usize,
    chunk_len: usize,
) -> Result<(), DemoError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(episodes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(obs_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(action_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(chunk_len as u32).to_le_bytes());
    for ep in episodes {
        if ep.observations.len() != ep.actions.len() {
            return Err(DemoError::Format("episode obs/action length mismatch".into()));
        }
        buf.extend_from_slice(&(ep.task_id as u32).to_le_bytes());
        buf.extend_from_slice(&(ep.observations.len() as u32).to_le_bytes());
        for (obs, act) in ep.observations.iter().zip(&ep.actions) {
            if obs.len() != obs_dim || act.len() != action_dim {
                return Err(DemoError::Format("row dimension mismatch".into()));
            }
            for v in obs {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in act {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Vec<EpisodeRecord>, DatasetHeader), DemoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], DemoError> {
        if *off + n > bytes.len() {
            return Err(DemoError::Format("truncated dataset".into()));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != DATASET_MAGIC {
        return Err(DemoError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(DemoError::Format(format!("unsupported version {version}")));
    }
    let header = DatasetHeader {
        record_count: u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()),
        obs_dim: u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()),
        action_dim: u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()),
        chunk_len: u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()),
    };
    let mut episodes = Vec::with_capacity(header.record_count as usize);
    for _ in 0..header.record_count {
        let task_id = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let steps = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut observations = Vec::with_capacity(steps);
        let mut actions = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut obs = Vec::with_capacity(header.obs_dim as usize);
            for _ in 0..header.obs_dim {
                obs.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
            }
            let mut act = Vec::with_capacity(header.action_dim as usize);
            for _ in 0..header.action_dim {
                act.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
            }
            observations.push(obs);
            actions.push(act);
        }
        episodes.push(EpisodeRecord { task_id, observations, actions });
    }
    if off != bytes.len() {
        return Err(DemoError::Format("trailing bytes".into()));
    }
    Ok((episodes, header))
}
