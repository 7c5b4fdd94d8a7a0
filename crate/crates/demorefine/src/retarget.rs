//! Kinematic retargeting from hand keypoints to robot end-effector poses.
//!
//! The wrist maps to the effector position; the wrist-to-thumb vector and
//! the wrist-to-fingertip-centroid vector define an orthonormal orientation
//! frame; the thumb-to-finger distance against a fraction of the gripper's
//! maximum width decides the binary grasp.

use crate::demonstrator::{HandDemo, HandPose, KP_INDEX};
use crate::geom::{RigidTransform, Vec3};
use crate::simenv::{self, RobotAction, TaskSpec, WorldState, MAX_STEP_NORM};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetargetError {
    #[error("degenerate keypoint frame (wrist, thumb, fingers nearly collinear)")]
    DegenerateFrame,
    #[error("first pose of the demonstration has a degenerate frame")]
    FirstFrameDegenerate,
    #[error("empty demonstration")]
    EmptyDemo,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("file format: {0}")]
    Format(String),
}

/// Which keypoints the grasp distance reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FingerMode {
    /// Thumb against the centroid of the remaining fingertips.
    AllFingers,
    /// Thumb against the index fingertip only.
    ThumbIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetargetConfig {
    /// The gripper reads closed when the grasp distance drops below this
    /// fraction of `gripper_max_width`.
    pub grasp_threshold_fraction: f64,
    pub gripper_max_width: f64,
    pub finger_mode: FingerMode,
    pub wrist_to_effector: RigidTransform,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        RetargetConfig {
            grasp_threshold_fraction: 0.8,
            gripper_max_width: 0.08,
            finger_mode: FingerMode::AllFingers,
            wrist_to_effector: RigidTransform::identity(),
        }
    }
}

/// Right-handed orthonormal effector frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientationFrame {
    pub x: Vec3,
    pub y: Vec3,
    pub z: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetargetedPose {
    pub position: Vec3,
    pub frame: OrientationFrame,
    pub gripper_closed: bool,
}

/// Open-loop robot targets derived from one demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct RetargetedTrajectory {
    pub task_id: usize,
    /// Seed of the scene the source demonstration was recorded in.
    pub scene_seed: u64,
    pub waypoints: Vec<RetargetedPose>,
}

impl RetargetedTrajectory {
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }
}

const DEGENERACY_EPS: f64 = 1e-9;

fn frame_from(h: &HandPose) -> Option<OrientationFrame> {
    let a = h.wrist();
    let ab = h.thumb() - a;
    let ac = h.finger_centroid() - a;
    let cross = ab.cross(ac);
    if cross.norm() <= DEGENERACY_EPS {
        return None;
    }
    let x = ab.normalized(DEGENERACY_EPS)?;
    let z = cross.normalized(DEGENERACY_EPS)?;
    let y = z.cross(x);
    Some(OrientationFrame { x, y, z })
}

fn grasp_distance(h: &HandPose, mode: FingerMode) -> f64 {
    match mode {
        FingerMode::AllFingers => h.thumb().dist(h.finger_centroid()),
        FingerMode::ThumbIndex => h.thumb().dist(h.keypoints[KP_INDEX]),
    }
}

/// Maps one hand pose to `(position, frame, gripper)`.
pub fn retarget_pose(h: &HandPose, cfg: &RetargetConfig) -> Result<RetargetedPose, RetargetError> {
    let frame = frame_from(h).ok_or(RetargetError::DegenerateFrame)?;
    let position = cfg.wrist_to_effector.apply(h.wrist());
    let closed =
        grasp_distance(h, cfg.finger_mode) < cfg.grasp_threshold_fraction * cfg.gripper_max_width;
    Ok(RetargetedPose { position, frame, gripper_closed: closed })
}

/// Maps a whole demonstration. Degenerate frames after the first pose
/// inherit the previous frame; a degenerate first pose is an error.
pub fn retarget_trajectory(
    demo: &HandDemo,
    cfg: &RetargetConfig,
) -> Result<RetargetedTrajectory, RetargetError> {
    if demo.is_empty() {
        return Err(RetargetError::EmptyDemo);
    }
    let mut waypoints: Vec<RetargetedPose> = Vec::with_capacity(demo.len());
    for (t, pose) in demo.poses.iter().enumerate() {
        match retarget_pose(pose, cfg) {
            Ok(wp) => waypoints.push(wp),
            Err(RetargetError::DegenerateFrame) if t > 0 => {
                let prev_frame = waypoints[t - 1].frame;
                let position = cfg.wrist_to_effector.apply(pose.wrist());
                let closed = grasp_distance(pose, cfg.finger_mode)
                    < cfg.grasp_threshold_fraction * cfg.gripper_max_width;
                waypoints.push(RetargetedPose { position, frame: prev_frame, gripper_closed: closed });
            }
            Err(RetargetError::DegenerateFrame) => return Err(RetargetError::FirstFrameDegenerate),
            Err(e) => return Err(e),
        }
    }
    Ok(RetargetedTrajectory { task_id: demo.task_id, scene_seed: demo.seed, waypoints })
}

/// Executable action at demonstration index `t`: the clamped position delta
/// toward the next waypoint plus its binary gripper command. Indices past
/// the end hold the final pose.
pub fn retargeted_action(traj: &RetargetedTrajectory, t: usize) -> [f64; 4] {
    let last = traj.len() - 1;
    let cur = t.min(last);
    let next = (t + 1).min(last);
    let delta =
        (traj.waypoints[next].position - traj.waypoints[cur].position).clamp_norm(MAX_STEP_NORM);
    let gripper = if traj.waypoints[next].gripper_closed { 0.0 } else { 1.0 };
    [delta.x, delta.y, delta.z, gripper]
}

/// Flattened chunk of `len` consecutive retargeted actions starting at `t0`.
pub fn retargeted_action_chunk(traj: &RetargetedTrajectory, t0: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * 4);
    for k in 0..len {
        out.extend_from_slice(&retargeted_action(traj, t0 + k));
    }
    out
}

/// Initial world state shared by open-loop replay and refined execution:
/// the perturbed scene with the effector teleported to the first retargeted
/// pose.
pub fn initial_state(
    task: &TaskSpec,
    traj: &RetargetedTrajectory,
    perturb_magnitude: f64,
    perturb_seed: u64,
) -> WorldState {
    let mut state = simenv::reset_perturbed(task, traj.scene_seed, perturb_magnitude, perturb_seed);
    state.effector = traj.waypoints[0]
        .position
        .clamp_box(simenv::WORKSPACE_LO, simenv::WORKSPACE_HI);
    state.aperture = if traj.waypoints[0].gripper_closed { 0.0 } else { 1.0 };
    state
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayResult {
    pub terminal: WorldState,
    pub success: bool,
    pub steps: usize,
}

/// Executes the retargeted trajectory open loop for exactly the
/// demonstration length and evaluates success at the end.
pub fn replay_open_loop(
    task: &TaskSpec,
    traj: &RetargetedTrajectory,
    perturb_magnitude: f64,
    perturb_seed: u64,
) -> ReplayResult {
    let mut state = initial_state(task, traj, perturb_magnitude, perturb_seed);
    let steps = traj.len();
    for t in 0..steps {
        let a = retargeted_action(traj, t);
        state = simenv::step(&state, &RobotAction::from_slice(&a));
    }
    let success = simenv::success(&state, task);
    ReplayResult { terminal: state, success, steps }
}

/// Line-delimited trajectory export: a header record, then per timestep
/// `(t, position x3, frame x9, gripper bit)`.
pub fn write_trajectory(path: &Path, traj: &RetargetedTrajectory) -> Result<(), RetargetError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{} {} {}", traj.task_id, traj.len(), traj.scene_seed)?;
    for (t, wp) in traj.waypoints.iter().enumerate() {
        let mut fields: Vec<String> = Vec::with_capacity(14);
        fields.push(format!("{t}"));
        for v in wp.position.to_array() {
            fields.push(format!("{v}"));
        }
        for axis in [wp.frame.x, wp.frame.y, wp.frame.z] {
            for v in axis.to_array() {
                fields.push(format!("{v}"));
            }
        }
        fields.push(if wp.gripper_closed { "1".into() } else { "0".into() });
        writeln!(file, "{}", fields.join(" "))?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<RetargetedTrajectory, RetargetError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| RetargetError::Format("empty trajectory file".into()))??;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 {
        return Err(RetargetError::Format("header needs 3 fields".into()));
    }
    let parse_u = |s: &str| {
        s.parse::<u64>().map_err(|e| RetargetError::Format(format!("bad int {s}: {e}")))
    };
    let task_id = parse_u(head[0])? as usize;
    let len = parse_u(head[1])? as usize;
    let scene_seed = parse_u(head[2])?;
    let mut waypoints = Vec::with_capacity(len);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 14 {
            return Err(RetargetError::Format(format!("row has {} fields, want 14", vals.len())));
        }
        let f = |s: &str| {
            s.parse::<f64>().map_err(|e| RetargetError::Format(format!("bad float {s}: {e}")))
        };
        let position = Vec3::new(f(vals[1])?, f(vals[2])?, f(vals[3])?);
        let frame = OrientationFrame {
            x: Vec3::new(f(vals[4])?, f(vals[5])?, f(vals[6])?),
            y: Vec3::new(f(vals[7])?, f(vals[8])?, f(vals[9])?),
            z: Vec3::new(f(vals[10])?, f(vals[11])?, f(vals[12])?),
        };
        let gripper_closed = vals[13] == "1";
        waypoints.push(RetargetedPose { position, frame, gripper_closed });
    }
    if waypoints.len() != len {
        return Err(RetargetError::Format(format!(
            "expected {len} rows, got {}",
            waypoints.len()
        )));
    }
    Ok(RetargetedTrajectory { task_id, scene_seed, waypoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demonstrator::{
        scripted_human_demo, scripted_robot_expert, EmbodimentGap, NUM_KEYPOINTS,
    };
    use crate::simenv::{default_eval_tasks, default_obs_layout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn pose_with(fingers: Vec3) -> HandPose {
        HandPose {
            keypoints: [
                Vec3::ZERO,
                Vec3::new(0.1, 0.0, 0.0),
                fingers,
                fingers,
                fingers,
            ],
        }
    }

    #[test]
    fn world_aligned_pose_yields_world_frame_and_open_gripper() {
        let pose = pose_with(Vec3::new(0.0, 0.1, 0.0));
        let rp = retarget_pose(&pose, &RetargetConfig::default()).unwrap();
        assert!((rp.frame.x - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((rp.frame.z - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert!((rp.frame.y - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert_eq!(rp.position, Vec3::ZERO);
        // Thumb-to-centroid distance is sqrt(0.1^2 + 0.1^2) > 0.8 * 0.08.
        assert!(!rp.gripper_closed);
    }

    #[test]
    fn grasp_threshold_is_a_single_step_at_the_boundary() {
        let cfg = RetargetConfig::default();
        let threshold = cfg.grasp_threshold_fraction * cfg.gripper_max_width;
        let make = |dist: f64| {
            // Fingers at distance `dist` from the thumb, off the AB axis so
            // the frame stays valid.
            let thumb = Vec3::new(0.1, 0.0, 0.0);
            let c = thumb + Vec3::new(0.0, dist, 0.0);
            pose_with(c)
        };
        let below = retarget_pose(&make(0.063), &cfg).unwrap();
        assert!(below.gripper_closed);
        let above = retarget_pose(&make(0.065), &cfg).unwrap();
        assert!(!above.gripper_closed);
        // Strictly-below semantics: the exact boundary reads open.
        let at = retarget_pose(&make(threshold), &cfg).unwrap();
        assert!(!at.gripper_closed);
        // Scan for a single downward transition.
        let mut prev_closed = true;
        let mut transitions = 0;
        for i in 0..200 {
            let d = 0.02 + 0.08 * i as f64 / 199.0;
            let closed = retarget_pose(&make(d), &cfg).unwrap().gripper_closed;
            if closed != prev_closed {
                transitions += 1;
            }
            prev_closed = closed;
        }
        assert_eq!(transitions, 1);
    }

    #[test]
    fn collinear_keypoints_are_degenerate() {
        let pose = pose_with(Vec3::new(0.2, 0.0, 0.0));
        assert!(matches!(
            retarget_pose(&pose, &RetargetConfig::default()),
            Err(RetargetError::DegenerateFrame)
        ));
    }

    #[test]
    fn thumb_index_mode_reads_the_index_tip() {
        // Index tip far from the thumb while the fingertip centroid stays
        // within the grasp threshold.
        let pose = HandPose {
            keypoints: [
                Vec3::ZERO,
                Vec3::new(0.1, 0.0, 0.0),
                Vec3::new(0.1, 0.2, 0.0),
                Vec3::new(0.1, -0.05, 0.0),
                Vec3::new(0.1, -0.05, 0.0),
            ],
        };
        let cfg_all = RetargetConfig::default();
        let cfg_ti = RetargetConfig { finger_mode: FingerMode::ThumbIndex, ..cfg_all };
        let all = retarget_pose(&pose, &cfg_all).unwrap();
        let ti = retarget_pose(&pose, &cfg_ti).unwrap();
        assert!(all.gripper_closed);
        assert!(!ti.gripper_closed);
    }

    #[test]
    fn frame_orthonormality_over_random_poses() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let cfg = RetargetConfig::default();
        let mut checked = 0;
        while checked < 10_000 {
            let mut keypoints = [Vec3::ZERO; NUM_KEYPOINTS];
            for kp in &mut keypoints {
                *kp = Vec3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                );
            }
            let pose = HandPose { keypoints };
            let Ok(rp) = retarget_pose(&pose, &cfg) else { continue };
            checked += 1;
            let f = rp.frame;
            assert!((f.x.norm() - 1.0).abs() < 1e-9);
            assert!((f.y.norm() - 1.0).abs() < 1e-9);
            assert!((f.z.norm() - 1.0).abs() < 1e-9);
            assert!(f.x.dot(f.y).abs() < 1e-9);
            assert!(f.x.dot(f.z).abs() < 1e-9);
            assert!(f.y.dot(f.z).abs() < 1e-9);
        }
    }

    #[test]
    fn rigid_motion_equivariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let cfg = RetargetConfig::default();
        for _ in 0..100 {
            let mut keypoints = [Vec3::ZERO; NUM_KEYPOINTS];
            for kp in &mut keypoints {
                *kp = Vec3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                );
            }
            let pose = HandPose { keypoints };
            let Ok(base) = retarget_pose(&pose, &cfg) else { continue };
            let axis = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let xf = RigidTransform::from_axis_angle(
                axis,
                rng.random_range(-3.0..3.0),
                Vec3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ),
            );
            let mut moved = pose.clone();
            for kp in &mut moved.keypoints {
                *kp = xf.apply(*kp);
            }
            let out = retarget_pose(&moved, &cfg).unwrap();
            assert!((out.position - xf.apply(base.position)).norm() < 1e-8);
            assert!((out.frame.x - xf.apply_vector(base.frame.x)).norm() < 1e-8);
            assert!((out.frame.y - xf.apply_vector(base.frame.y)).norm() < 1e-8);
            assert!((out.frame.z - xf.apply_vector(base.frame.z)).norm() < 1e-8);
            assert_eq!(out.gripper_closed, base.gripper_closed);
        }
    }

    #[test]
    fn zero_gap_trajectory_matches_expert_effector_trace() {
        let layout = default_obs_layout();
        let task = default_eval_tasks()[2].mirrored_goal_variant();
        let ep = scripted_robot_expert(&task, &layout, 14).unwrap();
        let demo = scripted_human_demo(&task, &layout, &EmbodimentGap::zero(), 14).unwrap();
        let traj = retarget_trajectory(&demo, &RetargetConfig::default()).unwrap();
        assert_eq!(traj.len(), demo.len());
        for (wp, eff) in traj.waypoints.iter().zip(&ep.effector_trace) {
            assert_eq!(wp.position, *eff);
        }
    }

    #[test]
    fn default_gap_trajectory_positions_equal_wrist_trace() {
        let layout = default_obs_layout();
        let task = default_eval_tasks()[0].mirrored_goal_variant();
        let demo = scripted_human_demo(&task, &layout, &EmbodimentGap::default(), 3).unwrap();
        let traj = retarget_trajectory(&demo, &RetargetConfig::default()).unwrap();
        for (wp, pose) in traj.waypoints.iter().zip(&demo.poses) {
            assert_eq!(wp.position, pose.wrist());
        }
    }

    #[test]
    fn mid_trajectory_degeneracy_inherits_previous_frame() {
        let layout = default_obs_layout();
        let task = default_eval_tasks()[0].mirrored_goal_variant();
        let mut demo = scripted_human_demo(&task, &layout, &EmbodimentGap::zero(), 2).unwrap();
        // Make pose 5 collinear.
        let w = demo.poses[5].wrist();
        for i in 1..NUM_KEYPOINTS {
            demo.poses[5].keypoints[i] = w + Vec3::new(0.05 * i as f64, 0.0, 0.0);
        }
        let traj = retarget_trajectory(&demo, &RetargetConfig::default()).unwrap();
        assert_eq!(traj.waypoints[5].frame, traj.waypoints[4].frame);
        assert_eq!(traj.waypoints[5].position, w);
        // First-frame degeneracy errors out instead.
        let w0 = demo.poses[0].wrist();
        for i in 1..NUM_KEYPOINTS {
            demo.poses[0].keypoints[i] = w0 + Vec3::new(0.05 * i as f64, 0.0, 0.0);
        }
        assert!(matches!(
            retarget_trajectory(&demo, &RetargetConfig::default()),
            Err(RetargetError::FirstFrameDegenerate)
        ));
    }

    #[test]
    fn zero_gap_replay_reproduces_expert_success() {
        let layout = default_obs_layout();
        for task in default_eval_tasks() {
            let train = task.mirrored_goal_variant();
            let demo = scripted_human_demo(&train, &layout, &EmbodimentGap::zero(), 23).unwrap();
            let traj = retarget_trajectory(&demo, &RetargetConfig::default()).unwrap();
            let result = replay_open_loop(&train, &traj, 0.0, 0);
            assert!(result.success, "zero-gap replay failed on {}", train.name);
            assert_eq!(result.steps, demo.len());
        }
    }

    #[test]
    fn padded_actions_hold_the_final_pose() {
        let layout = default_obs_layout();
        let task = default_eval_tasks()[0].mirrored_goal_variant();
        let demo = scripted_human_demo(&task, &layout, &EmbodimentGap::zero(), 2).unwrap();
        let traj = retarget_trajectory(&demo, &RetargetConfig::default()).unwrap();
        let t = traj.len();
        let beyond = retargeted_action(&traj, t + 5);
        assert_eq!(&beyond[..3], &[0.0, 0.0, 0.0]);
        let chunk = retargeted_action_chunk(&traj, t - 2, 10);
        assert_eq!(chunk.len(), 40);
    }

    #[test]
    fn trajectory_file_round_trips_bit_exact() {
        let layout = default_obs_layout();
        let task = default_eval_tasks()[1].mirrored_goal_variant();
        let demo = scripted_human_demo(&task, &layout, &EmbodimentGap::default(), 4).unwrap();
        let traj = retarget_trajectory(&demo, &RetargetConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        write_trajectory(&path, &traj).unwrap();
        let loaded = read_trajectory(&path).unwrap();
        assert_eq!(traj, loaded);
    }
}
