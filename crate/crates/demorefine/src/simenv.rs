//! Deterministic 3D tabletop micro-simulator.
//!
//! A point end-effector with a parallel-gripper abstraction moves spherical
//! objects on a table. Physics is kinematic: overlapping objects are
//! projected out along the contact normal, grasped objects track the
//! effector rigidly, and released objects settle instantly. Determinism is
//! the contract: `step` is a pure function of `(state, action)`.

use crate::geom::Vec3;
use crate::seeds::hash_f64_slice;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

pub const WORKSPACE_LO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
pub const WORKSPACE_HI: Vec3 = Vec3 { x: 1.0, y: 1.0, z: 0.5 };
/// Contact sphere radius of the effector (m).
pub const EFFECTOR_RADIUS: f64 = 0.02;
/// Per-step effector displacement cap (m).
pub const MAX_STEP_NORM: f64 = 0.03;
/// Closing the gripper attaches the nearest object within this distance (m).
pub const GRASP_RADIUS: f64 = 0.03;
/// An episode counts as a lift when the object center ends above this (m).
pub const LIFT_SUCCESS_Z: f64 = 0.10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("target {0:?} unreachable for link lengths {1:?}")]
    UnreachableTarget([f64; 2], [f64; 2]),
    #[error("inverse kinematics did not converge: residual {0}")]
    IkDidNotConverge(f64),
    #[error("episode log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("episode log parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub center: Vec3,
    pub radius: f64,
    pub attached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub effector: Vec3,
    /// Gripper aperture in [0, 1]; 1 is fully open.
    pub aperture: f64,
    pub objects: Vec<ObjectState>,
    pub goal: GoalRegion,
    pub task_id: usize,
    pub step_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Reach,
    PushToGoal,
    PickLift,
    PickPlace,
    SlideClose,
}

/// Axis-aligned box sampled uniformly per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Region {
    pub fn new(lo: Vec3, hi: Vec3) -> Region {
        Region { lo, hi }
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> Vec3 {
        let u = |lo: f64, hi: f64, rng: &mut ChaCha12Rng| {
            if hi > lo {
                lo + (hi - lo) * rng.random::<f64>()
            } else {
                lo
            }
        };
        Vec3::new(
            u(self.lo.x, self.hi.x, rng),
            u(self.lo.y, self.hi.y, rng),
            u(self.lo.z, self.hi.z, rng),
        )
    }

    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        p.x >= self.lo.x - tol
            && p.x <= self.hi.x + tol
            && p.y >= self.lo.y - tol
            && p.y <= self.hi.y + tol
            && p.z >= self.lo.z - tol
            && p.z <= self.hi.z + tol
    }

    /// Box reflected across the table midline x = 0.5.
    pub fn mirrored_x(&self) -> Region {
        Region {
            lo: Vec3::new(1.0 - self.hi.x, self.lo.y, self.lo.z),
            hi: Vec3::new(1.0 - self.lo.x, self.hi.y, self.hi.z),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub family: TaskFamily,
    pub object_region: Region,
    pub object_radius: f64,
    pub goal_region: Region,
    pub goal_radius: f64,
    /// Slide direction along x (+1 or -1); only read by `SlideClose`.
    pub slide_dir: f64,
    pub home: Vec3,
    pub max_steps: usize,
}

impl TaskSpec {
    /// Variant whose goal lives in the mirrored half of the table. Used to
    /// generate the policy's training data while evaluation keeps the
    /// original goals.
    pub fn mirrored_goal_variant(&self) -> TaskSpec {
        TaskSpec {
            goal_region: self.goal_region.mirrored_x(),
            slide_dir: -self.slide_dir,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotAction {
    pub delta: Vec3,
    pub gripper: f64,
}

impl RobotAction {
    pub fn hold() -> RobotAction {
        RobotAction { delta: Vec3::ZERO, gripper: 1.0 }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.delta.x, self.delta.y, self.delta.z, self.gripper]
    }

    pub fn from_slice(a: &[f64]) -> RobotAction {
        RobotAction { delta: Vec3::new(a[0], a[1], a[2]), gripper: a[3] }
    }
}

/// Fixed observation geometry for a benchmark: objects are padded/truncated
/// to `n_objects` slots and the task id is one-hot over `n_tasks`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub n_objects: usize,
    pub n_tasks: usize,
}

impl ObsLayout {
    pub fn dim(&self) -> usize {
        3 + 1 + 4 * self.n_objects + 3 + self.n_tasks + 1
    }
}

/// Deterministic initial state for `(task, seed)`.
pub fn reset(task: &TaskSpec, seed: u64) -> WorldState {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let obj_xy = task.object_region.sample(&mut rng);
    let goal_center = task.goal_region.sample(&mut rng);
    let object = ObjectState {
        center: Vec3::new(obj_xy.x, obj_xy.y, task.object_radius),
        radius: task.object_radius,
        attached: false,
    };
    WorldState {
        effector: task.home,
        aperture: 1.0,
        objects: vec![object],
        goal: GoalRegion { center: goal_center, radius: task.goal_radius },
        task_id: task.task_id,
        step_count: 0,
    }
}

/// Reset to the `(task, base_seed)` scene, then shift object positions in
/// the table plane by independent uniform offsets in `[-magnitude,
/// magnitude]`. Models re-setting a scene imperfectly between the
/// demonstration and execution.
pub fn reset_perturbed(
    task: &TaskSpec,
    base_seed: u64,
    magnitude: f64,
    perturb_seed: u64,
) -> WorldState {
    let mut state = reset(task, base_seed);
    if magnitude > 0.0 {
        let mut rng = ChaCha12Rng::seed_from_u64(perturb_seed);
        for obj in &mut state.objects {
            let dx = rng.random_range(-magnitude..=magnitude);
            let dy = rng.random_range(-magnitude..=magnitude);
            obj.center.x += dx;
            obj.center.y += dy;
            obj.center = obj.center.clamp_box(WORKSPACE_LO, WORKSPACE_HI);
            obj.center.z = obj.radius;
        }
    }
    state
}

/// Deterministic successor state. Invalid actions are clamped, never
/// rejected.
pub fn step(state: &WorldState, action: &RobotAction) -> WorldState {
    let mut next = state.clone();
    let delta = action.delta.clamp_norm(MAX_STEP_NORM);
    let gripper_cmd = action.gripper.clamp(0.0, 1.0);

    let old_p = next.effector;
    let new_p = (old_p + delta).clamp_box(WORKSPACE_LO, WORKSPACE_HI);
    let actual_delta = new_p - old_p;
    next.effector = new_p;

    // Attached object tracks the effector rigidly.
    for obj in &mut next.objects {
        if obj.attached {
            obj.center += actual_delta;
            obj.center = obj.center.clamp_box(WORKSPACE_LO, WORKSPACE_HI);
        }
    }

    // Project overlapping unattached objects out along the contact normal.
    // The normal is taken from the pre-move effector position so a pass
    // through an object's center still pushes it forward.
    for obj in &mut next.objects {
        if obj.attached {
            continue;
        }
        let contact = EFFECTOR_RADIUS + obj.radius;
        if new_p.dist(obj.center) < contact {
            let normal = (obj.center - old_p)
                .normalized(1e-12)
                .or_else(|| actual_delta.normalized(1e-12))
                .unwrap_or(Vec3::new(1.0, 0.0, 0.0));
            obj.center = new_p + normal * contact;
        }
        obj.center = obj.center.clamp_box(WORKSPACE_LO, WORKSPACE_HI);
        obj.center.z = obj.radius;
    }

    if gripper_cmd < 0.5 {
        next.aperture = 0.0;
        if !next.objects.iter().any(|o| o.attached) {
            let mut best: Option<(usize, f64)> = None;
            for (i, obj) in next.objects.iter().enumerate() {
                let d = next.effector.dist(obj.center);
                if d <= GRASP_RADIUS && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            if let Some((i, _)) = best {
                next.objects[i].attached = true;
            }
        }
    } else {
        next.aperture = gripper_cmd;
        for obj in &mut next.objects {
            if obj.attached {
                obj.attached = false;
                obj.center = obj.center.clamp_box(WORKSPACE_LO, WORKSPACE_HI);
                obj.center.z = obj.radius;
            }
        }
    }

    next.step_count += 1;
    next
}

/// Flat observation vector: effector, aperture, object slots, goal center,
/// one-hot task id, and normalized step phase. Object and goal centers are
/// encoded relative to the effector so contact geometry reads the same
/// anywhere on the table.
pub fn observe(state: &WorldState, layout: &ObsLayout, max_steps: usize) -> Vec<f64> {
    let mut obs = Vec::with_capacity(layout.dim());
    obs.extend_from_slice(&state.effector.to_array());
    obs.push(state.aperture);
    for slot in 0..layout.n_objects {
        if let Some(obj) = state.objects.get(slot) {
            obs.extend_from_slice(&(obj.center - state.effector).to_array());
            obs.push(obj.radius);
        } else {
            obs.extend_from_slice(&[0.0; 4]);
        }
    }
    obs.extend_from_slice(&(state.goal.center - state.effector).to_array());
    for t in 0..layout.n_tasks {
        obs.push(if t == state.task_id { 1.0 } else { 0.0 });
    }
    let phase = if max_steps > 0 {
        (state.step_count as f64 / max_steps as f64).min(1.0)
    } else {
        0.0
    };
    obs.push(phase);
    debug_assert_eq!(obs.len(), layout.dim());
    obs
}

/// Terminal success predicate for the task family.
pub fn success(state: &WorldState, task: &TaskSpec) -> bool {
    let obj = match state.objects.first() {
        Some(o) => o,
        None => return false,
    };
    match task.family {
        TaskFamily::Reach => state.effector.dist(state.goal.center) <= state.goal.radius,
        TaskFamily::PushToGoal => obj.center.xy_dist(state.goal.center) <= state.goal.radius,
        TaskFamily::PickLift => obj.center.z > LIFT_SUCCESS_Z,
        TaskFamily::PickPlace => {
            !obj.attached && obj.center.xy_dist(state.goal.center) <= state.goal.radius
        }
        TaskFamily::SlideClose => task.slide_dir * (obj.center.x - state.goal.center.x) > 0.0,
    }
}

/// One line of the episode log: the post-step state, the action that
/// produced it, and a short hash of the observation it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub state: WorldState,
    pub action: RobotAction,
    pub obs_hash: String,
}

impl StepRecord {
    pub fn new(step: usize, state: &WorldState, action: &RobotAction, obs: &[f64]) -> StepRecord {
        StepRecord {
            step,
            state: state.clone(),
            action: *action,
            obs_hash: hash_f64_slice(obs),
        }
    }
}

/// Line-delimited episode log, one JSON record per step.
pub fn write_episode_log(path: &Path, records: &[StepRecord]) -> Result<(), SimError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| SimError::Parse(e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn read_episode_log(path: &Path) -> Result<Vec<StepRecord>, SimError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SimError::Parse(e.to_string()))?);
    }
    Ok(out)
}

// --- Planar two-link arm -------------------------------------------------

/// Forward kinematics of a planar two-link arm.
pub fn arm_fk(q: [f64; 2], lengths: [f64; 2]) -> [f64; 2] {
    let (l1, l2) = (lengths[0], lengths[1]);
    let s1 = q[0].sin();
    let c1 = q[0].cos();
    let s12 = (q[0] + q[1]).sin();
    let c12 = (q[0] + q[1]).cos();
    [l1 * c1 + l2 * c12, l1 * s1 + l2 * s12]
}

const IK_DAMPING: f64 = 1e-3;
const IK_MAX_ITERS: usize = 200;
const IK_STEP_CAP: f64 = 0.2;

fn dls_descend(target: [f64; 2], lengths: [f64; 2], q_init: [f64; 2]) -> ([f64; 2], f64) {
    let (l1, l2) = (lengths[0], lengths[1]);
    let mut q = q_init;
    for _ in 0..IK_MAX_ITERS {
        let fk = arm_fk(q, lengths);
        let e = [target[0] - fk[0], target[1] - fk[1]];
        let err_norm = (e[0] * e[0] + e[1] * e[1]).sqrt();
        if err_norm < 1e-6 {
            return (q, err_norm);
        }
        let s1 = q[0].sin();
        let c1 = q[0].cos();
        let s12 = (q[0] + q[1]).sin();
        let c12 = (q[0] + q[1]).cos();
        // J rows: d(x, y) / d(q1, q2)
        let j = [[-l1 * s1 - l2 * s12, -l2 * s12], [l1 * c1 + l2 * c12, l2 * c12]];
        // A = J J^T + lambda^2 I
        let a00 = j[0][0] * j[0][0] + j[0][1] * j[0][1] + IK_DAMPING * IK_DAMPING;
        let a01 = j[0][0] * j[1][0] + j[0][1] * j[1][1];
        let a11 = j[1][0] * j[1][0] + j[1][1] * j[1][1] + IK_DAMPING * IK_DAMPING;
        let det = a00 * a11 - a01 * a01;
        // y = A^{-1} e
        let y0 = (a11 * e[0] - a01 * e[1]) / det;
        let y1 = (-a01 * e[0] + a00 * e[1]) / det;
        // dq = J^T y, scaled (direction preserved) to the per-iteration cap.
        let mut dq = [j[0][0] * y0 + j[1][0] * y1, j[0][1] * y0 + j[1][1] * y1];
        let m = dq[0].abs().max(dq[1].abs());
        if m > IK_STEP_CAP {
            dq[0] *= IK_STEP_CAP / m;
            dq[1] *= IK_STEP_CAP / m;
        }
        q[0] += dq[0];
        q[1] += dq[1];
    }
    let fk = arm_fk(q, lengths);
    let e = [target[0] - fk[0], target[1] - fk[1]];
    (q, (e[0] * e[0] + e[1] * e[1]).sqrt())
}

/// Damped-least-squares inverse kinematics for the two-link arm.
///
/// Iterates `dq = J^T (J J^T + lambda^2 I)^{-1} e` with the step scaled to
/// the per-iteration cap. A descent that stalls in the folded local minimum
/// (arm pointing away from the target) is retried from target-aligned
/// configurations. Unreachable targets (outside the annulus
/// `[|l1-l2|, l1+l2]`) error immediately.
pub fn arm_ik(target: [f64; 2], lengths: [f64; 2], q_init: [f64; 2]) -> Result<[f64; 2], SimError> {
    let (l1, l2) = (lengths[0], lengths[1]);
    let r = (target[0] * target[0] + target[1] * target[1]).sqrt();
    if r > l1 + l2 + 1e-12 || r < (l1 - l2).abs() - 1e-12 {
        return Err(SimError::UnreachableTarget(target, lengths));
    }
    let (q, err) = dls_descend(target, lengths, q_init);
    if err < 1e-3 {
        return Ok(q);
    }
    let bearing = target[1].atan2(target[0]);
    let mut best = (q, err);
    for elbow in [2.0, -2.0, 0.1] {
        let (q, err) = dls_descend(target, lengths, [bearing, elbow]);
        if err < 1e-3 {
            return Ok(q);
        }
        if err < best.1 {
            best = (q, err);
        }
    }
    Err(SimError::IkDidNotConverge(best.1))
}

/// The frozen five-task evaluation benchmark. Goals sit in the right half of
/// the table; `mirrored_goal_variant` yields the matching training tasks
/// with goals in the left half.
pub fn default_eval_tasks() -> Vec<TaskSpec> {
    let home = Vec3::new(0.48, 0.5, 0.12);
    let obj_radius = 0.008;
    let obj_band = Region::new(Vec3::new(0.44, 0.35, 0.0), Vec3::new(0.52, 0.65, 0.0));
    vec![
        TaskSpec {
            task_id: 0,
            name: "push".into(),
            family: TaskFamily::PushToGoal,
            object_region: obj_band,
            object_radius: obj_radius,
            goal_region: Region::new(Vec3::new(0.62, 0.35, 0.02), Vec3::new(0.82, 0.65, 0.02)),
            goal_radius: 0.05,
            slide_dir: 1.0,
            home,
            max_steps: 70,
        },
        TaskSpec {
            task_id: 1,
            name: "lift".into(),
            family: TaskFamily::PickLift,
            object_region: obj_band,
            object_radius: obj_radius,
            goal_region: Region::new(Vec3::new(0.62, 0.35, 0.18), Vec3::new(0.82, 0.65, 0.18)),
            goal_radius: 0.05,
            slide_dir: 1.0,
            home,
            max_steps: 70,
        },
        TaskSpec {
            task_id: 2,
            name: "place".into(),
            family: TaskFamily::PickPlace,
            object_region: obj_band,
            object_radius: obj_radius,
            goal_region: Region::new(Vec3::new(0.62, 0.35, 0.02), Vec3::new(0.82, 0.65, 0.02)),
            goal_radius: 0.05,
            slide_dir: 1.0,
            home,
            max_steps: 70,
        },
        TaskSpec {
            task_id: 3,
            name: "slide".into(),
            family: TaskFamily::SlideClose,
            object_region: obj_band,
            object_radius: obj_radius,
            goal_region: Region::new(Vec3::new(0.62, 0.35, 0.02), Vec3::new(0.77, 0.65, 0.02)),
            goal_radius: 0.05,
            slide_dir: 1.0,
            home,
            max_steps: 70,
        },
        TaskSpec {
            task_id: 4,
            name: "place_far".into(),
            family: TaskFamily::PickPlace,
            object_region: Region::new(Vec3::new(0.44, 0.3, 0.0), Vec3::new(0.52, 0.5, 0.0)),
            object_radius: obj_radius,
            goal_region: Region::new(Vec3::new(0.65, 0.5, 0.02), Vec3::new(0.85, 0.7, 0.02)),
            goal_radius: 0.04,
            slide_dir: 1.0,
            home,
            max_steps: 70,
        },
    ]
}

/// Observation layout matching `default_eval_tasks`.
pub fn default_obs_layout() -> ObsLayout {
    ObsLayout { n_objects: 1, n_tasks: default_eval_tasks().len() }
}
