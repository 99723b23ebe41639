//! Parametric synthetic motion with device streams and camera keypoints.

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::camera::{project_joints, CameraModel, Projection};
use super::EvalError;
use crate::descriptor::{derive_velocities, MotionFrame, PoseSample};
use crate::kinematics::chain_transforms;
use crate::pose::{DevicePose, FullBodyPose, JOINT_COUNT};
use crate::refine::KeypointFrame;
use crate::rotation::{rot_x, rot_y, rot_z, Mat3, Rot6D, Vec3};
use crate::skeleton::{KinematicTree, HEAD, LEFT_WRIST, RIGHT_WRIST};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Static,
    Walk,
    Squat,
    Kick,
}

impl FromStr for MotionKind {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "static" => Ok(Self::Static),
            "walk" => Ok(Self::Walk),
            "squat" => Ok(Self::Squat),
            "kick" => Ok(Self::Kick),
            other => Err(EvalError::UnknownMotionKind(other.to_string())),
        }
    }
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Static => "static",
            Self::Walk => "walk",
            Self::Squat => "squat",
            Self::Kick => "kick",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub kind: MotionKind,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub rate: f64,
    pub seed: u64,
    /// Standard deviation of keypoint position noise, meters.
    pub keypoint_noise: f64,
    /// Probability that a visible joint is reported as unseen.
    pub dropout: f64,
}

impl SequenceSpec {
    pub fn new(kind: MotionKind, duration: f64, rate: f64, seed: u64) -> Self {
        Self { kind, duration, rate, seed, keypoint_noise: 0.0, dropout: 0.0 }
    }

    pub fn frame_count(&self) -> usize {
        ((self.duration * self.rate).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub timestamp: f64,
    /// Ground-truth rotations; `positions` holds the world joint positions.
    pub pose: FullBodyPose,
    pub devices: MotionFrame,
    pub projections: Vec<Projection>,
    pub keypoints: KeypointFrame,
}

impl SyntheticFrame {
    pub fn positions(&self) -> &[Vec3] {
        self.pose.positions.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub spec: SequenceSpec,
    pub camera: CameraModel,
    pub frames: Vec<SyntheticFrame>,
}

impl SyntheticSequence {
    pub fn motion_frames(&self) -> Vec<MotionFrame> {
        self.frames.iter().map(|f| f.devices).collect()
    }

    pub fn keypoint_frames(&self) -> Vec<KeypointFrame> {
        self.frames.iter().map(|f| f.keypoints.clone()).collect()
    }

    pub fn ground_truth(&self) -> Vec<super::GroundTruthFrame> {
        self.frames
            .iter()
            .map(|f| super::GroundTruthFrame {
                timestamp: f.timestamp,
                pose: FullBodyPose { positions: None, ..f.pose.clone() },
                positions: f.positions().to_vec(),
            })
            .collect()
    }
}

/// Seed-dependent variation of the schedules.
struct Style {
    amplitude: f64,
    frequency: f64,
    phase: f64,
    arm_drop: f64,
}

impl Style {
    fn draw(rng: &mut ChaCha8Rng, base_frequency: f64) -> Self {
        Self {
            amplitude: rng.gen_range(0.9..1.1),
            frequency: base_frequency * rng.gen_range(0.9..1.1),
            phase: rng.gen_range(0.0..TAU),
            arm_drop: rng.gen_range(1.1..1.3),
        }
    }
}

/// Local rotation matrices (index = joint) and pelvis world position at time `t`.
fn schedule(kind: MotionKind, style: &Style, t: f64) -> (Vec<Mat3>, Vec3) {
    let mut r = vec![Mat3::identity(); JOINT_COUNT];
    let a = style.amplitude;
    let w = TAU * style.frequency * t + style.phase;
    // Arms hang from the rest T-pose.
    r[16] = rot_z(-style.arm_drop);
    r[17] = rot_z(style.arm_drop);
    r[18] = rot_y(0.3);
    r[19] = rot_y(-0.3);
    let mut pelvis = Vec3::new(0.0, 0.93, 0.0);
    match kind {
        MotionKind::Static => {}
        MotionKind::Walk => {
            let s = w.sin();
            r[0] = rot_y(0.05 * a * s);
            r[1] = rot_x(-0.4 * a * s);
            r[2] = rot_x(0.4 * a * s);
            r[4] = rot_x(0.3 * a * (1.0 - w.cos()));
            r[5] = rot_x(0.3 * a * (1.0 + w.cos()));
            r[3] = rot_y(-0.08 * a * s);
            r[16] = rot_x(0.3 * a * s) * r[16];
            r[17] = rot_x(-0.3 * a * s) * r[17];
            pelvis.y += 0.02 * (2.0 * w).cos();
            pelvis.z = 1.2 * a * t;
        }
        MotionKind::Squat => {
            let depth = 0.5 * (1.0 - w.cos()) * a;
            r[1] = rot_x(-1.3 * depth);
            r[2] = rot_x(-1.3 * depth);
            r[4] = rot_x(1.9 * depth);
            r[5] = rot_x(1.9 * depth);
            r[7] = rot_x(-0.6 * depth);
            r[8] = rot_x(-0.6 * depth);
            r[3] = rot_x(0.3 * depth);
            r[16] = rot_x(-1.0 * depth) * r[16];
            r[17] = rot_x(-1.0 * depth) * r[17];
            pelvis.y -= 0.35 * depth;
        }
        MotionKind::Kick => {
            let k = w.sin().max(0.0).powi(2) * a;
            r[2] = rot_x(-1.2 * k);
            r[5] = rot_x(0.6 * k * (1.0 - k).max(0.0) * 4.0);
            r[16] = rot_z(0.4 * k) * r[16];
            r[3] = rot_x(-0.15 * k);
        }
    }
    (r, pelvis)
}

fn pose_from_locals(locals: &[Mat3]) -> FullBodyPose {
    let mut pose = FullBodyPose::identity();
    pose.root_rotation = Rot6D::from_matrix_unchecked(&locals[0]);
    for (slot, m) in pose.local_rotations.iter_mut().zip(&locals[1..]) {
        *slot = Rot6D::from_matrix_unchecked(m);
    }
    pose
}

fn base_frequency(kind: MotionKind) -> f64 {
    match kind {
        MotionKind::Static => 0.0,
        MotionKind::Walk => 0.9,
        MotionKind::Squat => 0.35,
        MotionKind::Kick => 0.5,
    }
}

pub fn generate_sequence(
    spec: &SequenceSpec,
    tree: &KinematicTree,
    camera: &CameraModel,
) -> Result<SyntheticSequence, EvalError> {
    if !(spec.duration > 0.0 && spec.duration.is_finite()) || !(spec.rate > 0.0 && spec.rate.is_finite()) {
        return Err(EvalError::InvalidSpec("duration and rate must be positive".into()));
    }
    if !(spec.keypoint_noise >= 0.0) || !(0.0..=1.0).contains(&spec.dropout) {
        return Err(EvalError::InvalidSpec("noise must be nonnegative and dropout a probability".into()));
    }
    if tree.len() != JOINT_COUNT {
        return Err(EvalError::Shape(format!("synthetic motion needs a {JOINT_COUNT}-joint tree")));
    }
    camera.validate()?;
    let mut style_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let style = Style::draw(&mut style_rng, base_frequency(spec.kind));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, spec.keypoint_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| EvalError::InvalidSpec(e.to_string()))?;

    let n = spec.frame_count();
    let mut frames: Vec<SyntheticFrame> = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / spec.rate;
        // Static motion is evaluated at a single instant so frames are identical.
        let schedule_t = if spec.kind == MotionKind::Static { 0.0 } else { t };
        let (locals, pelvis) = schedule(spec.kind, &style, schedule_t);
        let (global, relative) = chain_transforms(&locals, tree)?;
        let positions: Vec<Vec3> = relative.iter().map(|p| p + pelvis).collect();

        let sample = |j: usize| PoseSample {
            timestamp: t,
            position: positions[j],
            orientation: Rot6D::from_matrix_unchecked(&global[j]),
        };
        let device = |j: usize, prev: Option<&DevicePose>| -> Result<DevicePose, EvalError> {
            let s = sample(j);
            match prev {
                None => Ok(DevicePose::at_rest(t, s.position, s.orientation)),
                Some(p) => Ok(derive_velocities(&PoseSample::from(p), &s)?),
            }
        };
        let prev = frames.last().map(|f| f.devices);
        let devices = MotionFrame {
            head: device(HEAD, prev.as_ref().map(|f| &f.head))?,
            left: device(LEFT_WRIST, prev.as_ref().map(|f| &f.left))?,
            right: device(RIGHT_WRIST, prev.as_ref().map(|f| &f.right))?,
        };

        let projections = project_joints(&positions, &devices.head, camera)?;
        let head_rot = global[HEAD];
        let mut keypoint_positions = Vec::with_capacity(JOINT_COUNT);
        let mut visibility = Vec::with_capacity(JOINT_COUNT);
        for (p, proj) in positions.iter().zip(&projections) {
            let mut c = camera.world_to_camera(p, &devices.head.position, &head_rot);
            let mut seen = proj.visible;
            if spec.keypoint_noise > 0.0 {
                // Unseen joints are guessed much more poorly than seen ones.
                let scale = if seen { 1.0 } else { 10.0 };
                c += scale * Vec3::new(noise.sample(&mut noise_rng), noise.sample(&mut noise_rng), noise.sample(&mut noise_rng));
            }
            if seen && spec.dropout > 0.0 && noise_rng.gen_bool(spec.dropout) {
                seen = false;
            }
            keypoint_positions.push(c);
            visibility.push(if seen { 1.0 } else { 0.0 });
        }

        let mut pose = pose_from_locals(&locals);
        pose.positions = Some(positions);
        frames.push(SyntheticFrame {
            timestamp: t,
            pose,
            devices,
            projections,
            keypoints: KeypointFrame { timestamp: t, positions: keypoint_positions, visibility },
        });
    }
    Ok(SyntheticSequence { spec: *spec, camera: *camera, frames })
}

/// Random but anatomically loose rotation set for property tests: every
/// local rotation within `max_angle` radians of identity.
pub fn random_rotations<R: Rng>(rng: &mut R, max_angle: f64) -> FullBodyPose {
    let mut m = || {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let axis = if axis.norm() < 1e-6 { Vec3::y() } else { axis.normalize() };
        Rot6D::from_matrix_unchecked(&crate::rotation::axis_angle(&axis, max_angle * rng.gen_range(-1.0..=1.0)))
    };
    let mut pose = FullBodyPose::identity();
    pose.root_rotation = m();
    for slot in pose.local_rotations.iter_mut() {
        *slot = m();
    }
    pose
}
