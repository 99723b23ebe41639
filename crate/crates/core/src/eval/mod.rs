//! Pose metrics, synthetic ground truth and metric reports.

mod camera;
mod metrics;
mod synth;

pub use camera::{project_joints, CameraModel, Projection};
pub use metrics::{
    default_lower_body, default_upper_body, mpjpe, mpjpe_subset, mpjre, pa_mpjpe, procrustes, Similarity, MIN_SPREAD,
};
pub use synth::{generate_sequence, random_rotations, MotionKind, SequenceSpec, SyntheticFrame, SyntheticSequence};

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{check_header, write_header, DescriptorError, ReplayError};
use crate::kinematics::KinematicsError;
use crate::pose::{FullBodyPose, JOINT_COUNT};
use crate::rotation::{Rot6D, RotationError, Vec3};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("ground truth has zero spread")]
    DegenerateCloud,
    #[error("joint {joint}: {source}")]
    NotARotation { joint: usize, source: RotationError },
    #[error("unknown motion kind {0:?} (expected static, walk, squat or kick)")]
    UnknownMotionKind(String),
    #[error("invalid sequence spec: {0}")]
    InvalidSpec(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

pub const GROUND_TRUTH_FORMAT: &str = "epvr-groundtruth";

/// Reference pose for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub timestamp: f64,
    pub pose: FullBodyPose,
    pub positions: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRecord {
    t: f64,
    rot6d: Vec<[f64; 6]>,
    pos: Vec<[f64; 3]>,
}

pub fn write_ground_truth<W: Write>(out: &mut W, frames: &[GroundTruthFrame]) -> std::io::Result<()> {
    write_header(out, GROUND_TRUTH_FORMAT)?;
    for f in frames {
        let rec = GroundTruthRecord {
            t: f.timestamp,
            rot6d: f.pose.rotations().map(|r| r.0).collect(),
            pos: f.positions.iter().map(|p| (*p).into()).collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(input: R) -> Result<Vec<GroundTruthFrame>, ReplayError> {
    let mut frames = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 && check_header(&line, GROUND_TRUTH_FORMAT, idx + 1)? {
            continue;
        }
        let format_err = |message: String| ReplayError::Format { line: idx + 1, message };
        let rec: GroundTruthRecord = serde_json::from_str(&line).map_err(|e| format_err(e.to_string()))?;
        if rec.pos.len() != JOINT_COUNT {
            return Err(format_err(format!("expected {JOINT_COUNT} positions, got {}", rec.pos.len())));
        }
        let rotations: Vec<Rot6D> = rec.rot6d.into_iter().map(Rot6D).collect();
        let pose = FullBodyPose::from_rotations(&rotations)
            .ok_or_else(|| format_err(format!("expected {JOINT_COUNT} rotations, got {}", rotations.len())))?;
        frames.push(GroundTruthFrame {
            timestamp: rec.t,
            pose,
            positions: rec.pos.into_iter().map(Vec3::from).collect(),
        });
    }
    Ok(frames)
}

/// Mean and population standard deviation of a per-frame metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MetricSummary {
    pub fn from_values(name: impl Into<String>, values: &[f64]) -> Self {
        let count = values.len();
        let (mean, std) = mean_std(values);
        Self { name: name.into(), mean, std, count }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-frame metric values accumulated over a sequence.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    lower: Vec<usize>,
    upper: Vec<usize>,
    mpjpe: Vec<f64>,
    pa_mpjpe: Vec<f64>,
    mpjre: Vec<f64>,
    mpjpe_upper: Vec<f64>,
    mpjpe_lower: Vec<f64>,
}

impl MetricAccumulator {
    /// Uses the default pelvis split into lower and upper body.
    pub fn new() -> Self {
        Self::with_split(default_lower_body(), default_upper_body(JOINT_COUNT))
    }

    pub fn with_split(lower: Vec<usize>, upper: Vec<usize>) -> Self {
        Self { lower, upper, ..Default::default() }
    }

    pub fn frames(&self) -> usize {
        self.mpjpe.len()
    }

    pub fn add(&mut self, pred: &FullBodyPose, pred_positions: &[Vec3], gt: &GroundTruthFrame) -> Result<(), EvalError> {
        let mpjpe = mpjpe(pred_positions, &gt.positions)?;
        let pa = pa_mpjpe(pred_positions, &gt.positions)?;
        let decode = |p: &FullBodyPose| {
            p.rotation_matrices().map_err(|source| EvalError::NotARotation { joint: usize::MAX, source })
        };
        let mpjre = mpjre(&decode(pred)?, &decode(&gt.pose)?)?;
        let upper = mpjpe_subset(pred_positions, &gt.positions, &self.upper)?;
        let lower = mpjpe_subset(pred_positions, &gt.positions, &self.lower)?;
        self.mpjpe.push(mpjpe);
        self.pa_mpjpe.push(pa);
        self.mpjre.push(mpjre);
        self.mpjpe_upper.push(upper);
        self.mpjpe_lower.push(lower);
        Ok(())
    }

    pub fn summaries(&self) -> Vec<MetricSummary> {
        vec![
            MetricSummary::from_values("MPJPE", &self.mpjpe),
            MetricSummary::from_values("PA-MPJPE", &self.pa_mpjpe),
            MetricSummary::from_values("MPJRE", &self.mpjre),
            MetricSummary::from_values("MPJPE-U", &self.mpjpe_upper),
            MetricSummary::from_values("MPJPE-L", &self.mpjpe_lower),
        ]
    }
}

/// One metric per line: name, mean, standard deviation.
pub fn format_report(summaries: &[MetricSummary]) -> String {
    summaries.iter().map(|s| format!("{} {:.4} {:.4}\n", s.name, s.mean, s.std)).collect()
}
