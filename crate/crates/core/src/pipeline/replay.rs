//! Offline replay of recorded streams and throughput measurement.

use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{build_predictor, FrameResult, PipelineConfig, PipelineError, PredictorBackend, Session, StageLatency};
use crate::descriptor::{read_motion, MotionFrame};
use crate::eval::{
    generate_sequence, mean_std, read_ground_truth, CameraModel, GroundTruthFrame, MetricAccumulator, MetricSummary,
    MotionKind, SequenceSpec,
};
use crate::refine::{read_keypoints, KeypointFrame};
use crate::skeleton::KinematicTree;

/// A keypoint sample is paired with the motion frame it is closest to, if
/// within this many seconds.
pub const PAIRING_TOLERANCE: f64 = 0.008;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub frames: usize,
    /// Present when ground truth was supplied.
    pub metrics: Option<Vec<MetricSummary>>,
    pub mean_latency: StageLatency,
    /// Frames over wall time of the whole replay.
    pub fps: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct LatencySum {
    sum: StageLatency,
    n: usize,
}

impl LatencySum {
    fn add(&mut self, l: &StageLatency) {
        let s = &mut self.sum;
        s.descriptor += l.descriptor;
        s.refine += l.refine;
        s.predict += l.predict;
        s.kinematics += l.kinematics;
        s.filter += l.filter;
        s.kpo += l.kpo;
        s.total += l.total;
        self.n += 1;
    }

    fn mean(&self) -> StageLatency {
        let n = self.n.max(1) as f64;
        let s = &self.sum;
        StageLatency {
            descriptor: s.descriptor / n,
            refine: s.refine / n,
            predict: s.predict / n,
            kinematics: s.kinematics / n,
            filter: s.filter / n,
            kpo: s.kpo / n,
            total: s.total / n,
        }
    }
}

/// Walks `keypoints` alongside the motion timestamps.
struct KeypointPairer<'a> {
    frames: &'a [KeypointFrame],
    next: usize,
}

impl<'a> KeypointPairer<'a> {
    fn take(&mut self, t: f64) -> Option<&'a KeypointFrame> {
        let mut best: Option<&KeypointFrame> = None;
        while let Some(k) = self.frames.get(self.next) {
            if k.timestamp > t + PAIRING_TOLERANCE {
                break;
            }
            self.next += 1;
            if (k.timestamp - t).abs() <= PAIRING_TOLERANCE
                && best.is_none_or(|b| (k.timestamp - t).abs() <= (b.timestamp - t).abs())
            {
                best = Some(k);
            }
        }
        best
    }
}

/// Runs every motion frame through `session`, calling `on_frame` with each
/// result. Ground truth, if given, must have one frame per motion frame.
pub fn run_replay(
    session: &mut Session,
    motion: &[MotionFrame],
    keypoints: Option<&[KeypointFrame]>,
    ground_truth: Option<&[GroundTruthFrame]>,
    mut on_frame: impl FnMut(&FrameResult),
) -> Result<ReplayReport, PipelineError> {
    if let Some(gt) = ground_truth {
        if gt.len() != motion.len() {
            return Err(PipelineError::FrameCountMismatch {
                what: "ground truth",
                expected: motion.len(),
                got: gt.len(),
            });
        }
    }
    let mut pairer = KeypointPairer { frames: keypoints.unwrap_or(&[]), next: 0 };
    let mut acc = MetricAccumulator::new();
    let mut latency = LatencySum::default();
    let start = Instant::now();
    for (i, frame) in motion.iter().enumerate() {
        let kp = pairer.take(frame.timestamp());
        let result = session.process_frame(frame, kp)?;
        latency.add(&result.latency);
        if let Some(gt) = ground_truth {
            acc.add(&result.pose, result.positions(), &gt[i])?;
        }
        on_frame(&result);
    }
    Ok(ReplayReport {
        frames: motion.len(),
        metrics: ground_truth.map(|_| acc.summaries()),
        mean_latency: latency.mean(),
        fps: motion.len() as f64 / start.elapsed().as_secs_f64(),
    })
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>, PipelineError> {
    std::fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })
}

/// File-based replay. A replay predictor is fed from the ground-truth file.
pub fn run_replay_files(
    config: &PipelineConfig,
    motion_path: &Path,
    keypoints_path: Option<&Path>,
    ground_truth_path: Option<&Path>,
    on_frame: impl FnMut(&FrameResult),
) -> Result<ReplayReport, PipelineError> {
    config.validate()?;
    let tree = Arc::new(config.load_skeleton()?);
    let motion = read_motion(open(motion_path)?)?;
    let keypoints = keypoints_path.map(|p| open(p).and_then(|r| Ok(read_keypoints(r)?))).transpose()?;
    let ground_truth = ground_truth_path.map(|p| open(p).and_then(|r| Ok(read_ground_truth(r)?))).transpose()?;
    let predictor: Arc<dyn PredictorBackend> = build_predictor(&config.predictor, ground_truth.as_deref())?.into();
    let mut session = Session::new(config.clone(), tree, predictor)?;
    run_replay(&mut session, &motion, keypoints.as_deref(), ground_truth.as_deref(), on_frame)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub runs: usize,
    pub fps_mean: f64,
    pub fps_std: f64,
    pub mean_latency: StageLatency,
}

/// Frames per second of end-to-end processing on a synthetic 60 Hz walk,
/// one fresh session per run.
pub fn run_benchmark(
    config: &PipelineConfig,
    tree: Arc<KinematicTree>,
    predictor: Arc<dyn PredictorBackend>,
    frames: usize,
    runs: usize,
) -> Result<BenchReport, PipelineError> {
    if frames == 0 || runs == 0 {
        return Err(PipelineError::InvalidConfig("benchmark needs at least one frame and one run".into()));
    }
    let spec = SequenceSpec::new(MotionKind::Walk, frames as f64 / 60.0, 60.0, 0);
    let seq = generate_sequence(&spec, &tree, &CameraModel::default())?;
    let motion = seq.motion_frames();
    let keypoints = seq.keypoint_frames();
    let mut fps = Vec::with_capacity(runs);
    let mut latency = LatencySum::default();
    for _ in 0..runs {
        let mut session = Session::new(config.clone(), tree.clone(), predictor.clone())?;
        let start = Instant::now();
        for (m, k) in motion.iter().zip(&keypoints) {
            let r = session.process_frame(m, Some(k))?;
            latency.add(&r.latency);
        }
        fps.push(motion.len() as f64 / start.elapsed().as_secs_f64());
    }
    let (fps_mean, fps_std) = mean_std(&fps);
    Ok(BenchReport { frames: motion.len(), runs, fps_mean, fps_std, mean_latency: latency.mean() })
}
