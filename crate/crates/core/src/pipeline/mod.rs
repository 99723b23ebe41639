//! Per-frame orchestration of the estimation stages.
//!
//! Stage order is fixed: descriptor push, keypoint refinement, prediction,
//! forward kinematics anchored to the headset, one-Euro smoothing of joint
//! positions, then kinematic pose optimization. A disabled stage passes its
//! input through untouched and reports zero latency.

mod predictor;
mod replay;

pub use predictor::{
    build_predictor, Heuristic, PredictorBackend, PredictorConfig, PredictorError, PredictorInput, PredictorKind,
    Replay, ToyNeural, REPLAY_TOLERANCE,
};
pub use replay::{run_benchmark, run_replay, run_replay_files, BenchReport, ReplayReport, PAIRING_TOLERANCE};

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{DescriptorError, DescriptorWindow, MotionFrame, ReplayError, DEFAULT_WINDOW};
use crate::filtering::{FilterError, OneEuroBank, OneEuroParams};
use crate::kinematics::{forward_kinematics, KinematicsError, WorldAnchor};
use crate::kpo::{optimize, KpoConfig, KpoError, KpoProblem, KpoReport};
use crate::neural::{FusionMode, Matrix};
use crate::pose::{FullBodyPose, JOINT_COUNT};
use crate::refine::{refine_with_mode, KeypointFrame, KeypointSequence, MaskMode, RefineCache, RefineError};
use crate::rotation::Vec3;
use crate::skeleton::{KinematicTree, HEAD, LEFT_WRIST, RIGHT_WRIST};

/// Visibility decay per consecutive frame without a camera sample.
pub const MISSING_KEYPOINT_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Descriptor,
    Refine,
    Predict,
    Kinematics,
    Filter,
    Kpo,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Descriptor => "descriptor",
            Stage::Refine => "refine",
            Stage::Predict => "predict",
            Stage::Kinematics => "kinematics",
            Stage::Filter => "filter",
            Stage::Kpo => "kpo",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Predict(#[from] PredictorError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Kpo(#[from] KpoError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("stale frame at t={timestamp} (last processed t={last})")]
    StaleFrame { timestamp: f64, last: f64 },
    #[error("{stage} stage failed: {source}")]
    Stage { stage: Stage, source: StageError },
    #[error("predictor: {0}")]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    FileFormat(#[from] ReplayError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("{what} has {got} frames, motion file has {expected}")]
    FrameCountMismatch { what: &'static str, expected: usize, got: usize },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

fn stage_err<E: Into<StageError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, source: e.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub use_keypoints: bool,
    pub use_refine: bool,
    /// Rescale the visibility mask so fully visible joints pass unchanged.
    pub use_refine_normalized: bool,
    /// Cross-attention fusion; when off, encoder features are summed.
    pub use_fusion: bool,
    pub use_filter: bool,
    pub use_kpo: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            use_keypoints: true,
            use_refine: true,
            use_refine_normalized: false,
            use_fusion: true,
            use_filter: true,
            use_kpo: true,
        }
    }
}

/// Stage names accepted by [`StageToggles::ablate`], optionally prefixed with `no-`.
pub const ABLATIONS: [&str; 5] = ["keypoints", "refine", "fusion", "filter", "kpo"];

impl StageToggles {
    /// Turns off one stage. Dropping keypoints also drops everything that
    /// consumes them, which leaves the headset-only configuration.
    pub fn ablate(&mut self, name: &str) -> Result<(), PipelineError> {
        match name.strip_prefix("no-").unwrap_or(name) {
            "keypoints" | "hmd-only" => {
                self.use_keypoints = false;
                self.use_refine = false;
                self.use_refine_normalized = false;
                self.use_fusion = false;
            }
            "refine" => {
                self.use_refine = false;
                self.use_refine_normalized = false;
            }
            "fusion" => self.use_fusion = false,
            "filter" => self.use_filter = false,
            "kpo" => self.use_kpo = false,
            other => {
                return Err(PipelineError::InvalidConfig(format!(
                    "unknown ablation {other:?} (expected one of {})",
                    ABLATIONS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn fusion_mode(&self) -> FusionMode {
        match (self.use_keypoints, self.use_fusion) {
            (false, _) => FusionMode::HmdOnly,
            (true, true) => FusionMode::CrossAttention,
            (true, false) => FusionMode::Additive,
        }
    }
}

/// Gaussian noise added to joint positions after forward kinematics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionNoise {
    pub sigma_m: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub window: usize,
    pub stages: StageToggles,
    /// Smoothing of output joint positions.
    pub filter: OneEuroParams,
    /// Smoothing of keypoint visibility during refinement.
    pub visibility_filter: OneEuroParams,
    pub kpo: KpoConfig,
    pub predictor: PredictorConfig,
    pub position_noise: Option<PositionNoise>,
    /// Skeleton file; the built-in 22-joint tree if absent.
    pub skeleton: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stages: StageToggles::default(),
            filter: OneEuroParams::default(),
            visibility_filter: OneEuroParams::default(),
            kpo: KpoConfig::default(),
            predictor: PredictorConfig::default(),
            position_noise: None,
            skeleton: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.stages.use_fusion && !self.stages.use_keypoints {
            return bad("use_fusion requires use_keypoints".into());
        }
        if self.stages.use_refine_normalized && !self.stages.use_refine {
            return bad("use_refine_normalized requires use_refine".into());
        }
        self.filter.validate().map_err(|e| PipelineError::InvalidConfig(format!("filter: {e}")))?;
        self.visibility_filter
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(format!("visibility_filter: {e}")))?;
        self.kpo.validate().map_err(|e| PipelineError::InvalidConfig(format!("kpo: {e}")))?;
        if let Some(&j) = self.kpo.observed.iter().find(|j| ![HEAD, LEFT_WRIST, RIGHT_WRIST].contains(j)) {
            return bad(format!("kpo observed joint {j} has no tracked device"));
        }
        if let Some(n) = &self.position_noise {
            if !(n.sigma_m >= 0.0 && n.sigma_m.is_finite()) {
                return bad("position_noise.sigma_m must be nonnegative".into());
            }
        }
        if self.predictor.kind == PredictorKind::ToyNeural && self.predictor.weights.is_none() {
            let net = &self.predictor.network;
            if net.window < self.window {
                return bad(format!("network window {} is shorter than pipeline window {}", net.window, self.window));
            }
        }
        Ok(())
    }

    pub fn load_skeleton(&self) -> Result<KinematicTree, PipelineError> {
        match &self.skeleton {
            None => Ok(KinematicTree::smpl22()),
            Some(path) => KinematicTree::load(path).map_err(|e| PipelineError::InvalidConfig(format!("skeleton: {e}"))),
        }
    }
}

/// Per-stage wall time in microseconds; zero for disabled stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub descriptor: f64,
    pub refine: f64,
    pub predict: f64,
    pub kinematics: f64,
    pub filter: f64,
    pub kpo: f64,
    pub total: f64,
}

impl StageLatency {
    pub fn stage_sum(&self) -> f64 {
        self.descriptor + self.refine + self.predict + self.kinematics + self.filter + self.kpo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub timestamp: f64,
    /// Orthonormalized rotations with final world positions.
    pub pose: FullBodyPose,
    pub latency: StageLatency,
    pub kpo: Option<KpoReport>,
}

impl FrameResult {
    pub fn positions(&self) -> &[Vec3] {
        self.pose.positions.as_deref().unwrap_or(&[])
    }
}

fn micros(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e6
}

/// Stateful per-stream pipeline. Sessions share nothing mutable.
pub struct Session {
    config: PipelineConfig,
    tree: Arc<KinematicTree>,
    predictor: Arc<dyn PredictorBackend>,
    window: DescriptorWindow,
    keypoints: VecDeque<KeypointFrame>,
    refine_cache: Option<RefineCache>,
    last_keypoints: Option<KeypointFrame>,
    missing_keypoints: u32,
    position_filter: OneEuroBank,
    noise: Option<(Normal<f64>, ChaCha8Rng)>,
    last_timestamp: Option<f64>,
}

impl Session {
    pub fn new(
        config: PipelineConfig,
        tree: Arc<KinematicTree>,
        predictor: Arc<dyn PredictorBackend>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        if tree.len() != JOINT_COUNT {
            return Err(PipelineError::InvalidConfig(format!("skeleton must have {JOINT_COUNT} joints")));
        }
        let position_filter = OneEuroBank::new(3 * JOINT_COUNT, config.filter)
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        let noise = match config.position_noise {
            Some(n) if n.sigma_m > 0.0 => Some((
                Normal::new(0.0, n.sigma_m).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?,
                ChaCha8Rng::seed_from_u64(n.seed),
            )),
            _ => None,
        };
        Ok(Self {
            window: DescriptorWindow::new(config.window),
            keypoints: VecDeque::with_capacity(config.window),
            refine_cache: None,
            last_keypoints: None,
            missing_keypoints: 0,
            position_filter,
            noise,
            last_timestamp: None,
            config,
            tree,
            predictor,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn predictor_name(&self) -> &'static str {
        self.predictor.name()
    }

    /// Keypoints for this frame: the given sample, or the last one carried
    /// forward with decayed visibility.
    fn keypoints_for(&mut self, t: f64, sample: Option<&KeypointFrame>) -> Option<KeypointFrame> {
        match sample {
            Some(k) => {
                self.missing_keypoints = 0;
                self.last_keypoints = Some(k.clone());
                Some(KeypointFrame { timestamp: t, ..k.clone() })
            }
            None => {
                let last = self.last_keypoints.as_ref()?;
                self.missing_keypoints += 1;
                let decay = MISSING_KEYPOINT_DECAY.powi(self.missing_keypoints as i32);
                Some(KeypointFrame {
                    timestamp: t,
                    positions: last.positions.clone(),
                    visibility: last.visibility.iter().map(|z| z * decay).collect(),
                })
            }
        }
    }

    /// Refined (or raw) keypoint window as a `T × 3J` matrix.
    fn keypoint_stage(&mut self, frame: KeypointFrame) -> Result<Matrix, PipelineError> {
        if self.keypoints.back().is_some_and(|k| k.positions.len() != frame.positions.len()) {
            return Err(stage_err(Stage::Refine)(RefineError::Shape("keypoint joint count changed".into())));
        }
        if self.keypoints.len() == self.config.window {
            self.keypoints.pop_front();
        }
        self.keypoints.push_back(frame);
        let rows: Vec<Vec<Vec3>> = if self.config.stages.use_refine {
            let mode = if self.config.stages.use_refine_normalized { MaskMode::Normalized } else { MaskMode::Literal };
            let seq = KeypointSequence::new(self.keypoints.iter().cloned().collect()).map_err(stage_err(Stage::Refine))?;
            let (refined, cache) =
                refine_with_mode(&seq, self.refine_cache.as_ref(), self.config.visibility_filter, mode)
                    .map_err(stage_err(Stage::Refine))?;
            self.refine_cache = Some(cache);
            refined
        } else {
            self.keypoints.iter().map(|k| k.positions.clone()).collect()
        };
        let joints = rows[0].len();
        let pad = self.config.window - rows.len();
        let mut data = Vec::with_capacity(self.config.window * 3 * joints);
        for row in std::iter::repeat_n(&rows[0], pad).chain(rows.iter()) {
            data.extend(row.iter().flat_map(|p| [p.x, p.y, p.z]));
        }
        Matrix::from_vec(self.config.window, 3 * joints, data)
            .map_err(|e| stage_err(Stage::Refine)(RefineError::Shape(e.to_string())))
    }

    pub fn process_frame(
        &mut self,
        devices: &MotionFrame,
        keypoints: Option<&KeypointFrame>,
    ) -> Result<FrameResult, PipelineError> {
        let start = Instant::now();
        let t = devices.timestamp();
        if let Some(last) = self.last_timestamp {
            if t.partial_cmp(&last) != Some(std::cmp::Ordering::Greater) {
                return Err(PipelineError::StaleFrame { timestamp: t, last });
            }
        }
        let mut latency = StageLatency::default();

        let stage = Instant::now();
        let descriptor = devices.descriptor().map_err(stage_err(Stage::Descriptor))?;
        self.window.push(descriptor).map_err(stage_err(Stage::Descriptor))?;
        self.last_timestamp = Some(t);
        latency.descriptor = micros(stage);

        let stage = Instant::now();
        let keypoint_matrix = if self.config.stages.use_keypoints {
            match self.keypoints_for(t, keypoints) {
                Some(frame) => Some(self.keypoint_stage(frame)?),
                None => None,
            }
        } else {
            None
        };
        if self.config.stages.use_keypoints && self.config.stages.use_refine {
            latency.refine = micros(stage);
        }

        let stage = Instant::now();
        let input = PredictorInput {
            timestamp: t,
            window: &self.window,
            keypoints: keypoint_matrix.as_ref(),
            fusion: self.config.stages.fusion_mode(),
        };
        let predicted = self.predictor.predict(&input).map_err(stage_err(Stage::Predict))?;
        latency.predict = micros(stage);

        let stage = Instant::now();
        let mut pose = predicted.orthonormalized().map_err(|e| {
            stage_err(Stage::Kinematics)(KinematicsError::Rotation { joint: 0, source: e })
        })?;
        let anchor = WorldAnchor { head_position: devices.head.position, head_orientation: devices.head.orientation };
        let mut positions = forward_kinematics(&pose, &self.tree, &anchor).map_err(stage_err(Stage::Kinematics))?;
        if let Some((dist, rng)) = self.noise.as_mut() {
            for p in positions.iter_mut() {
                *p += Vec3::new(dist.sample(rng), dist.sample(rng), dist.sample(rng));
            }
        }
        latency.kinematics = micros(stage);

        if self.config.stages.use_filter {
            let stage = Instant::now();
            let flat: Vec<f64> = positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
            let smoothed = self.position_filter.filter(&flat, t).map_err(stage_err(Stage::Filter))?;
            for (p, c) in positions.iter_mut().zip(smoothed.chunks_exact(3)) {
                *p = Vec3::new(c[0], c[1], c[2]);
            }
            latency.filter = micros(stage);
        }

        let mut kpo_report = None;
        if self.config.stages.use_kpo {
            let stage = Instant::now();
            let anchors = self
                .config
                .kpo
                .observed
                .iter()
                .map(|&j| match j {
                    HEAD => devices.head.position,
                    LEFT_WRIST => devices.left.position,
                    _ => devices.right.position,
                })
                .collect();
            let problem = KpoProblem::new(positions, anchors, &self.tree);
            let (optimized, report) = optimize(&problem, &self.config.kpo).map_err(stage_err(Stage::Kpo))?;
            positions = optimized;
            kpo_report = Some(report);
            latency.kpo = micros(stage);
        }

        pose.positions = Some(positions);
        latency.total = micros(start);
        Ok(FrameResult { timestamp: t, pose, latency, kpo: kpo_report })
    }
}
