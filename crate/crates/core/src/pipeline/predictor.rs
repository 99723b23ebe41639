//! Pluggable pose predictors.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{DescriptorWindow, DESCRIPTOR_DIM};
use crate::eval::GroundTruthFrame;
use crate::neural::{load_weights, FusionMode, Matrix, NetworkConfig, NeuralError, PoseNetwork};
use crate::pose::FullBodyPose;
use crate::rotation::{yaw_of, Rot6D, RotationError};

/// Replay poses are matched to frames within this many seconds.
pub const REPLAY_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("no replay pose within {REPLAY_TOLERANCE} s of t={0}")]
    MissingPose(f64),
    #[error("empty descriptor window")]
    EmptyWindow,
    #[error(transparent)]
    Rotation(#[from] RotationError),
}

pub struct PredictorInput<'a> {
    pub timestamp: f64,
    pub window: &'a DescriptorWindow,
    /// Refined keypoints, `T × 3J`, when the keypoint stream is enabled.
    pub keypoints: Option<&'a Matrix>,
    pub fusion: FusionMode,
}

/// Turns the current inputs into 22 joint rotations.
pub trait PredictorBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn predict(&self, input: &PredictorInput<'_>) -> Result<FullBodyPose, PredictorError>;
}

/// Forward pass of the dual-stream network.
pub struct ToyNeural {
    network: PoseNetwork,
}

impl ToyNeural {
    pub fn new(network: PoseNetwork) -> Self {
        Self { network }
    }

    pub fn network(&self) -> &PoseNetwork {
        &self.network
    }
}

impl PredictorBackend for ToyNeural {
    fn name(&self) -> &'static str {
        "toy-neural"
    }

    fn predict(&self, input: &PredictorInput<'_>) -> Result<FullBodyPose, PredictorError> {
        if input.window.is_empty() {
            return Err(PredictorError::EmptyWindow);
        }
        let rows = input.window.window_length();
        let hmd = Matrix::from_vec(rows, DESCRIPTOR_DIM, input.window.to_matrix())?;
        Ok(self.network.predict(&hmd, input.keypoints, input.fusion)?)
    }
}

/// Looks up stored poses by timestamp.
pub struct Replay {
    frames: Vec<(f64, FullBodyPose)>,
}

impl Replay {
    pub fn new(mut frames: Vec<(f64, FullBodyPose)>) -> Self {
        frames.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { frames }
    }

    pub fn from_ground_truth(frames: &[GroundTruthFrame]) -> Self {
        Self::new(frames.iter().map(|f| (f.timestamp, f.pose.clone())).collect())
    }

    pub fn lookup(&self, t: f64) -> Option<&FullBodyPose> {
        let i = self.frames.partition_point(|(ts, _)| *ts < t);
        let candidates = [i.checked_sub(1), Some(i)];
        candidates
            .into_iter()
            .flatten()
            .filter_map(|k| self.frames.get(k))
            .filter(|(ts, _)| (ts - t).abs() <= REPLAY_TOLERANCE)
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
            .map(|(_, p)| p)
    }
}

impl PredictorBackend for Replay {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn predict(&self, input: &PredictorInput<'_>) -> Result<FullBodyPose, PredictorError> {
        self.lookup(input.timestamp)
            .map(|p| FullBodyPose { positions: None, ..p.clone() })
            .ok_or(PredictorError::MissingPose(input.timestamp))
    }
}

/// Rest pose whose root follows the headset heading.
pub struct Heuristic;

impl PredictorBackend for Heuristic {
    fn name(&self) -> &'static str {
        "heuristic"
    }

    fn predict(&self, input: &PredictorInput<'_>) -> Result<FullBodyPose, PredictorError> {
        let latest = input.window.rows().last().copied().ok_or(PredictorError::EmptyWindow)?;
        let head = latest.head().rotation()?;
        let mut pose = FullBodyPose::identity();
        pose.root_rotation = Rot6D::from_matrix_unchecked(&yaw_of(&head));
        Ok(pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    #[default]
    ToyNeural,
    Replay,
    Heuristic,
}

impl std::str::FromStr for PredictorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "toy-neural" => Ok(Self::ToyNeural),
            "replay" => Ok(Self::Replay),
            "heuristic" => Ok(Self::Heuristic),
            other => Err(format!("unknown predictor {other:?} (expected toy-neural, replay or heuristic)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    /// Weights file for the toy-neural predictor; random weights from `seed` if absent.
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub network: NetworkConfig,
    /// Ground-truth file feeding the replay predictor.
    pub poses: Option<PathBuf>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { kind: PredictorKind::ToyNeural, weights: None, seed: 0, network: NetworkConfig::default(), poses: None }
    }
}

/// Builds the predictor named by `cfg`. `replay_source` overrides `cfg.poses`.
pub fn build_predictor(
    cfg: &PredictorConfig,
    replay_source: Option<&[GroundTruthFrame]>,
) -> Result<Box<dyn PredictorBackend>, super::PipelineError> {
    use super::PipelineError;
    match cfg.kind {
        PredictorKind::ToyNeural => {
            let network = match &cfg.weights {
                Some(path) => load_weights(path).map_err(|e| PipelineError::Predictor(e.into()))?,
                None => PoseNetwork::random(&cfg.network, cfg.seed).map_err(|e| PipelineError::Predictor(e.into()))?,
            };
            Ok(Box::new(ToyNeural::new(network)))
        }
        PredictorKind::Heuristic => Ok(Box::new(Heuristic)),
        PredictorKind::Replay => {
            if let Some(frames) = replay_source {
                return Ok(Box::new(Replay::from_ground_truth(frames)));
            }
            let path = cfg
                .poses
                .as_ref()
                .ok_or_else(|| PipelineError::InvalidConfig("replay predictor needs a ground-truth file".into()))?;
            let file = std::fs::File::open(path).map_err(|e| PipelineError::Io { path: path.clone(), source: e })?;
            let frames = crate::eval::read_ground_truth(std::io::BufReader::new(file))?;
            Ok(Box::new(Replay::from_ground_truth(&frames)))
        }
    }
}
