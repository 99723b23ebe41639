//! Forward passes of the dual-stream pose network.
//!
//! Each input stream (the 72-D descriptor window and the refined keypoint
//! window) goes through its own spatiotemporal encoder:
//!
//! ```text
//! M = T_j( F( [T_f(E(X) + P)]_last ) + e_j )
//! ```
//!
//! `E` embeds each frame to width `S`, `P` is a learned per-frame position
//! table, `T_f` is a stack of transformer layers over frames, only the final
//! frame token is kept, `F` expands it to `J` joint tokens, `e_j` is a learned
//! joint table and `T_j` is a stack of transformer layers over joints.
//!
//! HMD joint features query keypoint features through multi-head
//! cross-attention, and two MLP heads decode the pelvis token to the root
//! rotation and the remaining tokens to local rotations (raw 6D).
//!
//! Weights are never trained here; they come from a file or a seeded
//! random initializer.

mod layers;
mod weights;

pub use layers::{
    softmax_in_place, AttentionProbe, FeedForward, LayerNorm, Linear, Matrix, Mlp, MultiHeadAttention,
    TransformerLayer,
};
pub use weights::{load_weights, read_weights, save_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{FullBodyPose, JOINT_COUNT, LOCAL_ROTATION_COUNT};
use crate::rotation::Rot6D;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite activation after {0}")]
    NonFiniteActivation(&'static str),
    #[error("not a weights file (bad magic)")]
    BadMagic,
    #[error("unsupported weights version {0}")]
    UnsupportedVersion(u8),
    #[error("weights checksum failure")]
    ChecksumFailure,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub window: usize,
    pub joints: usize,
    pub hmd_dim: usize,
    pub keypoint_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            layers: 2,
            window: crate::descriptor::DEFAULT_WINDOW,
            joints: JOINT_COUNT,
            hmd_dim: crate::descriptor::DESCRIPTOR_DIM,
            keypoint_dim: 3 * JOINT_COUNT,
        }
    }
}

fn ensure_finite(m: &Matrix, stage: &'static str) -> Result<(), NeuralError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(NeuralError::NonFiniteActivation(stage))
    }
}

fn mismatch(what: impl Into<String>) -> NeuralError {
    NeuralError::ShapeMismatch(what.into())
}

fn check_linear(l: &Linear, input: usize, output: usize, name: &str) -> Result<(), NeuralError> {
    if l.input_dim() != input || l.output_dim() != output || l.bias.len() != output {
        return Err(mismatch(format!(
            "{name}: expected {input}x{output}, found {}x{}",
            l.input_dim(),
            l.output_dim()
        )));
    }
    Ok(())
}

fn check_norm(n: &LayerNorm, width: usize, name: &str) -> Result<(), NeuralError> {
    if n.gamma.len() != width || n.beta.len() != width {
        return Err(mismatch(format!("{name}: expected width {width}")));
    }
    Ok(())
}

fn check_attention(a: &MultiHeadAttention, width: usize, name: &str) -> Result<(), NeuralError> {
    if a.heads == 0 || width % a.heads != 0 {
        return Err(mismatch(format!("{name}: {} heads do not divide width {width}", a.heads)));
    }
    for (l, part) in [(&a.query, "query"), (&a.key, "key"), (&a.value, "value"), (&a.output, "output")] {
        check_linear(l, width, width, &format!("{name}.{part}"))?;
    }
    Ok(())
}

fn check_feed_forward(f: &FeedForward, width: usize, name: &str) -> Result<(), NeuralError> {
    check_norm(&f.norm, width, name)?;
    let hidden = f.mlp.hidden.output_dim();
    check_linear(&f.mlp.hidden, width, hidden, name)?;
    check_linear(&f.mlp.output, hidden, width, name)
}

fn check_layer(l: &TransformerLayer, width: usize, name: &str) -> Result<(), NeuralError> {
    check_norm(&l.norm, width, name)?;
    check_attention(&l.attention, width, name)?;
    check_feed_forward(&l.feed_forward, width, name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub embed: Linear,
    /// `T × S`, added to the embedded frames.
    pub positional: Matrix,
    pub frame_layers: Vec<TransformerLayer>,
    /// Expands the summary token from `S` to `J·S`.
    pub summary: Mlp,
    /// `J × S`.
    pub joint_embedding: Matrix,
    pub joint_layers: Vec<TransformerLayer>,
}

impl EncoderWeights {
    pub fn random(cfg: &NetworkConfig, input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, j) = (cfg.width, cfg.joints);
        Self {
            embed: Linear::random(&mut rng, input_dim, s, 1.0),
            positional: layers::glorot(&mut rng, cfg.window, s, 0.5),
            frame_layers: (0..cfg.layers).map(|_| TransformerLayer::random(&mut rng, s, cfg.heads)).collect(),
            summary: Mlp {
                hidden: Linear::random(&mut rng, s, s, 1.0),
                output: Linear::random(&mut rng, s, j * s, 1.0),
            },
            joint_embedding: layers::glorot(&mut rng, j, s, 0.5),
            joint_layers: (0..cfg.layers).map(|_| TransformerLayer::random(&mut rng, s, cfg.heads)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.embed.input_dim()
    }

    pub fn width(&self) -> usize {
        self.embed.output_dim()
    }

    pub fn window(&self) -> usize {
        self.positional.rows()
    }

    pub fn joints(&self) -> usize {
        self.joint_embedding.rows()
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let s = self.width();
        if s == 0 || self.joints() == 0 || self.window() == 0 {
            return Err(mismatch("encoder dimensions must be positive"));
        }
        if self.positional.cols() != s {
            return Err(mismatch("positional table width"));
        }
        if self.joint_embedding.cols() != s {
            return Err(mismatch("joint embedding width"));
        }
        for (i, l) in self.frame_layers.iter().enumerate() {
            check_layer(l, s, &format!("frame layer {i}"))?;
        }
        for (i, l) in self.joint_layers.iter().enumerate() {
            check_layer(l, s, &format!("joint layer {i}"))?;
        }
        let hidden = self.summary.hidden.output_dim();
        check_linear(&self.summary.hidden, s, hidden, "summary.hidden")?;
        check_linear(&self.summary.output, hidden, self.joints() * s, "summary.output")
    }

    /// Frame tokens after the frame-wise encoder, one row per input frame.
    pub fn frame_tokens(&self, window: &Matrix, mut probe: Option<&mut AttentionProbe>) -> Result<Matrix, NeuralError> {
        if window.rows() == 0 || window.rows() > self.window() {
            return Err(NeuralError::Shape(format!(
                "window of {} frames for an encoder of length {}",
                window.rows(),
                self.window()
            )));
        }
        if window.cols() != self.input_dim() {
            return Err(NeuralError::Shape(format!(
                "frames of width {} for an encoder expecting {}",
                window.cols(),
                self.input_dim()
            )));
        }
        let mut x = self.embed.forward(window)?;
        for i in 0..x.rows() {
            for (v, p) in x.row_mut(i).iter_mut().zip(self.positional.row(i)) {
                *v += p;
            }
        }
        for layer in &self.frame_layers {
            x = layer.forward(&x, probe.as_deref_mut())?;
        }
        ensure_finite(&x, "frame encoder")?;
        Ok(x)
    }

    /// Joint features `J × S` from a single summary token.
    pub fn joint_features(&self, token: &[f64], mut probe: Option<&mut AttentionProbe>) -> Result<Matrix, NeuralError> {
        let s = self.width();
        let token = Matrix::from_vec(1, token.len(), token.to_vec())?;
        let expanded = self.summary.forward(&token)?;
        let mut x = Matrix::from_vec(self.joints(), s, expanded.data().to_vec())?;
        x.add_assign(&self.joint_embedding);
        for layer in &self.joint_layers {
            x = layer.forward(&x, probe.as_deref_mut())?;
        }
        ensure_finite(&x, "joint encoder")?;
        Ok(x)
    }
}

pub fn spatiotemporal_encode(window: &Matrix, w: &EncoderWeights) -> Result<Matrix, NeuralError> {
    spatiotemporal_encode_probed(window, w, None)
}

pub fn spatiotemporal_encode_probed(
    window: &Matrix,
    w: &EncoderWeights,
    mut probe: Option<&mut AttentionProbe>,
) -> Result<Matrix, NeuralError> {
    let frames = w.frame_tokens(window, probe.as_deref_mut())?;
    w.joint_features(frames.row(frames.rows() - 1), probe)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub query_norm: LayerNorm,
    pub context_norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub feed_forward: FeedForward,
    pub decoder_global: Mlp,
    pub decoder_local: Mlp,
}

impl FusionWeights {
    pub fn random(cfg: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.width;
        let decoder = |rng: &mut ChaCha8Rng| {
            let mut output = Linear::random(rng, s, 6, 0.1);
            // Start near the rest pose so untrained outputs decode cleanly.
            output.bias = Rot6D::IDENTITY.0.to_vec();
            Mlp { hidden: Linear::random(rng, s, s, 1.0), output }
        };
        Self {
            query_norm: LayerNorm::new(s),
            context_norm: LayerNorm::new(s),
            attention: MultiHeadAttention::random(&mut rng, s, cfg.heads),
            feed_forward: FeedForward::random(&mut rng, s),
            decoder_global: decoder(&mut rng),
            decoder_local: decoder(&mut rng),
        }
    }

    pub fn width(&self) -> usize {
        self.attention.width()
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let s = self.width();
        check_norm(&self.query_norm, s, "fusion.query_norm")?;
        check_norm(&self.context_norm, s, "fusion.context_norm")?;
        check_attention(&self.attention, s, "fusion.attention")?;
        check_feed_forward(&self.feed_forward, s, "fusion.feed_forward")?;
        for (d, name) in [(&self.decoder_global, "decoder_global"), (&self.decoder_local, "decoder_local")] {
            let hidden = d.hidden.output_dim();
            check_linear(&d.hidden, s, hidden, name)?;
            check_linear(&d.output, hidden, 6, name)?;
        }
        Ok(())
    }
}

/// `M̃ = FF(M + Attn(LN(M); LN(N), LN(N)))`.
pub fn cross_attention_fuse(m: &Matrix, n: &Matrix, w: &FusionWeights) -> Result<Matrix, NeuralError> {
    cross_attention_fuse_probed(m, n, w, None)
}

pub fn cross_attention_fuse_probed(
    m: &Matrix,
    n: &Matrix,
    w: &FusionWeights,
    probe: Option<&mut AttentionProbe>,
) -> Result<Matrix, NeuralError> {
    if m.shape() != n.shape() {
        return Err(NeuralError::Shape(format!("fusing {:?} with {:?}", m.shape(), n.shape())));
    }
    let q = w.query_norm.forward(m)?;
    let kv = w.context_norm.forward(n)?;
    let mut h = w.attention.forward(&q, &kv, probe)?;
    h.add_assign(m);
    let out = w.feed_forward.forward(&h)?;
    ensure_finite(&out, "fusion")?;
    Ok(out)
}

/// Root rotation from token 0, local rotations from tokens 1..22, raw 6D.
pub fn decode_pose(m: &Matrix, w: &FusionWeights) -> Result<FullBodyPose, NeuralError> {
    if m.rows() != JOINT_COUNT {
        return Err(NeuralError::Shape(format!("decoding {} tokens, expected {JOINT_COUNT}", m.rows())));
    }
    let s = m.cols();
    let root_token = Matrix::from_vec(1, s, m.row(0).to_vec())?;
    let rest = Matrix::from_vec(LOCAL_ROTATION_COUNT, s, m.data()[s..].to_vec())?;
    let root = w.decoder_global.forward(&root_token)?;
    let locals = w.decoder_local.forward(&rest)?;
    ensure_finite(&root, "global decoder")?;
    ensure_finite(&locals, "local decoder")?;
    let to6 = |row: &[f64]| Rot6D([row[0], row[1], row[2], row[3], row[4], row[5]]);
    let mut pose = FullBodyPose::identity();
    pose.root_rotation = to6(root.row(0));
    for (j, slot) in pose.local_rotations.iter_mut().enumerate() {
        *slot = to6(locals.row(j));
    }
    Ok(pose)
}

/// How the keypoint stream enters the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    CrossAttention,
    /// Ablation: `M̃ = M + N`.
    Additive,
    /// Ablation: keypoints ignored, `M̃ = M`.
    HmdOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNetwork {
    pub hmd: EncoderWeights,
    pub keypoint: EncoderWeights,
    pub fusion: FusionWeights,
}

impl PoseNetwork {
    pub fn random(cfg: &NetworkConfig, seed: u64) -> Result<Self, NeuralError> {
        let net = Self {
            hmd: EncoderWeights::random(cfg, cfg.hmd_dim, seed),
            keypoint: EncoderWeights::random(cfg, cfg.keypoint_dim, seed.wrapping_add(1)),
            fusion: FusionWeights::random(cfg, seed.wrapping_add(2)),
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        self.hmd.validate()?;
        self.keypoint.validate()?;
        self.fusion.validate()?;
        let s = self.fusion.width();
        if self.hmd.width() != s || self.keypoint.width() != s {
            return Err(mismatch("encoder and fusion widths differ"));
        }
        if self.hmd.joints() != JOINT_COUNT || self.keypoint.joints() != JOINT_COUNT {
            return Err(mismatch(format!("encoders must emit {JOINT_COUNT} joint tokens")));
        }
        Ok(())
    }

    pub fn predict(
        &self,
        hmd_window: &Matrix,
        keypoint_window: Option<&Matrix>,
        mode: FusionMode,
    ) -> Result<FullBodyPose, NeuralError> {
        let m = spatiotemporal_encode(hmd_window, &self.hmd)?;
        let fused = match (mode, keypoint_window) {
            (FusionMode::HmdOnly, _) | (_, None) => m,
            (FusionMode::CrossAttention, Some(k)) => {
                let n = spatiotemporal_encode(k, &self.keypoint)?;
                cross_attention_fuse(&m, &n, &self.fusion)?
            }
            (FusionMode::Additive, Some(k)) => {
                let mut n = spatiotemporal_encode(k, &self.keypoint)?;
                n.add_assign(&m);
                n
            }
        };
        decode_pose(&fused, &self.fusion)
    }
}
