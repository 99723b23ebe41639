//! Visibility-aware temporal refinement of egocentric 3D keypoints.
//!
//! Visibility probabilities are smoothed per joint with a one-Euro filter,
//! turned into a mask `η = max(ζ̃ − 0.5, 0)`, and multiplied into the joint
//! coordinates. With a [`RefineCache`] only the frames appended since the
//! previous call are filtered; earlier frames are copied from the cache.
//! Because the filter is causal and its state lives in the cache, streaming
//! refinement is bit-identical to a single full pass.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{check_header, write_header, ReplayError};
use crate::filtering::{FilterError, OneEuroBank, OneEuroParams};
use crate::rotation::Vec3;

pub const DEFAULT_KEYPOINT_JOINTS: usize = 22;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("visibility {value} at frame {frame}, joint {joint} outside [0, 1]")]
    VisibilityRange { frame: usize, joint: usize, value: f64 },
    #[error("timestamps must strictly increase (frame {0})")]
    NonMonotonicTime(usize),
    #[error("cache does not line up with the sequence: {0}")]
    CacheMismatch(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// One frame of egocentric keypoints: camera-centered positions in meters
/// and per-joint visibility probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub timestamp: f64,
    pub positions: Vec<Vec3>,
    pub visibility: Vec<f64>,
}

impl KeypointFrame {
    pub fn joint_count(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSequence {
    frames: Vec<KeypointFrame>,
}

impl KeypointSequence {
    pub fn new(frames: Vec<KeypointFrame>) -> Result<Self, RefineError> {
        let joints = frames.first().map_or(0, KeypointFrame::joint_count);
        for (f, frame) in frames.iter().enumerate() {
            if frame.positions.len() != joints || frame.visibility.len() != joints {
                return Err(RefineError::Shape(format!(
                    "frame {f} has {} positions and {} visibilities, expected {joints}",
                    frame.positions.len(),
                    frame.visibility.len()
                )));
            }
            for (j, &z) in frame.visibility.iter().enumerate() {
                if !(0.0..=1.0).contains(&z) {
                    return Err(RefineError::VisibilityRange { frame: f, joint: j, value: z });
                }
            }
            if frame.positions.iter().any(|p| p.iter().any(|v| !v.is_finite())) || !frame.timestamp.is_finite() {
                return Err(RefineError::Shape(format!("frame {f} has non-finite values")));
            }
            if f > 0 && frame.timestamp <= frames[f - 1].timestamp {
                return Err(RefineError::NonMonotonicTime(f));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[KeypointFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, KeypointFrame::joint_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `η = max(ζ̃ − 0.5, 0)`: fully visible joints are scaled by 0.5.
    #[default]
    Literal,
    /// `η = clamp(2·max(ζ̃ − 0.5, 0), 0, 1)`: fully visible joints pass unchanged.
    Normalized,
}

impl MaskMode {
    #[inline]
    pub fn mask(self, smoothed: f64) -> f64 {
        let eta = (smoothed - 0.5).max(0.0);
        match self {
            MaskMode::Literal => eta,
            MaskMode::Normalized => (2.0 * eta).clamp(0.0, 1.0),
        }
    }
}

/// State carried between refinement calls of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineCache {
    timestamps: Vec<f64>,
    refined: Vec<Vec<Vec3>>,
    smoothed_visibility: Vec<Vec<f64>>,
    filters: OneEuroBank,
    mode: MaskMode,
}

impl RefineCache {
    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn last_timestamp(&self) -> Option<f64> {
        self.timestamps.last().copied()
    }

    pub fn smoothed_visibility(&self) -> &[Vec<f64>] {
        &self.smoothed_visibility
    }
}

/// Refined positions for every frame of the input window, oldest first.
pub type RefinedKeypoints = Vec<Vec<Vec3>>;

pub fn refine(
    seq: &KeypointSequence,
    cache: Option<&RefineCache>,
    params: OneEuroParams,
) -> Result<(RefinedKeypoints, RefineCache), RefineError> {
    refine_with_mode(seq, cache, params, MaskMode::Literal)
}

pub fn refine_normalized(
    seq: &KeypointSequence,
    cache: Option<&RefineCache>,
    params: OneEuroParams,
) -> Result<(RefinedKeypoints, RefineCache), RefineError> {
    refine_with_mode(seq, cache, params, MaskMode::Normalized)
}

/// Number of leading frames of `seq` already covered by `cache`.
fn overlap(seq: &KeypointSequence, cache: &RefineCache) -> Result<usize, RefineError> {
    let Some(last) = cache.last_timestamp() else {
        return Ok(0);
    };
    let n_old = seq.frames.iter().take_while(|f| f.timestamp <= last).count();
    if n_old > cache.timestamps.len() {
        return Err(RefineError::CacheMismatch(format!(
            "sequence has {n_old} frames at or before t={last}, cache holds {}",
            cache.timestamps.len()
        )));
    }
    let cached = &cache.timestamps[cache.timestamps.len() - n_old..];
    let fresh = seq.frames[..n_old].iter().map(|f| f.timestamp);
    if !cached.iter().copied().eq(fresh) {
        return Err(RefineError::CacheMismatch("sequence prefix differs from cached window suffix".into()));
    }
    Ok(n_old)
}

pub fn refine_with_mode(
    seq: &KeypointSequence,
    cache: Option<&RefineCache>,
    params: OneEuroParams,
    mode: MaskMode,
) -> Result<(RefinedKeypoints, RefineCache), RefineError> {
    let joints = seq.joint_count();
    let (n_old, mut filters) = match cache {
        Some(c) => {
            if c.filters.channels() != joints && !seq.is_empty() {
                return Err(RefineError::Shape(format!(
                    "cache tracks {} joints, sequence has {joints}",
                    c.filters.channels()
                )));
            }
            if c.mode != mode {
                return Err(RefineError::CacheMismatch("cache was built with a different mask mode".into()));
            }
            (overlap(seq, c)?, c.filters.clone())
        }
        None => (0, OneEuroBank::new(joints, params)?),
    };

    let mut refined = Vec::with_capacity(seq.len());
    let mut smoothed = Vec::with_capacity(seq.len());
    if let Some(c) = cache {
        let skip = c.timestamps.len() - n_old;
        refined.extend(c.refined[skip..].iter().cloned());
        smoothed.extend(c.smoothed_visibility[skip..].iter().cloned());
    }
    let mut vis = vec![0.0; joints];
    for frame in &seq.frames[n_old..] {
        filters.filter_into(&frame.visibility, frame.timestamp, &mut vis)?;
        let out: Vec<Vec3> = frame
            .positions
            .iter()
            .zip(&vis)
            .map(|(p, &z)| p * mode.mask(z))
            .collect();
        refined.push(out);
        smoothed.push(vis.clone());
    }

    let new_cache = RefineCache {
        timestamps: seq.frames.iter().map(|f| f.timestamp).collect(),
        refined: refined.clone(),
        smoothed_visibility: smoothed,
        filters,
        mode,
    };
    Ok((refined, new_cache))
}

// ---------------------------------------------------------------------------
// Keypoint replay files.

pub const KEYPOINT_FORMAT: &str = "epvr-keypoints";

#[derive(Serialize, Deserialize)]
struct KeypointRecord {
    t: f64,
    #[serde(rename = "Z")]
    positions: Vec<[f64; 3]>,
    zeta: Vec<f64>,
}

pub fn write_keypoints<W: Write>(out: &mut W, frames: &[KeypointFrame]) -> std::io::Result<()> {
    write_header(out, KEYPOINT_FORMAT)?;
    for f in frames {
        let rec = KeypointRecord {
            t: f.timestamp,
            positions: f.positions.iter().map(|p| (*p).into()).collect(),
            zeta: f.visibility.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    Ok(())
}

pub fn read_keypoints<R: BufRead>(input: R) -> Result<Vec<KeypointFrame>, ReplayError> {
    let mut frames = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 && check_header(&line, KEYPOINT_FORMAT, idx + 1)? {
            continue;
        }
        let rec: KeypointRecord = serde_json::from_str(&line)
            .map_err(|e| ReplayError::Format { line: idx + 1, message: e.to_string() })?;
        if rec.positions.len() != rec.zeta.len() {
            return Err(ReplayError::Format { line: idx + 1, message: "Z and zeta lengths differ".into() });
        }
        frames.push(KeypointFrame {
            timestamp: rec.t,
            positions: rec.positions.into_iter().map(Vec3::from).collect(),
            visibility: rec.zeta,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(rng: &mut ChaCha8Rng, n: usize, joints: usize, vis: impl Fn(&mut ChaCha8Rng) -> f64) -> Vec<KeypointFrame> {
        (0..n)
            .map(|k| KeypointFrame {
                timestamp: k as f64 / 60.0,
                positions: (0..joints)
                    .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..2.0)))
                    .collect(),
                visibility: (0..joints).map(|_| vis(rng)).collect(),
            })
            .collect()
    }

    #[test]
    fn fully_visible_joints_are_halved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = random_frames(&mut rng, 10, 22, |_| 1.0);
        let seq = KeypointSequence::new(frames.clone()).unwrap();
        let (out, _) = refine(&seq, None, OneEuroParams::default()).unwrap();
        for (f, frame) in frames.iter().enumerate() {
            for j in 0..22 {
                assert_eq!(out[f][j], frame.positions[j] * 0.5);
            }
        }
    }

    #[test]
    fn invisible_joints_are_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = KeypointSequence::new(random_frames(&mut rng, 8, 22, |_| 0.0)).unwrap();
        let (out, _) = refine(&seq, None, OneEuroParams::default()).unwrap();
        assert!(out.iter().flatten().all(|p| *p == Vec3::zeros()));
    }

    #[test]
    fn normalized_mask_passes_visible_and_scales_partial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut frames = random_frames(&mut rng, 6, 4, |_| 1.0);
        for f in frames.iter_mut() {
            f.visibility[2] = 0.75;
        }
        let seq = KeypointSequence::new(frames.clone()).unwrap();
        let (out, _) = refine_normalized(&seq, None, OneEuroParams::default()).unwrap();
        for (f, frame) in frames.iter().enumerate() {
            assert_eq!(out[f][0], frame.positions[0]);
            assert_eq!(out[f][2], frame.positions[2] * 0.5);
        }
    }

    #[test]
    fn low_visibility_agrees_between_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = KeypointSequence::new(random_frames(&mut rng, 30, 22, |r| r.gen_range(0.0..=0.5))).unwrap();
        let (a, _) = refine(&seq, None, OneEuroParams::default()).unwrap();
        let (b, _) = refine_normalized(&seq, None, OneEuroParams::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|p| *p == Vec3::zeros()));
    }

    #[test]
    fn frame_by_frame_equals_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = random_frames(&mut rng, 40, 22, |r| r.gen_range(0.0..=1.0));
        let params = OneEuroParams { min_cutoff: 1.3, beta: 0.5, d_cutoff: 1.0 };
        let full = KeypointSequence::new(frames.clone()).unwrap();
        let (expected, _) = refine(&full, None, params).unwrap();
        let mut cache = None;
        let mut last = Vec::new();
        for k in 1..=frames.len() {
            let seq = KeypointSequence::new(frames[..k].to_vec()).unwrap();
            let (out, c) = refine(&seq, cache.as_ref(), params).unwrap();
            cache = Some(c);
            last = out;
        }
        assert_eq!(last, expected);
    }

    #[test]
    fn sliding_window_copies_previous_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames = random_frames(&mut rng, 30, 5, |r| r.gen_range(0.0..=1.0));
        let params = OneEuroParams::default();
        let (full, _) = refine(&KeypointSequence::new(frames.clone()).unwrap(), None, params).unwrap();
        let window = 10;
        let mut cache = None;
        for end in 1..=frames.len() {
            let start = end.saturating_sub(window);
            let seq = KeypointSequence::new(frames[start..end].to_vec()).unwrap();
            let (out, c) = refine(&seq, cache.as_ref(), params).unwrap();
            assert_eq!(out.as_slice(), &full[start..end]);
            cache = Some(c);
        }
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames = random_frames(&mut rng, 10, 3, |_| 1.0);
        let params = OneEuroParams::default();
        let (_, cache) = refine(&KeypointSequence::new(frames[..5].to_vec()).unwrap(), None, params).unwrap();
        let mut shifted = frames[..7].to_vec();
        shifted[1].timestamp += 0.001;
        let seq = KeypointSequence::new(shifted).unwrap();
        assert!(matches!(refine(&seq, Some(&cache), params), Err(RefineError::CacheMismatch(_))));
        let seq = KeypointSequence::new(frames[..7].to_vec()).unwrap();
        assert!(matches!(refine_normalized(&seq, Some(&cache), params), Err(RefineError::CacheMismatch(_))));
    }

    #[test]
    fn invalid_sequences_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut frames = random_frames(&mut rng, 3, 3, |_| 0.5);
        frames[1].visibility[0] = 1.5;
        assert!(matches!(KeypointSequence::new(frames.clone()), Err(RefineError::VisibilityRange { .. })));
        frames[1].visibility[0] = 0.5;
        frames[2].positions.pop();
        assert!(matches!(KeypointSequence::new(frames.clone()), Err(RefineError::Shape(_))));
        let mut frames = random_frames(&mut rng, 3, 3, |_| 0.5);
        frames[2].timestamp = frames[1].timestamp;
        assert!(matches!(KeypointSequence::new(frames), Err(RefineError::NonMonotonicTime(2))));
    }

    #[test]
    fn replay_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = random_frames(&mut rng, 4, 22, |r| r.gen_range(0.0..=1.0));
        let mut buf = Vec::new();
        write_keypoints(&mut buf, &frames).unwrap();
        assert_eq!(read_keypoints(buf.as_slice()).unwrap(), frames);
    }
}
