//! Message bodies. Every float is an f64 in little-endian byte order.

use epvr_core::descriptor::MotionFrame;
use epvr_core::pipeline::FrameResult;
use epvr_core::pose::{DevicePose, FullBodyPose, JOINT_COUNT};
use epvr_core::refine::KeypointFrame;
use epvr_core::rotation::{Rot6D, Vec3};

use crate::envelope::{Kind, ProtocolError};

/// Floats per device record: timestamp, position, 6D orientation, linear
/// velocity, 6D orientation rate.
pub const DEVICE_FLOATS: usize = 1 + 3 + 6 + 3 + 6;
pub const HMD_PAYLOAD_LEN: usize = 3 * DEVICE_FLOATS * 8;
pub const POSE_RESULT_FLOATS: usize = JOINT_COUNT * 6 + JOINT_COUNT * 3 + 3;
pub const POSE_RESULT_LEN: usize = POSE_RESULT_FLOATS * 8;
/// Keypoint frames above this joint count are rejected.
pub const MAX_KEYPOINT_JOINTS: u32 = 1024;

fn bad(kind: Kind, message: impl Into<String>) -> ProtocolError {
    ProtocolError::BadPayload { kind, message: message.into() }
}

fn put(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn floats(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
}

fn put_device(out: &mut Vec<u8>, d: &DevicePose) {
    put(out, &[d.timestamp]);
    put(out, d.position.as_slice());
    put(out, &d.orientation.0);
    put(out, d.linear_velocity.as_slice());
    put(out, &d.angular_velocity);
}

fn take_device(v: &[f64]) -> DevicePose {
    DevicePose {
        timestamp: v[0],
        position: Vec3::new(v[1], v[2], v[3]),
        orientation: Rot6D(v[4..10].try_into().expect("6 floats")),
        linear_velocity: Vec3::new(v[10], v[11], v[12]),
        angular_velocity: v[13..19].try_into().expect("6 floats"),
    }
}

pub fn encode_hmd(frame: &MotionFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HMD_PAYLOAD_LEN);
    for d in [&frame.head, &frame.left, &frame.right] {
        put_device(&mut out, d);
    }
    out
}

pub fn decode_hmd(payload: &[u8]) -> Result<MotionFrame, ProtocolError> {
    if payload.len() != HMD_PAYLOAD_LEN {
        return Err(bad(Kind::HmdFrame, format!("expected {HMD_PAYLOAD_LEN} bytes, got {}", payload.len())));
    }
    let v: Vec<f64> = floats(payload).collect();
    let mut devices = v.chunks_exact(DEVICE_FLOATS).map(take_device);
    let frame = MotionFrame {
        head: devices.next().expect("three records"),
        left: devices.next().expect("three records"),
        right: devices.next().expect("three records"),
    };
    if ![frame.head, frame.left, frame.right].iter().all(|d| d.is_finite()) {
        return Err(bad(Kind::HmdFrame, "non-finite device values"));
    }
    Ok(frame)
}

/// Joint count as u32, then per joint x, y, z and visibility.
pub fn encode_keypoints(frame: &KeypointFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + frame.positions.len() * 32);
    out.extend_from_slice(&(frame.positions.len() as u32).to_le_bytes());
    for (p, z) in frame.positions.iter().zip(&frame.visibility) {
        put(&mut out, &[p.x, p.y, p.z, *z]);
    }
    out
}

/// The frame timestamp travels in the envelope header.
pub fn decode_keypoints(payload: &[u8], timestamp: f64) -> Result<KeypointFrame, ProtocolError> {
    let kind = Kind::KeypointFrame;
    if payload.len() < 4 {
        return Err(bad(kind, "missing joint count"));
    }
    let joints = u32::from_le_bytes(payload[..4].try_into().expect("4 bytes"));
    if joints == 0 || joints > MAX_KEYPOINT_JOINTS {
        return Err(bad(kind, format!("joint count {joints} out of range")));
    }
    let expected = 4 + joints as usize * 32;
    if payload.len() != expected {
        return Err(bad(kind, format!("expected {expected} bytes, got {}", payload.len())));
    }
    let v: Vec<f64> = floats(&payload[4..]).collect();
    if !v.iter().all(|x| x.is_finite()) {
        return Err(bad(kind, "non-finite keypoint values"));
    }
    Ok(KeypointFrame {
        timestamp,
        positions: v.chunks_exact(4).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        visibility: v.chunks_exact(4).map(|c| c[3]).collect(),
    })
}

/// Stage timings carried with each pose, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WireLatency {
    /// Descriptor push, keypoint refinement and prediction.
    pub inference: f64,
    /// Forward kinematics, smoothing and pose optimization.
    pub post: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseMessage {
    /// Rotations with world positions attached.
    pub pose: FullBodyPose,
    pub latency: WireLatency,
}

impl PoseMessage {
    pub fn positions(&self) -> &[Vec3] {
        self.pose.positions.as_deref().unwrap_or(&[])
    }
}

/// 22 × 6 rotation floats (root first), 22 × 3 position floats, then the
/// three latency floats.
pub fn encode_pose_result(result: &FrameResult) -> Vec<u8> {
    let mut out = Vec::with_capacity(POSE_RESULT_LEN);
    for r in result.pose.rotations() {
        put(&mut out, &r.0);
    }
    for p in result.positions() {
        put(&mut out, p.as_slice());
    }
    let l = &result.latency;
    put(&mut out, &[l.descriptor + l.refine + l.predict, l.kinematics + l.filter + l.kpo, l.total]);
    out
}

pub fn decode_pose_result(payload: &[u8]) -> Result<PoseMessage, ProtocolError> {
    if payload.len() != POSE_RESULT_LEN {
        return Err(bad(Kind::PoseResult, format!("expected {POSE_RESULT_LEN} bytes, got {}", payload.len())));
    }
    let v: Vec<f64> = floats(payload).collect();
    let (rot, rest) = v.split_at(JOINT_COUNT * 6);
    let (pos, lat) = rest.split_at(JOINT_COUNT * 3);
    let rotations: Vec<Rot6D> = rot.chunks_exact(6).map(|c| Rot6D(c.try_into().expect("6 floats"))).collect();
    let mut pose = FullBodyPose::from_rotations(&rotations).expect("22 rotations");
    pose.positions = Some(pos.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect());
    Ok(PoseMessage { pose, latency: WireLatency { inference: lat[0], post: lat[1], total: lat[2] } })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    UnknownModel = 1,
    Protocol = 2,
    Pipeline = 3,
    UnknownSession = 4,
    UnexpectedMessage = 5,
    ShuttingDown = 6,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        use ErrorCode::*;
        [UnknownModel, Protocol, Pipeline, UnknownSession, UnexpectedMessage, ShuttingDown]
            .into_iter()
            .find(|c| *c as u16 == v)
    }
}

/// u16 code, then a UTF-8 message filling the rest.
pub fn encode_error(code: ErrorCode, message: &str) -> Vec<u8> {
    let mut out = (code as u16).to_le_bytes().to_vec();
    out.extend_from_slice(message.as_bytes());
    out
}

pub fn decode_error(payload: &[u8]) -> Result<(u16, String), ProtocolError> {
    if payload.len() < 2 {
        return Err(bad(Kind::Error, "missing error code"));
    }
    let code = u16::from_le_bytes([payload[0], payload[1]]);
    Ok((code, String::from_utf8_lossy(&payload[2..]).into_owned()))
}

pub fn decode_hello(payload: &[u8]) -> Result<String, ProtocolError> {
    let name = std::str::from_utf8(payload).map_err(|_| bad(Kind::Hello, "model name is not UTF-8"))?;
    if name.is_empty() {
        return Err(bad(Kind::Hello, "empty model name"));
    }
    Ok(name.to_string())
}
