//! Per-frame 72-D headset/controller motion descriptors and their temporal
//! windows.
//!
//! Layout of one descriptor:
//!
//! ```text
//!  0..18   head        [p(3), θ(6), v(3), ω(6)]
//! 18..36   left ctrl   [p(3), θ(6), v(3), ω(6)]
//! 36..54   right ctrl  [p(3), θ(6), v(3), ω(6)]
//! 54..63   left ctrl relative to head   [p̃(3), θ̃(6)]
//! 63..72   right ctrl relative to head  [p̃(3), θ̃(6)]
//! ```

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{relative_pose, DevicePose};
use crate::rotation::{Rot6D, RotationError, Vec3};

pub const DESCRIPTOR_DIM: usize = 72;
pub const GLOBAL_BLOCK: usize = 18;
pub const RELATIVE_BLOCK: usize = 9;
pub const HEAD_OFFSET: usize = 0;
pub const LEFT_OFFSET: usize = 18;
pub const RIGHT_OFFSET: usize = 36;
pub const LEFT_RELATIVE_OFFSET: usize = 54;
pub const RIGHT_RELATIVE_OFFSET: usize = 63;

/// Devices must agree on their timestamp within this many seconds.
pub const SYNC_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_WINDOW: usize = 40;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("device timestamps diverge by {skew:.3e} s")]
    TimestampSkew { skew: f64 },
    #[error("time did not advance ({prev} -> {curr})")]
    NonMonotonicTime { prev: f64, curr: f64 },
    #[error("stale frame at t={timestamp}, window ends at t={window_end}")]
    StaleFrame { timestamp: f64, window_end: f64 },
    #[error("non-finite device pose")]
    NonFinite,
    #[error(transparent)]
    Rotation(#[from] RotationError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionDescriptor {
    pub timestamp: f64,
    pub values: [f64; DESCRIPTOR_DIM],
}

fn write_global(dst: &mut [f64], pose: &DevicePose) {
    dst[0..3].copy_from_slice(pose.position.as_slice());
    dst[3..9].copy_from_slice(&pose.orientation.0);
    dst[9..12].copy_from_slice(pose.linear_velocity.as_slice());
    dst[12..18].copy_from_slice(&pose.angular_velocity);
}

fn read_global(src: &[f64], timestamp: f64) -> DevicePose {
    let mut orientation = [0.0; 6];
    orientation.copy_from_slice(&src[3..9]);
    let mut angular = [0.0; 6];
    angular.copy_from_slice(&src[12..18]);
    DevicePose {
        timestamp,
        position: Vec3::from_column_slice(&src[0..3]),
        orientation: Rot6D(orientation),
        linear_velocity: Vec3::from_column_slice(&src[9..12]),
        angular_velocity: angular,
    }
}

impl MotionDescriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn head(&self) -> DevicePose {
        read_global(&self.values[HEAD_OFFSET..HEAD_OFFSET + GLOBAL_BLOCK], self.timestamp)
    }

    pub fn left(&self) -> DevicePose {
        read_global(&self.values[LEFT_OFFSET..LEFT_OFFSET + GLOBAL_BLOCK], self.timestamp)
    }

    pub fn right(&self) -> DevicePose {
        read_global(&self.values[RIGHT_OFFSET..RIGHT_OFFSET + GLOBAL_BLOCK], self.timestamp)
    }

    fn relative(&self, offset: usize) -> (Vec3, Rot6D) {
        let block = &self.values[offset..offset + RELATIVE_BLOCK];
        let mut r = [0.0; 6];
        r.copy_from_slice(&block[3..9]);
        (Vec3::from_column_slice(&block[0..3]), Rot6D(r))
    }

    pub fn left_relative(&self) -> (Vec3, Rot6D) {
        self.relative(LEFT_RELATIVE_OFFSET)
    }

    pub fn right_relative(&self) -> (Vec3, Rot6D) {
        self.relative(RIGHT_RELATIVE_OFFSET)
    }
}

pub fn build_descriptor(
    head: &DevicePose,
    left: &DevicePose,
    right: &DevicePose,
) -> Result<MotionDescriptor, DescriptorError> {
    if !(head.is_finite() && left.is_finite() && right.is_finite()) {
        return Err(DescriptorError::NonFinite);
    }
    let skew = (head.timestamp - left.timestamp)
        .abs()
        .max((head.timestamp - right.timestamp).abs());
    if skew > SYNC_TOLERANCE {
        return Err(DescriptorError::TimestampSkew { skew });
    }
    let mut values = [0.0; DESCRIPTOR_DIM];
    write_global(&mut values[HEAD_OFFSET..], head);
    write_global(&mut values[LEFT_OFFSET..], left);
    write_global(&mut values[RIGHT_OFFSET..], right);
    for (offset, ctrl) in [(LEFT_RELATIVE_OFFSET, left), (RIGHT_RELATIVE_OFFSET, right)] {
        let (p, r) = relative_pose(head, ctrl)?;
        values[offset..offset + 3].copy_from_slice(p.as_slice());
        values[offset + 3..offset + 9].copy_from_slice(&r.0);
    }
    Ok(MotionDescriptor { timestamp: head.timestamp, values })
}

/// A device sample as delivered by a tracker that does not report rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub timestamp: f64,
    pub position: Vec3,
    pub orientation: Rot6D,
}

impl From<&DevicePose> for PoseSample {
    fn from(p: &DevicePose) -> Self {
        Self { timestamp: p.timestamp, position: p.position, orientation: p.orientation }
    }
}

/// Backward finite differences for linear and 6D angular velocity.
pub fn derive_velocities(prev: &PoseSample, curr: &PoseSample) -> Result<DevicePose, DescriptorError> {
    let dt = curr.timestamp - prev.timestamp;
    if dt.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(DescriptorError::NonMonotonicTime { prev: prev.timestamp, curr: curr.timestamp });
    }
    let mut angular = [0.0; 6];
    for (k, w) in angular.iter_mut().enumerate() {
        *w = (curr.orientation.0[k] - prev.orientation.0[k]) / dt;
    }
    Ok(DevicePose {
        timestamp: curr.timestamp,
        position: curr.position,
        orientation: curr.orientation,
        linear_velocity: (curr.position - prev.position) / dt,
        angular_velocity: angular,
    })
}

/// Fixed-length sliding window of descriptors.
///
/// Until `length` frames have arrived the earliest frame is replicated
/// backward, so a non-empty window always yields exactly `length` rows.
#[derive(Debug, Clone)]
pub struct DescriptorWindow {
    length: usize,
    frames: VecDeque<MotionDescriptor>,
}

impl DescriptorWindow {
    pub fn new(length: usize) -> Self {
        assert!(length > 0, "window length must be positive");
        Self { length, frames: VecDeque::with_capacity(length) }
    }

    pub fn window_length(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Number of distinct frames received and still held (≤ window length).
    pub fn received(&self) -> usize {
        self.frames.len()
    }

    pub fn end_timestamp(&self) -> Option<f64> {
        self.frames.back().map(|f| f.timestamp)
    }

    pub fn push(&mut self, descriptor: MotionDescriptor) -> Result<(), DescriptorError> {
        if let Some(end) = self.end_timestamp() {
            if descriptor.timestamp.partial_cmp(&end) != Some(std::cmp::Ordering::Greater) {
                return Err(DescriptorError::StaleFrame { timestamp: descriptor.timestamp, window_end: end });
            }
        }
        if self.frames.len() == self.length {
            self.frames.pop_front();
        }
        self.frames.push_back(descriptor);
        Ok(())
    }

    /// Appends several frames at once; either all are accepted or none.
    pub fn push_batch(&mut self, batch: Vec<MotionDescriptor>) -> Result<(), DescriptorError> {
        let mut end = self.end_timestamp();
        for d in &batch {
            if let Some(e) = end {
                if d.timestamp.partial_cmp(&e) != Some(std::cmp::Ordering::Greater) {
                    return Err(DescriptorError::StaleFrame { timestamp: d.timestamp, window_end: e });
                }
            }
            end = Some(d.timestamp);
        }
        for d in batch {
            self.push(d)?;
        }
        Ok(())
    }

    /// The `length` rows of the window, oldest first, including warm-up
    /// replication. Empty if nothing has been pushed.
    pub fn rows(&self) -> Vec<&MotionDescriptor> {
        let Some(first) = self.frames.front() else {
            return Vec::new();
        };
        let pad = self.length - self.frames.len();
        std::iter::repeat_n(first, pad).chain(self.frames.iter()).collect()
    }

    /// Row-major `length × 72` matrix of the window.
    pub fn to_matrix(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.length * DESCRIPTOR_DIM);
        for row in self.rows() {
            out.extend_from_slice(&row.values);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Motion replay files: one JSON object per line, preceded by a header line.

pub const MOTION_FORMAT: &str = "epvr-motion";

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: {source}")]
    Descriptor { line: usize, source: DescriptorError },
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct FileHeader {
    pub format: String,
    pub version: u32,
    pub convention: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DeviceRecord {
    p: [f64; 3],
    #[serde(rename = "theta")]
    orientation: [f64; 6],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    omega: Option<[f64; 6]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MotionRecord {
    t: f64,
    head: DeviceRecord,
    left: DeviceRecord,
    right: DeviceRecord,
}

/// One synchronized headset + controllers sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionFrame {
    pub head: DevicePose,
    pub left: DevicePose,
    pub right: DevicePose,
}

impl MotionFrame {
    pub fn timestamp(&self) -> f64 {
        self.head.timestamp
    }

    pub fn descriptor(&self) -> Result<MotionDescriptor, DescriptorError> {
        build_descriptor(&self.head, &self.left, &self.right)
    }
}

fn device_record(p: &DevicePose) -> DeviceRecord {
    DeviceRecord {
        p: p.position.into(),
        orientation: p.orientation.0,
        v: Some(p.linear_velocity.into()),
        omega: Some(p.angular_velocity),
    }
}

pub(crate) fn write_header<W: Write>(out: &mut W, format: &str) -> std::io::Result<()> {
    let header = FileHeader {
        format: format.to_string(),
        version: 1,
        convention: crate::skeleton::COORDINATE_CONVENTION.to_string(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))
}

/// Parses an optional header line; returns true if `line` was a header.
pub(crate) fn check_header(line: &str, format: &str, line_no: usize) -> Result<bool, ReplayError> {
    let Ok(header) = serde_json::from_str::<FileHeader>(line) else {
        return Ok(false);
    };
    if header.format != format || header.version != 1 {
        return Err(ReplayError::Format {
            line: line_no,
            message: format!("expected {format} v1, found {} v{}", header.format, header.version),
        });
    }
    if header.convention != crate::skeleton::COORDINATE_CONVENTION {
        return Err(ReplayError::Format {
            line: line_no,
            message: format!("unsupported coordinate convention {:?}", header.convention),
        });
    }
    Ok(true)
}

pub fn write_motion<W: Write>(out: &mut W, frames: &[MotionFrame]) -> std::io::Result<()> {
    write_header(out, MOTION_FORMAT)?;
    for f in frames {
        let rec = MotionRecord {
            t: f.head.timestamp,
            head: device_record(&f.head),
            left: device_record(&f.left),
            right: device_record(&f.right),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    Ok(())
}

/// Reads a motion replay stream. Devices without velocity fields get them by
/// finite differences against the previous frame (zero on the first frame).
pub fn read_motion<R: BufRead>(input: R) -> Result<Vec<MotionFrame>, ReplayError> {
    let mut frames: Vec<MotionFrame> = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 && check_header(&line, MOTION_FORMAT, line_no)? {
            continue;
        }
        let rec: MotionRecord = serde_json::from_str(&line)
            .map_err(|e| ReplayError::Format { line: line_no, message: e.to_string() })?;
        let prev = frames.last();
        let mk = |d: &DeviceRecord, prev: Option<&DevicePose>| -> Result<DevicePose, ReplayError> {
            let sample = PoseSample { timestamp: rec.t, position: Vec3::from(d.p), orientation: Rot6D(d.orientation) };
            let mut pose = match prev {
                Some(p) if d.v.is_none() || d.omega.is_none() => derive_velocities(&PoseSample::from(p), &sample)
                    .map_err(|source| ReplayError::Descriptor { line: line_no, source })?,
                _ => DevicePose::at_rest(rec.t, sample.position, sample.orientation),
            };
            if let Some(v) = d.v {
                pose.linear_velocity = Vec3::from(v);
            }
            if let Some(w) = d.omega {
                pose.angular_velocity = w;
            }
            Ok(pose)
        };
        let frame = MotionFrame {
            head: mk(&rec.head, prev.map(|f| &f.head))?,
            left: mk(&rec.left, prev.map(|f| &f.left))?,
            right: mk(&rec.right, prev.map(|f| &f.right))?,
        };
        if let Some(p) = prev {
            if frame.timestamp() <= p.timestamp() {
                return Err(ReplayError::Descriptor {
                    line: line_no,
                    source: DescriptorError::NonMonotonicTime { prev: p.timestamp(), curr: frame.timestamp() },
                });
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}
