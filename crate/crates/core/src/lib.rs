//! Real-time egocentric full-body pose estimation engine.
//!
//! Headset and controller poses become 72-D motion descriptors, egocentric
//! keypoints are refined by visibility, both streams go through a predictor
//! (a toy transformer forward pass, a replay source, or a heuristic), and
//! the resulting rotations are turned into world positions by forward
//! kinematics, smoothed, and pulled onto the tracked anchors by an
//! energy-based kinematic optimizer.

pub mod descriptor;
pub mod eval;
pub mod filtering;
pub mod kinematics;
pub mod kpo;
pub mod neural;
pub mod pipeline;
pub mod pose;
pub mod refine;
pub mod rotation;
pub mod skeleton;

pub use pose::{relative_pose, DevicePose, FullBodyPose, JOINT_COUNT};
pub use rotation::{geodesic_angle, matrix_to_rot6d, rot6d_to_matrix, Mat3, Rot6D, RotationError, Vec3};
pub use skeleton::KinematicTree;
