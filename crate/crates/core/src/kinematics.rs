//! Forward kinematics from joint rotations to world-space joint positions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{FullBodyPose, JOINT_COUNT};
use crate::rotation::{Mat3, Rot6D, RotationError, Vec3};
use crate::skeleton::KinematicTree;

/// Bones shorter than this are treated as collapsed.
pub const MIN_BONE_LENGTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("joint {joint}: {source}")]
    Rotation { joint: usize, source: RotationError },
    #[error("expected {expected} joints, got {got}")]
    JointCount { expected: usize, got: usize },
    #[error("skeleton has no joint named \"head\"")]
    NoHeadJoint,
    #[error("bone {child}->{parent} has zero length")]
    ZeroLengthBone { child: usize, parent: usize },
}

/// World pose of the headset used to place the skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldAnchor {
    pub head_position: Vec3,
    pub head_orientation: Rot6D,
}

impl WorldAnchor {
    pub fn at(head_position: Vec3) -> Self {
        Self { head_position, head_orientation: Rot6D::IDENTITY }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FkOptions {
    /// Additionally rotate the whole body about the head so that the head
    /// joint's global rotation equals the anchor orientation.
    pub align_head_orientation: bool,
}

/// Global joint rotations and root-relative positions (root at the origin).
pub fn chain_transforms(rotations: &[Mat3], tree: &KinematicTree) -> Result<(Vec<Mat3>, Vec<Vec3>), KinematicsError> {
    if rotations.len() != tree.len() {
        return Err(KinematicsError::JointCount { expected: tree.len(), got: rotations.len() });
    }
    let mut global = Vec::with_capacity(tree.len());
    let mut positions = Vec::with_capacity(tree.len());
    for (i, local) in rotations.iter().enumerate() {
        match tree.parent(i) {
            None => {
                global.push(*local);
                positions.push(Vec3::zeros());
            }
            Some(p) => {
                let parent_rot: Mat3 = global[p];
                positions.push(positions[p] + parent_rot * tree.rest_offset(i));
                global.push(parent_rot * local);
            }
        }
    }
    Ok((global, positions))
}

pub fn decode_rotations(pose: &FullBodyPose) -> Result<Vec<Mat3>, KinematicsError> {
    pose.rotations()
        .enumerate()
        .map(|(joint, r)| r.to_matrix().map_err(|source| KinematicsError::Rotation { joint, source }))
        .collect()
}

/// World joint positions with the head joint placed at the anchor position.
pub fn forward_kinematics(
    pose: &FullBodyPose,
    tree: &KinematicTree,
    anchor: &WorldAnchor,
) -> Result<Vec<Vec3>, KinematicsError> {
    forward_kinematics_with(pose, tree, anchor, FkOptions::default())
}

pub fn forward_kinematics_with(
    pose: &FullBodyPose,
    tree: &KinematicTree,
    anchor: &WorldAnchor,
    options: FkOptions,
) -> Result<Vec<Vec3>, KinematicsError> {
    if tree.len() != JOINT_COUNT {
        return Err(KinematicsError::JointCount { expected: JOINT_COUNT, got: tree.len() });
    }
    let head = tree.index_of("head").ok_or(KinematicsError::NoHeadJoint)?;
    let rotations = decode_rotations(pose)?;
    let (global, local) = chain_transforms(&rotations, tree)?;
    let head_local = local[head];
    let correction = if options.align_head_orientation {
        let target = anchor
            .head_orientation
            .to_matrix()
            .map_err(|source| KinematicsError::Rotation { joint: head, source })?;
        Some(target * global[head].transpose())
    } else {
        None
    };
    Ok(local
        .iter()
        .map(|p| {
            let rel = p - head_local;
            let rel = match &correction {
                Some(c) => c * rel,
                None => rel,
            };
            rel + anchor.head_position
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoneVector {
    pub child: usize,
    pub parent: usize,
    pub length: f64,
    pub direction: Vec3,
}

pub fn bone_vectors(positions: &[Vec3], tree: &KinematicTree) -> Result<Vec<BoneVector>, KinematicsError> {
    if positions.len() != tree.len() {
        return Err(KinematicsError::JointCount { expected: tree.len(), got: positions.len() });
    }
    tree.edges()
        .map(|(child, parent)| {
            let d = positions[child] - positions[parent];
            let length = d.norm();
            if !(length >= MIN_BONE_LENGTH) {
                return Err(KinematicsError::ZeroLengthBone { child, parent });
            }
            Ok(BoneVector { child, parent, length, direction: d / length })
        })
        .collect()
}
