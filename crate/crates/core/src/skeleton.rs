//! Kinematic tree of the 22-joint main-body skeleton.
//!
//! Joint order is pelvis-first and topological (every parent index is smaller
//! than its child's):
//!
//! | idx | joint          | parent |
//! |-----|----------------|--------|
//! | 0   | pelvis         | -      |
//! | 1   | left_hip       | 0      |
//! | 2   | right_hip      | 0      |
//! | 3   | spine1         | 0      |
//! | 4   | left_knee      | 1      |
//! | 5   | right_knee     | 2      |
//! | 6   | spine2         | 3      |
//! | 7   | left_ankle     | 4      |
//! | 8   | right_ankle    | 5      |
//! | 9   | spine3         | 6      |
//! | 10  | left_foot      | 7      |
//! | 11  | right_foot     | 8      |
//! | 12  | neck           | 9      |
//! | 13  | left_collar    | 9      |
//! | 14  | right_collar   | 9      |
//! | 15  | head           | 12     |
//! | 16  | left_shoulder  | 13     |
//! | 17  | right_shoulder | 14     |
//! | 18  | left_elbow     | 16     |
//! | 19  | right_elbow    | 17     |
//! | 20  | left_wrist     | 18     |
//! | 21  | right_wrist    | 19     |
//!
//! Coordinates are right-handed, y-up, the body facing +z with its left side
//! on +x, in meters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::Vec3;

pub const PELVIS: usize = 0;
pub const HEAD: usize = 15;
pub const LEFT_WRIST: usize = 20;
pub const RIGHT_WRIST: usize = 21;

pub const COORDINATE_CONVENTION: &str = "right-handed, y-up, +z forward, meters";

const DEFAULT_JOINTS: [(&str, Option<usize>, [f64; 3]); 22] = [
    ("pelvis", None, [0.0, 0.0, 0.0]),
    ("left_hip", Some(0), [0.0713, -0.0908, -0.0043]),
    ("right_hip", Some(0), [-0.0659, -0.0910, -0.0072]),
    ("spine1", Some(0), [-0.0007, 0.1104, -0.0262]),
    ("left_knee", Some(1), [0.0345, -0.3617, -0.0076]),
    ("right_knee", Some(2), [-0.0382, -0.3589, -0.0073]),
    ("spine2", Some(3), [0.0081, 0.1361, 0.0013]),
    ("left_ankle", Some(4), [-0.0161, -0.4146, -0.0425]),
    ("right_ankle", Some(5), [0.0180, -0.4166, -0.0393]),
    ("spine3", Some(6), [-0.0041, 0.0536, 0.0253]),
    ("left_foot", Some(7), [0.0293, -0.0519, 0.1230]),
    ("right_foot", Some(8), [-0.0304, -0.0532, 0.1252]),
    ("neck", Some(9), [-0.0016, 0.2131, -0.0413]),
    ("left_collar", Some(9), [0.0788, 0.1177, -0.0348]),
    ("right_collar", Some(9), [-0.0805, 0.1154, -0.0384]),
    ("head", Some(12), [0.0051, 0.0869, 0.0488]),
    ("left_shoulder", Some(13), [0.0978, 0.0395, -0.0140]),
    ("right_shoulder", Some(14), [-0.0953, 0.0359, -0.0088]),
    ("left_elbow", Some(16), [0.2566, -0.0173, -0.0193]),
    ("right_elbow", Some(17), [-0.2568, -0.0140, -0.0217]),
    ("left_wrist", Some(18), [0.2500, 0.0045, 0.0023]),
    ("right_wrist", Some(19), [-0.2537, 0.0082, -0.0004]),
];

/// Default lower-body joints (pelvis, legs, feet) for split error reporting.
pub const LOWER_BODY: [usize; 9] = [0, 1, 2, 4, 5, 7, 8, 10, 11];

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("skeleton has no joints")]
    Empty,
    #[error("joint 0 must be the root, found parent {0:?}")]
    RootNotFirst(Option<usize>),
    #[error("joint {joint} has parent {parent}; parents must precede children")]
    NotTopological { joint: usize, parent: usize },
    #[error("joint {0} has zero-length rest offset")]
    ZeroOffset(usize),
    #[error("non-finite rest offset at joint {0}")]
    NonFinite(usize),
    #[error("joint name {0:?} appears twice")]
    DuplicateName(String),
    #[error("failed to read skeleton file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed skeleton file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<Vec3>,
    neighbors: Vec<Vec<usize>>,
}

impl KinematicTree {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vec3>,
    ) -> Result<Self, SkeletonError> {
        let n = parents.len();
        if n == 0 {
            return Err(SkeletonError::Empty);
        }
        assert_eq!(names.len(), n, "names/parents length mismatch");
        assert_eq!(rest_offsets.len(), n, "offsets/parents length mismatch");
        if parents[0].is_some() {
            return Err(SkeletonError::RootNotFirst(parents[0]));
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(SkeletonError::DuplicateName(name.clone()));
            }
        }
        let mut neighbors = vec![Vec::new(); n];
        for (joint, parent) in parents.iter().enumerate().skip(1) {
            let parent = parent.ok_or(SkeletonError::NotTopological { joint, parent: usize::MAX })?;
            if parent >= joint {
                return Err(SkeletonError::NotTopological { joint, parent });
            }
            if rest_offsets[joint].iter().any(|v| !v.is_finite()) {
                return Err(SkeletonError::NonFinite(joint));
            }
            if rest_offsets[joint].norm() <= 0.0 {
                return Err(SkeletonError::ZeroOffset(joint));
            }
            neighbors[joint].push(parent);
            neighbors[parent].push(joint);
        }
        for adj in neighbors.iter_mut() {
            adj.sort_unstable();
        }
        Ok(Self { names, parents, rest_offsets, neighbors })
    }

    /// Shipped default tree with average adult proportions.
    pub fn smpl22() -> Self {
        let names = DEFAULT_JOINTS.iter().map(|j| j.0.to_string()).collect();
        let parents = DEFAULT_JOINTS.iter().map(|j| j.1).collect();
        let offsets = DEFAULT_JOINTS.iter().map(|j| Vec3::from(j.2)).collect();
        Self::new(names, parents, offsets).expect("default skeleton is valid")
    }

    /// Straight chain of `n` joints with the given offset between neighbors.
    pub fn chain(n: usize, offset: Vec3) -> Result<Self, SkeletonError> {
        let names = (0..n).map(|i| format!("j{i}")).collect();
        let parents = (0..n).map(|i| i.checked_sub(1)).collect();
        let offsets = (0..n).map(|i| if i == 0 { Vec3::zeros() } else { offset }).collect();
        Self::new(names, parents, offsets)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_offset(&self, joint: usize) -> &Vec3 {
        &self.rest_offsets[joint]
    }

    pub fn rest_offsets(&self) -> &[Vec3] {
        &self.rest_offsets
    }

    pub fn neighbors(&self, joint: usize) -> &[usize] {
        &self.neighbors[joint]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `(child, parent)` pairs in joint order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents.iter().enumerate().filter_map(|(c, p)| p.map(|p| (c, p)))
    }

    pub fn rest_lengths(&self) -> Vec<f64> {
        self.edges().map(|(c, _)| self.rest_offsets[c].norm()).collect()
    }

    pub fn to_file_string(&self) -> String {
        let file = SkeletonFile {
            convention: COORDINATE_CONVENTION.to_string(),
            joint: (0..self.len())
                .map(|i| JointRecord {
                    name: self.names[i].clone(),
                    parent: self.parents[i].map(|p| self.names[p].clone()),
                    offset: self.rest_offsets[i].into(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("skeleton serializes")
    }

    pub fn from_file_str(text: &str) -> Result<Self, SkeletonError> {
        let file: SkeletonFile = toml::from_str(text).map_err(|e| SkeletonError::Parse(e.to_string()))?;
        if file.convention != COORDINATE_CONVENTION {
            return Err(SkeletonError::Parse(format!(
                "unsupported coordinate convention {:?}",
                file.convention
            )));
        }
        let names: Vec<String> = file.joint.iter().map(|j| j.name.clone()).collect();
        let mut parents = Vec::with_capacity(names.len());
        for j in &file.joint {
            let parent = match &j.parent {
                None => None,
                Some(p) => Some(
                    names
                        .iter()
                        .position(|n| n == p)
                        .ok_or_else(|| SkeletonError::Parse(format!("unknown parent {p:?}")))?,
                ),
            };
            parents.push(parent);
        }
        let offsets = file.joint.iter().map(|j| Vec3::from(j.offset)).collect();
        Self::new(names, parents, offsets)
    }

    pub fn load(path: &Path) -> Result<Self, SkeletonError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| SkeletonError::Io { path: path.display().to_string(), source })?;
        Self::from_file_str(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    convention: String,
    joint: Vec<JointRecord>,
}

#[derive(Serialize, Deserialize)]
struct JointRecord {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<String>,
    offset: [f64; 3],
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tree_invariants() {
        let tree = KinematicTree::smpl22();
        assert_eq!(tree.len(), 22);
        assert_eq!(tree.parent(0), None);
        assert_eq!(tree.index_of("head"), Some(HEAD));
        assert_eq!(tree.index_of("left_wrist"), Some(LEFT_WRIST));
        assert_eq!(tree.index_of("right_wrist"), Some(RIGHT_WRIST));
        for (c, p) in tree.edges() {
            assert!(p < c);
            assert!(tree.rest_offset(c).norm() > 0.0);
            assert!(tree.neighbors(c).contains(&p));
            assert!(tree.neighbors(p).contains(&c));
        }
        assert_eq!(tree.edges().count(), 21);
        assert_eq!(tree.neighbors(9), &[6, 12, 13, 14]);
    }

    #[test]
    fn file_round_trip() {
        let tree = KinematicTree::smpl22();
        let text = tree.to_file_string();
        assert!(text.contains("convention"));
        assert_eq!(KinematicTree::from_file_str(&text).unwrap(), tree);
    }

    #[test]
    fn rejects_bad_topology() {
        let names = vec!["a".into(), "b".into(), "c".into()];
        let offs = vec![Vec3::zeros(), Vec3::x(), Vec3::x()];
        let err = KinematicTree::new(names.clone(), vec![None, Some(2), Some(0)], offs.clone());
        assert!(matches!(err, Err(SkeletonError::NotTopological { joint: 1, parent: 2 })));
        let err = KinematicTree::new(names.clone(), vec![Some(0), None, Some(0)], offs);
        assert!(matches!(err, Err(SkeletonError::RootNotFirst(_))));
        let err = KinematicTree::new(names, vec![None, Some(0), Some(1)], vec![Vec3::zeros(); 3]);
        assert!(matches!(err, Err(SkeletonError::ZeroOffset(1))));
    }

    #[test]
    fn unknown_parent_is_a_parse_error() {
        let text = format!(
            "convention = \"{COORDINATE_CONVENTION}\"\n[[joint]]\nname = \"root\"\noffset = [0.0, 0.0, 0.0]\n\
             [[joint]]\nname = \"a\"\nparent = \"nope\"\noffset = [1.0, 0.0, 0.0]\n"
        );
        assert!(matches!(KinematicTree::from_file_str(&text), Err(SkeletonError::Parse(_))));
    }
}
