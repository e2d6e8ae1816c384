//! Detector keypoints to the 13-joint encoding consumed by shape embedding.

use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};

pub const NUM_RAW_POINTS: usize = 17;
pub const NUM_JOINTS: usize = 13;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;

/// Detector (COCO) order of the 17 raw points.
pub const RAW_POINT_NAMES: [&str; NUM_RAW_POINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Canonical joint order; the position in this list is the semantic index.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "face",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

const FACE_POINTS: usize = 5;

/// Raw detector output for one image, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawKeypoints {
    pub points: Vec<[f64; 3]>,
    pub image_width: u32,
    pub image_height: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointEncoding {
    /// `(x / w, y / h, w / h)`, or `(-1, -1, w / h)` when undetected.
    pub position: [f64; 3],
    pub semantic_index: usize,
    pub detected: bool,
}

/// The 13 encoded joints of one person image.
///
/// Joints are usually held in canonical order, but nothing downstream relies
/// on it: the semantic index travels with each joint.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    joints: Vec<JointEncoding>,
}

impl KeypointSet {
    pub fn new(joints: Vec<JointEncoding>) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(ReidError::WrongArity {
                expected: NUM_JOINTS,
                got: joints.len(),
            });
        }
        let mut seen = [false; NUM_JOINTS];
        for j in &joints {
            if j.semantic_index >= NUM_JOINTS {
                return Err(ReidError::IndexOutOfRange(j.semantic_index));
            }
            if std::mem::replace(&mut seen[j.semantic_index], true) {
                return Err(ReidError::InvalidConfig(format!(
                    "semantic index {} repeated",
                    j.semantic_index
                )));
            }
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> &[JointEncoding] {
        &self.joints
    }

    /// Reorders joints so that output slot `i` holds input joint `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), NUM_JOINTS);
        Self {
            joints: perm.iter().map(|&i| self.joints[i]).collect(),
        }
    }

    pub fn num_detected(&self) -> usize {
        self.joints.iter().filter(|j| j.detected).count()
    }
}

/// Normalized position triple of one joint.
pub fn encode_position(
    point: Option<(f64, f64)>,
    image_width: f64,
    image_height: f64,
) -> Result<[f64; 3]> {
    if !(image_width > 0.0 && image_height > 0.0) {
        return Err(ReidError::NonPositiveDimensions {
            width: image_width,
            height: image_height,
        });
    }
    let aspect = image_width / image_height;
    Ok(match point {
        Some((x, y)) => [x / image_width, y / image_height, aspect],
        None => [-1.0, -1.0, aspect],
    })
}

pub fn encode_semantics(semantic_index: usize) -> Result<[f64; NUM_JOINTS]> {
    if semantic_index >= NUM_JOINTS {
        return Err(ReidError::IndexOutOfRange(semantic_index));
    }
    let mut v = [0.0; NUM_JOINTS];
    v[semantic_index] = 1.0;
    Ok(v)
}

/// Collapses the five face points into one joint and encodes all 13 joints.
///
/// The face joint is the mean of the face points whose confidence reaches
/// `confidence_threshold`; it is undetected when none do. Body joints below
/// the threshold, or lying outside the image, are undetected.
pub fn reduce_keypoints(raw: &RawKeypoints, confidence_threshold: f64) -> Result<KeypointSet> {
    if raw.points.len() != NUM_RAW_POINTS {
        return Err(ReidError::WrongArity {
            expected: NUM_RAW_POINTS,
            got: raw.points.len(),
        });
    }
    let w = raw.image_width as f64;
    let h = raw.image_height as f64;
    // Points outside the frame cannot satisfy the [0, 1] position range.
    let confident = |p: &[f64; 3]| {
        p[2] >= confidence_threshold && (0.0..=w).contains(&p[0]) && (0.0..=h).contains(&p[1])
    };

    let face: Vec<&[f64; 3]> = raw.points[..FACE_POINTS].iter().filter(|p| confident(p)).collect();
    let face_point = (!face.is_empty()).then(|| {
        let n = face.len() as f64;
        (
            face.iter().map(|p| p[0]).sum::<f64>() / n,
            face.iter().map(|p| p[1]).sum::<f64>() / n,
        )
    });

    let mut joints = Vec::with_capacity(NUM_JOINTS);
    joints.push(JointEncoding {
        position: encode_position(face_point, w, h)?,
        semantic_index: 0,
        detected: face_point.is_some(),
    });
    for (k, p) in raw.points[FACE_POINTS..].iter().enumerate() {
        let point = confident(p).then_some((p[0], p[1]));
        joints.push(JointEncoding {
            position: encode_position(point, w, h)?,
            semantic_index: k + 1,
            detected: point.is_some(),
        });
    }
    KeypointSet::new(joints)
}
