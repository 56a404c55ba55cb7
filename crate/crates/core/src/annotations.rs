//! Keypoint annotations and their JSON file form.
//!
//! A file maps image ids to pose lists:
//!
//! ```json
//! {"img0": [{"joints": [[x, y, v], ...], "norm": 6.5, "score": 0.9}]}
//! ```
//!
//! Predictions use the same schema.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed annotation file: {0}")]
    Parse(String),
    #[error("{image}[{pose}]: {detail}")]
    Invalid { image: String, pose: usize, detail: String },
}

/// Keypoints `[x, y, v]` in pixels plus a normalization length.
///
/// `v > 0` marks an annotated joint. `norm` is the head-segment length for
/// PCKh or the object scale √area for OKS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseAnnotation {
    pub joints: Vec<[f32; 3]>,
    pub norm: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

impl PoseAnnotation {
    pub fn new(joints: Vec<[f32; 3]>, norm: f32) -> Self {
        Self {
            joints,
            norm,
            score: None,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn visible(&self, j: usize) -> bool {
        self.joints[j][2] > 0.0
    }

    pub fn visible_count(&self) -> usize {
        (0..self.joints.len()).filter(|&j| self.visible(j)).count()
    }

    /// Checks finiteness and `norm > 0`.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.norm.is_finite() && self.norm > 0.0) {
            return Err(format!("norm must be positive, got {}", self.norm));
        }
        for (j, p) in self.joints.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(format!("joint {j} is not finite: {p:?}"));
            }
        }
        if let Some(s) = self.score {
            if !s.is_finite() {
                return Err(format!("score is not finite: {s}"));
            }
        }
        Ok(())
    }
}

/// Left/right joint index pairs exchanged by a horizontal flip.
pub type FlipPairs = Vec<(usize, usize)>;

/// Validates that pairs are in range and each index appears at most once.
pub fn check_flip_pairs(pairs: &[(usize, usize)], k: usize) -> Result<(), String> {
    let mut seen = vec![false; k];
    for &(a, b) in pairs {
        for i in [a, b] {
            if i >= k {
                return Err(format!("flip index {i} out of range for {k} joints"));
            }
            if seen[i] {
                return Err(format!("flip index {i} repeated"));
            }
            seen[i] = true;
        }
    }
    Ok(())
}

/// Poses per image id, ordered by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationSet(pub BTreeMap<String, Vec<PoseAnnotation>>);

impl AnnotationSet {
    pub fn from_json(text: &str) -> Result<Self, AnnotationError> {
        let set: Self = serde_json::from_str(text).map_err(|e| AnnotationError::Parse(e.to_string()))?;
        for (image, poses) in &set.0 {
            for (pose, p) in poses.iter().enumerate() {
                p.validate().map_err(|detail| AnnotationError::Invalid {
                    image: image.clone(),
                    pose,
                    detail,
                })?;
            }
        }
        Ok(set)
    }

    pub fn read(path: &Path) -> Result<Self, AnnotationError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("annotations serialize")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = r#"{"a": [{"joints": [[1, 2, 1], [0, 0, 0]], "norm": 3.5, "score": 0.5}], "b": []}"#;
        let set = AnnotationSet::from_json(text).unwrap();
        assert_eq!(set.0["a"][0].visible_count(), 1);
        assert_eq!(set.0["a"][0].score, Some(0.5));
        assert_eq!(AnnotationSet::from_json(&set.to_json()).unwrap(), set);
    }

    #[test]
    fn rejects_bad_norm_and_shape() {
        let bad = r#"{"a": [{"joints": [[1, 2, 1]], "norm": 0}]}"#;
        assert!(matches!(
            AnnotationSet::from_json(bad),
            Err(AnnotationError::Invalid { pose: 0, .. })
        ));
        let bad = r#"{"a": [{"joints": [[1, 2]], "norm": 1}]}"#;
        assert!(matches!(AnnotationSet::from_json(bad), Err(AnnotationError::Parse(_))));
    }

    #[test]
    fn flip_pair_checks() {
        assert!(check_flip_pairs(&[(0, 1), (2, 3)], 4).is_ok());
        assert!(check_flip_pairs(&[(0, 4)], 4).is_err());
        assert!(check_flip_pairs(&[(0, 1), (1, 2)], 4).is_err());
    }
}
