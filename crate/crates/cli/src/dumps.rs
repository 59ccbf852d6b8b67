//! Prediction dump schema shared by `estimate` (writer) and `evaluate`
//! (reader), plus the hand-writable correspondence text format.
//!
//! `estimates.json` layout:
//! ```json
//! {
//!   "format": "cvis-forge-estimates",
//!   "version": 1,
//!   "frame": "world" | "camera",
//!   "scenes": [
//!     { "scene": 0, "instances": [
//!         { "instance_id": 1, "status": "ok", "score": 1.0,
//!           "rotation": [w, x, y, z], "translation": [x, y, z],
//!           "dimensions": [w, h, l], "bbox2d": [x0, y0, x1, y1],
//!           "rms_reprojection": 0.0, "iterations": 1, "inliers": 500 }
//!     ] }
//!   ]
//! }
//! ```
//! Failed instances carry their error message in `status` and omit the
//! numeric fields.
//!
//! Correspondence text format (one record per line, `#` comments):
//! ```text
//! camera <fx> <fy> <cx> <cy> [skew]
//! p <u> <v> <x> <y> <z>
//! ```

use crate::Failure;
use cvis_forge_core::geom::{CameraIntrinsics, Pose};
use cvis_forge_core::pose::CorrespondenceSet;
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ESTIMATES_FORMAT: &str = "cvis-forge-estimates";
pub const ESTIMATES_VERSION: u32 = 1;
pub const ESTIMATES_NAME: &str = "estimates.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatesFile {
    pub format: String,
    pub version: u32,
    /// Reference frame of the poses: "world" (dataset mode) or "camera"
    /// (single-file mode, where no extrinsics exist).
    pub frame: String,
    pub scenes: Vec<SceneEstimates>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEstimates {
    pub scene: usize,
    pub instances: Vec<InstanceEstimate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceEstimate {
    pub instance_id: u32,
    /// "ok", or the failure message.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Unit quaternion `[w, x, y, z]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translation: Option<[f64; 3]>,
    /// Estimated `[width, height, length]` in meters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dimensions: Option<[f64; 3]>,
    /// Projected bound of the predicted points, `[x0, y0, x1, y1]` pixels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox2d: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rms_reprojection: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inliers: Option<usize>,
}

impl InstanceEstimate {
    pub fn failed(instance_id: u32, message: String) -> Self {
        Self {
            instance_id,
            status: message,
            score: None,
            rotation: None,
            translation: None,
            dimensions: None,
            bbox2d: None,
            rms_reprojection: None,
            iterations: None,
            inliers: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn pose(&self) -> Option<Pose> {
        let r = self.rotation?;
        let t = self.translation?;
        let q = Quaternion::new(r[0], r[1], r[2], r[3]);
        // Stored quaternions are unit; renormalizing would perturb the last
        // bit and break byte-identical reproduction checks.
        let rotation = if (q.norm() - 1.0).abs() < 1e-9 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Some(Pose::new(rotation, Vector3::new(t[0], t[1], t[2])))
    }
}

pub fn pose_to_fields(pose: &Pose) -> ([f64; 4], [f64; 3]) {
    let q = pose.rotation.quaternion();
    let t = pose.translation;
    ([q.w, q.i, q.j, q.k], [t.x, t.y, t.z])
}

pub fn write_estimates(file: &EstimatesFile, dir: &Path) -> Result<(), Failure> {
    let path = dir.join(ESTIMATES_NAME);
    let text = serde_json::to_string_pretty(file)
        .map_err(|e| Failure::Domain(format!("cannot serialize estimates: {e}")))?;
    std::fs::write(&path, text)
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

/// Read an estimates file; a directory argument means
/// `<dir>/estimates.json`.
pub fn read_estimates(path: &Path) -> Result<EstimatesFile, Failure> {
    let path = if path.is_dir() {
        path.join(ESTIMATES_NAME)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let file: EstimatesFile = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("invalid estimates {}: {e}", path.display())))?;
    if file.format != ESTIMATES_FORMAT {
        return Err(Failure::Usage(format!(
            "{} is not an estimates dump (format {:?})",
            path.display(),
            file.format
        )));
    }
    if file.version != ESTIMATES_VERSION {
        return Err(Failure::Usage(format!(
            "estimates version {} unsupported (expected {ESTIMATES_VERSION})",
            file.version
        )));
    }
    Ok(file)
}

/// Parse a correspondence text file into the camera it declares and the
/// pixel/point pairs it lists.
pub fn read_points_file(path: &Path) -> Result<(CameraIntrinsics, CorrespondenceSet), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut camera: Option<CameraIntrinsics> = None;
    let mut pixels = Vec::new();
    let mut points = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| {
            Failure::Usage(format!("{}:{}: {msg}", path.display(), no + 1))
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let nums = || -> Result<Vec<f64>, Failure> {
            fields[1..]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| bad(format!("not a number: {s}")))
                })
                .collect()
        };
        match fields[0] {
            "camera" => {
                let n = nums()?;
                if !(n.len() == 4 || n.len() == 5) {
                    return Err(bad("camera takes fx fy cx cy [skew]".into()));
                }
                let width = (2.0 * n[2]).round().max(1.0) as u32;
                let height = (2.0 * n[3]).round().max(1.0) as u32;
                let mut k = CameraIntrinsics::new(n[0], n[1], n[2], n[3], width, height);
                if n.len() == 5 {
                    k = k.with_skew(n[4]);
                }
                camera = Some(k);
            }
            "p" => {
                let n = nums()?;
                if n.len() != 5 {
                    return Err(bad("p takes u v x y z".into()));
                }
                pixels.push(Vector2::new(n[0], n[1]));
                points.push(Vector3::new(n[2], n[3], n[4]));
            }
            other => return Err(bad(format!("unknown record `{other}`"))),
        }
    }
    let camera = camera.ok_or_else(|| {
        Failure::Usage(format!("{}: missing `camera` record", path.display()))
    })?;
    if pixels.is_empty() {
        return Err(Failure::Usage(format!(
            "{}: no correspondences",
            path.display()
        )));
    }
    Ok((camera, CorrespondenceSet::new(pixels, points)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_file_parses_camera_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.txt");
        std::fs::write(
            &path,
            "# demo\ncamera 600 601 320 240 0.5\np 10 20 0.1 0.2 0.3\np 30 40 -0.1 0 1\n",
        )
        .unwrap();
        let (k, cs) = read_points_file(&path).unwrap();
        assert_eq!((k.fx, k.fy, k.cx, k.cy, k.skew), (600.0, 601.0, 320.0, 240.0, 0.5));
        assert_eq!((k.width, k.height), (640, 480));
        assert_eq!(cs.len(), 2);
        assert_eq!(cs.pixels[1], Vector2::new(30.0, 40.0));
        assert_eq!(cs.points[0], Vector3::new(0.1, 0.2, 0.3));
    }

    #[test]
    fn points_file_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.txt");
        std::fs::write(&path, "camera 600 600 320 240\np 1 2 3\n").unwrap();
        let Err(Failure::Usage(msg)) = read_points_file(&path) else {
            panic!("expected a usage failure");
        };
        assert!(msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn estimate_pose_round_trips_bitwise() {
        let pose = Pose::from_yaw_pitch_roll(0.37, -0.12, 0.05, Vector3::new(1.5, -2.0, 14.0));
        let (rotation, translation) = pose_to_fields(&pose);
        let est = InstanceEstimate {
            rotation: Some(rotation),
            translation: Some(translation),
            ..InstanceEstimate::failed(1, "ok".into())
        };
        assert_eq!(est.pose().unwrap(), pose);
    }
}
