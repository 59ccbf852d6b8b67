//! Dataset plumbing: scenes on disk as a manifest, one PNG + one annotation
//! record + one binary dense-map raster per scene. The record schema is
//! versioned JSON with fixed field names; masks keep their run-length
//! encoding and dense maps use the renderer's binary raster format, so a
//! round trip reproduces annotations bit for bit.

use super::rle::RleMask;
use super::{DenseSample, Scene, SceneAnnotation, SceneError};
use crate::geom::{CameraExtrinsics, CameraIntrinsics, OrientedBox, Pose};
use crate::raster::{load_canon_raster, load_color_png, save_canon_raster, RgbRaster};
use crate::template::{Dimensions, ShapeCoefficients};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Current schema version, stamped into the manifest and every record.
pub const SCHEMA_VERSION: u32 = 1;

const MANIFEST_NAME: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    format: String,
    version: u32,
    scenes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    skew: f64,
    width: u32,
    height: u32,
    /// World-to-camera rotation quaternion as [w, x, y, z].
    rotation: [f64; 4],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    center: [f64; 3],
    half_extents: [f64; 3],
    rotation: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    instance_id: u32,
    template_id: u32,
    coefficients: Vec<f64>,
    rotation: [f64; 4],
    translation: [f64; 3],
    /// Width, height, length in meters.
    dimensions: [f64; 3],
    bbox2d: [f64; 4],
    mask: RleMask,
    bbox3d: BoxRecord,
    tiny: bool,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    version: u32,
    image: String,
    dense_map: String,
    camera: CameraRecord,
    instances: Vec<InstanceRecord>,
}

fn quat_to_array(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

fn quat_from_array(a: &[f64; 4]) -> UnitQuaternion<f64> {
    let q = Quaternion::new(a[0], a[1], a[2], a[3]);
    // Records store unit quaternions; renormalizing would perturb the last
    // bit and break lossless round trips. Only repair clearly bad input.
    if (q.norm() - 1.0).abs() < 1e-9 {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::from_quaternion(q)
    }
}

fn vec_to_array(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn parse_err(path: &Path, msg: impl ToString) -> SceneError {
    SceneError::ParseError {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

/// Write scenes to `dir` (created if missing): `manifest.json` plus
/// `scene_NNNNN.{png,json,dense.bin}` per scene.
pub fn export_dataset(scenes: &[Scene], dir: &Path) -> Result<(), SceneError> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let stem = format!("scene_{i:05}");
        let image_name = format!("{stem}.png");
        let dense_name = format!("{stem}.dense.bin");
        scene.image.save_png(&dir.join(&image_name))?;

        // Reassemble the scene-wide dense plane from the per-instance maps;
        // pixels no instance claims stay NaN.
        let (w, h) = (scene.image.width, scene.image.height);
        let mut plane = vec![Vector3::repeat(f64::NAN); w * h];
        for ann in &scene.annotations {
            for s in &ann.dense_map {
                plane[(s.y as usize) * w + s.x as usize] = s.point;
            }
        }
        save_canon_raster(w, h, &plane, &dir.join(&dense_name))?;

        let record = SceneRecord {
            version: SCHEMA_VERSION,
            image: image_name,
            dense_map: dense_name,
            camera: CameraRecord {
                fx: scene.intrinsics.fx,
                fy: scene.intrinsics.fy,
                cx: scene.intrinsics.cx,
                cy: scene.intrinsics.cy,
                skew: scene.intrinsics.skew,
                width: scene.intrinsics.width,
                height: scene.intrinsics.height,
                rotation: quat_to_array(&scene.extrinsics.world_to_camera.rotation),
                translation: vec_to_array(&scene.extrinsics.world_to_camera.translation),
            },
            instances: scene
                .annotations
                .iter()
                .map(|ann| InstanceRecord {
                    instance_id: ann.instance_id,
                    template_id: ann.template_id,
                    coefficients: ann.coefficients.as_slice().to_vec(),
                    rotation: quat_to_array(&ann.pose.rotation),
                    translation: vec_to_array(&ann.pose.translation),
                    dimensions: [ann.dimensions.w, ann.dimensions.h, ann.dimensions.l],
                    bbox2d: ann.bbox2d,
                    mask: ann.instance_mask.clone(),
                    bbox3d: BoxRecord {
                        center: vec_to_array(&ann.bbox3d.center),
                        half_extents: vec_to_array(&ann.bbox3d.half_extents),
                        rotation: quat_to_array(&ann.bbox3d.rotation),
                    },
                    tiny: ann.tiny,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&record)
            .expect("annotation records always serialize");
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        names.push(stem);
    }
    let manifest = ManifestRecord {
        format: "cvis-forge-dataset".into(),
        version: SCHEMA_VERSION,
        scenes: names,
    };
    std::fs::write(
        dir.join(MANIFEST_NAME),
        serde_json::to_string_pretty(&manifest).expect("manifest always serializes"),
    )?;
    Ok(())
}

/// Read a dataset directory written by [`export_dataset`] back into scenes.
pub fn import_annotations(dir: &Path) -> Result<Vec<Scene>, SceneError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest: ManifestRecord = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| parse_err(&manifest_path, format!("cannot read manifest: {e}")))?,
    )
    .map_err(|e| parse_err(&manifest_path, e))?;
    if manifest.version != SCHEMA_VERSION {
        return Err(SceneError::SchemaVersionMismatch {
            found: manifest.version,
            expected: SCHEMA_VERSION,
        });
    }

    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for stem in &manifest.scenes {
        let record_path = dir.join(format!("{stem}.json"));
        let record: SceneRecord = serde_json::from_str(
            &std::fs::read_to_string(&record_path)
                .map_err(|e| parse_err(&record_path, format!("cannot read record: {e}")))?,
        )
        .map_err(|e| parse_err(&record_path, e))?;
        if record.version != SCHEMA_VERSION {
            return Err(SceneError::SchemaVersionMismatch {
                found: record.version,
                expected: SCHEMA_VERSION,
            });
        }

        let image_path = dir.join(&record.image);
        let (w, h, pixels) = load_color_png(&image_path)
            .map_err(|e| parse_err(&image_path, format!("referenced image unreadable: {e}")))?;
        let image = RgbRaster::new(w, h, pixels);
        if (w, h) != (record.camera.width as usize, record.camera.height as usize) {
            return Err(parse_err(
                &image_path,
                format!(
                    "image is {w}x{h} but the record says {}x{}",
                    record.camera.width, record.camera.height
                ),
            ));
        }

        let dense_path = dir.join(&record.dense_map);
        let (dw, dh, plane) = load_canon_raster(&dense_path)
            .map_err(|e| parse_err(&dense_path, format!("dense map unreadable: {e}")))?;
        if (dw, dh) != (w, h) {
            return Err(parse_err(
                &dense_path,
                format!("dense map is {dw}x{dh}, image is {w}x{h}"),
            ));
        }

        let intrinsics = CameraIntrinsics::new(
            record.camera.fx,
            record.camera.fy,
            record.camera.cx,
            record.camera.cy,
            record.camera.width,
            record.camera.height,
        )
        .with_skew(record.camera.skew);
        let extrinsics = CameraExtrinsics::new(Pose::new(
            quat_from_array(&record.camera.rotation),
            Vector3::from(record.camera.translation),
        ));

        let mut annotations = Vec::with_capacity(record.instances.len());
        for inst in record.instances {
            if inst.mask.width as usize != w || inst.mask.height as usize != h {
                return Err(parse_err(
                    &record_path,
                    format!("instance {} mask does not match the image size", inst.instance_id),
                ));
            }
            // Rebuild the per-instance dense map in the compose order
            // (row-major over the mask).
            let bits = inst.mask.to_bitmap();
            let mut dense_map = Vec::with_capacity(inst.mask.area() as usize);
            for y in 0..h {
                for x in 0..w {
                    if bits[y * w + x] {
                        dense_map.push(DenseSample {
                            x: x as u32,
                            y: y as u32,
                            point: plane[y * w + x],
                        });
                    }
                }
            }
            annotations.push(SceneAnnotation {
                instance_id: inst.instance_id,
                template_id: inst.template_id,
                coefficients: ShapeCoefficients::new(inst.coefficients),
                pose: Pose::new(
                    quat_from_array(&inst.rotation),
                    Vector3::from(inst.translation),
                ),
                dimensions: Dimensions {
                    w: inst.dimensions[0],
                    h: inst.dimensions[1],
                    l: inst.dimensions[2],
                },
                bbox2d: inst.bbox2d,
                instance_mask: inst.mask,
                bbox3d: OrientedBox::new(
                    Vector3::from(inst.bbox3d.center),
                    Vector3::from(inst.bbox3d.half_extents),
                    quat_from_array(&inst.bbox3d.rotation),
                ),
                dense_map,
                tiny: inst.tiny,
            });
        }
        scenes.push(Scene {
            image,
            intrinsics,
            extrinsics,
            annotations,
        });
    }
    Ok(scenes)
}
