//! `estimate`: recover 6-DoF poses with RANSAC-PnP, either for every
//! instance of a dataset (via the simulated dense predictor) or for a single
//! correspondence text file.

use crate::commands::{ensure_dir, require_dataset};
use crate::config::{derive_seed, streams, PipelineConfig};
use crate::dumps::{
    pose_to_fields, write_estimates, EstimatesFile, InstanceEstimate, SceneEstimates,
    ESTIMATES_FORMAT, ESTIMATES_VERSION,
};
use crate::Failure;
use cvis_forge_core::geom::{CameraIntrinsics, Pose};
use cvis_forge_core::pose::{
    camera_to_world, estimate_dimensions, ransac_pnp, simulate_predictor, CorrespondenceSet,
};
use cvis_forge_core::scene::Scene;
use rayon::prelude::*;

pub fn run(cfg: &PipelineConfig) -> Result<(), Failure> {
    let out = &cfg.paths.output;
    ensure_dir(out)?;
    let file = match &cfg.paths.points {
        Some(points) => solve_points_file(cfg, points)?,
        None => {
            let (_, scenes) = require_dataset(cfg)?;
            estimate_dataset(cfg, &scenes)
        }
    };
    write_estimates(&file, out)?;
    cfg.write_manifest("estimate", out)?;
    let (ok, failed): (usize, usize) = file.scenes.iter().flat_map(|s| &s.instances).fold(
        (0, 0),
        |(ok, failed), inst| {
            if inst.is_ok() {
                (ok + 1, failed)
            } else {
                (ok, failed + 1)
            }
        },
    );
    println!(
        "estimated {ok} instance(s) ({failed} failed) -> {}",
        out.join(crate::dumps::ESTIMATES_NAME).display()
    );
    Ok(())
}

fn solve_points_file(cfg: &PipelineConfig, points: &std::path::Path) -> Result<EstimatesFile, Failure> {
    let (camera, cs) = crate::dumps::read_points_file(points)?;
    let ransac = cfg.ransac_config(derive_seed(cfg.seed, streams::RANSAC, 0));
    let instance = match ransac_pnp(&cs, &camera, &ransac) {
        Ok(est) => {
            let (q, t) = pose_to_fields(&est.pose);
            println!(
                "pose: rotation [w x y z] = [{:.9} {:.9} {:.9} {:.9}]  translation = [{:.6} {:.6} {:.6}] m",
                q[0], q[1], q[2], q[3], t[0], t[1], t[2]
            );
            println!(
                "inliers {}/{}  rms {:.4} px  iterations {}",
                est.inlier_count(),
                cs.len(),
                est.rms_reprojection,
                est.iterations_used
            );
            InstanceEstimate {
                instance_id: 1,
                status: "ok".into(),
                score: Some(est.inlier_count() as f64 / cs.len() as f64),
                rotation: Some(q),
                translation: Some(t),
                dimensions: None,
                bbox2d: None,
                rms_reprojection: Some(est.rms_reprojection),
                iterations: Some(est.iterations_used),
                inliers: Some(est.inlier_count()),
            }
        }
        Err(e) => InstanceEstimate::failed(1, e.to_string()),
    };
    Ok(EstimatesFile {
        format: ESTIMATES_FORMAT.into(),
        version: ESTIMATES_VERSION,
        frame: "camera".into(),
        scenes: vec![SceneEstimates {
            scene: 0,
            instances: vec![instance],
        }],
    })
}

fn estimate_dataset(cfg: &PipelineConfig, scenes: &[Scene]) -> EstimatesFile {
    let per_scene: Vec<SceneEstimates> = scenes
        .par_iter()
        .enumerate()
        .map(|(si, scene)| SceneEstimates {
            scene: si,
            instances: scene
                .annotations
                .iter()
                .map(|ann| estimate_instance(cfg, scene, si, ann))
                .collect(),
        })
        .collect();
    EstimatesFile {
        format: ESTIMATES_FORMAT.into(),
        version: ESTIMATES_VERSION,
        frame: "world".into(),
        scenes: per_scene,
    }
}

fn estimate_instance(
    cfg: &PipelineConfig,
    scene: &Scene,
    scene_index: usize,
    ann: &cvis_forge_core::scene::SceneAnnotation,
) -> InstanceEstimate {
    let instance_id = ann.instance_id;
    // One seed stream per (scene, instance); ids are small, so this cannot
    // collide across the scenes of any realistic dataset.
    let idx = (scene_index as u64) << 20 | u64::from(instance_id);
    let noise = cfg.noise_model(derive_seed(cfg.seed, streams::NOISE, idx));
    let cs = match simulate_predictor(ann, &noise) {
        Ok(cs) => cs,
        Err(e) => return InstanceEstimate::failed(instance_id, e.to_string()),
    };
    let ransac = cfg.ransac_config(derive_seed(cfg.seed, streams::RANSAC, idx));
    match ransac_pnp(&cs, &scene.intrinsics, &ransac) {
        Ok(est) => {
            let world = camera_to_world(&est.pose, &scene.extrinsics);
            let (q, t) = pose_to_fields(&world);
            InstanceEstimate {
                instance_id,
                status: "ok".into(),
                score: Some(est.inlier_count() as f64 / cs.len() as f64),
                rotation: Some(q),
                translation: Some(t),
                dimensions: estimate_dimensions(&cs.points)
                    .ok()
                    .map(|d| [d.w, d.h, d.l]),
                bbox2d: projected_bbox(&est.pose, &cs, &scene.intrinsics),
                rms_reprojection: Some(est.rms_reprojection),
                iterations: Some(est.iterations_used),
                inliers: Some(est.inlier_count()),
            }
        }
        Err(e) => InstanceEstimate::failed(instance_id, e.to_string()),
    }
}

/// Bound of the predicted 3D points re-projected under the estimated
/// camera-frame pose, clipped to the image.
fn projected_bbox(
    pose_cam: &Pose,
    cs: &CorrespondenceSet,
    k: &CameraIntrinsics,
) -> Option<[f64; 4]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in &cs.points {
        let c = pose_cam.transform_point(p);
        if c.z <= 1e-9 {
            continue;
        }
        let u = (k.fx * c.x + k.skew * c.y) / c.z + k.cx;
        let v = k.fy * c.y / c.z + k.cy;
        lo[0] = lo[0].min(u);
        lo[1] = lo[1].min(v);
        hi[0] = hi[0].max(u);
        hi[1] = hi[1].max(v);
    }
    if lo[0] >= hi[0] || lo[1] >= hi[1] {
        return None;
    }
    let (w, h) = (f64::from(k.width), f64::from(k.height));
    let bbox = [
        lo[0].clamp(0.0, w),
        lo[1].clamp(0.0, h),
        hi[0].clamp(0.0, w),
        hi[1].clamp(0.0, h),
    ];
    (bbox[0] < bbox[2] && bbox[1] < bbox[3]).then_some(bbox)
}
