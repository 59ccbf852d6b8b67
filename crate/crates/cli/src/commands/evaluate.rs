//! `evaluate`: score an estimates dump against dataset ground truth —
//! COCO-style 2D-box mAP plus A3DP-Abs/Rel pose accuracy.

use crate::commands::{ensure_dir, require_dataset};
use crate::config::PipelineConfig;
use crate::dumps::read_estimates;
use crate::Failure;
use cvis_forge_core::metrics::{
    a3dp, average_precision, A3dpMode, A3dpScore, Detection, EvalImage, PoseEvalImage,
    PosePrediction, PoseTruth, Region, COCO_IOU_THRESHOLDS,
};
use cvis_forge_core::scene::{Scene, SceneAnnotation};
use cvis_forge_core::template::Dimensions;
use serde::Serialize;

pub const REPORT_FORMAT: &str = "cvis-forge-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Serialize)]
struct Report {
    format: String,
    version: u32,
    scenes: usize,
    truths: usize,
    estimates_ok: usize,
    estimates_failed: usize,
    map_box: f64,
    a3dp_abs: ReportA3dp,
    a3dp_rel: ReportA3dp,
}

#[derive(Serialize)]
struct ReportA3dp {
    mean: f64,
    c_l: f64,
    c_s: f64,
}

impl From<A3dpScore> for ReportA3dp {
    fn from(s: A3dpScore) -> Self {
        Self {
            mean: s.mean,
            c_l: s.c_l,
            c_s: s.c_s,
        }
    }
}

pub fn run(cfg: &PipelineConfig) -> Result<(), Failure> {
    let (_, scenes) = require_dataset(cfg)?;
    let est_path = cfg
        .paths
        .estimates
        .clone()
        .ok_or_else(|| Failure::Usage("no estimates given (--estimates or paths.estimates)".into()))?;
    let estimates = read_estimates(&est_path)?;
    if estimates.frame != "world" {
        return Err(Failure::Usage(format!(
            "estimates are {}-frame; evaluation needs the world-frame dump from dataset-mode estimate",
            estimates.frame
        )));
    }

    let mut box_images: Vec<EvalImage> = Vec::with_capacity(scenes.len());
    let mut pose_images: Vec<PoseEvalImage> = Vec::with_capacity(scenes.len());
    let mut truths = 0;
    let mut ok = 0;
    let mut failed = 0;
    for (si, scene) in scenes.iter().enumerate() {
        let mut boxes = EvalImage::default();
        let mut poses = PoseEvalImage::default();
        for ann in visible(scene) {
            truths += 1;
            boxes.truths.push(Region::Box(ann.bbox2d));
            poses.truths.push(PoseTruth {
                pose: scene.extrinsics.world_to_camera.compose(&ann.pose),
                dimensions: ann.dimensions,
            });
        }
        let instances = estimates
            .scenes
            .iter()
            .find(|s| s.scene == si)
            .map(|s| s.instances.as_slice())
            .unwrap_or(&[]);
        for inst in instances {
            // Tiny instances carry too few visible pixels for the predictor
            // and are kept out of the truth set, so estimates conditioned on
            // them must not count as false positives either.
            let tiny = scene
                .annotations
                .iter()
                .find(|a| a.instance_id == inst.instance_id)
                .is_some_and(|a| a.tiny);
            if tiny {
                continue;
            }
            if !inst.is_ok() {
                failed += 1;
                continue;
            }
            ok += 1;
            let score = inst.score.unwrap_or(0.0);
            if let Some(b) = inst.bbox2d {
                boxes.detections.push(Detection::new(Region::Box(b), score));
            }
            if let Some(world) = inst.pose() {
                poses.predictions.push(PosePrediction {
                    pose: scene.extrinsics.world_to_camera.compose(&world),
                    dimensions: if cfg.a3dp.use_estimated_dimensions {
                        inst.dimensions.map(|d| Dimensions {
                            w: d[0],
                            h: d[1],
                            l: d[2],
                        })
                    } else {
                        None
                    },
                    score,
                });
            }
        }
        box_images.push(boxes);
        pose_images.push(poses);
    }

    let map_box = average_precision(&box_images, &COCO_IOU_THRESHOLDS);
    let abs = a3dp(&pose_images, &cfg.a3dp_config(A3dpMode::Abs))
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let rel = a3dp(&pose_images, &cfg.a3dp_config(A3dpMode::Rel))
        .map_err(|e| Failure::Usage(e.to_string()))?;

    let report = Report {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        scenes: scenes.len(),
        truths,
        estimates_ok: ok,
        estimates_failed: failed,
        map_box,
        a3dp_abs: abs.into(),
        a3dp_rel: rel.into(),
    };
    let text = render_text(cfg, &report);

    let out = &cfg.paths.output;
    ensure_dir(out)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::Domain(format!("cannot serialize report: {e}")))?;
    std::fs::write(out.join("report.json"), json)
        .map_err(|e| Failure::Usage(format!("cannot write report.json: {e}")))?;
    std::fs::write(out.join("report.txt"), &text)
        .map_err(|e| Failure::Usage(format!("cannot write report.txt: {e}")))?;
    cfg.write_manifest("evaluate", out)?;
    print!("{text}");
    Ok(())
}

/// Ground-truth annotations that take part in evaluation (tiny ones don't).
fn visible(scene: &Scene) -> impl Iterator<Item = &SceneAnnotation> {
    scene.annotations.iter().filter(|a| !a.tiny)
}

fn render_text(cfg: &PipelineConfig, r: &Report) -> String {
    let abs_cfg = cfg.a3dp_config(A3dpMode::Abs);
    let loose = abs_cfg.levels[abs_cfg.loose_index];
    let strict = abs_cfg.levels[abs_cfg.strict_index];
    let shape_note = if cfg.a3dp.use_estimated_dimensions {
        "estimated dimensions"
    } else {
        "no dimension hypotheses (shape criterion vacuous)"
    };
    let mut s = String::new();
    s.push_str(&format!(
        "scenes {}  truths {}  estimates {} ok / {} failed\n",
        r.scenes, r.truths, r.estimates_ok, r.estimates_failed
    ));
    s.push_str(&format!(
        "A3DP ladder (ApolloCar3D-style): {} levels, loose [{:.2} m, {:.1} deg, {:.2}], strict [{:.2} m, {:.1} deg, {:.2}]; {}\n",
        abs_cfg.levels.len(),
        loose.0,
        loose.1.to_degrees(),
        loose.2,
        strict.0,
        strict.1.to_degrees(),
        strict.2,
        shape_note
    ));
    s.push('\n');
    s.push_str(
        "method       |   mAP | A3DP-Abs  c-l    c-s   | A3DP-Rel  c-l    c-s\n",
    );
    s.push_str(&format!(
        "ransac-pnp   | {:.3} | {:.3}     {:.3}  {:.3} | {:.3}     {:.3}  {:.3}\n",
        r.map_box,
        r.a3dp_abs.mean,
        r.a3dp_abs.c_l,
        r.a3dp_abs.c_s,
        r.a3dp_rel.mean,
        r.a3dp_rel.c_l,
        r.a3dp_rel.c_s
    ));
    s
}
