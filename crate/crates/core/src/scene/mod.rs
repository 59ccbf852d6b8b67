//! Scene synthesis: drop textured vehicles onto a calibrated background
//! image with collision-free placement, render them with shadows, and emit
//! exact 2D/3D ground truth for every instance.

mod background;
mod dataset;
mod rle;

pub use background::make_procedural_background;
pub use dataset::{export_dataset, import_annotations};
pub use rle::RleMask;

use crate::geom::{obb_intersect, CameraExtrinsics, CameraIntrinsics, OrientedBox, Plane, Pose};
use crate::inpaint::TextureAtlas;
use crate::raster::{
    rasterize, shadow_pass, DirectionalLight, Framebuffer, RasterError, RenderInstance, RgbRaster,
};
use crate::template::{deform, Dimensions, ShapeCoefficients, TemplateError, VehicleTemplate};
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Instances whose visible mask is smaller than this many pixels are still
/// annotated but flagged `tiny`.
pub const TINY_MASK_AREA: u64 = 50;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("placement rejected {attempts} samples without fitting all vehicles")]
    PlacementExhausted { attempts: usize },
    #[error("dataset schema version {found}, this reader expects {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("{path}: {msg}")]
    ParseError { path: String, msg: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A calibrated background: image plus the camera, ground plane, and light
/// under which vehicles will be composited onto it.
#[derive(Debug, Clone)]
pub struct Background {
    pub image: RgbRaster,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub ground: Plane,
    pub light: DirectionalLight,
}

impl Background {
    pub fn new(
        image: RgbRaster,
        intrinsics: CameraIntrinsics,
        extrinsics: CameraExtrinsics,
        ground: Plane,
        light: DirectionalLight,
    ) -> Self {
        assert_eq!(
            (image.width, image.height),
            (intrinsics.width as usize, intrinsics.height as usize),
            "background image and intrinsics dimensions differ"
        );
        Self {
            image,
            intrinsics,
            extrinsics,
            ground,
            light,
        }
    }
}

/// Sampling parameters for collision-free vehicle placement.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementConfig {
    pub count: usize,
    /// Yaw interval in radians; degenerate (lo == hi) pins the yaw.
    pub yaw_range: (f64, f64),
    /// Ground-plane rectangle the vehicle centers are drawn from, in meters.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Required clearance between vehicle boxes, in meters.
    pub min_gap: f64,
    /// Total sample budget before giving up with `PlacementExhausted`.
    pub max_attempts: usize,
    pub seed: u64,
}

impl PlacementConfig {
    /// Placement over the region the procedural background camera watches.
    pub fn standard(count: usize, seed: u64) -> Self {
        Self {
            count,
            yaw_range: (-std::f64::consts::PI, std::f64::consts::PI),
            x_range: (-6.0, 6.0),
            y_range: (8.0, 30.0),
            min_gap: 0.3,
            max_attempts: 200 * count.max(1),
            seed,
        }
    }
}

/// One pixel of the dense image↔model correspondence map. `point` is the
/// instance-local surface position (after shape deformation, before the
/// pose) seen at the pixel center `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSample {
    pub x: u32,
    pub y: u32,
    pub point: Vector3<f64>,
}

/// Complete ground truth for one composited vehicle instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    /// 1-based id matching the framebuffer's instance plane.
    pub instance_id: u32,
    /// Index into the fleet the scene was composed from.
    pub template_id: u32,
    pub coefficients: ShapeCoefficients,
    /// Model-to-world pose.
    pub pose: Pose,
    pub dimensions: Dimensions,
    /// Tight continuous bound of the visible mask, `(xmin, ymin, xmax,
    /// ymax)` in pixels; all-zero when the instance is entirely hidden.
    pub bbox2d: [f64; 4],
    pub instance_mask: RleMask,
    pub bbox3d: OrientedBox,
    pub dense_map: Vec<DenseSample>,
    /// Visible mask smaller than [`TINY_MASK_AREA`] pixels.
    pub tiny: bool,
}

/// A composed image with its ground truth and the camera it was made with.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbRaster,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub annotations: Vec<SceneAnnotation>,
}

/// Axis-aligned bounds of the deformed mesh in its local frame.
fn local_bounds(
    template: &VehicleTemplate,
    coefficients: &ShapeCoefficients,
) -> Result<(Vector3<f64>, Vector3<f64>), TemplateError> {
    let vertices = deform(template, coefficients)?;
    let mut min = vertices[0];
    let mut max = vertices[0];
    for v in &vertices[1..] {
        min = min.inf(v);
        max = max.sup(v);
    }
    Ok((min, max))
}

fn bounds_to_box(min: &Vector3<f64>, max: &Vector3<f64>, pose: &Pose) -> OrientedBox {
    OrientedBox::new(
        pose.transform_point(&((min + max) * 0.5)),
        (max - min) * 0.5,
        pose.rotation,
    )
}

/// Height of the ground plane at a given (x, y); the plane must not be
/// vertical.
fn ground_height(ground: &Plane, x: f64, y: f64) -> f64 {
    assert!(
        ground.normal.z.abs() > 1e-9,
        "ground plane is vertical; cannot rest vehicles on it"
    );
    (ground.offset - ground.normal.x * x - ground.normal.y * y) / ground.normal.z
}

/// Draw collision-free poses for `cfg.count` vehicles by rejection sampling:
/// centers uniform in the config rectangle with the box bottom resting on
/// the ground plane, yaw uniform in range, zero pitch and roll. Candidates
/// whose box — inflated by half the clearance gap — intersects any accepted
/// box are rejected. Vehicle `i` takes its shape from `fleet[i % len]`.
pub fn place_vehicles(
    bg: &Background,
    cfg: &PlacementConfig,
    fleet: &[(VehicleTemplate, ShapeCoefficients)],
) -> Result<Vec<Pose>, SceneError> {
    assert!(!fleet.is_empty() || cfg.count == 0, "empty fleet");
    assert!(
        cfg.x_range.0 < cfg.x_range.1 && cfg.y_range.0 < cfg.y_range.1,
        "degenerate placement region"
    );
    assert!(cfg.yaw_range.0 <= cfg.yaw_range.1 && cfg.min_gap >= 0.0);
    assert!(cfg.max_attempts >= cfg.count);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut poses: Vec<Pose> = Vec::with_capacity(cfg.count);
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(cfg.count);
    let mut attempts = 0usize;
    for i in 0..cfg.count {
        let (template, coefficients) = &fleet[i % fleet.len()];
        let (min, max) = local_bounds(template, coefficients)?;
        loop {
            attempts += 1;
            if attempts > cfg.max_attempts {
                return Err(SceneError::PlacementExhausted {
                    attempts: cfg.max_attempts,
                });
            }
            let x = rng.gen_range(cfg.x_range.0..cfg.x_range.1);
            let y = rng.gen_range(cfg.y_range.0..cfg.y_range.1);
            let yaw = if cfg.yaw_range.0 == cfg.yaw_range.1 {
                cfg.yaw_range.0
            } else {
                rng.gen_range(cfg.yaw_range.0..cfg.yaw_range.1)
            };
            let z = ground_height(&bg.ground, x, y) - min.z;
            let pose = Pose::from_yaw_pitch_roll(yaw, 0.0, 0.0, Vector3::new(x, y, z));
            let candidate = bounds_to_box(&min, &max, &pose);
            let inflated = candidate.inflated(cfg.min_gap * 0.5);
            if boxes
                .iter()
                .all(|b| !obb_intersect(&inflated, &b.inflated(cfg.min_gap * 0.5)))
            {
                poses.push(pose);
                boxes.push(candidate);
                break;
            }
        }
    }
    Ok(poses)
}

/// Render placed vehicles over the background and extract per-instance
/// ground truth from the framebuffer planes. Vehicle `i` takes its shape
/// from `fleet[i % len]` and its texture from `atlases[i % len]`, which must
/// all be complete (inpainted). Shadows are cast first so every vehicle is
/// drawn over the fully shadowed background.
pub fn compose(
    bg: &Background,
    placements: &[Pose],
    fleet: &[(VehicleTemplate, ShapeCoefficients)],
    atlases: &[TextureAtlas],
) -> Result<Scene, SceneError> {
    if !placements.is_empty() {
        assert!(!fleet.is_empty() && !atlases.is_empty(), "empty fleet");
    }
    for atlas in atlases {
        if !atlas.is_complete() {
            return Err(SceneError::Raster(RasterError::IncompleteTexture));
        }
    }

    let (w, h) = (bg.image.width, bg.image.height);
    let mut fb = Framebuffer::new(w, h);
    fb.color.copy_from_slice(&bg.image.pixels);

    let instance = |i: usize| RenderInstance {
        template: &fleet[i % fleet.len()].0,
        coefficients: &fleet[i % fleet.len()].1,
        pose: &placements[i],
        atlas: &atlases[i % atlases.len()],
    };
    for i in 0..placements.len() {
        shadow_pass(
            &instance(i),
            &bg.light,
            &bg.ground,
            &bg.intrinsics,
            &bg.extrinsics,
            &mut fb,
        )?;
    }
    for i in 0..placements.len() {
        rasterize(
            &instance(i),
            &bg.light,
            &bg.intrinsics,
            &bg.extrinsics,
            &mut fb,
            (i + 1) as u32,
        )?;
    }

    // One pass over the framebuffer collects every instance's mask bits and
    // dense correspondences (row-major; importers rebuild the same order).
    let mut bitmaps: Vec<Vec<bool>> = vec![vec![false; w * h]; placements.len()];
    let mut dense: Vec<Vec<DenseSample>> = vec![Vec::new(); placements.len()];
    for y in 0..h {
        for x in 0..w {
            let di = fb.index(x, y);
            let id = fb.instance_id[di] as usize;
            if id == 0 {
                continue;
            }
            bitmaps[id - 1][di] = true;
            let p = fb.canon_point[di];
            // Stored at f32 precision so annotations survive the binary
            // raster round trip bit-for-bit.
            dense[id - 1].push(DenseSample {
                x: x as u32,
                y: y as u32,
                point: Vector3::new(
                    f64::from(p.x as f32),
                    f64::from(p.y as f32),
                    f64::from(p.z as f32),
                ),
            });
        }
    }

    let mut annotations = Vec::with_capacity(placements.len());
    for (i, pose) in placements.iter().enumerate() {
        let (template, coefficients) = &fleet[i % fleet.len()];
        let (min, max) = local_bounds(template, coefficients)?;
        let extent = max - min;
        let instance_mask = RleMask::from_bitmap(w as u32, h as u32, &bitmaps[i]);
        let bbox2d = match instance_mask.tight_bbox() {
            Some((x0, y0, x1, y1)) => [
                f64::from(x0),
                f64::from(y0),
                f64::from(x1 + 1),
                f64::from(y1 + 1),
            ],
            None => [0.0; 4],
        };
        let tiny = instance_mask.area() < TINY_MASK_AREA;
        annotations.push(SceneAnnotation {
            instance_id: (i + 1) as u32,
            template_id: (i % fleet.len()) as u32,
            coefficients: coefficients.clone(),
            pose: *pose,
            dimensions: Dimensions {
                w: extent.x,
                h: extent.z,
                l: extent.y,
            },
            bbox2d,
            instance_mask,
            bbox3d: bounds_to_box(&min, &max, pose),
            dense_map: std::mem::take(&mut dense[i]),
            tiny,
        });
    }

    Ok(Scene {
        image: fb.color_raster(),
        intrinsics: bg.intrinsics,
        extrinsics: bg.extrinsics,
        annotations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project;
    use crate::inpaint::make_procedural_atlas;
    use crate::template::make_procedural_template;

    fn small_background(seed: u64) -> Background {
        make_procedural_background(320, 240, seed)
    }

    fn fleet_of(n: usize) -> Vec<(VehicleTemplate, ShapeCoefficients)> {
        (0..n)
            .map(|i| {
                let t = make_procedural_template(i as u64);
                let c = ShapeCoefficients::new(vec![
                    0.4 - 0.2 * i as f64,
                    -0.5,
                    0.3 * i as f64,
                    0.8,
                ]);
                (t, c)
            })
            .collect()
    }

    fn atlases_of(n: usize) -> Vec<TextureAtlas> {
        (0..n).map(|i| make_procedural_atlas(96, i as u64)).collect()
    }

    #[test]
    fn single_vehicle_placement_succeeds_and_rests_on_the_ground() {
        let bg = small_background(1);
        let fleet = fleet_of(1);
        for seed in 0..8 {
            let cfg = PlacementConfig::standard(1, seed);
            let poses = place_vehicles(&bg, &cfg, &fleet).unwrap();
            assert_eq!(poses.len(), 1);
            let p = &poses[0];
            assert!(p.translation.x >= cfg.x_range.0 && p.translation.x < cfg.x_range.1);
            assert!(p.translation.y >= cfg.y_range.0 && p.translation.y < cfg.y_range.1);
            let (yaw, pitch, roll) = p.yaw_pitch_roll();
            assert!(yaw >= cfg.yaw_range.0 && yaw < cfg.yaw_range.1);
            assert!(pitch.abs() < 1e-12 && roll.abs() < 1e-12);
            // Lowest corner of the box sits exactly on the ground plane.
            let (min, max) = local_bounds(&fleet[0].0, &fleet[0].1).unwrap();
            let lowest = bounds_to_box(&min, &max, p)
                .corners()
                .iter()
                .map(|c| bg.ground.signed_distance(c))
                .fold(f64::INFINITY, f64::min);
            assert!(lowest.abs() < 1e-9, "box floats {lowest} m off the ground");
        }
    }

    #[test]
    fn placement_is_deterministic_per_seed() {
        let bg = small_background(1);
        let fleet = fleet_of(3);
        let cfg = PlacementConfig::standard(5, 99);
        let a = place_vehicles(&bg, &cfg, &fleet).unwrap();
        let b = place_vehicles(&bg, &cfg, &fleet).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overfull_region_exhausts_the_sample_budget() {
        let bg = small_background(1);
        let fleet = fleet_of(1);
        // Fifty sedans cannot fit in 10 m x 10 m; the footprint bound alone
        // exceeds the region several times over.
        let cfg = PlacementConfig {
            count: 50,
            x_range: (-5.0, 5.0),
            y_range: (10.0, 20.0),
            max_attempts: 3000,
            ..PlacementConfig::standard(50, 7)
        };
        match place_vehicles(&bg, &cfg, &fleet) {
            Err(SceneError::PlacementExhausted { attempts }) => assert_eq!(attempts, 3000),
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn accepted_placements_have_no_box_intersections() {
        let bg = small_background(1);
        let fleet = fleet_of(3);
        for seed in [0, 1, 2] {
            let cfg = PlacementConfig::standard(6, seed);
            let poses = place_vehicles(&bg, &cfg, &fleet).unwrap();
            let boxes: Vec<OrientedBox> = poses
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let (min, max) = local_bounds(&fleet[i % 3].0, &fleet[i % 3].1).unwrap();
                    bounds_to_box(&min, &max, p)
                })
                .collect();
            for i in 0..boxes.len() {
                for j in 0..i {
                    assert!(
                        !obb_intersect(&boxes[i], &boxes[j]),
                        "seed {seed}: boxes {i} and {j} intersect"
                    );
                    // The clearance margin also held at acceptance time.
                    assert!(!obb_intersect(
                        &boxes[i].inflated(cfg.min_gap * 0.5),
                        &boxes[j].inflated(cfg.min_gap * 0.5)
                    ));
                }
            }
        }
    }

    #[test]
    fn zero_vehicles_compose_to_the_background_bitwise() {
        let bg = small_background(4);
        let scene = compose(&bg, &[], &[], &[]).unwrap();
        assert_eq!(scene.image, bg.image);
        assert!(scene.annotations.is_empty());
    }

    #[test]
    fn incomplete_atlas_is_rejected() {
        let bg = small_background(4);
        let fleet = fleet_of(1);
        let poses = place_vehicles(&bg, &PlacementConfig::standard(1, 0), &fleet).unwrap();
        let mut atlas = make_procedural_atlas(96, 0);
        atlas.valid[0] = false;
        let err = compose(&bg, &poses, &fleet, &[atlas]).unwrap_err();
        assert!(matches!(
            err,
            SceneError::Raster(RasterError::IncompleteTexture)
        ));
    }

    #[test]
    fn masks_partition_the_vehicle_pixels() {
        let bg = small_background(2);
        let fleet = fleet_of(3);
        let cfg = PlacementConfig::standard(4, 11);
        let poses = place_vehicles(&bg, &cfg, &fleet).unwrap();
        let scene = compose(&bg, &poses, &fleet, &atlases_of(3)).unwrap();
        assert_eq!(scene.annotations.len(), 4);

        let n = bg.image.width * bg.image.height;
        let mut claimed = vec![false; n];
        for ann in &scene.annotations {
            let bits = ann.instance_mask.to_bitmap();
            for (i, &b) in bits.iter().enumerate() {
                if b {
                    assert!(!claimed[i], "pixel {i} claimed by two instances");
                    claimed[i] = true;
                }
            }
            // Dense samples live exactly on the mask, in row-major order.
            assert_eq!(ann.dense_map.len() as u64, ann.instance_mask.area());
            let mut last = None;
            for s in &ann.dense_map {
                let idx = (s.y as usize) * bg.image.width + s.x as usize;
                assert!(bits[idx]);
                assert!(s.point.iter().all(|v| v.is_finite()));
                assert!(last < Some((s.y, s.x)), "dense map out of order");
                last = Some((s.y, s.x));
            }
            // bbox2d is the tight mask bound.
            if ann.instance_mask.area() > 0 {
                let (x0, y0, x1, y1) = ann.instance_mask.tight_bbox().unwrap();
                assert_eq!(
                    ann.bbox2d,
                    [
                        f64::from(x0),
                        f64::from(y0),
                        f64::from(x1 + 1),
                        f64::from(y1 + 1)
                    ]
                );
            }
        }
        // Union of masks == vehicle pixels: compare against a recount of the
        // scene image... the id plane is internal, so check via annotations:
        // every vehicle pixel is claimed by exactly one mask and at least
        // one mask is nonempty.
        assert!(scene.annotations.iter().any(|a| a.instance_mask.area() > 0));
    }

    /// Worst distance (px) any in-image projected bbox3d corner lands
    /// outside the mask's 2D box.
    fn corner_overshoot(scene: &Scene, ann: &SceneAnnotation) -> f64 {
        let [x0, y0, x1, y1] = ann.bbox2d;
        let mut worst: f64 = 0.0;
        for corner in ann.bbox3d.corners() {
            let (px, _) = project(&corner, &scene.intrinsics, &scene.extrinsics).unwrap();
            if !scene.intrinsics.contains_pixel(&px) {
                continue;
            }
            worst = worst
                .max(x0 - px.x)
                .max(px.x - x1)
                .max(y0 - px.y)
                .max(px.y - y1);
        }
        worst
    }

    #[test]
    fn projected_box_corners_hug_the_mask_bbox() {
        let bg = small_background(3);
        let fleet = fleet_of(1);
        let atlases = atlases_of(1);

        // A plain mid-range three-quarter view.
        let (min, _) = local_bounds(&fleet[0].0, &fleet[0].1).unwrap();
        let pose = Pose::from_yaw_pitch_roll(
            0.4,
            0.0,
            0.0,
            Vector3::new(1.5, 20.0, ground_height(&bg.ground, 1.5, 20.0) - min.z),
        );
        let scene = compose(&bg, &[pose], &fleet, &atlases).unwrap();
        let ann = &scene.annotations[0];
        assert!(!ann.tiny, "vehicle should be plainly visible");
        assert!(
            corner_overshoot(&scene, ann) <= 2.0,
            "corners stray {:.2} px outside bbox2d",
            corner_overshoot(&scene, ann)
        );

        // Across arbitrary placements the overshoot stays bounded by the
        // box corners' overhang past the rounded body — under half a meter
        // for this template family — projected at the vehicle's depth.
        for seed in 0..30u64 {
            let cfg = PlacementConfig {
                count: 1,
                ..PlacementConfig::standard(1, seed)
            };
            let poses = place_vehicles(&bg, &cfg, &fleet).unwrap();
            let scene = compose(&bg, &poses, &fleet, &atlases).unwrap();
            let ann = &scene.annotations[0];
            let depth = bg
                .extrinsics
                .world_to_camera
                .transform_point(&ann.bbox3d.center)
                .z;
            let allowed = 2.0 + 0.45 * bg.intrinsics.fx / depth;
            let worst = corner_overshoot(&scene, ann);
            assert!(
                worst <= allowed,
                "seed {seed}: overshoot {worst:.2} px exceeds {allowed:.2} at {depth:.1} m"
            );
        }
    }

    #[test]
    fn occlusion_strictly_shrinks_the_rear_mask() {
        let bg = small_background(5);
        let fleet = fleet_of(1);
        let atlases = atlases_of(1);
        // Rear vehicle on the camera axis behind the front one.
        let (min, _) = local_bounds(&fleet[0].0, &fleet[0].1).unwrap();
        let at = |y: f64| {
            Pose::from_yaw_pitch_roll(
                0.0,
                0.0,
                0.0,
                Vector3::new(0.0, y, ground_height(&bg.ground, 0.0, y) - min.z),
            )
        };
        let solo = compose(&bg, &[at(18.0)], &fleet, &atlases).unwrap();
        let both = compose(&bg, &[at(10.0), at(18.0)], &fleet, &atlases).unwrap();
        let solo_area = solo.annotations[0].instance_mask.area();
        let rear_area = both.annotations[1].instance_mask.area();
        assert!(solo_area > 0);
        assert!(
            rear_area < solo_area,
            "rear mask {rear_area} px is not smaller than its solo render {solo_area} px"
        );
    }

    #[test]
    fn composition_is_deterministic() {
        let bg = small_background(6);
        let fleet = fleet_of(2);
        let cfg = PlacementConfig::standard(3, 42);
        let run = || {
            let poses = place_vehicles(&bg, &cfg, &fleet).unwrap();
            compose(&bg, &poses, &fleet, &atlases_of(2)).unwrap()
        };
        assert_eq!(run(), run());
    }
}
