//! 6-DoF pose recovery from dense pixel↔model-point correspondences:
//! EPnP initialization, RANSAC outlier rejection, and damped Gauss-Newton
//! reprojection refinement, plus a configurable noise simulator standing in
//! for a learned correspondence predictor.
//!
//! Solvers work in the camera frame (model-to-camera pose) and are
//! extrinsics-free; [`camera_to_world`] lifts a solution into the world
//! frame afterwards.

mod epnp;
mod ransac;
mod refine;

pub use epnp::pnp_epnp;
pub use ransac::ransac_pnp;
pub use refine::refine_pose;

use crate::geom::{CameraExtrinsics, CameraIntrinsics, Pose};
use crate::scene::{DenseSample, SceneAnnotation};
use crate::template::Dimensions;
use nalgebra::{Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("{got} correspondences, at least {needed} required")]
    TooFewPoints { got: usize, needed: usize },
    #[error("degenerate point configuration (collinear or rank-deficient)")]
    DegenerateConfiguration,
    #[error("no consensus: best model explains only {best} correspondences")]
    NoConsensus { best: usize },
    #[error("annotation has an empty dense map")]
    EmptyDenseMap,
}

/// Paired image pixels and model points, equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pixels: Vec<Vector2<f64>>,
    pub points: Vec<Vector3<f64>>,
}

impl CorrespondenceSet {
    pub fn new(pixels: Vec<Vector2<f64>>, points: Vec<Vector3<f64>>) -> Self {
        assert_eq!(pixels.len(), points.len(), "pixel/point count mismatch");
        debug_assert!(
            pixels.iter().all(|p| p.x.is_finite() && p.y.is_finite())
                && points.iter().all(|p| p.iter().all(|v| v.is_finite())),
            "correspondences must be finite"
        );
        Self { pixels, points }
    }

    /// View an annotation's dense map as correspondences; pixels are taken
    /// at their centers.
    pub fn from_dense_map(dense: &[DenseSample]) -> Self {
        let pixels = dense
            .iter()
            .map(|s| Vector2::new(f64::from(s.x) + 0.5, f64::from(s.y) + 0.5))
            .collect();
        let points = dense.iter().map(|s| s.point).collect();
        Self::new(pixels, points)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pixels: indices.iter().map(|&i| self.pixels[i]).collect(),
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// RANSAC-PnP parameters. Defaults: 1000 iteration cap, 2 px inlier
/// threshold, minimal samples of 4, 0.99 confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub min_sample: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_threshold: 2.0,
            min_sample: 4,
            confidence: 0.99,
            seed: 0,
        }
    }
}

/// RANSAC-PnP output: the camera-frame pose plus its consensus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Per input correspondence, in input order.
    pub inlier_mask: Vec<bool>,
    /// RMS reprojection error in pixels over the inliers only.
    pub rms_reprojection: f64,
    pub iterations_used: usize,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

/// Synthetic corruption of a ground-truth dense map, standing in for the
/// error profile of a learned correspondence predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// Gaussian pixel noise, standard deviation in px.
    pub pixel_sigma: f64,
    /// Gaussian model-point noise, standard deviation in m per component.
    pub point_sigma: f64,
    /// Fraction of points replaced with uniform draws; exact count is
    /// `round(fraction * n)`.
    pub outlier_fraction: f64,
    /// Model-space bounds `(min, max)` the replacement points draw from.
    pub outlier_box: (Vector3<f64>, Vector3<f64>),
    /// At most this many correspondences are drawn from the dense map.
    pub samples: usize,
    pub seed: u64,
}

impl NoiseModel {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            pixel_sigma: 0.0,
            point_sigma: 0.0,
            outlier_fraction: 0.0,
            ..Self::default()
        }
        .with_seed(seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.5,
            point_sigma: 0.01,
            outlier_fraction: 0.0,
            outlier_box: (Vector3::new(-1.5, -3.0, -1.2), Vector3::new(1.5, 3.0, 1.2)),
            samples: 500,
            seed: 0,
        }
    }
}

/// Per-correspondence reprojection error in pixels for a camera-frame pose;
/// +∞ where the transformed point falls at or behind the camera.
pub fn reprojection_errors(
    pose: &Pose,
    cs: &CorrespondenceSet,
    k: &CameraIntrinsics,
) -> Vec<f64> {
    cs.points
        .iter()
        .zip(&cs.pixels)
        .map(|(p, pix)| {
            let q = pose.transform_point(p);
            if q.z <= 1e-9 {
                return f64::INFINITY;
            }
            let u = (k.fx * q.x + k.skew * q.y) / q.z + k.cx;
            let v = k.fy * q.y / q.z + k.cy;
            (Vector2::new(u, v) - pix).norm()
        })
        .collect()
}

/// RMS reprojection error in pixels over all correspondences.
pub fn rms_reprojection(pose: &Pose, cs: &CorrespondenceSet, k: &CameraIntrinsics) -> f64 {
    if cs.is_empty() {
        return 0.0;
    }
    let sum: f64 = reprojection_errors(pose, cs, k)
        .iter()
        .map(|e| e * e)
        .sum();
    (sum / cs.len() as f64).sqrt()
}

/// Lift a camera-frame pose into the world frame.
pub fn camera_to_world(pose_cam: &Pose, e: &CameraExtrinsics) -> Pose {
    e.world_to_camera.invert().compose(pose_cam)
}

/// Subsample an annotation's dense map and corrupt it per the noise model:
/// Gaussian pixel and point noise, then an exact `round(fraction * n)` of
/// the points replaced with uniform draws from the outlier box.
pub fn simulate_predictor(
    ann: &SceneAnnotation,
    nm: &NoiseModel,
) -> Result<CorrespondenceSet, PoseError> {
    if ann.dense_map.is_empty() {
        return Err(PoseError::EmptyDenseMap);
    }
    assert!((0.0..1.0).contains(&nm.outlier_fraction));
    assert!(nm.pixel_sigma >= 0.0 && nm.point_sigma >= 0.0 && nm.samples > 0);

    let mut rng = ChaCha8Rng::seed_from_u64(nm.seed);
    let n = ann.dense_map.len();
    let take = nm.samples.min(n);
    let mut chosen = rand::seq::index::sample(&mut rng, n, take).into_vec();
    chosen.sort_unstable();

    let pixel_noise = Normal::new(0.0, nm.pixel_sigma).expect("sigma is non-negative");
    let point_noise = Normal::new(0.0, nm.point_sigma).expect("sigma is non-negative");
    let mut pixels = Vec::with_capacity(take);
    let mut points = Vec::with_capacity(take);
    for &i in &chosen {
        let s = &ann.dense_map[i];
        pixels.push(Vector2::new(
            f64::from(s.x) + 0.5 + pixel_noise.sample(&mut rng),
            f64::from(s.y) + 0.5 + pixel_noise.sample(&mut rng),
        ));
        points.push(Vector3::new(
            s.point.x + point_noise.sample(&mut rng),
            s.point.y + point_noise.sample(&mut rng),
            s.point.z + point_noise.sample(&mut rng),
        ));
    }

    let outliers = (nm.outlier_fraction * take as f64).round() as usize;
    let mut corrupt = rand::seq::index::sample(&mut rng, take, outliers).into_vec();
    corrupt.sort_unstable();
    let (lo, hi) = nm.outlier_box;
    for i in corrupt {
        points[i] = Vector3::new(
            rng.gen_range(lo.x..=hi.x),
            rng.gen_range(lo.y..=hi.y),
            rng.gen_range(lo.z..=hi.z),
        );
    }
    Ok(CorrespondenceSet::new(pixels, points))
}

/// Vehicle dimensions from a predicted model-point cloud as per-axis
/// extents, trimmed to the middle 98% per axis when there are at least 100
/// distinct points (no trim below that).
pub fn estimate_dimensions(points: &[Vector3<f64>]) -> Result<Dimensions, PoseError> {
    let mut uniq: Vec<Vector3<f64>> = points.to_vec();
    uniq.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    });
    uniq.dedup();
    if uniq.len() < 2 {
        return Err(PoseError::TooFewPoints {
            got: uniq.len(),
            needed: 2,
        });
    }
    let span = |axis: usize| {
        let mut v: Vec<f64> = uniq.iter().map(|p| p[axis]).collect();
        v.sort_by(f64::total_cmp);
        if v.len() < 100 {
            v[v.len() - 1] - v[0]
        } else {
            let last = (v.len() - 1) as f64;
            let lo = (last * 0.01).round() as usize;
            let hi = (last * 0.99).round() as usize;
            v[hi] - v[lo]
        }
    };
    Ok(Dimensions {
        w: span(0),
        h: span(2),
        l: span(1),
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::template::make_procedural_template;

    /// Random model↔pixel correspondences from a procedural template under a
    /// random camera-frame pose; returns (set, ground-truth pose).
    pub fn random_problem(
        seed: u64,
        n: usize,
        k: &CameraIntrinsics,
    ) -> (CorrespondenceSet, Pose) {
        let template = make_procedural_template(seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) + 1);
        let pose = random_pose(&mut rng);
        let mut pixels = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n);
        while pixels.len() < n {
            let p = template.vertices[rng.gen_range(0..template.vertices.len())];
            let q = pose.transform_point(&p);
            if q.z <= 0.5 {
                continue;
            }
            let u = k.fx * q.x / q.z + k.cx;
            let v = k.fy * q.y / q.z + k.cy;
            pixels.push(Vector2::new(u, v));
            points.push(p);
        }
        (CorrespondenceSet::new(pixels, points), pose)
    }

    pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        use std::f64::consts::PI;
        Pose::from_yaw_pitch_roll(
            rng.gen_range(-PI..PI),
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
            Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(8.0..25.0),
            ),
        )
    }

    pub fn standard_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::smooth_l1;
    use crate::inpaint::make_procedural_atlas;
    use crate::scene::{
        compose, make_procedural_background, place_vehicles, PlacementConfig,
    };
    use crate::template::{canonical_dimensions, make_procedural_template, ShapeCoefficients};
    use approx::assert_relative_eq;

    fn one_vehicle_annotation() -> (crate::scene::Scene, usize) {
        use std::sync::OnceLock;
        static SCENE: OnceLock<crate::scene::Scene> = OnceLock::new();
        let scene = SCENE.get_or_init(|| {
            let bg = make_procedural_background(640, 480, 17);
            let fleet = vec![(
                make_procedural_template(0),
                ShapeCoefficients::new(vec![0.3, -0.6, 0.1, 0.5]),
            )];
            let poses = place_vehicles(&bg, &PlacementConfig::standard(1, 5), &fleet).unwrap();
            compose(&bg, &poses, &fleet, &[make_procedural_atlas(96, 3)]).unwrap()
        });
        (scene.clone(), 0)
    }

    #[test]
    fn camera_to_world_round_trips() {
        let e = CameraExtrinsics::look_at(
            Vector3::new(1.0, -4.0, 3.0),
            Vector3::new(0.0, 10.0, 0.0),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let cam_pose = test_support::random_pose(&mut rng);
            let world = camera_to_world(&cam_pose, &e);
            let back = e.world_to_camera.compose(&world);
            assert!(back.translation_distance_to(&cam_pose) < 1e-12);
            assert!(back.rotation_angle_to(&cam_pose) < 1e-12);
        }
        let id = CameraExtrinsics::identity();
        let p = test_support::random_pose(&mut rng);
        assert_eq!(camera_to_world(&p, &id), p);
    }

    #[test]
    fn noiseless_predictor_copies_the_dense_map() {
        let (scene, i) = one_vehicle_annotation();
        let ann = &scene.annotations[i];
        let nm = NoiseModel {
            samples: 100,
            ..NoiseModel::noiseless(9)
        };
        let cs = simulate_predictor(ann, &nm).unwrap();
        assert_eq!(cs.len(), 100);
        // Every drawn correspondence matches some dense sample exactly.
        for (pix, pt) in cs.pixels.iter().zip(&cs.points) {
            let found = ann.dense_map.iter().any(|s| {
                pix.x == f64::from(s.x) + 0.5 && pix.y == f64::from(s.y) + 0.5 && *pt == s.point
            });
            assert!(found, "correspondence not in the dense map");
        }
        // Deterministic per seed.
        assert_eq!(cs, simulate_predictor(ann, &nm).unwrap());
    }

    #[test]
    fn outlier_replacement_count_is_exact() {
        let (scene, i) = one_vehicle_annotation();
        let ann = &scene.annotations[i];
        assert!(ann.dense_map.len() >= 1000, "need a big mask for this test");
        let nm = NoiseModel {
            outlier_fraction: 0.3,
            samples: 1000,
            ..NoiseModel::noiseless(2)
        };
        let cs = simulate_predictor(ann, &nm).unwrap();
        // With zero sigma the non-outliers are exact dense-map points, so
        // the replaced ones are exactly those that no longer match.
        let by_pixel: std::collections::HashMap<(u64, u64), Vector3<f64>> = ann
            .dense_map
            .iter()
            .map(|s| {
                (
                    ((f64::from(s.x) + 0.5).to_bits(), (f64::from(s.y) + 0.5).to_bits()),
                    s.point,
                )
            })
            .collect();
        let replaced = cs
            .pixels
            .iter()
            .zip(&cs.points)
            .filter(|(pix, pt)| by_pixel[&(pix.x.to_bits(), pix.y.to_bits())] != **pt)
            .count();
        assert_eq!(replaced, 300);
    }

    #[test]
    fn empty_dense_map_is_an_error() {
        let (scene, i) = one_vehicle_annotation();
        let mut ann = scene.annotations[i].clone();
        ann.dense_map.clear();
        assert_eq!(
            simulate_predictor(&ann, &NoiseModel::default()).unwrap_err(),
            PoseError::EmptyDenseMap
        );
    }

    #[test]
    fn pixel_noise_magnitude_matches_the_rayleigh_mean() {
        // The mean norm of an isotropic 2D Gaussian is sigma * sqrt(pi/2).
        let (scene, i) = one_vehicle_annotation();
        let ann = &scene.annotations[i];
        let sigma = 0.8;
        let mut sum = 0.0;
        let mut count = 0usize;
        for seed in 0..40 {
            let nm = NoiseModel {
                pixel_sigma: sigma,
                point_sigma: 0.0,
                samples: 2500,
                ..NoiseModel::noiseless(1000 + seed)
            };
            let cs = simulate_predictor(ann, &nm).unwrap();
            let clean = CorrespondenceSet::from_dense_map(&ann.dense_map);
            // Dense samples are row-major; the subsample preserves order, so
            // align via the exact model points (sigma_point = 0).
            let mut j = 0;
            for (pix, pt) in cs.pixels.iter().zip(&cs.points) {
                while clean.points[j] != *pt {
                    j += 1;
                }
                sum += (pix - clean.pixels[j]).norm();
                count += 1;
                j += 1;
            }
        }
        assert!(count >= 100_000, "only {count} draws");
        let mean = sum / count as f64;
        let expect = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert_relative_eq!(mean, expect, max_relative = 0.05);
    }

    #[test]
    fn predictor_noise_moves_smooth_l1_monotonically() {
        let (scene, i) = one_vehicle_annotation();
        let ann = &scene.annotations[i];
        let flat = |cs: &CorrespondenceSet| -> Vec<f64> {
            cs.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
        };
        let mut last = f64::INFINITY;
        for sigma in [0.1, 0.05, 0.01] {
            let nm = NoiseModel {
                point_sigma: sigma,
                pixel_sigma: 0.0,
                samples: 400,
                ..NoiseModel::noiseless(31)
            };
            let noisy = simulate_predictor(ann, &nm).unwrap();
            let clean = simulate_predictor(ann, &NoiseModel {
                point_sigma: 0.0,
                pixel_sigma: 0.0,
                samples: 400,
                ..NoiseModel::noiseless(31)
            })
            .unwrap();
            let loss = smooth_l1(&flat(&noisy), &flat(&clean)).unwrap();
            assert!(
                loss < last,
                "smooth_l1 {loss} did not decrease below {last} at sigma {sigma}"
            );
            last = loss;
        }
    }

    #[test]
    fn dimension_estimates_track_canonical_extents() {
        let template = make_procedural_template(3);
        let exact = canonical_dimensions(&template.vertices).unwrap();
        let est = estimate_dimensions(&template.vertices).unwrap();
        assert_relative_eq!(est.w, exact.w, max_relative = 0.02);
        assert_relative_eq!(est.h, exact.h, max_relative = 0.02);
        assert_relative_eq!(est.l, exact.l, max_relative = 0.02);
    }

    #[test]
    fn dimension_estimate_examples() {
        let two = [Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)];
        let d = estimate_dimensions(&two).unwrap();
        assert_eq!((d.w, d.l, d.h), (1.0, 2.0, 3.0));

        let dup = [Vector3::new(0.5, 0.5, 0.5); 4];
        assert_eq!(
            estimate_dimensions(&dup).unwrap_err(),
            PoseError::TooFewPoints { got: 1, needed: 2 }
        );
        assert_eq!(
            estimate_dimensions(&[]).unwrap_err(),
            PoseError::TooFewPoints { got: 0, needed: 2 }
        );
    }
}
