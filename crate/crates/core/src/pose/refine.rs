//! Damped Gauss-Newton refinement of a camera-frame pose by minimizing
//! squared pixel reprojection error. The update is a left perturbation
//! `xi = (omega, nu)`: `q = exp([omega]x) (R p + t) + nu`, giving the exact
//! Jacobians `dq/domega = -[q]x` and `dq/dnu = I`.

use super::CorrespondenceSet;
use crate::geom::{CameraIntrinsics, Pose};
use nalgebra::{Matrix2x3, Matrix3, Matrix6, Vector2, Vector3, Vector6};

/// Cost assigned to a correspondence that lands at or behind the camera, so
/// steps pushing points behind the camera are always rejected.
const BEHIND_CAMERA_COST: f64 = 1e12;

/// Refine a pose estimate against all correspondences; returns the input
/// unchanged when the set is empty. Monotone: the reprojection MSE of the
/// result never exceeds the initial one.
pub fn refine_pose(init: Pose, cs: &CorrespondenceSet, k: &CameraIntrinsics) -> Pose {
    refine_internal(init, cs, k, 50)
}

pub(super) fn refine_internal(
    init: Pose,
    cs: &CorrespondenceSet,
    k: &CameraIntrinsics,
    max_iterations: usize,
) -> Pose {
    if cs.is_empty() {
        return init;
    }
    let mut pose = init;
    let mut cost = mse(&pose, cs, k);
    let mut lambda = 1e-6;
    for _ in 0..max_iterations {
        let (jtj, jtr) = normal_equations(&pose, cs, k);
        // Levenberg damping with monotone acceptance.
        let mut accepted = false;
        for _ in 0..10 {
            let damped = jtj + Matrix6::identity() * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step: Vector6<f64> = chol.solve(&(-jtr));
            let trial = apply_step(&pose, &step);
            let trial_cost = mse(&trial, cs, k);
            if trial_cost < cost {
                pose = trial;
                cost = trial_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if step.norm() < 1e-10 {
                    return pose;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            return pose;
        }
    }
    pose
}

fn apply_step(pose: &Pose, step: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(step[0], step[1], step[2]);
    let nu = Vector3::new(step[3], step[4], step[5]);
    let dr = nalgebra::UnitQuaternion::from_scaled_axis(omega);
    Pose::new(dr * pose.rotation, dr * pose.translation + nu)
}

fn mse(pose: &Pose, cs: &CorrespondenceSet, k: &CameraIntrinsics) -> f64 {
    let mut sum = 0.0;
    for (p, pix) in cs.points.iter().zip(&cs.pixels) {
        let q = pose.transform_point(p);
        if q.z <= 1e-9 {
            sum += BEHIND_CAMERA_COST;
            continue;
        }
        let u = (k.fx * q.x + k.skew * q.y) / q.z + k.cx;
        let v = k.fy * q.y / q.z + k.cy;
        sum += (Vector2::new(u, v) - pix).norm_squared();
    }
    sum / cs.len() as f64
}

fn normal_equations(
    pose: &Pose,
    cs: &CorrespondenceSet,
    k: &CameraIntrinsics,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    for (p, pix) in cs.points.iter().zip(&cs.pixels) {
        let q = pose.transform_point(p);
        if q.z <= 1e-9 {
            continue; // contributes to the cost, but has no usable gradient
        }
        let z = q.z;
        let u = (k.fx * q.x + k.skew * q.y) / z + k.cx;
        let v = k.fy * q.y / z + k.cy;
        let r = Vector2::new(u - pix.x, v - pix.y);
        // d(u,v)/dq for the pinhole projection.
        let duv_dq = Matrix2x3::new(
            k.fx / z,
            k.skew / z,
            -(k.fx * q.x + k.skew * q.y) / (z * z),
            0.0,
            k.fy / z,
            -k.fy * q.y / (z * z),
        );
        // dq/d(omega) = -[q]x, dq/d(nu) = I.
        let qx = Matrix3::new(0.0, -q.z, q.y, q.z, 0.0, -q.x, -q.y, q.x, 0.0);
        let j_omega = duv_dq * (-qx);
        let j_nu = duv_dq;
        let mut j = nalgebra::Matrix2x6::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_omega);
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&j_nu);
        jtj += j.transpose() * j;
        jtr += j.transpose() * r;
    }
    (jtj, jtr)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{random_problem, random_pose, standard_camera};
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let k = standard_camera();
        for seed in 0..20 {
            let (cs, truth) = random_problem(seed, 30, &k);
            let refined = refine_pose(truth, &cs, &k);
            assert!(refined.translation_distance_to(&truth) < 1e-12);
            assert!(refined.rotation_angle_to(&truth) < 1e-12);
        }
    }

    #[test]
    fn recovers_from_a_nearby_perturbation() {
        let k = standard_camera();
        for seed in 0..20 {
            let (cs, truth) = random_problem(100 + seed, 40, &k);
            // ~5 degrees of rotation and 0.2 m of translation off.
            let off = Pose::from_yaw_pitch_roll(
                0.06,
                -0.04,
                0.05,
                Vector3::new(0.1, -0.12, 0.1),
            );
            let init = off.compose(&truth);
            let refined = refine_pose(init, &cs, &k);
            let dt = refined.translation_distance_to(&truth);
            let dr = refined.rotation_angle_to(&truth);
            assert!(dt < 1e-8 && dr < 1e-8, "seed {seed}: dt {dt}, dr {dr}");
        }
    }

    #[test]
    fn never_increases_the_reprojection_mse() {
        let k = standard_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for seed in 0..30 {
            let (cs, _) = random_problem(300 + seed, 25, &k);
            let init = random_pose(&mut rng);
            let refined = refine_pose(init, &cs, &k);
            assert!(
                mse(&refined, &cs, &k) <= mse(&init, &cs, &k),
                "seed {seed}: refinement increased the error"
            );
        }
    }

    #[test]
    fn empty_set_returns_the_input() {
        let k = standard_camera();
        let init = Pose::from_yaw_pitch_roll(0.4, 0.1, -0.2, Vector3::new(1.0, 2.0, 9.0));
        let cs = CorrespondenceSet::new(vec![], vec![]);
        assert_eq!(refine_pose(init, &cs, &k), init);
    }
}
