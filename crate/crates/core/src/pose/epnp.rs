//! EPnP: closed-form pose from n 2D↔3D correspondences. Model points are
//! expressed as barycentric combinations of four control points (three when
//! the cloud is planar); the control points' camera-frame coordinates span
//! the null space of a linear reprojection system, and the remaining scale
//! ambiguity is resolved against the control points' known model-frame
//! distances. A rigid Kabsch fit then aligns the frames.

use super::{CorrespondenceSet, PoseError};
use crate::geom::{CameraIntrinsics, Pose};
use nalgebra::{
    DMatrix, DVector, Matrix3, Rotation3, SymmetricEigen, UnitQuaternion, Vector3,
};

/// Minimum correspondences for the public solver; the RANSAC minimal solver
/// relaxes this to 4 internally.
const MIN_POINTS: usize = 6;

/// Pose (model frame → camera frame) from at least six correspondences.
pub fn pnp_epnp(cs: &CorrespondenceSet, k: &CameraIntrinsics) -> Result<Pose, PoseError> {
    if cs.len() < MIN_POINTS {
        return Err(PoseError::TooFewPoints {
            got: cs.len(),
            needed: MIN_POINTS,
        });
    }
    solve(cs, k)
}

/// Minimal-sample variant used inside RANSAC (n >= 4).
pub(super) fn solve_minimal(cs: &CorrespondenceSet, k: &CameraIntrinsics) -> Result<Pose, PoseError> {
    if cs.len() < 4 {
        return Err(PoseError::TooFewPoints {
            got: cs.len(),
            needed: 4,
        });
    }
    solve(cs, k)
}

fn solve(cs: &CorrespondenceSet, k: &CameraIntrinsics) -> Result<Pose, PoseError> {
    let n = cs.len();

    // Control points: centroid plus principal axes scaled to the data spread.
    let centroid: Vector3<f64> = cs.points.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for p in &cs.points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    // Sort eigenpairs by descending eigenvalue.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sig: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let axes: Vec<Vector3<f64>> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    if sig[1] <= (sig[0] * 1e-12).max(1e-9) {
        // All points on one line: orientation about that line is unobservable.
        return Err(PoseError::DegenerateConfiguration);
    }
    let planar = sig[2] <= 1e-6;
    let nc = if planar { 3 } else { 4 };

    let control_w: Vec<Vector3<f64>> = if planar {
        vec![
            centroid,
            centroid + axes[0] * sig[0],
            centroid + axes[1] * sig[1],
        ]
    } else {
        vec![
            centroid,
            centroid + axes[0] * sig[0],
            centroid + axes[1] * sig[1],
            centroid + axes[2] * sig[2],
        ]
    };

    // Barycentric coordinates of every model point w.r.t. the control points.
    let mut alphas = vec![[0.0f64; 4]; n];
    for (i, p) in cs.points.iter().enumerate() {
        let d = p - centroid;
        let mut a = [0.0f64; 4];
        for j in 1..nc {
            a[j] = axes[j - 1].dot(&d) / sig[j - 1];
        }
        a[0] = 1.0 - a[1..nc].iter().sum::<f64>();
        alphas[i] = a;
    }

    // M x = 0 where x stacks the camera-frame control points. Each pixel
    // contributes two rows built from the projection equations.
    let mut m = DMatrix::zeros(2 * n, 3 * nc);
    for i in 0..n {
        let (u, v) = (cs.pixels[i].x, cs.pixels[i].y);
        for j in 0..nc {
            let a = alphas[i][j];
            m[(2 * i, 3 * j)] = a * k.fx;
            m[(2 * i, 3 * j + 1)] = a * k.skew;
            m[(2 * i, 3 * j + 2)] = a * (k.cx - u);
            m[(2 * i + 1, 3 * j + 1)] = a * k.fy;
            m[(2 * i + 1, 3 * j + 2)] = a * (k.cy - v);
        }
    }
    let mtm = m.transpose() * &m;
    let eig = SymmetricEigen::new(mtm);
    let mut idx: Vec<usize> = (0..3 * nc).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    // Null-space basis: the nc smallest eigenvectors, reshaped to one
    // Vector3 per control point.
    let basis: Vec<Vec<Vector3<f64>>> = idx[..nc]
        .iter()
        .map(|&col| {
            (0..nc)
                .map(|j| {
                    Vector3::new(
                        eig.eigenvectors[(3 * j, col)],
                        eig.eigenvectors[(3 * j + 1, col)],
                        eig.eigenvectors[(3 * j + 2, col)],
                    )
                })
                .collect()
        })
        .collect();

    // Pairwise control-point differences: dv[k][pair] in each basis vector,
    // dcw[pair] in the model frame.
    let pairs: Vec<(usize, usize)> = (0..nc)
        .flat_map(|a| ((a + 1)..nc).map(move |b| (a, b)))
        .collect();
    let dv: Vec<Vec<Vector3<f64>>> = basis
        .iter()
        .map(|vs| pairs.iter().map(|&(a, b)| vs[a] - vs[b]).collect())
        .collect();
    let dcw: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|&(a, b)| control_w[a] - control_w[b])
        .collect();
    let rho: Vec<f64> = dcw.iter().map(|d| d.norm_squared()).collect();

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    // N = 1: match the scale of the smallest-eigenvalue vector directly.
    {
        let num: f64 = dv[0].iter().zip(&dcw).map(|(a, b)| a.norm() * b.norm()).sum();
        let den: f64 = dv[0].iter().map(|a| a.norm_squared()).sum();
        let mut beta = vec![0.0; nc];
        beta[0] = num / den;
        candidates.push(beta);
    }
    if planar {
        // Exact 3x3 solve in (b00, b01, b11) for the three pair constraints.
        if let Some(b) = betas_from_quadratic(&dv, &rho, &[(0, 0), (0, 1), (1, 1)]) {
            let mut beta = vec![0.0; nc];
            beta[0] = b[0].abs().sqrt();
            if b[0] < 0.0 {
                // Flip the dominant vector's sign convention instead.
                beta[0] = -beta[0];
            }
            if beta[0].abs() > 1e-12 {
                beta[1] = b[1] / beta[0];
            }
            candidates.push(beta);
        }
    } else {
        // Linearized beta*beta solves at increasing basis sizes (the
        // standard N = 2, 3, 4 approximations).
        if let Some(b) = betas_from_quadratic(&dv, &rho, &[(0, 0), (0, 1), (0, 2), (0, 3)]) {
            let mut beta = vec![0.0; 4];
            if b[0] < 0.0 {
                beta[0] = (-b[0]).sqrt();
                for k in 1..4 {
                    beta[k] = -b[k] / beta[0];
                }
            } else {
                beta[0] = b[0].sqrt();
                for k in 1..4 {
                    beta[k] = b[k] / beta[0];
                }
            }
            candidates.push(beta);
        }
        if let Some(b) = betas_from_quadratic(&dv, &rho, &[(0, 0), (0, 1), (1, 1)]) {
            let mut beta = vec![0.0; 4];
            beta[0] = b[0].abs().sqrt() * if b[1] < 0.0 { -1.0 } else { 1.0 };
            beta[1] = if b[2] * b[0] >= 0.0 { b[2].abs().sqrt() } else { 0.0 };
            candidates.push(beta);
        }
        if let Some(b) = betas_from_quadratic(&dv, &rho, &[(0, 0), (0, 1), (1, 1), (0, 2), (1, 2)])
        {
            let mut beta = vec![0.0; 4];
            beta[0] = b[0].abs().sqrt() * if b[1] < 0.0 { -1.0 } else { 1.0 };
            beta[1] = if b[2] * b[0] >= 0.0 { b[2].abs().sqrt() } else { 0.0 };
            if beta[0].abs() > 1e-12 {
                beta[2] = b[3] / beta[0];
            }
            candidates.push(beta);
        }
    }

    let mut best: Option<(f64, Pose)> = None;
    for mut beta in candidates {
        gauss_newton_betas(&dv, &rho, &mut beta);
        // Camera-frame control points for this beta, then the rigid fit.
        let control_c: Vec<Vector3<f64>> = (0..nc)
            .map(|j| {
                (0..nc)
                    .map(|kk| basis[kk][j] * beta[kk])
                    .sum::<Vector3<f64>>()
            })
            .collect();
        let mut pc: Vec<Vector3<f64>> = alphas
            .iter()
            .map(|a| {
                (0..nc)
                    .map(|j| control_c[j] * a[j])
                    .sum::<Vector3<f64>>()
            })
            .collect();
        // The null space is sign-ambiguous; points must sit in front of the
        // camera.
        let mean_z: f64 = pc.iter().map(|p| p.z).sum::<f64>() / n as f64;
        if mean_z < 0.0 {
            for p in &mut pc {
                *p = -*p;
            }
        }
        let Some(pose) = kabsch(&cs.points, &pc) else {
            continue;
        };
        let rms = super::rms_reprojection(&pose, cs, k);
        if rms.is_finite() && best.as_ref().map_or(true, |(b, _)| rms < *b) {
            best = Some((rms, pose));
        }
    }

    let (_, pose) = best.ok_or(PoseError::DegenerateConfiguration)?;
    // Closed-form candidates are algebraic; a short geometric polish makes
    // the noiseless solution exact to machine precision.
    Ok(super::refine::refine_internal(pose, cs, k, 15))
}

/// Least-squares solve for selected beta products from the distance
/// constraints `sum_ab dot(dv_a, dv_b) beta_a beta_b = rho`, returning the
/// products in the order given.
fn betas_from_quadratic(
    dv: &[Vec<Vector3<f64>>],
    rho: &[f64],
    unknowns: &[(usize, usize)],
) -> Option<Vec<f64>> {
    let rows = rho.len();
    let mut l = DMatrix::zeros(rows, unknowns.len());
    for (r, _) in rho.iter().enumerate() {
        for (c, &(a, b)) in unknowns.iter().enumerate() {
            let dot = dv[a][r].dot(&dv[b][r]);
            l[(r, c)] = if a == b { dot } else { 2.0 * dot };
        }
    }
    let rhs = DVector::from_column_slice(rho);
    let svd = l.svd(true, true);
    svd.solve(&rhs, 1e-12).ok().map(|x| x.as_slice().to_vec())
}

/// Refine betas on the residuals of the pairwise distance constraints.
fn gauss_newton_betas(dv: &[Vec<Vector3<f64>>], rho: &[f64], beta: &mut [f64]) {
    let nb = beta.len();
    let rows = rho.len();
    for _ in 0..10 {
        let mut j = DMatrix::zeros(rows, nb);
        let mut r = DVector::zeros(rows);
        for p in 0..rows {
            let mut f = 0.0;
            for a in 0..nb {
                for b in 0..nb {
                    f += dv[a][p].dot(&dv[b][p]) * beta[a] * beta[b];
                }
            }
            r[p] = f - rho[p];
            for c in 0..nb {
                let mut g = 0.0;
                for a in 0..nb {
                    g += dv[c][p].dot(&dv[a][p]) * beta[a];
                }
                j[(p, c)] = 2.0 * g;
            }
        }
        let jt = j.transpose();
        let Some(step) = (&jt * &j).lu().solve(&(&jt * &r)) else {
            return;
        };
        for (b, s) in beta.iter_mut().zip(step.iter()) {
            *b -= s;
        }
        if step.norm() < 1e-14 {
            return;
        }
    }
}

/// Rigid transform taking `world` onto `camera` in the least-squares sense
/// (Kabsch / absolute orientation).
fn kabsch(world: &[Vector3<f64>], camera: &[Vector3<f64>]) -> Option<Pose> {
    let n = world.len() as f64;
    let mw: Vector3<f64> = world.iter().sum::<Vector3<f64>>() / n;
    let mc: Vector3<f64> = camera.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (w, c) in world.iter().zip(camera) {
        h += (w - mw) * (c - mc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let d = (vt.transpose() * u.transpose()).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let r = vt.transpose() * fix * u.transpose();
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mc - r * mw;
    Some(Pose::new(rotation, translation))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{random_problem, standard_camera};
    use super::*;
    use nalgebra::Vector2;

    #[test]
    fn noiseless_solutions_are_exact_over_100_trials() {
        let k = standard_camera();
        for seed in 0..100 {
            let (cs, truth) = random_problem(seed, 40, &k);
            let pose = pnp_epnp(&cs, &k).unwrap();
            let dt = pose.translation_distance_to(&truth);
            let dr = pose.rotation_angle_to(&truth);
            assert!(
                dt < 1e-6 && dr < 1e-6,
                "seed {seed}: translation off {dt}, rotation off {dr}"
            );
        }
    }

    #[test]
    fn five_points_are_rejected() {
        let k = standard_camera();
        let (cs, _) = random_problem(11, 5, &k);
        assert_eq!(
            pnp_epnp(&cs, &k).unwrap_err(),
            PoseError::TooFewPoints { got: 5, needed: 6 }
        );
        // ...but the RANSAC minimal solver takes 4.
        let (cs4, truth) = random_problem(11, 4, &k);
        if let Ok(pose) = solve_minimal(&cs4, &k) {
            assert!(pose.translation_distance_to(&truth) < 1e-3);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let k = standard_camera();
        let pose = Pose::from_yaw_pitch_roll(0.3, 0.0, 0.0, Vector3::new(0.0, 0.0, 10.0));
        let points: Vec<Vector3<f64>> = (0..12)
            .map(|i| Vector3::new(f64::from(i) * 0.25 - 1.5, 0.0, 0.0))
            .collect();
        let pixels: Vec<Vector2<f64>> = points
            .iter()
            .map(|p| {
                let q = pose.transform_point(p);
                Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy)
            })
            .collect();
        let cs = CorrespondenceSet::new(pixels, points);
        assert_eq!(
            pnp_epnp(&cs, &k).unwrap_err(),
            PoseError::DegenerateConfiguration
        );
    }

    #[test]
    fn coplanar_points_still_solve_exactly() {
        let k = standard_camera();
        for seed in 0..25 {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let truth = super::super::test_support::random_pose(&mut rng);
            // Points on the z = 0 model plane (e.g. a roof or ground patch).
            let points: Vec<Vector3<f64>> = (0..30)
                .map(|_| {
                    Vector3::new(
                        rand::Rng::gen_range(&mut rng, -1.0..1.0),
                        rand::Rng::gen_range(&mut rng, -2.0..2.0),
                        0.0,
                    )
                })
                .collect();
            let pixels: Vec<Vector2<f64>> = points
                .iter()
                .map(|p| {
                    let q = truth.transform_point(p);
                    Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy)
                })
                .collect();
            let cs = CorrespondenceSet::new(pixels, points);
            let pose = pnp_epnp(&cs, &k).unwrap();
            let dt = pose.translation_distance_to(&truth);
            let dr = pose.rotation_angle_to(&truth);
            assert!(
                dt < 1e-6 && dr < 1e-6,
                "seed {seed}: translation off {dt}, rotation off {dr}"
            );
        }
    }

    #[test]
    fn skewed_intrinsics_are_honored() {
        let k = CameraIntrinsics::new(580.0, 610.0, 315.0, 250.0, 640, 480).with_skew(2.5);
        for seed in 0..10 {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(777 + seed);
            let truth = super::super::test_support::random_pose(&mut rng);
            let points: Vec<Vector3<f64>> = (0..25)
                .map(|_| {
                    Vector3::new(
                        rand::Rng::gen_range(&mut rng, -1.0..1.0),
                        rand::Rng::gen_range(&mut rng, -2.2..2.2),
                        rand::Rng::gen_range(&mut rng, -0.6..0.9),
                    )
                })
                .collect();
            let pixels: Vec<Vector2<f64>> = points
                .iter()
                .map(|p| {
                    let q = truth.transform_point(p);
                    Vector2::new(
                        (k.fx * q.x + k.skew * q.y) / q.z + k.cx,
                        k.fy * q.y / q.z + k.cy,
                    )
                })
                .collect();
            let cs = CorrespondenceSet::new(pixels, points);
            let pose = pnp_epnp(&cs, &k).unwrap();
            assert!(pose.translation_distance_to(&truth) < 1e-6);
            assert!(pose.rotation_angle_to(&truth) < 1e-6);
        }
    }
}
