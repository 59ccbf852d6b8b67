//! Triangle fill: edge-function coverage with a top-left rule, z-buffering,
//! and perspective-correct attribute interpolation.

use super::{lambert, shadow_point, DirectionalLight, Framebuffer, RasterError, RenderInstance};
use crate::geom::{CameraExtrinsics, CameraIntrinsics, Plane, DEPTH_EPS};
use crate::template::deform;
use nalgebra::{Vector2, Vector3};

/// Doubled signed area of (a, b, p); positive when p lies on the interior
/// side of the directed edge a→b for our counter-clockwise screen ordering.
#[inline]
pub(crate) fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Top-left rule (y grows downward): boundary pixels belong to edges that
/// run upward, or exactly horizontal edges with the interior below.
#[inline]
fn boundary_owned(a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let ey = b.y - a.y;
    ey < 0.0 || (ey == 0.0 && b.x - a.x > 0.0)
}

/// Visit every pixel whose center the triangle covers. `pts` must be ordered
/// so the doubled area is positive; the callback receives barycentric
/// weights in `pts` order. Texture baking reuses this in UV space to build
/// its texel→triangle table with coverage identical to rendering.
pub(crate) fn for_each_covered_pixel(
    pts: &[Vector2<f64>; 3],
    width: usize,
    height: usize,
    mut visit: impl FnMut(usize, usize, [f64; 3]),
) {
    let area2 = edge(&pts[0], &pts[1], &pts[2]);
    debug_assert!(area2 > 0.0);
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        min_x = min_x.min(p.x);
        min_y = min_y.min(p.y);
        max_x = max_x.max(p.x);
        max_y = max_y.max(p.y);
    }
    // Pixel centers sit at (x + 0.5, y + 0.5).
    let x_lo = (min_x - 0.5).ceil();
    let x_hi = (max_x - 0.5).floor().min(width as f64 - 1.0);
    let y_lo = (min_y - 0.5).ceil();
    let y_hi = (max_y - 0.5).floor().min(height as f64 - 1.0);
    if x_lo > x_hi || y_lo > y_hi {
        return;
    }
    let x_lo = x_lo.max(0.0) as usize;
    let y_lo = y_lo.max(0.0) as usize;
    for y in y_lo..=y_hi as usize {
        for x in x_lo..=x_hi as usize {
            let pc = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let w0 = edge(&pts[1], &pts[2], &pc);
            let w1 = edge(&pts[2], &pts[0], &pc);
            let w2 = edge(&pts[0], &pts[1], &pc);
            let covered = (w0 > 0.0 || (w0 == 0.0 && boundary_owned(&pts[1], &pts[2])))
                && (w1 > 0.0 || (w1 == 0.0 && boundary_owned(&pts[2], &pts[0])))
                && (w2 > 0.0 || (w2 == 0.0 && boundary_owned(&pts[0], &pts[1])));
            if covered {
                visit(x, y, [w0 / area2, w1 / area2, w2 / area2]);
            }
        }
    }
}

/// Project camera-frame points to pixel coordinates; NaN markers for points
/// at or behind the near epsilon (their triangles are skipped).
pub(crate) fn to_screen(cam: &[Vector3<f64>], k: &CameraIntrinsics) -> Vec<Vector2<f64>> {
    cam.iter()
        .map(|p| {
            if p.z <= DEPTH_EPS {
                Vector2::new(f64::NAN, f64::NAN)
            } else {
                let inv_z = 1.0 / p.z;
                Vector2::new(
                    k.fx * p.x * inv_z + k.skew * p.y * inv_z + k.cx,
                    k.fy * p.y * inv_z + k.cy,
                )
            }
        })
        .collect()
}

#[inline]
fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Draw one vehicle into the framebuffer.
///
/// Covered pixels nearer than the current depth take the instance's bilinear
/// atlas color modulated by a flat per-triangle Lambert term, along with
/// depth, ids, and the instance-local surface point. Exact depth ties go to
/// the lower instance id, which makes rendering order irrelevant. Triangles
/// with a vertex behind the near epsilon are skipped whole (no clipping);
/// scene cameras keep vehicles comfortably in front.
pub fn rasterize(
    inst: &RenderInstance,
    light: &DirectionalLight,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    fb: &mut Framebuffer,
    instance_id: u32,
) -> Result<(), RasterError> {
    assert!(instance_id > 0, "instance id 0 is reserved for the background");
    assert_eq!(
        (fb.width(), fb.height()),
        (k.width as usize, k.height as usize),
        "framebuffer and camera dimensions differ"
    );
    if !inst.atlas.is_complete() {
        return Err(RasterError::IncompleteTexture);
    }
    let local = deform(inst.template, inst.coefficients)?;
    let world: Vec<Vector3<f64>> = local.iter().map(|v| inst.pose.transform_point(v)).collect();
    let cam: Vec<Vector3<f64>> = world
        .iter()
        .map(|p| e.world_to_camera.transform_point(p))
        .collect();
    let screen = to_screen(&cam, k);

    for (tri, &part) in inst.template.triangles.iter().zip(&inst.template.part_label) {
        let [ia, ib, ic] = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        if cam[ia].z <= DEPTH_EPS || cam[ib].z <= DEPTH_EPS || cam[ic].z <= DEPTH_EPS {
            continue;
        }
        // Outward normal against the view ray: visible iff it faces the
        // camera origin.
        let n_cam = (cam[ib] - cam[ia]).cross(&(cam[ic] - cam[ia]));
        if n_cam.dot(&cam[ia]) >= 0.0 {
            continue;
        }
        let n_world = (world[ib] - world[ia]).cross(&(world[ic] - world[ia]));
        let shade = lambert(&n_world.normalize(), light);

        let mut idx = [ia, ib, ic];
        let mut pts = [screen[ia], screen[ib], screen[ic]];
        let area2 = edge(&pts[0], &pts[1], &pts[2]);
        if area2 == 0.0 {
            continue;
        }
        if area2 < 0.0 {
            idx.swap(1, 2);
            pts.swap(1, 2);
        }
        let inv_z = [1.0 / cam[idx[0]].z, 1.0 / cam[idx[1]].z, 1.0 / cam[idx[2]].z];
        for_each_covered_pixel(&pts, fb.width(), fb.height(), |x, y, lam| {
            let wz = lam[0] * inv_z[0] + lam[1] * inv_z[1] + lam[2] * inv_z[2];
            let z = 1.0 / wz;
            let di = fb.index(x, y);
            let wins = z < fb.depth[di] || (z == fb.depth[di] && instance_id < fb.instance_id[di]);
            if !wins {
                return;
            }
            let mut uv = Vector2::zeros();
            let mut point = Vector3::zeros();
            for i in 0..3 {
                let w = lam[i] * inv_z[i] * z;
                uv += w * inst.template.uv[idx[i]];
                point += w * local[idx[i]];
            }
            let rgb = inst.atlas.sample_bilinear_in_part(part, uv.x, uv.y);
            fb.color[di] = [
                quantize(rgb[0] * shade),
                quantize(rgb[1] * shade),
                quantize(rgb[2] * shade),
            ];
            fb.depth[di] = z;
            fb.instance_id[di] = instance_id;
            fb.part_id[di] = part;
            fb.canon_point[di] = point;
        });
    }
    Ok(())
}

/// Darken the ground where the vehicle blocks the light.
///
/// Every mesh triangle is projected along the light onto the ground plane and
/// rasterized into a coverage mask; covered background pixels (instance_id 0)
/// are darkened by (1 − shadow_strength) exactly once per call. Color is the
/// only plane touched, and pixels already owned by a vehicle never change.
/// The instance's atlas is not consulted.
pub fn shadow_pass(
    inst: &RenderInstance,
    light: &DirectionalLight,
    ground: &Plane,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    fb: &mut Framebuffer,
) -> Result<(), RasterError> {
    assert_eq!(
        (fb.width(), fb.height()),
        (k.width as usize, k.height as usize),
        "framebuffer and camera dimensions differ"
    );
    let local = deform(inst.template, inst.coefficients)?;
    let flat: Vec<Vector3<f64>> = local
        .iter()
        .map(|v| shadow_point(&inst.pose.transform_point(v), light, ground))
        .collect::<Result<_, _>>()?;
    let cam: Vec<Vector3<f64>> = flat
        .iter()
        .map(|p| e.world_to_camera.transform_point(p))
        .collect();
    let screen = to_screen(&cam, k);

    let mut shadowed = vec![false; fb.width() * fb.height()];
    for tri in &inst.template.triangles {
        let [ia, ib, ic] = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        if cam[ia].z <= DEPTH_EPS || cam[ib].z <= DEPTH_EPS || cam[ic].z <= DEPTH_EPS {
            continue;
        }
        let mut pts = [screen[ia], screen[ib], screen[ic]];
        let area2 = edge(&pts[0], &pts[1], &pts[2]);
        if area2 == 0.0 {
            continue;
        }
        if area2 < 0.0 {
            pts.swap(1, 2);
        }
        for_each_covered_pixel(&pts, fb.width(), fb.height(), |x, y, _| {
            shadowed[y * fb.width() + x] = true;
        });
    }

    let keep = 1.0 - light.shadow_strength;
    for (i, &hit) in shadowed.iter().enumerate() {
        if hit && fb.instance_id[i] == 0 {
            for c in &mut fb.color[i] {
                *c = quantize(f64::from(*c) * keep);
            }
        }
    }
    Ok(())
}
