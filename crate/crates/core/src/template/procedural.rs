//! Procedural boxy-sedan generator: a deterministic, watertight stand-in for
//! a scanned vehicle template.
//!
//! The body is a swept surface: a rectangular cross-section whose top edge
//! follows a piecewise-linear side profile (trunk, rear window, roof,
//! windshield, hood), closed by front/rear caps. Each station contributes a
//! fixed 12-point perimeter loop, so adjacent quads share positions exactly
//! and the mesh is watertight by construction. Triangles are labeled with 18
//! geometric part regions; part seams duplicate vertices so every part maps
//! into its own rectangular atlas cell.

use super::{VehicleTemplate, COMPONENT_COUNT, PART_COUNT};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use super::parts::*;

/// Points per cross-section perimeter loop (4 bottom + 2 right + 4 top +
/// 2 left segments).
const LOOP_LEN: usize = 12;
/// Target station spacing as a fraction of vehicle length.
const STATION_STEP: f64 = 0.06;

struct BodyPlan {
    width: f64,
    length: f64,
    /// Beltline height (top of the lower side band), absolute meters.
    belt: f64,
    /// Side profile as (y-fraction in [-0.5, 0.5], height in m), sorted.
    profile: Vec<(f64, f64)>,
    /// Side-band part boundaries as y-fractions: quarter | rear door |
    /// front door | fender, with the greenhouse spanning the door range.
    side_bounds: [f64; 3],
}

impl BodyPlan {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let width = rng.gen_range(1.70..1.95);
        let length = rng.gen_range(4.2..5.0);
        let height = rng.gen_range(1.40..1.55);
        let belt = height * rng.gen_range(0.40..0.45);
        let y_trunk = -0.28 + rng.gen_range(-0.02..0.02);
        let y_roof_rear = -0.16 + rng.gen_range(-0.02..0.02);
        let y_roof_front = 0.16 + rng.gen_range(-0.02..0.02);
        let y_shield_base = 0.30 + rng.gen_range(-0.015..0.015);
        let profile = vec![
            (-0.5, height * rng.gen_range(0.60..0.66)),
            (y_trunk, height * rng.gen_range(0.68..0.73)),
            (y_roof_rear, height * rng.gen_range(0.95..0.99)),
            (y_roof_front, height * rng.gen_range(0.98..1.0)),
            (y_shield_base, height * rng.gen_range(0.64..0.70)),
            (0.5, height * rng.gen_range(0.52..0.58)),
        ];
        let side_bounds = [
            -0.22 + rng.gen_range(-0.015..0.015),
            rng.gen_range(-0.015..0.015),
            0.22 + rng.gen_range(-0.015..0.015),
        ];
        Self {
            width,
            length,
            belt,
            profile,
            side_bounds,
        }
    }

    /// Top-profile height at a y-fraction (piecewise linear).
    fn height_at(&self, frac: f64) -> f64 {
        let pts = &self.profile;
        if frac <= pts[0].0 {
            return pts[0].1;
        }
        for pair in pts.windows(2) {
            let ((f0, h0), (f1, h1)) = (pair[0], pair[1]);
            if frac <= f1 {
                let t = (frac - f0) / (f1 - f0);
                return h0 + t * (h1 - h0);
            }
        }
        pts[pts.len() - 1].1
    }

    /// Sweep stations: profile breakpoints and side-part boundaries, each
    /// interval subdivided to roughly `STATION_STEP` spacing.
    fn stations(&self) -> Vec<f64> {
        let mut breaks: Vec<f64> = self
            .profile
            .iter()
            .map(|&(f, _)| f)
            .chain(self.side_bounds.iter().copied())
            .collect();
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut out = vec![breaks[0]];
        for pair in breaks.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let n = ((b - a) / STATION_STEP).ceil().max(1.0) as usize;
            for k in 1..=n {
                out.push(a + (b - a) * k as f64 / n as f64);
            }
        }
        out
    }

    fn top_part(&self, frac: f64) -> u8 {
        let b = &self.profile;
        if frac < b[1].0 {
            TRUNK
        } else if frac < b[2].0 {
            REAR_WINDOW
        } else if frac < b[3].0 {
            ROOF
        } else if frac < b[4].0 {
            WINDSHIELD
        } else {
            HOOD
        }
    }

    fn side_lower_part(&self, frac: f64, right: bool) -> u8 {
        let s = &self.side_bounds;
        if frac < s[0] {
            if right {
                R_QUARTER
            } else {
                L_QUARTER
            }
        } else if frac < s[1] {
            if right {
                R_REAR_DOOR
            } else {
                L_REAR_DOOR
            }
        } else if frac < s[2] {
            if right {
                R_FRONT_DOOR
            } else {
                L_FRONT_DOOR
            }
        } else if right {
            R_FENDER
        } else {
            L_FENDER
        }
    }

    fn side_upper_part(&self, frac: f64, right: bool) -> u8 {
        let s = &self.side_bounds;
        if frac < s[0] {
            if right {
                R_QUARTER
            } else {
                L_QUARTER
            }
        } else if frac <= s[2] {
            if right {
                R_GREENHOUSE
            } else {
                L_GREENHOUSE
            }
        } else if right {
            R_FENDER
        } else {
            L_FENDER
        }
    }
}

/// UV projection plane per part: top/bottom parts unwrap along (x, y),
/// caps along (x, z), side parts along (y, z).
fn uv_projection(part: u8, p: &Vector3<f64>) -> Vector2<f64> {
    match part {
        HOOD..=TRUNK | BOTTOM => Vector2::new(p.x, p.y),
        FRONT | REAR => Vector2::new(p.x, p.z),
        _ => Vector2::new(p.y, p.z),
    }
}

/// Build a deterministic boxy-sedan template with exactly 18 labeled parts,
/// a per-part UV atlas, and `COMPONENT_COUNT` synthetic principal components.
pub fn make_procedural_template(seed: u64) -> VehicleTemplate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = BodyPlan::sample(&mut rng);
    let (w, l) = (plan.width, plan.length);
    let half_w = w / 2.0;
    let xs = [-half_w, -half_w / 2.0, 0.0, half_w / 2.0, half_w];

    // Position pool: LOOP_LEN perimeter points per station, in clockwise
    // order viewed from +y so that (sweep direction x loop direction) faces
    // outward: bottom left-to-right, up the right side, top right-to-left,
    // down the left side.
    let stations = plan.stations();
    let mut pool: Vec<Vector3<f64>> = Vec::new();
    for &frac in &stations {
        let y = frac * l;
        let top = plan.height_at(frac);
        pool.extend(xs.iter().map(|&x| Vector3::new(x, y, 0.0)));
        pool.push(Vector3::new(half_w, y, plan.belt));
        pool.push(Vector3::new(half_w, y, top));
        pool.extend(
            [xs[3], xs[2], xs[1]]
                .iter()
                .map(|&x| Vector3::new(x, y, top)),
        );
        pool.push(Vector3::new(-half_w, y, top));
        pool.push(Vector3::new(-half_w, y, plan.belt));
    }
    // Cap interior points (the beltline row between the shared perimeter
    // rows), rear then front.
    let rear_interior = pool.len();
    pool.extend(
        xs[1..4]
            .iter()
            .map(|&x| Vector3::new(x, -0.5 * l, plan.belt)),
    );
    let front_interior = pool.len();
    pool.extend(xs[1..4].iter().map(|&x| Vector3::new(x, 0.5 * l, plan.belt)));

    let loop_idx = |station: usize, t: usize| station * LOOP_LEN + t;

    // Lateral quads between consecutive stations, split into two triangles
    // each and labeled by the quad's y-midpoint.
    let mut tris: Vec<([usize; 3], u8)> = Vec::new();
    for si in 0..stations.len() - 1 {
        let mid = (stations[si] + stations[si + 1]) / 2.0;
        for t in 0..LOOP_LEN {
            let part = match t {
                0..=3 => BOTTOM,
                4 => plan.side_lower_part(mid, true),
                5 => plan.side_upper_part(mid, true),
                6..=9 => plan.top_part(mid),
                10 => plan.side_upper_part(mid, false),
                _ => plan.side_lower_part(mid, false),
            };
            let a = loop_idx(si, t);
            let b = loop_idx(si + 1, t);
            let c = loop_idx(si + 1, (t + 1) % LOOP_LEN);
            let d = loop_idx(si, (t + 1) % LOOP_LEN);
            tris.push(([a, b, c], part));
            tris.push(([a, c, d], part));
        }
    }

    // End caps: a 4x2 grid over the cross-section rectangle whose boundary
    // rows/columns reuse the perimeter points of the end stations.
    let cap_grid = |station: usize, interior: usize| -> [[usize; 5]; 3] {
        [
            [
                loop_idx(station, 0),
                loop_idx(station, 1),
                loop_idx(station, 2),
                loop_idx(station, 3),
                loop_idx(station, 4),
            ],
            [
                loop_idx(station, 11),
                interior,
                interior + 1,
                interior + 2,
                loop_idx(station, 5),
            ],
            [
                loop_idx(station, 10),
                loop_idx(station, 9),
                loop_idx(station, 8),
                loop_idx(station, 7),
                loop_idx(station, 6),
            ],
        ]
    };
    let rear_grid = cap_grid(0, rear_interior);
    let front_grid = cap_grid(stations.len() - 1, front_interior);
    for i in 0..4 {
        for j in 0..2 {
            let (p00, p10) = (rear_grid[j][i], rear_grid[j][i + 1]);
            let (p01, p11) = (rear_grid[j + 1][i], rear_grid[j + 1][i + 1]);
            tris.push(([p00, p10, p11], REAR));
            tris.push(([p00, p11, p01], REAR));
            let (q00, q10) = (front_grid[j][i], front_grid[j][i + 1]);
            let (q01, q11) = (front_grid[j + 1][i], front_grid[j + 1][i + 1]);
            tris.push(([q00, q11, q10], FRONT));
            tris.push(([q00, q01, q11], FRONT));
        }
    }

    // Re-center so the origin sits at the bbox center of the mean shape.
    let mut min = pool[0];
    let mut max = pool[0];
    for p in &pool {
        min = min.inf(p);
        max = max.sup(p);
    }
    let center = (min + max) / 2.0;
    for p in &mut pool {
        *p -= center;
    }

    // Split shared positions per part so each part owns its UV island.
    let mut remap: HashMap<(usize, u8), u32> = HashMap::new();
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut vertex_part: Vec<u8> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut part_label: Vec<u8> = Vec::new();
    for (tri, part) in &tris {
        let mut out = [0u32; 3];
        for (slot, &pi) in out.iter_mut().zip(tri) {
            *slot = *remap.entry((pi, *part)).or_insert_with(|| {
                vertices.push(pool[pi]);
                vertex_part.push(*part);
                (vertices.len() - 1) as u32
            });
        }
        triangles.push(out);
        part_label.push(*part);
    }

    // Map each part's projected footprint onto its full atlas cell.
    let mut lo = vec![Vector2::new(f64::INFINITY, f64::INFINITY); PART_COUNT];
    let mut hi = vec![Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY); PART_COUNT];
    for (v, &part) in vertices.iter().zip(&vertex_part) {
        let q = uv_projection(part, v);
        let slot = (part - 1) as usize;
        lo[slot] = lo[slot].inf(&q);
        hi[slot] = hi[slot].sup(&q);
    }
    let uv: Vec<Vector2<f64>> = vertices
        .iter()
        .zip(&vertex_part)
        .map(|(v, &part)| {
            let q = uv_projection(part, v);
            let slot = (part - 1) as usize;
            let (u0, v0, u1, v1) = VehicleTemplate::atlas_cell(part);
            let span = hi[slot] - lo[slot];
            Vector2::new(
                u0 + (q.x - lo[slot].x) / span.x * (u1 - u0),
                v0 + (q.y - lo[slot].y) / span.y * (v1 - v0),
            )
        })
        .collect();

    // Synthetic PCA displacement fields, evaluated on the centered mean
    // positions (so seam duplicates deform identically): length stretch,
    // width change, cabin/roof lift, and front-up wedge rake.
    let zmin = vertices.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let principal_components: Vec<Vec<Vector3<f64>>> = (0..COMPONENT_COUNT)
        .map(|k| {
            vertices
                .iter()
                .map(|p| {
                    let lift = p.z - zmin;
                    match k {
                        0 => Vector3::new(0.0, 0.06 * p.y, 0.0),
                        1 => Vector3::new(0.05 * p.x, 0.0, 0.0),
                        2 => Vector3::new(0.0, 0.0, 0.05 * lift * (-(2.0 * p.y / l).powi(2)).exp()),
                        _ => Vector3::new(0.0, 0.0, 0.03 * (p.y / (l / 2.0)) * lift),
                    }
                })
                .collect()
        })
        .collect();

    VehicleTemplate {
        mean_shape: vertices.clone(),
        vertices,
        triangles,
        uv,
        part_label,
        principal_components,
        component_count: COMPONENT_COUNT,
    }
}
