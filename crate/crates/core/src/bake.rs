//! Inverse rendering: pull image pixels back onto the UV atlas of a posed
//! template, marking texels whose surface points are off-image, back-facing,
//! or occluded as invalid. The complementary fill step lives in `inpaint`.

use crate::geom::{project, CameraExtrinsics, CameraIntrinsics, Pose};
use crate::inpaint::TextureAtlas;
use crate::raster::draw::{edge, for_each_covered_pixel};
use crate::raster::{
    lambert, rasterize, DirectionalLight, Framebuffer, RasterError, RenderInstance, RgbRaster,
};
use crate::template::{deform, ShapeCoefficients, TemplateError, VehicleTemplate, PART_COUNT};
use nalgebra::Vector3;
use thiserror::Error;

/// Slack added to the rendered depth before rejecting a texel's surface
/// point as occluded, so a surface never shadow-acnes against itself.
const DEPTH_BIAS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum BakeError {
    #[error("mesh is entirely outside the camera frustum")]
    MeshFullyOutsideFrustum,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Texel→surface lookup table: for each texel center, the triangle whose UV
/// image covers it and the barycentric coordinates there. Built once per
/// template and atlas resolution by rasterizing the triangles in UV space
/// with the same coverage rule the renderer uses.
#[derive(Debug, Clone)]
pub struct InverseAtlasTable {
    resolution: usize,
    triangle_count: usize,
    entries: Vec<Option<(u32, [f64; 3])>>,
}

impl InverseAtlasTable {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Table entry for a texel: `(triangle index, barycentric coordinates)`
    /// in the template's vertex order, or None where no UV island covers the
    /// texel center (such texels can never bake valid).
    pub fn entry(&self, tx: usize, ty: usize) -> Option<(usize, [f64; 3])> {
        self.entries[ty * self.resolution + tx].map(|(t, l)| (t as usize, l))
    }

    pub fn mapped_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }
}

/// Rasterize the template's triangles in UV space at texel resolution.
pub fn build_inverse_atlas(template: &VehicleTemplate, resolution: usize) -> InverseAtlasTable {
    assert!(resolution > 0);
    let r = resolution as f64;
    let mut entries = vec![None; resolution * resolution];
    for (ti, tri) in template.triangles.iter().enumerate() {
        let mut pts = [
            template.uv[tri[0] as usize] * r,
            template.uv[tri[1] as usize] * r,
            template.uv[tri[2] as usize] * r,
        ];
        let area2 = edge(&pts[0], &pts[1], &pts[2]);
        if area2 == 0.0 {
            continue;
        }
        let flipped = area2 < 0.0;
        if flipped {
            pts.swap(1, 2);
        }
        for_each_covered_pixel(&pts, resolution, resolution, |x, y, lam| {
            // Store barycentrics against the original vertex order.
            let lam = if flipped {
                [lam[0], lam[2], lam[1]]
            } else {
                lam
            };
            entries[y * resolution + x] = Some((ti as u32, lam));
        });
    }
    InverseAtlasTable {
        resolution,
        triangle_count: template.triangles.len(),
        entries,
    }
}

/// Project image pixels back onto the texture atlas of a posed template.
///
/// A texel bakes valid when its surface point projects inside the image, its
/// triangle faces the camera, the point survives a depth test against a
/// rendered depth map of the same mesh (bias [`DEPTH_BIAS`]), and all four
/// pixels of its bilinear footprint show this mesh's own part — the last
/// condition keeps silhouette and part-seam pixels, whose colors mix foreign
/// surfaces, out of the atlas. Valid texels store the bilinear image sample
/// with the known Lambert shading factor for `light` divided back out.
#[allow(clippy::too_many_arguments)]
pub fn bake(
    image: &RgbRaster,
    template: &VehicleTemplate,
    coefficients: &ShapeCoefficients,
    pose: &Pose,
    table: &InverseAtlasTable,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    light: &DirectionalLight,
) -> Result<TextureAtlas, BakeError> {
    assert_eq!(
        table.triangle_count,
        template.triangles.len(),
        "inverse-atlas table was built for a different template"
    );
    assert_eq!(
        (image.width, image.height),
        (k.width as usize, k.height as usize),
        "image and camera dimensions differ"
    );

    let local = deform(template, coefficients)?;
    let world: Vec<Vector3<f64>> = local.iter().map(|v| pose.transform_point(v)).collect();
    let cam: Vec<Vector3<f64>> = world
        .iter()
        .map(|p| e.world_to_camera.transform_point(p))
        .collect();

    // Depth/part map of the mesh itself, for the self-occlusion test and the
    // bilinear footprint guard. The texture content is irrelevant here.
    let mut fb = Framebuffer::new(image.width, image.height);
    {
        let mut dummy = TextureAtlas::empty(crate::template::ATLAS_COLS * 4);
        for v in &mut dummy.valid {
            *v = true;
        }
        let inst = RenderInstance {
            template,
            coefficients,
            pose,
            atlas: &dummy,
        };
        rasterize(&inst, light, k, e, &mut fb, 1)?;
    }

    let mut facing = Vec::with_capacity(template.triangles.len());
    let mut shade = Vec::with_capacity(template.triangles.len());
    for tri in &template.triangles {
        let [a, b, c] = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        let n_cam = (cam[b] - cam[a]).cross(&(cam[c] - cam[a]));
        facing.push(n_cam.dot(&cam[a]) < 0.0);
        let n_world = (world[b] - world[a]).cross(&(world[c] - world[a]));
        shade.push(lambert(&n_world.normalize(), light));
    }

    let mut atlas = TextureAtlas::empty(table.resolution);
    for ty in 0..table.resolution {
        for tx in 0..table.resolution {
            let Some((ti, lam)) = table.entry(tx, ty) else {
                continue;
            };
            let tri = template.triangles[ti];
            let part = template.part_label[ti];
            let mut p_local = Vector3::zeros();
            for i in 0..3 {
                p_local += lam[i] * local[tri[i] as usize];
            }
            let p_world = pose.transform_point(&p_local);
            let Ok((px, z)) = project(&p_world, k, e) else {
                continue;
            };
            if !k.contains_pixel(&px) || !facing[ti] {
                continue;
            }
            let di = fb.index(px.x as usize, px.y as usize);
            if fb.instance_id[di] != 1 || z > fb.depth[di] + DEPTH_BIAS {
                continue;
            }
            // Bilinear footprint: all four taps must show this part.
            let sx = px.x - 0.5;
            let sy = px.y - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            if x0 < 0.0 || y0 < 0.0 {
                continue;
            }
            let (x0, y0) = (x0 as usize, y0 as usize);
            if x0 + 1 >= image.width || y0 + 1 >= image.height {
                continue;
            }
            let taps = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
            if taps.iter().any(|&(x, y)| fb.part_id[fb.index(x, y)] != part) {
                continue;
            }
            let weights = [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ];
            let i = atlas.index(tx, ty);
            for c in 0..3 {
                let mut v = 0.0;
                for (t, w) in taps.iter().zip(weights) {
                    v += w * f64::from(image.pixels[image.index(t.0, t.1)][c]);
                }
                atlas.color[i][c] = (v / shade[ti]).clamp(0.0, 255.0);
            }
            atlas.valid[i] = true;
        }
    }

    if atlas.valid_count() == 0 {
        return Err(BakeError::MeshFullyOutsideFrustum);
    }
    Ok(atlas)
}

/// Per-part fraction of valid texels, indexed by part label − 1.
pub fn coverage_stats(atlas: &TextureAtlas) -> [f64; PART_COUNT] {
    let mut valid = [0usize; PART_COUNT];
    let mut total = [0usize; PART_COUNT];
    for ty in 0..atlas.resolution {
        for tx in 0..atlas.resolution {
            let p = (atlas.texel_part(tx, ty) - 1) as usize;
            total[p] += 1;
            if atlas.valid[atlas.index(tx, ty)] {
                valid[p] += 1;
            }
        }
    }
    std::array::from_fn(|i| {
        if total[i] == 0 {
            0.0
        } else {
            valid[i] as f64 / total[i] as f64
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inpaint::make_procedural_atlas;
    use crate::template::{make_procedural_template, parts};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Light shining along the view direction keeps every camera-facing
    /// surface brightly lit, which minimizes quantization amplification when
    /// shading is divided back out.
    fn headlight(eye: Vector3<f64>, target: Vector3<f64>) -> DirectionalLight {
        DirectionalLight::new(target - eye, 0.5)
    }

    struct Scene {
        template: VehicleTemplate,
        coefficients: ShapeCoefficients,
        pose: Pose,
        k: CameraIntrinsics,
        e: CameraExtrinsics,
        light: DirectionalLight,
    }

    fn scene(eye: Vector3<f64>, yaw: f64) -> Scene {
        let template = make_procedural_template(0);
        let coefficients = ShapeCoefficients::new(vec![0.6, -0.9, 0.4, 1.1]);
        let pose = Pose::from_yaw_pitch_roll(yaw, 0.0, 0.0, Vector3::new(0.0, 0.0, 0.75));
        let target = Vector3::new(0.0, 0.0, 0.7);
        Scene {
            template,
            coefficients,
            pose,
            k: CameraIntrinsics::new(520.0, 520.0, 320.0, 240.0, 640, 480),
            e: CameraExtrinsics::look_at(eye, target),
            light: headlight(eye, target),
        }
    }

    fn render(s: &Scene, atlas: &TextureAtlas) -> RgbRaster {
        let mut fb = Framebuffer::new(s.k.width as usize, s.k.height as usize);
        let inst = RenderInstance {
            template: &s.template,
            coefficients: &s.coefficients,
            pose: &s.pose,
            atlas,
        };
        rasterize(&inst, &s.light, &s.k, &s.e, &mut fb, 1).unwrap();
        fb.color_raster()
    }

    fn bake_scene(s: &Scene, image: &RgbRaster, table: &InverseAtlasTable) -> TextureAtlas {
        bake(
            image,
            &s.template,
            &s.coefficients,
            &s.pose,
            table,
            &s.k,
            &s.e,
            &s.light,
        )
        .unwrap()
    }

    #[test]
    fn table_maps_texels_to_their_own_part() {
        let template = make_procedural_template(0);
        let table = build_inverse_atlas(&template, 96);
        let atlas = TextureAtlas::empty(96);
        let mut mapped = 0;
        for ty in 0..96 {
            for tx in 0..96 {
                let Some((ti, lam)) = table.entry(tx, ty) else {
                    continue;
                };
                mapped += 1;
                assert_eq!(template.part_label[ti], atlas.texel_part(tx, ty));
                assert!(lam.iter().all(|&l| (-1e-9..=1.0 + 1e-9).contains(&l)));
                assert!((lam.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        // UV islands fill most of each cell; curved profiles leave margins.
        assert!(mapped > 96 * 96 / 2, "only {mapped} texels mapped");
    }

    #[test]
    fn render_then_bake_recovers_the_atlas() {
        let s = scene(Vector3::new(4.2, -5.0, 2.6), 0.4);
        let source = make_procedural_atlas(96, 7);
        let image = render(&s, &source);
        let table = build_inverse_atlas(&s.template, 96);
        let baked = bake_scene(&s, &image, &table);

        let mut close = 0;
        let mut total = 0;
        for i in 0..baked.valid.len() {
            if !baked.valid[i] {
                continue;
            }
            total += 1;
            let err = (0..3)
                .map(|c| (baked.color[i][c] - source.color[i][c]).abs())
                .fold(0.0, f64::max);
            if err <= 3.0 {
                close += 1;
            }
        }
        assert!(total > 1500, "only {total} texels baked valid");
        assert!(
            close * 100 >= total * 99,
            "{close}/{total} texels within quantization"
        );
    }

    #[test]
    fn baking_is_idempotent_on_the_valid_set() {
        let s = scene(Vector3::new(4.2, -5.0, 2.6), 0.4);
        let source = make_procedural_atlas(96, 3);
        let table = build_inverse_atlas(&s.template, 96);
        let first = bake_scene(&s, &render(&s, &source), &table);

        // Complete the baked atlas with source colors so it renders again.
        let mut completed = first.clone();
        for i in 0..completed.valid.len() {
            if !completed.valid[i] {
                completed.color[i] = source.color[i];
                completed.valid[i] = true;
            }
        }
        let second = bake_scene(&s, &render(&s, &completed), &table);

        let mut close = 0;
        let mut total = 0;
        for i in 0..first.valid.len() {
            if !(first.valid[i] && second.valid[i]) {
                continue;
            }
            total += 1;
            let err = (0..3)
                .map(|c| (second.color[i][c] - first.color[i][c]).abs())
                .fold(0.0, f64::max);
            if err <= 4.0 {
                close += 1;
            }
        }
        assert!(total > 1500);
        assert!(close * 100 >= total * 99, "{close}/{total} texels stable");
    }

    #[test]
    fn left_view_invalidates_the_right_side() {
        let s = scene(Vector3::new(-6.0, 0.0, 1.6), 0.0);
        let source = make_procedural_atlas(96, 1);
        let image = render(&s, &source);
        let table = build_inverse_atlas(&s.template, 96);
        let baked = bake_scene(&s, &image, &table);
        let stats = coverage_stats(&baked);
        for part in [
            parts::R_FENDER,
            parts::R_FRONT_DOOR,
            parts::R_REAR_DOOR,
            parts::R_QUARTER,
            parts::R_GREENHOUSE,
        ] {
            assert!(
                stats[(part - 1) as usize] < 0.02,
                "right part {part} coverage {}",
                stats[(part - 1) as usize]
            );
        }
        assert!(stats[(parts::L_FRONT_DOOR - 1) as usize] > 0.25);
        assert!(stats[(parts::L_REAR_DOOR - 1) as usize] > 0.25);
    }

    #[test]
    fn view_from_behind_and_above() {
        let s = scene(Vector3::new(0.0, -7.0, 3.5), 0.0);
        let source = make_procedural_atlas(96, 2);
        let image = render(&s, &source);
        let table = build_inverse_atlas(&s.template, 96);
        let baked = bake_scene(&s, &image, &table);
        let stats = coverage_stats(&baked);
        let at = |p: u8| stats[(p - 1) as usize];
        assert!(at(parts::REAR) > 0.5, "rear cap {}", at(parts::REAR));
        assert!(at(parts::TRUNK) > 0.5, "trunk {}", at(parts::TRUNK));
        assert!(at(parts::ROOF) > 0.5, "roof {}", at(parts::ROOF));
        assert!(at(parts::FRONT) < 0.02, "front bumper {}", at(parts::FRONT));
    }

    #[test]
    fn coverage_shrinks_as_the_left_side_turns_away() {
        let source = make_procedural_atlas(96, 4);
        let left_parts = [
            parts::L_FENDER,
            parts::L_FRONT_DOOR,
            parts::L_REAR_DOOR,
            parts::L_QUARTER,
            parts::L_GREENHOUSE,
        ];
        let mut last = f64::INFINITY;
        for step in 0..4 {
            let yaw = step as f64 * 0.5;
            let s = scene(Vector3::new(-6.5, 0.0, 1.8), yaw);
            let table = build_inverse_atlas(&s.template, 96);
            let baked = bake_scene(&s, &render(&s, &source), &table);
            let stats = coverage_stats(&baked);
            let mean = left_parts
                .iter()
                .map(|&p| stats[(p - 1) as usize])
                .sum::<f64>()
                / left_parts.len() as f64;
            assert!(
                mean <= last + 0.02,
                "left coverage grew from {last:.3} to {mean:.3} at yaw {yaw}"
            );
            last = mean;
        }
        assert!(last < 0.15, "left side still covered at edge-on yaw: {last}");
    }

    /// Möller–Trumbore ray/triangle intersection distance.
    fn ray_hit(
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        a: &Vector3<f64>,
        b: &Vector3<f64>,
        c: &Vector3<f64>,
    ) -> Option<f64> {
        let e1 = b - a;
        let e2 = c - a;
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = 1.0 / det;
        let t0 = origin - a;
        let u = t0.dot(&p) * inv;
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let q = t0.cross(&e1);
        let v = dir.dot(&q) * inv;
        if v < 0.0 || u + v > 1.0 {
            return None;
        }
        let t = e2.dot(&q) * inv;
        (t > 0.0).then_some(t)
    }

    #[test]
    fn no_valid_texel_is_occluded_per_ray_cast_oracle() {
        let s = scene(Vector3::new(4.5, -4.5, 2.2), 0.9);
        let source = make_procedural_atlas(96, 5);
        let table = build_inverse_atlas(&s.template, 96);
        let baked = bake_scene(&s, &render(&s, &source), &table);

        let local = deform(&s.template, &s.coefficients).unwrap();
        let world: Vec<Vector3<f64>> =
            local.iter().map(|v| s.pose.transform_point(v)).collect();
        let origin = s.e.camera_center();

        let valid_texels: Vec<(usize, usize)> = (0..96 * 96)
            .filter(|&i| baked.valid[i])
            .map(|i| (i % 96, i / 96))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let (tx, ty) = valid_texels[rng.gen_range(0..valid_texels.len())];
            let (ti, lam) = table.entry(tx, ty).unwrap();
            let tri = s.template.triangles[ti];
            let mut p = Vector3::zeros();
            for i in 0..3 {
                p += lam[i] * world[tri[i] as usize];
            }
            let dist = (p - origin).norm();
            let dir = (p - origin) / dist;
            let nearest = s
                .template
                .triangles
                .iter()
                .filter_map(|t| {
                    ray_hit(
                        &origin,
                        &dir,
                        &world[t[0] as usize],
                        &world[t[1] as usize],
                        &world[t[2] as usize],
                    )
                })
                .fold(f64::INFINITY, f64::min);
            assert!(
                dist <= nearest + 0.01,
                "texel ({tx}, {ty}) at {dist:.4} m baked despite occluder at {nearest:.4} m"
            );
        }
    }

    #[test]
    fn mesh_behind_the_camera_is_an_error() {
        let s = scene(Vector3::new(4.2, -5.0, 2.6), 0.0);
        // Re-aim the camera away from the vehicle.
        let e = CameraExtrinsics::look_at(
            Vector3::new(4.2, -5.0, 2.6),
            Vector3::new(8.4, -10.0, 2.6),
        );
        let table = build_inverse_atlas(&s.template, 96);
        let image = RgbRaster::new(640, 480, vec![[0; 3]; 640 * 480]);
        let err = bake(
            &image,
            &s.template,
            &s.coefficients,
            &s.pose,
            &table,
            &s.k,
            &e,
            &s.light,
        )
        .unwrap_err();
        assert!(matches!(err, BakeError::MeshFullyOutsideFrustum));
    }

    #[test]
    fn coverage_stats_examples() {
        let mut atlas = TextureAtlas::empty(96);
        assert_eq!(coverage_stats(&atlas), [0.0; PART_COUNT]);
        for v in &mut atlas.valid {
            *v = true;
        }
        assert_eq!(coverage_stats(&atlas), [1.0; PART_COUNT]);
        for ty in 0..96 {
            for tx in 0..96 {
                let i = atlas.index(tx, ty);
                atlas.valid[i] = (tx + ty) % 2 == 0;
            }
        }
        for f in coverage_stats(&atlas) {
            assert_eq!(f, 0.5);
        }
    }
}
