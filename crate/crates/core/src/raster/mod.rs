//! Deterministic software renderer: z-buffered, perspective-correct textured
//! triangles with per-pixel instance/part/surface-point attachments, plus
//! planar shadow casting onto the ground.
//!
//! The color plane is what a viewer sees; the auxiliary planes (`instance_id`,
//! `part_id`, `canon_point`, `depth`) carry the exact per-pixel ground truth
//! that scene annotations are extracted from.

pub(crate) mod draw;

pub use draw::{rasterize, shadow_pass};

use crate::geom::RAY_EPS;
use crate::geom::{Plane, Pose};
use crate::inpaint::TextureAtlas;
use crate::template::{ShapeCoefficients, VehicleTemplate};
use nalgebra::Vector3;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Ambient floor of the shading term. Keeping it well above zero makes the
/// Lambert factor invertible everywhere, which texture baking relies on to
/// divide shading back out.
pub(crate) const AMBIENT: f64 = 0.35;
/// Diffuse share of the shading term; `AMBIENT + DIFFUSE = 1` so a surface
/// facing the light reproduces its texture color exactly.
pub(crate) const DIFFUSE: f64 = 0.65;

/// Magic bytes of the binary dense-map raster format (header: these 8 bytes,
/// then width and height as little-endian u32 — 16 bytes total).
const RASTER_MAGIC: &[u8; 8] = b"CVFDMAP1";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("texture atlas has invalid texels; fill it before rendering")]
    IncompleteTexture,
    #[error("light direction is parallel to the ground plane")]
    LightParallelToPlane,
    #[error(transparent)]
    Template(#[from] crate::template::TemplateError),
    #[error("bad raster file: {0}")]
    BadRasterFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
}

/// Single directional light. `direction` points from the light toward the
/// scene and always has a downward component; `shadow_strength` in (0, 1]
/// scales how much ground shadows darken the background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalLight {
    pub direction: Vector3<f64>,
    pub shadow_strength: f64,
}

impl DirectionalLight {
    /// Normalizes the direction; it must point downward (negative z).
    pub fn new(direction: Vector3<f64>, shadow_strength: f64) -> Self {
        let n = direction.norm();
        assert!(n > 1e-12, "light direction must be nonzero");
        let direction = direction / n;
        assert!(direction.z < 0.0, "light must come from above");
        assert!(
            shadow_strength > 0.0 && shadow_strength <= 1.0,
            "shadow strength must lie in (0, 1]"
        );
        Self {
            direction,
            shadow_strength,
        }
    }
}

/// Lambert shading factor for a unit outward surface normal, in
/// [AMBIENT, 1]. Flat per triangle; baking divides the same factor out.
pub(crate) fn lambert(normal: &Vector3<f64>, light: &DirectionalLight) -> f64 {
    AMBIENT + DIFFUSE * (-light.direction.dot(normal)).max(0.0)
}

/// Everything needed to draw one vehicle: the shared template, its shape
/// coefficients, its world pose, and its (complete) texture atlas.
#[derive(Debug, Clone, Copy)]
pub struct RenderInstance<'a> {
    pub template: &'a VehicleTemplate,
    pub coefficients: &'a ShapeCoefficients,
    pub pose: &'a Pose,
    pub atlas: &'a TextureAtlas,
}

/// Render target with ground-truth side channels.
///
/// All planes share one resolution. `instance_id` 0 means background and
/// `part_id` 0 means none; `canon_point` holds the instance-local surface
/// position (the template deformed by that instance's coefficients, before
/// its world pose is applied) and is NaN exactly on background pixels.
#[derive(Debug, Clone)]
pub struct Framebuffer {
    width: usize,
    height: usize,
    pub color: Vec<[u8; 3]>,
    pub depth: Vec<f64>,
    pub instance_id: Vec<u32>,
    pub part_id: Vec<u8>,
    pub canon_point: Vec<Vector3<f64>>,
}

impl Framebuffer {
    /// Black, empty framebuffer: depth +∞, ids zero, canon_point NaN.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        let n = width * height;
        Self {
            width,
            height,
            color: vec![[0; 3]; n],
            depth: vec![f64::INFINITY; n],
            instance_id: vec![0; n],
            part_id: vec![0; n],
            canon_point: vec![Vector3::repeat(f64::NAN); n],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    /// Write the color plane as an RGB PNG.
    pub fn save_color_png(&self, path: &Path) -> Result<(), RasterError> {
        let mut rgb = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                rgb.put_pixel(x as u32, y as u32, image::Rgb(self.color[self.index(x, y)]));
            }
        }
        rgb.save(path)?;
        Ok(())
    }

    /// Write the canon_point plane as a binary raster; see
    /// [`save_canon_raster`].
    pub fn save_canon_raster(&self, path: &Path) -> Result<(), RasterError> {
        save_canon_raster(self.width, self.height, &self.canon_point, path)
    }
}

/// Write a dense point map as a binary raster: an 8-byte magic, width and
/// height as little-endian u32, then row-major x,y,z little-endian f32
/// triples (NaN on background pixels).
pub fn save_canon_raster(
    width: usize,
    height: usize,
    points: &[Vector3<f64>],
    path: &Path,
) -> Result<(), RasterError> {
    assert_eq!(points.len(), width * height);
    let mut buf = Vec::with_capacity(16 + width * height * 12);
    buf.extend_from_slice(RASTER_MAGIC);
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    for p in points {
        for c in 0..3 {
            buf.extend_from_slice(&(p[c] as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Plain RGB image (row-major, 8-bit channels): rendered scene output and
/// texture-bake input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbRaster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let mut rgb = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                rgb.put_pixel(x as u32, y as u32, image::Rgb(self.pixels[self.index(x, y)]));
            }
        }
        rgb.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let (width, height, pixels) = load_color_png(path)?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

impl Framebuffer {
    /// Copy of the color plane as a standalone image.
    pub fn color_raster(&self) -> RgbRaster {
        RgbRaster {
            width: self.width,
            height: self.height,
            pixels: self.color.clone(),
        }
    }
}

/// Read a color PNG back as `(width, height, row-major RGB)`.
pub fn load_color_png(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>), RasterError> {
    let rgb = image::open(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            out.push(rgb.get_pixel(x, y).0);
        }
    }
    Ok((w as usize, h as usize, out))
}

/// Read a binary dense-map raster back as `(width, height, points)`.
pub fn load_canon_raster(path: &Path) -> Result<(usize, usize, Vec<Vector3<f64>>), RasterError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != RASTER_MAGIC {
        return Err(RasterError::BadRasterFile(
            "missing dense-map magic".into(),
        ));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + width * height * 12;
    if bytes.len() != expected {
        return Err(RasterError::BadRasterFile(format!(
            "payload is {} bytes, expected {expected} for {width}x{height}",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(width * height);
    for chunk in bytes[16..].chunks_exact(12) {
        points.push(Vector3::new(
            f64::from(f32::from_le_bytes(chunk[0..4].try_into().unwrap())),
            f64::from(f32::from_le_bytes(chunk[4..8].try_into().unwrap())),
            f64::from(f32::from_le_bytes(chunk[8..12].try_into().unwrap())),
        ));
    }
    Ok((width, height, points))
}

/// Slide `p` along the light direction onto `ground`.
pub fn shadow_point(
    p: &Vector3<f64>,
    light: &DirectionalLight,
    ground: &Plane,
) -> Result<Vector3<f64>, RasterError> {
    let denom = ground.normal.dot(&light.direction);
    if denom.abs() <= RAY_EPS {
        return Err(RasterError::LightParallelToPlane);
    }
    let t = (ground.offset - ground.normal.dot(p)) / denom;
    let mut r = p + t * light.direction;
    // Pin the result exactly onto the plane against rounding drift.
    r += (ground.offset - ground.normal.dot(&r)) * ground.normal;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    #[test]
    fn shadow_point_straight_down() {
        let light = DirectionalLight::new(Vector3::new(0.0, 0.0, -1.0), 0.5);
        let ground = Plane::new(Vector3::new(0.0, 0.0, 1.0), 0.0);
        let r = shadow_point(&Vector3::new(1.0, 2.0, 3.0), &light, &ground).unwrap();
        assert_relative_eq!(r, Vector3::new(1.0, 2.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn shadow_point_oblique() {
        let light = DirectionalLight::new(Vector3::new(1.0, 0.0, -1.0), 0.5);
        let ground = Plane::new(Vector3::new(0.0, 0.0, 1.0), 0.0);
        let r = shadow_point(&Vector3::new(0.0, 0.0, 2.0), &light, &ground).unwrap();
        assert_relative_eq!(r, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn shadow_point_parallel_light_is_an_error() {
        // A horizontal direction is rejected by the constructor, so build the
        // parallel configuration with a tilted plane instead.
        let light = DirectionalLight::new(Vector3::new(1.0, 0.0, -1.0), 0.5);
        let ground = Plane::new(Vector3::new(1.0, 0.0, 1.0), 0.0);
        let err = shadow_point(&Vector3::new(0.0, 0.0, 2.0), &light, &ground).unwrap_err();
        assert!(matches!(err, RasterError::LightParallelToPlane));
    }

    proptest! {
        #[test]
        fn shadow_point_lands_on_the_plane(
            px in -10.0..10.0f64,
            py in -10.0..10.0f64,
            pz in 0.0..10.0f64,
            dx in -1.0..1.0f64,
            dy in -1.0..1.0f64,
            dz in -2.0..-0.2f64,
            nx in -0.3..0.3f64,
            ny in -0.3..0.3f64,
            offset in -1.0..1.0f64,
        ) {
            let light = DirectionalLight::new(Vector3::new(dx, dy, dz), 0.7);
            let ground = Plane::new(Vector3::new(nx, ny, 1.0), offset);
            let r = shadow_point(&Vector3::new(px, py, pz), &light, &ground).unwrap();
            prop_assert!((ground.normal.dot(&r) - ground.offset).abs() <= 1e-9);
        }
    }

    #[test]
    #[should_panic(expected = "light must come from above")]
    fn upward_light_is_rejected() {
        DirectionalLight::new(Vector3::new(0.0, 0.0, 1.0), 0.5);
    }

    #[test]
    fn canon_raster_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dense.bin");
        let mut fb = Framebuffer::new(3, 2);
        fb.canon_point[0] = Vector3::new(0.25, -1.5, 3.0);
        fb.canon_point[5] = Vector3::new(1e-3, 2.5, -0.125);
        fb.save_canon_raster(&path).unwrap();
        let (w, h, pts) = load_canon_raster(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in fb.canon_point.iter().zip(&pts) {
            for c in 0..3 {
                if a[c].is_nan() {
                    assert!(b[c].is_nan());
                } else {
                    assert_eq!(a[c] as f32, b[c] as f32);
                }
            }
        }
    }

    #[test]
    fn corrupt_raster_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dense.bin");
        let fb = Framebuffer::new(2, 2);
        fb.save_canon_raster(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_canon_raster(&path),
            Err(RasterError::BadRasterFile(_))
        ));
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dense.bin");
        let fb = Framebuffer::new(2, 2);
        fb.save_canon_raster(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_canon_raster(&path),
            Err(RasterError::BadRasterFile(_))
        ));
    }

    #[test]
    fn color_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("color.png");
        let mut fb = Framebuffer::new(4, 3);
        for (i, px) in fb.color.iter_mut().enumerate() {
            *px = [(i * 17 % 256) as u8, (i * 41 % 256) as u8, (i * 97 % 256) as u8];
        }
        fb.save_color_png(&path).unwrap();
        let (w, h, pixels) = load_color_png(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(pixels, fb.color);
    }
}
