//! Procedural calibrated background: a flat road receding from a pole-
//! mounted camera, with lane markings, verge, and sky. Good enough to
//! composite against in tests and demos without shipping real imagery.

use super::Background;
use crate::geom::{
    backproject_to_plane, ground_plane_from_extrinsics, CameraExtrinsics, CameraIntrinsics,
};
use crate::raster::{DirectionalLight, RgbRaster};
use nalgebra::{Vector2, Vector3};

/// Half-width of the painted road surface in meters.
const ROAD_HALF_WIDTH: f64 = 7.0;

/// Deterministic per-pixel hash in [0, 1) for texture grain.
fn grain(x: u32, y: u32, seed: u64) -> f64 {
    let mut h = (u64::from(x) << 32 | u64::from(y)) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn shade(base: [f64; 3], factor: f64) -> [u8; 3] {
    std::array::from_fn(|c| (base[c] * factor).clamp(0.0, 255.0) as u8)
}

/// Build a calibrated flat-road background. The camera sits 5 m up at the
/// near edge of the scene looking down the +y road; vehicles placed by
/// [`PlacementConfig::standard`](super::PlacementConfig::standard) land in
/// its field of view.
pub fn make_procedural_background(width: u32, height: u32, seed: u64) -> Background {
    assert!(width > 0 && height > 0);
    let intrinsics = CameraIntrinsics::new(
        0.9 * f64::from(width),
        0.9 * f64::from(width),
        f64::from(width) / 2.0,
        f64::from(height) / 2.0,
        width,
        height,
    );
    let extrinsics =
        CameraExtrinsics::look_at(Vector3::new(0.0, -6.0, 5.0), Vector3::new(0.0, 20.0, 0.0));
    let ground = ground_plane_from_extrinsics(&extrinsics);
    let light = DirectionalLight::new(Vector3::new(0.35, 0.2, -1.0), 0.45);

    let mut pixels = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        for x in 0..width {
            let pixel = Vector2::new(f64::from(x) + 0.5, f64::from(y) + 0.5);
            let hit = backproject_to_plane(&pixel, &intrinsics, &extrinsics, &ground)
                .ok()
                .filter(|p| p.y < 250.0);
            let g = grain(x, y, seed);
            let color = match hit {
                Some(p) => {
                    // Distant ground fades toward the horizon haze.
                    let fade = 1.0 / (1.0 + p.y.max(0.0) / 150.0);
                    if p.x.abs() <= ROAD_HALF_WIDTH {
                        let asphalt = [52.0, 52.0, 56.0];
                        let on_edge_line = (p.x.abs() - ROAD_HALF_WIDTH).abs() < 0.15;
                        let on_center_dash =
                            p.x.abs() < 0.10 && (p.y / 4.0).rem_euclid(1.0) < 0.5;
                        if on_edge_line || on_center_dash {
                            shade([228.0, 228.0, 222.0], fade)
                        } else {
                            shade(asphalt, fade * (0.92 + 0.16 * g))
                        }
                    } else {
                        shade([74.0, 96.0, 58.0], fade * (0.88 + 0.24 * g))
                    }
                }
                // Sky: vertical gradient, lighter toward the horizon.
                None => {
                    let t = f64::from(y) / f64::from(height);
                    shade(
                        [
                            128.0 + 70.0 * t,
                            158.0 + 55.0 * t,
                            205.0 + 30.0 * t,
                        ],
                        1.0,
                    )
                }
            };
            pixels.push(color);
        }
    }

    Background::new(
        RgbRaster::new(width as usize, height as usize, pixels),
        intrinsics,
        extrinsics,
        ground,
        light,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_is_calibrated_and_deterministic() {
        let a = make_procedural_background(160, 120, 9);
        assert_eq!(a.image.width, 160);
        assert_eq!(a.image.height, 120);
        assert_eq!(a.ground.normal, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(a.ground.offset, 0.0);
        assert!(a.light.direction.z < 0.0);
        let b = make_procedural_background(160, 120, 9);
        assert_eq!(a.image, b.image);
        let c = make_procedural_background(160, 120, 10);
        assert_ne!(a.image, c.image, "seed should vary the texture grain");
    }

    #[test]
    fn road_pixels_sit_below_the_sky() {
        let bg = make_procedural_background(160, 120, 0);
        // The bottom rows see the road right in front of the camera; the top
        // rows see sky. Spot-check by backprojection.
        let low = backproject_to_plane(
            &Vector2::new(80.0, 115.0),
            &bg.intrinsics,
            &bg.extrinsics,
            &bg.ground,
        )
        .unwrap();
        assert!(low.y > -6.0 && low.y < 30.0);
        assert!(backproject_to_plane(
            &Vector2::new(80.0, 5.0),
            &bg.intrinsics,
            &bg.extrinsics,
            &bg.ground,
        )
        .is_err());
    }
}
