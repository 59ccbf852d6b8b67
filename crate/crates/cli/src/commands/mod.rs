//! One module per subcommand, plus the asset-loading helpers they share.

pub mod bake;
pub mod bench;
pub mod estimate;
pub mod evaluate;
pub mod gen_template;
pub mod inpaint;
pub mod synthesize;

use crate::config::{derive_seed, streams, PipelineConfig};
use crate::Failure;
use cvis_forge_core::geom::{CameraExtrinsics, CameraIntrinsics, Plane};
use cvis_forge_core::inpaint::{make_procedural_atlas, TextureAtlas};
use cvis_forge_core::raster::{DirectionalLight, RgbRaster};
use cvis_forge_core::scene::{import_annotations, make_procedural_background, Background, Scene};
use cvis_forge_core::template::{
    load_mesh, make_procedural_template, ShapeCoefficients, VehicleTemplate,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::path::{Path, PathBuf};

pub fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn usage<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Usage(format!("{}: {e}", path.display()))
}

/// The fleet a dataset is synthesized from: template meshes either loaded
/// from `paths.templates` (every `*.obj` there, sorted by name) or generated
/// procedurally, each with seeded shape coefficients.
pub fn load_fleet(
    cfg: &PipelineConfig,
) -> Result<Vec<(VehicleTemplate, ShapeCoefficients)>, Failure> {
    let templates: Vec<VehicleTemplate> = match &cfg.paths.templates {
        Some(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(usage(dir))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "obj"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Failure::Usage(format!(
                    "no .obj templates in {}",
                    dir.display()
                )));
            }
            files
                .iter()
                .map(|p| load_mesh(p).map_err(|e| Failure::Usage(e.to_string())))
                .collect::<Result<_, _>>()?
        }
        None => (0..cfg.synthesize.fleet.max(1))
            .map(|i| make_procedural_template(derive_seed(cfg.seed, streams::TEMPLATE, i as u64)))
            .collect(),
    };
    Ok(templates
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::COEFFICIENTS, i as u64));
            let coeffs: Vec<f64> = (0..t.component_count)
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect();
            (t, ShapeCoefficients::new(coeffs))
        })
        .collect())
}

/// One procedural texture atlas per fleet entry.
pub fn fleet_atlases(cfg: &PipelineConfig, fleet_len: usize) -> Vec<TextureAtlas> {
    (0..fleet_len)
        .map(|i| {
            make_procedural_atlas(
                cfg.synthesize.atlas_resolution,
                derive_seed(cfg.seed, streams::ATLAS, i as u64),
            )
        })
        .collect()
}

/// Calibration sidecar for a user-supplied background photo. The ground is
/// taken to be the world plane z = 0.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BackgroundSidecar {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(default)]
    skew: f64,
    /// Camera center in world coordinates.
    eye: [f64; 3],
    /// A world point on the optical axis.
    target: [f64; 3],
    #[serde(default = "default_light_direction")]
    light_direction: [f64; 3],
    #[serde(default = "default_shadow_strength")]
    shadow_strength: f64,
}

fn default_light_direction() -> [f64; 3] {
    [0.35, 0.2, -1.0]
}

fn default_shadow_strength() -> f64 {
    0.45
}

fn load_background_pair(png: &Path) -> Result<Background, Failure> {
    let image = RgbRaster::load_png(png).map_err(|e| Failure::Usage(e.to_string()))?;
    let sidecar_path = png.with_extension("toml");
    let text = std::fs::read_to_string(&sidecar_path).map_err(usage(&sidecar_path))?;
    let sc: BackgroundSidecar = toml::from_str(&text).map_err(usage(&sidecar_path))?;
    let intrinsics = CameraIntrinsics::new(
        sc.fx,
        sc.fy,
        sc.cx,
        sc.cy,
        image.width as u32,
        image.height as u32,
    )
    .with_skew(sc.skew);
    let extrinsics = CameraExtrinsics::look_at(
        Vector3::from(sc.eye),
        Vector3::from(sc.target),
    );
    Ok(Background::new(
        image,
        intrinsics,
        extrinsics,
        Plane::new(Vector3::z(), 0.0),
        DirectionalLight::new(Vector3::from(sc.light_direction), sc.shadow_strength),
    ))
}

/// One background per scene: calibrated photos from `paths.backgrounds`
/// (cycled when there are fewer than `scenes`) or seeded procedural ones.
pub fn load_backgrounds(cfg: &PipelineConfig, scenes: usize) -> Result<Vec<Background>, Failure> {
    match &cfg.paths.backgrounds {
        Some(dir) => {
            let mut pngs: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(usage(dir))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "png"))
                .collect();
            pngs.sort();
            if pngs.is_empty() {
                return Err(Failure::Usage(format!(
                    "no .png backgrounds in {}",
                    dir.display()
                )));
            }
            let loaded: Vec<Background> = pngs
                .iter()
                .map(|p| load_background_pair(p))
                .collect::<Result<_, _>>()?;
            Ok((0..scenes).map(|i| loaded[i % loaded.len()].clone()).collect())
        }
        None => Ok((0..scenes)
            .map(|i| {
                make_procedural_background(
                    cfg.synthesize.width,
                    cfg.synthesize.height,
                    derive_seed(cfg.seed, streams::BACKGROUND, i as u64),
                )
            })
            .collect()),
    }
}

/// The dataset directory named by the config, with its scenes loaded.
pub fn require_dataset(cfg: &PipelineConfig) -> Result<(PathBuf, Vec<Scene>), Failure> {
    let dir = cfg
        .paths
        .dataset
        .clone()
        .ok_or_else(|| Failure::Usage("no dataset given (--dataset or paths.dataset)".into()))?;
    let scenes = import_annotations(&dir).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((dir, scenes))
}

pub fn light_from_config(cfg: &PipelineConfig) -> DirectionalLight {
    DirectionalLight::new(
        Vector3::from(cfg.light.direction),
        cfg.light.shadow_strength,
    )
}
