//! Run configuration: a versioned TOML document with every field defaulted,
//! merged with command-line flags (flags win). Each command writes the fully
//! resolved configuration into its output directory as `cvis-forge.toml`
//! together with a `[run]` stamp, so any run can be reproduced from that
//! manifest alone: `cvis-forge <command> --config <dir>/cvis-forge.toml`.
//! Only the stamp's timestamp varies between reproductions.

use crate::Failure;
use cvis_forge_core::metrics::{A3dpConfig, A3dpMode};
use cvis_forge_core::pose::{NoiseModel, RansacConfig};
use cvis_forge_core::scene::PlacementConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "cvis-forge.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub version: u32,
    /// Root RNG seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Worker threads; 0 means one per core. The `CVIS_FORGE_THREADS`
    /// environment variable takes precedence over this field.
    pub parallelism: usize,
    pub paths: Paths,
    pub gen_template: GenTemplateSection,
    pub synthesize: SynthesizeSection,
    pub placement: PlacementSection,
    pub light: LightSection,
    pub noise: NoiseSection,
    pub ransac: RansacSection,
    pub a3dp: A3dpSection,
    pub inpaint: InpaintSection,
    pub bake: BakeSection,
    /// Written into manifests; ignored when a manifest is used as a config.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunStamp>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            parallelism: 0,
            paths: Paths::default(),
            gen_template: GenTemplateSection::default(),
            synthesize: SynthesizeSection::default(),
            placement: PlacementSection::default(),
            light: LightSection::default(),
            noise: NoiseSection::default(),
            ransac: RansacSection::default(),
            a3dp: A3dpSection::default(),
            inpaint: InpaintSection::default(),
            bake: BakeSection::default(),
            run: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory all commands write their artifacts and manifest into.
    pub output: PathBuf,
    /// Directory of saved mesh templates forming the fleet; procedural
    /// templates are generated when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    /// Directory of calibrated backgrounds (`NAME.png` + `NAME.toml`
    /// sidecar); procedural backgrounds are generated when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backgrounds: Option<PathBuf>,
    /// Dataset directory read by `bake`, `estimate`, and `evaluate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Estimates file (or directory holding `estimates.json`) read by
    /// `evaluate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimates: Option<PathBuf>,
    /// Correspondence text file; switches `estimate` to single-solve mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<PathBuf>,
    /// Atlas color PNG read by `inpaint` (validity mask expected beside it
    /// as `<stem>.valid.png`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atlas: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output: PathBuf::from("out"),
            templates: None,
            backgrounds: None,
            dataset: None,
            estimates: None,
            points: None,
            atlas: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GenTemplateSection {
    /// Mesh file to write; defaults to `<paths.output>/template.obj`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesizeSection {
    pub scenes: usize,
    pub width: u32,
    pub height: u32,
    /// Vehicles placed per scene.
    pub vehicles: usize,
    /// Procedural fleet size when `paths.templates` is unset.
    pub fleet: usize,
    /// Texture atlas resolution (texels per side, multiple of 6).
    pub atlas_resolution: usize,
}

impl Default for SynthesizeSection {
    fn default() -> Self {
        Self {
            scenes: 3,
            width: 640,
            height: 480,
            vehicles: 4,
            fleet: 2,
            atlas_resolution: 96,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementSection {
    pub min_gap: f64,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub yaw_range: [f64; 2],
    /// Total placement sample budget; 0 selects 200 per vehicle.
    pub max_attempts: usize,
}

impl Default for PlacementSection {
    fn default() -> Self {
        let d = PlacementConfig::standard(1, 0);
        Self {
            min_gap: d.min_gap,
            x_range: [d.x_range.0, d.x_range.1],
            y_range: [d.y_range.0, d.y_range.1],
            yaw_range: [d.yaw_range.0, d.yaw_range.1],
            max_attempts: 0,
        }
    }
}

/// Directional light used by `bake`; the default matches the procedural
/// backgrounds, so baking from a synthesized dataset works out of the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightSection {
    pub direction: [f64; 3],
    pub shadow_strength: f64,
}

impl Default for LightSection {
    fn default() -> Self {
        Self {
            direction: [0.35, 0.2, -1.0],
            shadow_strength: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub pixel_sigma: f64,
    pub point_sigma: f64,
    pub outlier_fraction: f64,
    /// Correspondences sampled per instance.
    pub samples: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = NoiseModel::default();
        Self {
            pixel_sigma: 0.0,
            point_sigma: 0.0,
            outlier_fraction: 0.0,
            samples: d.samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacSection {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub min_sample: usize,
    pub confidence: f64,
}

impl Default for RansacSection {
    fn default() -> Self {
        let d = RansacConfig::default();
        Self {
            iterations: d.iterations,
            inlier_threshold: d.inlier_threshold,
            min_sample: d.min_sample,
            confidence: d.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct A3dpSection {
    pub loose_index: usize,
    pub strict_index: usize,
    /// Score pose estimates against their estimated dimensions; when false
    /// the shape criterion is vacuous (no shape hypothesis is claimed).
    pub use_estimated_dimensions: bool,
    /// Override the default threshold ladder with explicit
    /// `[translation_m, rotation_rad, shape_sim]` rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<[f64; 3]>>,
}

impl Default for A3dpSection {
    fn default() -> Self {
        Self {
            loose_index: 0,
            strict_index: 5,
            use_estimated_dimensions: false,
            levels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InpaintMethod {
    Pure,
    Knn,
    Net,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintSection {
    pub method: InpaintMethod,
    pub knn_k: usize,
    /// Self-supervised steps when training a network from scratch.
    pub train_steps: usize,
    pub learning_rate: f64,
    /// Network weights file: loaded if it exists, trained and saved there
    /// otherwise. Unset trains a throwaway network per run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl Default for InpaintSection {
    fn default() -> Self {
        Self {
            method: InpaintMethod::Net,
            knn_k: 4,
            train_steps: 400,
            learning_rate: 1.0,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BakeSection {
    /// Scene index within the dataset.
    pub scene: usize,
    /// Instance id within the scene (1-based, as annotated).
    pub instance: u32,
    /// Atlas resolution to bake into.
    pub resolution: usize,
    /// Template mesh matching the instance; when unset the dataset's own
    /// manifest is consulted to regenerate it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
}

impl Default for BakeSection {
    fn default() -> Self {
        Self {
            scene: 0,
            instance: 1,
            resolution: 96,
            template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunStamp {
    pub command: String,
    pub tool: String,
    /// Wall-clock seconds since the Unix epoch; the only field excluded
    /// from the byte-identical reproduction guarantee.
    pub timestamp_unix: u64,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Failure::Usage(format!(
                "config {} has version {}, this tool expects {CONFIG_VERSION}",
                path.display(),
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Check value ranges and that every referenced path exists.
    pub fn validate(&self) -> Result<(), Failure> {
        let usage = |msg: String| Err(Failure::Usage(msg));
        for (name, path) in [
            ("paths.templates", &self.paths.templates),
            ("paths.backgrounds", &self.paths.backgrounds),
            ("paths.dataset", &self.paths.dataset),
            ("paths.estimates", &self.paths.estimates),
            ("paths.points", &self.paths.points),
            ("paths.atlas", &self.paths.atlas),
            ("bake.template", &self.bake.template),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return usage(format!("{name} = {} does not exist", p.display()));
                }
            }
        }
        if self.synthesize.atlas_resolution == 0 || self.synthesize.atlas_resolution % 6 != 0 {
            return usage("synthesize.atlas_resolution must be a positive multiple of 6".into());
        }
        if self.bake.resolution == 0 || self.bake.resolution % 6 != 0 {
            return usage("bake.resolution must be a positive multiple of 6".into());
        }
        if self.synthesize.width == 0 || self.synthesize.height == 0 {
            return usage("synthesize.width/height must be positive".into());
        }
        if self.noise.pixel_sigma < 0.0 || self.noise.point_sigma < 0.0 {
            return usage("noise sigmas must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.noise.outlier_fraction) {
            return usage("noise.outlier_fraction must lie in [0, 1)".into());
        }
        if self.noise.samples == 0 {
            return usage("noise.samples must be positive".into());
        }
        if self.ransac.min_sample < 4 {
            return usage("ransac.min_sample must be at least 4".into());
        }
        if !(0.0..1.0).contains(&self.ransac.confidence) {
            return usage("ransac.confidence must lie in [0, 1)".into());
        }
        if self.placement.min_gap < 0.0 {
            return usage("placement.min_gap must be non-negative".into());
        }
        for (name, r) in [
            ("x_range", self.placement.x_range),
            ("y_range", self.placement.y_range),
            ("yaw_range", self.placement.yaw_range),
        ] {
            if r[0] > r[1] {
                return usage(format!("placement.{name} is reversed"));
            }
        }
        let n_levels = self.a3dp.levels.as_ref().map_or(10, Vec::len);
        if self.a3dp.loose_index >= n_levels || self.a3dp.strict_index >= n_levels {
            return usage("a3dp loose/strict indices exceed the level count".into());
        }
        if !(0.0..=1.0).contains(&self.inpaint.learning_rate) || self.inpaint.knn_k == 0 {
            return usage("inpaint.learning_rate must lie in [0, 1]; knn_k must be positive".into());
        }
        Ok(())
    }

    pub fn placement_config(&self, count: usize, seed: u64) -> PlacementConfig {
        let p = &self.placement;
        PlacementConfig {
            count,
            yaw_range: (p.yaw_range[0], p.yaw_range[1]),
            x_range: (p.x_range[0], p.x_range[1]),
            y_range: (p.y_range[0], p.y_range[1]),
            min_gap: p.min_gap,
            max_attempts: if p.max_attempts == 0 {
                200 * count.max(1)
            } else {
                p.max_attempts
            },
            seed,
        }
    }

    pub fn noise_model(&self, seed: u64) -> NoiseModel {
        NoiseModel {
            pixel_sigma: self.noise.pixel_sigma,
            point_sigma: self.noise.point_sigma,
            outlier_fraction: self.noise.outlier_fraction,
            samples: self.noise.samples,
            seed,
            ..NoiseModel::default()
        }
    }

    pub fn ransac_config(&self, seed: u64) -> RansacConfig {
        RansacConfig {
            iterations: self.ransac.iterations,
            inlier_threshold: self.ransac.inlier_threshold,
            min_sample: self.ransac.min_sample,
            confidence: self.ransac.confidence,
            seed,
        }
    }

    pub fn a3dp_config(&self, mode: A3dpMode) -> A3dpConfig {
        let levels = match &self.a3dp.levels {
            Some(rows) => rows.iter().map(|r| (r[0], r[1], r[2])).collect(),
            None => match mode {
                A3dpMode::Abs => A3dpConfig::abs_default().levels,
                A3dpMode::Rel => A3dpConfig::rel_default().levels,
            },
        };
        A3dpConfig::new(levels, mode, self.a3dp.loose_index, self.a3dp.strict_index)
    }

    /// Write the resolved configuration as `<dir>/cvis-forge.toml`.
    pub fn write_manifest(&self, command: &str, dir: &Path) -> Result<(), Failure> {
        let mut stamped = self.clone();
        stamped.run = Some(RunStamp {
            command: command.to_string(),
            tool: format!("cvis-forge {}", env!("CARGO_PKG_VERSION")),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        });
        let text = toml::to_string_pretty(&stamped)
            .map_err(|e| Failure::Domain(format!("cannot serialize manifest: {e}")))?;
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, text)
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

/// Derived seed for an independent stage/index stream under one root seed.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ stream) ^ index)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Stage tags for [`derive_seed`].
pub mod streams {
    pub const TEMPLATE: u64 = 1;
    pub const COEFFICIENTS: u64 = 2;
    pub const ATLAS: u64 = 3;
    pub const BACKGROUND: u64 = 4;
    pub const PLACEMENT: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const RANSAC: u64 = 7;
    pub const NET_INIT: u64 = 8;
    pub const NET_TRAIN: u64 = 9;
    pub const NET_DATA: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<PipelineConfig>("version = 1\nsped = 3\n").unwrap_err();
        assert!(err.to_string().contains("sped"));
    }

    #[test]
    fn derived_seeds_are_spread_out() {
        let mut seen = std::collections::HashSet::new();
        for stream in 0..8 {
            for i in 0..64 {
                assert!(seen.insert(derive_seed(7, stream, i)));
            }
        }
        assert_ne!(derive_seed(7, 1, 0), derive_seed(8, 1, 0));
    }
}
