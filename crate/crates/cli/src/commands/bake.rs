//! `bake`: project one annotated instance's pixels back into its texture
//! atlas, writing the color/validity PNG pair.

use crate::commands::{ensure_dir, light_from_config, require_dataset};
use crate::config::{derive_seed, streams, PipelineConfig, MANIFEST_NAME};
use crate::{domain, Failure};
use cvis_forge_core::bake::{bake, build_inverse_atlas, coverage_stats};
use cvis_forge_core::scene::SceneAnnotation;
use cvis_forge_core::template::{load_mesh, make_procedural_template, VehicleTemplate};

pub fn run(cfg: &PipelineConfig) -> Result<(), Failure> {
    let (dataset_dir, scenes) = require_dataset(cfg)?;
    let scene = scenes.get(cfg.bake.scene).ok_or_else(|| {
        Failure::Usage(format!(
            "scene {} out of range (dataset has {})",
            cfg.bake.scene,
            scenes.len()
        ))
    })?;
    let ann = scene
        .annotations
        .iter()
        .find(|a| a.instance_id == cfg.bake.instance)
        .ok_or_else(|| {
            Failure::Usage(format!(
                "no instance {} in scene {}",
                cfg.bake.instance, cfg.bake.scene
            ))
        })?;

    let template = resolve_template(cfg, &dataset_dir, ann)?;
    if ann.coefficients.len() != template.component_count {
        return Err(Failure::Usage(format!(
            "template has {} shape components but the annotation carries {}; wrong template?",
            template.component_count,
            ann.coefficients.len()
        )));
    }
    let table = build_inverse_atlas(&template, cfg.bake.resolution);
    let atlas = bake(
        &scene.image,
        &template,
        &ann.coefficients,
        &ann.pose,
        &table,
        &scene.intrinsics,
        &scene.extrinsics,
        &light_from_config(cfg),
    )
    .map_err(domain)?;

    let out = &cfg.paths.output;
    ensure_dir(out)?;
    atlas
        .save_png_pair(&out.join("atlas.png"), &out.join("atlas.valid.png"))
        .map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.write_manifest("bake", out)?;

    let stats = coverage_stats(&atlas);
    let covered = stats.iter().filter(|&&f| f > 0.0).count();
    println!(
        "baked scene {} instance {}: {}/{} texels valid, {}/{} parts covered -> {}",
        cfg.bake.scene,
        cfg.bake.instance,
        atlas.valid_count(),
        cfg.bake.resolution * cfg.bake.resolution,
        covered,
        stats.len(),
        out.join("atlas.png").display()
    );
    for (i, f) in stats.iter().enumerate() {
        println!("  part {:2}: {:5.1}% valid", i + 1, 100.0 * f);
    }
    Ok(())
}

/// The mesh the instance was rendered with: an explicit `--template` file,
/// or regenerated/reloaded from the dataset's own manifest.
fn resolve_template(
    cfg: &PipelineConfig,
    dataset_dir: &std::path::Path,
    ann: &SceneAnnotation,
) -> Result<VehicleTemplate, Failure> {
    if let Some(path) = &cfg.bake.template {
        return load_mesh(path).map_err(|e| Failure::Usage(e.to_string()));
    }
    let manifest_path = dataset_dir.join(MANIFEST_NAME);
    if !manifest_path.exists() {
        return Err(Failure::Usage(format!(
            "no --template given and {} has no manifest to reconstruct one from",
            dataset_dir.display()
        )));
    }
    let manifest = PipelineConfig::load(Some(&manifest_path))?;
    match &manifest.paths.templates {
        Some(dir) => {
            let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "obj"))
                .collect();
            files.sort();
            let path = files.get(ann.template_id as usize).ok_or_else(|| {
                Failure::Usage(format!(
                    "annotation names template {} but {} holds only {} meshes",
                    ann.template_id,
                    dir.display(),
                    files.len()
                ))
            })?;
            load_mesh(path).map_err(|e| Failure::Usage(e.to_string()))
        }
        None => Ok(make_procedural_template(derive_seed(
            manifest.seed,
            streams::TEMPLATE,
            u64::from(ann.template_id),
        ))),
    }
}
