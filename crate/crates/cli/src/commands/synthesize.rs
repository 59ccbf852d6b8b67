//! `synthesize`: render a seeded dataset of annotated scenes.

use crate::commands::{ensure_dir, fleet_atlases, load_backgrounds, load_fleet};
use crate::config::{derive_seed, streams, PipelineConfig};
use crate::{domain, Failure};
use cvis_forge_core::scene::{compose, export_dataset, place_vehicles, Scene, SceneError};
use rayon::prelude::*;

pub fn run(cfg: &PipelineConfig) -> Result<(), Failure> {
    let scenes = build_scenes(cfg)?;
    let out = &cfg.paths.output;
    ensure_dir(out)?;
    export_dataset(&scenes, out).map_err(domain)?;
    cfg.write_manifest("synthesize", out)?;
    let instances: usize = scenes.iter().map(|s| s.annotations.len()).sum();
    println!(
        "wrote {} scene(s), {} vehicle instance(s) -> {}",
        scenes.len(),
        instances,
        out.display()
    );
    Ok(())
}

/// The full generation pipeline, exposed so `bench` can time it in pieces.
pub fn build_scenes(cfg: &PipelineConfig) -> Result<Vec<Scene>, Failure> {
    let fleet = load_fleet(cfg)?;
    let atlases = fleet_atlases(cfg, fleet.len());
    let backgrounds = load_backgrounds(cfg, cfg.synthesize.scenes)?;
    backgrounds
        .par_iter()
        .enumerate()
        .map(|(i, bg)| {
            let placement = cfg.placement_config(
                cfg.synthesize.vehicles,
                derive_seed(cfg.seed, streams::PLACEMENT, i as u64),
            );
            let poses = place_vehicles(bg, &placement, &fleet).map_err(|e| match e {
                SceneError::PlacementExhausted { .. } => domain(e),
                other => Failure::Usage(other.to_string()),
            })?;
            compose(bg, &poses, &fleet, &atlases).map_err(domain)
        })
        .collect()
}
