//! `bench`: wall-clock every pipeline stage once on the configured
//! synthesize workload. Timings are measurements, not artifacts — the
//! written `bench.*` files are exempt from reproducibility guarantees.

use crate::commands::{ensure_dir, fleet_atlases, light_from_config, load_backgrounds, load_fleet};
use crate::config::{derive_seed, streams, PipelineConfig};
use crate::{domain, Failure};
use cvis_forge_core::bake::{bake, build_inverse_atlas};
use cvis_forge_core::inpaint::{fill_knn, GraphInpaintNet, NetConfig};
use cvis_forge_core::metrics::{a3dp, A3dpMode, PoseEvalImage, PosePrediction, PoseTruth};
use cvis_forge_core::pose::{ransac_pnp, simulate_predictor};
use cvis_forge_core::scene::{compose, export_dataset, place_vehicles, Scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

pub fn run(cfg: &PipelineConfig) -> Result<(), Failure> {
    let out = &cfg.paths.output;
    ensure_dir(out)?;
    let mut stages: Vec<(&'static str, f64)> = Vec::new();
    let mut time = |name: &'static str, t0: Instant| {
        stages.push((name, t0.elapsed().as_secs_f64()));
    };

    let t0 = Instant::now();
    let fleet = load_fleet(cfg)?;
    time("gen_templates", t0);

    let t0 = Instant::now();
    let atlases = fleet_atlases(cfg, fleet.len());
    time("gen_atlases", t0);

    let t0 = Instant::now();
    let backgrounds = load_backgrounds(cfg, cfg.synthesize.scenes)?;
    time("backgrounds", t0);

    let t0 = Instant::now();
    let mut placements = Vec::new();
    for (i, bg) in backgrounds.iter().enumerate() {
        let pc = cfg.placement_config(
            cfg.synthesize.vehicles,
            derive_seed(cfg.seed, streams::PLACEMENT, i as u64),
        );
        placements.push(place_vehicles(bg, &pc, &fleet).map_err(domain)?);
    }
    time("placement", t0);

    let t0 = Instant::now();
    let scenes: Vec<Scene> = backgrounds
        .iter()
        .zip(&placements)
        .map(|(bg, poses)| compose(bg, poses, &fleet, &atlases).map_err(domain))
        .collect::<Result<_, _>>()?;
    time("compose", t0);

    let scratch = out.join("scratch");
    ensure_dir(&scratch)?;
    let t0 = Instant::now();
    export_dataset(&scenes, &scratch).map_err(domain)?;
    time("export", t0);
    std::fs::remove_dir_all(&scratch)
        .map_err(|e| Failure::Usage(format!("cannot remove {}: {e}", scratch.display())))?;

    // Per-instance stages run on the first usable annotation.
    let target = scenes
        .iter()
        .find_map(|s| s.annotations.iter().find(|a| !a.tiny).map(|a| (s, a)));
    if let Some((scene, ann)) = target {
        let (template, coefficients) = &fleet[ann.template_id as usize % fleet.len()];

        let t0 = Instant::now();
        let table = build_inverse_atlas(template, cfg.bake.resolution);
        time("inverse_atlas", t0);

        let t0 = Instant::now();
        let baked = bake(
            &scene.image,
            template,
            coefficients,
            &ann.pose,
            &table,
            &scene.intrinsics,
            &scene.extrinsics,
            &light_from_config(cfg),
        )
        .map_err(domain)?;
        time("bake_instance", t0);

        let t0 = Instant::now();
        fill_knn(&baked, cfg.inpaint.knn_k).map_err(domain)?;
        time("inpaint_knn", t0);

        let t0 = Instant::now();
        let mut net = GraphInpaintNet::new(
            NetConfig::for_atlas_resolution(cfg.synthesize.atlas_resolution),
            derive_seed(cfg.seed, streams::NET_INIT, 0),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::NET_TRAIN, 0));
        net.train_step(&atlases[0], &mut rng, cfg.inpaint.learning_rate)
            .map_err(domain)?;
        time("net_train_step", t0);

        let t0 = Instant::now();
        let noise = cfg.noise_model(derive_seed(cfg.seed, streams::NOISE, 0));
        let cs = simulate_predictor(ann, &noise).map_err(domain)?;
        time("predictor", t0);

        let t0 = Instant::now();
        let est = ransac_pnp(
            &cs,
            &scene.intrinsics,
            &cfg.ransac_config(derive_seed(cfg.seed, streams::RANSAC, 0)),
        )
        .map_err(domain)?;
        time("ransac_pnp", t0);

        let t0 = Instant::now();
        let images: Vec<PoseEvalImage> = scenes
            .iter()
            .map(|s| {
                let truths: Vec<PoseTruth> = s
                    .annotations
                    .iter()
                    .filter(|a| !a.tiny)
                    .map(|a| PoseTruth {
                        pose: s.extrinsics.world_to_camera.compose(&a.pose),
                        dimensions: a.dimensions,
                    })
                    .collect();
                let predictions = truths
                    .iter()
                    .map(|t| PosePrediction {
                        pose: t.pose,
                        dimensions: None,
                        score: 1.0,
                    })
                    .collect();
                PoseEvalImage {
                    predictions,
                    truths,
                }
            })
            .collect();
        a3dp(&images, &cfg.a3dp_config(A3dpMode::Abs)).map_err(domain)?;
        time("metrics_a3dp", t0);

        // Touch the estimate so the optimizer cannot discard the solve.
        let _ = est.rms_reprojection;
    }

    let mut text = String::from("stage            seconds\n");
    for (name, secs) in &stages {
        text.push_str(&format!("{name:<16} {secs:9.4}\n"));
    }
    let json = serde_json::json!({
        "format": "cvis-forge-bench",
        "version": 1,
        "stages": stages
            .iter()
            .map(|(name, secs)| serde_json::json!({"name": name, "seconds": secs}))
            .collect::<Vec<_>>(),
    });
    std::fs::write(out.join("bench.txt"), &text)
        .map_err(|e| Failure::Usage(format!("cannot write bench.txt: {e}")))?;
    std::fs::write(
        out.join("bench.json"),
        serde_json::to_string_pretty(&json).expect("bench json"),
    )
    .map_err(|e| Failure::Usage(format!("cannot write bench.json: {e}")))?;
    cfg.write_manifest("bench", out)?;
    print!("{text}");
    Ok(())
}
