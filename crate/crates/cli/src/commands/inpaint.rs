//! `inpaint`: fill the invalid texels of a baked atlas by per-part mean
//! color, per-part k-nearest-neighbor blending, or the graph network.

use crate::commands::ensure_dir;
use crate::config::{derive_seed, streams, InpaintMethod, PipelineConfig};
use crate::{domain, Failure};
use cvis_forge_core::inpaint::{
    fill_knn, fill_pure_color, inpaint_with_net, make_procedural_atlas, GraphInpaintNet,
    NetConfig, TextureAtlas,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run(cfg: &PipelineConfig) -> Result<(), Failure> {
    let color_path = cfg
        .paths
        .atlas
        .clone()
        .ok_or_else(|| Failure::Usage("no atlas given (--atlas or paths.atlas)".into()))?;
    let mask_path = color_path.with_extension("valid.png");
    let atlas = TextureAtlas::load_png_pair(&color_path, &mask_path)
        .map_err(|e| Failure::Usage(e.to_string()))?;

    let filled = match cfg.inpaint.method {
        InpaintMethod::Pure => fill_pure_color(&atlas).map_err(domain)?,
        InpaintMethod::Knn => fill_knn(&atlas, cfg.inpaint.knn_k).map_err(domain)?,
        InpaintMethod::Net => {
            let net = obtain_net(cfg, atlas.resolution)?;
            inpaint_with_net(&net, &atlas).map_err(domain)?
        }
    };

    let out = &cfg.paths.output;
    ensure_dir(out)?;
    filled
        .save_png_pair(&out.join("atlas.png"), &out.join("atlas.valid.png"))
        .map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.write_manifest("inpaint", out)?;
    println!(
        "inpainted {} -> {} ({} of {} texels were filled)",
        color_path.display(),
        out.join("atlas.png").display(),
        atlas.valid.iter().filter(|v| !**v).count(),
        atlas.valid.len()
    );
    Ok(())
}

/// Load the network from `inpaint.weights` when the file exists; otherwise
/// train a fresh one self-supervised on seeded procedural atlases (and save
/// it there for next time, if a path was given).
fn obtain_net(cfg: &PipelineConfig, resolution: usize) -> Result<GraphInpaintNet, Failure> {
    if let Some(path) = &cfg.inpaint.weights {
        if path.exists() {
            return GraphInpaintNet::load(path).map_err(|e| Failure::Usage(e.to_string()));
        }
    }
    let net_cfg = NetConfig::for_atlas_resolution(resolution);
    let mut net = GraphInpaintNet::new(net_cfg, derive_seed(cfg.seed, streams::NET_INIT, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::NET_TRAIN, 0));
    let mut last = f64::NAN;
    for step in 0..cfg.inpaint.train_steps {
        let sample = make_procedural_atlas(
            resolution,
            derive_seed(cfg.seed, streams::NET_DATA, step as u64),
        );
        last = net
            .train_step(&sample, &mut rng, cfg.inpaint.learning_rate)
            .map_err(domain)?;
    }
    eprintln!(
        "trained inpainting net: {} steps, final loss {last:.4}",
        cfg.inpaint.train_steps
    );
    if let Some(path) = &cfg.inpaint.weights {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        net.save(path).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(net)
}
