//! `gen-template`: write a procedural vehicle mesh (with PCA sidecar).

use crate::commands::ensure_dir;
use crate::config::{derive_seed, streams, PipelineConfig};
use crate::Failure;
use cvis_forge_core::template::{make_procedural_template, save_mesh};

pub fn run(cfg: &PipelineConfig) -> Result<(), Failure> {
    let out = cfg
        .gen_template
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.output.join("template.obj"));
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        ensure_dir(dir)?;
    }
    let template = make_procedural_template(derive_seed(cfg.seed, streams::TEMPLATE, 0));
    save_mesh(&template, &out).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(dir) = parent {
        cfg.write_manifest("gen-template", dir)?;
    }
    println!(
        "wrote {} ({} vertices, {} triangles, {} components)",
        out.display(),
        template.vertices.len(),
        template.triangles.len(),
        template.component_count
    );
    Ok(())
}
