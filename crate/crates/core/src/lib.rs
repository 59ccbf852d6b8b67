//! Synthetic vehicle scenes with exact ground truth, and the geometry to
//! close the loop: a part-labeled morphable template is textured from real
//! images (texture baking), holes are filled by a part-graph inpainting
//! network, novel scenes are rasterized with per-pixel canonical-point maps,
//! and 6-DoF poses are recovered from those maps by RANSAC-PnP. Evaluation
//! metrics (2D mAP and joint 3D pose/shape AP) complete the pipeline.

pub mod bake;
pub mod geom;
pub mod inpaint;
pub mod metrics;
pub mod pose;
pub mod raster;
pub mod scene;
pub mod template;
