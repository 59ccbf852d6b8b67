//! Texture-atlas completion: the shared `TextureAtlas` type, two classical
//! hole-filling baselines (global-mean pure color and inverse-distance KNN),
//! and the part-graph inpainting network in [`net`].

mod net;

pub use net::{GraphInpaintNet, NetConfig, PatchBatch, DEFAULT_LEARNING_RATE};

use crate::template::{VehicleTemplate, ATLAS_COLS, ATLAS_ROWS, PART_COUNT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InpaintError {
    #[error("atlas has no valid texels")]
    NoValidTexels,
    #[error("need at least {need} valid texels, atlas has {got}")]
    InsufficientValidTexels { need: usize, got: usize },
    #[error("patch shape {got_w}x{got_h} does not match the network's {need_w}x{need_h}")]
    ShapeMismatch {
        got_w: usize,
        got_h: usize,
        need_w: usize,
        need_h: usize,
    },
    #[error("atlas resolution {0} is not aligned to the 6x3 part-cell grid")]
    MisalignedAtlas(usize),
    #[error("training needs at least 2 valid parts, atlas has {got}")]
    InsufficientValidParts { got: usize },
    #[error("bad network file: {0}")]
    BadNetworkFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
}

/// Square RGB texture atlas with a per-texel validity mask, partitioned into
/// 18 part cells on a fixed 6×3 grid (part 1 top-left, row-major).
///
/// Channels are stored as f64 in [0, 255]; quantization happens only at PNG
/// export. Texel (tx, ty) covers UV
/// [tx/R, (tx+1)/R) × [ty/R, (ty+1)/R), with v increasing downward
/// (same direction as atlas rows).
#[derive(Debug, Clone, PartialEq)]
pub struct TextureAtlas {
    pub resolution: usize,
    pub color: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl TextureAtlas {
    /// All-invalid atlas with sentinel (zero) colors.
    pub fn empty(resolution: usize) -> Self {
        assert!(resolution > 0);
        Self {
            resolution,
            color: vec![[0.0; 3]; resolution * resolution],
            valid: vec![false; resolution * resolution],
        }
    }

    #[inline]
    pub fn index(&self, tx: usize, ty: usize) -> usize {
        debug_assert!(tx < self.resolution && ty < self.resolution);
        ty * self.resolution + tx
    }

    /// Part label (1..=18) owning a texel, by texel-center position.
    pub fn texel_part(&self, tx: usize, ty: usize) -> u8 {
        let col = (tx * ATLAS_COLS / self.resolution).min(ATLAS_COLS - 1);
        let row = (ty * ATLAS_ROWS / self.resolution).min(ATLAS_ROWS - 1);
        (row * ATLAS_COLS + col) as u8 + 1
    }

    /// Texel rectangle `(x0, y0, width, height)` of a part's cell. Requires
    /// the resolution to be texel-aligned with the 6×3 grid.
    pub fn cell_rect(&self, part: u8) -> (usize, usize, usize, usize) {
        assert_eq!(
            self.resolution % ATLAS_COLS.max(ATLAS_ROWS),
            0,
            "atlas resolution {} not cell-aligned",
            self.resolution
        );
        let idx = (part - 1) as usize;
        let cw = self.resolution / ATLAS_COLS;
        let ch = self.resolution / ATLAS_ROWS;
        ((idx % ATLAS_COLS) * cw, (idx / ATLAS_COLS) * ch, cw, ch)
    }

    pub fn is_complete(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Parts that have at least one valid texel.
    pub fn valid_parts(&self) -> Vec<u8> {
        let mut any = [false; PART_COUNT];
        for ty in 0..self.resolution {
            for tx in 0..self.resolution {
                if self.valid[self.index(tx, ty)] {
                    any[(self.texel_part(tx, ty) - 1) as usize] = true;
                }
            }
        }
        (1..=PART_COUNT as u8)
            .filter(|&p| any[(p - 1) as usize])
            .collect()
    }

    /// Bilinear sample at UV, with the taps confined to `part`'s cell: the
    /// sample position is clamped half a texel inside the cell so no foreign
    /// part's texels bleed across cell borders.
    pub fn sample_bilinear_in_part(&self, part: u8, u: f64, v: f64) -> [f64; 3] {
        let (u0, v0, u1, v1) = VehicleTemplate::atlas_cell(part);
        let half = 0.5 / self.resolution as f64;
        let u = u.clamp(u0 + half, u1 - half);
        let v = v.clamp(v0 + half, v1 - half);
        // Texel centers sit at (t + 0.5) / R.
        let x = u * self.resolution as f64 - 0.5;
        let y = v * self.resolution as f64 - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as usize, y0 as usize);
        // When the clamp lands exactly on the last texel center the far taps
        // have zero weight; pin them in range instead of reading past the
        // grid.
        let x1 = (x0 + 1).min(self.resolution - 1);
        let y1 = (y0 + 1).min(self.resolution - 1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let c00 = self.color[self.index(x0, y0)][c];
            let c10 = self.color[self.index(x1, y0)][c];
            let c01 = self.color[self.index(x0, y1)][c];
            let c11 = self.color[self.index(x1, y1)][c];
            out[c] = c00 * (1.0 - fx) * (1.0 - fy)
                + c10 * fx * (1.0 - fy)
                + c01 * (1.0 - fx) * fy
                + c11 * fx * fy;
        }
        out
    }

    /// The four texels a bilinear sample at (u, v) in `part` would read.
    pub fn bilinear_taps(&self, part: u8, u: f64, v: f64) -> [(usize, usize); 4] {
        let (u0, v0, u1, v1) = VehicleTemplate::atlas_cell(part);
        let half = 0.5 / self.resolution as f64;
        let u = u.clamp(u0 + half, u1 - half);
        let v = v.clamp(v0 + half, v1 - half);
        let x0 = (u * self.resolution as f64 - 0.5).floor() as usize;
        let y0 = (v * self.resolution as f64 - 0.5).floor() as usize;
        let x1 = (x0 + 1).min(self.resolution - 1);
        let y1 = (y0 + 1).min(self.resolution - 1);
        [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
    }

    /// Export as a color PNG plus an 8-bit mask PNG (255 = valid).
    pub fn save_png_pair(&self, color_path: &Path, mask_path: &Path) -> Result<(), InpaintError> {
        let r = self.resolution as u32;
        let mut rgb = image::RgbImage::new(r, r);
        let mut mask = image::GrayImage::new(r, r);
        for ty in 0..self.resolution {
            for tx in 0..self.resolution {
                let i = self.index(tx, ty);
                let c = self.color[i];
                rgb.put_pixel(
                    tx as u32,
                    ty as u32,
                    image::Rgb([
                        c[0].round().clamp(0.0, 255.0) as u8,
                        c[1].round().clamp(0.0, 255.0) as u8,
                        c[2].round().clamp(0.0, 255.0) as u8,
                    ]),
                );
                mask.put_pixel(
                    tx as u32,
                    ty as u32,
                    image::Luma([if self.valid[i] { 255 } else { 0 }]),
                );
            }
        }
        rgb.save(color_path)?;
        mask.save(mask_path)?;
        Ok(())
    }

    pub fn load_png_pair(color_path: &Path, mask_path: &Path) -> Result<Self, InpaintError> {
        let rgb = image::open(color_path)?.into_rgb8();
        let mask = image::open(mask_path)?.into_luma8();
        if rgb.dimensions() != mask.dimensions() || rgb.width() != rgb.height() {
            return Err(InpaintError::BadNetworkFile(format!(
                "atlas/mask dimensions mismatch: {:?} vs {:?}",
                rgb.dimensions(),
                mask.dimensions()
            )));
        }
        let resolution = rgb.width() as usize;
        let mut atlas = TextureAtlas::empty(resolution);
        for ty in 0..resolution {
            for tx in 0..resolution {
                let i = atlas.index(tx, ty);
                let p = rgb.get_pixel(tx as u32, ty as u32).0;
                atlas.color[i] = [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])];
                atlas.valid[i] = mask.get_pixel(tx as u32, ty as u32).0[0] >= 128;
            }
        }
        Ok(atlas)
    }
}

/// Fill every invalid texel with the global mean of the valid texels.
pub fn fill_pure_color(atlas: &TextureAtlas) -> Result<TextureAtlas, InpaintError> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (c, &ok) in atlas.color.iter().zip(&atlas.valid) {
        if ok {
            for ch in 0..3 {
                sum[ch] += c[ch];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(InpaintError::NoValidTexels);
    }
    let mean = [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64];
    let mut out = atlas.clone();
    for (c, ok) in out.color.iter_mut().zip(&mut out.valid) {
        if !*ok {
            *c = mean;
            *ok = true;
        }
    }
    Ok(out)
}

/// Fill every invalid texel with the inverse-distance-weighted mean of its
/// `k` nearest valid texels (Euclidean distance between texel coordinates,
/// ties broken by row-major index).
pub fn fill_knn(atlas: &TextureAtlas, k: usize) -> Result<TextureAtlas, InpaintError> {
    assert!(k > 0, "k must be positive");
    let r = atlas.resolution;
    let valid_texels: Vec<(usize, usize, usize)> = (0..r * r)
        .filter(|&i| atlas.valid[i])
        .map(|i| (i % r, i / r, i))
        .collect();
    if valid_texels.len() < k {
        return Err(InpaintError::InsufficientValidTexels {
            need: k,
            got: valid_texels.len(),
        });
    }
    let mut out = atlas.clone();
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(valid_texels.len());
    for ty in 0..r {
        for tx in 0..r {
            let i = atlas.index(tx, ty);
            if atlas.valid[i] {
                continue;
            }
            scratch.clear();
            scratch.extend(valid_texels.iter().map(|&(vx, vy, vi)| {
                let dx = vx as f64 - tx as f64;
                let dy = vy as f64 - ty as f64;
                (dx * dx + dy * dy, vi)
            }));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            };
            if scratch.len() > k {
                scratch.select_nth_unstable_by(k - 1, cmp);
                scratch.truncate(k);
            }
            let mut acc = [0.0f64; 3];
            let mut wsum = 0.0;
            for &(d2, vi) in scratch.iter() {
                let w = 1.0 / d2.sqrt();
                wsum += w;
                for ch in 0..3 {
                    acc[ch] += w * atlas.color[vi][ch];
                }
            }
            out.color[i] = [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum];
            out.valid[i] = true;
        }
    }
    Ok(out)
}

/// Replace invalid texels with the network's decoded predictions (clamped to
/// [0, 255]); valid texels are preserved verbatim and the mask becomes fully
/// valid.
pub fn inpaint_with_net(
    net: &GraphInpaintNet,
    atlas: &TextureAtlas,
) -> Result<TextureAtlas, InpaintError> {
    let patches = net.graph_forward(atlas)?;
    let mut out = atlas.clone();
    for part in 1..=PART_COUNT as u8 {
        let (x0, y0, cw, ch) = atlas.cell_rect(part);
        let patch = &patches[(part - 1) as usize];
        for py in 0..ch {
            for px in 0..cw {
                let i = out.index(x0 + px, y0 + py);
                if !out.valid[i] {
                    for c in 0..3 {
                        out.color[i][c] = (patch[c][py * cw + px] * 255.0).clamp(0.0, 255.0);
                    }
                    out.valid[i] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Fixed per-part color modulation used by the procedural texture generator:
/// deterministic in the part label only, so every generated atlas shares the
/// same part "identity" (what the per-part decoders can learn).
fn part_modulation(part: u8) -> [f64; 3] {
    let p = f64::from(part);
    [
        0.75 + 0.45 * ((p * 0.71).sin() * 0.5 + 0.5),
        0.75 + 0.45 * ((p * 1.13 + 0.4).sin() * 0.5 + 0.5),
        0.75 + 0.45 * ((p * 0.37 + 1.1).sin() * 0.5 + 0.5),
    ]
}

/// Deterministic synthetic vehicle texture: a per-atlas base paint color with
/// a strong fixed per-part modulation (body vs. glass vs. trim) and a gentle
/// per-part linear gradient across each cell. Fully valid. Paint varies
/// moderately across atlases; the dominant appearance signal is which part a
/// texel belongs to.
pub fn make_procedural_atlas(resolution: usize, seed: u64) -> TextureAtlas {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = [
        rng.gen_range(112.0..148.0),
        rng.gen_range(112.0..148.0),
        rng.gen_range(112.0..148.0),
    ];
    let mut atlas = TextureAtlas::empty(resolution);
    let grad: Vec<[f64; 2]> = (0..PART_COUNT)
        .map(|_| [rng.gen_range(-22.0..22.0), rng.gen_range(-22.0..22.0)])
        .collect();
    for ty in 0..resolution {
        for tx in 0..resolution {
            let part = atlas.texel_part(tx, ty);
            let m = part_modulation(part);
            let (u0, v0, u1, v1) = VehicleTemplate::atlas_cell(part);
            let u = (tx as f64 + 0.5) / resolution as f64;
            let v = (ty as f64 + 0.5) / resolution as f64;
            let fu = (u - u0) / (u1 - u0) - 0.5;
            let fv = (v - v0) / (v1 - v0) - 0.5;
            let g = &grad[(part - 1) as usize];
            let i = atlas.index(tx, ty);
            for c in 0..3 {
                atlas.color[i][c] = (base[c] * m[c] + g[0] * fu + g[1] * fv).clamp(8.0, 247.0);
            }
            atlas.valid[i] = true;
        }
    }
    atlas
}
