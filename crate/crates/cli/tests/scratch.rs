//! Throwaway experiment (deleted before commit).

use cvis_forge_core::inpaint::{
    fill_pure_color, inpaint_with_net, make_procedural_atlas, GraphInpaintNet, NetConfig,
    TextureAtlas,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn mask_parts(atlas: &TextureAtlas, parts: &[u8]) -> TextureAtlas {
    let mut out = atlas.clone();
    for &part in parts {
        let (x0, y0, w, h) = out.cell_rect(part);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let i = out.index(x, y);
                out.valid[i] = false;
            }
        }
    }
    out
}

fn mae_on_masked(truth: &TextureAtlas, filled: &TextureAtlas, parts: &[u8]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for &part in parts {
        let (x0, y0, w, h) = truth.cell_rect(part);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let i = truth.index(x, y);
                for c in 0..3 {
                    sum += (truth.color[i][c] - filled.color[i][c]).abs();
                    n += 1;
                }
            }
        }
    }
    sum / n as f64
}

fn eval(net: &GraphInpaintNet) -> (f64, f64) {
    let mut net_mae = 0.0;
    let mut pure_mae = 0.0;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..20u64 {
        let truth = make_procedural_atlas(96, seed);
        let mut parts: Vec<u8> = (1..=18).collect();
        for i in (1..parts.len()).rev() {
            parts.swap(i, mask_rng.gen_range(0..=i));
        }
        let parts = &parts[..4];
        let masked = mask_parts(&truth, parts);
        net_mae += mae_on_masked(&truth, &inpaint_with_net(net, &masked).unwrap(), parts);
        pure_mae += mae_on_masked(&truth, &fill_pure_color(&masked).unwrap(), parts);
    }
    (net_mae / 20.0, pure_mae / 20.0)
}

fn run_recipe(cfg: &NetConfig, steps: usize, lr0: f64, init: u64, train: u64) {
    let t0 = Instant::now();
    let mut net = GraphInpaintNet::new(cfg.clone(), init);
    let mut rng = ChaCha8Rng::seed_from_u64(train);
    for step in 0..steps {
        let lr = lr0 * (1.0 - step as f64 / steps as f64).max(0.05);
        let atlas = make_procedural_atlas(96, 0x9000_0000 + step as u64);
        net.train_step(&atlas, &mut rng, lr).unwrap();
    }
    let train_s = t0.elapsed().as_secs_f64();
    let (net_mae, pure_mae) = eval(&net);
    println!(
        "widths {:?} steps {steps:4} lr {lr0:.2} seeds ({init},{train}): net {net_mae:6.3} pure {pure_mae:6.3}  ({})  train {train_s:.1}s",
        cfg.widths,
        if net_mae < pure_mae { "WIN" } else { "lose" },
    );
}

#[test]
fn bench_heldout() {
    let tiny = NetConfig {
        patch_w: 16,
        patch_h: 32,
        widths: [4, 4, 4, 4],
        dec_widths: [4, 4, 4],
    };
    for (init, train) in [(41, 42), (1, 2), (7, 8), (100, 200), (555, 666)] {
        run_recipe(&tiny, 400, 1.0, init, train);
    }
    for (init, train) in [(41, 42), (1, 2), (7, 8)] {
        run_recipe(&tiny, 600, 1.0, init, train);
    }
    run_recipe(&NetConfig::for_atlas_resolution(96), 400, 1.0, 41, 42);
}
