//! RANSAC around the EPnP minimal solver with adaptive iteration count and
//! a final refit + Gauss-Newton polish over the consensus set.
//!
//! The estimate is invariant to the input ordering: correspondences are
//! first brought into a canonical value order and the sampler works on that
//! ordering, so permuting the input permutes `inlier_mask` but leaves the
//! pose and statistics bitwise unchanged.

use super::epnp::solve_minimal;
use super::refine::refine_pose;
use super::{
    reprojection_errors, CorrespondenceSet, PoseError, PoseEstimate, RansacConfig,
};
use crate::geom::CameraIntrinsics;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Consensus counts below this are reported as failure rather than a pose.
const MIN_CONSENSUS: usize = 6;

pub fn ransac_pnp(
    cs: &CorrespondenceSet,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate, PoseError> {
    let n = cs.len();
    if n < MIN_CONSENSUS {
        return Err(PoseError::TooFewPoints {
            got: n,
            needed: MIN_CONSENSUS,
        });
    }
    assert!(cfg.min_sample >= 4, "EPnP needs at least 4 points");
    assert!(cfg.inlier_threshold > 0.0);
    assert!((0.0..1.0).contains(&cfg.confidence) || cfg.confidence == 0.99 || cfg.confidence < 1.0);

    // Canonical order: sort indices by correspondence value, then shuffle
    // with the seeded generator. Identical sets in any order now expose the
    // same sequence to the sampler.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        cs.pixels[a]
            .x
            .total_cmp(&cs.pixels[b].x)
            .then(cs.pixels[a].y.total_cmp(&cs.pixels[b].y))
            .then(cs.points[a].x.total_cmp(&cs.points[b].x))
            .then(cs.points[a].y.total_cmp(&cs.points[b].y))
            .then(cs.points[a].z.total_cmp(&cs.points[b].z))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);

    let mut best_count = 0usize;
    let mut best_pose = None;
    let mut max_iters = cfg.iterations;
    let mut it = 0usize;
    while it < max_iters {
        it += 1;
        let sample: Vec<usize> = rand::seq::index::sample(&mut rng, n, cfg.min_sample)
            .iter()
            .map(|i| order[i])
            .collect();
        let Ok(pose) = solve_minimal(&cs.subset(&sample), k) else {
            continue;
        };
        let count = reprojection_errors(&pose, cs, k)
            .iter()
            .filter(|&&e| e < cfg.inlier_threshold)
            .count();
        if count > best_count {
            best_count = count;
            best_pose = Some(pose);
            // Adaptive stopping: enough iterations to hit an all-inlier
            // sample with the requested confidence.
            let w = count as f64 / n as f64;
            let p_good = w.powi(cfg.min_sample as i32);
            if p_good >= 1.0 - 1e-12 {
                break;
            }
            let needed = ((1.0 - cfg.confidence).ln() / (1.0 - p_good).ln()).ceil();
            if needed.is_finite() && needed >= 0.0 {
                max_iters = max_iters.min((needed as usize).max(it));
            }
        }
    }

    if best_count < MIN_CONSENSUS {
        return Err(PoseError::NoConsensus { best: best_count });
    }
    let minimal_pose = best_pose.expect("consensus implies a pose");

    // Refit on the consensus set (canonical order keeps this permutation-
    // invariant), then polish.
    let errors = reprojection_errors(&minimal_pose, cs, k);
    let consensus: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| errors[i] < cfg.inlier_threshold)
        .collect();
    let refit = super::epnp::pnp_epnp(&cs.subset(&consensus), k).unwrap_or(minimal_pose);
    let pose = refine_pose(refit, &cs.subset(&consensus), k);

    // Reclassify against the polished pose; fall back to the consensus mask
    // if polishing somehow lost support.
    let final_errors = reprojection_errors(&pose, cs, k);
    let final_count = final_errors
        .iter()
        .filter(|&&e| e < cfg.inlier_threshold)
        .count();
    let inlier_mask: Vec<bool> = if final_count >= MIN_CONSENSUS {
        final_errors
            .iter()
            .map(|&e| e < cfg.inlier_threshold)
            .collect()
    } else {
        let set: std::collections::HashSet<usize> = consensus.iter().copied().collect();
        (0..n).map(|i| set.contains(&i)).collect()
    };

    // Accumulate in canonical order so the statistic is bitwise identical
    // for any input permutation.
    let mut sum = 0.0;
    let mut count = 0usize;
    for &i in &order {
        if inlier_mask[i] && final_errors[i].is_finite() {
            sum += final_errors[i] * final_errors[i];
            count += 1;
        }
    }
    let rms_reprojection = if count > 0 {
        (sum / count as f64).sqrt()
    } else {
        f64::INFINITY
    };

    Ok(PoseEstimate {
        pose,
        inlier_mask,
        rms_reprojection,
        iterations_used: it,
    })
}
