//! Diagnostics over trained models: where prediction error concentrates,
//! how capacity demand varies along the sampling trajectory, and how much
//! per-token work the gates actually spend.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::diffusion::DiffusionSchedule;
use crate::dit::{patchify, DitModel, WidthKind};
use crate::error::{DyError, Result};
use crate::flops::group_token_flops;
use crate::numerics::Tape;
use crate::rng::{derive_seed, standard_normal};
use crate::routing::ProtectionIndex;
use crate::schedule::ArchitectureSchedule;

/// Rescale into [0, 1] by min-max. A constant input (no spread to show)
/// becomes all zeros.
pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Collapse a per-pixel object mask to per-patch: a patch counts as object
/// when at least half of its pixels are.
pub fn patch_object_mask(pixels: &[bool], extent: usize, patch: usize) -> Result<Vec<bool>> {
    if extent == 0 || patch == 0 || extent % patch != 0 {
        return Err(DyError::invalid(format!(
            "patch {patch} does not tile extent {extent}"
        )));
    }
    if pixels.len() != extent * extent {
        return Err(DyError::invalid(format!(
            "mask has {} pixels, extent {extent} wants {}",
            pixels.len(),
            extent * extent
        )));
    }
    let side = extent / patch;
    let half = patch * patch;
    let mut out = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let mut hits = 0usize;
            for dy in 0..patch {
                for dx in 0..patch {
                    if pixels[(py * patch + dy) * extent + (px * patch + dx)] {
                        hits += 1;
                    }
                }
            }
            out.push(2 * hits >= half);
        }
    }
    Ok(out)
}

fn predict(
    model: &DitModel,
    protection: Option<&ProtectionIndex>,
    xt: &[f32],
    t: usize,
    label: usize,
) -> Result<Vec<f32>> {
    match protection {
        Some(p) => {
            let widths = model.resolve_widths(t, WidthKind::Routed(p))?;
            let sliced = model.slice_blocks(&widths)?;
            Ok(model.forward_sliced(&sliced, xt, t, label)?.pred)
        }
        None => {
            let tape = Tape::off();
            Ok(model.forward_full(&tape, xt, t, label)?.data().to_vec())
        }
    }
}

/// Where the model errs on one image: per-patch squared prediction error
/// (averaged over the patch's values), min-max normalized to [0, 1].
/// `protection: Some` evaluates with routing, `None` at full width.
pub fn loss_map(
    model: &DitModel,
    diffusion: &DiffusionSchedule,
    protection: Option<&ProtectionIndex>,
    x0: &[f32],
    label: usize,
    t: usize,
    eps: &[f32],
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let xt = diffusion.q_sample(x0, t, eps)?;
    let pred = predict(model, protection, &xt, t, label)?;
    let target = patchify(eps, cfg.image_channels, cfg.extent, cfg.patch)?;
    let pd = cfg.patch_dim();
    let raw: Vec<f64> = (0..cfg.tokens())
        .map(|i| {
            (0..pd)
                .map(|j| {
                    let d = pred[i * pd + j] as f64 - target[i * pd + j] as f64;
                    d * d
                })
                .sum::<f64>()
                / pd as f64
        })
        .collect();
    Ok(min_max_normalize(&raw))
}

/// Mean denoising-loss difference (small minus large) at each timestep of
/// `t_grid`, over `range` of the dataset, both models at full width. The
/// same noise draws feed both models so the difference is paired.
pub fn loss_gap_curve(
    small: &DitModel,
    large: &DitModel,
    diffusion: &DiffusionSchedule,
    data: &Dataset,
    range: std::ops::Range<usize>,
    t_grid: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let a = &small.config;
    let b = &large.config;
    if a.extent != b.extent || a.image_channels != b.image_channels || a.patch != b.patch {
        return Err(DyError::invalid(
            "the two models must agree on image shape and patch size",
        ));
    }
    if range.start >= range.end || range.end > data.len() {
        return Err(DyError::invalid(format!(
            "evaluation range {range:?} outside the dataset (len {})",
            data.len()
        )));
    }
    let mut curve = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if t == 0 || t > diffusion.timesteps() {
            return Err(DyError::invalid(format!(
                "timestep {t} outside 1..={}",
                diffusion.timesteps()
            )));
        }
        let mut gap = 0.0;
        for i in range.clone() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let x0 = data.image_f32(i);
            let eps = standard_normal(&mut rng, a.image_len());
            let xt = diffusion.q_sample(&x0, t, &eps)?;
            let label = data.label(i) as usize;
            let target = patchify(&eps, a.image_channels, a.extent, a.patch)?;
            let ps = predict(small, None, &xt, t, label)?;
            let pl = predict(large, None, &xt, t, label)?;
            gap += mse(&ps, &target) - mse(&pl, &target);
        }
        curve.push((t, gap / range.len() as f64));
    }
    Ok(curve)
}

fn mse(pred: &[f32], target: &[f32]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum::<f64>()
        / pred.len().max(1) as f64
}

/// One row of the capacity-over-time table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationRow {
    pub t: usize,
    pub layer: usize,
    pub heads: usize,
    pub groups: usize,
}

/// Active-unit counts per (timestep, layer) of a compiled schedule, in visit
/// order. Rows = steps x layers.
pub fn activation_map(schedule: &ArchitectureSchedule) -> Result<Vec<ActivationRow>> {
    let mut rows = Vec::with_capacity(schedule.steps() * schedule.layers());
    for &t in schedule.timesteps() {
        for layer in 0..schedule.layers() {
            let c = schedule.choice(t, layer)?;
            rows.push(ActivationRow {
                t,
                layer,
                heads: c.heads.count_ones() as usize,
                groups: c.channels.count_ones() as usize,
            });
        }
    }
    Ok(rows)
}

/// Per-patch feed-forward work on one image, accumulated over every timestep
/// in `grid` and min-max normalized to [0, 1]. At each visited timestep the
/// image is re-noised (fresh draw per timestep, deterministic in `seed`),
/// routed in eval mode, and each token that a layer keeps is charged that
/// layer's active groups times the per-token group cost. Attention work is
/// identical for every token, so it cannot change the normalized shape and
/// is left out.
pub fn token_flops_map(
    model: &DitModel,
    protection: &ProtectionIndex,
    diffusion: &DiffusionSchedule,
    x0: &[f32],
    label: usize,
    grid: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    if grid.is_empty() {
        return Err(DyError::invalid("need at least one timestep"));
    }
    let per_group = group_token_flops(cfg) as f64;
    let mut raw = vec![0.0f64; cfg.tokens()];
    for &t in grid {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
        let eps = standard_normal(&mut rng, cfg.image_len());
        let xt = diffusion.q_sample(x0, t, &eps)?;
        let widths = model.resolve_widths(t, WidthKind::Routed(protection))?;
        let sliced = model.slice_blocks(&widths)?;
        let out = model.forward_sliced(&sliced, &xt, t, label)?;
        for (layer, kept) in out.token_active.iter().enumerate() {
            let groups = out.usage[layer].groups as f64;
            for (j, &on) in kept.iter().enumerate() {
                if on {
                    raw[j] += groups * per_group;
                }
            }
        }
    }
    Ok(min_max_normalize(&raw))
}
