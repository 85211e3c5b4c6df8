//! Batched image synthesis with interchangeable width sources.
//!
//! The denoising loop slices the model once per visited timestep and reuses
//! the sliced weights for every sample in the batch, so the per-step setup
//! cost is amortized. Width decisions can come from a precompiled schedule,
//! from running the routers live, or from keeping every unit on; the first
//! two produce bit-identical images because the schedule stores exactly the
//! decisions the routers make. With a schedule, every step's slices are
//! materialized up front, so the loop runs no routers at all.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{cfg_combine, ddim_timesteps, DiffusionSchedule};
use crate::dit::{DitModel, SlicedBlock, WidthKind};
use crate::error::{DyError, Result};
use crate::flops::{FlopsReport, LayerRow};
use crate::rng::{derive_seed, standard_normal};
use crate::routing::ProtectionIndex;
use crate::schedule::ArchitectureSchedule;

/// Where per-timestep width decisions come from.
#[derive(Clone, Copy)]
pub enum WidthSource<'a> {
    /// Replay a precompiled schedule (validated against the model).
    Compiled(&'a ArchitectureSchedule),
    /// Run the width routers at every step.
    Live(&'a ProtectionIndex),
    /// Keep every unit on.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Ancestral sampling; visits every timestep of the diffusion.
    Ddpm,
    /// Deterministic sampling over an evenly strided sub-grid.
    Ddim { steps: usize },
}

impl SamplerKind {
    /// The timesteps this sampler visits, in visit order.
    pub fn grid(&self, diffusion: &DiffusionSchedule) -> Result<Vec<usize>> {
        match *self {
            SamplerKind::Ddpm => Ok((1..=diffusion.timesteps()).rev().collect()),
            SamplerKind::Ddim { steps } => ddim_timesteps(diffusion.timesteps(), steps),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerOptions {
    pub kind: SamplerKind,
    /// Guidance weight; exactly 1.0 skips the unconditional branch.
    pub guidance: f64,
    pub seed: u64,
}

#[derive(Debug)]
pub struct SampleOutput {
    /// One synthesized image per requested label, channel-planar.
    pub images: Vec<Vec<f32>>,
    /// Per-(timestep, layer) matmul cost of the run.
    pub flops: FlopsReport,
}

/// Denoise one batch from pure noise down to images.
///
/// Sample `i` draws all of its noise from a generator keyed on
/// `(seed, i)`, so its output does not depend on the rest of the batch.
pub fn sample(
    model: &DitModel,
    diffusion: &DiffusionSchedule,
    width: WidthSource,
    labels: &[u16],
    opts: &SamplerOptions,
) -> Result<SampleOutput> {
    if labels.is_empty() {
        return Err(DyError::invalid("sample: need at least one label"));
    }
    if !opts.guidance.is_finite() {
        return Err(DyError::invalid("sample: guidance must be finite"));
    }
    for &l in labels {
        if l as usize >= model.config.classes {
            return Err(DyError::invalid(format!(
                "sample: label {l} outside [0, {})",
                model.config.classes
            )));
        }
    }
    // (t, t_prev) in descending t order; t_prev only matters for Ddim.
    let grid = opts.kind.grid(diffusion)?;
    let pairs: Vec<(usize, usize)> = match opts.kind {
        SamplerKind::Ddpm => grid.iter().map(|&t| (t, t - 1)).collect(),
        SamplerKind::Ddim { .. } => grid
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, grid.get(i + 1).copied().unwrap_or(0)))
            .collect(),
    };

    // Per-step width choices, and (for a schedule) all slices up front.
    let mut step_widths: Vec<Vec<(Vec<usize>, Vec<usize>)>> = Vec::with_capacity(grid.len());
    let pre_sliced: Option<Vec<Vec<SlicedBlock>>> = match width {
        WidthSource::Compiled(s) => {
            s.check_model(model)?;
            s.covers(&grid)?;
            let mut all = Vec::with_capacity(grid.len());
            for &t in &grid {
                let widths = s.active_units(t)?;
                all.push(model.slice_blocks(&widths)?);
                step_widths.push(widths);
            }
            Some(all)
        }
        WidthSource::Live(p) => {
            for &t in &grid {
                step_widths.push(model.resolve_widths(t, WidthKind::Routed(p))?);
            }
            None
        }
        WidthSource::Full => {
            for &t in &grid {
                step_widths.push(model.resolve_widths(t, WidthKind::Static)?);
            }
            None
        }
    };

    let n = model.config.image_len();
    let layers = model.config.layers;
    let mut rngs: Vec<ChaCha8Rng> = (0..labels.len())
        .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, i as u64)))
        .collect();
    let mut states: Vec<Vec<f32>> = rngs.iter_mut().map(|r| standard_normal(r, n)).collect();

    let mut rows: Vec<LayerRow> = Vec::with_capacity(grid.len() * layers);
    for (idx, &(t, t_prev)) in pairs.iter().enumerate() {
        let owned;
        let sliced: &[SlicedBlock] = match &pre_sliced {
            Some(all) => &all[idx],
            None => {
                owned = model.slice_blocks(&step_widths[idx])?;
                &owned
            }
        };
        let mut tokens = vec![0u64; layers];
        let mut evals = 0u64;
        let run = |x: &[f32], label: usize, tokens: &mut [u64], evals: &mut u64| {
            let out = model.forward_sliced(sliced, x, t, label)?;
            *evals += 1;
            for (acc, u) in tokens.iter_mut().zip(&out.usage) {
                *acc += u.tokens as u64;
            }
            Ok::<_, DyError>(out.pred)
        };
        for (i, x) in states.iter_mut().enumerate() {
            let cond = run(x, labels[i] as usize, &mut tokens, &mut evals)?;
            let eps = if opts.guidance == 1.0 {
                cond
            } else {
                let uncond = run(x, model.null_class(), &mut tokens, &mut evals)?;
                cfg_combine(&cond, &uncond, opts.guidance)?
            };
            *x = match opts.kind {
                SamplerKind::Ddpm => {
                    // The final step is deterministic and takes no draw, so
                    // earlier draws in each stream are unaffected.
                    let z = if t == 1 {
                        vec![0.0; n]
                    } else {
                        standard_normal(&mut rngs[i], n)
                    };
                    diffusion.ddpm_step(x, &eps, t, &z)?
                }
                SamplerKind::Ddim { .. } => diffusion.ddim_step(x, &eps, t, t_prev)?,
            };
        }
        for (layer, (h, g)) in step_widths[idx].iter().enumerate() {
            rows.push(LayerRow::priced(
                &model.config,
                t,
                layer,
                h.len(),
                g.len(),
                tokens[layer],
                evals,
            ));
        }
    }
    Ok(SampleOutput {
        images: states,
        flops: FlopsReport { rows },
    })
}

/// One untimed warmup call, then five timed calls; returns the median.
pub fn median_runtime<F: FnMut() -> Result<()>>(mut f: F) -> Result<Duration> {
    f()?;
    let mut times = Vec::with_capacity(5);
    for _ in 0..5 {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed());
    }
    times.sort();
    Ok(times[2])
}
