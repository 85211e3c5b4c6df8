//! End-to-end training of the gated denoiser under a compute budget.
//!
//! Each step draws a batch by epoch-shuffled position, noises each image at
//! a uniform timestep, runs the dense gated forward pass, and minimizes
//! `L = L_denoise + (ratio - lambda)^2`, where `ratio` is the batch-mean
//! hard cost ratio built from the gate sums (its gradient reaches only the
//! routers, via the budget twins). During warmup an additional full-width
//! denoising term keeps the backbone healthy while the gates settle; it
//! vanishes exactly at `warmup_steps`.
//!
//! Determinism: every random draw a step makes comes from a generator keyed
//! on `(seed, step)`, and batch order comes from per-epoch permutations keyed
//! on `(seed, epoch)`, so a resumed run retraces the original bit for bit.
//!
//! A non-finite loss aborts that step: parameters and optimizer state stay
//! untouched, the step index advances, a diagnostic is logged, and training
//! continues.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::diffusion::DiffusionSchedule;
use crate::dit::{patchify, DitModel, ModelConfig, WidthKind};
use crate::error::{DyError, Result};
use crate::flops::{budget_loss, ratio_tensor};
use crate::numerics::{read_f64, read_tensor_record, read_u32, read_u64, write_tensor_record, Tape, Tensor};
use crate::rng::{derive_seed, standard_normal};
use crate::routing::ProtectionIndex;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Decay of the running estimate of the hard cost ratio.
pub const EMA_DECAY: f64 = 0.99;
/// Stream salt separating epoch-shuffle draws from per-step draws.
const SHUFFLE_SALT: u64 = 0x5348_5546_4C45_5221;

const CHECKPOINT_MAGIC: &[u8; 4] = b"DYDT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Width and token gating active, budget loss applied.
    Dynamic,
    /// Every unit always on; no routing, no budget loss.
    Static,
}

/// Hyperparameters of one training run. Optimizer constants (Adam betas,
/// epsilon, EMA decay) are fixed, not configurable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Target cost ratio in (0, 1].
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    /// Steps with the extra full-width loss term; must be <= steps.
    pub warmup_steps: usize,
    /// Probability a label is replaced by the null class.
    pub label_drop: f64,
    /// Relaxation temperature for the gate noise.
    pub temperature: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn defaults(mode: TrainMode, steps: usize, seed: u64) -> Self {
        TrainConfig {
            mode,
            lambda: 0.5,
            lr: 1e-4,
            batch: 8,
            steps,
            warmup_steps: steps / 10,
            label_drop: 0.1,
            temperature: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DyError::invalid(msg));
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return fail(format!("lambda {} outside (0, 1]", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive and finite", self.lr));
        }
        if self.batch == 0 {
            return fail("batch must be positive".into());
        }
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if self.warmup_steps > self.steps {
            return fail(format!(
                "warmup_steps {} exceed steps {}",
                self.warmup_steps, self.steps
            ));
        }
        if !(0.0..=1.0).contains(&self.label_drop) {
            return fail(format!("label_drop {} outside [0, 1]", self.label_drop));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }
}

/// What one step produced (already applied, unless `skipped`).
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    /// 1-based index of the step just taken.
    pub step: usize,
    pub l_dit: f64,
    pub l_flops: f64,
    /// Warmup full-width term, while active.
    pub l_dit_complete: Option<f64>,
    /// Batch-mean hard cost ratio of this step's forward passes.
    pub ratio: f64,
    /// True when a non-finite loss aborted the update.
    pub skipped: bool,
}

/// Model, optimizer state, and progress counters for one run.
pub struct Trainer {
    pub model: DitModel,
    pub diffusion: DiffusionSchedule,
    pub config: TrainConfig,
    pub protection: ProtectionIndex,
    step: usize,
    ema_ratio: f64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

/// The deterministic sample order within one epoch.
fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ SHUFFLE_SALT, epoch));
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

impl Trainer {
    /// Protected units are ranked once, from the initial weights, before any
    /// budget pressure exists.
    pub fn new(model: DitModel, diffusion: DiffusionSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let protection = model.rank_protection()?;
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        for (name, t) in model.named_params() {
            m.insert(name.clone(), vec![0.0f32; t.numel()]);
            v.insert(name, vec![0.0f32; t.numel()]);
        }
        Ok(Trainer {
            model,
            diffusion,
            config,
            protection,
            step: 0,
            ema_ratio: 1.0,
            m,
            v,
        })
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Running estimate of the hard cost ratio.
    pub fn ema_ratio(&self) -> f64 {
        self.ema_ratio
    }

    /// The batch for a given 0-based step: epoch-shuffled positions computed
    /// from the absolute step index, so resumption needs no shuffle state.
    fn batch_indices(&self, data_len: usize, step: usize) -> Vec<usize> {
        let b = self.config.batch;
        let mut perms: HashMap<u64, Vec<usize>> = HashMap::new();
        (0..b)
            .map(|j| {
                let g = (step * b + j) as u64;
                let epoch = g / data_len as u64;
                let pos = (g % data_len as u64) as usize;
                perms
                    .entry(epoch)
                    .or_insert_with(|| epoch_permutation(self.config.seed, epoch, data_len))[pos]
            })
            .collect()
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let cfg = &self.model.config;
        if data.len() == 0 {
            return Err(DyError::invalid("training data is empty"));
        }
        if data.channels() != cfg.image_channels || data.extent() != cfg.extent {
            return Err(DyError::invalid(format!(
                "data is {}x{}x{} but the model wants {}x{}x{}",
                data.channels(),
                data.extent(),
                data.extent(),
                cfg.image_channels,
                cfg.extent,
                cfg.extent
            )));
        }
        if data.classes() > cfg.classes {
            return Err(DyError::invalid(format!(
                "data has {} classes, model only {}",
                data.classes(),
                cfg.classes
            )));
        }
        Ok(())
    }

    /// Take one optimization step. Returns what happened; errors are
    /// structural (shape mismatches), not numerical.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepReport> {
        self.check_data(data)?;
        let cfg = self.model.config;
        let t_max = self.diffusion.timesteps();
        let indices = self.batch_indices(data.len(), self.step);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, self.step as u64));
        let warm = self.config.mode == TrainMode::Dynamic && self.step < self.config.warmup_steps;

        let tape = Tape::grad();
        let mut fit_terms: Vec<Tensor> = Vec::with_capacity(indices.len());
        let mut ratio_terms: Vec<Tensor> = Vec::with_capacity(indices.len());
        let mut warm_terms: Vec<Tensor> = Vec::new();
        for &idx in &indices {
            let x0 = data.image_f32(idx);
            let t = rng.random_range(1..=t_max);
            let eps = standard_normal(&mut rng, cfg.image_len());
            let dropped = rng.random_range(0.0f64..1.0) < self.config.label_drop;
            let label = if dropped {
                self.model.null_class()
            } else {
                data.label(idx) as usize
            };
            let xt = self.diffusion.q_sample(&x0, t, &eps)?;
            let target = Tensor::from_vec(
                &[cfg.tokens(), cfg.patch_dim()],
                patchify(&eps, cfg.image_channels, cfg.extent, cfg.patch)?,
            )?;
            match self.config.mode {
                TrainMode::Dynamic => {
                    let out = self.model.forward_train(
                        &tape,
                        &xt,
                        t,
                        label,
                        &self.protection,
                        Some(&mut rng),
                        self.config.temperature,
                    )?;
                    fit_terms.push(tape.mean_squared_error(&out.pred, &target)?);
                    ratio_terms.push(ratio_tensor(&tape, &cfg, &out.usage)?);
                    if warm {
                        let full = self.model.forward_full(&tape, &xt, t, label)?;
                        warm_terms.push(tape.mean_squared_error(&full, &target)?);
                    }
                }
                TrainMode::Static => {
                    let pred = self.model.forward_full(&tape, &xt, t, label)?;
                    fit_terms.push(tape.mean_squared_error(&pred, &target)?);
                }
            }
        }

        let mean_of = |tape: &Tape, terms: &[Tensor]| -> Result<Tensor> {
            let mut acc = terms[0].clone();
            for t in &terms[1..] {
                acc = tape.add(&acc, t)?;
            }
            tape.scale(&acc, 1.0 / terms.len() as f64)
        };

        let l_dit = mean_of(&tape, &fit_terms)?;
        let mut total = l_dit.clone();
        let (l_flops_val, ratio_val) = match self.config.mode {
            TrainMode::Dynamic => {
                let ratio = mean_of(&tape, &ratio_terms)?;
                let l_flops = budget_loss(&tape, &ratio, self.config.lambda)?;
                total = tape.add(&total, &l_flops)?;
                (l_flops.item()? as f64, ratio.item()? as f64)
            }
            TrainMode::Static => (0.0, 1.0),
        };
        let l_complete_val = if warm && !warm_terms.is_empty() {
            let w = mean_of(&tape, &warm_terms)?;
            total = tape.add(&total, &w)?;
            Some(w.item()? as f64)
        } else {
            None
        };
        let l_dit_val = l_dit.item()? as f64;
        let total_val = total.item()? as f64;

        self.step += 1;
        let report = StepReport {
            step: self.step,
            l_dit: l_dit_val,
            l_flops: l_flops_val,
            l_dit_complete: l_complete_val,
            ratio: ratio_val,
            skipped: !total_val.is_finite(),
        };
        if report.skipped {
            return Ok(report);
        }

        let grads = tape.reverse_accumulate(&total)?;
        let tstep = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(tstep);
        let bc2 = 1.0 - ADAM_BETA2.powf(tstep);
        let mut updated: Vec<(String, Tensor)> = Vec::new();
        for (name, param) in self.model.named_params() {
            let zeros;
            let g: &[f32] = match grads.get(&param) {
                Some(g) => g.data(),
                None => {
                    zeros = vec![0.0f32; param.numel()];
                    &zeros
                }
            };
            let m = self.m.get_mut(&name).expect("moment state");
            let v = self.v.get_mut(&name).expect("moment state");
            let mut next = Vec::with_capacity(param.numel());
            for i in 0..param.numel() {
                let gi = g[i] as f64;
                let mi = (ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi) as f32;
                let vi = (ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi) as f32;
                m[i] = mi;
                v[i] = vi;
                let mhat = mi as f64 / bc1;
                let vhat = vi as f64 / bc2;
                let delta = self.config.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                next.push((param.data()[i] as f64 - delta) as f32);
            }
            updated.push((
                name,
                Tensor::from_vec(param.shape(), next)?.with_requires_grad(true),
            ));
        }
        let mut by_name: HashMap<String, Tensor> =
            updated.into_iter().collect();
        for (name, slot) in self.model.named_params_mut() {
            *slot = by_name.remove(&name).expect("updated parameter");
        }
        self.ema_ratio = EMA_DECAY * self.ema_ratio + (1.0 - EMA_DECAY) * ratio_val;
        Ok(report)
    }

    /// Run until `config.steps`, writing one tab-separated line per step:
    /// `step  L_DiT  L_FLOPs  ratio`. Skipped steps log a `#` diagnostic.
    pub fn run<W: Write>(&mut self, data: &Dataset, log: &mut W) -> Result<()> {
        while self.step < self.config.steps {
            let r = self.train_step(data)?;
            if r.skipped {
                writeln!(log, "# step {} skipped: non-finite loss", r.step)?;
            } else {
                writeln!(
                    log,
                    "{}\t{:.6}\t{:.6}\t{:.6}",
                    r.step, r.l_dit, r.l_flops, r.ratio
                )?;
            }
        }
        Ok(())
    }

    // ---- checkpointing ------------------------------------------------------

    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = &self.model.config;
        for v in [
            cfg.layers,
            cfg.channels,
            cfg.heads,
            cfg.patch,
            cfg.extent,
            cfg.image_channels,
            cfg.classes,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(self.diffusion.timesteps() as u32).to_le_bytes())?;
        w.write_all(&self.diffusion.beta_start().to_le_bytes())?;
        w.write_all(&self.diffusion.beta_end().to_le_bytes())?;
        let mode = match self.config.mode {
            TrainMode::Static => 0u32,
            TrainMode::Dynamic => 1u32,
        };
        w.write_all(&mode.to_le_bytes())?;
        w.write_all(&self.config.lambda.to_le_bytes())?;
        w.write_all(&(self.step as u64).to_le_bytes())?;
        w.write_all(&self.ema_ratio.to_le_bytes())?;
        for i in 0..cfg.layers {
            w.write_all(&(self.protection.heads[i] as u32).to_le_bytes())?;
            w.write_all(&(self.protection.groups[i] as u32).to_le_bytes())?;
        }
        let params = self.model.named_params();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for (name, t) in &params {
            write_tensor_record(&mut w, name, t)?;
        }
        for (name, t) in &params {
            let m = Tensor::from_vec(t.shape(), self.m[name].clone())?;
            write_tensor_record(&mut w, &format!("opt.m.{name}"), &m)?;
        }
        for (name, t) in &params {
            let v = Tensor::from_vec(t.shape(), self.v[name].clone())?;
            write_tensor_record(&mut w, &format!("opt.v.{name}"), &v)?;
        }
        Ok(())
    }

    pub fn save_checkpoint_path(&self, path: &Path) -> Result<()> {
        self.save_checkpoint(std::fs::File::create(path)?)
    }

    /// Rebuild a trainer from decoded checkpoint contents. `config` must
    /// agree with the stored mode and lambda. The returned trainer continues
    /// the original trajectory bit for bit.
    pub fn from_checkpoint(data: CheckpointData, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.mode != config.mode {
            return Err(DyError::ConfigMismatch {
                field: "mode",
                expected: format!("{:?}", data.mode),
                found: format!("{:?}", config.mode),
            });
        }
        if data.lambda != config.lambda {
            return Err(DyError::ConfigMismatch {
                field: "lambda",
                expected: data.lambda.to_string(),
                found: config.lambda.to_string(),
            });
        }
        Ok(Trainer {
            model: data.model,
            diffusion: data.diffusion,
            config,
            protection: data.protection,
            step: data.step,
            ema_ratio: data.ema_ratio,
            m: data.m,
            v: data.v,
        })
    }

    /// [`read_checkpoint`] followed by [`Trainer::from_checkpoint`].
    pub fn load_checkpoint<R: Read>(
        r: R,
        config: TrainConfig,
        expect: Option<&ModelConfig>,
    ) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(r, expect)?, config)
    }

    pub fn load_checkpoint_path(
        path: &Path,
        config: TrainConfig,
        expect: Option<&ModelConfig>,
    ) -> Result<Self> {
        Self::load_checkpoint(std::fs::File::open(path)?, config, expect)
    }
}

/// Everything a checkpoint stores, decoded. Tools that only need the model
/// (schedule compilation, sampling, analysis) use this directly instead of
/// reconstructing a [`Trainer`].
pub struct CheckpointData {
    pub model: DitModel,
    pub diffusion: DiffusionSchedule,
    pub mode: TrainMode,
    pub lambda: f64,
    pub step: usize,
    pub ema_ratio: f64,
    pub protection: ProtectionIndex,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

/// Decode a checkpoint. `expect` (when given) must match the stored model
/// shape field by field.
pub fn read_checkpoint<R: Read>(mut r: R, expect: Option<&ModelConfig>) -> Result<CheckpointData> {
    let fail = |msg: String| DyError::format("checkpoint", msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fail(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 7];
    for f in &mut fields {
        *f = read_u32(&mut r)? as usize;
    }
    let model_cfg = ModelConfig {
        layers: fields[0],
        channels: fields[1],
        heads: fields[2],
        patch: fields[3],
        extent: fields[4],
        image_channels: fields[5],
        classes: fields[6],
    };
    if let Some(want) = expect {
        for (field, got, exp) in [
            ("layers", model_cfg.layers, want.layers),
            ("channels", model_cfg.channels, want.channels),
            ("heads", model_cfg.heads, want.heads),
            ("patch", model_cfg.patch, want.patch),
            ("extent", model_cfg.extent, want.extent),
            ("image_channels", model_cfg.image_channels, want.image_channels),
            ("classes", model_cfg.classes, want.classes),
        ] {
            if got != exp {
                return Err(DyError::ConfigMismatch {
                    field,
                    expected: exp.to_string(),
                    found: got.to_string(),
                });
            }
        }
    }
    let timesteps = read_u32(&mut r)? as usize;
    let beta_start = read_f64(&mut r)?;
    let beta_end = read_f64(&mut r)?;
    let diffusion = DiffusionSchedule::linear(timesteps, beta_start, beta_end)?;
    let mode = match read_u32(&mut r)? {
        0 => TrainMode::Static,
        1 => TrainMode::Dynamic,
        other => return Err(fail(format!("unknown mode tag {other}"))),
    };
    let lambda = read_f64(&mut r)?;
    let step = read_u64(&mut r)? as usize;
    let ema_ratio = read_f64(&mut r)?;
    let mut protection = ProtectionIndex {
        heads: Vec::with_capacity(model_cfg.layers),
        groups: Vec::with_capacity(model_cfg.layers),
    };
    for _ in 0..model_cfg.layers {
        protection.heads.push(read_u32(&mut r)? as usize);
        protection.groups.push(read_u32(&mut r)? as usize);
    }
    let count = read_u64(&mut r)? as usize;
    let mut model = DitModel::init(model_cfg, 0)?;
    let canonical = model.named_params();
    if count != canonical.len() {
        return Err(fail(format!(
            "checkpoint stores {count} parameters, model has {}",
            canonical.len()
        )));
    }
    let mut records: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..3 * count {
        let (name, t) = read_tensor_record(&mut r)?;
        if records.insert(name.clone(), t).is_some() {
            return Err(fail(format!("duplicate record `{name}`")));
        }
    }
    let mut m = HashMap::new();
    let mut v = HashMap::new();
    let take = |records: &mut HashMap<String, Tensor>, name: &str, shape: &[usize]| {
        let t = records
            .remove(name)
            .ok_or_else(|| fail(format!("missing record `{name}`")))?;
        if t.shape() != shape {
            return Err(fail(format!(
                "record `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    };
    for (name, proto) in &canonical {
        let shape = proto.shape().to_vec();
        let p = take(&mut records, name, &shape)?;
        let mt = take(&mut records, &format!("opt.m.{name}"), &shape)?;
        let vt = take(&mut records, &format!("opt.v.{name}"), &shape)?;
        m.insert(name.clone(), mt.data().to_vec());
        v.insert(name.clone(), vt.data().to_vec());
        for (slot_name, slot) in model.named_params_mut() {
            if &slot_name == name {
                *slot = p.clone().with_requires_grad(true);
                break;
            }
        }
    }
    Ok(CheckpointData {
        model,
        diffusion,
        mode,
        lambda,
        step,
        ema_ratio,
        protection,
        m,
        v,
    })
}

pub fn read_checkpoint_path(path: &Path, expect: Option<&ModelConfig>) -> Result<CheckpointData> {
    read_checkpoint(std::fs::File::open(path)?, expect)
}

fn mse(pred: &[f32], target: &[f32]) -> f64 {
    let n = pred.len().max(1);
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum::<f64>()
        / n as f64
}

/// Mean denoising loss over a slice of a dataset, with `draws` independent
/// (t, noise) draws per image. `protection: Some` routes width and tokens in
/// eval mode; `None` keeps everything on. Deterministic in `seed`.
pub fn eval_denoise_loss(
    model: &DitModel,
    diffusion: &DiffusionSchedule,
    protection: Option<&ProtectionIndex>,
    data: &Dataset,
    range: std::ops::Range<usize>,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if range.start >= range.end || range.end > data.len() {
        return Err(DyError::invalid(format!(
            "evaluation range {range:?} outside the dataset (len {})",
            data.len()
        )));
    }
    if draws == 0 {
        return Err(DyError::invalid("need at least one draw per image"));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in range.clone() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        for _ in 0..draws {
            let t = rng.random_range(1..=diffusion.timesteps());
            acc += denoise_loss_one(model, diffusion, protection, data, i, t, &mut rng)?;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Mean denoising loss over a slice of a dataset at one fixed timestep.
pub fn eval_denoise_loss_at(
    model: &DitModel,
    diffusion: &DiffusionSchedule,
    protection: Option<&ProtectionIndex>,
    data: &Dataset,
    range: std::ops::Range<usize>,
    t: usize,
    seed: u64,
) -> Result<f64> {
    if range.start >= range.end || range.end > data.len() {
        return Err(DyError::invalid(format!(
            "evaluation range {range:?} outside the dataset (len {})",
            data.len()
        )));
    }
    let mut acc = 0.0;
    for i in range.clone() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        acc += denoise_loss_one(model, diffusion, protection, data, i, t, &mut rng)?;
    }
    Ok(acc / range.len() as f64)
}

fn denoise_loss_one(
    model: &DitModel,
    diffusion: &DiffusionSchedule,
    protection: Option<&ProtectionIndex>,
    data: &Dataset,
    index: usize,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let cfg = &model.config;
    let x0 = data.image_f32(index);
    let eps = standard_normal(rng, cfg.image_len());
    let xt = diffusion.q_sample(&x0, t, &eps)?;
    let label = data.label(index) as usize;
    let target = patchify(&eps, cfg.image_channels, cfg.extent, cfg.patch)?;
    let pred = match protection {
        Some(p) => {
            let widths = model.resolve_widths(t, WidthKind::Routed(p))?;
            let sliced = model.slice_blocks(&widths)?;
            model.forward_sliced(&sliced, &xt, t, label)?.pred
        }
        None => {
            let tape = Tape::off();
            model.forward_full(&tape, &xt, t, label)?.data().to_vec()
        }
    };
    Ok(mse(&pred, &target))
}
