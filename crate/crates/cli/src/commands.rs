//! The six subcommands. Data tables go to standard output; progress and
//! timing notes go to standard error, so piped output stays machine-readable.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};

use dydit_core::analyze::{activation_map, loss_gap_curve, loss_map, token_flops_map};
use dydit_core::dataset::{generate_shapes, Dataset};
use dydit_core::dit::DitModel;
use dydit_core::diffusion::{ddim_timesteps, DiffusionSchedule};
use dydit_core::flops::whole_model_matmul_flops;
use dydit_core::imageio::save_image;
use dydit_core::rng::{derive_seed, seeded_standard_normal};
use dydit_core::sampler::{self, median_runtime, SamplerKind, SamplerOptions, WidthSource};
use dydit_core::schedule::ArchitectureSchedule;
use dydit_core::train::{read_checkpoint_path, CheckpointData, TrainConfig, TrainMode, Trainer};

use crate::config::RunConfig;

fn resolve_sampler(cfg: &RunConfig, timesteps: usize) -> Result<SamplerKind> {
    match cfg.sampler_kind.as_str() {
        "ddpm" => {
            if let Some(s) = cfg.sampler_steps {
                if s != timesteps {
                    bail!(
                        "sampler.steps={s}, but ddpm visits every one of the {timesteps} \
                         timesteps; drop the key or switch to sampler.kind=ddim"
                    );
                }
            }
            Ok(SamplerKind::Ddpm)
        }
        "ddim" => Ok(SamplerKind::Ddim {
            steps: cfg.sampler_steps.unwrap_or_else(|| timesteps.min(50)),
        }),
        other => bail!("config key `sampler.kind`: invalid value `{other}`"),
    }
}

fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    read_checkpoint_path(path, None)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

/// `dydit dataset`: write the synthetic shapes container.
pub fn dataset(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let set = generate_shapes(cfg.data_count, cfg.data_extent, seed)?;
    set.dataset.save_path(out)?;
    eprintln!(
        "wrote {} images ({1}x{1}, {2} classes) to {3}",
        set.dataset.len(),
        set.dataset.extent(),
        set.dataset.classes(),
        out.display()
    );
    Ok(())
}

/// `dydit train`: run the loop, write `train.log` and `checkpoint.dydt`.
pub fn train(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let data_path = cfg.require_data_path()?;
    let data = Dataset::load_path(data_path)
        .with_context(|| format!("loading dataset {}", data_path.display()))?;
    let model = DitModel::init(cfg.model, seed)?;
    let diffusion = DiffusionSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
    let train_config = TrainConfig {
        mode: cfg.mode,
        lambda: cfg.lambda,
        lr: cfg.lr,
        batch: cfg.batch,
        steps: cfg.steps,
        warmup_steps: cfg.warmup_steps.unwrap_or(cfg.steps / 10),
        label_drop: cfg.label_drop,
        temperature: cfg.temperature,
        seed,
    };
    let mut trainer = Trainer::new(model, diffusion, train_config)?;
    std::fs::create_dir_all(out)?;
    let log_path = out.join("train.log");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    trainer.run(&data, &mut log)?;
    log.flush()?;
    let ckpt_path = out.join("checkpoint.dydt");
    trainer.save_checkpoint_path(&ckpt_path)?;
    eprintln!(
        "{} steps ({}), final cost-ratio average {:.4}",
        trainer.step_count(),
        match cfg.mode {
            TrainMode::Dynamic => "dynamic",
            TrainMode::Static => "static",
        },
        trainer.ema_ratio()
    );
    eprintln!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

/// `dydit compile`: freeze router decisions over the sampler grid and print
/// the per-timestep active-unit table.
pub fn compile(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let data = load_checkpoint(checkpoint)?;
    let kind = resolve_sampler(cfg, data.diffusion.timesteps())?;
    let grid = kind.grid(&data.diffusion)?;
    let schedule = ArchitectureSchedule::compile(&data.model, &data.protection, &grid)?;
    schedule.save_path(out)?;
    println!("timestep\tlayer\tactive_heads\tactive_groups");
    for row in activation_map(&schedule)? {
        println!("{}\t{}\t{}\t{}", row.t, row.layer, row.heads, row.groups);
    }
    eprintln!(
        "wrote {} ({} steps x {} layers)",
        out.display(),
        schedule.steps(),
        schedule.layers()
    );
    Ok(())
}

/// Which widths `dydit sample` runs with.
pub enum WidthChoice {
    Schedule(PathBuf),
    Live,
    Static,
}

/// `dydit sample`: denoise a batch and write one image file per sample plus
/// `summary.tsv` (deterministic); timing goes to standard error.
pub fn sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    width: WidthChoice,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let data = load_checkpoint(checkpoint)?;
    let model_cfg = data.model.config;
    let kind = resolve_sampler(cfg, data.diffusion.timesteps())?;
    let labels: Vec<u16> = match &cfg.sample_labels {
        Some(explicit) => explicit.clone(),
        None => (0..cfg.sample_count)
            .map(|i| (i % model_cfg.classes) as u16)
            .collect(),
    };
    let opts = SamplerOptions {
        kind,
        guidance: cfg.sample_guidance,
        seed,
    };
    let loaded;
    let source = match &width {
        WidthChoice::Schedule(path) => {
            loaded = ArchitectureSchedule::load_path(path)
                .with_context(|| format!("loading schedule {}", path.display()))?;
            WidthSource::Compiled(&loaded)
        }
        WidthChoice::Live => WidthSource::Live(&data.protection),
        WidthChoice::Static => WidthSource::Full,
    };
    let start = Instant::now();
    let output = sampler::sample(&data.model, &data.diffusion, source, &labels, &opts)?;
    let elapsed = start.elapsed().as_secs_f64();
    std::fs::create_dir_all(out)?;
    let ext = if model_cfg.image_channels == 3 { "ppm" } else { "pgm" };
    for (i, img) in output.images.iter().enumerate() {
        save_image(
            &out.join(format!("sample_{i:03}.{ext}")),
            img,
            model_cfg.image_channels,
            model_cfg.extent,
        )?;
    }
    let ratio = output.flops.ratio();
    let mut summary = std::fs::File::create(out.join("summary.tsv"))?;
    writeln!(summary, "images\tevaluations\tmean_flops_ratio")?;
    writeln!(
        summary,
        "{}\t{}\t{ratio:.6}",
        labels.len(),
        output.flops.evals()
    )?;
    eprintln!(
        "{} images in {elapsed:.2}s ({:.2} images/s), mean cost ratio {ratio:.4}",
        labels.len(),
        labels.len() as f64 / elapsed.max(1e-9),
    );
    Ok(())
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// `dydit profile`: wall-clock and analytic cost of gated vs full execution,
/// one row per batch size.
pub fn profile(cfg: &RunConfig, checkpoint: &Path, schedule: Option<&Path>, seed: u64) -> Result<()> {
    let data = load_checkpoint(checkpoint)?;
    let kind = resolve_sampler(cfg, data.diffusion.timesteps())?;
    let loaded = schedule
        .map(|p| {
            ArchitectureSchedule::load_path(p)
                .with_context(|| format!("loading schedule {}", p.display()))
        })
        .transpose()?;
    println!("batch\tstatic_ms\tdynamic_ms\tspeedup\tflops_ratio");
    for &batch in &cfg.profile_batches {
        if batch == 0 {
            bail!("profile.batches: batch sizes must be positive");
        }
        let labels: Vec<u16> = (0..batch)
            .map(|i| (i % data.model.config.classes) as u16)
            .collect();
        let opts = SamplerOptions {
            kind,
            guidance: cfg.sample_guidance,
            seed,
        };
        let gated = match &loaded {
            Some(s) => WidthSource::Compiled(s),
            None => WidthSource::Live(&data.protection),
        };
        let ratio = sampler::sample(&data.model, &data.diffusion, gated, &labels, &opts)?
            .flops
            .ratio();
        let t_static = median_runtime(|| {
            sampler::sample(&data.model, &data.diffusion, WidthSource::Full, &labels, &opts)
                .map(|_| ())
        })?;
        let t_gated = median_runtime(|| {
            sampler::sample(&data.model, &data.diffusion, gated, &labels, &opts).map(|_| ())
        })?;
        println!(
            "{batch}\t{:.3}\t{:.3}\t{:.3}\t{ratio:.6}",
            ms(t_static),
            ms(t_gated),
            ms(t_static) / ms(t_gated),
        );
    }
    println!(
        "# whole-model matmul cost per full forward: {} FLOPs (the gated budget covers attention and feed-forward matmuls only)",
        whole_model_matmul_flops(&data.model)?
    );
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalyzeMode {
    /// Per-patch normalized prediction error on one image.
    LossMap,
    /// Small-minus-large loss difference across timesteps.
    LossGap,
    /// Active heads/groups per (timestep, layer) of a schedule.
    ActivationMap,
    /// Per-patch feed-forward work accumulated over all timesteps.
    TokenFlopsMap,
}

pub struct AnalyzeInputs {
    pub mode: AnalyzeMode,
    pub checkpoint: Option<PathBuf>,
    pub small: Option<PathBuf>,
    pub large: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
    pub index: usize,
    pub t: Option<usize>,
    pub points: usize,
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.require_data_path()?;
    Dataset::load_path(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn check_index(data: &Dataset, index: usize) -> Result<()> {
    if index >= data.len() {
        bail!("--index {index} outside the dataset (len {})", data.len());
    }
    Ok(())
}

fn write_grid_tsv(path: &Path, header: &str, side: usize, values: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(f, "{}\t{}\t{v:.6}", i / side, i % side)?;
    }
    f.flush()?;
    Ok(())
}

/// `dydit analyze`: export one diagnostic table per invocation.
pub fn analyze(cfg: &RunConfig, inputs: &AnalyzeInputs, seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    match inputs.mode {
        AnalyzeMode::ActivationMap => {
            let path = inputs
                .schedule
                .as_deref()
                .ok_or_else(|| anyhow!("activation-map needs --schedule <file>"))?;
            let schedule = ArchitectureSchedule::load_path(path)?;
            let rows = activation_map(&schedule)?;
            let out_path = out.join("activation_map.tsv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
            writeln!(f, "timestep\tlayer\tactive_heads\tactive_groups")?;
            for r in rows {
                writeln!(f, "{}\t{}\t{}\t{}", r.t, r.layer, r.heads, r.groups)?;
            }
            f.flush()?;
            eprintln!("wrote {}", out_path.display());
        }
        AnalyzeMode::LossMap => {
            let ckpt = inputs
                .checkpoint
                .as_deref()
                .ok_or_else(|| anyhow!("loss-map needs --checkpoint <file>"))?;
            let data = load_checkpoint(ckpt)?;
            let images = load_data(cfg)?;
            check_index(&images, inputs.index)?;
            let t = inputs.t.unwrap_or_else(|| data.diffusion.timesteps());
            let eps = seeded_standard_normal(
                derive_seed(seed, inputs.index as u64),
                data.model.config.image_len(),
            );
            let protection = match data.mode {
                TrainMode::Dynamic => Some(&data.protection),
                TrainMode::Static => None,
            };
            let map = loss_map(
                &data.model,
                &data.diffusion,
                protection,
                &images.image_f32(inputs.index),
                images.label(inputs.index) as usize,
                t,
                &eps,
            )?;
            let side = data.model.config.extent / data.model.config.patch;
            let out_path = out.join("loss_map.tsv");
            write_grid_tsv(&out_path, "row\tcol\tnormalized_loss", side, &map)?;
            eprintln!("wrote {}", out_path.display());
        }
        AnalyzeMode::TokenFlopsMap => {
            let ckpt = inputs
                .checkpoint
                .as_deref()
                .ok_or_else(|| anyhow!("token-flops-map needs --checkpoint <file>"))?;
            let data = load_checkpoint(ckpt)?;
            let images = load_data(cfg)?;
            check_index(&images, inputs.index)?;
            let grid: Vec<usize> = (1..=data.diffusion.timesteps()).rev().collect();
            let map = token_flops_map(
                &data.model,
                &data.protection,
                &data.diffusion,
                &images.image_f32(inputs.index),
                images.label(inputs.index) as usize,
                &grid,
                seed,
            )?;
            let side = data.model.config.extent / data.model.config.patch;
            let out_path = out.join("token_flops_map.tsv");
            write_grid_tsv(&out_path, "row\tcol\tnormalized_flops", side, &map)?;
            eprintln!("wrote {}", out_path.display());
        }
        AnalyzeMode::LossGap => {
            let (small_path, large_path) = match (&inputs.small, &inputs.large) {
                (Some(s), Some(l)) => (s.as_path(), l.as_path()),
                _ => bail!("loss-gap needs --small and --large checkpoints"),
            };
            let small = load_checkpoint(small_path)?;
            let large = load_checkpoint(large_path)?;
            if small.diffusion.timesteps() != large.diffusion.timesteps()
                || small.diffusion.beta_start() != large.diffusion.beta_start()
                || small.diffusion.beta_end() != large.diffusion.beta_end()
            {
                bail!("the two checkpoints use different diffusion schedules");
            }
            let images = load_data(cfg)?;
            if inputs.points == 0 {
                bail!("--points must be positive");
            }
            let mut grid =
                ddim_timesteps(small.diffusion.timesteps(), inputs.points)?;
            grid.reverse(); // ascending for the table
            let curve = loss_gap_curve(
                &small.model,
                &large.model,
                &small.diffusion,
                &images,
                0..images.len(),
                &grid,
                seed,
            )?;
            let out_path = out.join("loss_gap.tsv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
            writeln!(f, "timestep\tloss_gap")?;
            for (t, gap) in curve {
                writeln!(f, "{t}\t{gap:.6}")?;
            }
            f.flush()?;
            eprintln!("wrote {}", out_path.display());
        }
    }
    Ok(())
}
