//! The denoising transformer.
//!
//! A patch-token transformer conditioned on timestep and class via
//! shift/scale/gate modulation, predicting the noise component of its input.
//! Width (attention heads, MLP channel groups) is gated per timestep and MLP
//! computation is gated per token; training gates densely with
//! straight-through masks, inference slices the gated units away so the
//! saved work is real.

mod block;
mod embed;

pub use block::{Block, BlockNoise, BlockUsage, Modulation, SlicedBlock};
pub use embed::{patchify, position_encoding, timestep_encoding, unpatchify};

use crate::error::{DyError, Result};
use crate::numerics::{BroadcastAxis, Tape, Tensor};
use crate::routing::{
    route_tokens, route_width, strongest_unit, ProtectionIndex, RouteMode, UnitAxis,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-6;

/// Architectural hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    /// Token width C. Must be a multiple of 4 (position encoding) and of
    /// `heads`.
    pub channels: usize,
    /// Attention heads; also the number of MLP channel groups.
    pub heads: usize,
    /// Patch side length.
    pub patch: usize,
    /// Image side length.
    pub extent: usize,
    /// Image channels (3 for RGB, 1 for grayscale).
    pub image_channels: usize,
    /// Real classes; index `classes` is the learned null class.
    pub classes: usize,
}

impl ModelConfig {
    /// The desk-scale default: 2 layers, width 64, 4 heads, 16x16 RGB in
    /// 4x4 patches, 4 classes.
    pub fn toy() -> Self {
        ModelConfig {
            layers: 2,
            channels: 64,
            heads: 4,
            patch: 4,
            extent: 16,
            image_channels: 3,
            classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DyError::invalid(msg));
        if self.layers == 0 {
            return fail("layers must be positive".into());
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            return fail(format!("channels {} must be a positive multiple of 4", self.channels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "heads {} must be positive and divide channels {}",
                self.heads, self.channels
            ));
        }
        if self.heads > 64 {
            return fail(format!("heads {} exceed the 64-unit schedule word", self.heads));
        }
        if self.patch == 0 || self.extent == 0 || self.extent % self.patch != 0 {
            return fail(format!(
                "patch {} must be positive and divide extent {}",
                self.patch, self.extent
            ));
        }
        if self.image_channels == 0 {
            return fail("image_channels must be positive".into());
        }
        if self.classes == 0 || self.classes > u16::MAX as usize {
            return fail(format!("classes {} outside [1, 65535]", self.classes));
        }
        Ok(())
    }

    /// Patch-grid side length.
    pub fn grid(&self) -> usize {
        self.extent / self.patch
    }

    /// Token count N.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch width.
    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch * self.patch
    }

    /// Hidden MLP width D = 4C.
    pub fn mlp_dim(&self) -> usize {
        4 * self.channels
    }

    /// Per-head width.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// MLP channel groups (tied to the head count).
    pub fn groups(&self) -> usize {
        self.heads
    }

    /// Per-group hidden width.
    pub fn group_dim(&self) -> usize {
        self.mlp_dim() / self.groups()
    }

    /// Pixel count of one image.
    pub fn image_len(&self) -> usize {
        self.image_channels * self.extent * self.extent
    }
}

/// Per-layer unit counts actually exercised by one inference pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerUsage {
    pub heads: usize,
    pub groups: usize,
    pub tokens: usize,
}

/// Result of one width-sliced inference pass.
#[derive(Debug, Clone)]
pub struct SlicedForward {
    /// Predicted noise, as `N x patch_dim` rows.
    pub pred: Vec<f32>,
    /// Per-layer counts for budget accounting.
    pub usage: Vec<LayerUsage>,
    /// Per-layer token decisions (length N each).
    pub token_active: Vec<Vec<bool>>,
}

/// Result of one dense gated training pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    /// Predicted noise (`N x patch_dim`), differentiable.
    pub pred: Tensor,
    /// Per-layer gate sums, differentiable, for the budget loss.
    pub usage: Vec<BlockUsage>,
}

/// How width is chosen for an inference pass.
#[derive(Debug, Clone, Copy)]
pub enum WidthKind<'a> {
    /// Threshold the routers on the timestep embedding.
    Routed(&'a ProtectionIndex),
    /// Every head and group on.
    Static,
}

/// The full denoiser.
#[derive(Debug, Clone)]
pub struct DitModel {
    pub config: ModelConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub time_w1: Tensor,
    pub time_b1: Tensor,
    pub time_w2: Tensor,
    pub time_b2: Tensor,
    /// `(classes + 1) x C`; the last row is the null class.
    pub class_table: Tensor,
    pub blocks: Vec<Block>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// Fixed `N x C` position table (not a parameter).
    pos: Tensor,
}

fn normal_param(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    use rand_distr::Distribution;
    let dist = rand_distr::Normal::new(0.0f64, std).expect("valid normal");
    let vals: Vec<f32> = (0..rows * cols).map(|_| dist.sample(rng) as f32).collect();
    Tensor::from_vec(&[rows, cols], vals)
        .expect("param shape")
        .with_requires_grad(true)
}

fn xavier_param(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    use rand_distr::Distribution;
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = rand_distr::Uniform::new_inclusive(-bound, bound).expect("valid uniform");
    let vals: Vec<f32> = (0..rows * cols).map(|_| dist.sample(rng) as f32).collect();
    Tensor::from_vec(&[rows, cols], vals)
        .expect("param shape")
        .with_requires_grad(true)
}

fn zero_param(rows: usize, cols: usize) -> Tensor {
    Tensor::zeros(&[rows, cols])
        .expect("param shape")
        .with_requires_grad(true)
}

impl DitModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let pd = config.patch_dim();
        let pos = Tensor::from_vec(
            &[config.tokens(), c],
            position_encoding(c, config.grid())?,
        )?;
        let model = DitModel {
            config,
            patch_w: xavier_param(&mut rng, pd, c),
            patch_b: zero_param(1, c),
            time_w1: xavier_param(&mut rng, c, c),
            time_b1: zero_param(1, c),
            time_w2: xavier_param(&mut rng, c, c),
            time_b2: zero_param(1, c),
            class_table: normal_param(&mut rng, config.classes + 1, c, 0.02),
            blocks: (0..config.layers)
                .map(|_| Block::init(&config, &mut rng))
                .collect(),
            head_w: zero_param(c, pd),
            head_b: zero_param(1, pd),
            pos,
        };
        Ok(model)
    }

    /// The label used for unconditional prediction.
    pub fn null_class(&self) -> usize {
        self.config.classes
    }

    /// Parameters in canonical order. Clones share storage with the model,
    /// so gradient lookups keyed on these tensors hit the training graph.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = vec![
            ("patch_embed.weight".into(), self.patch_w.clone()),
            ("patch_embed.bias".into(), self.patch_b.clone()),
            ("time_embed.w1".into(), self.time_w1.clone()),
            ("time_embed.b1".into(), self.time_b1.clone()),
            ("time_embed.w2".into(), self.time_w2.clone()),
            ("time_embed.b2".into(), self.time_b2.clone()),
            ("class_embed.table".into(), self.class_table.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layer{i}.attn.wq"), b.w_q.clone()));
            out.push((format!("layer{i}.attn.wk"), b.w_k.clone()));
            out.push((format!("layer{i}.attn.wv"), b.w_v.clone()));
            out.push((format!("layer{i}.attn.wo"), b.w_o.clone()));
            out.push((format!("layer{i}.mlp.w1"), b.w_1.clone()));
            out.push((format!("layer{i}.mlp.w2"), b.w_2.clone()));
            out.push((format!("layer{i}.ada.weight"), b.ada_w.clone()));
            out.push((format!("layer{i}.ada.bias"), b.ada_b.clone()));
            out.push((format!("layer{i}.router.head.weight"), b.router_head.weight.clone()));
            out.push((format!("layer{i}.router.head.bias"), b.router_head.bias.clone()));
            out.push((format!("layer{i}.router.channel.weight"), b.router_channel.weight.clone()));
            out.push((format!("layer{i}.router.channel.bias"), b.router_channel.bias.clone()));
            out.push((format!("layer{i}.router.token.weight"), b.router_token.weight.clone()));
            out.push((format!("layer{i}.router.token.bias"), b.router_token.bias.clone()));
        }
        out.push(("head.weight".into(), self.head_w.clone()));
        out.push(("head.bias".into(), self.head_b.clone()));
        out
    }

    /// Mutable views over the parameters, in the same canonical order as
    /// [`named_params`](Self::named_params).
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_w),
            ("patch_embed.bias".into(), &mut self.patch_b),
            ("time_embed.w1".into(), &mut self.time_w1),
            ("time_embed.b1".into(), &mut self.time_b1),
            ("time_embed.w2".into(), &mut self.time_w2),
            ("time_embed.b2".into(), &mut self.time_b2),
            ("class_embed.table".into(), &mut self.class_table),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layer{i}.attn.wq"), &mut b.w_q));
            out.push((format!("layer{i}.attn.wk"), &mut b.w_k));
            out.push((format!("layer{i}.attn.wv"), &mut b.w_v));
            out.push((format!("layer{i}.attn.wo"), &mut b.w_o));
            out.push((format!("layer{i}.mlp.w1"), &mut b.w_1));
            out.push((format!("layer{i}.mlp.w2"), &mut b.w_2));
            out.push((format!("layer{i}.ada.weight"), &mut b.ada_w));
            out.push((format!("layer{i}.ada.bias"), &mut b.ada_b));
            out.push((format!("layer{i}.router.head.weight"), &mut b.router_head.weight));
            out.push((format!("layer{i}.router.head.bias"), &mut b.router_head.bias));
            out.push((format!("layer{i}.router.channel.weight"), &mut b.router_channel.weight));
            out.push((format!("layer{i}.router.channel.bias"), &mut b.router_channel.bias));
            out.push((format!("layer{i}.router.token.weight"), &mut b.router_token.weight));
            out.push((format!("layer{i}.router.token.bias"), &mut b.router_token.bias));
        }
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }

    /// Order-sensitive digest of the configuration and every parameter
    /// value; compiled schedules carry it so a schedule can refuse to drive
    /// a different model.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(b"dydit-fp-v1");
        for v in [
            self.config.layers,
            self.config.channels,
            self.config.heads,
            self.config.patch,
            self.config.extent,
            self.config.image_channels,
            self.config.classes,
        ] {
            h.write(&(v as u32).to_le_bytes());
        }
        for (name, t) in self.named_params() {
            h.write(name.as_bytes());
            for &x in t.data() {
                h.write(&x.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Timestep embedding `E_t` (`1 x C`): frequency encoding of the raw
    /// step through a two-layer MLP.
    pub fn time_embedding(&self, tape: &Tape, t: usize) -> Result<Tensor> {
        let c = self.config.channels;
        let enc = Tensor::from_vec(&[1, c], timestep_encoding(c, t as f64)?)?;
        let h1 = tape.add(&tape.matmul(&enc, &self.time_w1)?, &self.time_b1)?;
        let h1 = tape.gelu(&h1)?;
        tape.add(&tape.matmul(&h1, &self.time_w2)?, &self.time_b2)
    }

    /// Class embedding row (`1 x C`); `label == classes` selects the null
    /// class.
    pub fn class_embedding(&self, tape: &Tape, label: usize) -> Result<Tensor> {
        if label > self.config.classes {
            return Err(DyError::invalid(format!(
                "label {label} out of range (null class is {})",
                self.config.classes
            )));
        }
        tape.slice(&self.class_table, 0, label, label + 1)
    }

    /// Patchify and linearly embed an image, adding position encodings.
    fn embed_tokens(&self, tape: &Tape, image: &[f32]) -> Result<Tensor> {
        let cfg = &self.config;
        if image.len() != cfg.image_len() {
            return Err(DyError::invalid(format!(
                "image has {} values, expected {}",
                image.len(),
                cfg.image_len()
            )));
        }
        let patches = Tensor::from_vec(
            &[cfg.tokens(), cfg.patch_dim()],
            patchify(image, cfg.image_channels, cfg.extent, cfg.patch)?,
        )?;
        let x = tape.matmul(&patches, &self.patch_w)?;
        let b = tape.broadcast(&self.patch_b, cfg.tokens(), cfg.channels, BroadcastAxis::Cols)?;
        let x = tape.add(&x, &b)?;
        tape.add(&x, &self.pos)
    }

    /// Final norm and linear read-out to noise patches.
    fn read_out(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let ln = tape.layer_norm(x, LN_EPS)?;
        let y = tape.matmul(&ln, &self.head_w)?;
        let b = tape.broadcast(&self.head_b, cfg.tokens(), cfg.patch_dim(), BroadcastAxis::Cols)?;
        tape.add(&y, &b)
    }

    /// Dense gated training pass over one sample. `noise_rng` draws the
    /// routing relaxation noise (pass `None` for silent, threshold-exact
    /// routing). Draw order per layer: heads, then groups, then tokens.
    pub fn forward_train(
        &self,
        tape: &Tape,
        image: &[f32],
        t: usize,
        label: usize,
        protection: &ProtectionIndex,
        mut noise_rng: Option<&mut ChaCha8Rng>,
        temperature: f64,
    ) -> Result<TrainForward> {
        let cfg = &self.config;
        if protection.heads.len() != cfg.layers || protection.groups.len() != cfg.layers {
            return Err(DyError::invalid("protection index does not match layer count"));
        }
        let mut x = self.embed_tokens(tape, image)?;
        let e_t = self.time_embedding(tape, t)?;
        let e_y = self.class_embedding(tape, label)?;
        let e = tape.add(&e_t, &e_y)?;
        let mut usage = Vec::with_capacity(cfg.layers);
        for (i, block) in self.blocks.iter().enumerate() {
            let noise = match noise_rng.as_deref_mut() {
                Some(rng) => BlockNoise {
                    head: crate::routing::logistic_noise(rng, cfg.heads),
                    channel: crate::routing::logistic_noise(rng, cfg.groups()),
                    token: crate::routing::logistic_noise(rng, cfg.tokens()),
                    temperature,
                },
                None => BlockNoise::silent(cfg),
            };
            let (next, u) = block.forward_train(
                tape,
                &x,
                &e,
                &e_t,
                protection.heads[i],
                protection.groups[i],
                &noise,
            )?;
            x = next;
            usage.push(u);
        }
        let pred = self.read_out(tape, &x)?;
        Ok(TrainForward { pred, usage })
    }

    /// Ungated dense pass (the width-static reference path).
    pub fn forward_full(&self, tape: &Tape, image: &[f32], t: usize, label: usize) -> Result<Tensor> {
        let mut x = self.embed_tokens(tape, image)?;
        let e_t = self.time_embedding(tape, t)?;
        let e_y = self.class_embedding(tape, label)?;
        let e = tape.add(&e_t, &e_y)?;
        for block in &self.blocks {
            x = block.forward_full(tape, &x, &e)?;
        }
        self.read_out(tape, &x)
    }

    /// Decide per-layer active heads and groups for timestep `t`. Width
    /// depends only on the timestep, never on the image or class, which is
    /// what makes precompiled schedules possible.
    pub fn resolve_widths(&self, t: usize, kind: WidthKind) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let cfg = &self.config;
        match kind {
            WidthKind::Static => Ok((0..cfg.layers)
                .map(|_| ((0..cfg.heads).collect(), (0..cfg.groups()).collect()))
                .collect()),
            WidthKind::Routed(protection) => {
                if protection.heads.len() != cfg.layers || protection.groups.len() != cfg.layers {
                    return Err(DyError::invalid("protection index does not match layer count"));
                }
                let tape = Tape::off();
                let e_t = self.time_embedding(&tape, t)?;
                let mut out = Vec::with_capacity(cfg.layers);
                for (i, block) in self.blocks.iter().enumerate() {
                    let heads = route_width(
                        &tape,
                        &e_t,
                        &block.router_head,
                        protection.heads[i],
                        RouteMode::Eval,
                    )?;
                    let groups = route_width(
                        &tape,
                        &e_t,
                        &block.router_channel,
                        protection.groups[i],
                        RouteMode::Eval,
                    )?;
                    out.push((
                        (0..cfg.heads).filter(|&h| heads.active[h]).collect(),
                        (0..cfg.groups()).filter(|&g| groups.active[g]).collect(),
                    ));
                }
                Ok(out)
            }
        }
    }

    /// Materialize sliced blocks for the given per-layer width choices.
    pub fn slice_blocks(&self, widths: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<SlicedBlock>> {
        if widths.len() != self.config.layers {
            return Err(DyError::invalid("width list does not match layer count"));
        }
        self.blocks
            .iter()
            .zip(widths)
            .map(|(b, (h, g))| b.slice_for(&self.config, h, g))
            .collect()
    }

    /// Width-sliced inference pass. Token decisions are made on the fly by
    /// each block's token router; everything else follows the prepared
    /// slices.
    pub fn forward_sliced(
        &self,
        sliced: &[SlicedBlock],
        image: &[f32],
        t: usize,
        label: usize,
    ) -> Result<SlicedForward> {
        let cfg = &self.config;
        if sliced.len() != cfg.layers {
            return Err(DyError::invalid("sliced block list does not match layer count"));
        }
        let tape = Tape::off();
        let mut x = self.embed_tokens(&tape, image)?;
        let e_t = self.time_embedding(&tape, t)?;
        let e_y = self.class_embedding(&tape, label)?;
        let e = tape.add(&e_t, &e_y)?;
        let mut usage = Vec::with_capacity(cfg.layers);
        let mut token_active = Vec::with_capacity(cfg.layers);
        for (block, s) in self.blocks.iter().zip(sliced) {
            let mods = block.modulation(&tape, &e)?;
            let x2 = s.attn_part(&tape, &x, &mods)?;
            let tokens = route_tokens(&tape, &x2, &block.router_token, RouteMode::Eval)?;
            x = s.mlp_part(&tape, &x2, &mods, &tokens.active)?;
            usage.push(LayerUsage {
                heads: s.heads.len(),
                groups: s.groups.len(),
                tokens: tokens.active.iter().filter(|&&b| b).count(),
            });
            token_active.push(tokens.active);
        }
        let pred = self.read_out(&tape, &x)?;
        Ok(SlicedForward {
            pred: pred.data().to_vec(),
            usage,
            token_active,
        })
    }

    /// Choose each layer's protected head and channel group by weight
    /// magnitude (largest combined L2 norm). Done once before budgeted
    /// training.
    pub fn rank_protection(&self) -> Result<ProtectionIndex> {
        let mut heads = Vec::with_capacity(self.config.layers);
        let mut groups = Vec::with_capacity(self.config.layers);
        for b in &self.blocks {
            heads.push(strongest_unit(
                &[
                    (&b.w_q, UnitAxis::Columns),
                    (&b.w_k, UnitAxis::Columns),
                    (&b.w_v, UnitAxis::Columns),
                    (&b.w_o, UnitAxis::Rows),
                ],
                self.config.heads,
            )?);
            groups.push(strongest_unit(
                &[(&b.w_1, UnitAxis::Columns), (&b.w_2, UnitAxis::Rows)],
                self.config.groups(),
            )?);
        }
        Ok(ProtectionIndex { heads, groups })
    }
}

/// Streaming FNV-1a 64-bit hash.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// FNV-1a 64-bit digest of a byte slice (the same function the model
/// fingerprint uses internally).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv::new();
    h.write(bytes);
    h.finish()
}
