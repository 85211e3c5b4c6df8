//! One transformer block with width gating on its attention heads and MLP
//! channel groups, and token gating on its MLP.
//!
//! All paths decompose the computation per head / per channel group, so the
//! dense gated training pass and the width-sliced inference pass run the
//! same sequence of matrix products on the same values: gating a unit off
//! multiplies its finished contribution by an exact 0.0, slicing removes it
//! entirely, and both leave the surviving arithmetic bit-identical.

use crate::error::{DyError, Result};
use crate::numerics::{BroadcastAxis, Tape, Tensor};
use crate::routing::{route_tokens, route_width, RouteMode, RouterParams};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::ModelConfig;

const LN_EPS: f64 = 1e-6;

/// The six per-block conditioning rows (each `1 x C`) projected from the
/// conditioning embedding: shift/scale/gate for the attention half, then
/// shift/scale/gate for the MLP half.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub shift_attn: Tensor,
    pub scale_attn: Tensor,
    pub gate_attn: Tensor,
    pub shift_mlp: Tensor,
    pub scale_mlp: Tensor,
    pub gate_mlp: Tensor,
}

/// Per-pass routing noise for one block (train mode only).
#[derive(Debug, Clone)]
pub struct BlockNoise {
    pub head: Vec<f64>,
    pub channel: Vec<f64>,
    pub token: Vec<f64>,
    pub temperature: f64,
}

impl BlockNoise {
    /// All-zero noise: hard decisions match evaluation thresholds exactly.
    pub fn silent(config: &ModelConfig) -> Self {
        BlockNoise {
            head: vec![0.0; config.heads],
            channel: vec![0.0; config.groups()],
            token: vec![0.0; config.tokens()],
            temperature: 1.0,
        }
    }
}

/// Scalar gate-sum tensors (each shape `[1]`) a training pass produces for
/// the budget loss: how many heads, channel groups, and tokens stayed on.
#[derive(Debug, Clone)]
pub struct BlockUsage {
    pub head_sum: Tensor,
    pub group_sum: Tensor,
    pub token_sum: Tensor,
}

/// Weights and routers for one block.
#[derive(Debug, Clone)]
pub struct Block {
    /// `C x C`; head h owns columns `[h*head_dim, (h+1)*head_dim)`.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `C x C`; head h owns rows `[h*head_dim, (h+1)*head_dim)`.
    pub w_o: Tensor,
    /// `C x 4C`; group g owns columns `[g*group_dim, (g+1)*group_dim)`.
    pub w_1: Tensor,
    /// `4C x C`; group g owns rows `[g*group_dim, (g+1)*group_dim)`.
    pub w_2: Tensor,
    /// Conditioning projection `C x 6C`, zero-initialized.
    pub ada_w: Tensor,
    /// `1 x 6C`, zero-initialized.
    pub ada_b: Tensor,
    pub router_head: RouterParams,
    pub router_channel: RouterParams,
    pub router_token: RouterParams,
}

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid uniform");
    let vals: Vec<f32> = (0..rows * cols).map(|_| dist.sample(rng) as f32).collect();
    Tensor::from_vec(&[rows, cols], vals)
        .expect("xavier shape")
        .with_requires_grad(true)
}

fn zeros_param(rows: usize, cols: usize) -> Tensor {
    Tensor::zeros(&[rows, cols])
        .expect("zero param shape")
        .with_requires_grad(true)
}

impl Block {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let c = config.channels;
        let d = config.mlp_dim();
        Block {
            w_q: xavier(c, c, rng),
            w_k: xavier(c, c, rng),
            w_v: xavier(c, c, rng),
            w_o: xavier(c, c, rng),
            w_1: xavier(c, d, rng),
            w_2: xavier(d, c, rng),
            ada_w: zeros_param(c, 6 * c),
            ada_b: zeros_param(1, 6 * c),
            router_head: RouterParams::init(c, config.heads, rng),
            router_channel: RouterParams::init(c, config.groups(), rng),
            router_token: RouterParams::init(c, 1, rng),
        }
    }

    /// Project the conditioning embedding `e` (`1 x C`) into the six
    /// modulation rows.
    pub fn modulation(&self, tape: &Tape, e: &Tensor) -> Result<Modulation> {
        let c = self.w_q.shape()[0];
        let h = tape.gelu(e)?;
        let m = tape.add(&tape.matmul(&h, &self.ada_w)?, &self.ada_b)?;
        let part = |i: usize| tape.slice(&m, 1, i * c, (i + 1) * c);
        Ok(Modulation {
            shift_attn: part(0)?,
            scale_attn: part(1)?,
            gate_attn: part(2)?,
            shift_mlp: part(3)?,
            scale_mlp: part(4)?,
            gate_mlp: part(5)?,
        })
    }

    /// Slice out the weights of the chosen heads and channel groups as
    /// standalone constant tensors.
    pub fn slice_for(
        &self,
        config: &ModelConfig,
        heads: &[usize],
        groups: &[usize],
    ) -> Result<SlicedBlock> {
        let hd = config.head_dim();
        let gd = config.group_dim();
        if heads.is_empty() || groups.is_empty() {
            return Err(DyError::invalid(
                "sliced block needs at least one head and one channel group",
            ));
        }
        let col_slice = |t: &Tensor, unit: usize, width: usize| -> Result<Tensor> {
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let start = unit * width;
            if start + width > cols {
                return Err(DyError::invalid(format!("unit {unit} out of range")));
            }
            let data = t.data();
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                out.extend_from_slice(&data[r * cols + start..r * cols + start + width]);
            }
            Tensor::from_vec(&[rows, width], out)
        };
        let row_slice = |t: &Tensor, unit: usize, height: usize| -> Result<Tensor> {
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let start = unit * height;
            if start + height > rows {
                return Err(DyError::invalid(format!("unit {unit} out of range")));
            }
            let data = t.data();
            Tensor::from_vec(
                &[height, cols],
                data[start * cols..(start + height) * cols].to_vec(),
            )
        };
        let mut sliced = SlicedBlock {
            heads: heads.to_vec(),
            groups: groups.to_vec(),
            head_dim: hd,
            w_q: Vec::new(),
            w_k: Vec::new(),
            w_v: Vec::new(),
            w_o: Vec::new(),
            w_1: Vec::new(),
            w_2: Vec::new(),
        };
        for &h in heads {
            if h >= config.heads {
                return Err(DyError::invalid(format!("head {h} out of range")));
            }
            sliced.w_q.push(col_slice(&self.w_q, h, hd)?);
            sliced.w_k.push(col_slice(&self.w_k, h, hd)?);
            sliced.w_v.push(col_slice(&self.w_v, h, hd)?);
            sliced.w_o.push(row_slice(&self.w_o, h, hd)?);
        }
        for &g in groups {
            if g >= config.groups() {
                return Err(DyError::invalid(format!("channel group {g} out of range")));
            }
            sliced.w_1.push(col_slice(&self.w_1, g, gd)?);
            sliced.w_2.push(row_slice(&self.w_2, g, gd)?);
        }
        Ok(sliced)
    }

    /// Dense training pass: every head and group is computed, finished
    /// contributions are multiplied by hard 0/1 gates that carry
    /// straight-through gradients, and the MLP output is mixed per token by
    /// the token gate column.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_train(
        &self,
        tape: &Tape,
        x: &Tensor,
        e: &Tensor,
        e_t: &Tensor,
        protected_head: usize,
        protected_group: usize,
        noise: &BlockNoise,
    ) -> Result<(Tensor, BlockUsage)> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let hd = self.w_q.shape()[1] / self.router_head.out_dim();
        let gd = self.w_1.shape()[1] / self.router_channel.out_dim();
        let mods = self.modulation(tape, e)?;

        let head_route = route_width(
            tape,
            e_t,
            &self.router_head,
            protected_head,
            RouteMode::Train {
                noise: &noise.head,
                temperature: noise.temperature,
            },
        )?;
        let xm = modulate(tape, &tape.layer_norm(x, LN_EPS)?, &mods.shift_attn, &mods.scale_attn)?;
        let mut attn_acc: Option<Tensor> = None;
        for h in 0..self.router_head.out_dim() {
            let wq = tape.slice(&self.w_q, 1, h * hd, (h + 1) * hd)?;
            let wk = tape.slice(&self.w_k, 1, h * hd, (h + 1) * hd)?;
            let wv = tape.slice(&self.w_v, 1, h * hd, (h + 1) * hd)?;
            let wo = tape.slice(&self.w_o, 0, h * hd, (h + 1) * hd)?;
            let o = attn_head(tape, &xm, &wq, &wk, &wv, hd)?;
            let contrib = tape.matmul(&o, &wo)?;
            let gate = tape.slice(&head_route.mask, 1, h, h + 1)?;
            let gate_full = tape.broadcast(&gate, n, c, BroadcastAxis::Cols)?;
            let term = tape.mul(&contrib, &gate_full)?;
            attn_acc = Some(match attn_acc {
                None => term,
                Some(acc) => tape.add(&acc, &term)?,
            });
        }
        let gated_attn = tape.mul(
            &attn_acc.expect("at least one head"),
            &tape.broadcast(&mods.gate_attn, n, c, BroadcastAxis::Cols)?,
        )?;
        let x2 = tape.add(x, &gated_attn)?;

        let group_route = route_width(
            tape,
            e_t,
            &self.router_channel,
            protected_group,
            RouteMode::Train {
                noise: &noise.channel,
                temperature: noise.temperature,
            },
        )?;
        let token_route = route_tokens(
            tape,
            &x2,
            &self.router_token,
            RouteMode::Train {
                noise: &noise.token,
                temperature: noise.temperature,
            },
        )?;
        let xm2 = modulate(tape, &tape.layer_norm(&x2, LN_EPS)?, &mods.shift_mlp, &mods.scale_mlp)?;
        let mut mlp_acc: Option<Tensor> = None;
        for g in 0..self.router_channel.out_dim() {
            let w1 = tape.slice(&self.w_1, 1, g * gd, (g + 1) * gd)?;
            let w2 = tape.slice(&self.w_2, 0, g * gd, (g + 1) * gd)?;
            let a = tape.gelu(&tape.matmul(&xm2, &w1)?)?;
            let contrib = tape.matmul(&a, &w2)?;
            let gate = tape.slice(&group_route.mask, 1, g, g + 1)?;
            let gate_full = tape.broadcast(&gate, n, c, BroadcastAxis::Cols)?;
            let term = tape.mul(&contrib, &gate_full)?;
            mlp_acc = Some(match mlp_acc {
                None => term,
                Some(acc) => tape.add(&acc, &term)?,
            });
        }
        let token_full = tape.broadcast(&token_route.mask, n, c, BroadcastAxis::Rows)?;
        let masked_mlp = tape.mul(&mlp_acc.expect("at least one group"), &token_full)?;
        let gated_mlp = tape.mul(
            &masked_mlp,
            &tape.broadcast(&mods.gate_mlp, n, c, BroadcastAxis::Cols)?,
        )?;
        let x3 = tape.add(&x2, &gated_mlp)?;

        let usage = BlockUsage {
            // Budget twins gate the usage sums so the budget loss pushes the
            // routers without dragging the features that feed them.
            head_sum: tape.sum(&head_route.budget)?,
            group_sum: tape.sum(&group_route.budget)?,
            token_sum: tape.sum(&token_route.budget)?,
        };
        Ok((x3, usage))
    }

    /// Ungated dense pass: every head, every group, every token.
    pub fn forward_full(&self, tape: &Tape, x: &Tensor, e: &Tensor) -> Result<Tensor> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let heads = self.router_head.out_dim();
        let groups = self.router_channel.out_dim();
        let hd = self.w_q.shape()[1] / heads;
        let gd = self.w_1.shape()[1] / groups;
        let mods = self.modulation(tape, e)?;
        let xm = modulate(tape, &tape.layer_norm(x, LN_EPS)?, &mods.shift_attn, &mods.scale_attn)?;
        let mut attn_acc: Option<Tensor> = None;
        for h in 0..heads {
            let wq = tape.slice(&self.w_q, 1, h * hd, (h + 1) * hd)?;
            let wk = tape.slice(&self.w_k, 1, h * hd, (h + 1) * hd)?;
            let wv = tape.slice(&self.w_v, 1, h * hd, (h + 1) * hd)?;
            let wo = tape.slice(&self.w_o, 0, h * hd, (h + 1) * hd)?;
            let o = attn_head(tape, &xm, &wq, &wk, &wv, hd)?;
            let term = tape.matmul(&o, &wo)?;
            attn_acc = Some(match attn_acc {
                None => term,
                Some(acc) => tape.add(&acc, &term)?,
            });
        }
        let gated_attn = tape.mul(
            &attn_acc.expect("at least one head"),
            &tape.broadcast(&mods.gate_attn, n, c, BroadcastAxis::Cols)?,
        )?;
        let x2 = tape.add(x, &gated_attn)?;
        let xm2 = modulate(tape, &tape.layer_norm(&x2, LN_EPS)?, &mods.shift_mlp, &mods.scale_mlp)?;
        let mut mlp_acc: Option<Tensor> = None;
        for g in 0..groups {
            let w1 = tape.slice(&self.w_1, 1, g * gd, (g + 1) * gd)?;
            let w2 = tape.slice(&self.w_2, 0, g * gd, (g + 1) * gd)?;
            let a = tape.gelu(&tape.matmul(&xm2, &w1)?)?;
            let term = tape.matmul(&a, &w2)?;
            mlp_acc = Some(match mlp_acc {
                None => term,
                Some(acc) => tape.add(&acc, &term)?,
            });
        }
        let gated_mlp = tape.mul(
            &mlp_acc.expect("at least one group"),
            &tape.broadcast(&mods.gate_mlp, n, c, BroadcastAxis::Cols)?,
        )?;
        tape.add(&x2, &gated_mlp)
    }
}

/// The surviving weights of one block after width slicing, as standalone
/// tensors (one per active head / group).
#[derive(Debug, Clone)]
pub struct SlicedBlock {
    pub heads: Vec<usize>,
    pub groups: Vec<usize>,
    head_dim: usize,
    w_q: Vec<Tensor>,
    w_k: Vec<Tensor>,
    w_v: Vec<Tensor>,
    w_o: Vec<Tensor>,
    w_1: Vec<Tensor>,
    w_2: Vec<Tensor>,
}

impl SlicedBlock {
    /// Attention half: residual plus the gated sum of the active heads.
    pub fn attn_part(&self, tape: &Tape, x: &Tensor, mods: &Modulation) -> Result<Tensor> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let xm = modulate(tape, &tape.layer_norm(x, LN_EPS)?, &mods.shift_attn, &mods.scale_attn)?;
        let mut acc: Option<Tensor> = None;
        for i in 0..self.heads.len() {
            let o = attn_head(tape, &xm, &self.w_q[i], &self.w_k[i], &self.w_v[i], self.head_dim)?;
            let term = tape.matmul(&o, &self.w_o[i])?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(&a, &term)?,
            });
        }
        let gated = tape.mul(
            &acc.expect("sliced block keeps at least one head"),
            &tape.broadcast(&mods.gate_attn, n, c, BroadcastAxis::Cols)?,
        )?;
        tape.add(x, &gated)
    }

    /// MLP half: gather the kept token rows, run the active channel groups,
    /// scatter the results back over a zero base, gate, and add.
    pub fn mlp_part(
        &self,
        tape: &Tape,
        x2: &Tensor,
        mods: &Modulation,
        token_active: &[bool],
    ) -> Result<Tensor> {
        let (n, c) = (x2.shape()[0], x2.shape()[1]);
        if token_active.len() != n {
            return Err(DyError::invalid(format!(
                "token mask has {} entries for {n} rows",
                token_active.len()
            )));
        }
        let kept = token_active.iter().filter(|&&b| b).count();
        if kept == 0 {
            // Every token rides the residual stream untouched.
            return Ok(x2.clone());
        }
        let xm2 = modulate(tape, &tape.layer_norm(x2, LN_EPS)?, &mods.shift_mlp, &mods.scale_mlp)?;
        let gathered = tape.gather_rows(&xm2, token_active)?;
        let mut acc: Option<Tensor> = None;
        for i in 0..self.groups.len() {
            let a = tape.gelu(&tape.matmul(&gathered, &self.w_1[i])?)?;
            let term = tape.matmul(&a, &self.w_2[i])?;
            acc = Some(match acc {
                None => term,
                Some(t) => tape.add(&t, &term)?,
            });
        }
        let zeros = Tensor::zeros(&[n, c])?;
        let scattered = tape.scatter_rows(
            &acc.expect("sliced block keeps at least one group"),
            &zeros,
            token_active,
        )?;
        let gated = tape.mul(
            &scattered,
            &tape.broadcast(&mods.gate_mlp, n, c, BroadcastAxis::Cols)?,
        )?;
        tape.add(x2, &gated)
    }

    /// Whole block with the token decisions already made. This is the unit
    /// whose traced matrix products the budget model counts.
    pub fn forward_core(
        &self,
        tape: &Tape,
        x: &Tensor,
        mods: &Modulation,
        token_active: &[bool],
    ) -> Result<Tensor> {
        let x2 = self.attn_part(tape, x, mods)?;
        self.mlp_part(tape, &x2, mods, token_active)
    }
}

/// Shift-scale conditioning applied to a normalized activation matrix:
/// `x * (1 + scale) + shift`, rows conditioned identically.
fn modulate(tape: &Tape, x_norm: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let (n, c) = (x_norm.shape()[0], x_norm.shape()[1]);
    let ones = Tensor::full(&[1, c], 1.0)?;
    let one_plus = tape.add(scale, &ones)?;
    let scaled = tape.mul(x_norm, &tape.broadcast(&one_plus, n, c, BroadcastAxis::Cols)?)?;
    tape.add(&scaled, &tape.broadcast(shift, n, c, BroadcastAxis::Cols)?)
}

/// Single-head scaled dot-product attention over pre-modulated tokens.
fn attn_head(
    tape: &Tape,
    xm: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    head_dim: usize,
) -> Result<Tensor> {
    let q = tape.matmul(xm, w_q)?;
    let k = tape.matmul(xm, w_k)?;
    let v = tape.matmul(xm, w_v)?;
    let scores = tape.scale(&tape.matmul(&q, &tape.transpose(&k)?)?, 1.0 / (head_dim as f64).sqrt())?;
    let attn = tape.softmax_rows(&scores)?;
    tape.matmul(&attn, &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            channels: 16,
            heads: 4,
            patch: 4,
            extent: 8,
            image_channels: 3,
            classes: 4,
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Tensor {
        let vals: Vec<f32> = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Tensor::from_vec(&[rows, cols], vals).unwrap()
    }

    /// A block whose conditioning projection is nonzero, so gates and shifts
    /// actually do something.
    fn lively_block(config: &ModelConfig, seed: u64) -> Block {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Block::init(config, &mut rng);
        let c = config.channels;
        b.ada_w = random_matrix(&mut rng, c, 6 * c, 0.3).with_requires_grad(true);
        b.ada_b = random_matrix(&mut rng, 1, 6 * c, 0.3).with_requires_grad(true);
        // Spread router biases across the threshold so routing is nontrivial.
        let spread = |units: usize, rng: &mut ChaCha8Rng| {
            let vals: Vec<f32> = (0..units).map(|_| rng.random_range(-1.5..1.5)).collect();
            Tensor::from_vec(&[1, units], vals).unwrap().with_requires_grad(true)
        };
        b.router_head.bias = spread(config.heads, &mut rng);
        b.router_channel.bias = spread(config.groups(), &mut rng);
        b.router_token.bias = spread(1, &mut rng);
        b
    }

    #[test]
    fn zero_conditioning_makes_the_block_an_identity() {
        let config = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Block::init(&config, &mut rng);
        let x = random_matrix(&mut rng, config.tokens(), config.channels, 1.0);
        let e = random_matrix(&mut rng, 1, config.channels, 1.0);
        let tape = Tape::off();
        let y = block.forward_full(&tape, &x, &e).unwrap();
        assert_eq!(x.data(), y.data(), "zero gates must pass input through");
    }

    #[test]
    fn masked_training_pass_equals_sliced_inference_pass() {
        let config = toy_config();
        let block = lively_block(&config, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = config.tokens();
        let x = random_matrix(&mut rng, n, config.channels, 1.0);
        let e = random_matrix(&mut rng, 1, config.channels, 1.0);
        let e_t = random_matrix(&mut rng, 1, config.channels, 1.0);

        let tape = Tape::grad();
        let noise = BlockNoise::silent(&config);
        let (train_out, usage) = block
            .forward_train(&tape, &x, &e, &e_t, 0, 0, &noise)
            .unwrap();

        // Replicate the decisions the silent training pass made.
        let off = Tape::off();
        let head_route =
            route_width(&off, &e_t, &block.router_head, 0, RouteMode::Eval).unwrap();
        let group_route =
            route_width(&off, &e_t, &block.router_channel, 0, RouteMode::Eval).unwrap();
        let heads: Vec<usize> = (0..config.heads).filter(|&h| head_route.active[h]).collect();
        let groups: Vec<usize> = (0..config.groups()).filter(|&g| group_route.active[g]).collect();
        let sliced = block.slice_for(&config, &heads, &groups).unwrap();
        let mods = block.modulation(&off, &e).unwrap();
        let x2 = sliced.attn_part(&off, &x, &mods).unwrap();
        let token_route = route_tokens(&off, &x2, &block.router_token, RouteMode::Eval).unwrap();
        let eval_out = sliced.mlp_part(&off, &x2, &mods, &token_route.active).unwrap();

        assert!(
            max_abs_diff(&train_out, &eval_out) == 0.0,
            "paths diverged by {}",
            max_abs_diff(&train_out, &eval_out)
        );
        assert_eq!(usage.head_sum.item().unwrap() as usize, heads.len());
        assert_eq!(usage.group_sum.item().unwrap() as usize, groups.len());
        assert_eq!(
            usage.token_sum.item().unwrap() as usize,
            token_route.active.iter().filter(|&&b| b).count()
        );
    }

    #[test]
    fn sliced_pass_with_everything_active_equals_full_pass() {
        let config = toy_config();
        let block = lively_block(&config, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, config.tokens(), config.channels, 1.0);
        let e = random_matrix(&mut rng, 1, config.channels, 1.0);
        let off = Tape::off();
        let full = block.forward_full(&off, &x, &e).unwrap();
        let all_heads: Vec<usize> = (0..config.heads).collect();
        let all_groups: Vec<usize> = (0..config.groups()).collect();
        let sliced = block.slice_for(&config, &all_heads, &all_groups).unwrap();
        let mods = block.modulation(&off, &e).unwrap();
        let out = sliced
            .forward_core(&off, &x, &mods, &vec![true; config.tokens()])
            .unwrap();
        assert_eq!(full.data(), out.data());
    }

    #[test]
    fn skipped_tokens_ride_the_residual_stream() {
        let config = toy_config();
        let block = lively_block(&config, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = config.tokens();
        let x = random_matrix(&mut rng, n, config.channels, 1.0);
        let e = random_matrix(&mut rng, 1, config.channels, 1.0);
        let off = Tape::off();
        let sliced = block.slice_for(&config, &[0, 2], &[1, 3]).unwrap();
        let mods = block.modulation(&off, &e).unwrap();
        let x2 = sliced.attn_part(&off, &x, &mods).unwrap();
        let mut mask = vec![true; n];
        mask[1] = false;
        mask[3] = false;
        let out = sliced.mlp_part(&off, &x2, &mods, &mask).unwrap();
        let c = config.channels;
        for &row in &[1usize, 3] {
            assert_eq!(
                &out.data()[row * c..(row + 1) * c],
                &x2.data()[row * c..(row + 1) * c],
                "skipped row {row} must be untouched"
            );
        }
        // A kept row does change (gates are nonzero for this block).
        assert_ne!(&out.data()[0..c], &x2.data()[0..c]);
        // All tokens skipped: the MLP half is a no-op.
        let none = sliced.mlp_part(&off, &x2, &mods, &vec![false; n]).unwrap();
        assert_eq!(none.data(), x2.data());
    }

    #[test]
    fn training_pass_reaches_every_parameter_with_gradients() {
        let config = toy_config();
        let block = lively_block(&config, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_matrix(&mut rng, config.tokens(), config.channels, 1.0);
        let e = random_matrix(&mut rng, 1, config.channels, 1.0);
        let e_t = random_matrix(&mut rng, 1, config.channels, 1.0);
        let tape = Tape::grad();
        let mut noise = BlockNoise::silent(&config);
        // Mild noise so some decisions sit on either side of the threshold.
        let mut nrng = ChaCha8Rng::seed_from_u64(99);
        noise.head = crate::routing::logistic_noise(&mut nrng, config.heads);
        noise.channel = crate::routing::logistic_noise(&mut nrng, config.groups());
        noise.token = crate::routing::logistic_noise(&mut nrng, config.tokens());
        let (out, usage) = block
            .forward_train(&tape, &x, &e, &e_t, 1, 2, &noise)
            .unwrap();
        let target = random_matrix(&mut rng, config.tokens(), config.channels, 1.0);
        let fit = tape.mean_squared_error(&out, &target).unwrap();
        let budget = tape.add(
            &tape.add(&usage.head_sum, &usage.group_sum).unwrap(),
            &usage.token_sum,
        ).unwrap();
        let loss = tape.add(&fit, &tape.mean(&budget).unwrap()).unwrap();
        let grads = tape.reverse_accumulate(&loss).unwrap();
        for (name, t) in [
            ("w_q", &block.w_q),
            ("w_o", &block.w_o),
            ("w_1", &block.w_1),
            ("w_2", &block.w_2),
            ("ada_w", &block.ada_w),
            ("router_head.weight", &block.router_head.weight),
            ("router_channel.weight", &block.router_channel.weight),
            ("router_token.weight", &block.router_token.weight),
        ] {
            let g = grads.get(t).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "gradient for {name} is all zero"
            );
        }
    }

    #[test]
    fn budget_loss_alone_moves_only_the_routers() {
        let config = toy_config();
        let block = lively_block(&config, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_matrix(&mut rng, config.tokens(), config.channels, 1.0);
        let e = random_matrix(&mut rng, 1, config.channels, 1.0);
        let e_t = random_matrix(&mut rng, 1, config.channels, 1.0);
        let tape = Tape::grad();
        let noise = BlockNoise::silent(&config);
        let (_, usage) = block
            .forward_train(&tape, &x, &e, &e_t, 1, 2, &noise)
            .unwrap();
        let budget = tape.add(
            &tape.add(&usage.head_sum, &usage.group_sum).unwrap(),
            &usage.token_sum,
        ).unwrap();
        let grads = tape.reverse_accumulate(&budget).unwrap();
        for (name, t) in [
            ("router_head.weight", &block.router_head.weight),
            ("router_channel.weight", &block.router_channel.weight),
            ("router_token.weight", &block.router_token.weight),
        ] {
            let g = grads.get(t).unwrap_or_else(|| panic!("no leaf for {name}"));
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "budget must reach {name}"
            );
        }
        for (name, t) in [
            ("w_q", &block.w_q),
            ("w_k", &block.w_k),
            ("w_v", &block.w_v),
            ("w_o", &block.w_o),
            ("w_1", &block.w_1),
            ("w_2", &block.w_2),
            ("ada_w", &block.ada_w),
            ("ada_b", &block.ada_b),
        ] {
            let g = grads.get(t).unwrap_or_else(|| panic!("no leaf for {name}"));
            assert!(
                g.data().iter().all(|&v| v == 0.0),
                "budget gradient leaked into {name}"
            );
        }
    }

    #[test]
    fn slice_for_rejects_empty_or_out_of_range_units() {
        let config = toy_config();
        let block = lively_block(&config, 37);
        assert!(block.slice_for(&config, &[], &[0]).is_err());
        assert!(block.slice_for(&config, &[0], &[]).is_err());
        assert!(block.slice_for(&config, &[4], &[0]).is_err());
        assert!(block.slice_for(&config, &[0], &[9]).is_err());
    }
}
