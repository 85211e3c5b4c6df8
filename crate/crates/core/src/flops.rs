//! Cost accounting for width- and token-gated inference.
//!
//! Convention: a matrix product `(a x b)(b x c)` costs `2abc` floating-point
//! operations (each multiply and each accumulate counts as one). The budget
//! covers the work that routing can actually change: the attention and MLP
//! matrix products. Fixed per-pass overhead (patch embedding, conditioning
//! projection, routing itself, the read-out) is the same for every width
//! choice, so it appears on neither side of the ratio.
//!
//! Per active attention head over N tokens of width C with head width
//! `C_H = C/H`: the Q/K/V projections cost `3 * 2*N*C*C_H`, the score and
//! value products cost `2*N*N*C_H` each, and the output row-block costs
//! `2*N*C_H*C`, for `8*N*C*C_H + 4*N^2*C_H` in total. Per active MLP channel
//! group over `n` kept tokens with group width `D_H = 4C/H`: the up and down
//! projections cost `2*n*C*D_H` each, so `4*n*C*D_H`.
//!
//! Two independent implementations are kept in deliberate tension: the
//! closed-form counts below, and [`matmul_flop_count`], which walks a
//! recorded computation and prices every matrix product it actually finds.
//! Tests hold them exactly equal.

use crate::dit::{BlockUsage, LayerUsage, ModelConfig};
use crate::error::Result;
use crate::numerics::{ComputationRecord, Tape, Tensor};

/// Cost of one active attention head: `8*N*C*C_H + 4*N^2*C_H`.
pub fn head_flops(config: &ModelConfig) -> u64 {
    let n = config.tokens() as u64;
    let c = config.channels as u64;
    let ch = config.head_dim() as u64;
    8 * n * c * ch + 4 * n * n * ch
}

/// Cost of one active MLP channel group applied to one kept token:
/// `4*C*D_H`.
pub fn group_token_flops(config: &ModelConfig) -> u64 {
    let c = config.channels as u64;
    let dh = config.group_dim() as u64;
    4 * c * dh
}

/// Cost of one layer given its active unit counts.
pub fn layer_flops(config: &ModelConfig, usage: &LayerUsage) -> u64 {
    usage.heads as u64 * head_flops(config)
        + usage.groups as u64 * usage.tokens as u64 * group_token_flops(config)
}

/// Cost of one full forward pass given per-layer usage.
pub fn dynamic_flops(config: &ModelConfig, usage: &[LayerUsage]) -> u64 {
    usage.iter().map(|u| layer_flops(config, u)).sum()
}

/// Cost of one forward pass with nothing gated off.
pub fn static_flops(config: &ModelConfig) -> u64 {
    let full = LayerUsage {
        heads: config.heads,
        groups: config.groups(),
        tokens: config.tokens(),
    };
    config.layers as u64 * layer_flops(config, &full)
}

/// Dynamic-over-static cost ratio for one pass.
pub fn flops_ratio(config: &ModelConfig, usage: &[LayerUsage]) -> f64 {
    dynamic_flops(config, usage) as f64 / static_flops(config) as f64
}

/// Differentiable cost ratio of one training pass, built from the gate sums
/// so budget pressure reaches the routers. Shape `[1]`.
pub fn ratio_tensor(tape: &Tape, config: &ModelConfig, usage: &[BlockUsage]) -> Result<Tensor> {
    let a = head_flops(config) as f64;
    let b = group_token_flops(config) as f64;
    let mut acc: Option<Tensor> = None;
    for u in usage {
        let attn = tape.scale(&u.head_sum, a)?;
        let mlp = tape.scale(&tape.mul(&u.group_sum, &u.token_sum)?, b)?;
        let term = tape.add(&attn, &mlp)?;
        acc = Some(match acc {
            None => term,
            Some(t) => tape.add(&t, &term)?,
        });
    }
    let total = acc.ok_or_else(|| crate::error::DyError::invalid("ratio of zero layers"))?;
    tape.scale(&total, 1.0 / static_flops(config) as f64)
}

/// Budget penalty `(ratio - target)^2` as a differentiable scalar.
pub fn budget_loss(tape: &Tape, ratio: &Tensor, target: f64) -> Result<Tensor> {
    let t = Tensor::scalar(target as f32);
    tape.square(&tape.sub(ratio, &t)?)
}

/// Price every matrix product in a recorded computation at `2abc`. This is
/// the oracle held against the closed-form counts above.
pub fn matmul_flop_count(record: &ComputationRecord) -> u64 {
    let mut total = 0u64;
    for op in record.ops() {
        if op.name == "matmul" {
            let a = op.input_shapes[0][0] as u64;
            let b = op.input_shapes[0][1] as u64;
            let c = op.input_shapes[1][1] as u64;
            total += 2 * a * b * c;
        }
    }
    total
}

/// Matrix-product cost of one ungated whole-model pass, measured by tracing
/// the recorded program. Unlike the budget, this includes the embedding,
/// conditioning, and read-out products, so it is strictly larger than
/// [`static_flops`]; reports print it alongside the budgeted numbers.
pub fn whole_model_matmul_flops(model: &crate::dit::DitModel) -> Result<u64> {
    let image = vec![0.0f32; model.config.image_len()];
    let tape = Tape::trace();
    model.forward_full(&tape, &image, 1, 0)?;
    Ok(matmul_flop_count(&tape.finish()))
}

/// One row of the sampling cost table: what one layer did at one visited
/// timestep, aggregated over every model evaluation the sampler ran there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub t: usize,
    pub layer: usize,
    /// Active heads per evaluation (width is a function of `t` alone).
    pub heads: usize,
    /// Active MLP channel groups per evaluation.
    pub groups: usize,
    /// Kept tokens summed over all evaluations at this timestep.
    pub tokens: u64,
    /// Model evaluations at this timestep (samples x guidance passes).
    pub evals: u64,
    /// Exact gated cost of those evaluations for this layer.
    pub f_dynamic: u64,
    /// Exact ungated cost of the same evaluations for this layer.
    pub f_static: u64,
}

impl LayerRow {
    /// Build a row from per-layer counts, pricing it with the closed forms.
    pub fn priced(
        config: &ModelConfig,
        t: usize,
        layer: usize,
        heads: usize,
        groups: usize,
        tokens: u64,
        evals: u64,
    ) -> LayerRow {
        let f_dynamic =
            evals * heads as u64 * head_flops(config) + groups as u64 * tokens * group_token_flops(config);
        let full = LayerUsage {
            heads: config.heads,
            groups: config.groups(),
            tokens: config.tokens(),
        };
        let f_static = evals * layer_flops(config, &full);
        LayerRow { t, layer, heads, groups, tokens, evals, f_dynamic, f_static }
    }

    pub fn ratio(&self) -> f64 {
        self.f_dynamic as f64 / self.f_static as f64
    }
}

/// Per-(timestep, layer) cost table for one sampling run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    /// Visit order: timesteps descending, layers ascending within each.
    pub rows: Vec<LayerRow>,
}

impl FlopsReport {
    pub fn total_dynamic(&self) -> u64 {
        self.rows.iter().map(|r| r.f_dynamic).sum()
    }

    pub fn total_static(&self) -> u64 {
        self.rows.iter().map(|r| r.f_static).sum()
    }

    /// Model evaluations the run took, each counted once (layer 0 stands in
    /// for the whole pass).
    pub fn evals(&self) -> u64 {
        self.rows.iter().filter(|r| r.layer == 0).map(|r| r.evals).sum()
    }

    /// Dynamic-over-static cost of the whole run.
    pub fn ratio(&self) -> f64 {
        self.total_dynamic() as f64 / self.total_static() as f64
    }

    /// Tab-separated table, one row per (timestep, layer), with a header.
    pub fn write_tsv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "timestep\tlayer\tactive_heads\tactive_groups\tactive_tokens\tF_dynamic\tF_static\tratio"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
                r.t, r.layer, r.heads, r.groups, r.tokens, r.f_dynamic, r.f_static, r.ratio()
            )?;
        }
        Ok(())
    }
}
