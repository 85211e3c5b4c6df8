//! Width and token routers.
//!
//! A router is a single linear layer whose sigmoid outputs are thresholded at
//! 0.5 into keep/skip decisions. During training the decisions stay hard in
//! the forward pass but receive gradients through the soft sigmoid via a
//! straight-through estimator, with logistic (Gumbel-sigmoid) noise injected
//! before the threshold so that near-boundary units keep exploring. One unit
//! per layer is "protected": its decision is pinned to keep, in training and
//! evaluation alike, so a layer can never collapse to zero width.

use crate::error::{DyError, Result};
use crate::numerics::{BroadcastAxis, Tape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Linear gate: `in_dim` features to `out_dim` keep/skip logits.
#[derive(Debug, Clone)]
pub struct RouterParams {
    /// `in_dim x out_dim`.
    pub weight: Tensor,
    /// `1 x out_dim`.
    pub bias: Tensor,
}

/// Initial router bias. sigmoid(2) is roughly 0.88, so every unit starts
/// active and the budget pressure has to argue units off.
pub const ROUTER_BIAS_INIT: f64 = 2.0;

impl RouterParams {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let dist = Normal::new(0.0f64, 0.02).expect("valid normal");
        let w: Vec<f32> = (0..in_dim * out_dim)
            .map(|_| dist.sample(rng) as f32)
            .collect();
        RouterParams {
            weight: Tensor::from_vec(&[in_dim, out_dim], w)
                .expect("router weight shape")
                .with_requires_grad(true),
            bias: Tensor::full(&[1, out_dim], ROUTER_BIAS_INIT as f32)
                .expect("router bias shape")
                .with_requires_grad(true),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Raw gate logits for a batch of feature rows: `x W + b`.
    pub fn logits(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let rows = x.shape()[0];
        let out = self.out_dim();
        let proj = tape.matmul(x, &self.weight)?;
        let b = tape.broadcast(&self.bias, rows, out, BroadcastAxis::Cols)?;
        tape.add(&proj, &b)
    }
}

/// How routing decisions are made for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum RouteMode<'a> {
    /// Hard decisions with straight-through gradients; `noise` holds one
    /// logistic draw per routed unit (pass zeros for a deterministic pass).
    Train { noise: &'a [f64], temperature: f64 },
    /// Plain thresholding, no noise, no gradients.
    Eval,
}

/// Outcome of routing a layer's width units (heads or channel groups).
#[derive(Debug, Clone)]
pub struct WidthRoute {
    /// `1 x units` gate values. Forward data is exactly 0/1 with the
    /// protected unit pinned to 1; in train mode gradients flow to the router
    /// through the unprotected coordinates.
    pub mask: Tensor,
    /// Same forward values as `mask`, but its soft path is built from a
    /// detached copy of the router input, so a loss on the budget reaches
    /// only the router's own weight and bias — never the features below.
    pub budget: Tensor,
    /// Hard decisions with protection applied.
    pub active: Vec<bool>,
}

/// Outcome of routing tokens (one decision per row of `x`).
#[derive(Debug, Clone)]
pub struct TokenRoute {
    /// `n x 1` gate column, forward data exactly 0/1.
    pub mask: Tensor,
    /// Forward-identical twin of `mask` whose gradient stops at the router
    /// (see [`WidthRoute::budget`]).
    pub budget: Tensor,
    /// Hard per-token decisions.
    pub active: Vec<bool>,
}

/// Hard forward, soft backward: `hard + (soft - detach(soft))`. The forward
/// value equals `hard` bit for bit; the gradient is that of `soft`.
pub fn straight_through(tape: &Tape, hard: &Tensor, soft: &Tensor) -> Result<Tensor> {
    let frozen = soft.detach();
    let delta = tape.sub(soft, &frozen)?;
    tape.add(hard, &delta)
}

/// Logistic noise for Gumbel-sigmoid relaxation: ln(u) - ln(1-u).
pub fn logistic_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(1e-7..=1.0 - 1e-7);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

fn hard_from_preactivation(pre: &Tensor) -> (Tensor, Vec<bool>) {
    // Sigmoid(v) >= 0.5 exactly when v >= 0, so a zero-initialised router
    // starts with every unit active.
    let active: Vec<bool> = pre.data().iter().map(|&v| v >= 0.0).collect();
    let vals: Vec<f32> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    let t = Tensor::from_vec(pre.shape(), vals).expect("mask shape");
    (t, active)
}

/// Replace coordinate `protected` of the `1 x units` gate row with a
/// constant 1 so that neither gating nor budget pressure can touch it.
fn pin_protected(tape: &Tape, gate: &Tensor, protected: usize, units: usize) -> Result<Tensor> {
    let mut pieces: Vec<Tensor> = Vec::new();
    if protected > 0 {
        pieces.push(tape.slice(gate, 1, 0, protected)?);
    }
    pieces.push(Tensor::from_vec(&[1, 1], vec![1.0])?);
    if protected + 1 < units {
        pieces.push(tape.slice(gate, 1, protected + 1, units)?);
    }
    let refs: Vec<&Tensor> = pieces.iter().collect();
    if refs.len() == 1 {
        Ok(pieces[0].clone())
    } else {
        tape.concat(&refs, 1)
    }
}

/// Route a layer's width units from the timestep embedding `e_t` (`1 x C`).
/// `protected` is the unit whose decision is pinned to keep.
pub fn route_width(
    tape: &Tape,
    e_t: &Tensor,
    router: &RouterParams,
    protected: usize,
    mode: RouteMode,
) -> Result<WidthRoute> {
    let units = router.out_dim();
    if e_t.rank() != 2 || e_t.shape()[0] != 1 {
        return Err(DyError::invalid("route_width wants a 1 x C embedding row"));
    }
    if protected >= units {
        return Err(DyError::invalid(format!(
            "protected unit {protected} out of range for {units} units"
        )));
    }
    match mode {
        RouteMode::Train { noise, temperature } => {
            if noise.len() != units {
                return Err(DyError::invalid(format!(
                    "route_width wants {units} noise draws, got {}",
                    noise.len()
                )));
            }
            if temperature <= 0.0 {
                return Err(DyError::invalid("temperature must be positive"));
            }
            let noise_t =
                Tensor::from_vec(&[1, units], noise.iter().map(|&v| v as f32).collect())?;
            let logits = router.logits(tape, e_t)?;
            let pre = tape.scale(&tape.add(&logits, &noise_t)?, 1.0 / temperature)?;
            let soft = tape.sigmoid(&pre)?;
            let (hard, mut active) = hard_from_preactivation(&pre);
            let mask = pin_protected(
                tape,
                &straight_through(tape, &hard, &soft)?,
                protected,
                units,
            )?;
            // Budget twin: identical forward bits, but its soft path sees a
            // detached copy of the embedding, so minimising the budget can
            // only move the router itself.
            let logits_frozen = router.logits(tape, &e_t.detach())?;
            let pre_frozen = tape.scale(&tape.add(&logits_frozen, &noise_t)?, 1.0 / temperature)?;
            let soft_frozen = tape.sigmoid(&pre_frozen)?;
            let budget = pin_protected(
                tape,
                &straight_through(tape, &hard, &soft_frozen)?,
                protected,
                units,
            )?;
            active[protected] = true;
            Ok(WidthRoute { mask, budget, active })
        }
        RouteMode::Eval => {
            let logits = router.logits(tape, e_t)?;
            let (_, mut active) = hard_from_preactivation(&logits);
            active[protected] = true;
            let vals: Vec<f32> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
            let mask = Tensor::from_vec(&[1, units], vals)?;
            let budget = mask.clone();
            Ok(WidthRoute { mask, budget, active })
        }
    }
}

/// Route tokens: one decision per row of `x` (`n x C`). No protection; a
/// token that is skipped simply rides the residual stream.
pub fn route_tokens(
    tape: &Tape,
    x: &Tensor,
    router: &RouterParams,
    mode: RouteMode,
) -> Result<TokenRoute> {
    if x.rank() != 2 {
        return Err(DyError::invalid("route_tokens wants an n x C matrix"));
    }
    if router.out_dim() != 1 {
        return Err(DyError::invalid("token router must have a single output"));
    }
    let n = x.shape()[0];
    match mode {
        RouteMode::Train { noise, temperature } => {
            if noise.len() != n {
                return Err(DyError::invalid(format!(
                    "route_tokens wants {n} noise draws, got {}",
                    noise.len()
                )));
            }
            if temperature <= 0.0 {
                return Err(DyError::invalid("temperature must be positive"));
            }
            let noise_t =
                Tensor::from_vec(&[n, 1], noise.iter().map(|&v| v as f32).collect())?;
            let logits = router.logits(tape, x)?;
            let pre = tape.scale(&tape.add(&logits, &noise_t)?, 1.0 / temperature)?;
            let soft = tape.sigmoid(&pre)?;
            let (hard, active) = hard_from_preactivation(&pre);
            let mask = straight_through(tape, &hard, &soft)?;
            let logits_frozen = router.logits(tape, &x.detach())?;
            let pre_frozen = tape.scale(&tape.add(&logits_frozen, &noise_t)?, 1.0 / temperature)?;
            let soft_frozen = tape.sigmoid(&pre_frozen)?;
            let budget = straight_through(tape, &hard, &soft_frozen)?;
            Ok(TokenRoute { mask, budget, active })
        }
        RouteMode::Eval => {
            let logits = router.logits(tape, x)?;
            let (mask, active) = hard_from_preactivation(&logits);
            let budget = mask.clone();
            Ok(TokenRoute { mask, budget, active })
        }
    }
}

/// Which unit of each layer is immune to routing, chosen once by weight
/// magnitude before budgeted training starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtectionIndex {
    /// Per layer: the attention head that always stays on.
    pub heads: Vec<usize>,
    /// Per layer: the MLP channel group that always stays on.
    pub groups: Vec<usize>,
}

/// Axis along which a weight matrix splits into per-unit slices.
#[derive(Debug, Clone, Copy)]
pub enum UnitAxis {
    Columns,
    Rows,
}

/// Index of the unit with the largest combined L2 norm across the given
/// weight matrices. Each matrix divides evenly into `units` slices along its
/// axis; ties resolve to the lowest index.
pub fn strongest_unit(parts: &[(&Tensor, UnitAxis)], units: usize) -> Result<usize> {
    if units == 0 || parts.is_empty() {
        return Err(DyError::invalid("strongest_unit wants units > 0 and parts"));
    }
    let mut scores = vec![0.0f64; units];
    for &(t, axis) in parts {
        if t.rank() != 2 {
            return Err(DyError::invalid("strongest_unit wants rank-2 weights"));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let data = t.data();
        match axis {
            UnitAxis::Columns => {
                if cols % units != 0 {
                    return Err(DyError::invalid(format!(
                        "{cols} columns do not split into {units} units"
                    )));
                }
                let w = cols / units;
                for r in 0..rows {
                    for c in 0..cols {
                        let v = data[r * cols + c] as f64;
                        scores[c / w] += v * v;
                    }
                }
            }
            UnitAxis::Rows => {
                if rows % units != 0 {
                    return Err(DyError::invalid(format!(
                        "{rows} rows do not split into {units} units"
                    )));
                }
                let h = rows / units;
                for r in 0..rows {
                    let unit = r / h;
                    for c in 0..cols {
                        let v = data[r * cols + c] as f64;
                        scores[unit] += v * v;
                    }
                }
            }
        }
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}
