//! Forward corruption process and reverse samplers.
//!
//! Linear beta schedule, epsilon-prediction parameterization, fixed posterior
//! variance. Steps operate on raw `f32` image buffers (the denoiser itself is
//! differentiated elsewhere; the samplers are never part of a gradient path),
//! with all arithmetic carried in `f64`.

use crate::error::{DyError, Result};

/// Precomputed noise schedule over `1..=timesteps`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
    posterior_variance: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear schedule from `beta_start` to `beta_end` over `timesteps`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(DyError::invalid("diffusion schedule needs at least 2 steps"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DyError::invalid(format!(
                "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
            )));
        }
        let n = timesteps;
        let betas: Vec<f64> = (0..n)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let mut alphas_cumprod = Vec::with_capacity(n);
        let mut acc = 1.0f64;
        for &b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        // posterior variance: (1 - abar_{t-1}) / (1 - abar_t) * beta_t for
        // t >= 2; the t = 1 entry is defined as beta_1 (the general formula
        // degenerates to 0 there, and the t = 1 reverse step never adds
        // noise anyway, so this entry only affects what the accessor shows).
        let posterior_variance: Vec<f64> = (0..n)
            .map(|i| {
                if i == 0 {
                    betas[0]
                } else {
                    (1.0 - alphas_cumprod[i - 1]) / (1.0 - alphas_cumprod[i]) * betas[i]
                }
            })
            .collect();
        Ok(DiffusionSchedule {
            timesteps,
            beta_start,
            beta_end,
            betas,
            alphas_cumprod,
            posterior_variance,
        })
    }

    /// The desk-scale default: 100 steps, betas 1e-4 to 0.02.
    pub fn toy() -> Self {
        DiffusionSchedule::linear(100, 1e-4, 0.02).expect("toy schedule is valid")
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(DyError::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps
            )));
        }
        Ok(())
    }

    /// beta_t for t in [1, T].
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative product of alphas through t; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alphas_cumprod[t - 1])
    }

    /// Fixed reverse-process variance at step t.
    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.posterior_variance[t - 1])
    }

    /// Corrupt a clean image: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
    pub fn q_sample(&self, x0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(DyError::invalid(format!(
                "q_sample: image has {} elements, noise has {}",
                x0.len(),
                eps.len()
            )));
        }
        let ab = self.alphas_cumprod[t - 1];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
            .collect())
    }

    /// One ancestral step: mean from the epsilon estimate plus fixed-variance
    /// noise. The final step (t = 1) is deterministic and demands `z` be all
    /// zeros, because no noise may enter the finished image.
    pub fn ddpm_step(&self, xt: &[f32], eps_hat: &[f32], t: usize, z: &[f32]) -> Result<Vec<f32>> {
        self.check_t(t)?;
        if xt.len() != eps_hat.len() || xt.len() != z.len() {
            return Err(DyError::invalid("ddpm_step: buffer lengths disagree"));
        }
        if t == 1 && z.iter().any(|&v| v != 0.0) {
            return Err(DyError::invalid(
                "ddpm_step: the t = 1 step is deterministic; pass all-zero z",
            ));
        }
        let beta = self.betas[t - 1];
        let alpha = 1.0 - beta;
        let ab = self.alphas_cumprod[t - 1];
        let mean_scale = 1.0 / alpha.sqrt();
        let eps_scale = beta / (1.0 - ab).sqrt();
        let sigma = if t == 1 {
            0.0
        } else {
            self.posterior_variance[t - 1].sqrt()
        };
        Ok(xt
            .iter()
            .zip(eps_hat)
            .zip(z)
            .map(|((&x, &e), &n)| {
                (mean_scale * (x as f64 - eps_scale * e as f64) + sigma * n as f64) as f32
            })
            .collect())
    }

    /// One deterministic (eta = 0) step from t down to t_prev (t_prev may be
    /// 0, meaning the clean-image estimate itself).
    pub fn ddim_step(
        &self,
        xt: &[f32],
        eps_hat: &[f32],
        t: usize,
        t_prev: usize,
    ) -> Result<Vec<f32>> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(DyError::invalid(format!(
                "ddim_step: t_prev {t_prev} must be below t {t}"
            )));
        }
        if xt.len() != eps_hat.len() {
            return Err(DyError::invalid("ddim_step: buffer lengths disagree"));
        }
        let ab = self.alphas_cumprod[t - 1];
        let ab_prev = if t_prev == 0 {
            1.0
        } else {
            self.alphas_cumprod[t_prev - 1]
        };
        let sqrt_ab = ab.sqrt();
        let dir = (1.0 - ab).sqrt();
        let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        Ok(xt
            .iter()
            .zip(eps_hat)
            .map(|(&x, &e)| {
                let x0 = (x as f64 - dir * e as f64) / sqrt_ab;
                (a * x0 + b * e as f64) as f32
            })
            .collect())
    }
}

/// Classifier-free guidance: eps_u + w (eps_c - eps_u). The endpoints are
/// exact: w = 1 returns the conditional branch bit-for-bit, w = 0 the
/// unconditional one.
pub fn cfg_combine(eps_c: &[f32], eps_u: &[f32], w: f64) -> Result<Vec<f32>> {
    if eps_u.len() != eps_c.len() {
        return Err(DyError::invalid("cfg_combine: buffer lengths disagree"));
    }
    if w == 1.0 {
        return Ok(eps_c.to_vec());
    }
    if w == 0.0 {
        return Ok(eps_u.to_vec());
    }
    Ok(eps_u
        .iter()
        .zip(eps_c)
        .map(|(&u, &c)| (u as f64 + w * (c as f64 - u as f64)) as f32)
        .collect())
}

/// Mean squared error with 64-bit accumulation (evaluation-side loss).
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse wants matching lengths");
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// The decreasing timestep sequence a k-step deterministic sampler visits:
/// evenly strided, always ending (highest) at T.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(DyError::invalid(format!(
            "sampler steps {steps} outside [1, {timesteps}]"
        )));
    }
    let mut ts: Vec<usize> = (1..=steps).map(|i| i * timesteps / steps).collect();
    ts.reverse();
    Ok(ts)
}
