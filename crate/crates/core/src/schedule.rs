//! Noise schedule and deterministic (eta = 0) DDIM stepping.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::VideoTensor;

/// A diffusion timestep. `0` is clean data; `num_train_steps` is the noisiest.
pub type Timestep = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_inference_steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            num_train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            num_inference_steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=num_train_steps`; `alpha_bars[0] == 1`.
    alpha_bars: Vec<f64>,
    /// Strictly decreasing, ending at `t = 1`.
    inference_steps: Vec<Timestep>,
}

/// Linear beta schedule with evenly spaced inference steps.
pub fn make_schedule(
    num_train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    num_inference_steps: usize,
) -> Result<Schedule> {
    Schedule::new(ScheduleParams {
        num_train_steps,
        beta_start,
        beta_end,
        num_inference_steps,
    })
}

impl Schedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            num_train_steps: n,
            beta_start,
            beta_end,
            num_inference_steps: s,
        } = params;
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::domain(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        if s < 2 || s > n {
            return Err(Error::domain(format!(
                "need 2 <= num_inference_steps <= num_train_steps, got {s} and {n}"
            )));
        }
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(n + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0] || w[1] <= 0.0) {
            return Err(Error::domain("cumulative alphas underflow; schedule too long"));
        }
        let ratio = n / s;
        let inference_steps = (0..s).rev().map(|k| k * ratio + 1).collect();
        Ok(Self {
            params,
            betas,
            alpha_bars,
            inference_steps,
        })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn num_train_steps(&self) -> usize {
        self.params.num_train_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: Timestep) -> f64 {
        self.alpha_bars[t]
    }

    pub fn inference_steps(&self) -> &[Timestep] {
        &self.inference_steps
    }

    pub fn num_inference_steps(&self) -> usize {
        self.inference_steps.len()
    }

    /// `(t, t_prev)` pairs visited by the sampler, noisiest first, ending at `(1, 0)`.
    pub fn sampling_pairs(&self) -> Vec<(Timestep, Timestep)> {
        let steps = &self.inference_steps;
        steps
            .iter()
            .enumerate()
            .map(|(k, &t)| (t, steps.get(k + 1).copied().unwrap_or(0)))
            .collect()
    }

    /// `(t_prev, t)` pairs visited by inversion, cleanest first.
    pub fn inversion_pairs(&self) -> Vec<(Timestep, Timestep)> {
        self.sampling_pairs()
            .into_iter()
            .rev()
            .map(|(t, tp)| (tp, t))
            .collect()
    }

    /// Stable hex digest of the schedule parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.params.num_train_steps as u64).to_le_bytes());
        h.update(self.params.beta_start.to_bits().to_le_bytes());
        h.update(self.params.beta_end.to_bits().to_le_bytes());
        for &t in &self.inference_steps {
            h.update((t as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_timestep(&self, t: Timestep) -> Result<()> {
        if t > self.params.num_train_steps {
            return Err(Error::domain(format!(
                "timestep {t} exceeds {}",
                self.params.num_train_steps
            )));
        }
        Ok(())
    }

    /// Coefficients `(a, b)` with `x_{t_prev} = a * x_t + b * eps`.
    pub fn step_coefficients(&self, t: Timestep, t_prev: Timestep) -> Result<(f64, f64)> {
        if t_prev >= t {
            return Err(Error::domain(format!("t_prev ({t_prev}) must be < t ({t})")));
        }
        self.check_timestep(t)?;
        Ok(self.transfer(t, t_prev))
    }

    /// Coefficients of the deterministic transfer from level `from` to `to`,
    /// in either direction.
    fn transfer(&self, from: Timestep, to: Timestep) -> (f64, f64) {
        let (af, at) = (self.alpha_bars[from], self.alpha_bars[to]);
        let a = (at / af).sqrt();
        let b = (1.0 - at).sqrt() - a * (1.0 - af).sqrt();
        (a, b)
    }
}

fn apply(x: &VideoTensor, eps: &VideoTensor, (a, b): (f64, f64)) -> Result<VideoTensor> {
    x.lincomb(a, eps, b)
}

/// One deterministic DDIM denoising step from `t` down to `t_prev`.
pub fn ddim_step(
    x_t: &VideoTensor,
    eps: &VideoTensor,
    t: Timestep,
    t_prev: Timestep,
    schedule: &Schedule,
) -> Result<VideoTensor> {
    x_t.ensure_same_shape(eps)?;
    let coef = schedule.step_coefficients(t, t_prev)?;
    apply(x_t, eps, coef)
}

/// Exact algebraic inverse of [`ddim_step`] under the same `eps`.
pub fn ddim_inverse_step(
    x_t_prev: &VideoTensor,
    eps: &VideoTensor,
    t_prev: Timestep,
    t: Timestep,
    schedule: &Schedule,
) -> Result<VideoTensor> {
    x_t_prev.ensure_same_shape(eps)?;
    schedule.step_coefficients(t, t_prev)?;
    apply(x_t_prev, eps, schedule.transfer(t_prev, t))
}

/// Sample from `q(x_t | x_0)` given the noise draw.
pub fn add_noise(
    x_0: &VideoTensor,
    noise: &VideoTensor,
    t: Timestep,
    schedule: &Schedule,
) -> Result<VideoTensor> {
    x_0.ensure_same_shape(noise)?;
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bar(t);
    x_0.lincomb(ab.sqrt(), noise, (1.0 - ab).sqrt())
}
