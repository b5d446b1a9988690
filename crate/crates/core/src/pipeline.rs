//! Reference reconstruction pass and guided edit pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionContext, Branch, CrossAttnMaps, TokenMismatch};
use crate::denoiser::{NoisePredictor, TextEmbedding};
use crate::error::{Error, Result};
use crate::inversion::{plain_context, InversionRecord};
use crate::schedule::{ddim_step, Schedule, Timestep};
use crate::tensor::VideoTensor;

/// Settings of one edit run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub target_prompt: String,
    pub guidance_scale: f64,
    pub num_steps: usize,
    /// Fraction of the sampling steps, counted from the noisiest, during which
    /// recorded cross-attention maps are injected.
    pub tau_m: f64,
    /// Fraction of the sampling steps during which the optimized null-text
    /// embeddings drive the unconditional branch.
    pub tau_null: f64,
    pub seed: u64,
    /// Also inject maps into the unconditional branch.
    pub inject_unconditional: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            target_prompt: String::new(),
            guidance_scale: 7.5,
            num_steps: 50,
            tau_m: 0.8,
            tau_null: 0.5,
            seed: 0,
            inject_unconditional: false,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale >= 1.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!("guidance_scale must be >= 1, got {}", self.guidance_scale)));
        }
        if self.num_steps < 2 {
            return Err(Error::Config(format!("num_steps must be >= 2, got {}", self.num_steps)));
        }
        for (name, v) in [("tau_m", self.tau_m), ("tau_null", self.tau_null)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Number of leading sampling steps covered by threshold `tau` out of `steps`.
pub fn active_steps(tau: f64, steps: usize) -> usize {
    // The small slack keeps products like 0.8 * 50 from rounding up.
    ((tau * steps as f64) - 1e-9).ceil().clamp(0.0, steps as f64) as usize
}

/// Classifier-free guided noise estimate `eps_null + w (eps_cond - eps_null)`.
///
/// Both branches run through `ctx`; the conditional branch runs last so its
/// maps are the ones the context records. With `w == 1` the unconditional
/// branch is skipped and the conditional estimate is returned as is.
pub fn cfg_predict<M: NoisePredictor>(
    model: &M,
    x_t: &VideoTensor,
    t: Timestep,
    cond: &TextEmbedding,
    null: &TextEmbedding,
    w: f64,
    ctx: &mut AttentionContext,
) -> Result<VideoTensor> {
    if !(w >= 1.0) {
        return Err(Error::domain(format!("guidance scale must be >= 1, got {w}")));
    }
    if w == 1.0 {
        ctx.set_branch(Branch::Conditional);
        return Ok(model.predict(x_t, t, cond, ctx)?.eps);
    }
    ctx.set_branch(Branch::Unconditional);
    let eps_null = model.predict(x_t, t, null, ctx)?.eps;
    ctx.set_branch(Branch::Conditional);
    let eps_cond = model.predict(x_t, t, cond, ctx)?.eps;
    eps_null.ensure_same_shape(&eps_cond)?;
    let data = eps_null
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + w * (c - u))
        .collect();
    VideoTensor::new(eps_null.shape(), data)
}

fn check_record(inv: &InversionRecord, schedule: &Schedule) -> Result<()> {
    inv.validate()?;
    if inv.timesteps != schedule.inference_steps() {
        return Err(Error::domain(format!(
            "record covers {} steps, schedule has {}",
            inv.num_steps(),
            schedule.num_inference_steps()
        )));
    }
    Ok(())
}

/// Output of [`reconstruct`].
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Final latent in model range.
    pub video: VideoTensor,
    /// Conditional-branch cross-attention maps of every step and layer.
    pub maps: CrossAttnMaps,
}

/// Samples from the end of the inversion trajectory with the source prompt
/// and the optimized null-text embeddings, recording cross-attention maps.
pub fn reconstruct<M: NoisePredictor>(
    inv: &InversionRecord,
    cond: &TextEmbedding,
    model: &M,
    schedule: &Schedule,
    w: f64,
    ctx: &AttentionContext,
) -> Result<Reconstruction> {
    check_record(inv, schedule)?;
    let mut ctx = plain_context(ctx);
    ctx.set_record(true);
    let mut x = inv.start_latent().clone();
    for (k, (t, t_prev)) in schedule.sampling_pairs().into_iter().enumerate() {
        let eps = cfg_predict(model, &x, t, cond, inv.null_for_step(k)?, w, &mut ctx)?;
        x = ddim_step(&x, &eps, t, t_prev, schedule)?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("reconstruction latent at t={t_prev}")));
        }
    }
    Ok(Reconstruction {
        video: x,
        maps: ctx.take_recorded(),
    })
}

/// Instrumentation of one edit pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStats {
    /// Sampling steps with map injection enabled.
    pub injection_steps: usize,
    /// Sampling steps whose unconditional branch used an optimized embedding.
    pub null_steps: usize,
    /// Cross-attention evaluations that actually consumed an injected map.
    pub injections_applied: usize,
}

/// Output of [`edit`].
#[derive(Clone, Debug)]
pub struct EditOutput {
    /// Final latent in model range.
    pub video: VideoTensor,
    pub stats: EditStats,
}

fn check_maps<M: NoisePredictor>(maps: &CrossAttnMaps, model: &M, schedule: &Schedule) -> Result<()> {
    let mut expected: Vec<Timestep> = schedule.inference_steps().to_vec();
    expected.sort_unstable();
    if maps.timesteps() != expected {
        return Err(Error::domain("recorded maps do not cover the schedule's timesteps"));
    }
    let layers: Vec<usize> = (0..model.num_cross_attention_layers()).collect();
    for &t in &expected {
        if maps.layers_at(t) != layers {
            return Err(Error::domain(format!("recorded maps at t={t} do not match the model's layers")));
        }
    }
    Ok(())
}

/// Guided sampling from the end of the inversion trajectory under the target
/// prompt, injecting `maps` for the first `⌈tau_m·S⌉` steps and using the
/// optimized null-text embeddings for the first `⌈tau_null·S⌉` steps (the
/// plain `empty` embedding afterwards).
#[allow(clippy::too_many_arguments)]
pub fn edit<M: NoisePredictor>(
    inv: &InversionRecord,
    maps: Arc<CrossAttnMaps>,
    target: &TextEmbedding,
    empty: &TextEmbedding,
    cfg: &EditConfig,
    model: &M,
    schedule: &Schedule,
    ctx: &AttentionContext,
) -> Result<EditOutput> {
    cfg.validate()?;
    check_record(inv, schedule)?;
    let s = schedule.num_inference_steps();
    if cfg.num_steps != s {
        return Err(Error::domain(format!("edit config asks for {} steps, schedule has {s}", cfg.num_steps)));
    }
    let inject_until = active_steps(cfg.tau_m, s);
    let null_until = active_steps(cfg.tau_null, s);
    if inject_until > 0 {
        check_maps(&maps, model, schedule)?;
    }
    let mut ctx = plain_context(ctx);
    ctx.set_injected(Some(maps));
    ctx.set_token_mismatch(TokenMismatch::LeadingColumns);
    ctx.set_inject_unconditional(cfg.inject_unconditional);
    let mut stats = EditStats::default();
    let mut x = inv.start_latent().clone();
    for (k, (t, t_prev)) in schedule.sampling_pairs().into_iter().enumerate() {
        let inject = k < inject_until;
        ctx.set_injection_active(inject);
        stats.injection_steps += inject as usize;
        let null = if k < null_until {
            stats.null_steps += 1;
            inv.null_for_step(k)?
        } else {
            empty
        };
        let eps = cfg_predict(model, &x, t, target, null, cfg.guidance_scale, &mut ctx)?;
        x = ddim_step(&x, &eps, t, t_prev, schedule)?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("edit latent at t={t_prev}")));
        }
    }
    stats.injections_applied = ctx.injections_applied();
    Ok(EditOutput { video: x, stats })
}

/// Everything one edit run produces.
#[derive(Clone, Debug)]
pub struct EditResult {
    /// Edited video in pixel range.
    pub edited_video: VideoTensor,
    /// Reference reconstruction in pixel range.
    pub reconstruction: VideoTensor,
    pub recorded_maps: Arc<CrossAttnMaps>,
    pub stats: EditStats,
}

/// Reference pass followed by the edit pass.
#[allow(clippy::too_many_arguments)]
pub fn edit_video<M: NoisePredictor>(
    inv: &InversionRecord,
    source: &TextEmbedding,
    target: &TextEmbedding,
    empty: &TextEmbedding,
    cfg: &EditConfig,
    model: &M,
    schedule: &Schedule,
    ctx: &AttentionContext,
) -> Result<EditResult> {
    cfg.validate()?;
    let rec = reconstruct(inv, source, model, schedule, cfg.guidance_scale, ctx)?;
    let maps = Arc::new(rec.maps);
    let out = edit(inv, maps.clone(), target, empty, cfg, model, schedule, ctx)?;
    Ok(EditResult {
        edited_video: out.video.to_pixel_range(),
        reconstruction: rec.video.to_pixel_range(),
        recorded_maps: maps,
        stats: out.stats,
    })
}
