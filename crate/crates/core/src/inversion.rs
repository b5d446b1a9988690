//! DDIM inversion of a real video and per-timestep null-text optimization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionContext, Branch};
use crate::container::{ArrayContainer, NamedArray};
use crate::denoiser::{NoisePredictor, TextEmbedding};
use crate::engine::Adam;
use crate::error::{Error, Result};
use crate::schedule::{ddim_inverse_step, ddim_step, Schedule, Timestep};
use crate::tensor::VideoTensor;

const RECORD_FILE: &str = "record.bin";
const MANIFEST_FILE: &str = "manifest.toml";

/// A context with the same attention modes as `template` and no recording
/// or injection state.
pub(crate) fn plain_context(template: &AttentionContext) -> AttentionContext {
    AttentionContext::new(template.modes().to_vec()).with_run_id(template.run_id.clone())
}

fn ensure_finite(x: &VideoTensor, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Inverts `video` (model range) along the schedule's inference steps with
/// guidance scale 1.
///
/// Returns `S + 1` latents, cleanest first: `trajectory[0]` is the input and
/// `trajectory[S]` the latent at the noisiest inference step. The noise
/// estimate for each step is taken at the current latent, labelled with the
/// timestep being stepped to.
pub fn ddim_invert<M: NoisePredictor>(
    video: &VideoTensor,
    cond: &TextEmbedding,
    model: &M,
    schedule: &Schedule,
    ctx: &AttentionContext,
) -> Result<Vec<VideoTensor>> {
    if video.is_empty() {
        return Err(Error::domain("cannot invert an empty video"));
    }
    ensure_finite(video, "inversion input")?;
    let mut ctx = plain_context(ctx);
    let mut trajectory = Vec::with_capacity(schedule.num_inference_steps() + 1);
    trajectory.push(video.clone());
    for (t_prev, t) in schedule.inversion_pairs() {
        let x = trajectory.last().expect("nonempty");
        let eps = model.predict(x, t, cond, &mut ctx)?.eps;
        let next = ddim_inverse_step(x, &eps, t_prev, t, schedule)?;
        ensure_finite(&next, "inversion latent")?;
        trajectory.push(next);
    }
    Ok(trajectory)
}

/// Settings of the null-text optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NullTextConfig {
    pub inner_steps: usize,
    pub step_size: f64,
    pub guidance_scale: f64,
    /// Per-timestep loss below which no further updates are attempted.
    pub early_stop: f64,
    /// Maximum number of step halvings after a rejected update.
    pub max_halvings: usize,
}

impl Default for NullTextConfig {
    fn default() -> Self {
        Self {
            inner_steps: 1,
            step_size: 1e-2,
            guidance_scale: 7.5,
            early_stop: 1e-5,
            max_halvings: 8,
        }
    }
}

impl NullTextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.guidance_scale >= 1.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!("guidance_scale must be >= 1, got {}", self.guidance_scale)));
        }
        if !(self.early_stop >= 0.0) {
            return Err(Error::Config("early_stop must be non-negative".into()));
        }
        Ok(())
    }
}

/// Result of [`null_text_optimize`], indexed by sampling step (index 0 is the
/// noisiest timestep).
#[derive(Clone, Debug)]
pub struct NullTextOutcome {
    pub null_embeddings: Vec<TextEmbedding>,
    /// Loss after the last accepted update at each step.
    pub per_step_loss: Vec<f64>,
    /// Loss after initialization and after every accepted update, per step.
    pub loss_traces: Vec<Vec<f64>>,
}

/// Sum over frames of the per-frame mean squared difference.
fn frame_loss(x: &VideoTensor, target: &VideoTensor) -> f64 {
    let per = x.frame_len() as f64;
    x.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / per
}

struct StepProblem<'a, M: NoisePredictor> {
    model: &'a M,
    x: &'a VideoTensor,
    t: Timestep,
    eps_cond: VideoTensor,
    target: &'a VideoTensor,
    coef: (f64, f64),
    w: f64,
    ctx: AttentionContext,
}

struct Evaluated<T> {
    loss: f64,
    next: VideoTensor,
    tape: T,
}

impl<M: NoisePredictor> StepProblem<'_, M> {
    fn eval(&mut self, null: &TextEmbedding) -> Result<Evaluated<M::Tape>> {
        let (pred, tape) = self.model.predict_taped(self.x, self.t, null, &mut self.ctx)?;
        let eps = pred.eps.lincomb(1.0 - self.w, &self.eps_cond, self.w)?;
        let next = self.x.lincomb(self.coef.0, &eps, self.coef.1)?;
        let loss = frame_loss(&next, self.target);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("null-text loss at t={}", self.t)));
        }
        Ok(Evaluated { loss, next, tape })
    }

    fn gradient(&self, e: &Evaluated<M::Tape>) -> Result<TextEmbedding> {
        let per = self.x.frame_len() as f64;
        let scale = 2.0 * self.coef.1 * (1.0 - self.w) / per;
        let d_eps = e.next.lincomb(scale, self.target, -scale)?;
        self.model.text_gradient(&e.tape, &d_eps)
    }
}

/// Optimizes one null-text embedding per sampling step so that guided DDIM
/// sampling from the end of `trajectory` tracks the inversion trajectory.
///
/// Each embedding starts from its predecessor (the first from `empty`) and is
/// shared by all frames. An update that would raise the loss is retried with
/// half the step, up to `max_halvings` times, and dropped if none helps.
pub fn null_text_optimize<M: NoisePredictor>(
    trajectory: &[VideoTensor],
    cond: &TextEmbedding,
    empty: &TextEmbedding,
    model: &M,
    schedule: &Schedule,
    ctx: &AttentionContext,
    cfg: &NullTextConfig,
) -> Result<NullTextOutcome> {
    cfg.validate()?;
    let steps = schedule.sampling_pairs();
    if trajectory.len() != steps.len() + 1 {
        return Err(Error::shape(steps.len() + 1, trajectory.len()));
    }
    if cond.shape() != empty.shape() {
        return Err(Error::shape(cond.shape(), empty.shape()));
    }
    let n = steps.len();
    let mut x_bar = trajectory[n].clone();
    let mut null = empty.clone();
    let mut out = NullTextOutcome {
        null_embeddings: Vec::with_capacity(n),
        per_step_loss: Vec::with_capacity(n),
        loss_traces: Vec::with_capacity(n),
    };
    for (k, &(t, t_prev)) in steps.iter().enumerate() {
        let mut cctx = plain_context(ctx);
        let eps_cond = model.predict(&x_bar, t, cond, &mut cctx)?.eps;
        let mut uctx = plain_context(ctx);
        uctx.set_branch(Branch::Unconditional);
        let mut prob = StepProblem {
            model,
            x: &x_bar,
            t,
            eps_cond,
            target: &trajectory[n - 1 - k],
            coef: schedule.step_coefficients(t, t_prev)?,
            w: cfg.guidance_scale,
            ctx: uctx,
        };
        let mut cur = prob.eval(&null)?;
        let mut trace = vec![cur.loss];
        let mut adam = Adam::new(null.data().len(), cfg.step_size as f32);
        for _ in 0..cfg.inner_steps {
            if cur.loss < cfg.early_stop {
                break;
            }
            let grad = prob.gradient(&cur)?;
            let dir = adam.direction(grad.data());
            let mut scale = cfg.step_size as f32;
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let mut cand = null.clone();
                for (p, d) in cand.data_mut().iter_mut().zip(&dir) {
                    *p -= scale * d;
                }
                let e = prob.eval(&cand)?;
                if e.loss <= cur.loss {
                    accepted = Some((cand, e));
                    break;
                }
                scale *= 0.5;
            }
            match accepted {
                Some((cand, e)) => {
                    null = cand;
                    cur = e;
                    trace.push(cur.loss);
                }
                None => break,
            }
        }
        out.null_embeddings.push(null.clone());
        out.per_step_loss.push(cur.loss);
        out.loss_traces.push(trace);
        ensure_finite(&cur.next, "null-text latent")?;
        x_bar = cur.next;
    }
    Ok(out)
}

/// DDIM inversion trajectory plus optimized null-text embeddings of one video.
#[derive(Clone, Debug)]
pub struct InversionRecord {
    /// Latents in model range, cleanest first; `trajectory[0]` is the input.
    pub trajectory: Vec<VideoTensor>,
    /// Inference timesteps, noisiest first.
    pub timesteps: Vec<Timestep>,
    /// One embedding per entry of `timesteps`.
    pub null_embeddings: Vec<TextEmbedding>,
    pub source_prompt: String,
    pub per_step_loss: Vec<f64>,
    pub schedule_hash: String,
    /// Fingerprint of the model weights the record was computed with.
    pub model_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordManifest {
    format: String,
    source_prompt: String,
    schedule_hash: String,
    model_hash: String,
    steps: usize,
    timesteps: Vec<Timestep>,
    video_shape: [usize; 4],
    embedding_shape: [usize; 2],
    null_text: Option<NullTextConfig>,
}

impl InversionRecord {
    pub fn num_steps(&self) -> usize {
        self.timesteps.len()
    }

    /// The noisiest inverted latent, where sampling starts.
    pub fn start_latent(&self) -> &VideoTensor {
        self.trajectory.last().expect("validated record has a trajectory")
    }

    /// The input video in model range.
    pub fn source(&self) -> &VideoTensor {
        &self.trajectory[0]
    }

    /// Null-text embedding for sampling step `k` (0 is the noisiest).
    pub fn null_for_step(&self, k: usize) -> Result<&TextEmbedding> {
        self.null_embeddings.get(k).ok_or(Error::MissingStep {
            what: "null-text embedding",
            timestep: self.timesteps.get(k).copied().unwrap_or(0),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.timesteps.len();
        if s < 2 {
            return Err(Error::domain("record must cover at least two steps"));
        }
        if self.trajectory.len() != s + 1 {
            return Err(Error::shape(s + 1, self.trajectory.len()));
        }
        if self.null_embeddings.len() != s {
            let k = self.null_embeddings.len().min(s - 1);
            return Err(Error::MissingStep {
                what: "null-text embedding",
                timestep: self.timesteps[k],
            });
        }
        if self.per_step_loss.len() != s {
            return Err(Error::shape(s, self.per_step_loss.len()));
        }
        if self.per_step_loss.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::NonFinite("per-step loss".into()));
        }
        let shape = self.trajectory[0].shape();
        for x in &self.trajectory {
            if x.shape() != shape {
                return Err(Error::shape(shape, x.shape()));
            }
            ensure_finite(x, "trajectory")?;
        }
        let es = self.null_embeddings[0].shape();
        for e in &self.null_embeddings {
            if e.shape() != es {
                return Err(Error::shape(es, e.shape()));
            }
        }
        Ok(())
    }

    /// Writes `record.bin` and `manifest.toml` into `dir`, creating it.
    pub fn save(&self, dir: &Path, null_text: Option<&NullTextConfig>) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let shape = self.trajectory[0].shape();
        let (l, d) = self.null_embeddings[0].shape();
        let manifest = RecordManifest {
            format: "inversion-record-v1".into(),
            source_prompt: self.source_prompt.clone(),
            schedule_hash: self.schedule_hash.clone(),
            model_hash: self.model_hash.clone(),
            steps: self.num_steps(),
            timesteps: self.timesteps.clone(),
            video_shape: shape,
            embedding_shape: [l, d],
            null_text: null_text.cloned(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut c = ArrayContainer::new(text.clone());
        for (k, x) in self.trajectory.iter().enumerate() {
            c.push(NamedArray::f64(format!("trajectory/{k:04}"), &shape, x.data().to_vec())?)?;
        }
        for (k, e) in self.null_embeddings.iter().enumerate() {
            c.push(NamedArray::f32(format!("null/{k:04}"), &[l, d], e.data().to_vec())?)?;
        }
        c.push(NamedArray::f64("per_step_loss", &[self.num_steps()], self.per_step_loss.clone())?)?;
        c.save(&dir.join(RECORD_FILE))?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = ArrayContainer::load(&dir.join(RECORD_FILE))?;
        let m: RecordManifest = toml::from_str(&c.meta).map_err(|e| Error::Format(e.to_string()))?;
        if m.format != "inversion-record-v1" {
            return Err(Error::Format(format!("unknown record format {:?}", m.format)));
        }
        let mut trajectory = Vec::with_capacity(m.steps + 1);
        for k in 0..=m.steps {
            let (shape, data) = c.expect_f64(&format!("trajectory/{k:04}"))?;
            if shape != m.video_shape {
                return Err(Error::shape(m.video_shape, shape));
            }
            trajectory.push(VideoTensor::new(m.video_shape, data.to_vec())?);
        }
        let [l, d] = m.embedding_shape;
        let mut null_embeddings = Vec::with_capacity(m.steps);
        for k in 0..m.steps {
            let data = c.expect_f32(&format!("null/{k:04}"), &[l, d])?;
            null_embeddings.push(TextEmbedding::new(l, d, data.to_vec())?);
        }
        let (_, loss) = c.expect_f64("per_step_loss")?;
        let rec = Self {
            trajectory,
            timesteps: m.timesteps,
            null_embeddings,
            source_prompt: m.source_prompt,
            per_step_loss: loss.to_vec(),
            schedule_hash: m.schedule_hash,
            model_hash: m.model_hash,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Errors unless the record was computed over `schedule`.
    pub fn check_schedule(&self, schedule: &Schedule) -> Result<()> {
        if self.schedule_hash != schedule.fingerprint() || self.timesteps != schedule.inference_steps() {
            return Err(Error::domain("inversion record was computed with a different schedule"));
        }
        Ok(())
    }
}

/// Inverts `video` (model range) and optimizes its null-text embeddings.
pub fn invert<M: NoisePredictor>(
    video: &VideoTensor,
    source_prompt: &str,
    cond: &TextEmbedding,
    empty: &TextEmbedding,
    model: &M,
    model_hash: &str,
    schedule: &Schedule,
    ctx: &AttentionContext,
    cfg: &NullTextConfig,
) -> Result<InversionRecord> {
    let trajectory = ddim_invert(video, cond, model, schedule, ctx)?;
    let opt = null_text_optimize(&trajectory, cond, empty, model, schedule, ctx, cfg)?;
    Ok(InversionRecord {
        trajectory,
        timesteps: schedule.inference_steps().to_vec(),
        null_embeddings: opt.null_embeddings,
        source_prompt: source_prompt.to_string(),
        per_step_loss: opt.per_step_loss,
        schedule_hash: schedule.fingerprint(),
        model_hash: model_hash.to_string(),
    })
}

/// Plain conditional DDIM sampling (guidance 1) from `start` down to `t = 0`.
pub fn ddim_sample<M: NoisePredictor>(
    start: &VideoTensor,
    cond: &TextEmbedding,
    model: &M,
    schedule: &Schedule,
    ctx: &AttentionContext,
) -> Result<VideoTensor> {
    let mut ctx = plain_context(ctx);
    let mut x = start.clone();
    for (t, t_prev) in schedule.sampling_pairs() {
        let eps = model.predict(&x, t, cond, &mut ctx)?.eps;
        x = ddim_step(&x, &eps, t, t_prev, schedule)?;
        ensure_finite(&x, "sampling latent")?;
    }
    Ok(x)
}
