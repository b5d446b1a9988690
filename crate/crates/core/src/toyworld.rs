//! Synthetic scenes, the toy text encoder and toy-model training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionContext, AttentionMode};
use crate::denoiser::{BatchInput, TextEmbedding, ToyUNet};
use crate::engine::Adam;
use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::tensor::VideoTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Black,
    White,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 2] = [ShapeKind::Square, ShapeKind::Circle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    /// Index of the channel that best identifies the color (yellow: red).
    pub fn dominant_channel(self) -> usize {
        match self {
            Color::Red | Color::Yellow => 0,
            Color::Green => 1,
            Color::Blue => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.word() == s)
            .ok_or_else(|| Error::domain(format!("unknown color {s:?}")))
    }
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down];

    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Motion::Left => (-1, 0),
            Motion::Right => (1, 0),
            Motion::Up => (0, -1),
            Motion::Down => (0, 1),
        }
    }
}

impl Background {
    pub const ALL: [Background; 2] = [Background::Black, Background::White];

    pub fn word(self) -> &'static str {
        match self {
            Background::Black => "black",
            Background::White => "white",
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Background::Black => 0.0,
            Background::White => 1.0,
        }
    }
}

/// One synthetic clip: a colored shape translating at constant velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub motion: Motion,
    pub background: Background,
    pub frames: usize,
    pub size: usize,
    /// Side of the shape's bounding box in pixels.
    pub object_size: usize,
    /// Displacement per frame in pixels.
    pub speed: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            shape: ShapeKind::Square,
            color: Color::Red,
            motion: Motion::Right,
            background: Background::Black,
            frames: 8,
            size: 32,
            object_size: 10,
            speed: 1,
        }
    }
}

impl SceneSpec {
    pub fn prompt(&self) -> String {
        format!(
            "a {} {} moving {} on {}",
            self.color.word(),
            self.shape.word(),
            self.motion.word(),
            self.background.word()
        )
    }

    /// Same scene with another color.
    pub fn with_color(&self, color: Color) -> Self {
        Self { color, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.size == 0 || self.object_size == 0 {
            return Err(Error::domain("frames, size and object_size must be positive"));
        }
        let travel = (self.frames - 1) * self.speed;
        if self.object_size + travel > self.size {
            return Err(Error::domain(format!(
                "shape of size {} moving {} px over {} frames exits a {}-pixel canvas",
                self.object_size, travel, self.frames, self.size
            )));
        }
        Ok(())
    }
}

/// A rendered clip with its foreground mask (`frames × size × size`).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub video: VideoTensor,
    pub prompt: String,
    pub mask: Vec<bool>,
}

/// Renders `spec`; `seed` picks the start position among those that keep
/// the shape inside the canvas for every frame.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<(VideoTensor, String)> {
    let r = render_scene_with_mask(spec, seed)?;
    Ok((r.video, r.prompt))
}

pub fn render_scene_with_mask(spec: &SceneSpec, seed: u64) -> Result<RenderedScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, n, f) = (spec.object_size, spec.size, spec.frames);
    let travel = ((f - 1) * spec.speed) as isize;
    let (dx, dy) = spec.motion.delta();
    // valid start range per axis: the whole path must stay in [0, n - s]
    let axis_range = |d: isize| -> (isize, isize) {
        let hi = (n - s) as isize;
        match d {
            1 => (0, hi - travel),
            -1 => (travel, hi),
            _ => (0, hi),
        }
    };
    let (x_lo, x_hi) = axis_range(dx);
    let (y_lo, y_hi) = axis_range(dy);
    let x0 = rng.gen_range(x_lo..=x_hi);
    let y0 = rng.gen_range(y_lo..=y_hi);

    let rgb = spec.color.rgb();
    let bg = spec.background.value();
    let mut video = VideoTensor::full([f, 3, n, n], bg);
    let mut mask = vec![false; f * n * n];
    let r = s as f64 / 2.0;
    for fi in 0..f {
        let ox = x0 + dx * (fi * spec.speed) as isize;
        let oy = y0 + dy * (fi * spec.speed) as isize;
        for py in 0..s {
            for px in 0..s {
                let inside = match spec.shape {
                    ShapeKind::Square => true,
                    ShapeKind::Circle => {
                        let (cx, cy) = (px as f64 + 0.5 - r, py as f64 + 0.5 - r);
                        cx * cx + cy * cy <= r * r
                    }
                };
                if !inside {
                    continue;
                }
                let (x, y) = ((ox + px as isize) as usize, (oy + py as isize) as usize);
                mask[(fi * n + y) * n + x] = true;
                for (ch, &v) in rgb.iter().enumerate() {
                    video.set(fi, ch, y, x, v);
                }
            }
        }
    }
    Ok(RenderedScene {
        video,
        prompt: spec.prompt(),
        mask,
    })
}

// ---------------------------------------------------------------------------
// Text encoder

pub const EMPTY_TOKEN: &str = "<empty>";
pub const UNKNOWN_TOKEN: &str = "<unk>";

const WORDS: [&str; 15] = [
    "a", "moving", "on", "square", "circle", "red", "green", "blue", "yellow", "left", "right", "up", "down", "black",
    "white",
];

/// Frozen random token-embedding table over the scene vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTextEncoder {
    vocab: Vec<String>,
    dim: usize,
    len: usize,
    table: Vec<f32>,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, len: usize, seed: u64) -> Result<Self> {
        if dim == 0 || len == 0 {
            return Err(Error::domain("encoder width and length must be positive"));
        }
        let vocab: Vec<String> = [EMPTY_TOKEN, UNKNOWN_TOKEN]
            .into_iter()
            .chain(WORDS)
            .map(String::from)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab.len() * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self { vocab, dim, len, table })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Token ids: lowercase whitespace-separated words, unknown words map to
    /// the unknown token, padded or truncated to the fixed length.
    pub fn tokenize(&self, prompt: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = prompt
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.vocab.iter().position(|v| *v == w).unwrap_or(1)
            })
            .take(self.len)
            .collect();
        ids.resize(self.len, 0);
        ids
    }

    pub fn encode(&self, prompt: &str) -> TextEmbedding {
        let mut data = Vec::with_capacity(self.len * self.dim);
        for id in self.tokenize(prompt) {
            data.extend_from_slice(&self.table[id * self.dim..(id + 1) * self.dim]);
        }
        TextEmbedding::new(self.len, self.dim, data).expect("table is finite")
    }

    pub fn empty(&self) -> TextEmbedding {
        self.encode("")
    }
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetItem {
    pub spec: SceneSpec,
    pub seed: u64,
    pub prompt: String,
}

/// Uniformly sampled scene specs sharing a frame count and canvas size.
pub fn sample_dataset(count: usize, template: &SceneSpec, seed: u64) -> Result<Vec<DatasetItem>> {
    if count == 0 {
        return Err(Error::domain("dataset must not be empty"));
    }
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let spec = SceneSpec {
                shape: *ShapeKind::ALL.choose(&mut rng).unwrap(),
                color: *Color::ALL.choose(&mut rng).unwrap(),
                motion: *Motion::ALL.choose(&mut rng).unwrap(),
                background: *Background::ALL.choose(&mut rng).unwrap(),
                ..template.clone()
            };
            let prompt = spec.prompt();
            DatasetItem {
                spec,
                seed: rng.gen(),
                prompt,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: f32,
    /// Probability of replacing a sample's prompt with the empty prompt.
    pub prompt_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            grad_clip: 1.0,
            prompt_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean noise-prediction loss of every step.
    pub loss_curve: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first `k` steps.
    pub fn initial_loss(&self, k: usize) -> f64 {
        mean(&self.loss_curve[..k.min(self.loss_curve.len())])
    }

    /// Mean loss over the last `k` steps.
    pub fn final_loss(&self, k: usize) -> f64 {
        let n = self.loss_curve.len();
        mean(&self.loss_curve[n - k.min(n)..])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains `model` as a single-image denoiser (per-frame attention) with the
/// noise-prediction objective. `progress` is called with `(step, loss)`.
pub fn train_toy(
    model: &mut ToyUNet,
    dataset: &[DatasetItem],
    encoder: &ToyTextEncoder,
    schedule: &Schedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::domain("training dataset is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..=1.0).contains(&cfg.prompt_dropout) {
        return Err(Error::Config("batch_size > 0, lr > 0 and prompt_dropout in [0,1] required".into()));
    }
    let side = model.config().image_size;
    if dataset[0].spec.size != side {
        return Err(Error::shape(side, dataset[0].spec.size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = cfg.lr as f32;
    let mut adam = Adam::new(model.num_parameters(), lr);
    let n_train = schedule.params().num_train_steps;
    let b = cfg.batch_size;
    let c = model.config().in_channels;
    let text_dim = encoder.dim();
    let mut ctx = AttentionContext::uniform(AttentionMode::PerFrame, model.attention_stages().len());
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut clean = VideoTensor::zeros([b, c, side, side]);
        let mut text = Vec::with_capacity(b * encoder.len() * text_dim);
        let mut ts = Vec::with_capacity(b);
        let mut noise = VideoTensor::zeros([b, c, side, side]);
        for i in 0..b {
            let item = &dataset[rng.gen_range(0..dataset.len())];
            let (video, prompt) = render_scene(&item.spec, item.seed)?;
            let f = rng.gen_range(0..video.frames());
            clean.frame_mut(i).copy_from_slice(video.frame(f));
            let prompt = if rng.gen_bool(cfg.prompt_dropout) { "" } else { prompt.as_str() };
            text.extend_from_slice(encoder.encode(prompt).data());
            ts.push(rng.gen_range(1..=n_train));
            for v in noise.frame_mut(i) {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        let x0 = clean.to_model_range();
        let mut xt = VideoTensor::zeros(x0.shape());
        for i in 0..b {
            let ab = schedule.alpha_bar(ts[i]);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for ((o, &x), &e) in xt.frame_mut(i).iter_mut().zip(x0.frame(i)).zip(noise.frame(i)) {
                *o = sa * x + sn * e;
            }
        }
        let inp = BatchInput {
            x: model.video_to_nhwc(&xt),
            n: b,
            side,
            ts: ts.iter().map(|&t| t as f32).collect(),
            text: &text,
            text_batch: b,
        };
        let (out, tape) = model.predict_images(&inp, &mut ctx)?;
        let target = model.video_to_head_layout(&noise);
        let count = out.len() as f64;
        let mut loss = 0.0f64;
        let dout: Vec<f32> = out
            .iter()
            .zip(&target)
            .map(|(&o, &t)| {
                let d = (o - t) as f64;
                loss += d * d;
                (2.0 * d / count) as f32
            })
            .collect();
        loss /= count;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let mut grads = vec![0.0f32; model.num_parameters()];
        model.backward_batch(&tape, &dout, Some(&mut grads));
        let norm = grads.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip as f64 {
            let s = (cfg.grad_clip as f64 / norm) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        adam.lr = if step < cfg.warmup_steps {
            lr * (step + 1) as f32 / cfg.warmup_steps as f32
        } else {
            lr
        };
        adam.step(model.params_mut().data_mut(), &grads);
        curve.push(loss);
        progress(step, loss);
    }
    Ok(TrainReport { loss_curve: curve })
}
