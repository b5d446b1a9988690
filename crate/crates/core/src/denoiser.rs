//! Noise-predictor interface and the toy inflated U-Net.
//!
//! The network is an ordinary 2D image denoiser. Video inputs are handled by
//! running every convolution and normalization per frame with the same
//! weights, and by letting each self-attention layer pick a cross-frame mode
//! from the [`AttentionContext`]. No parameter depends on the frame count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    default_placement, AttentionContext, AttentionMode, CrossAttnMaps, FrameSelfAttention, FrameSelfAttentionCache,
    Stage, TextCrossAttention, TextCrossAttentionCache,
};
use crate::engine::{
    add, add_assign, concat_channels, silu, silu_backward, split_channels, timestep_embedding, upsample2,
    upsample2_backward, Conv3x3, GroupNorm, LayerNorm, Linear, NormStats, ParamStore,
};
use crate::container::{ArrayContainer, NamedArray};
use crate::error::{Error, Result};
use crate::schedule::Timestep;
use crate::tensor::VideoTensor;

/// A sequence of `len` token embeddings of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    len: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TextEmbedding {
    pub fn new(len: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::domain("text embedding needs at least one token of nonzero width"));
        }
        if data.len() != len * dim {
            return Err(Error::shape(len * dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text embedding".into()));
        }
        Ok(Self { len, dim, data })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self {
            len,
            dim,
            data: vec![0.0; len * dim],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.len, self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Output of one noise prediction: the noise estimate and the fresh
/// cross-attention maps of every text cross-attention layer at this timestep.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub eps: VideoTensor,
    pub maps: CrossAttnMaps,
}

/// A frozen noise predictor `eps(x_t, t, cond)` over videos.
pub trait NoisePredictor {
    /// Saved forward state for [`NoisePredictor::text_gradient`].
    type Tape;

    /// Number of self-attention layers whose mode a context assigns.
    fn num_attention_layers(&self) -> usize;

    /// Number of text cross-attention layers (map keys `0..n`).
    fn num_cross_attention_layers(&self) -> usize;

    /// Context with the model's default attention placement.
    fn default_context(&self) -> AttentionContext;

    fn predict(
        &self,
        x_t: &VideoTensor,
        t: Timestep,
        cond: &TextEmbedding,
        ctx: &mut AttentionContext,
    ) -> Result<Prediction>;

    /// Like [`NoisePredictor::predict`], additionally returning the state
    /// needed to differentiate the prediction with respect to `cond`.
    fn predict_taped(
        &self,
        x_t: &VideoTensor,
        t: Timestep,
        cond: &TextEmbedding,
        ctx: &mut AttentionContext,
    ) -> Result<(Prediction, Self::Tape)> {
        let _ = (x_t, t, cond, ctx);
        Err(Error::GradientUnavailable)
    }

    /// Vector-Jacobian product: gradient of `<d_eps, eps>` with respect to
    /// the conditioning embedding of the taped call.
    fn text_gradient(&self, tape: &Self::Tape, d_eps: &VideoTensor) -> Result<TextEmbedding> {
        let _ = (tape, d_eps);
        Err(Error::GradientUnavailable)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub channels: usize,
    pub attention: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Resolution levels, finest first. The stem halves the input, each
    /// further level halves again.
    pub levels: Vec<LevelConfig>,
    pub heads: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            levels: vec![
                LevelConfig {
                    channels: 16,
                    attention: false,
                },
                LevelConfig {
                    channels: 48,
                    attention: true,
                },
                LevelConfig {
                    channels: 64,
                    attention: true,
                },
            ],
            heads: 4,
            text_dim: 32,
            time_dim: 128,
            groups: 8,
            seed: 0,
        }
    }
}

impl UNetConfig {
    /// Number of 2× reductions between the input and the coarsest level.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels.is_empty() {
            return bad("at least one level required".into());
        }
        if self.in_channels == 0 || self.text_dim == 0 || self.heads == 0 {
            return bad("in_channels, text_dim and heads must be positive".into());
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim must be positive and even, got {}", self.time_dim));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.channels == 0 || l.channels % self.groups != 0 {
                return bad(format!("level {i}: channels {} not a positive multiple of {} groups", l.channels, self.groups));
            }
            if l.attention && l.channels % self.heads != 0 {
                return bad(format!("level {i}: channels {} not divisible by {} heads", l.channels, self.heads));
            }
        }
        let div = 1usize << self.depth();
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return bad(format!("image size {} not divisible by 2^{} = {div}", self.image_size, self.depth()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Blocks

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv3x3,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Linear>,
    cout: usize,
}

struct ResCache {
    x: Vec<f32>,
    st1: NormStats,
    a1: Vec<f32>,
    s1: Vec<f32>,
    c1: Vec<f32>,
    st2: NormStats,
    a2: Vec<f32>,
    s2: Vec<f32>,
    n: usize,
    h: usize,
    w: usize,
}

impl ResBlock {
    fn new(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, cfg: &UNetConfig) -> Self {
        Self {
            gn1: GroupNorm::new(p, rng, &format!("{name}.norm1"), cin, cfg.groups),
            conv1: Conv3x3::new(p, rng, &format!("{name}.conv1"), cin, cout, 1),
            temb: Linear::new(p, rng, &format!("{name}.time_proj"), cfg.time_dim, cout, true),
            gn2: GroupNorm::new(p, rng, &format!("{name}.norm2"), cout, cfg.groups),
            conv2: Conv3x3::new(p, rng, &format!("{name}.conv2"), cout, cout, 1),
            skip: (cin != cout).then(|| Linear::new(p, rng, &format!("{name}.skip"), cin, cout, true)),
            cout,
        }
    }

    fn forward(&self, p: &ParamStore, x: Vec<f32>, temb: &[f32], n: usize, h: usize, w: usize) -> (Vec<f32>, ResCache) {
        let (a1, st1) = self.gn1.forward(p, &x, n);
        let s1 = silu(&a1);
        let mut c1 = self.conv1.forward(p, &s1, n, h, w);
        let tp = self.temb.forward(p, temb);
        let per = h * w * self.cout;
        for b in 0..n {
            for row in c1[b * per..(b + 1) * per].chunks_exact_mut(self.cout) {
                add_assign(row, &tp[b * self.cout..(b + 1) * self.cout]);
            }
        }
        let (a2, st2) = self.gn2.forward(p, &c1, n);
        let s2 = silu(&a2);
        let mut out = self.conv2.forward(p, &s2, n, h, w);
        match &self.skip {
            Some(s) => add_assign(&mut out, &s.forward(p, &x)),
            None => add_assign(&mut out, &x),
        }
        (
            out,
            ResCache {
                x,
                st1,
                a1,
                s1,
                c1,
                st2,
                a2,
                s2,
                n,
                h,
                w,
            },
        )
    }

    /// Returns `dx`; accumulates the time-embedding gradient into `dtemb`
    /// when parameter gradients are requested.
    fn backward(
        &self,
        p: &ParamStore,
        c: &ResCache,
        dy: &[f32],
        temb: &[f32],
        dtemb: &mut [f32],
        mut grads: Option<&mut [f32]>,
    ) -> Vec<f32> {
        let (n, h, w) = (c.n, c.h, c.w);
        let train = grads.is_some();
        let ds2 = self.conv2.backward(p, &c.s2, n, h, w, dy, grads.as_deref_mut(), true);
        let da2 = silu_backward(&c.a2, &ds2);
        let dc1 = self.gn2.backward(p, &c.c1, &c.st2, &da2, n, grads.as_deref_mut());
        if train {
            let per = h * w * self.cout;
            let mut dtp = vec![0.0; n * self.cout];
            for b in 0..n {
                for row in dc1[b * per..(b + 1) * per].chunks_exact(self.cout) {
                    add_assign(&mut dtp[b * self.cout..(b + 1) * self.cout], row);
                }
            }
            let dt = self.temb.backward(p, temb, &dtp, grads.as_deref_mut());
            add_assign(dtemb, &dt);
        }
        let ds1 = self.conv1.backward(p, &c.s1, n, h, w, &dc1, grads.as_deref_mut(), true);
        let da1 = silu_backward(&c.a1, &ds1);
        let mut dx = self.gn1.backward(p, &c.x, &c.st1, &da1, n, grads.as_deref_mut());
        match &self.skip {
            Some(s) => add_assign(&mut dx, &s.backward(p, &c.x, dy, grads)),
            None => add_assign(&mut dx, dy),
        }
        dx
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: GroupNorm,
    self_attn: FrameSelfAttention,
    norm_cross: LayerNorm,
    cross: TextCrossAttention,
    norm_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    /// Index among self-attention layers (mode slot).
    attn_index: usize,
    /// Index among text cross-attention layers (map key).
    cross_index: usize,
}

struct AttnCache {
    x: Vec<f32>,
    st0: NormStats,
    sa: FrameSelfAttentionCache,
    h1: Vec<f32>,
    st1: NormStats,
    ca: TextCrossAttentionCache,
    h2: Vec<f32>,
    st2: NormStats,
    d: Vec<f32>,
    e: Vec<f32>,
    f: Vec<f32>,
    n: usize,
}

impl AttnBlock {
    fn new(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, cfg: &UNetConfig, attn_index: usize, cross_index: usize) -> Self {
        Self {
            norm: GroupNorm::new(p, rng, &format!("{name}.norm"), c, cfg.groups),
            self_attn: FrameSelfAttention::new(p, rng, &format!("{name}.attn1"), c, cfg.heads),
            norm_cross: LayerNorm::new(p, rng, &format!("{name}.norm2"), c),
            cross: TextCrossAttention::new(p, rng, &format!("{name}.attn2"), c, cfg.text_dim, cfg.heads),
            norm_ff: LayerNorm::new(p, rng, &format!("{name}.norm3"), c),
            ff1: Linear::new(p, rng, &format!("{name}.ff.0"), c, 2 * c, true),
            ff2: Linear::new(p, rng, &format!("{name}.ff.2"), 2 * c, c, true),
            attn_index,
            cross_index,
        }
    }

    fn forward(
        &self,
        p: &ParamStore,
        x: Vec<f32>,
        n: usize,
        text: &[f32],
        text_batch: usize,
        ctx: &mut AttentionContext,
        maps: &mut CrossAttnMaps,
        t: Timestep,
    ) -> Result<(Vec<f32>, AttnCache)> {
        let mode = ctx.modes()[self.attn_index];
        let (a, st0) = self.norm.forward(p, &x, n);
        let (sa_out, sa) = self.self_attn.forward(p, &a, n, mode);
        let h1 = add(&x, &sa_out);
        let (b, st1) = self.norm_cross.forward(p, &h1);
        let (ca_out, ca, fresh) = self
            .cross
            .forward(p, &b, n, text, text_batch, self.cross_index, ctx)?;
        maps.insert(t, self.cross_index, fresh)?;
        let h2 = add(&h1, &ca_out);
        let (d, st2) = self.norm_ff.forward(p, &h2);
        let e = self.ff1.forward(p, &d);
        let f = silu(&e);
        let g = self.ff2.forward(p, &f);
        let out = add(&h2, &g);
        Ok((
            out,
            AttnCache {
                x,
                st0,
                sa,
                h1,
                st1,
                ca,
                h2,
                st2,
                d,
                e,
                f,
                n,
            },
        ))
    }

    /// Returns `dx`, accumulating the text gradient into `dtext`.
    fn backward(&self, p: &ParamStore, c: &AttnCache, dy: &[f32], dtext: &mut [f32], mut grads: Option<&mut [f32]>) -> Vec<f32> {
        let df = self.ff2.backward(p, &c.f, dy, grads.as_deref_mut());
        let de = silu_backward(&c.e, &df);
        let dd = self.ff1.backward(p, &c.d, &de, grads.as_deref_mut());
        let mut dh2 = self.norm_ff.backward(p, &c.h2, &c.st2, &dd, grads.as_deref_mut());
        add_assign(&mut dh2, dy);
        let (db, dt) = self.cross.backward(p, &c.ca, &dh2, grads.as_deref_mut());
        add_assign(dtext, &dt);
        let mut dh1 = self.norm_cross.backward(p, &c.h1, &c.st1, &db, grads.as_deref_mut());
        add_assign(&mut dh1, &dh2);
        let da = self.self_attn.backward(p, &c.sa, &dh1, grads.as_deref_mut());
        let mut dx = self.norm.backward(p, &c.x, &c.st0, &da, c.n, grads);
        add_assign(&mut dx, &dh1);
        dx
    }
}

#[derive(Clone, Debug)]
struct Level {
    down_res: ResBlock,
    down_attn: Option<AttnBlock>,
    /// Stride-2 convolution into the next level; absent on the coarsest level.
    downsample: Option<Conv3x3>,
    up_res: ResBlock,
    up_attn: Option<AttnBlock>,
    channels: usize,
}

// ---------------------------------------------------------------------------
// Model

/// Small text-conditioned U-Net noise predictor.
#[derive(Clone, Debug)]
pub struct ToyUNet {
    config: UNetConfig,
    params: ParamStore,
    time1: Linear,
    time2: Linear,
    stem: Conv3x3,
    levels: Vec<Level>,
    mid_res1: ResBlock,
    mid_attn: AttnBlock,
    mid_res2: ResBlock,
    head_norm: GroupNorm,
    head: Linear,
    stages: Vec<Stage>,
}

/// Forward state of a [`ToyUNet`] call.
pub struct UNetTape {
    n: usize,
    side: usize,
    temb_in: Vec<f32>,
    t1: Vec<f32>,
    t2: Vec<f32>,
    temb: Vec<f32>,
    text: Vec<f32>,
    stem_in: Vec<f32>,
    level_caches: Vec<LevelCache>,
    mid: (ResCache, AttnCache, ResCache),
    head_in: Vec<f32>,
    head_st: NormStats,
    head_norm_out: Vec<f32>,
    head_act: Vec<f32>,
}

struct LevelCache {
    down_res: ResCache,
    down_attn: Option<AttnCache>,
    down_out: Vec<f32>,
    up_cat_channels: (usize, usize),
    up_res: ResCache,
    up_attn: Option<AttnCache>,
    side: usize,
}

/// Raw network inputs for a batch of `n` images.
pub(crate) struct BatchInput<'a> {
    /// `n × side × side × in_channels`.
    pub x: Vec<f32>,
    pub n: usize,
    pub side: usize,
    /// One timestep per image.
    pub ts: Vec<f32>,
    /// `text_batch × len × dim`; `text_batch` is 1 or `n`.
    pub text: &'a [f32],
    pub text_batch: usize,
}

pub fn build_toy_unet(config: UNetConfig) -> Result<ToyUNet> {
    ToyUNet::new(config)
}

impl ToyUNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::default();
        let cfg = &config;
        let tin = cfg.time_dim / 2;
        let time1 = Linear::new(&mut p, &mut rng, "time_embed.0", tin, cfg.time_dim, true);
        let time2 = Linear::new(&mut p, &mut rng, "time_embed.2", cfg.time_dim, cfg.time_dim, true);
        let c0 = cfg.levels[0].channels;
        let stem = Conv3x3::new(&mut p, &mut rng, "conv_in", cfg.in_channels, c0, 2);

        let nl = cfg.levels.len();
        let mut attn_index = 0;
        let mut cross_index = 0;
        let mut stages = Vec::new();
        let mut next_attn = |stage: Stage, stages: &mut Vec<Stage>| {
            stages.push(stage);
            let r = (attn_index, cross_index);
            attn_index += 1;
            cross_index += 1;
            r
        };

        // Down path.
        let mut down = Vec::with_capacity(nl);
        for (i, l) in cfg.levels.iter().enumerate() {
            let c = l.channels;
            let res = ResBlock::new(&mut p, &mut rng, &format!("down.{i}.res"), c, c, cfg);
            let attn = l.attention.then(|| {
                let (a, x) = next_attn(Stage::Down, &mut stages);
                AttnBlock::new(&mut p, &mut rng, &format!("down.{i}.attn"), c, cfg, a, x)
            });
            let ds = (i + 1 < nl)
                .then(|| Conv3x3::new(&mut p, &mut rng, &format!("down.{i}.downsample"), c, cfg.levels[i + 1].channels, 2));
            down.push((res, attn, ds));
        }
        let cl = cfg.levels[nl - 1].channels;
        let mid_res1 = ResBlock::new(&mut p, &mut rng, "mid.res1", cl, cl, cfg);
        let (a, x) = next_attn(Stage::Mid, &mut stages);
        let mid_attn = AttnBlock::new(&mut p, &mut rng, "mid.attn", cl, cfg, a, x);
        let mid_res2 = ResBlock::new(&mut p, &mut rng, "mid.res2", cl, cl, cfg);

        // Up path, coarsest first.
        let mut ups: Vec<(ResBlock, Option<AttnBlock>)> = Vec::with_capacity(nl);
        for i in (0..nl).rev() {
            let c = cfg.levels[i].channels;
            let below = if i + 1 < nl { cfg.levels[i + 1].channels } else { cl };
            let res = ResBlock::new(&mut p, &mut rng, &format!("up.{i}.res"), below + c, c, cfg);
            let attn = cfg.levels[i].attention.then(|| {
                let (a, x) = next_attn(Stage::Up, &mut stages);
                AttnBlock::new(&mut p, &mut rng, &format!("up.{i}.attn"), c, cfg, a, x)
            });
            ups.push((res, attn));
        }
        ups.reverse();

        let levels = down
            .into_iter()
            .zip(ups)
            .enumerate()
            .map(|(i, ((down_res, down_attn, downsample), (up_res, up_attn)))| Level {
                down_res,
                down_attn,
                downsample,
                up_res,
                up_attn,
                channels: cfg.levels[i].channels,
            })
            .collect();

        let head_norm = GroupNorm::new(&mut p, &mut rng, "norm_out", c0, cfg.groups);
        let head = Linear::new(&mut p, &mut rng, "conv_out", c0, 4 * cfg.in_channels, true);

        Ok(Self {
            config,
            params: p,
            time1,
            time2,
            stem,
            levels,
            mid_res1,
            mid_attn,
            mid_res2,
            head_norm,
            head,
            stages,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Stage (down/mid/up) of every self-attention layer, in mode-slot order.
    pub fn attention_stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Context where every layer runs plain per-frame self-attention: the
    /// underlying 2D image model applied frame by frame.
    pub fn per_frame_context(&self) -> AttentionContext {
        AttentionContext::uniform(AttentionMode::PerFrame, self.stages.len())
    }

    fn check_inputs(&self, side: usize, text_len: usize, text_dim: usize, ctx: &AttentionContext) -> Result<()> {
        if side == 0 || !side.is_multiple_of(1 << self.config.depth()) {
            return Err(Error::shape(
                format!("side divisible by {}", 1 << self.config.depth()),
                side,
            ));
        }
        if text_dim != self.config.text_dim || text_len == 0 {
            return Err(Error::shape(format!("L×{}", self.config.text_dim), (text_len, text_dim)));
        }
        if ctx.modes().len() != self.stages.len() {
            return Err(Error::shape(
                format!("{} attention modes", self.stages.len()),
                ctx.modes().len(),
            ));
        }
        Ok(())
    }

    fn video_to_batch<'a>(&self, x: &VideoTensor, t: Timestep, cond: &'a TextEmbedding, ctx: &AttentionContext) -> Result<BatchInput<'a>> {
        let [f, c, h, w] = x.shape();
        if f == 0 {
            return Err(Error::domain("video has no frames"));
        }
        if c != self.config.in_channels || h != w {
            return Err(Error::shape([f, self.config.in_channels, h, h], x.shape()));
        }
        self.check_inputs(h, cond.len(), cond.dim(), ctx)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        Ok(BatchInput {
            x: self.video_to_nhwc(x),
            n: f,
            side: h,
            ts: vec![t as f32; f],
            text: cond.data(),
            text_batch: 1,
        })
    }

    /// F×C×H×W to channels-last f32.
    pub(crate) fn video_to_nhwc(&self, x: &VideoTensor) -> Vec<f32> {
        let [f, c, h, w] = x.shape();
        let mut nhwc = vec![0.0f32; x.len()];
        for fi in 0..f {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        nhwc[((fi * h + y) * w + xx) * c + ci] = x.at(fi, ci, y, xx) as f32;
                    }
                }
            }
        }
        nhwc
    }

    /// Pixel-shuffled head output to an F×C×H×W tensor.
    fn head_to_video(&self, out: &[f32], n: usize, side: usize) -> VideoTensor {
        let c = self.config.in_channels;
        let half = side / 2;
        let mut v = VideoTensor::zeros([n, c, side, side]);
        for b in 0..n {
            for y in 0..half {
                for x in 0..half {
                    let base = ((b * half + y) * half + x) * 4 * c;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            for ch in 0..c {
                                let val = out[base + (dy * 2 + dx) * c + ch];
                                v.set(b, ch, 2 * y + dy, 2 * x + dx, val as f64);
                            }
                        }
                    }
                }
            }
        }
        v
    }

    /// Inverse of [`Self::head_to_video`] for gradients.
    fn video_to_head(&self, v: &VideoTensor) -> Vec<f32> {
        let [n, c, side, _] = v.shape();
        let half = side / 2;
        let mut out = vec![0.0; n * half * half * 4 * c];
        for b in 0..n {
            for y in 0..half {
                for x in 0..half {
                    let base = ((b * half + y) * half + x) * 4 * c;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            for ch in 0..c {
                                out[base + (dy * 2 + dx) * c + ch] = v.at(b, ch, 2 * y + dy, 2 * x + dx) as f32;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adds a fixed sinusoidal code of the token position to every text
    /// token, so that repeated tokens remain distinguishable to attention.
    fn positioned_text(&self, text: &[f32], text_batch: usize) -> Vec<f32> {
        let d = self.config.text_dim;
        let len = text.len() / (d * text_batch);
        let mut out = text.to_vec();
        for (j, tok) in out.chunks_mut(d).enumerate() {
            let pos = (j % len) as f32;
            for (i, v) in tok.iter_mut().enumerate() {
                let freq = 10000f32.powf(-((i / 2 * 2) as f32) / d as f32);
                *v += if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
            }
        }
        out
    }

    /// Network forward over a raw batch. Returns the head output
    /// (`n × side/2 × side/2 × 4·in_channels`), fresh maps and the tape.
    pub(crate) fn forward_batch(
        &self,
        inp: &BatchInput<'_>,
        ctx: &mut AttentionContext,
        t_key: Timestep,
    ) -> Result<(Vec<f32>, CrossAttnMaps, UNetTape)> {
        let p = &self.params;
        let n = inp.n;
        let temb_in = timestep_embedding(&inp.ts, self.config.time_dim / 2);
        let t1 = self.time1.forward(p, &temb_in);
        let t1s = silu(&t1);
        let t2 = self.time2.forward(p, &t1s);
        let temb = silu(&t2);
        let text = self.positioned_text(inp.text, inp.text_batch);

        let mut maps = CrossAttnMaps::new();
        let mut side = inp.side;
        let mut h = self.stem.forward(p, &inp.x, n, side, side);
        side = self.stem.out_size(side);

        let mut level_caches: Vec<LevelCache> = Vec::with_capacity(self.levels.len());
        let mut skips: Vec<Vec<f32>> = Vec::with_capacity(self.levels.len());
        let mut partial: Vec<(ResCache, Option<AttnCache>, Vec<f32>, usize)> = Vec::new();
        for lv in &self.levels {
            let (y, rc) = lv.down_res.forward(p, h, &temb, n, side, side);
            let (y, ac) = match &lv.down_attn {
                Some(a) => {
                    let (y, c) = a.forward(p, y, n, &text, inp.text_batch, ctx, &mut maps, t_key)?;
                    (y, Some(c))
                }
                None => (y, None),
            };
            skips.push(y.clone());
            let level_side = side;
            h = match &lv.downsample {
                Some(ds) => {
                    let out = ds.forward(p, &y, n, side, side);
                    side = ds.out_size(side);
                    out
                }
                None => y.clone(),
            };
            partial.push((rc, ac, y, level_side));
        }

        let (h1, m1) = self.mid_res1.forward(p, h, &temb, n, side, side);
        let (h2, m2) = self
            .mid_attn
            .forward(p, h1, n, &text, inp.text_batch, ctx, &mut maps, t_key)?;
        let (mut h, m3) = self.mid_res2.forward(p, h2, &temb, n, side, side);

        let mut ups: Vec<(ResCache, Option<AttnCache>, (usize, usize))> = Vec::with_capacity(self.levels.len());
        for (i, lv) in self.levels.iter().enumerate().rev() {
            let skip = skips.pop().expect("one skip per level");
            let ch = h.len() / (n * side * side);
            let cat = concat_channels(&h, ch, &skip, lv.channels);
            let (y, rc) = lv.up_res.forward(p, cat, &temb, n, side, side);
            let (y, ac) = match &lv.up_attn {
                Some(a) => {
                    let (y, c) = a.forward(p, y, n, &text, inp.text_batch, ctx, &mut maps, t_key)?;
                    (y, Some(c))
                }
                None => (y, None),
            };
            ups.push((rc, ac, (ch, lv.channels)));
            h = if i > 0 {
                let out = upsample2(&y, n, side, side, lv.channels);
                side *= 2;
                out
            } else {
                y
            };
        }
        ups.reverse();

        for ((rc, ac, down_out, lside), (urc, uac, cat_ch)) in partial.into_iter().zip(ups) {
            level_caches.push(LevelCache {
                down_res: rc,
                down_attn: ac,
                down_out,
                up_cat_channels: cat_ch,
                up_res: urc,
                up_attn: uac,
                side: lside,
            });
        }

        let (hn, head_st) = self.head_norm.forward(p, &h, n);
        let head_act = silu(&hn);
        let out = self.head.forward(p, &head_act);
        let tape = UNetTape {
            n,
            side: inp.side,
            temb_in,
            t1,
            t2,
            temb,
            text,
            stem_in: inp.x.clone(),
            level_caches,
            mid: (m1, m2, m3),
            head_in: h,
            head_st,
            head_norm_out: hn,
            head_act,
        };
        Ok((out, maps, tape))
    }

    /// Backward from the head output gradient. Accumulates parameter
    /// gradients into `grads` when given and returns the text gradient
    /// (`text_batch × len × dim`).
    pub(crate) fn backward_batch(&self, tape: &UNetTape, dout: &[f32], mut grads: Option<&mut [f32]>) -> Vec<f32> {
        let p = &self.params;
        let n = tape.n;
        let train = grads.is_some();
        let mut dtext = vec![0.0; tape.text.len()];
        let mut dtemb = vec![0.0; tape.temb.len()];

        let dact = self.head.backward(p, &tape.head_act, dout, grads.as_deref_mut());
        let dhn = silu_backward(&tape.head_norm_out, &dact);
        let mut dh = self.head_norm.backward(p, &tape.head_in, &tape.head_st, &dhn, n, grads.as_deref_mut());

        let nl = self.levels.len();
        let mut dskips: Vec<Vec<f32>> = vec![Vec::new(); nl];
        // Up path, finest first (reverse of forward order).
        for i in 0..nl {
            let lv = &self.levels[i];
            let lc = &tape.level_caches[i];
            let side = lc.side;
            let mut dy = dh;
            if let (Some(a), Some(ac)) = (&lv.up_attn, &lc.up_attn) {
                dy = a.backward(p, ac, &dy, &mut dtext, grads.as_deref_mut());
            }
            let dcat = lv.up_res.backward(p, &lc.up_res, &dy, &tape.temb, &mut dtemb, grads.as_deref_mut());
            let (dbelow, dskip) = split_channels(&dcat, lc.up_cat_channels.0, lc.up_cat_channels.1);
            dskips[i] = dskip;
            dh = if i + 1 < nl {
                upsample2_backward(&dbelow, n, side / 2, side / 2, lc.up_cat_channels.0)
            } else {
                dbelow
            };
        }

        let (m1, m2, m3) = &tape.mid;
        let d = self.mid_res2.backward(p, m3, &dh, &tape.temb, &mut dtemb, grads.as_deref_mut());
        let d = self.mid_attn.backward(p, m2, &d, &mut dtext, grads.as_deref_mut());
        let mut dh = self.mid_res1.backward(p, m1, &d, &tape.temb, &mut dtemb, grads.as_deref_mut());

        // Without parameter gradients nothing below the finest attention
        // block contributes to the text gradient.
        let first_attn = self.levels.iter().position(|l| l.down_attn.is_some());
        for i in (0..nl).rev() {
            let lv = &self.levels[i];
            let lc = &tape.level_caches[i];
            let mut dy = match &lv.downsample {
                Some(ds) => ds.backward(p, &lc.down_out, n, lc.side, lc.side, &dh, grads.as_deref_mut(), true),
                None => dh,
            };
            add_assign(&mut dy, &dskips[i]);
            if let (Some(a), Some(ac)) = (&lv.down_attn, &lc.down_attn) {
                dy = a.backward(p, ac, &dy, &mut dtext, grads.as_deref_mut());
            }
            if !train && first_attn.is_some_and(|f| i <= f) {
                return dtext;
            }
            dh = lv.down_res.backward(p, &lc.down_res, &dy, &tape.temb, &mut dtemb, grads.as_deref_mut());
        }
        if !train {
            return dtext;
        }
        self.stem.backward(p, &tape.stem_in, n, tape.side, tape.side, &dh, grads.as_deref_mut(), false);

        // Time embedding MLP.
        let dt2 = silu_backward(&tape.t2, &dtemb);
        let t1s = silu(&tape.t1);
        let dt1s = self.time2.backward(p, &t1s, &dt2, grads.as_deref_mut());
        let dt1 = silu_backward(&tape.t1, &dt1s);
        self.time1.backward(p, &tape.temb_in, &dt1, grads);
        dtext
    }

    /// Noise prediction for a batch of single images with per-image
    /// timesteps and prompts. Used for training.
    pub(crate) fn predict_images(&self, inp: &BatchInput<'_>, ctx: &mut AttentionContext) -> Result<(Vec<f32>, UNetTape)> {
        let text_len = inp.text.len() / (inp.text_batch * self.config.text_dim);
        self.check_inputs(inp.side, text_len, self.config.text_dim, ctx)?;
        let (out, _, tape) = self.forward_batch(inp, ctx, 0)?;
        Ok((out, tape))
    }

    pub(crate) fn video_to_head_layout(&self, v: &VideoTensor) -> Vec<f32> {
        self.video_to_head(v)
    }

    /// Average-pooled features of the deepest encoder block, one vector per
    /// frame, computed with per-frame attention at timestep `t`.
    pub fn encoder_features(&self, video: &VideoTensor, t: Timestep, cond: &TextEmbedding) -> Result<Vec<Vec<f32>>> {
        let mut ctx = self.per_frame_context();
        ctx.set_timestep(t);
        let inp = self.video_to_batch(video, t, cond, &ctx)?;
        let p = &self.params;
        let n = inp.n;
        let temb_in = timestep_embedding(&inp.ts, self.config.time_dim / 2);
        let t1 = silu(&self.time1.forward(p, &temb_in));
        let temb = silu(&self.time2.forward(p, &t1));
        let text = self.positioned_text(inp.text, inp.text_batch);
        let mut maps = CrossAttnMaps::new();
        let mut side = self.stem.out_size(inp.side);
        let mut h = self.stem.forward(p, &inp.x, n, inp.side, inp.side);
        let mut deepest = Vec::new();
        for lv in &self.levels {
            let (y, _) = lv.down_res.forward(p, h, &temb, n, side, side);
            let y = match &lv.down_attn {
                Some(a) => a.forward(p, y, n, &text, 1, &mut ctx, &mut maps, t)?.0,
                None => y,
            };
            deepest = y.clone();
            h = match &lv.downsample {
                Some(ds) => {
                    let out = ds.forward(p, &y, n, side, side);
                    side = ds.out_size(side);
                    out
                }
                None => y,
            };
        }
        let c = self.levels.last().map(|l| l.channels).unwrap_or(0);
        let per = deepest.len() / n;
        let tokens = per / c;
        Ok((0..n)
            .map(|b| {
                let mut v = vec![0.0f32; c];
                for tok in deepest[b * per..(b + 1) * per].chunks_exact(c) {
                    add_assign(&mut v, tok);
                }
                v.iter_mut().for_each(|x| *x /= tokens as f32);
                v
            })
            .collect())
    }

    fn run(&self, x_t: &VideoTensor, t: Timestep, cond: &TextEmbedding, ctx: &mut AttentionContext) -> Result<(Prediction, UNetTape)> {
        let inp = self.video_to_batch(x_t, t, cond, ctx)?;
        ctx.set_timestep(t);
        let (out, maps, tape) = self.forward_batch(&inp, ctx, t)?;
        let eps = self.head_to_video(&out, inp.n, inp.side);
        if !eps.is_finite() {
            return Err(Error::NonFinite("noise prediction".into()));
        }
        Ok((Prediction { eps, maps }, tape))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    config: UNetConfig,
}

const CHECKPOINT_KIND: &str = "toy-unet";

impl ToyUNet {
    /// Checkpoint as an array container: the config in the metadata block,
    /// one f32 array per parameter.
    pub fn to_container(&self) -> ArrayContainer {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
        };
        let mut c = ArrayContainer::new(toml::to_string(&meta).expect("config serializes"));
        for e in self.params.entries() {
            let a = NamedArray::f32(e.name.clone(), &e.shape, self.params.data()[e.range()].to_vec())
                .expect("parameter shapes are consistent");
            c.push(a).expect("parameter names are unique");
        }
        c
    }

    pub fn from_container(c: &ArrayContainer) -> Result<Self> {
        let meta: CheckpointMeta =
            toml::from_str(&c.meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("not a {CHECKPOINT_KIND} checkpoint: {:?}", meta.kind)));
        }
        let mut m = Self::new(meta.config)?;
        if c.arrays.len() != m.params.entries().len() {
            return Err(Error::Format(format!(
                "checkpoint has {} arrays, model expects {}",
                c.arrays.len(),
                m.params.entries().len()
            )));
        }
        let entries = m.params.entries().to_vec();
        for e in entries {
            let src = c.expect_f32(&e.name, &e.shape)?;
            if src.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint array {}", e.name)));
            }
            m.params.data_mut()[e.range()].copy_from_slice(src);
        }
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&ArrayContainer::load(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_container().to_bytes()))
    }
}

impl NoisePredictor for ToyUNet {
    type Tape = UNetTape;

    fn num_attention_layers(&self) -> usize {
        self.stages.len()
    }

    fn num_cross_attention_layers(&self) -> usize {
        self.stages.len()
    }

    fn default_context(&self) -> AttentionContext {
        AttentionContext::new(default_placement(&self.stages))
    }

    fn predict(&self, x_t: &VideoTensor, t: Timestep, cond: &TextEmbedding, ctx: &mut AttentionContext) -> Result<Prediction> {
        self.run(x_t, t, cond, ctx).map(|(p, _)| p)
    }

    fn predict_taped(
        &self,
        x_t: &VideoTensor,
        t: Timestep,
        cond: &TextEmbedding,
        ctx: &mut AttentionContext,
    ) -> Result<(Prediction, UNetTape)> {
        self.run(x_t, t, cond, ctx)
    }

    fn text_gradient(&self, tape: &UNetTape, d_eps: &VideoTensor) -> Result<TextEmbedding> {
        let [n, _, side, _] = d_eps.shape();
        if n != tape.n || side != tape.side {
            return Err(Error::shape([tape.n, self.config.in_channels, tape.side, tape.side], d_eps.shape()));
        }
        let dout = self.video_to_head(d_eps);
        let dtext = self.backward_batch(tape, &dout, None);
        let len = dtext.len() / self.config.text_dim;
        TextEmbedding::new(len, self.config.text_dim, dtext)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::gradcheck::{check, project, randn};
    use rand::SeedableRng;

    fn tiny() -> UNetConfig {
        UNetConfig {
            image_size: 8,
            in_channels: 3,
            levels: vec![
                LevelConfig {
                    channels: 8,
                    attention: false,
                },
                LevelConfig {
                    channels: 8,
                    attention: true,
                },
            ],
            heads: 2,
            text_dim: 4,
            time_dim: 8,
            groups: 4,
            seed: 1,
        }
    }

    fn video(f: usize, side: usize, seed: u64) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::randn([f, 3, side, side], &mut rng)
    }

    fn text(l: usize, d: usize, seed: u64) -> TextEmbedding {
        TextEmbedding::new(l, d, randn(l * d, seed)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        let c = UNetConfig { image_size: 36, ..UNetConfig::default() };
        assert!(matches!(build_toy_unet(c), Err(Error::Config(_))));
        let mut c = UNetConfig::default();
        c.levels[1].channels = 0;
        assert!(build_toy_unet(c).is_err());
        let mut c = UNetConfig::default();
        c.levels.clear();
        assert!(build_toy_unet(c).is_err());
    }

    #[test]
    fn default_model_size_and_placement() {
        let m = build_toy_unet(UNetConfig::default()).unwrap();
        assert!(m.num_parameters() < 5_000_000);
        assert_eq!(m.num_attention_layers(), 5);
        use AttentionMode::*;
        assert_eq!(
            m.default_context().modes(),
            &[SpatialTemporal, SparseCausal, SpatialTemporal, SpatialTemporal, SparseCausal]
        );
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_toy_unet(tiny()).unwrap();
        let b = build_toy_unet(tiny()).unwrap();
        assert_eq!(a.params().data(), b.params().data());
        let mut c = tiny();
        c.seed = 2;
        assert_ne!(build_toy_unet(c).unwrap().params().data(), a.params().data());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_toy_unet(tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        m.save(&path).unwrap();
        let back = ToyUNet::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params().data(), m.params().data());
        assert_eq!(back.fingerprint(), m.fingerprint());

        let mut c = m.to_container();
        c.arrays.pop();
        assert!(ToyUNet::from_container(&c).is_err());
        let mut c = m.to_container();
        c.meta = c.meta.replace("toy-unet", "other");
        assert!(ToyUNet::from_container(&c).is_err());
        assert!(matches!(ToyUNet::load(&dir.path().join("absent.bin")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn input_validation() {
        let m = build_toy_unet(tiny()).unwrap();
        let cond = text(3, 4, 0);
        let mut ctx = m.default_context();
        assert!(m.predict(&video(2, 6, 0), 10, &cond, &mut ctx).is_err());
        assert!(m.predict(&video(2, 8, 0), 10, &text(3, 5, 0), &mut ctx).is_err());
        let mut short = AttentionContext::uniform(AttentionMode::PerFrame, 1);
        assert!(m.predict(&video(2, 8, 0), 10, &cond, &mut short).is_err());
        let mut bad = video(2, 8, 0);
        bad.data_mut()[0] = f64::NAN;
        assert!(matches!(m.predict(&bad, 10, &cond, &mut ctx), Err(Error::NonFinite(_))));
    }

    #[test]
    fn maps_cover_every_cross_attention_layer() {
        let m = build_toy_unet(tiny()).unwrap();
        let mut ctx = m.default_context();
        let p = m.predict(&video(3, 8, 0), 41, &text(5, 4, 1), &mut ctx).unwrap();
        assert_eq!(p.eps.shape(), [3, 3, 8, 8]);
        assert_eq!(p.maps.len(), m.num_cross_attention_layers());
        for layer in 0..m.num_cross_attention_layers() {
            let mp = p.maps.get(41, layer).unwrap();
            assert_eq!((mp.frames, mp.heads, mp.tokens), (3, 2, 5));
            assert!(mp.max_row_sum_error() < 1e-5);
        }
    }

    #[test]
    fn text_gradient_matches_finite_differences() {
        let m = build_toy_unet(tiny()).unwrap();
        let x = video(3, 8, 2);
        let cond = text(3, 4, 3);
        let r = video(3, 8, 4);
        let mut ctx = m.default_context();
        let (_, tape) = m.predict_taped(&x, 300, &cond, &mut ctx).unwrap();
        let g = m.text_gradient(&tape, &r).unwrap();
        let loss = |tt: &[f32]| {
            let c = TextEmbedding::new(3, 4, tt.to_vec()).unwrap();
            let mut ctx = m.default_context();
            let e = m.predict(&x, 300, &c, &mut ctx).unwrap().eps;
            e.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        check(cond.data(), g.data(), loss, 1e-2, 3e-2);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let m = build_toy_unet(tiny()).unwrap();
        let n = 2;
        let x = randn(n * 8 * 8 * 3, 5);
        let txt = randn(n * 3 * 4, 6);
        let inp = BatchInput {
            x: x.clone(),
            n,
            side: 8,
            ts: vec![100.0, 700.0],
            text: &txt,
            text_batch: n,
        };
        let mut ctx = m.per_frame_context();
        let (out, tape) = m.predict_images(&inp, &mut ctx).unwrap();
        let r = randn(out.len(), 7);
        let mut g = vec![0.0; m.num_parameters()];
        m.backward_batch(&tape, &r, Some(&mut g));
        let loss = |pp: &[f32]| {
            let mut mm = m.clone();
            mm.params_mut().data_mut().copy_from_slice(pp);
            let mut ctx = mm.per_frame_context();
            project(&mm.predict_images(&inp, &mut ctx).unwrap().0, &r)
        };
        check(m.params().data(), &g, loss, 1e-2, 3e-2);
    }

    #[test]
    fn per_frame_mode_commutes_with_frame_permutation() {
        let m = build_toy_unet(tiny()).unwrap();
        let x = video(4, 8, 9);
        let cond = text(3, 4, 1);
        let perm = [2, 0, 3, 1];
        let mut ctx = m.per_frame_context();
        let a = m.predict(&x, 500, &cond, &mut ctx).unwrap().eps;
        let b = m.predict(&x.select_frames(&perm), 500, &cond, &mut ctx.clone()).unwrap().eps;
        assert!(a.select_frames(&perm).max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn single_frame_degenerates_for_frame_level_modes() {
        let m = build_toy_unet(tiny()).unwrap();
        let x = video(1, 8, 9);
        let cond = text(3, 4, 1);
        let base = m.predict(&x, 500, &cond, &mut m.per_frame_context()).unwrap().eps;
        for mode in [AttentionMode::SparseCausal, AttentionMode::SpatialTemporal] {
            let mut ctx = AttentionContext::uniform(mode, m.num_attention_layers());
            let e = m.predict(&x, 500, &cond, &mut ctx).unwrap().eps;
            assert_eq!(e.data(), base.data(), "{mode:?}");
        }
        // Temporal-only attention never mixes spatial positions, so with one
        // frame each token only sees itself.
        let mut ctx = AttentionContext::uniform(AttentionMode::TemporalOnly, m.num_attention_layers());
        let e = m.predict(&x, 500, &cond, &mut ctx).unwrap().eps;
        assert!(e.max_abs_diff(&base).unwrap() > 1e-3);
    }

    #[test]
    fn identical_frames_give_identical_outputs() {
        let m = build_toy_unet(tiny()).unwrap();
        let one = video(1, 8, 9);
        let x = one.select_frames(&[0, 0, 0, 0]);
        let cond = text(3, 4, 1);
        let mut ctx = AttentionContext::uniform(AttentionMode::SpatialTemporal, m.num_attention_layers());
        let e = m.predict(&x, 500, &cond, &mut ctx).unwrap().eps;
        let single = m.predict(&one, 500, &cond, &mut m.per_frame_context()).unwrap().eps;
        for f in 0..4 {
            let diff = e.frame(f).iter().zip(single.frame(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-5, "frame {f}: {diff}");
        }
    }

    #[test]
    fn predict_is_pure() {
        let m = build_toy_unet(tiny()).unwrap();
        let before = m.params().data().to_vec();
        let x = video(2, 8, 3);
        let x0 = x.clone();
        let cond = text(3, 4, 1);
        let mut ctx = m.default_context();
        let a = m.predict(&x, 10, &cond, &mut ctx).unwrap().eps;
        let b = m.predict(&x, 10, &cond, &mut ctx).unwrap().eps;
        assert_eq!(a, b);
        assert_eq!(x, x0);
        assert_eq!(m.params().data(), &before[..]);
    }

    #[test]
    fn gradient_unavailable_by_default() {
        struct Zero;
        impl NoisePredictor for Zero {
            type Tape = ();
            fn num_attention_layers(&self) -> usize {
                0
            }
            fn num_cross_attention_layers(&self) -> usize {
                0
            }
            fn default_context(&self) -> AttentionContext {
                AttentionContext::new(vec![])
            }
            fn predict(&self, x: &VideoTensor, _: Timestep, _: &TextEmbedding, _: &mut AttentionContext) -> Result<Prediction> {
                Ok(Prediction {
                    eps: VideoTensor::zeros(x.shape()),
                    maps: CrossAttnMaps::new(),
                })
            }
        }
        let mut ctx = Zero.default_context();
        let r = Zero.predict_taped(&video(1, 8, 0), 1, &text(1, 1, 0), &mut ctx);
        assert!(matches!(r, Err(Error::GradientUnavailable)));
    }

    #[test]
    #[ignore]
    fn bench_forward() {
        let m = build_toy_unet(UNetConfig::default()).unwrap();
        let x = video(8, 32, 0);
        let cond = text(8, 32, 0);
        let mut ctx = m.default_context();
        let t0 = std::time::Instant::now();
        for _ in 0..10 {
            m.predict(&x, 500, &cond, &mut ctx).unwrap();
        }
        eprintln!("forward {:?} per call, {} params", t0.elapsed() / 10, m.num_parameters());
        let (_, tape) = m.predict_taped(&x, 500, &cond, &mut ctx).unwrap();
        let t0 = std::time::Instant::now();
        for _ in 0..10 {
            m.text_gradient(&tape, &x).unwrap();
        }
        eprintln!("text grad {:?} per call", t0.elapsed() / 10);
    }
}
