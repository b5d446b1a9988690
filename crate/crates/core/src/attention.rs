//! Cross-frame self-attention modes, text cross-attention, and the
//! recording/injection of cross-attention maps.
//!
//! All modes reuse one set of 2D projection weights (`W^Q`, `W^K`, `W^V`,
//! `W^O`); a mode only changes which key/value tokens a query may see:
//!
//! | mode              | query token `(i, n)` attends to                 |
//! |-------------------|-------------------------------------------------|
//! | `PerFrame`        | all tokens of frame `i`                         |
//! | `SparseCausal`    | all tokens of frames `0` and `i - 1`            |
//! | `TemporalOnly`    | token `n` of every frame                        |
//! | `SpatialTemporal` | all tokens of every frame                       |
//!
//! For `SparseCausal` the first frame attends to itself only, and frame `1`
//! (whose first and previous frames coincide) attends to frame `0` once.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{add_assign, exp_f32, gemm, Linear, ParamStore, View};
use crate::error::{Error, Result};
use crate::schedule::Timestep;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    #[serde(rename = "self")]
    PerFrame,
    #[serde(rename = "sc")]
    SparseCausal,
    #[serde(rename = "temporal")]
    TemporalOnly,
    #[serde(rename = "st")]
    SpatialTemporal,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::PerFrame,
        AttentionMode::SparseCausal,
        AttentionMode::TemporalOnly,
        AttentionMode::SpatialTemporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::PerFrame => "self",
            AttentionMode::SparseCausal => "sc",
            AttentionMode::TemporalOnly => "temporal",
            AttentionMode::SpatialTemporal => "st",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown attention mode {s:?} (expected self, sc, temporal, st)")))
    }

    /// Frames whose tokens frame `i` attends to. Not meaningful for
    /// `TemporalOnly`, which mixes across frames per spatial position.
    pub fn key_frames(self, i: usize, frames: usize) -> Vec<usize> {
        match self {
            AttentionMode::PerFrame | AttentionMode::TemporalOnly => vec![i],
            AttentionMode::SpatialTemporal => (0..frames).collect(),
            AttentionMode::SparseCausal => {
                if i <= 1 {
                    vec![0]
                } else {
                    vec![0, i - 1]
                }
            }
        }
    }
}

/// Default placement: the first self-attention layer of each of the
/// down-sampling, middle and up-sampling stages runs spatial-temporal
/// attention, every other layer sparse-causal attention.
pub fn default_placement(stages: &[Stage]) -> Vec<AttentionMode> {
    stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i == 0 || stages[i - 1] != *s {
                AttentionMode::SpatialTemporal
            } else {
                AttentionMode::SparseCausal
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Down,
    Mid,
    Up,
}

// ---------------------------------------------------------------------------
// Kernels

/// Scaled dot-product attention of `nq` queries against `nk` keys for every
/// head. `q`: `nq × c`, `k`, `v`: `nk × c`, `probs`: `heads × nq × nk`
/// (written), `out`: `nq × c` (written).
fn attend(q: &[f32], k: &[f32], v: &[f32], c: usize, heads: usize, probs: &mut [f32], out: &mut [f32]) {
    let nq = q.len() / c;
    let nk = k.len() / c;
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        gemm(
            nq,
            dh,
            nk,
            scale,
            q,
            View::rows(c).at(h * dh),
            k,
            View::cols(c).at(h * dh),
            0.0,
            p,
            View::rows(nk),
        );
        softmax_rows(p, nk);
        gemm(
            nq,
            nk,
            dh,
            1.0,
            p,
            View::rows(nk),
            v,
            View::rows(c).at(h * dh),
            0.0,
            out,
            View::rows(c).at(h * dh),
        );
    }
}

/// `out = probs · v` per head, for externally supplied probabilities.
fn apply_probs(probs: &[f32], v: &[f32], c: usize, heads: usize, out: &mut [f32]) {
    let nq = out.len() / c;
    let nk = v.len() / c;
    let dh = c / heads;
    for h in 0..heads {
        gemm(
            nq,
            nk,
            dh,
            1.0,
            &probs[h * nq * nk..(h + 1) * nq * nk],
            View::rows(nk),
            v,
            View::rows(c).at(h * dh),
            0.0,
            out,
            View::rows(c).at(h * dh),
        );
    }
}

pub(crate) fn softmax_rows(x: &mut [f32], width: usize) {
    for row in x.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for v in row.iter_mut() {
            *v = exp_f32(*v - max);
        }
        let inv = 1.0 / row.iter().sum::<f32>();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Backward of [`attend`]. Accumulates into `dq`, `dk`, `dv`. When
/// `probs_constant` is set the probabilities were supplied externally and
/// only `dv` receives gradient.
#[allow(clippy::too_many_arguments)]
fn attend_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    c: usize,
    heads: usize,
    probs_constant: bool,
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let nq = q.len() / c;
    let nk = k.len() / c;
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ds = vec![0.0f32; nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        // dV += Pᵀ dO
        gemm(
            nk,
            nq,
            dh,
            1.0,
            p,
            View::cols(nk),
            dout,
            View::rows(c).at(h * dh),
            1.0,
            dv,
            View::rows(c).at(h * dh),
        );
        if probs_constant {
            continue;
        }
        // dP = dO Vᵀ
        gemm(
            nq,
            dh,
            nk,
            1.0,
            dout,
            View::rows(c).at(h * dh),
            v,
            View::cols(c).at(h * dh),
            0.0,
            &mut ds,
            View::rows(nk),
        );
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for (drow, prow) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
            let dot: f32 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (d, &pp) in drow.iter_mut().zip(prow) {
                *d = pp * (*d - dot);
            }
        }
        gemm(
            nq,
            nk,
            dh,
            scale,
            &ds,
            View::rows(nk),
            k,
            View::rows(c).at(h * dh),
            1.0,
            dq,
            View::rows(c).at(h * dh),
        );
        gemm(
            nk,
            nq,
            dh,
            scale,
            &ds,
            View::cols(nk),
            q,
            View::rows(c).at(h * dh),
            1.0,
            dk,
            View::rows(c).at(h * dh),
        );
    }
}

/// `(frames, tokens, c)` → `(tokens, frames, c)`.
fn swap_frame_token_axes(x: &[f32], frames: usize, tokens: usize, c: usize) -> Vec<f32> {
    let mut y = vec![0.0; x.len()];
    for f in 0..frames {
        for n in 0..tokens {
            let src = (f * tokens + n) * c;
            let dst = (n * frames + f) * c;
            y[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    y
}

/// Key/value rows visible to one query group, gathered into contiguous
/// buffers when the visible frames are not already adjacent.
fn gather_frames<'a>(x: &'a [f32], frames: &[usize], block: usize) -> std::borrow::Cow<'a, [f32]> {
    let contiguous = frames.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous {
        let (a, b) = (frames[0], frames[frames.len() - 1] + 1);
        std::borrow::Cow::Borrowed(&x[a * block..b * block])
    } else {
        let mut buf = Vec::with_capacity(frames.len() * block);
        for &j in frames {
            buf.extend_from_slice(&x[j * block..(j + 1) * block]);
        }
        std::borrow::Cow::Owned(buf)
    }
}

/// Saved state of a cross-frame attention over already-projected `q`, `k`, `v`.
#[derive(Clone, Debug)]
pub(crate) struct FrameAttnState {
    mode: AttentionMode,
    frames: usize,
    tokens: usize,
    /// Query-group layout: frame-major for frame modes, token-major for
    /// temporal attention.
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// Probabilities per query group.
    probs: Vec<Vec<f32>>,
}

/// Attention over projected `(frames, tokens, c)` queries, keys and values.
pub(crate) fn attend_frames(
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    frames: usize,
    tokens: usize,
    c: usize,
    heads: usize,
    mode: AttentionMode,
) -> (Vec<f32>, FrameAttnState) {
    let (q, k, v, groups, per_group) = if mode == AttentionMode::TemporalOnly {
        (
            swap_frame_token_axes(&q, frames, tokens, c),
            swap_frame_token_axes(&k, frames, tokens, c),
            swap_frame_token_axes(&v, frames, tokens, c),
            tokens,
            frames,
        )
    } else {
        (q, k, v, frames, tokens)
    };
    let block = per_group * c;
    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::with_capacity(groups);
    for g in 0..groups {
        let keys = mode.key_frames(g, frames);
        let kk = gather_frames(&k, &keys, block);
        let vv = gather_frames(&v, &keys, block);
        let mut p = vec![0.0; heads * per_group * keys.len() * per_group];
        attend(
            &q[g * block..(g + 1) * block],
            &kk,
            &vv,
            c,
            heads,
            &mut p,
            &mut out[g * block..(g + 1) * block],
        );
        probs.push(p);
    }
    if mode == AttentionMode::TemporalOnly {
        out = swap_frame_token_axes(&out, tokens, frames, c);
    }
    (
        out,
        FrameAttnState {
            mode,
            frames,
            tokens,
            q,
            k,
            v,
            probs,
        },
    )
}

/// Gradients `(dq, dk, dv)` in `(frames, tokens, c)` layout.
pub(crate) fn attend_frames_backward(
    st: &FrameAttnState,
    dout: &[f32],
    c: usize,
    heads: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let temporal = st.mode == AttentionMode::TemporalOnly;
    let (groups, per_group) = if temporal {
        (st.tokens, st.frames)
    } else {
        (st.frames, st.tokens)
    };
    let dout = if temporal {
        std::borrow::Cow::Owned(swap_frame_token_axes(dout, st.frames, st.tokens, c))
    } else {
        std::borrow::Cow::Borrowed(dout)
    };
    let block = per_group * c;
    let mut dq = vec![0.0; st.q.len()];
    let mut dk = vec![0.0; st.k.len()];
    let mut dv = vec![0.0; st.v.len()];
    for g in 0..groups {
        let keys = st.mode.key_frames(g, st.frames);
        let kk = gather_frames(&st.k, &keys, block);
        let vv = gather_frames(&st.v, &keys, block);
        let mut dkk = vec![0.0; kk.len()];
        let mut dvv = vec![0.0; vv.len()];
        attend_backward(
            &st.q[g * block..(g + 1) * block],
            &kk,
            &vv,
            &st.probs[g],
            &dout[g * block..(g + 1) * block],
            c,
            heads,
            false,
            &mut dq[g * block..(g + 1) * block],
            &mut dkk,
            &mut dvv,
        );
        for (slot, &j) in keys.iter().enumerate() {
            add_assign(&mut dk[j * block..(j + 1) * block], &dkk[slot * block..(slot + 1) * block]);
            add_assign(&mut dv[j * block..(j + 1) * block], &dvv[slot * block..(slot + 1) * block]);
        }
    }
    if temporal {
        (
            swap_frame_token_axes(&dq, st.tokens, st.frames, c),
            swap_frame_token_axes(&dk, st.tokens, st.frames, c),
            swap_frame_token_axes(&dv, st.tokens, st.frames, c),
        )
    } else {
        (dq, dk, dv)
    }
}

// ---------------------------------------------------------------------------
// Public standalone operation

/// Projection weights of one attention layer, row-vector convention
/// (`y = x · W`), each `dim × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub dim: usize,
    pub heads: usize,
    pub w_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub w_v: Vec<f32>,
    pub w_out: Vec<f32>,
    pub b_out: Vec<f32>,
}

impl AttentionWeights {
    pub fn random<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f32).sqrt();
        let mut m = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<f32>>();
        Self {
            dim,
            heads,
            w_q: m(dim * dim),
            w_k: m(dim * dim),
            w_v: m(dim * dim),
            w_out: m(dim * dim),
            b_out: m(dim),
        }
    }

    fn validate(&self) -> Result<()> {
        let d2 = self.dim * self.dim;
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::domain(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_out", &self.w_out)] {
            if w.len() != d2 {
                return Err(Error::shape(format!("{name}: {d2}"), w.len()));
            }
        }
        if self.b_out.len() != self.dim {
            return Err(Error::shape(self.dim, self.b_out.len()));
        }
        Ok(())
    }
}

/// Token features of a video: `frames × tokens × dim`, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokens {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FrameTokens {
    pub fn new(frames: usize, tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * tokens * dim {
            return Err(Error::shape(frames * tokens * dim, data.len()));
        }
        Ok(Self {
            frames,
            tokens,
            dim,
            data,
        })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let b = self.tokens * self.dim;
        &self.data[i * b..(i + 1) * b]
    }
}

fn project(x: &[f32], w: &[f32], din: usize, dout: usize) -> Vec<f32> {
    crate::engine::matmul(x, w, x.len() / din, din, dout)
}

/// Self-attention of every frame's tokens under `mode`, with shared weights.
pub fn cross_frame_attend(features: &FrameTokens, mode: AttentionMode, weights: &AttentionWeights) -> Result<FrameTokens> {
    weights.validate()?;
    if features.frames == 0 || features.tokens == 0 {
        return Err(Error::domain("attention needs at least one frame and one token"));
    }
    if features.dim != weights.dim || features.data.len() != features.frames * features.tokens * features.dim {
        return Err(Error::shape(weights.dim, features.dim));
    }
    let d = weights.dim;
    let q = project(&features.data, &weights.w_q, d, d);
    let k = project(&features.data, &weights.w_k, d, d);
    let v = project(&features.data, &weights.w_v, d, d);
    let (ctx, _) = attend_frames(q, k, v, features.frames, features.tokens, d, weights.heads, mode);
    let mut out = project(&ctx, &weights.w_out, d, d);
    for row in out.chunks_exact_mut(d) {
        add_assign(row, &weights.b_out);
    }
    FrameTokens::new(features.frames, features.tokens, d, out)
}

// ---------------------------------------------------------------------------
// Cross-attention maps and run context

/// Softmax weights from spatial queries to text tokens for one layer and
/// one timestep: `frames × heads × queries × tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMap {
    pub frames: usize,
    pub heads: usize,
    pub queries: usize,
    pub tokens: usize,
    pub data: Vec<f32>,
}

impl AttnMap {
    pub fn new(frames: usize, heads: usize, queries: usize, tokens: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * heads * queries * tokens {
            return Err(Error::shape(frames * heads * queries * tokens, data.len()));
        }
        Ok(Self {
            frames,
            heads,
            queries,
            tokens,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.heads, self.queries, self.tokens]
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f32 {
        self.data
            .chunks_exact(self.tokens)
            .map(|r| (r.iter().sum::<f32>() - 1.0).abs())
            .fold(0.0, f32::max)
    }

    /// Heads × queries × tokens block of one frame.
    pub fn frame(&self, f: usize) -> &[f32] {
        let b = self.heads * self.queries * self.tokens;
        &self.data[f * b..(f + 1) * b]
    }
}

/// Cross-attention maps keyed by `(timestep, layer)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CrossAttnMaps {
    maps: BTreeMap<(Timestep, usize), AttnMap>,
}

impl CrossAttnMaps {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, timestep: Timestep, layer: usize, map: AttnMap) -> Result<()> {
        use std::collections::btree_map::Entry;
        match self.maps.entry((timestep, layer)) {
            Entry::Occupied(_) => Err(Error::DuplicateMap { timestep, layer }),
            Entry::Vacant(v) => {
                v.insert(map);
                Ok(())
            }
        }
    }

    pub fn get(&self, timestep: Timestep, layer: usize) -> Option<&AttnMap> {
        self.maps.get(&(timestep, layer))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(Timestep, usize), &AttnMap)> {
        self.maps.iter()
    }

    pub fn timesteps(&self) -> Vec<Timestep> {
        let mut ts: Vec<_> = self.maps.keys().map(|k| k.0).collect();
        ts.dedup();
        ts
    }

    pub fn layers_at(&self, timestep: Timestep) -> Vec<usize> {
        self.maps.range((timestep, 0)..=(timestep, usize::MAX)).map(|(k, _)| k.1).collect()
    }
}

/// Which classifier-free-guidance branch a prediction belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// What to do when an injected map has a different token count than the
/// freshly computed one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMismatch {
    Reject,
    /// Inject the first `min(L_src, L_tgt)` token columns, keep the rest fresh.
    LeadingColumns,
}

/// Per-run attention configuration and cross-attention map state.
///
/// A context belongs to exactly one sampling run: it accumulates recorded
/// maps and injection counters and must not be shared between concurrent runs.
#[derive(Clone, Debug)]
pub struct AttentionContext {
    pub run_id: String,
    modes: Vec<AttentionMode>,
    record_maps: bool,
    recorded: CrossAttnMaps,
    injected: Option<Arc<CrossAttnMaps>>,
    inject_active: bool,
    inject_unconditional: bool,
    token_mismatch: TokenMismatch,
    branch: Branch,
    timestep: Option<Timestep>,
    injections_applied: usize,
}

impl AttentionContext {
    pub fn new(modes: Vec<AttentionMode>) -> Self {
        Self {
            run_id: String::new(),
            modes,
            record_maps: false,
            recorded: CrossAttnMaps::new(),
            injected: None,
            inject_active: false,
            inject_unconditional: false,
            token_mismatch: TokenMismatch::Reject,
            branch: Branch::Conditional,
            timestep: None,
            injections_applied: 0,
        }
    }

    pub fn uniform(mode: AttentionMode, layers: usize) -> Self {
        Self::new(vec![mode; layers])
    }

    pub fn with_run_id(mut self, id: impl Into<String>) -> Self {
        self.run_id = id.into();
        self
    }

    pub fn modes(&self) -> &[AttentionMode] {
        &self.modes
    }

    pub fn set_mode(&mut self, layer: usize, mode: AttentionMode) -> Result<()> {
        let n = self.modes.len();
        let slot = self
            .modes
            .get_mut(layer)
            .ok_or_else(|| Error::domain(format!("attention layer {layer} out of range ({n} layers)")))?;
        *slot = mode;
        Ok(())
    }

    pub fn set_record(&mut self, on: bool) {
        self.record_maps = on;
    }

    pub fn record_maps(&self) -> bool {
        self.record_maps
    }

    pub fn recorded(&self) -> &CrossAttnMaps {
        &self.recorded
    }

    pub fn take_recorded(&mut self) -> CrossAttnMaps {
        std::mem::take(&mut self.recorded)
    }

    /// Installs maps to inject; injection fires only while [`Self::set_injection_active`] is on.
    pub fn set_injected(&mut self, maps: Option<Arc<CrossAttnMaps>>) {
        self.injected = maps;
    }

    pub fn injected(&self) -> Option<&CrossAttnMaps> {
        self.injected.as_deref()
    }

    pub fn set_injection_active(&mut self, on: bool) {
        self.inject_active = on;
    }

    pub fn set_inject_unconditional(&mut self, on: bool) {
        self.inject_unconditional = on;
    }

    pub fn set_token_mismatch(&mut self, policy: TokenMismatch) {
        self.token_mismatch = policy;
    }

    pub fn set_branch(&mut self, branch: Branch) {
        self.branch = branch;
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn set_timestep(&mut self, t: Timestep) {
        self.timestep = Some(t);
    }

    pub fn timestep(&self) -> Option<Timestep> {
        self.timestep
    }

    /// Number of cross-attention evaluations that used an injected map.
    pub fn injections_applied(&self) -> usize {
        self.injections_applied
    }

    fn current_timestep(&self) -> Result<Timestep> {
        self.timestep
            .ok_or_else(|| Error::domain("attention context has no current timestep"))
    }

    fn injection_fires(&self) -> bool {
        self.inject_active
            && self.injected.is_some()
            && (self.branch == Branch::Conditional || self.inject_unconditional)
    }

    /// Records (when enabled) and resolves the map a cross-attention layer
    /// should use for the current timestep.
    pub(crate) fn observe_cross_attention(&mut self, layer: usize, fresh: AttnMap) -> Result<(AttnMap, bool)> {
        if self.record_maps && self.branch == Branch::Conditional {
            record_cross_attention(self, layer, fresh.clone())?;
        }
        if self.injection_fires() {
            let before = self.injections_applied;
            let used = inject_cross_attention(self, layer, fresh)?;
            Ok((used, self.injections_applied > before))
        } else {
            Ok((fresh, false))
        }
    }
}

/// Stores `map` under the context's current timestep and `layer`.
pub fn record_cross_attention(ctx: &mut AttentionContext, layer: usize, map: AttnMap) -> Result<()> {
    if !ctx.record_maps {
        return Err(Error::domain("map recording is disabled on this context"));
    }
    let t = ctx.current_timestep()?;
    ctx.recorded.insert(t, layer, map)
}

/// The injected map for the current timestep and `layer` when one is
/// installed, otherwise `fresh` unchanged.
pub fn inject_cross_attention(ctx: &mut AttentionContext, layer: usize, fresh: AttnMap) -> Result<AttnMap> {
    let t = ctx.current_timestep()?;
    let Some(src) = ctx.injected.as_ref().and_then(|m| m.get(t, layer)) else {
        return Ok(fresh);
    };
    if src.frames != fresh.frames || src.heads != fresh.heads || src.queries != fresh.queries {
        return Err(Error::shape(fresh.dims(), src.dims()));
    }
    let used = if src.tokens == fresh.tokens {
        src.clone()
    } else {
        match ctx.token_mismatch {
            TokenMismatch::Reject => return Err(Error::shape(fresh.dims(), src.dims())),
            TokenMismatch::LeadingColumns => {
                let keep = src.tokens.min(fresh.tokens);
                let mut out = fresh;
                for (orow, srow) in out.data.chunks_exact_mut(out.tokens).zip(src.data.chunks_exact(src.tokens)) {
                    orow[..keep].copy_from_slice(&srow[..keep]);
                }
                out
            }
        }
    };
    ctx.injections_applied += 1;
    Ok(used)
}

// ---------------------------------------------------------------------------
// Layers used by the denoiser

/// Self-attention layer whose token mixing pattern is chosen per call.
#[derive(Clone, Debug)]
pub(crate) struct FrameSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub c: usize,
    pub heads: usize,
}

pub(crate) struct FrameSelfAttentionCache {
    x: Vec<f32>,
    ctx_out: Vec<f32>,
    state: FrameAttnState,
}

impl FrameSelfAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.to_q"), c, c, false),
            k: Linear::new(store, rng, &format!("{name}.to_k"), c, c, false),
            v: Linear::new(store, rng, &format!("{name}.to_v"), c, c, false),
            o: Linear::new(store, rng, &format!("{name}.to_out"), c, c, true),
            c,
            heads,
        }
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        x: &[f32],
        frames: usize,
        mode: AttentionMode,
    ) -> (Vec<f32>, FrameSelfAttentionCache) {
        let tokens = x.len() / (frames * self.c);
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, x);
        let v = self.v.forward(p, x);
        let (ctx_out, state) = attend_frames(q, k, v, frames, tokens, self.c, self.heads, mode);
        let y = self.o.forward(p, &ctx_out);
        (
            y,
            FrameSelfAttentionCache {
                x: x.to_vec(),
                ctx_out,
                state,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, cache: &FrameSelfAttentionCache, dy: &[f32], mut grads: Option<&mut [f32]>) -> Vec<f32> {
        let dctx = self.o.backward(p, &cache.ctx_out, dy, grads.as_deref_mut());
        let (dq, dk, dv) = attend_frames_backward(&cache.state, &dctx, self.c, self.heads);
        let mut dx = self.q.backward(p, &cache.x, &dq, grads.as_deref_mut());
        add_assign(&mut dx, &self.k.backward(p, &cache.x, &dk, grads.as_deref_mut()));
        add_assign(&mut dx, &self.v.backward(p, &cache.x, &dv, grads));
        dx
    }
}

/// Attention from spatial tokens to text tokens. Each frame attends to the
/// text independently.
#[derive(Clone, Debug)]
pub(crate) struct TextCrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub c: usize,
    pub text_dim: usize,
    pub heads: usize,
}

pub(crate) struct TextCrossAttentionCache {
    x: Vec<f32>,
    text: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    injected: bool,
    ctx_out: Vec<f32>,
    frames: usize,
    text_batch: usize,
}

impl TextCrossAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize, text_dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.to_q"), c, c, false),
            k: Linear::new(store, rng, &format!("{name}.to_k"), text_dim, c, false),
            v: Linear::new(store, rng, &format!("{name}.to_v"), text_dim, c, false),
            o: Linear::new(store, rng, &format!("{name}.to_out"), c, c, true),
            c,
            text_dim,
            heads,
        }
    }

    /// `text` holds `text_batch` sequences of `text_len` tokens; a single
    /// sequence is shared by all frames, otherwise frame `i` uses sequence `i`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        p: &ParamStore,
        x: &[f32],
        frames: usize,
        text: &[f32],
        text_batch: usize,
        layer: usize,
        actx: &mut AttentionContext,
    ) -> Result<(Vec<f32>, TextCrossAttentionCache, AttnMap)> {
        let c = self.c;
        let tokens = x.len() / (frames * c);
        let text_len = text.len() / (text_batch * self.text_dim);
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, text);
        let v = self.v.forward(p, text);
        let block = tokens * c;
        let tblock = text_len * c;
        let pblock = self.heads * tokens * text_len;
        let mut probs = vec![0.0; frames * pblock];
        let mut ctx_out = vec![0.0; x.len()];
        for f in 0..frames {
            let ti = if text_batch == 1 { 0 } else { f };
            attend(
                &q[f * block..(f + 1) * block],
                &k[ti * tblock..(ti + 1) * tblock],
                &v[ti * tblock..(ti + 1) * tblock],
                c,
                self.heads,
                &mut probs[f * pblock..(f + 1) * pblock],
                &mut ctx_out[f * block..(f + 1) * block],
            );
        }
        let fresh = AttnMap::new(frames, self.heads, tokens, text_len, probs)?;
        let (used, injected) = actx.observe_cross_attention(layer, fresh.clone())?;
        if injected {
            for f in 0..frames {
                let ti = if text_batch == 1 { 0 } else { f };
                apply_probs(
                    used.frame(f),
                    &v[ti * tblock..(ti + 1) * tblock],
                    c,
                    self.heads,
                    &mut ctx_out[f * block..(f + 1) * block],
                );
            }
        }
        let probs = used.data;
        let y = self.o.forward(p, &ctx_out);
        Ok((
            y,
            TextCrossAttentionCache {
                x: x.to_vec(),
                text: text.to_vec(),
                q,
                k,
                v,
                probs,
                injected,
                ctx_out,
                frames,
                text_batch,
            },
            fresh,
        ))
    }

    /// Returns `(dx, dtext)`. Injected maps are treated as constants.
    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &TextCrossAttentionCache,
        dy: &[f32],
        mut grads: Option<&mut [f32]>,
    ) -> (Vec<f32>, Vec<f32>) {
        let c = self.c;
        let frames = cache.frames;
        let tokens = cache.x.len() / (frames * c);
        let text_len = cache.text.len() / (self.text_dim * cache.text_batch);
        let dctx = self.o.backward(p, &cache.ctx_out, dy, grads.as_deref_mut());
        let mut dq = vec![0.0; cache.q.len()];
        let mut dk = vec![0.0; cache.k.len()];
        let mut dv = vec![0.0; cache.v.len()];
        let block = tokens * c;
        let tblock = text_len * c;
        let pblock = self.heads * tokens * text_len;
        for f in 0..frames {
            let ti = if cache.text_batch == 1 { 0 } else { f };
            let (dk_t, dv_t) = (&mut dk[ti * tblock..(ti + 1) * tblock], &mut dv[ti * tblock..(ti + 1) * tblock]);
            attend_backward(
                &cache.q[f * block..(f + 1) * block],
                &cache.k[ti * tblock..(ti + 1) * tblock],
                &cache.v[ti * tblock..(ti + 1) * tblock],
                &cache.probs[f * pblock..(f + 1) * pblock],
                &dctx[f * block..(f + 1) * block],
                c,
                self.heads,
                cache.injected,
                &mut dq[f * block..(f + 1) * block],
                dk_t,
                dv_t,
            );
        }
        let dx = self.q.backward(p, &cache.x, &dq, grads.as_deref_mut());
        let mut dtext = self.k.backward(p, &cache.text, &dk, grads.as_deref_mut());
        add_assign(&mut dtext, &self.v.backward(p, &cache.text, &dv, grads));
        (dx, dtext)
    }
}
