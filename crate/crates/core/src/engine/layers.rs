use rand::Rng;

use super::{add_assign, exp_f32, grad_slice, matmul, matmul_nt, matmul_tn_acc, Init, ParamId, ParamStore};

const NORM_EPS: f64 = 1e-5;

/// Affine map over the last axis: `y = x·W + b`, `W` stored `din × dout`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = store.add(&format!("{name}.weight"), &[din, dout], Init::FanIn(din), rng);
        let b = bias.then(|| store.add(&format!("{name}.bias"), &[dout], Init::FanIn(din), rng));
        Self { w, b, din, dout }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f32]) -> Vec<f32> {
        let rows = x.len() / self.din;
        let mut y = matmul(x, p.get(self.w), rows, self.din, self.dout);
        if let Some(b) = self.b {
            let b = p.get(b);
            for row in y.chunks_exact_mut(self.dout) {
                add_assign(row, b);
            }
        }
        y
    }

    pub fn backward(&self, p: &ParamStore, x: &[f32], dy: &[f32], mut grads: Option<&mut [f32]>) -> Vec<f32> {
        let rows = x.len() / self.din;
        if let Some(g) = grad_slice(&mut grads, p, self.w) {
            matmul_tn_acc(x, dy, self.din, rows, self.dout, g);
        }
        if let Some(b) = self.b {
            if let Some(g) = grad_slice(&mut grads, p, b) {
                for row in dy.chunks_exact(self.dout) {
                    add_assign(g, row);
                }
            }
        }
        matmul_nt(dy, p.get(self.w), rows, self.dout, self.din)
    }
}

/// 3×3 convolution with zero padding 1 and stride 1 or 2, channels-last.
#[derive(Clone, Debug)]
pub(crate) struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let fan_in = 9 * cin;
        let w = store.add(&format!("{name}.weight"), &[3, 3, cin, cout], Init::FanIn(fan_in), rng);
        let b = store.add(&format!("{name}.bias"), &[cout], Init::FanIn(fan_in), rng);
        Self {
            w,
            b,
            cin,
            cout,
            stride,
        }
    }

    pub fn out_size(&self, side: usize) -> usize {
        (side - 1) / self.stride + 1
    }

    fn im2col(&self, x: &[f32], n: usize, h: usize, w: usize) -> Vec<f32> {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let cin = self.cin;
        let kc = 9 * cin;
        let mut col = vec![0.0; n * ho * wo * kc];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * kc;
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let dst = row + (ky * 3 + kx) * cin;
                            col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], n: usize, h: usize, w: usize) -> Vec<f32> {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let cin = self.cin;
        let kc = 9 * cin;
        let mut x = vec![0.0; n * h * w * cin];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * kc;
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let src = row + (ky * 3 + kx) * cin;
                            add_assign(&mut x[dst..dst + cin], &col[src..src + cin]);
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, p: &ParamStore, x: &[f32], n: usize, h: usize, w: usize) -> Vec<f32> {
        let rows = n * self.out_size(h) * self.out_size(w);
        let col = self.im2col(x, n, h, w);
        let mut y = matmul(&col, p.get(self.w), rows, 9 * self.cin, self.cout);
        let b = p.get(self.b);
        for row in y.chunks_exact_mut(self.cout) {
            add_assign(row, b);
        }
        y
    }

    /// Returns the input gradient, or an empty vector when `need_dx` is false.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &ParamStore,
        x: &[f32],
        n: usize,
        h: usize,
        w: usize,
        dy: &[f32],
        mut grads: Option<&mut [f32]>,
        need_dx: bool,
    ) -> Vec<f32> {
        let rows = n * self.out_size(h) * self.out_size(w);
        let kc = 9 * self.cin;
        if grads.is_some() {
            let col = self.im2col(x, n, h, w);
            if let Some(g) = grad_slice(&mut grads, p, self.w) {
                matmul_tn_acc(&col, dy, kc, rows, self.cout, g);
            }
            if let Some(g) = grad_slice(&mut grads, p, self.b) {
                for row in dy.chunks_exact(self.cout) {
                    add_assign(g, row);
                }
            }
        }
        if !need_dx {
            return Vec::new();
        }
        let dcol = matmul_nt(dy, p.get(self.w), rows, self.cout, kc);
        self.col2im(&dcol, n, h, w)
    }
}

/// Per-group mean and reciprocal standard deviation saved for backward.
#[derive(Clone, Debug, Default)]
pub(crate) struct NormStats {
    mean: Vec<f32>,
    rstd: Vec<f32>,
}

/// Group normalization over (spatial, channel-group) per sample.
#[derive(Clone, Debug)]
pub(crate) struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize, groups: usize) -> Self {
        assert!(c.is_multiple_of(groups), "channels {c} not divisible by {groups} groups");
        let gamma = store.add(&format!("{name}.gamma"), &[c], Init::Const(1.0), rng);
        let beta = store.add(&format!("{name}.beta"), &[c], Init::Const(0.0), rng);
        Self { gamma, beta, c, groups }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f32], n: usize) -> (Vec<f32>, NormStats) {
        let (c, g) = (self.c, self.groups);
        let cg = c / g;
        let hw = x.len() / (n * c);
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let mut y = vec![0.0; x.len()];
        let mut st = NormStats {
            mean: vec![0.0; n * g],
            rstd: vec![0.0; n * g],
        };
        let count = (hw * cg) as f64;
        let mut s = vec![0.0f64; c];
        let mut s2 = vec![0.0f64; c];
        let mut scale = vec![0.0f32; c];
        let mut shift = vec![0.0f32; c];
        for b in 0..n {
            let xs = &x[b * hw * c..(b + 1) * hw * c];
            s.fill(0.0);
            s2.fill(0.0);
            for row in xs.chunks_exact(c) {
                for ((a, q), &v) in s.iter_mut().zip(s2.iter_mut()).zip(row) {
                    let v = v as f64;
                    *a += v;
                    *q += v * v;
                }
            }
            for gi in 0..g {
                let sum: f64 = s[gi * cg..(gi + 1) * cg].iter().sum();
                let sum2: f64 = s2[gi * cg..(gi + 1) * cg].iter().sum();
                let mean = sum / count;
                let var = (sum2 / count - mean * mean).max(0.0);
                let rstd = 1.0 / (var + NORM_EPS).sqrt();
                st.mean[b * g + gi] = mean as f32;
                st.rstd[b * g + gi] = rstd as f32;
                for ch in gi * cg..(gi + 1) * cg {
                    scale[ch] = gamma[ch] * rstd as f32;
                    shift[ch] = beta[ch] - mean as f32 * scale[ch];
                }
            }
            for (yr, xr) in y[b * hw * c..(b + 1) * hw * c].chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                for (((o, &v), &a), &sh) in yr.iter_mut().zip(xr).zip(&scale).zip(&shift) {
                    *o = v * a + sh;
                }
            }
        }
        (y, st)
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        x: &[f32],
        st: &NormStats,
        dy: &[f32],
        n: usize,
        mut grads: Option<&mut [f32]>,
    ) -> Vec<f32> {
        let (c, g) = (self.c, self.groups);
        let cg = c / g;
        let hw = x.len() / (n * c);
        let gamma = p.get(self.gamma);
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        let mut dx = vec![0.0; x.len()];
        let count = (hw * cg) as f64;
        let mut sd = vec![0.0f64; c];
        let mut sdx = vec![0.0f64; c];
        let (mut ca, mut cb, mut cc) = (vec![0.0f32; c], vec![0.0f32; c], vec![0.0f32; c]);
        for b in 0..n {
            let range = b * hw * c..(b + 1) * hw * c;
            sd.fill(0.0);
            sdx.fill(0.0);
            for (dr, xr) in dy[range.clone()].chunks_exact(c).zip(x[range.clone()].chunks_exact(c)) {
                for (((a, q), &d), &v) in sd.iter_mut().zip(sdx.iter_mut()).zip(dr).zip(xr) {
                    *a += d as f64;
                    *q += (d * v) as f64;
                }
            }
            for gi in 0..g {
                let (mean, rstd) = (st.mean[b * g + gi] as f64, st.rstd[b * g + gi] as f64);
                let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
                for ch in gi * cg..(gi + 1) * cg {
                    // sum over positions of dy * xhat for this channel
                    let dxh = (sdx[ch] - mean * sd[ch]) * rstd;
                    dgamma[ch] += dxh as f32;
                    dbeta[ch] += sd[ch] as f32;
                    sum_d += gamma[ch] as f64 * sd[ch];
                    sum_dx += gamma[ch] as f64 * dxh;
                }
                let md = sum_d / count;
                let mdx = sum_dx / count;
                for ch in gi * cg..(gi + 1) * cg {
                    ca[ch] = (rstd * gamma[ch] as f64) as f32;
                    cb[ch] = (-rstd * rstd * mdx) as f32;
                    cc[ch] = (-rstd * md + rstd * rstd * mdx * mean) as f32;
                }
            }
            for ((o, dr), xr) in dx[range.clone()]
                .chunks_exact_mut(c)
                .zip(dy[range.clone()].chunks_exact(c))
                .zip(x[range].chunks_exact(c))
            {
                for i in 0..c {
                    o[i] = ca[i] * dr[i] + cb[i] * xr[i] + cc[i];
                }
            }
        }
        if let Some(gg) = grad_slice(&mut grads, p, self.gamma) {
            add_assign(gg, &dgamma);
        }
        if let Some(gb) = grad_slice(&mut grads, p, self.beta) {
            add_assign(gb, &dbeta);
        }
        dx
    }
}

/// Layer normalization over the channel axis of each token.
#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), &[c], Init::Const(1.0), rng);
        let beta = store.add(&format!("{name}.beta"), &[c], Init::Const(0.0), rng);
        Self { gamma, beta, c }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f32]) -> (Vec<f32>, NormStats) {
        let c = self.c;
        let rows = x.len() / c;
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let mut y = vec![0.0; x.len()];
        let mut st = NormStats {
            mean: vec![0.0; rows],
            rstd: vec![0.0; rows],
        };
        for r in 0..rows {
            let xs = &x[r * c..(r + 1) * c];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = (1.0 / (var + NORM_EPS).sqrt()) as f32;
            let mean = mean as f32;
            st.mean[r] = mean;
            st.rstd[r] = rstd;
            for ch in 0..c {
                y[r * c + ch] = gamma[ch] * (xs[ch] - mean) * rstd + beta[ch];
            }
        }
        (y, st)
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        x: &[f32],
        st: &NormStats,
        dy: &[f32],
        mut grads: Option<&mut [f32]>,
    ) -> Vec<f32> {
        let c = self.c;
        let rows = x.len() / c;
        let gamma = p.get(self.gamma);
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        let mut dx = vec![0.0; x.len()];
        for r in 0..rows {
            let (mean, rstd) = (st.mean[r], st.rstd[r]);
            let (mut sum_d, mut sum_dx) = (0.0f32, 0.0f32);
            for ch in 0..c {
                let i = r * c + ch;
                let xhat = (x[i] - mean) * rstd;
                let d = dy[i] * gamma[ch];
                sum_d += d;
                sum_dx += d * xhat;
                dgamma[ch] += dy[i] * xhat;
                dbeta[ch] += dy[i];
            }
            let (md, mdx) = (sum_d / c as f32, sum_dx / c as f32);
            for ch in 0..c {
                let i = r * c + ch;
                let xhat = (x[i] - mean) * rstd;
                dx[i] = rstd * (dy[i] * gamma[ch] - md - xhat * mdx);
            }
        }
        if let Some(gg) = grad_slice(&mut grads, p, self.gamma) {
            add_assign(gg, &dgamma);
        }
        if let Some(gb) = grad_slice(&mut grads, p, self.beta) {
            add_assign(gb, &dbeta);
        }
        dx
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + exp_f32(-x))
}

pub(crate) fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub(crate) fn silu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Nearest-neighbour 2× upsampling of an `n × h × w × c` buffer.
pub(crate) fn upsample2(x: &[f32], n: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![0.0; n * h2 * w2 * c];
    for b in 0..n {
        for oy in 0..h2 {
            for ox in 0..w2 {
                let src = ((b * h + oy / 2) * w + ox / 2) * c;
                let dst = ((b * h2 + oy) * w2 + ox) * c;
                y[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]; `h`, `w` are the pre-upsampling sizes.
pub(crate) fn upsample2_backward(dy: &[f32], n: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0; n * h * w * c];
    for b in 0..n {
        for oy in 0..h2 {
            for ox in 0..w2 {
                let dst = ((b * h + oy / 2) * w + ox / 2) * c;
                let src = ((b * h2 + oy) * w2 + ox) * c;
                add_assign(&mut dx[dst..dst + c], &dy[src..src + c]);
            }
        }
    }
    dx
}

/// Concatenates two channels-last buffers along the channel axis.
pub(crate) fn concat_channels(a: &[f32], ca: usize, b: &[f32], cb: usize) -> Vec<f32> {
    let rows = a.len() / ca;
    debug_assert_eq!(rows * cb, b.len());
    let mut y = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        y.extend_from_slice(&a[r * ca..(r + 1) * ca]);
        y.extend_from_slice(&b[r * cb..(r + 1) * cb]);
    }
    y
}

pub(crate) fn split_channels(d: &[f32], ca: usize, cb: usize) -> (Vec<f32>, Vec<f32>) {
    let c = ca + cb;
    let rows = d.len() / c;
    let mut a = Vec::with_capacity(rows * ca);
    let mut b = Vec::with_capacity(rows * cb);
    for r in 0..rows {
        a.extend_from_slice(&d[r * c..r * c + ca]);
        b.extend_from_slice(&d[r * c + ca..(r + 1) * c]);
    }
    (a, b)
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `[cos | sin]`.
pub(crate) fn timestep_embedding(ts: &[f32], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        out.extend(args.iter().map(|a| a.cos() as f32));
        out.extend(args.iter().map(|a| a.sin() as f32));
    }
    out
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-difference checks of the hand-written backward passes.

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub fn randn(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Compares the analytic gradient `analytic` of `loss` at `x` with
    /// central differences on a handful of coordinates.
    pub fn check(x: &[f32], analytic: &[f32], loss: impl Fn(&[f32]) -> f64, h: f32, tol: f64) {
        assert_eq!(x.len(), analytic.len());
        let step = (x.len() / 23).max(1);
        for i in (0..x.len()).step_by(step) {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            let an = analytic[i] as f64;
            let scale = fd.abs().max(an.abs()).max(1e-2);
            assert!(((fd - an) / scale).abs() < tol, "coord {i}: finite-difference {fd} vs analytic {an}");
        }
    }

    /// `sum(y * r)` in f64.
    pub fn project(y: &[f32], r: &[f32]) -> f64 {
        y.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check, project, randn};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with<F: FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> T, T>(f: F) -> (ParamStore, T) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::default();
        let t = f(&mut s, &mut rng);
        (s, t)
    }

    /// Checks both input and parameter gradients of a layer with loss `sum(y * r)`.
    fn check_layer(
        store: &ParamStore,
        x: &[f32],
        fwd: impl Fn(&ParamStore, &[f32]) -> Vec<f32>,
        bwd: impl Fn(&ParamStore, &[f32], &[f32], &mut [f32]) -> Vec<f32>,
    ) {
        let y = fwd(store, x);
        let r = randn(y.len(), 99);
        let mut g = vec![0.0; store.num_scalars()];
        let dx = bwd(store, x, &r, &mut g);
        check(x, &dx, |xx| project(&fwd(store, xx), &r), 1e-2, 2e-2);
        let params = store.data().to_vec();
        check(
            &params,
            &g,
            |pp| {
                let mut s = store.clone();
                s.data_mut().copy_from_slice(pp);
                project(&fwd(&s, x), &r)
            },
            1e-2,
            2e-2,
        );
    }

    #[test]
    fn linear_gradients() {
        let (s, lin) = store_with(|s, r| Linear::new(s, r, "l", 5, 4, true));
        let x = randn(3 * 5, 1);
        check_layer(&s, &x, |p, x| lin.forward(p, x), |p, x, dy, g| lin.backward(p, x, dy, Some(g)));
    }

    #[test]
    fn conv_gradients_both_strides() {
        for stride in [1, 2] {
            let (s, conv) = store_with(|s, r| Conv3x3::new(s, r, "c", 3, 4, stride));
            let (n, h, w) = (2, 6, 6);
            let x = randn(n * h * w * 3, 2);
            check_layer(
                &s,
                &x,
                |p, x| conv.forward(p, x, n, h, w),
                |p, x, dy, g| conv.backward(p, x, n, h, w, dy, Some(g), true),
            );
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (s, conv) = store_with(|s, r| Conv3x3::new(s, r, "c", 2, 3, 2));
        let (n, h, w) = (1, 5, 4);
        let x = randn(n * h * w * 2, 3);
        let y = conv.forward(&s, &x, n, h, w);
        let (ho, wo) = (conv.out_size(h), conv.out_size(w));
        assert_eq!((ho, wo), (3, 2));
        let wt = s.get(conv.w);
        let bias = s.get(conv.b);
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..3 {
                    let mut acc = bias[co] as f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..2 {
                                let xv = x[(iy as usize * w + ix as usize) * 2 + ci] as f64;
                                acc += xv * wt[((ky * 3 + kx) * 2 + ci) * 3 + co] as f64;
                            }
                        }
                    }
                    let got = y[(oy * wo + ox) * 3 + co] as f64;
                    assert!((got - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn group_norm_gradients() {
        let (mut s, gn) = store_with(|s, r| GroupNorm::new(s, r, "g", 4, 2));
        // Non-trivial affine parameters.
        let perturb = randn(s.num_scalars(), 5);
        for (p, d) in s.data_mut().iter_mut().zip(perturb) {
            *p += 0.3 * d;
        }
        let n = 2;
        let x = randn(n * 9 * 4, 4);
        check_layer(
            &s,
            &x,
            |p, x| gn.forward(p, x, n).0,
            |p, x, dy, g| {
                let (_, st) = gn.forward(p, x, n);
                gn.backward(p, x, &st, dy, n, Some(g))
            },
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let (mut s, ln) = store_with(|s, r| LayerNorm::new(s, r, "ln", 6));
        let perturb = randn(s.num_scalars(), 6);
        for (p, d) in s.data_mut().iter_mut().zip(perturb) {
            *p += 0.3 * d;
        }
        let x = randn(5 * 6, 7);
        check_layer(
            &s,
            &x,
            |p, x| ln.forward(p, x).0,
            |p, x, dy, g| {
                let (_, st) = ln.forward(p, x);
                ln.backward(p, x, &st, dy, Some(g))
            },
        );
    }

    #[test]
    fn group_norm_normalizes() {
        let (s, gn) = store_with(|s, r| GroupNorm::new(s, r, "g", 4, 1));
        let x: Vec<f32> = (0..16).map(|v| v as f32 * 3.0 + 1.0).collect();
        let (y, _) = gn.forward(&s, &x, 1);
        let mean: f32 = y.iter().sum::<f32>() / 16.0;
        let var: f32 = y.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn silu_and_upsample_adjoints() {
        let x = randn(20, 8);
        let r = randn(20, 9);
        let dx = silu_backward(&x, &r);
        check(&x, &dx, |xx| project(&silu(xx), &r), 1e-2, 1e-2);

        let (n, h, w, c) = (2, 2, 3, 2);
        let x = randn(n * h * w * c, 10);
        let r = randn(n * 4 * h * w * c, 11);
        let dx = upsample2_backward(&r, n, h, w, c);
        check(&x, &dx, |xx| project(&upsample2(xx, n, h, w, c), &r), 1e-2, 1e-3);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = randn(6, 1);
        let b = randn(9, 2);
        let cat = concat_channels(&a, 2, &b, 3);
        assert_eq!(cat.len(), 15);
        let (a2, b2) = split_channels(&cat, 2, 3);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn timestep_embedding_shape_and_origin() {
        let e = timestep_embedding(&[0.0, 10.0], 8);
        assert_eq!(e.len(), 16);
        assert_eq!(&e[..4], &[1.0; 4]);
        assert_eq!(&e[4..8], &[0.0; 4]);
    }
}
