//! Minimal f32 layer engine with explicit backward passes.
//!
//! Activations are channels-last: an `n × h × w × c` buffer doubles as an
//! `(n·h·w) × c` row-major matrix, so linear layers are single GEMMs and
//! attention sees `n × (h·w) × c` token blocks without copies.

mod adam;
mod layers;

pub use adam::Adam;
pub(crate) use layers::*;

use std::ops::Range;

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl ParamEntry {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// All trainable scalars of a model in one flat buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f32>,
}

pub(crate) enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Const(f32),
}

impl ParamStore {
    pub(crate) fn add<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                self.data.extend((0..len).map(|_| rng.gen_range(-bound..bound)));
            }
            Init::Const(v) => self.data.extend(std::iter::repeat_n(v, len)),
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        ParamId(self.entries.len() - 1)
    }

    pub(crate) fn get(&self, id: ParamId) -> &[f32] {
        &self.data[self.entries[id.0].range()]
    }

    pub(crate) fn range(&self, id: ParamId) -> Range<usize> {
        self.entries[id.0].range()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.data.len()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn entry(&self, name: &str) -> Option<(&ParamEntry, &[f32])> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| (e, &self.data[e.range()]))
    }
}

/// Strided matrix view: element `(i, j)` lives at `off + i*rs + j*cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(ld: usize) -> Self {
        View { off: 0, rs: ld, cs: 1 }
    }

    /// Transposed view of a row-major buffer with leading dimension `ld`.
    pub fn cols(ld: usize) -> Self {
        View { off: 0, rs: 1, cs: ld }
    }

    pub fn at(self, off: usize) -> Self {
        View { off, ..self }
    }

    fn last(self, rows: usize, cols: usize) -> usize {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha * a·b + beta * c` for an `m×k` times `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    av: View,
    b: &[f32],
    bv: View,
    beta: f32,
    c: &mut [f32],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.off + i * cv.rs + j * cv.cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: every index touched is bounded by the asserts above, and `c`
    // is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, View::rows(k), b, View::rows(n), 0.0, &mut c, View::rows(n));
    c
}

/// `c += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub(crate) fn matmul_tn_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    gemm(m, k, n, 1.0, a, View::cols(m), b, View::rows(n), 1.0, c, View::rows(n));
}

/// `a (m×k) · bᵀ` where `b` is stored `n×k`.
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, View::rows(k), b, View::cols(k), 0.0, &mut c, View::rows(n));
    c
}

/// `exp` for f32 via range reduction and a degree-6 polynomial; relative
/// error below 2e-7 and branch-free, so slice loops vectorize.
#[inline(always)]
#[allow(clippy::manual_clamp)] // max/min vectorizes; clamp would keep NaN
pub(crate) fn exp_f32(x: f32) -> f32 {
    // Round-to-nearest via the 1.5·2^23 trick: the integer part lands in the
    // low mantissa bits, avoiding float-to-int conversions that block
    // vectorization.
    const MAGIC: f32 = 12_582_912.0;
    let x = x.max(-87.0).min(88.0);
    let t = x * std::f32::consts::LOG2_E + MAGIC;
    let n = t - MAGIC;
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0
            + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let ni = t.to_bits().wrapping_sub(MAGIC.to_bits());
    p * f32::from_bits(ni.wrapping_add(127) << 23)
}

pub(crate) fn add_assign(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Gradient buffer slice for one parameter, if gradients are being collected.
pub(crate) fn grad_slice<'a>(grads: &'a mut Option<&mut [f32]>, p: &ParamStore, id: ParamId) -> Option<&'a mut [f32]> {
    grads.as_deref_mut().map(|g| &mut g[p.range(id)])
}
