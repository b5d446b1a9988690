//! Dense frame stacks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A stack of `frames` images laid out frame-major as F×C×H×W.
///
/// The same type carries pixel videos (values in `[0, 1]`), diffusion latents
/// and noise predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl VideoTensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(len, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Self {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { shape, data }
    }

    /// Stacks equally-shaped C×H×W frames.
    pub fn from_frames(frames: &[Vec<f64>], channels: usize, height: usize, width: usize) -> Result<Self> {
        let per = channels * height * width;
        let mut data = Vec::with_capacity(per * frames.len());
        for f in frames {
            if f.len() != per {
                return Err(Error::shape(per, f.len()));
            }
            data.extend_from_slice(f);
        }
        Self::new([frames.len(), channels, height, width], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.frame_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Value at (frame, channel, y, x).
    pub fn at(&self, f: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((f * ch + c) * h + y) * w + x]
    }

    pub fn set(&mut self, f: usize, c: usize, y: usize, x: usize, v: f64) {
        let [_, ch, h, w] = self.shape;
        self.data[((f * ch + c) * h + y) * w + x] = v;
    }

    /// Frames `order[0], order[1], ...` of `self`, in that order.
    pub fn select_frames(&self, order: &[usize]) -> Self {
        let n = self.frame_len();
        let mut data = Vec::with_capacity(n * order.len());
        for &i in order {
            data.extend_from_slice(self.frame(i));
        }
        Self {
            shape: [order.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self {
            shape: self.shape,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn sum_sq_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        Ok(self.sum_sq_diff(other)? / self.data.len().max(1) as f64)
    }

    /// Pixel range `[0, 1]` to the model range `[-1, 1]`.
    pub fn to_model_range(&self) -> Self {
        self.map(|v| 2.0 * v - 1.0)
    }

    /// Model range back to clamped pixel range.
    pub fn to_pixel_range(&self) -> Self {
        self.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
    }
}
