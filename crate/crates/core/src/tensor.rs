//! Dense row-major `f64` tensors and the pointwise primitives the rest of
//! the crate composes.
//!
//! Every primitive checks its output for NaN/Inf and reports
//! [`Error::NonFinite`] instead of letting the value propagate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// `sqrt(2/pi)` for the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh form of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;
/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a single element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Compensated (Neumaier) sum.
    pub fn sum(&self) -> f64 {
        neumaier_sum(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self, other)?;
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
        .check_finite(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map(|v| v * s).check_finite("scale")
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.map(|v| v + s).check_finite("add_scalar")
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        same_shape("axpy", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "axpy" })
        }
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    /// Normalizes over the trailing contiguous `axes`, then applies a
    /// per-channel affine (`gain`, `bias` indexed along `channel_axis`).
    pub fn layer_norm(
        &self,
        axes: &[usize],
        channel_axis: usize,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let layout = NormLayout::new(self.shape(), axes, channel_axis)?;
        layout.check_affine(gain, bias)?;
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let mut out = vec![0.0; self.len()];
        for g in 0..layout.groups {
            let range = g * layout.group_len..(g + 1) * layout.group_len;
            let (mean, inv_std) = group_stats(&self.data[range.clone()], eps);
            let c = layout.channel_of(g);
            let (gn, bs) = (gain.data[c], bias.data[c]);
            for i in range {
                out[i] = gn * ((self.data[i] - mean) * inv_std) + bs;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
        .check_finite("layer_norm")
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, &a.shape, &b.shape));
    }
    Ok(())
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn neumaier_sum(xs: &[f64]) -> f64 {
    neumaier(xs.iter().copied())
}

fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean and `1/sqrt(var + eps)` (population variance).
pub(crate) fn group_stats(xs: &[f64], eps: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = neumaier_sum(xs) / n;
    let var = neumaier(xs.iter().map(|v| (v - mean) * (v - mean))) / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// How a tensor splits into normalization groups.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NormLayout {
    pub groups: usize,
    pub group_len: usize,
    pub channels: usize,
    /// Number of consecutive groups sharing one channel index.
    channel_stride: usize,
}

impl NormLayout {
    pub fn new(shape: &[usize], axes: &[usize], channel_axis: usize) -> Result<Self> {
        let rank = shape.len();
        let bad = || Error::InvalidAxes {
            axes: axes.to_vec(),
            rank,
        };
        let first = *axes.first().ok_or_else(bad)?;
        // Only trailing contiguous axis sets are supported.
        let contiguous = axes.iter().enumerate().all(|(i, &a)| a == first + i);
        if !contiguous || first + axes.len() != rank || channel_axis >= first {
            return Err(bad());
        }
        let groups: usize = shape[..first].iter().product();
        let group_len: usize = shape[first..].iter().product();
        let channel_stride: usize = shape[channel_axis + 1..first].iter().product();
        Ok(Self {
            groups,
            group_len,
            channels: shape[channel_axis],
            channel_stride,
        })
    }

    pub fn channel_of(&self, group: usize) -> usize {
        (group / self.channel_stride) % self.channels
    }

    pub fn check_affine(&self, gain: &Tensor, bias: &Tensor) -> Result<()> {
        for t in [gain, bias] {
            if t.shape() != [self.channels] {
                return Err(Error::shape("layer_norm affine", t.shape(), &[self.channels]));
            }
        }
        Ok(())
    }
}

/// Seeded generator used for every random draw in the crate.
///
/// Backed by ChaCha8 (a counter-based stream cipher), so a given seed yields
/// the same sequence on every platform. Normal draws use the ziggurat sampler
/// from `rand_distr`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.inner)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Derives an independent child generator, e.g. one per sample.
    pub fn fork(&mut self) -> Rng {
        let seed = rand::RngCore::next_u64(&mut self.inner);
        Rng::new(seed)
    }
}

/// I.i.d. standard normal tensor.
pub fn seeded_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.normal()).collect(),
    }
}
